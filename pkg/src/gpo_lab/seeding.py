"""Named random substreams derived from one master seed.

Stream ``name`` with extra indices ``i, j, ...`` uses
``SeedSequence(seed, spawn_key=(STREAMS[name], i, j, ...))``.  Keys are fixed
integers, so adding environments never perturbs the policy-init stream.
"""

import numpy as np

STREAMS = {
    "env": 0,
    "policy_init": 1,
    "sampling": 2,
    "theory": 3,
    "shuffle": 4,
}


def substream(seed: int, name: str, *index: int) -> np.random.Generator:
    if seed < 0:
        raise ValueError("seed must be >= 0")
    key = (STREAMS[name], *(int(i) for i in index))
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed), spawn_key=key)))
