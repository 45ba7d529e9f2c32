"""How the action range grows, and what squashing does to a latent action.

Prints f(t) for each schedule kind sized to a 3000-update run, then shows
that inside |a/beta| <= 0.5 the squash is close to the identity while far
outside it saturates at beta.

    python demos/schedules_and_squashing.py
"""

import numpy as np

from gpo_lab import GrowthSchedule, ScheduleKind, schedule_value, squash, unsquash

UPDATES = 3000
A_LIMIT = 32.0


def schedule_table():
    checkpoints = np.array([0, 300, 600, 1200, 1800, 2400, 2999])
    print("f(t) for a run of", UPDATES, "updates")
    print("t        " + "".join(f"{t:>9d}" for t in checkpoints))
    for kind in ScheduleKind:
        sched = GrowthSchedule.for_run(kind, UPDATES, A_LIMIT)
        f = np.atleast_1d(schedule_value(sched, checkpoints))
        print(f"{kind.value:<9}" + "".join(f"{v:>9.4f}" for v in f))
    print()


def squash_table():
    beta = 8.0
    latent = np.array([0.5, 2.0, 4.0, 8.0, 16.0, 64.0])
    executed = squash(latent, beta)
    print(f"squash with beta = {beta}")
    print(f"{'a':>8} {'a/beta':>8} {'a~':>10} {'a~/a':>8} {'back':>10}")
    for a, at, back in zip(latent, executed, unsquash(executed, beta)):
        print(f"{a:8.2f} {a / beta:8.3f} {at:10.5f} {at / a:8.4f} {back:10.5f}")
    print("\nInside |a/beta| <= 0.5 the executed action stays within 8% of the latent one.")


if __name__ == "__main__":
    schedule_table()
    squash_table()
