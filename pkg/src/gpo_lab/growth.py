"""Growth schedules and the smooth action-range transform.

The executed action is ``a~ = beta * tanh(a / beta)`` where ``beta = a_limit * f(t)``
and ``f`` is one of the growth curves below.  ``t`` counts policy updates, so beta
stays fixed for the whole of one rollout.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import SaturationError

F_MIN = 1e-3
CLAMP_EPS = 1e-7


class ScheduleKind(str, Enum):
    NONE = "none"
    LINEAR = "linear"
    SIGMOID = "sigmoid"
    GOMPERTZ = "gompertz"


# Published parameters, in update-index units: (k, t0).
TABLE_I = {
    ScheduleKind.NONE: (0.0, 0.0),
    ScheduleKind.LINEAR: (1.0 / 3000.0, 0.0),
    ScheduleKind.SIGMOID: (-2.3e-3, 3.0e3),
    ScheduleKind.GOMPERTZ: (3e-5, 2.4e4),
}


@dataclass(frozen=True)
class GrowthSchedule:
    kind: ScheduleKind = ScheduleKind.GOMPERTZ
    k: float = 3e-5
    t0: float = 2.4e4
    a_limit: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "kind", ScheduleKind(self.kind))
        if not self.a_limit > 0:
            raise ValueError(f"a_limit must be > 0, got {self.a_limit}")
        if self.kind is ScheduleKind.NONE:
            return
        if not math.isfinite(self.k) or not math.isfinite(self.t0):
            raise ValueError("schedule parameters must be finite")
        if self.kind is ScheduleKind.SIGMOID:
            # The sign of k is ignored (see sigmoid branch of schedule_value).
            if self.k == 0:
                raise ValueError("sigmoid schedule with k=0 never grows")
        elif self.k <= 0:
            raise ValueError(
                f"{self.kind.value} schedule needs k > 0 to be monotone increasing, got k={self.k}"
            )

    @classmethod
    def from_table(cls, kind, a_limit=1.0):
        """Schedule with the published parameters for ``kind``."""
        kind = ScheduleKind(kind)
        k, t0 = TABLE_I[kind]
        return cls(kind, k, t0, a_limit)

    @classmethod
    def for_run(cls, kind, updates, a_limit=1.0):
        """Schedule whose shape matches the published one over a run of ``updates`` updates.

        Linear and sigmoid parameters assume a 3000-update run and are scaled by
        ``updates / 3000``.  Gompertz is placed at ``t0 = 0.6 * updates`` with
        ``k * t0`` held at its published value (0.72), so ``f(0)`` is unchanged.
        """
        kind = ScheduleKind(kind)
        if updates <= 0:
            raise ValueError("updates must be positive")
        if kind is ScheduleKind.NONE:
            return cls(kind, 0.0, 0.0, a_limit)
        k, t0 = TABLE_I[kind]
        if kind is ScheduleKind.GOMPERTZ:
            t0_run = 0.6 * updates
            return cls(kind, k * t0 / t0_run, t0_run, a_limit)
        scale = updates / 3000.0
        return cls(kind, k / scale, t0 * scale, a_limit)

    def value(self, t):
        return schedule_value(self, t)

    def beta(self, t):
        return self.a_limit * schedule_value(self, t)


def schedule_value(sched: GrowthSchedule, t):
    """Growth factor f(t) in (0, 1], floored at ``F_MIN``."""
    t_arr = np.asarray(t, dtype=float)
    if np.any(t_arr < 0):
        raise ValueError("schedule index t must be >= 0")
    kind = sched.kind
    if kind is ScheduleKind.NONE:
        f = np.ones_like(t_arr)
    elif kind is ScheduleKind.LINEAR:
        f = np.clip(sched.k * t_arr, 0.0, 1.0)
    elif kind is ScheduleKind.SIGMOID:
        # Published k is negative, which would make f decrease; use |k|.
        f = 1.0 / (1.0 + np.exp(-abs(sched.k) * (t_arr - sched.t0)))
    elif kind is ScheduleKind.GOMPERTZ:
        f = np.exp(-np.exp(-sched.k * (t_arr - sched.t0)))
    else:  # pragma: no cover
        raise ValueError(f"unknown schedule kind {kind!r}")
    f = np.maximum(f, F_MIN)
    return float(f) if f.ndim == 0 else f


def squash(a, beta):
    """Executed action ``beta * tanh(a / beta)``."""
    if not np.all(np.asarray(beta) > 0):
        raise ValueError("beta must be > 0")
    return beta * np.tanh(np.asarray(a, dtype=float) / beta)


def unsquash(a_tilde, beta, eps=CLAMP_EPS):
    """Latent action ``beta * arctanh(a~ / beta)``.

    Raises SaturationError when any ``|a~/beta| >= 1 - eps``.
    """
    if not np.all(np.asarray(beta) > 0):
        raise ValueError("beta must be > 0")
    u = np.asarray(a_tilde, dtype=float) / beta
    if np.any(~(np.abs(u) < 1.0 - eps)):
        worst = float(np.nanmax(np.abs(u))) if np.any(np.isfinite(u)) else float("nan")
        raise SaturationError(f"|a~/beta| = {worst:.12g} is on the saturation boundary")
    return beta * np.arctanh(u)


def squash_jacobian(a, beta):
    """Derivative d(a~)/da = 1 - tanh^2(a/beta)."""
    th = np.tanh(np.asarray(a, dtype=float) / beta)
    return 1.0 - th * th


def log_jacobian_inverse(a_tilde, beta):
    """Per-element ``-log(1 - (a~/beta)^2)``: the log |d h^-1 / d a~| addend of the density."""
    u = np.asarray(a_tilde, dtype=float) / beta
    return -np.log1p(-u * u)
