"""Torque-limited toy environments with tracking rewards.

Two tasks, both integrated with semi-implicit Euler at ``dt = 0.005`` s:

``point_mass``
    Three decoupled unit masses with linear damping, read as a planar base
    ``(x, y)`` plus a height coordinate ``h``.  Commands are
    ``(v_x, v_y, h)`` targets.  Tracking terms follow the quadruped reward
    weights ``10dt, 5dt, 7dt``.
``pendulum``
    Torque-limited swing-up of a point-mass pendulum (``theta = 0`` hanging
    down).  The command is the target angle ``pi``.

All arrays carry an optional leading batch axis, so one call advances any
number of independent environments.

Observations follow ``[w, g, q, qdot, cmd, tau, zeta]``: ``w`` is the vertical
rate (point mass) or angular rate (pendulum), ``g`` is a constant 1.0 gravity
indicator, ``cmd`` is the effective (schedule-scaled) target, ``tau`` is the last
torque divided by ``a_limit`` and ``zeta`` is the fatigue state divided by its
fixed point under full torque.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np

from .errors import NonFiniteInput

DT = 0.005
FATIGUE_GAMMA = 0.95
DIVERGENCE_LIMIT = 1e3
KERNEL_WIDTH = 0.25

W_FATIGUE = -0.05
W_JOINT_ACC = -1e-6


class EnvKind(str, Enum):
    POINT_MASS = "point_mass"
    PENDULUM = "pendulum"


# Tracking weights in units of dt, per command component.
TRACKING_WEIGHTS = {
    EnvKind.POINT_MASS: (10.0, 5.0, 7.0),
    EnvKind.PENDULUM: (10.0, 5.0),
}

# Reset ranges: uniform in [lo, hi] per component.
_RESET = {
    EnvKind.POINT_MASS: dict(
        q=((-0.05, 0.05),) * 3,
        qdot=((-0.05, 0.05),) * 3,
        cmd=((-1.0, 1.0), (-0.5, 0.5), (0.2, 0.6)),
    ),
    EnvKind.PENDULUM: dict(
        q=((-0.1, 0.1),),
        qdot=((-0.1, 0.1),),
        cmd=((math.pi, math.pi),),
    ),
}

_DEFAULTS = {
    EnvKind.POINT_MASS: dict(a_limit=32.0, horizon=100, damping=1.0),
    EnvKind.PENDULUM: dict(a_limit=3.0, horizon=400, damping=0.0),
}


@dataclass(frozen=True)
class EnvSpec:
    kind: EnvKind = EnvKind.POINT_MASS
    a_limit: float = None
    dt: float = DT
    horizon: int = None
    cmd_scaling: bool = True
    damping: float = None
    mass: float = 1.0
    length: float = 1.0
    gravity: float = 9.81
    fatigue_gamma: float = FATIGUE_GAMMA
    fatigue_scale: float = None
    cmd_range: tuple = None

    def __post_init__(self):
        object.__setattr__(self, "kind", EnvKind(self.kind))
        if self.cmd_range is None:
            object.__setattr__(self, "cmd_range", _RESET[self.kind]["cmd"])
        rng = tuple((float(lo), float(hi)) for lo, hi in self.cmd_range)
        if len(rng) != len(_RESET[self.kind]["cmd"]):
            raise ValueError(f"cmd_range needs {len(_RESET[self.kind]['cmd'])} (lo, hi) pairs")
        if any(lo > hi for lo, hi in rng):
            raise ValueError("cmd_range entries need lo <= hi")
        object.__setattr__(self, "cmd_range", rng)
        for key, val in _DEFAULTS[self.kind].items():
            if getattr(self, key) is None:
                object.__setattr__(self, key, val)
        if self.fatigue_scale is None:
            object.__setattr__(self, "fatigue_scale", 1.0 / self.a_limit)
        if not self.dt > 0:
            raise ValueError("dt must be > 0")
        if int(self.horizon) != self.horizon or self.horizon < 1:
            raise ValueError("horizon must be an integer >= 1")
        object.__setattr__(self, "horizon", int(self.horizon))
        if not self.a_limit > 0:
            raise ValueError("a_limit must be > 0")
        if not 0 < self.fatigue_gamma < 1:
            raise ValueError("fatigue_gamma must lie in (0, 1)")

    @property
    def d_act(self):
        return 3 if self.kind is EnvKind.POINT_MASS else 1

    @property
    def d_cmd(self):
        return len(_RESET[self.kind]["cmd"])

    @property
    def d_obs(self):
        if self.kind is EnvKind.POINT_MASS:
            return 2 + 3 + 3 + 3 + 3 + 3
        return 2 + 2 + 1 + 1 + 1 + 1

    @property
    def tracking_weights(self):
        return tuple(w * self.dt for w in TRACKING_WEIGHTS[self.kind])

    @property
    def tracking_weight_vector(self):
        return np.array(self.tracking_weights)

    @property
    def zeta_ref(self):
        """Fatigue fixed point under constant full torque, starting from zero."""
        return fixed_point_fatigue(self.a_limit, self.dt, self.fatigue_gamma)

    @property
    def reset_ranges(self):
        return dict(_RESET[self.kind], cmd=self.cmd_range)


@dataclass
class EnvState:
    q: np.ndarray
    qdot: np.ndarray
    cmd: np.ndarray
    zeta: np.ndarray
    tau: np.ndarray
    step_count: np.ndarray = field(default_factory=lambda: np.zeros((), dtype=int))

    @property
    def batch_shape(self):
        return self.q.shape[:-1]


def _uniform(rng, ranges):
    lo = np.array([r[0] for r in ranges])
    hi = np.array([r[1] for r in ranges])
    return lo + (hi - lo) * rng.random(len(ranges))


def env_reset(spec: EnvSpec, rng) -> EnvState:
    """Fresh state drawn from the documented reset ranges; zero fatigue."""
    r = spec.reset_ranges
    q = _uniform(rng, r["q"])
    qdot = _uniform(rng, r["qdot"])
    cmd = _uniform(rng, r["cmd"])
    return EnvState(q, qdot, cmd, np.zeros(spec.d_act), np.zeros(spec.d_act), np.zeros((), dtype=int))


def reset_batch(spec: EnvSpec, rngs) -> EnvState:
    """Stack one reset per generator into a batched state."""
    states = [env_reset(spec, rng) for rng in rngs]
    return EnvState(
        *(np.stack([getattr(s, name) for s in states]) for name in ("q", "qdot", "cmd", "zeta", "tau")),
        np.zeros(len(states), dtype=int),
    )


def fatigue_update(zeta, torque, dt=DT, gamma_f=FATIGUE_GAMMA):
    """Discounted accumulation of absolute torque: ``(zeta + |tau| dt) * gamma``."""
    return (np.asarray(zeta, dtype=float) + np.abs(torque) * dt) * gamma_f


def fixed_point_fatigue(torque_abs, dt=DT, gamma_f=FATIGUE_GAMMA):
    return gamma_f * torque_abs * dt / (1.0 - gamma_f)


def tracking_kernel(err):
    return np.exp(-np.square(err) / KERNEL_WIDTH)


def acceleration(spec: EnvSpec, state: EnvState, torque):
    """Generalized acceleration under ``torque`` at ``state``."""
    if spec.kind is EnvKind.POINT_MASS:
        return torque / spec.mass - spec.damping * state.qdot
    ml2 = spec.mass * spec.length**2
    return (torque - spec.mass * spec.gravity * spec.length * np.sin(state.q)) / ml2 - spec.damping * state.qdot


def _wrap(angle):
    return (angle + math.pi) % (2 * math.pi) - math.pi


def tracking_errors(spec: EnvSpec, state: EnvState, f_t=1.0):
    """Per-component tracking errors against the (optionally scaled) command."""
    scale = f_t if spec.cmd_scaling else 1.0
    target = state.cmd * scale
    if spec.kind is EnvKind.POINT_MASS:
        measured = np.concatenate([state.qdot[..., :2], state.q[..., 2:3]], axis=-1)
        return measured - target
    angle_err = _wrap(state.q - target)
    return np.concatenate([angle_err, state.qdot], axis=-1)


def reward_terms(spec: EnvSpec, state: EnvState, torque, f_t=1.0):
    torque = np.asarray(torque, dtype=float)
    kern = tracking_kernel(tracking_errors(spec, state, f_t))
    tracking = kern @ spec.tracking_weight_vector
    fatigue = (W_FATIGUE * spec.dt * spec.fatigue_scale) * (state.zeta * np.abs(torque)).sum(axis=-1)
    qdd = acceleration(spec, state, torque)
    joint_acc = (W_JOINT_ACC * spec.dt) * (qdd * qdd).sum(axis=-1)
    return {"tracking": tracking, "fatigue": fatigue, "joint_acceleration": joint_acc}


def reward_eval(spec: EnvSpec, state: EnvState, torque, f_t=1.0):
    """Weighted tracking kernels plus fatigue and acceleration penalties."""
    terms = reward_terms(spec, state, torque, f_t)
    return terms["tracking"] + terms["fatigue"] + terms["joint_acceleration"]


def reward_bound(spec: EnvSpec):
    """Upper bound on |per-step reward| for any state inside the divergence guard."""
    n = spec.d_act
    tracking = sum(spec.tracking_weights)
    zeta_max = spec.zeta_ref
    fatigue = abs(W_FATIGUE) * spec.dt * n * zeta_max * spec.a_limit * spec.fatigue_scale
    if spec.kind is EnvKind.POINT_MASS:
        acc = spec.a_limit / spec.mass + spec.damping * DIVERGENCE_LIMIT
    else:
        ml2 = spec.mass * spec.length**2
        acc = (spec.a_limit + spec.mass * spec.gravity * spec.length) / ml2 + spec.damping * DIVERGENCE_LIMIT
    joint_acc = abs(W_JOINT_ACC) * spec.dt * n * acc**2
    return tracking + fatigue + joint_acc


def env_step(spec: EnvSpec, state: EnvState, torque, f_t=1.0):
    """Advance one ``dt``; returns ``(state, reward, done)``.

    ``torque`` must already respect ``|tau| <= a_limit`` (the squash guarantees it).
    """
    torque = np.asarray(torque, dtype=float)
    if not np.isfinite(torque).all():
        raise NonFiniteInput("torque contains NaN or inf")
    if np.abs(torque).max(initial=0.0) > spec.a_limit * (1 + 1e-12):
        raise ValueError(f"torque exceeds a_limit={spec.a_limit}")
    qdd = acceleration(spec, state, torque)
    qdot = state.qdot + qdd * spec.dt
    q = state.q + qdot * spec.dt
    zeta = fatigue_update(state.zeta, torque, spec.dt, spec.fatigue_gamma)
    new = EnvState(q, qdot, state.cmd, zeta, torque, state.step_count + 1)
    reward = reward_eval(spec, new, torque, f_t)
    done = diverged(new) | (new.step_count >= spec.horizon)
    return new, reward, done


def diverged(state: EnvState):
    """True where ``|q|`` or ``|qdot|`` left the divergence guard (or went non-finite)."""
    # NaN fails the <= comparison, so non-finite states also count as diverged
    inside = (np.abs(state.q) <= DIVERGENCE_LIMIT).all(axis=-1) & (np.abs(state.qdot) <= DIVERGENCE_LIMIT).all(axis=-1)
    return ~inside


def truncated(spec: EnvSpec, state: EnvState):
    """True where the episode ended on the time limit rather than by divergence."""
    return (state.step_count >= spec.horizon) & ~diverged(state)


def observe(spec: EnvSpec, state: EnvState, f_t=1.0):
    scale = f_t if spec.cmd_scaling else 1.0
    ones = np.ones(state.batch_shape + (1,))
    tau = state.tau / spec.a_limit
    zeta = state.zeta / spec.zeta_ref
    cmd = state.cmd * scale
    if spec.kind is EnvKind.POINT_MASS:
        w = state.qdot[..., 2:3]
        parts = [w, ones, state.q, state.qdot, cmd, tau, zeta]
    else:
        w = state.qdot
        parts = [w, ones, np.sin(state.q), np.cos(state.q), state.qdot, cmd, tau, zeta]
    return np.concatenate(parts, axis=-1)


def mechanical_energy(spec: EnvSpec, state: EnvState):
    """Kinetic plus potential energy of the pendulum."""
    if spec.kind is not EnvKind.PENDULUM:
        raise ValueError("mechanical energy is defined for the pendulum only")
    ml2 = spec.mass * spec.length**2
    kinetic = 0.5 * ml2 * np.sum(np.square(state.qdot), axis=-1)
    potential = -spec.mass * spec.gravity * spec.length * np.sum(np.cos(state.q), axis=-1)
    return kinetic + potential


def with_overrides(spec: EnvSpec, **kw):
    return replace(spec, **kw)
