"""Rollouts through the growing action transform and the clipped PPO update.

The same update runs for every schedule; a fixed-range baseline is simply the
``none`` schedule.  The growth index ``t`` is the update counter.
"""

from __future__ import annotations

import csv
import math
from collections import deque
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .envs import EnvSpec, env_step, observe, reset_batch, truncated
from .errors import NumericalError
from .growth import GrowthSchedule, ScheduleKind, log_jacobian_inverse, schedule_value, squash
from .policy import (
    PolicyParams,
    backprop_loss,
    forward_mean,
    forward_value,
    gaussian_entropy,
    init_policy,
    latent_log_prob,
    transformed_log_prob,
)
from .seeding import substream

RATIO_MIN = 1e-8
RATIO_MAX = 1e8
_LOG_RATIO_MIN = math.log(RATIO_MIN)
_LOG_RATIO_MAX = math.log(RATIO_MAX)

METRIC_COLUMNS = (
    "update",
    "beta",
    "f",
    "mean_return",
    "std_return",
    "surrogate_loss",
    "value_loss",
    "approx_kl",
    "clip_frac",
    "grad_norm",
    "frac_outside_half",
)


@dataclass(frozen=True)
class TrainerConfig:
    clip_eps: float = 0.2
    gamma: float = 0.99
    lam: float = 0.95
    lr: float = 3e-4
    lr_anneal: bool = False
    updates: int = 3000
    horizon: int = 256
    n_envs: int = 16
    epochs: int = 4
    minibatches: int = 8
    schedule: GrowthSchedule = field(default_factory=lambda: GrowthSchedule.for_run("gompertz", 3000))
    seed: int = 0
    normalize_adv: bool = True
    sigma_mode: str = "learned"
    hidden: tuple = (64, 64)
    log_sigma0: float = 0.0
    vf_coef: float = 0.5
    ent_coef: float = 0.0
    max_grad_norm: float = 1.0
    ratio_path: str = "latent"

    def __post_init__(self):
        if not 0 < self.clip_eps < 1:
            raise ValueError("clip_eps must lie in (0, 1)")
        if not (0 < self.gamma <= 1 and 0 < self.lam <= 1):
            raise ValueError("gamma and lam must lie in (0, 1]")
        if not self.lr > 0:
            raise ValueError("lr must be > 0")
        for name in ("updates", "horizon", "n_envs", "epochs", "minibatches"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.minibatches > self.horizon * self.n_envs:
            raise ValueError("more minibatches than samples")
        if self.sigma_mode not in ("fixed", "learned"):
            raise ValueError("sigma_mode must be 'fixed' or 'learned'")
        if self.ratio_path not in ("latent", "transformed"):
            raise ValueError("ratio_path must be 'latent' or 'transformed'")
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))


@dataclass
class RolloutBatch:
    obs: np.ndarray  # (T, N, d_obs)
    latent_actions: np.ndarray  # (T, N, d_act)
    exec_actions: np.ndarray  # (T, N, d_act)
    logp_old: np.ndarray  # (T, N), latent log-probs
    rewards: np.ndarray  # (T, N)
    values: np.ndarray  # (T + 1, N), last row is the bootstrap value
    dones: np.ndarray  # (T, N)
    beta_used: float
    f_used: float
    episode_returns: list
    frac_outside_half: float
    advantages: np.ndarray = None
    returns: np.ndarray = None
    # V(s_T) for episodes cut by the time limit at this step, else 0
    bootstrap: np.ndarray = None

    @property
    def n_samples(self):
        return self.rewards.size


@dataclass
class UpdateStats:
    surrogate_loss: float = 0.0
    value_loss: float = 0.0
    approx_kl: float = 0.0
    clip_frac: float = 0.0
    grad_norm: float = 0.0
    aborted: bool = False
    reason: str = ""


class EnvPool:
    """Persistent batch of environments with per-environment reset streams."""

    def __init__(self, spec: EnvSpec, n_envs: int, seed: int):
        self.spec = spec
        self.rngs = [substream(seed, "env", i) for i in range(n_envs)]
        self.state = reset_batch(spec, self.rngs)
        self.ep_return = np.zeros(n_envs)

    def reset_where(self, done):
        idx = np.flatnonzero(done)
        if idx.size == 0:
            return
        fresh = reset_batch(self.spec, [self.rngs[i] for i in idx])
        for name in ("q", "qdot", "cmd", "zeta", "tau", "step_count"):
            getattr(self.state, name)[idx] = getattr(fresh, name)
        self.ep_return[idx] = 0.0


def importance_ratio(logp_new, logp_old):
    """``exp(logp_new - logp_old)`` clamped to ``[1e-8, 1e8]``."""
    return np.exp(np.clip(logp_new - logp_old, _LOG_RATIO_MIN, _LOG_RATIO_MAX))


def clipped_surrogate(ratio, adv, clip_eps):
    """Negated PPO objective ``-min(r A, clip(r, 1-eps, 1+eps) A)``."""
    return -np.minimum(ratio * adv, np.clip(ratio, 1.0 - clip_eps, 1.0 + clip_eps) * adv)


def collect_rollout(policy: PolicyParams, spec: EnvSpec, schedule: GrowthSchedule, update_idx, config: TrainerConfig, rng, pool: EnvPool = None):
    """Run ``config.horizon`` steps in every environment with one fixed beta."""
    if update_idx < 0:
        raise ValueError("update_idx must be >= 0")
    if pool is None:
        pool = EnvPool(spec, config.n_envs, config.seed)
    f = schedule_value(schedule, update_idx)
    beta = schedule.a_limit * f
    T, N, d = config.horizon, config.n_envs, spec.d_act
    obs = np.empty((T, N, spec.d_obs))
    lat = np.empty((T, N, d))
    mus = np.empty((T, N, d))
    rewards = np.empty((T, N))
    dones = np.empty((T, N), dtype=bool)
    bootstrap = np.zeros((T, N))
    sigma = policy.sigma
    finished = []
    for t in range(T):
        o = observe(spec, pool.state, f)
        mu = forward_mean(policy, o)
        if not np.all(np.isfinite(mu)):
            raise NumericalError("policy produced a non-finite mean action")
        a = mu + sigma * rng.standard_normal(mu.shape)
        pool.state, r, done = env_step(spec, pool.state, squash(a, beta), f)
        obs[t], lat[t], mus[t], rewards[t], dones[t] = o, a, mu, r, done
        pool.ep_return += r
        cut = truncated(spec, pool.state)
        if cut.any():
            bootstrap[t, cut] = forward_value(policy, observe(spec, pool.state, f)[cut])
        if done.any():
            finished.extend(pool.ep_return[done].tolist())
            pool.reset_where(done)
    values = np.empty((T + 1, N))
    values[:T] = forward_value(policy, obs)
    values[T] = forward_value(policy, observe(spec, pool.state, f))
    return RolloutBatch(
        obs=obs,
        latent_actions=lat,
        exec_actions=squash(lat, beta),
        logp_old=latent_log_prob(mus, sigma, lat),
        rewards=rewards,
        values=values,
        dones=dones,
        beta_used=float(beta),
        f_used=float(f),
        episode_returns=finished,
        frac_outside_half=float(np.mean(np.abs(lat / beta) > 0.5)),
        bootstrap=bootstrap,
    )


def compute_gae(batch: RolloutBatch, gamma, lam):
    """Fill ``advantages`` and ``returns`` by the backward GAE recursion.

    Time-limit cuts are not true terminals: their ``bootstrap`` value enters
    the TD target of the final step.
    """
    T = batch.rewards.shape[0]
    boot = batch.bootstrap if batch.bootstrap is not None else np.zeros_like(batch.rewards)
    adv = np.zeros_like(batch.rewards)
    last = np.zeros_like(batch.rewards[0])
    for t in range(T - 1, -1, -1):
        nonterm = 1.0 - batch.dones[t]
        delta = batch.rewards[t] + gamma * (batch.values[t + 1] * nonterm + boot[t]) - batch.values[t]
        last = delta + gamma * lam * nonterm * last
        adv[t] = last
    batch.advantages = adv
    batch.returns = adv + batch.values[:T]
    return batch


class Adam:
    def __init__(self, n, lr, b1=0.9, b2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m = np.zeros(n)
        self.v = np.zeros(n)
        self.t = 0

    def step(self, theta, grad):
        self.t += 1
        self.m = self.b1 * self.m + (1 - self.b1) * grad
        self.v = self.b2 * self.v + (1 - self.b2) * grad * grad
        m_hat = self.m / (1 - self.b1**self.t)
        v_hat = self.v / (1 - self.b2**self.t)
        return theta - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def normalize_advantages(adv):
    """Zero mean, unit standard deviation (a constant batch maps to zeros)."""
    adv = np.asarray(adv, dtype=float)
    return (adv - adv.mean()) / (adv.std() + 1e-8)


def clip_grad_groups(grad, groups, max_norm):
    """Rescale each parameter group so its norm is at most ``max_norm``.

    The actor (mean net and log-sigma) and the critic are clipped separately:
    value-loss gradients grow with the return scale and would otherwise shrink
    the actor step under a shared norm.
    """
    grad = np.array(grad, dtype=float)
    for sl in groups:
        n = float(np.linalg.norm(grad[sl]))
        if n > max_norm:
            grad[sl] *= max_norm / n
    return grad


def ppo_loss(params: PolicyParams, batch: RolloutBatch, idx, adv, config: TrainerConfig, record=None):
    """Minibatch loss closure: clipped surrogate + vf_coef * value MSE - ent_coef * entropy."""
    obs = batch.obs.reshape(-1, batch.obs.shape[-1])[idx]
    ret = batch.returns.reshape(-1)[idx]
    old = batch.logp_old.reshape(-1)[idx]
    d = batch.latent_actions.shape[-1]
    beta = batch.beta_used

    if config.ratio_path == "transformed":
        a_exec = batch.exec_actions.reshape(-1, d)[idx]
        # Same theta-free Jacobian addend on both sides of the ratio.
        old = old + np.sum(log_jacobian_inverse(a_exec, beta), axis=-1)
    else:
        a_lat = batch.latent_actions.reshape(-1, d)[idx]

    def loss(g):
        sigma = g.sigma if config.sigma_mode == "learned" else params.sigma
        mu = g.mean(obs)
        if config.ratio_path == "transformed":
            logp = transformed_log_prob(mu, sigma, beta, a_exec)
        else:
            logp = latent_log_prob(mu, sigma, a_lat)
        ratio = importance_ratio(logp, old)
        surr = np.mean(clipped_surrogate(ratio, adv, config.clip_eps))
        v_err = g.value(obs) - ret
        vloss = np.mean(np.square(v_err))
        total = surr + config.vf_coef * vloss
        if config.ent_coef:
            total = total - config.ent_coef * gaussian_entropy(g.log_sigma)
        if record is not None:
            r = ratio.value
            record["surrogate_loss"] = float(surr.value)
            record["value_loss"] = float(vloss.value)
            with np.errstate(divide="ignore"):
                record["approx_kl"] = float(np.mean((r - 1.0) - np.log(r)))
            record["clip_frac"] = float(np.mean(np.abs(r - 1.0) > config.clip_eps))
        return total

    return loss


def ppo_update(policy: PolicyParams, batch: RolloutBatch, config: TrainerConfig, opt: Adam = None, rng=None):
    """Several epochs of minibatch steps on the clipped objective.

    Returns ``(new_policy, stats)``.  A non-finite loss aborts the update: the
    input policy is returned unchanged and ``stats.aborted`` is set.
    """
    if batch.advantages is None:
        raise ValueError("batch has no advantages; run compute_gae first")
    if opt is None:
        opt = Adam(policy.n_params, config.lr)
    if rng is None:
        rng = substream(config.seed, "shuffle")
    adv_all = batch.advantages.reshape(-1)
    if config.normalize_adv:
        adv_all = normalize_advantages(adv_all)
    n = adv_all.size
    theta = policy.flat()
    params = policy
    groups = (slice(0, policy.value_slice.start), policy.value_slice)
    sums = {k: 0.0 for k in ("surrogate_loss", "value_loss", "approx_kl", "clip_frac", "grad_norm")}
    steps = 0
    try:
        for _ in range(config.epochs):
            perm = rng.permutation(n)
            for idx in np.array_split(perm, config.minibatches):
                record = {}
                _, grad = backprop_loss(params, ppo_loss(params, batch, idx, adv_all[idx], config, record))
                norm = float(np.linalg.norm(grad))
                grad = clip_grad_groups(grad, groups, config.max_grad_norm)
                theta = opt.step(theta, grad)
                params = policy.with_flat(theta).with_clamped_sigma()
                theta = params.flat()
                record["grad_norm"] = norm
                for k in sums:
                    sums[k] += record[k]
                steps += 1
    except NumericalError as exc:
        return policy, UpdateStats(aborted=True, reason=str(exc))
    if not params.is_finite():
        return policy, UpdateStats(aborted=True, reason="non-finite parameters after update")
    return params, UpdateStats(**{k: v / steps for k, v in sums.items()})


@dataclass
class RunArtifacts:
    metrics: list
    policy: PolicyParams
    checkpoints: list = field(default_factory=list)
    betas: list = field(default_factory=list)


def _format(v):
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def write_metrics(path, rows):
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_COLUMNS)
        for row in rows:
            w.writerow([_format(row[c]) for c in METRIC_COLUMNS])
    return path


def read_metrics(path):
    with Path(path).open() as fh:
        rows = list(csv.DictReader(fh))
    return [{k: (int(v) if k == "update" else float(v)) for k, v in row.items()} for row in rows]


def train_loop(config: TrainerConfig, spec: EnvSpec, out_dir=None, checkpoint_every=0, progress=None):
    """Collect, estimate advantages, update; once per update index.

    Writes ``metrics.csv`` (and checkpoints) into ``out_dir`` when given; the
    metrics written so far are flushed if an update aborts.
    """
    from .policy import save_checkpoint

    schedule = replace(config.schedule, a_limit=spec.a_limit)
    policy = init_policy(spec.d_obs, spec.d_act, substream(config.seed, "policy_init"), config.hidden, config.log_sigma0)
    sample_rng = substream(config.seed, "sampling")
    shuffle_rng = substream(config.seed, "shuffle")
    pool = EnvPool(spec, config.n_envs, config.seed)
    opt = Adam(policy.n_params, config.lr)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    rows, betas, ckpts = [], [], []
    # Episodes can span several rollouts; report the latest completed ones.
    recent = deque(maxlen=config.n_envs)

    def flush():
        if out is not None:
            write_metrics(out / "metrics.csv", rows)

    try:
        for u in range(config.updates):
            if config.lr_anneal:
                opt.lr = config.lr * (1.0 - u / config.updates)
            batch = collect_rollout(policy, spec, schedule, u, config, sample_rng, pool)
            compute_gae(batch, config.gamma, config.lam)
            policy, stats = ppo_update(policy, batch, config, opt, shuffle_rng)
            if stats.aborted:
                raise NumericalError(f"update {u} aborted: {stats.reason}")
            recent.extend(batch.episode_returns)
            ep = np.asarray(recent) if recent else np.array([np.nan])
            rows.append(
                dict(
                    update=u,
                    beta=batch.beta_used,
                    f=batch.f_used,
                    mean_return=float(ep.mean()),
                    std_return=float(ep.std()),
                    surrogate_loss=stats.surrogate_loss,
                    value_loss=stats.value_loss,
                    approx_kl=stats.approx_kl,
                    clip_frac=stats.clip_frac,
                    grad_norm=stats.grad_norm,
                    frac_outside_half=batch.frac_outside_half,
                )
            )
            betas.append(batch.beta_used)
            if out is not None and checkpoint_every and (u + 1) % checkpoint_every == 0:
                ckpts.append(save_checkpoint(out / f"policy_{u + 1:06d}.ckpt", policy, config.seed, u + 1))
            if progress is not None:
                progress(u, rows[-1])
    finally:
        flush()
    if out is not None:
        ckpts.append(save_checkpoint(out / "policy_final.ckpt", policy, config.seed, config.updates))
    return RunArtifacts(rows, policy, ckpts, betas)


def is_fixed_range(schedule: GrowthSchedule):
    return schedule.kind is ScheduleKind.NONE


@dataclass(frozen=True)
class RunSummary:
    final_return: float
    early_return: float
    mean_frac_outside_half: float
    updates: int


def _window_mean(x):
    x = x[np.isfinite(x)]
    return float(x.mean()) if x.size else float("nan")


def summarize_run(rows, early_frac=0.2, window_frac=0.05):
    """Window-averaged returns at the end of training and at the ``early_frac`` checkpoint.

    Per-update returns are noisy, so both figures average ``mean_return`` over
    ``window_frac * updates`` updates: the last window of the run, and the
    window that ends at the checkpoint.
    """
    if not rows:
        raise ValueError("empty metrics")
    ret = np.array([r["mean_return"] for r in rows], dtype=float)
    frac = np.array([r["frac_outside_half"] for r in rows], dtype=float)
    n = len(ret)
    w = max(1, int(round(window_frac * n)))
    stop = max(1, int(round(early_frac * n)))
    return RunSummary(
        final_return=_window_mean(ret[-w:]),
        early_return=_window_mean(ret[max(0, stop - w):stop]),
        mean_frac_outside_half=float(frac.mean()),
        updates=n,
    )
