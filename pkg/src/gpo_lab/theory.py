"""Numerical checks of the range-growth analysis.

Every check is a pure function of its arguments and a ``numpy`` Generator.
Bound checks return a ``BoundReport``; scaling checks return a
``ScalingReport`` carrying the fitted log-log slope; the quadratic-model
simulations return small result dataclasses with the curves they compared.
``run_suite`` bundles the default configuration of every check into
``CheckResult`` records for the ``verify`` command.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import stats

from .envs import DT, FATIGUE_GAMMA, fatigue_update, fixed_point_fatigue
from .errors import ConfigError, PreconditionError
from .growth import GrowthSchedule, squash, unsquash
from .policy import (
    PolicyParams,
    backprop_loss,
    forward_mean,
    gaussian_entropy,
    init_policy,
    latent_log_prob,
    mean_gradient,
    score_gradient,
    transformed_log_prob,
)
from .seeding import substream

# (sinh(1) - 1) / 2: the gradient-difference constant at r = 1/2, sigma = 1.
GRAD_DIFF_CONST = (math.sinh(1.0) - 1.0) / 2.0
REGION = 0.5
Z95 = 1.96


@dataclass(frozen=True)
class BoundReport:
    name: str
    samples: int
    max_lhs: float
    bound: float
    violations: int
    margin: float

    @property
    def passed(self):
        return self.violations == 0


@dataclass(frozen=True)
class ScalingReport:
    name: str
    betas: tuple
    values: tuple
    slope: float
    intercept: float
    bound_values: tuple = ()
    violations: int = 0
    extras: dict = field(default_factory=dict)


def fit_loglog(x, y):
    """Least-squares ``(slope, intercept)`` of ``log y`` against ``log x``."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if np.any(y <= 0):
        return math.nan, math.nan
    slope, intercept = np.polyfit(np.log(x), np.log(y), 1)
    return float(slope), float(intercept)


# --------------------------------------------------------------------------
# Quadratic model


@dataclass(frozen=True)
class QuadraticModel:
    """Local model ``J(theta) = J* - 1/2 (theta - theta*)^T H (theta - theta*)``."""

    H: np.ndarray
    theta_star: np.ndarray
    J_star: float = 0.0
    c: float = 1.0
    eta: float = None
    mu: float = field(init=False)
    L: float = field(init=False)

    def __post_init__(self):
        H = np.asarray(self.H, dtype=float)
        if H.ndim != 2 or H.shape[0] != H.shape[1]:
            raise ValueError("H must be a square matrix")
        if not np.allclose(H, H.T, rtol=0, atol=1e-12):
            raise ValueError("H must be symmetric")
        eig = np.linalg.eigvalsh(H)
        if eig[0] <= 0:
            raise ValueError("H must be positive definite")
        object.__setattr__(self, "H", H)
        object.__setattr__(self, "theta_star", np.asarray(self.theta_star, dtype=float))
        object.__setattr__(self, "mu", float(eig[0]))
        object.__setattr__(self, "L", float(eig[-1]))
        if self.eta is None:
            object.__setattr__(self, "eta", self.mu / self.L**2)
        if not self.eta > 0:
            raise ValueError("eta must be > 0")
        if self.c < 0:
            raise ValueError("c must be >= 0")

    @classmethod
    def random(cls, d, rng, mu=0.5, L=2.0, c=1.0, eta=None, J_star=0.0):
        """Random rotation of ``diag(linspace(mu, L, d))`` around a random optimum."""
        q, r = np.linalg.qr(rng.standard_normal((d, d)))
        q = q * np.sign(np.diag(r))
        H = q @ np.diag(np.linspace(mu, L, d)) @ q.T
        H = 0.5 * (H + H.T)
        return cls(H, rng.standard_normal(d), J_star, c, eta)

    @property
    def d(self):
        return self.H.shape[0]

    @property
    def eta_max(self):
        return self.mu / self.L**2

    @property
    def rho(self):
        """``||I - eta H||_2^2``."""
        return float(np.max(np.abs(1.0 - self.eta * np.linalg.eigvalsh(self.H))) ** 2)

    def check_step_size(self):
        if self.eta > self.eta_max * (1 + 1e-12):
            raise PreconditionError(f"eta={self.eta} exceeds mu/L^2={self.eta_max}")

    def J(self, theta):
        e = np.asarray(theta, dtype=float) - self.theta_star
        return self.J_star - 0.5 * np.einsum("...i,ij,...j->...", e, self.H, e)


def _beta_path(betas, steps):
    betas = np.asarray(betas, dtype=float)
    if betas.ndim == 0:
        return np.full(steps, float(betas))
    if betas.shape != (steps,):
        raise ValueError(f"need one beta per step ({steps}), got {betas.shape}")
    return betas


def _simulate(model: QuadraticModel, beta_path, e0, noise):
    """Error trajectories ``e_t = theta_t - theta*`` for all seeds.

    ``noise`` has shape ``(steps, n_seeds, d)`` of standard normals; the step
    ``t`` noise is scaled to ``E||xi||^2 = c beta_t^2``.
    """
    steps, n, d = noise.shape
    A = np.eye(d) - model.eta * model.H
    scale = model.eta * np.sqrt(model.c / d) * beta_path
    e = np.broadcast_to(e0, (n, d)).copy()
    sq = np.empty((steps + 1, n))
    sq[0] = np.sum(e * e, axis=1)
    traj_J = np.empty((steps + 1, n))
    traj_J[0] = -0.5 * np.einsum("ni,ij,nj->n", e, model.H, e)
    for t in range(steps):
        e = e @ A.T + scale[t] * noise[t]
        sq[t + 1] = np.sum(e * e, axis=1)
        traj_J[t + 1] = -0.5 * np.einsum("ni,ij,nj->n", e, model.H, e)
    return sq, traj_J + model.J_star, e


@dataclass
class ConvergenceResult:
    mse_mean: np.ndarray
    mse_se: np.ndarray
    bound: np.ndarray
    report: BoundReport


def convergence_bound(model: QuadraticModel, beta_path, e0_sq):
    """Bound ``(1 - eta mu)^t ||e0||^2 + (eta/mu) c beta_t^2`` for ``t = 0..steps``."""
    t = np.arange(len(beta_path) + 1)
    beta_t = np.concatenate([[beta_path[0]], beta_path])
    return (1 - model.eta * model.mu) ** t * e0_sq + (model.eta / model.mu) * model.c * beta_t**2


def sgd_convergence_sim(model: QuadraticModel, betas, steps, n_seeds, rng, e0=None):
    """Noisy gradient ascent on the quadratic model against the contraction bound.

    ``betas`` is a scalar or one value per step.  A point counts as a
    violation only if the lower 95% edge of the Monte-Carlo mean exceeds the bound.
    """
    model.check_step_size()
    if steps < 1 or n_seeds < 2:
        raise ValueError("need steps >= 1 and n_seeds >= 2")
    path = _beta_path(betas, steps)
    if e0 is None:
        e0 = rng.standard_normal(model.d)
    e0 = np.asarray(e0, dtype=float)
    noise = rng.standard_normal((steps, n_seeds, model.d))
    sq, _, _ = _simulate(model, path, e0, noise)
    mean = sq.mean(axis=1)
    se = sq.std(axis=1, ddof=1) / math.sqrt(n_seeds)
    bound = convergence_bound(model, path, float(e0 @ e0))
    excess = mean - Z95 * se - bound
    report = BoundReport(
        "sgd_convergence",
        int(n_seeds * (steps + 1)),
        float(np.max(mean)),
        float(bound[np.argmax(mean)]),
        int(np.sum(excess > 0)),
        float(-np.max(excess)),
    )
    return ConvergenceResult(mean, se, bound, report)


def plateau_ratio(model: QuadraticModel, beta, steps, n_seeds, rng, tail_frac=0.5):
    """Tail-mean squared error at ``beta`` divided by that at ``beta / 2``, paired noise."""
    model.check_step_size()
    e0 = rng.standard_normal(model.d)
    noise = rng.standard_normal((steps, n_seeds, model.d))
    start = int(steps * (1 - tail_frac))
    hi, _, _ = _simulate(model, _beta_path(beta, steps), e0, noise)
    lo, _, _ = _simulate(model, _beta_path(beta / 2, steps), e0, noise)
    return float(hi[start:].mean() / lo[start:].mean())


# --------------------------------------------------------------------------
# Early and late stage comparisons


def early_stop_index(model: QuadraticModel, e0_sq, eps_sq):
    """``T1 = ceil(log(eps^2 / ||e0||^2) / log(1 - eta mu))``."""
    return int(math.ceil(math.log(eps_sq / e0_sq) / math.log(1 - model.eta * model.mu)))


def early_lower_bound(model: QuadraticModel, eps_sq, beta):
    """``J* - (mu/2) (eps^2 + (eta c / mu) beta^2)``."""
    return model.J_star - 0.5 * model.mu * (eps_sq + model.eta * model.c / model.mu * beta**2)


@dataclass
class EarlyComparison:
    T1: int
    eps: float
    beta_gpo_T1: float
    beta_fixed: float
    J_gpo: float
    J_fixed: float
    diff_mean: float
    diff_ci: float
    err_gpo: float
    err_fixed: float
    lower_bound_gpo: float
    lower_bound_fixed: float

    @property
    def separated(self):
        return self.diff_mean - self.diff_ci > 0

    @property
    def bounds_hold(self):
        return self.J_gpo >= self.lower_bound_gpo and self.J_fixed >= self.lower_bound_fixed

    @property
    def passed(self):
        return self.separated and self.bounds_hold


def early_return_compare(model: QuadraticModel, schedule_gpo, beta_max, n_seeds, rng, T1=None, eps_rel=0.01, e0=None):
    """Paired runs to ``T1`` under ``beta_t = schedule_gpo(t)`` and under ``beta_max``.

    ``schedule_gpo`` is a ``GrowthSchedule`` (its ``beta``) or any callable of
    the step index.  Both protocols share initial error and noise draws.
    """
    model.check_step_size()
    if e0 is None:
        e0 = rng.standard_normal(model.d)
    e0 = np.asarray(e0, dtype=float)
    e0_sq = float(e0 @ e0)
    eps_sq = (eps_rel**2) * e0_sq
    if T1 is None:
        T1 = early_stop_index(model, e0_sq, eps_sq)
    beta_fn = schedule_gpo.beta if isinstance(schedule_gpo, GrowthSchedule) else schedule_gpo
    path_gpo = np.array([beta_fn(t) for t in range(T1)], dtype=float)
    if np.any(path_gpo > beta_max * (1 + 1e-12)):
        raise PreconditionError("GPO schedule exceeds beta_max")
    noise = rng.standard_normal((T1, n_seeds, model.d))
    sq_g, J_g, _ = _simulate(model, path_gpo, e0, noise)
    sq_f, J_f, _ = _simulate(model, _beta_path(beta_max, T1), e0, noise)
    diff = J_g[-1] - J_f[-1]
    beta_T1 = float(beta_fn(T1))
    return EarlyComparison(
        T1=T1,
        eps=math.sqrt(eps_sq),
        beta_gpo_T1=beta_T1,
        beta_fixed=float(beta_max),
        J_gpo=float(J_g[-1].mean()),
        J_fixed=float(J_f[-1].mean()),
        diff_mean=float(diff.mean()),
        diff_ci=float(Z95 * diff.std(ddof=1) / math.sqrt(n_seeds)),
        err_gpo=float(np.sqrt(sq_g[-1]).mean()),
        err_fixed=float(np.sqrt(sq_f[-1]).mean()),
        lower_bound_gpo=early_lower_bound(model, eps_sq, float(path_gpo[-1])),
        lower_bound_fixed=early_lower_bound(model, eps_sq, beta_max),
    )


def steady_state_bound(model: QuadraticModel, beta):
    """``eta^2 c beta^2 / (1 - rho)``."""
    rho = model.rho
    if not 0 < rho < 1:
        raise PreconditionError(f"rho={rho} outside (0, 1)")
    return model.eta**2 * model.c * beta**2 / (1 - rho)


@dataclass
class SteadyComparison:
    mse_gpo: float
    mse_fixed: float
    mse_gpo_ci: float
    mse_fixed_ci: float
    ratio: float
    J_gpo: float
    J_fixed: float
    diff_J: float
    diff_J_ci: float
    bound_gpo: float
    bound_fixed: float

    @property
    def mse_dominates(self):
        return self.mse_gpo <= self.mse_fixed + self.mse_fixed_ci

    @property
    def return_dominates(self):
        return self.diff_J >= -self.diff_J_ci

    @property
    def below_bounds(self):
        return self.mse_gpo <= self.bound_gpo and self.mse_fixed <= self.bound_fixed


def steady_state_compare(model: QuadraticModel, beta_inf, beta_max, steps, n_seeds, rng, tail_frac=0.5):
    """Long paired runs at a constant ``beta_inf`` (the limit of a GPO schedule) and at ``beta_max``.

    Statistics are time averages over the last ``tail_frac`` of the run, one per
    seed, with 95% intervals across seeds.
    """
    model.check_step_size()
    bound_g = steady_state_bound(model, beta_inf)
    bound_f = steady_state_bound(model, beta_max)
    e0 = rng.standard_normal(model.d)
    noise = rng.standard_normal((steps, n_seeds, model.d))
    start = int(steps * (1 - tail_frac))
    sq_g, J_g, _ = _simulate(model, _beta_path(beta_inf, steps), e0, noise)
    sq_f, J_f, _ = _simulate(model, _beta_path(beta_max, steps), e0, noise)
    per_g = sq_g[start:].mean(axis=0)
    per_f = sq_f[start:].mean(axis=0)
    dJ = J_g[start:].mean(axis=0) - J_f[start:].mean(axis=0)

    def ci(x):
        return float(Z95 * x.std(ddof=1) / math.sqrt(len(x)))

    return SteadyComparison(
        mse_gpo=float(per_g.mean()),
        mse_fixed=float(per_f.mean()),
        mse_gpo_ci=ci(per_g),
        mse_fixed_ci=ci(per_f),
        ratio=float(per_g.mean() / per_f.mean()),
        J_gpo=float(J_g[start:].mean()),
        J_fixed=float(J_f[start:].mean()),
        diff_J=float(dJ.mean()),
        diff_J_ci=ci(dJ),
        bound_gpo=float(bound_g),
        bound_fixed=float(bound_f),
    )


# --------------------------------------------------------------------------
# Transform-level checks


def gradient_difference_check(sigma, grad_mu_norm, beta_t, beta_max, a_tilde, name="gradient_difference"):
    """Compare ``|h^-1_{beta_t}(a~) - h^-1_{beta_max}(a~)| ||grad mu|| / sigma^2`` with its bound."""
    if not 0 < beta_t <= beta_max:
        raise PreconditionError("need 0 < beta_t <= beta_max")
    if not sigma > 0:
        raise PreconditionError("sigma must be > 0")
    a_tilde = np.asarray(a_tilde, dtype=float)
    limit = beta_t * math.tanh(REGION)
    if np.any(np.abs(a_tilde) > limit * (1 + 1e-12)):
        raise PreconditionError(f"|a~| must stay within beta_t * tanh(0.5) = {limit}")
    a_t = unsquash(a_tilde, beta_t)
    lhs = np.abs(a_t - unsquash(a_tilde, beta_max)) / sigma**2 * grad_mu_norm
    bound = GRAD_DIFF_CONST / sigma**2 * abs(beta_max - beta_t) * grad_mu_norm
    max_lhs = float(np.max(lhs))
    # rounding allowance for the difference of two inverse transforms
    slack = 16 * np.finfo(float).eps * np.abs(a_t) / sigma**2 * grad_mu_norm
    violations = int(np.sum(lhs > bound + slack))
    return BoundReport(name, int(a_tilde.size), max_lhs, float(bound), violations, float(bound - max_lhs))


@dataclass
class GradientDifferenceSweep:
    fractions: tuple
    shared: list
    own: list

    @property
    def monotone(self):
        lhs = [r.max_lhs for r in self.shared]
        return all(b <= a * (1 + 1e-12) for a, b in zip(lhs, lhs[1:]))

    @property
    def violations(self):
        return sum(r.violations for r in self.shared + self.own)

    @property
    def samples(self):
        return sum(r.samples for r in self.shared + self.own)


def gradient_difference_sweep(sigma=1.0, grad_mu_norm=1.0, beta_max=1.0, fractions=None, n_points=1000):
    """Bound check at ``beta_t = fraction * beta_max`` on two grids.

    The shared grid covers the admissible region of the smallest ``beta_t``,
    so the max-lhs sequence compares like with like; each ``beta_t`` is also
    checked on a grid spanning its own region.
    """
    if fractions is None:
        fractions = tuple(np.round(np.arange(1, 10) / 10, 12))
    fractions = tuple(sorted(float(f) for f in fractions))
    lim0 = fractions[0] * beta_max * math.tanh(REGION)
    shared_grid = np.linspace(-lim0, lim0, n_points)
    shared, own = [], []
    for frac in fractions:
        beta_t = frac * beta_max
        shared.append(gradient_difference_check(sigma, grad_mu_norm, beta_t, beta_max, shared_grid, f"shared@{frac:g}"))
        lim = beta_t * math.tanh(REGION)
        own.append(gradient_difference_check(sigma, grad_mu_norm, beta_t, beta_max, np.linspace(-lim, lim, n_points), f"own@{frac:g}"))
    return GradientDifferenceSweep(fractions, shared, own)


def ratio_invariance_check(n, rng, d_obs=6, d_act=3, hidden=(16, 16), betas=(0.1, 1.0, 32.0), step=0.05, u_max=0.99):
    """Importance ratio through the executed-action density versus the latent density.

    Each sample draws a fresh ``theta_old``, a nearby ``theta``, a state, a
    ``beta`` from ``betas`` and an action from ``theta_old`` with ``|a~/beta| <= u_max``.
    Both ratios are evaluated at the same executed action.
    """
    if n < 1:
        raise PreconditionError("n must be >= 1")
    template = init_policy(d_obs, d_act, rng, hidden)
    size = template.n_params
    ls = template.slice_of("log_sigma")
    worst = 0.0
    viol = 0
    for _ in range(n):
        old_flat = 0.3 * rng.standard_normal(size)
        old_flat[ls] = rng.uniform(-1.0, 0.5, d_act)
        new_flat = old_flat + step * rng.standard_normal(size)
        old = template.with_flat(old_flat)
        new = template.with_flat(new_flat)
        s = rng.standard_normal(d_obs)
        beta = float(betas[rng.integers(len(betas))])
        mu_new, mu_old = forward_mean(new, s), forward_mean(old, s)
        # behaviour draw, pulled back inside |a~/beta| <= u_max
        a_lim = beta * math.atanh(u_max)
        a = np.clip(mu_old + old.sigma * rng.standard_normal(d_act), -a_lim, a_lim)
        a_tilde = squash(a, beta)
        a = unsquash(a_tilde, beta)
        r_gpo = math.exp(
            transformed_log_prob(mu_new, new.sigma, beta, a_tilde) - transformed_log_prob(mu_old, old.sigma, beta, a_tilde)
        )
        r_ppo = math.exp(latent_log_prob(mu_new, new.sigma, a) - latent_log_prob(mu_old, old.sigma, a))
        gap = abs(r_gpo - r_ppo)
        worst = max(worst, gap)
        viol += gap > 1e-12
    return BoundReport("ratio_invariance", n, worst, 1e-12, int(viol), 1e-12 - worst)


# --------------------------------------------------------------------------
# Variance and SNR


def probe_policy(rng, d_obs=6, hidden=(16, 16), mu0=0.0, sigma=4.0):
    """Single-action policy whose mean at the returned state is exactly ``mu0``."""
    params = init_policy(d_obs, 1, rng, hidden, log_sigma0=math.log(sigma), mean_out_gain=0.5)
    s = rng.standard_normal(d_obs)
    W, b = params.mean_layers[-1]
    b = b + (mu0 - forward_mean(params, s))
    layers = params.mean_layers[:-1] + ((W, b),)
    return PolicyParams(layers, params.log_sigma, params.value_layers), s


def truncated_latent(mu, sigma, beta, n, rng, region=REGION):
    """Latent draws from ``N(mu, sigma^2)`` restricted to ``|a| <= region * beta``."""
    lo = (-region * beta - mu) / sigma
    hi = (region * beta - mu) / sigma
    return mu + sigma * stats.truncnorm.rvs(lo, hi, size=n, random_state=rng)


@dataclass
class ScoreMoments:
    beta: float
    trace_var: float
    mean_norm: float
    max_check_err: float


def _score_moments(params, s, beta, n, rng, adv_sampler, n_check=16):
    """Mean and total variance of ``g = grad log pi(a~|s) * A`` for a single-action policy.

    Per sample ``g = w * grad mu`` with ``w = (a - mu) A / sigma^2``, so the moments
    follow from those of the scalar ``w``.  A handful of samples are recomputed
    through ``score_gradient`` to confirm the factorization.
    """
    mu = float(forward_mean(params, s)[0])
    sigma = float(params.sigma[0])
    jac = mean_gradient(params, s, 0)
    a = truncated_latent(mu, sigma, beta, n, rng)
    adv = adv_sampler(a, n)
    w = (a - mu) * adv / sigma**2
    gnorm_sq = float(jac @ jac)
    trace_var = float(np.var(w, ddof=1) * gnorm_sq)
    mean_norm = float(abs(w.mean()) * math.sqrt(gnorm_sq))
    err = 0.0
    a_tilde = squash(a[:n_check], beta)
    for i in range(min(n_check, n)):
        g = score_gradient(params, s, a_tilde[i:i + 1], beta, learn_sigma=False) * adv[i]
        ref = w[i] * jac
        err = max(err, float(np.linalg.norm(g - ref) / max(np.linalg.norm(ref), 1e-300)))
    return ScoreMoments(beta, trace_var, mean_norm, err)


DEFAULT_BETAS = (0.25, 0.5, 1.0, 2.0, 4.0)


def empirical_variance_sweep(params, s, betas=DEFAULT_BETAS, n=100_000, sigma_adv=1.0, rng=None):
    """Total variance of the score-function gradient against ``c beta^2``.

    Advantages are ``N(0, sigma_adv^2)`` independent of the action;
    ``c = sigma_adv^2 K^2`` with ``K = 2 ||grad mu|| / sigma^2``.
    """
    rng = np.random.default_rng() if rng is None else rng
    _check_region(params, s, betas)
    sigma = float(params.sigma[0])
    K = 2.0 * float(np.linalg.norm(mean_gradient(params, s, 0))) / sigma**2
    c = sigma_adv**2 * K**2

    def adv(a, m):
        return sigma_adv * rng.standard_normal(m)

    moments = [_score_moments(params, s, b, n, rng, adv) for b in betas]
    values = [m.trace_var for m in moments]
    bounds = [c * b**2 for b in betas]
    slope, intercept = fit_loglog(betas, values) if sigma_adv > 0 else (math.nan, math.nan)
    violations = sum(v > bnd for v, bnd in zip(values, bounds))
    return ScalingReport(
        "variance_scaling",
        tuple(float(b) for b in betas),
        tuple(values),
        slope,
        intercept,
        tuple(bounds),
        int(violations),
        {"c": c, "K": K, "max_factorization_err": max(m.max_check_err for m in moments)},
    )


def snr_sweep(params, s, betas=DEFAULT_BETAS, n=100_000, adv_offset=1.0, adv_noise=0.2, rng=None, s0_floor=1e-12):
    """``||E g|| / sqrt(tr Var g)`` across ``betas``.

    The policy mean sits off the centre of the truncation window and the
    advantage is a constant offset plus independent noise, so ``E g`` is
    nonzero and nearly independent of ``beta`` while the spread grows with it.
    """
    rng = np.random.default_rng() if rng is None else rng
    _check_region(params, s, betas)
    sigma = float(params.sigma[0])
    K = 2.0 * float(np.linalg.norm(mean_gradient(params, s, 0))) / sigma**2

    def adv(a, m):
        return adv_offset + adv_noise * adv_offset * rng.standard_normal(m)

    moments = [_score_moments(params, s, b, n, rng, adv) for b in betas]
    snr = [m.mean_norm / math.sqrt(m.trace_var) for m in moments]
    slope, intercept = fit_loglog(betas, snr)
    i_min = int(np.argmin(betas))
    s0 = moments[i_min].mean_norm
    c = (adv_offset**2 * (1 + adv_noise**2)) * K**2
    return ScalingReport(
        "snr_scaling",
        tuple(float(b) for b in betas),
        tuple(snr),
        slope,
        intercept,
        tuple(s0 / (math.sqrt(c) * b) for b in betas),
        0,
        {
            "beta_min": float(betas[i_min]),
            "S0": s0,
            "degenerate": bool(s0 < s0_floor),
            "max_factorization_err": max(m.max_check_err for m in moments),
        },
    )


def _check_region(params, s, betas):
    mu = abs(float(forward_mean(params, s)[0]))
    if params.d_act != 1:
        raise PreconditionError("variance probes use a single-action policy")
    if mu > min(betas):
        raise PreconditionError(f"|mu|={mu} exceeds the smallest beta {min(betas)}")


# --------------------------------------------------------------------------
# Assumption region


def gaussian_outside_fraction(mu, sigma, beta, region=REGION):
    """``P(|a| > region * beta)`` for ``a ~ N(mu, sigma^2)``."""
    edge = region * beta
    return float(stats.norm.cdf((-edge - mu) / sigma) + stats.norm.sf((edge - mu) / sigma))


def empirical_outside_fraction(a, beta, region=REGION):
    return float(np.mean(np.abs(np.asarray(a) / beta) > region))


@dataclass(frozen=True)
class AuditReport:
    mean_fraction: float
    max_fraction: float
    threshold: float
    updates: int

    @property
    def passed(self):
        return self.mean_fraction <= self.threshold


def assumption_region_audit(metrics, threshold=0.05):
    """Summarize logged ``frac_outside_half`` over a run."""
    fracs = []
    for row in metrics:
        if "frac_outside_half" not in row:
            raise KeyError("metrics lack the frac_outside_half column")
        fracs.append(float(row["frac_outside_half"]))
    if not fracs:
        raise ValueError("empty metrics")
    fracs = np.asarray(fracs)
    return AuditReport(float(fracs.mean()), float(fracs.max()), float(threshold), len(fracs))


# --------------------------------------------------------------------------
# Gradient engine


@dataclass(frozen=True)
class GradientCheckReport:
    instances: int
    directions: int
    max_rel_err: float
    tolerance: float

    @property
    def passed(self):
        return self.max_rel_err <= self.tolerance


def directional_fd_errors(fn, theta, grad, rng, n_dirs=64, h=1e-3):
    """Relative gap between ``grad . v`` and a finite difference of ``fn`` along random unit ``v``.

    The five-point central stencil has O(h^4) truncation error, which keeps the
    reference accurate where the loss has large higher derivatives.
    """
    errs = np.empty(n_dirs)
    for i in range(n_dirs):
        v = rng.standard_normal(theta.size)
        v /= np.linalg.norm(v)
        f = [fn(theta + k * h * v) for k in (-2, -1, 1, 2)]
        fd = (f[0] - 8 * f[1] + 8 * f[2] - f[3]) / (12 * h)
        an = float(grad @ v)
        errs[i] = abs(fd - an) / max(abs(fd), abs(an), 1e-8)
    return errs


def _smooth_ppo_loss(params, obs, a_tilde, beta, logp_old, adv, ret):
    """Unclipped surrogate plus value error and entropy: every graph op without kinks."""

    def loss(g):
        logp = transformed_log_prob(g.mean(obs), g.sigma, beta, a_tilde)
        ratio = np.exp(logp - logp_old)
        v_err = g.value(obs) - ret
        return -np.mean(ratio * adv) + 0.5 * np.mean(np.square(v_err)) - 0.01 * gaussian_entropy(g.log_sigma)

    return loss


def gradient_engine_check(rng, instances=20, n_dirs=64, batch=8, d_obs=5, d_act=2, hidden=(16, 16), tol=1e-5):
    """Finite-difference check of ``score_gradient`` and ``backprop_loss`` on random policies."""
    worst = 0.0
    for _ in range(instances):
        params = init_policy(d_obs, d_act, rng, hidden, log_sigma0=rng.uniform(-0.5, 0.5))
        theta = params.flat() + 0.3 * rng.standard_normal(params.n_params)
        params = params.with_flat(theta)
        beta = float(rng.uniform(0.5, 4.0))
        obs = rng.standard_normal((batch, d_obs))
        a_tilde = beta * rng.uniform(-0.9, 0.9, (batch, d_act))

        def logp_sum(th):
            p = params.with_flat(th)
            return float(np.sum(transformed_log_prob(forward_mean(p, obs), p.sigma, beta, a_tilde)))

        g = score_gradient(params, obs, a_tilde, beta)
        worst = max(worst, float(directional_fd_errors(logp_sum, theta, g, rng, n_dirs).max()))

        logp_old = transformed_log_prob(forward_mean(params, obs), params.sigma, beta, a_tilde) + 0.1 * rng.standard_normal(batch)
        adv = rng.standard_normal(batch)
        ret = rng.standard_normal(batch)

        def loss_at(th):
            return backprop_loss(params.with_flat(th), _smooth_ppo_loss(params, obs, a_tilde, beta, logp_old, adv, ret))[0]

        _, g = backprop_loss(params, _smooth_ppo_loss(params, obs, a_tilde, beta, logp_old, adv, ret))
        worst = max(worst, float(directional_fd_errors(loss_at, theta, g, rng, n_dirs).max()))
    return GradientCheckReport(instances, n_dirs, worst, tol)


# --------------------------------------------------------------------------
# Suite


@dataclass(frozen=True)
class TheoryConfig:
    d: int = 4
    mu: float = 0.5
    L: float = 2.0
    c: float = 1.0
    eta: float = 0.125
    beta_max: float = 1.0
    n_ratio: int = 10_000
    grad_points: int = 1000
    sigma: float = 1.0
    grad_mu_norm: float = 1.0
    n_var: int = 100_000
    probe_sigma: float = 4.0
    snr_mu: float = 0.1
    conv_steps: int = 400
    conv_seeds: int = 200
    early_seeds: int = 500
    steady_steps: int = 2000
    steady_seeds: int = 200
    audit_threshold: float = 0.05

    def __post_init__(self):
        if not 0 < self.mu <= self.L:
            raise ConfigError("theory: need 0 < mu <= L")
        if self.eta > self.mu / self.L**2 * (1 + 1e-12):
            raise ConfigError(f"theory.eta={self.eta} violates eta <= mu/L^2 = {self.mu / self.L**2}")
        if not self.eta > 0:
            raise ConfigError("theory.eta must be > 0")
        for name in ("d", "n_ratio", "grad_points", "n_var", "conv_steps", "conv_seeds", "early_seeds", "steady_steps", "steady_seeds"):
            if getattr(self, name) < 1:
                raise ConfigError(f"theory.{name} must be >= 1")


@dataclass
class CheckResult:
    name: str
    passed: bool
    margin: float
    details: dict

    def to_dict(self):
        return {"name": self.name, "passed": self.passed, "margin": self.margin, "details": self.details}


def _model(cfg: TheoryConfig, rng):
    return QuadraticModel.random(cfg.d, rng, cfg.mu, cfg.L, cfg.c, cfg.eta)


def check_ratio_invariance(cfg, rng):
    r = ratio_invariance_check(cfg.n_ratio, rng)
    return CheckResult("ratio_invariance", r.passed, r.margin, asdict(r))


def check_gradient_difference(cfg, rng):
    sweep = gradient_difference_sweep(cfg.sigma, cfg.grad_mu_norm, cfg.beta_max, n_points=cfg.grad_points)
    margin = min(r.margin for r in sweep.shared + sweep.own)
    details = {
        "samples": sweep.samples,
        "violations": sweep.violations,
        "monotone": sweep.monotone,
        "fractions": list(sweep.fractions),
        "max_lhs_shared": [r.max_lhs for r in sweep.shared],
        "max_lhs_own": [r.max_lhs for r in sweep.own],
        "bounds": [r.bound for r in sweep.own],
    }
    return CheckResult("gradient_difference", sweep.violations == 0 and sweep.monotone, margin, details)


def _scaling_details(rep: ScalingReport):
    d = asdict(rep)
    d["betas"] = list(rep.betas)
    d["values"] = list(rep.values)
    d["bound_values"] = list(rep.bound_values)
    return d


def check_variance_scaling(cfg, rng):
    params, s = probe_policy(rng, mu0=0.0, sigma=cfg.probe_sigma)
    rep = empirical_variance_sweep(params, s, n=cfg.n_var, rng=rng)
    ok = 1.8 <= rep.slope <= 2.2 and rep.violations == 0
    return CheckResult("variance_scaling", ok, min(rep.slope - 1.8, 2.2 - rep.slope), _scaling_details(rep))


def check_snr_scaling(cfg, rng):
    params, s = probe_policy(rng, mu0=cfg.snr_mu, sigma=cfg.probe_sigma)
    rep = snr_sweep(params, s, n=cfg.n_var, rng=rng)
    ok = -1.25 <= rep.slope <= -0.75 and not rep.extras["degenerate"]
    return CheckResult("snr_scaling", ok, min(rep.slope + 1.25, -0.75 - rep.slope), _scaling_details(rep))


def check_convergence(cfg, rng):
    model = _model(cfg, rng)
    const = sgd_convergence_sim(model, cfg.beta_max, cfg.conv_steps, cfg.conv_seeds, rng)
    # Piecewise-constant growth: beta_max/4 then beta_max/2 then beta_max.
    pieces = np.repeat([0.25, 0.5, 1.0], -(-cfg.conv_steps // 3))[: cfg.conv_steps] * cfg.beta_max
    piecewise = sgd_convergence_sim(model, pieces, cfg.conv_steps, cfg.conv_seeds, rng)
    ratio = plateau_ratio(model, cfg.beta_max, cfg.conv_steps, cfg.conv_seeds, rng)
    ok = const.report.passed and piecewise.report.passed and 3.5 <= ratio <= 4.5
    details = {
        "constant": asdict(const.report),
        "piecewise": asdict(piecewise.report),
        "plateau_ratio": ratio,
        "rho": model.rho,
        "eta": model.eta,
        "mu": model.mu,
        "L": model.L,
    }
    return CheckResult("convergence_bound", ok, min(const.report.margin, piecewise.report.margin), details)


def early_schedule(T1, beta_max):
    """Gompertz-shaped schedule whose run length puts ``T1`` at one fifth of training."""
    return GrowthSchedule.for_run("gompertz", 5 * T1, beta_max)


def check_early_advantage(cfg, rng):
    model = _model(cfg, rng)
    e0 = rng.standard_normal(model.d)
    T1 = early_stop_index(model, float(e0 @ e0), 1e-4 * float(e0 @ e0))
    res = early_return_compare(model, early_schedule(T1, cfg.beta_max), cfg.beta_max, cfg.early_seeds, rng, T1=T1, e0=e0)
    margin = min(res.diff_mean - res.diff_ci, res.J_gpo - res.lower_bound_gpo, res.J_fixed - res.lower_bound_fixed)
    return CheckResult("early_advantage", res.passed, margin, asdict(res))


def check_steady_state(cfg, rng):
    model = _model(cfg, rng)
    res = steady_state_compare(model, cfg.beta_max / 2, cfg.beta_max, cfg.steady_steps, cfg.steady_seeds, rng)
    ok = 0.2 <= res.ratio <= 0.3 and res.mse_dominates and res.return_dominates and res.below_bounds
    margin = min(res.ratio - 0.2, 0.3 - res.ratio, res.bound_gpo - res.mse_gpo, res.bound_fixed - res.mse_fixed)
    return CheckResult("steady_state", ok, margin, asdict(res))


def check_fatigue_fixed_point(cfg, rng, steps=500):
    torques = np.array([0.0, 0.5, 3.0, 8.0, 32.0])
    zeta = np.zeros_like(torques)
    for _ in range(steps):
        zeta = fatigue_update(zeta, torques, DT, FATIGUE_GAMMA)
    target = fixed_point_fatigue(torques, DT, FATIGUE_GAMMA)
    err = float(np.max(np.abs(zeta - target)))
    return CheckResult("fatigue_fixed_point", err <= 1e-9, 1e-9 - err, {"max_abs_err": err, "steps": steps})


def check_gradient_engine(cfg, rng):
    rep = gradient_engine_check(rng)
    return CheckResult("gradient_engine", rep.passed, rep.tolerance - rep.max_rel_err, asdict(rep))


SUITE = (
    ("ratio_invariance", check_ratio_invariance),
    ("gradient_difference", check_gradient_difference),
    ("variance_scaling", check_variance_scaling),
    ("snr_scaling", check_snr_scaling),
    ("convergence_bound", check_convergence),
    ("early_advantage", check_early_advantage),
    ("steady_state", check_steady_state),
    ("fatigue_fixed_point", check_fatigue_fixed_point),
    ("gradient_engine", check_gradient_engine),
)


def run_check(name, cfg: TheoryConfig, seed):
    """Run one named check with its own deterministic substream."""
    names = [n for n, _ in SUITE]
    if name not in names:
        raise KeyError(f"unknown check {name!r}")
    i = names.index(name)
    return SUITE[i][1](cfg, substream(seed, "theory", i))


def run_suite(cfg: TheoryConfig = None, seed=0, only=None):
    """Every check, in suite order; failures are collected, not raised."""
    cfg = TheoryConfig() if cfg is None else cfg
    names = [n for n, _ in SUITE] if only is None else list(only)
    return [run_check(n, cfg, seed) for n in names]
