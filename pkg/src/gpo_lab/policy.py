"""Gaussian policy with an MLP mean, state-independent log-std and an MLP critic.

Parameters are flattened in a fixed order so gradient vectors index stably:
mean-net layers (for each layer ``W`` row-major with shape ``(fan_in, fan_out)``,
then ``b``), then ``log_sigma``, then the value-net layers in the same layout.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import Var
from .errors import NumericalError
from .growth import log_jacobian_inverse, unsquash

SIGMA_MIN = 1e-3
SIGMA_MAX = 10.0
LOG_SIGMA_MIN = math.log(SIGMA_MIN)
LOG_SIGMA_MAX = math.log(SIGMA_MAX)
_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)

CHECKPOINT_MAGIC = b"GPOCKPT1\n"


@dataclass(frozen=True)
class PolicyParams:
    mean_layers: tuple
    log_sigma: np.ndarray
    value_layers: tuple
    layout: tuple = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "mean_layers", tuple((np.asarray(W, float), np.asarray(b, float)) for W, b in self.mean_layers))
        object.__setattr__(self, "value_layers", tuple((np.asarray(W, float), np.asarray(b, float)) for W, b in self.value_layers))
        object.__setattr__(self, "log_sigma", np.asarray(self.log_sigma, float))
        object.__setattr__(self, "layout", _layout(self))

    @property
    def d_obs(self):
        return self.mean_layers[0][0].shape[0]

    @property
    def d_act(self):
        return self.mean_layers[-1][0].shape[1]

    @property
    def hidden(self):
        return tuple(W.shape[1] for W, _ in self.mean_layers[:-1])

    @property
    def sigma(self):
        return np.exp(self.log_sigma)

    @property
    def n_params(self):
        return self.layout[-1][2]

    def slice_of(self, name):
        for key, start, stop, _ in self.layout:
            if key == name:
                return slice(start, stop)
        raise KeyError(name)

    @property
    def mean_slice(self):
        return slice(0, self.slice_of("log_sigma").start)

    @property
    def value_slice(self):
        return slice(self.slice_of("log_sigma").stop, self.n_params)

    def flat(self):
        parts = []
        for W, b in self.mean_layers:
            parts += [W.ravel(), b.ravel()]
        parts.append(self.log_sigma.ravel())
        for W, b in self.value_layers:
            parts += [W.ravel(), b.ravel()]
        return np.concatenate(parts)

    def with_flat(self, vec):
        """New params of the same shape filled from a flat vector."""
        vec = np.asarray(vec, dtype=float)
        if vec.shape != (self.n_params,):
            raise ValueError(f"expected flat vector of length {self.n_params}, got {vec.shape}")
        arrays = {key: vec[start:stop].reshape(shape).copy() for key, start, stop, shape in self.layout}
        return PolicyParams(
            tuple((arrays[f"mean.{i}.W"], arrays[f"mean.{i}.b"]) for i in range(len(self.mean_layers))),
            arrays["log_sigma"],
            tuple((arrays[f"value.{i}.W"], arrays[f"value.{i}.b"]) for i in range(len(self.value_layers))),
        )

    def with_clamped_sigma(self):
        ls = np.clip(self.log_sigma, LOG_SIGMA_MIN, LOG_SIGMA_MAX)
        return PolicyParams(self.mean_layers, ls, self.value_layers)

    def is_finite(self):
        return bool(np.all(np.isfinite(self.flat())))


def _layout(p):
    entries, pos = [], 0

    def add(name, arr):
        nonlocal pos
        entries.append((name, pos, pos + arr.size, arr.shape))
        pos += arr.size

    for i, (W, b) in enumerate(p.mean_layers):
        add(f"mean.{i}.W", W)
        add(f"mean.{i}.b", b)
    add("log_sigma", p.log_sigma)
    for i, (W, b) in enumerate(p.value_layers):
        add(f"value.{i}.W", W)
        add(f"value.{i}.b", b)
    return tuple(entries)


def _orthogonal(rng, fan_in, fan_out, gain):
    a = rng.standard_normal((max(fan_in, fan_out), min(fan_in, fan_out)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    if fan_in < fan_out:
        q = q.T
    return gain * q[:fan_in, :fan_out]


def _init_mlp(rng, sizes, out_gain):
    layers = []
    for i, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        gain = out_gain if i == len(sizes) - 2 else 1.0
        layers.append((_orthogonal(rng, n_in, n_out, gain), np.zeros(n_out)))
    return tuple(layers)


def init_policy(d_obs, d_act, rng, hidden=(64, 64), log_sigma0=0.0, mean_out_gain=0.01):
    mean = _init_mlp(rng, (d_obs, *hidden, d_act), mean_out_gain)
    value = _init_mlp(rng, (d_obs, *hidden, 1), 1.0)
    return PolicyParams(mean, np.full(d_act, float(log_sigma0)), value)


def mlp_forward(layers, x):
    """Forward pass keeping the activations needed by ``mlp_backward``."""
    acts = [x]
    h = x
    last = len(layers) - 1
    for i, (W, b) in enumerate(layers):
        z = h @ W + b
        h = z if i == last else np.tanh(z)
        acts.append(h)
    return h, acts


def mlp_backward(layers, acts, g_out):
    """Parameter gradients ``[(dW, db), ...]`` given d(loss)/d(output)."""
    grads = [None] * len(layers)
    g = g_out
    last = len(layers) - 1
    for i in range(last, -1, -1):
        W, _ = layers[i]
        if i != last:
            g = g * (1.0 - acts[i + 1] ** 2)
        h_in = acts[i]
        g2 = g.reshape(-1, g.shape[-1])
        grads[i] = (h_in.reshape(-1, h_in.shape[-1]).T @ g2, g2.sum(axis=0))
        if i:
            g = g @ W.T
    return grads


def _check_obs(params, s):
    s = np.asarray(s, dtype=float)
    if s.shape[-1] != params.d_obs:
        raise ValueError(f"observation has dimension {s.shape[-1]}, policy expects {params.d_obs}")
    return s


def forward_mean(params: PolicyParams, s):
    s = _check_obs(params, s)
    return mlp_forward(params.mean_layers, s)[0]


def forward_value(params: PolicyParams, s):
    s = _check_obs(params, s)
    return mlp_forward(params.value_layers, s)[0][..., 0]


def sample_latent(mu, sigma, rng):
    mu = np.asarray(mu, dtype=float)
    return mu + np.asarray(sigma) * rng.standard_normal(mu.shape)


def latent_log_prob(mu, sigma, a):
    """Diagonal Gaussian log-density, summed over the last axis."""
    z = (a - mu) / sigma
    return np.sum(-_HALF_LOG_2PI - np.log(sigma) - 0.5 * np.square(z), axis=-1)


def transformed_log_prob(mu, sigma, beta, a_tilde):
    """Log-density of the executed action ``a~ = beta * tanh(a / beta)``."""
    a = unsquash(a_tilde, beta)
    return latent_log_prob(mu, sigma, a) + np.sum(log_jacobian_inverse(a_tilde, beta), axis=-1)


def gaussian_entropy(log_sigma):
    return np.sum(log_sigma + 0.5 + _HALF_LOG_2PI, axis=-1)


class Graph:
    """Differentiable views of one ``PolicyParams`` snapshot.

    Every node derives from a single flat parameter leaf ``theta`` so that
    ``theta.grad`` is the full gradient in canonical order.
    """

    def __init__(self, params: PolicyParams):
        self.params = params
        self.theta = Var(params.flat())
        self._log_sigma = None

    def _net(self, layers, offset, s):
        s = _check_obs(self.params, s)
        out, acts = mlp_forward(layers, s)
        n = self.params.n_params

        def vjp(g):
            full = np.zeros(n)
            pos = offset
            for dW, db in mlp_backward(layers, acts, g):
                full[pos:pos + dW.size] = dW.ravel()
                pos += dW.size
                full[pos:pos + db.size] = db
                pos += db.size
            return full

        return Var(out, ((self.theta, vjp),))

    def mean(self, s):
        return self._net(self.params.mean_layers, 0, s)

    def value(self, s):
        v = self._net(self.params.value_layers, self.params.value_slice.start, s)
        return v[..., 0]

    @property
    def log_sigma(self):
        if self._log_sigma is None:
            self._log_sigma = self.theta[self.params.slice_of("log_sigma")]
        return self._log_sigma

    @property
    def sigma(self):
        return np.exp(self.log_sigma)


def backprop_loss(params: PolicyParams, loss_fn):
    """Evaluate ``loss_fn(graph)`` and its exact gradient w.r.t. the flat params.

    Returns ``(loss, grad)``.  Raises NumericalError on a non-finite loss.
    """
    g = Graph(params)
    loss = loss_fn(g)
    if not isinstance(loss, Var):
        value = float(np.asarray(loss))
        if not math.isfinite(value):
            raise NumericalError(f"loss is {value}")
        return value, np.zeros(params.n_params)
    if loss.value.size != 1:
        raise ValueError("loss must be a scalar")
    value = float(loss.value)
    if not math.isfinite(value):
        raise NumericalError(f"loss is {value}")
    loss.backward()
    grad = g.theta.grad if g.theta.grad is not None else np.zeros(params.n_params)
    if not np.all(np.isfinite(grad)):
        raise NumericalError("gradient has non-finite entries")
    return value, np.array(grad)


def score_gradient(params: PolicyParams, s, a_tilde, beta, learn_sigma=True):
    """Gradient of ``sum log pi(a~|s)`` w.r.t. the flat parameter vector.

    With ``learn_sigma=False`` the standard deviation is treated as a constant
    and only the mean path contributes.
    """

    def loss(g):
        sigma = g.sigma if learn_sigma else params.sigma
        return np.sum(transformed_log_prob(g.mean(s), sigma, beta, a_tilde))

    return backprop_loss(params, loss)[1]


def mean_gradient(params: PolicyParams, s, dim=0):
    """Gradient of the ``dim``-th mean output at a single observation."""
    return backprop_loss(params, lambda g: g.mean(s)[..., dim].sum())[1]


def save_checkpoint(path, params: PolicyParams, seed=None, update_idx=None):
    """Header line of JSON followed by the raw little-endian float64 flat vector."""
    header = {
        "format": "gpo-policy/1",
        "d_obs": params.d_obs,
        "d_act": params.d_act,
        "hidden": list(params.hidden),
        "n_params": params.n_params,
        "layout": [[k, a, b, list(s)] for k, a, b, s in params.layout],
        "seed": seed,
        "update_idx": update_idx,
    }
    path = Path(path)
    with path.open("wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        fh.write(params.flat().astype("<f8").tobytes())
    return path


def load_checkpoint(path):
    with Path(path).open("rb") as fh:
        if fh.readline() != CHECKPOINT_MAGIC:
            raise ValueError(f"{path} is not a policy checkpoint")
        header = json.loads(fh.readline())
        flat = np.frombuffer(fh.read(), dtype="<f8").astype(float)
    if flat.size != header["n_params"]:
        raise ValueError(f"checkpoint holds {flat.size} values, header says {header['n_params']}")
    hidden = tuple(header["hidden"])
    template = PolicyParams(
        _zero_mlp((header["d_obs"], *hidden, header["d_act"])),
        np.zeros(header["d_act"]),
        _zero_mlp((header["d_obs"], *hidden, 1)),
    )
    return template.with_flat(flat), header


def _zero_mlp(sizes):
    return tuple((np.zeros((i, o)), np.zeros(o)) for i, o in zip(sizes[:-1], sizes[1:]))
