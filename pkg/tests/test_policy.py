import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from gpo_lab.errors import NumericalError, SaturationError
from gpo_lab.growth import squash, unsquash
from gpo_lab.policy import (
    LOG_SIGMA_MAX,
    LOG_SIGMA_MIN,
    PolicyParams,
    backprop_loss,
    forward_mean,
    forward_value,
    gaussian_entropy,
    init_policy,
    latent_log_prob,
    load_checkpoint,
    mean_gradient,
    sample_latent,
    save_checkpoint,
    score_gradient,
    transformed_log_prob,
)

HALF_LOG_2PI = 0.918938533204672741780329736405617640  # 0.5 * log(2 pi), mpmath


def reference_forward(layers, s):
    """Scalar-loop forward pass, independent of the vectorized implementation."""
    h = list(s)
    for i, (W, b) in enumerate(layers):
        out = []
        for j in range(W.shape[1]):
            z = b[j] + sum(h[k] * W[k, j] for k in range(W.shape[0]))
            out.append(z if i == len(layers) - 1 else math.tanh(z))
        h = out
    return np.array(h)


def directional_fd(fn, theta, direction, h=1e-5):
    return (fn(theta + h * direction) - fn(theta - h * direction)) / (2 * h)


@pytest.fixture
def small(rng):
    p = init_policy(5, 2, rng, hidden=(16, 16))
    flat = p.flat()
    # break the tiny output gain so every path carries signal
    return p.with_flat(flat + 0.2 * rng.standard_normal(flat.size))


class TestForward:
    def test_zero_weights_give_zero_mean(self, small):
        zero = small.with_flat(np.zeros(small.n_params))
        np.testing.assert_array_equal(forward_mean(zero, np.ones(5)), 0.0)

    def test_identity_single_layer(self):
        W = np.arange(12.0).reshape(4, 3)
        p = PolicyParams(((W, np.zeros(3)),), np.zeros(3), ((np.zeros((4, 1)), np.zeros(1)),))
        np.testing.assert_array_equal(forward_mean(p, np.eye(4)[0]), W[0])

    def test_matches_reference(self, small, rng):
        s = rng.standard_normal(5)
        np.testing.assert_allclose(forward_mean(small, s), reference_forward(small.mean_layers, s), rtol=1e-13)
        np.testing.assert_allclose(forward_value(small, s), reference_forward(small.value_layers, s)[0], rtol=1e-13)

    def test_batched(self, small, rng):
        s = rng.standard_normal((3, 4, 5))
        out = forward_mean(small, s)
        assert out.shape == (3, 4, 2)
        np.testing.assert_allclose(out[1, 2], forward_mean(small, s[1, 2]), rtol=1e-14)

    def test_dimension_mismatch(self, small):
        with pytest.raises(ValueError):
            forward_mean(small, np.ones(4))

    def test_init_shapes_and_gain(self, rng):
        p = init_policy(17, 3, rng)
        assert p.hidden == (64, 64)
        assert p.d_obs == 17 and p.d_act == 3
        W0 = p.mean_layers[0][0]
        np.testing.assert_allclose(W0.T @ W0, np.eye(64), atol=1e-12) if W0.shape[0] >= 64 else None
        W1 = p.mean_layers[1][0]
        np.testing.assert_allclose(W1.T @ W1, np.eye(64), atol=1e-12)
        Wout = p.mean_layers[2][0]
        np.testing.assert_allclose(Wout.T @ Wout, 1e-4 * np.eye(3), atol=1e-15)


class TestFlatLayout:
    def test_roundtrip(self, small):
        flat = small.flat()
        assert flat.shape == (small.n_params,)
        np.testing.assert_array_equal(small.with_flat(flat).flat(), flat)

    def test_canonical_order(self, small):
        flat = small.flat()
        W0, b0 = small.mean_layers[0]
        np.testing.assert_array_equal(flat[: W0.size], W0.ravel())
        np.testing.assert_array_equal(flat[small.slice_of("log_sigma")], small.log_sigma)
        assert small.value_slice.stop == small.n_params
        assert small.mean_slice.stop == small.slice_of("log_sigma").start

    def test_wrong_length(self, small):
        with pytest.raises(ValueError):
            small.with_flat(np.zeros(3))

    def test_sigma_clamp(self, small):
        p = PolicyParams(small.mean_layers, np.array([-20.0, 20.0]), small.value_layers).with_clamped_sigma()
        np.testing.assert_allclose(p.log_sigma, [LOG_SIGMA_MIN, LOG_SIGMA_MAX])
        np.testing.assert_allclose(p.sigma, [1e-3, 10.0])


class TestSampling:
    def test_zero_noise_returns_mean(self):
        class Zero:
            def standard_normal(self, shape):
                return np.zeros(shape)

        mu = np.array([0.3, -1.2])
        np.testing.assert_array_equal(sample_latent(mu, np.full(2, 1e-3), Zero()), mu)

    def test_reference_stream(self):
        a = sample_latent(np.zeros(4), np.ones(4), np.random.default_rng(7))
        np.testing.assert_array_equal(a, np.random.default_rng(7).standard_normal(4))

    def test_law_of_large_numbers(self, rng):
        mu, sigma, n = np.array([0.7]), np.array([2.0]), 100_000
        a = sample_latent(np.broadcast_to(mu, (n, 1)), sigma, rng)
        assert abs(a.mean() - 0.7) < 3 * 2.0 / math.sqrt(n)


class TestLogProb:
    def test_standard_normal_at_zero(self):
        assert latent_log_prob(np.zeros(1), np.ones(1), np.zeros(1)) == pytest.approx(-HALF_LOG_2PI, rel=1e-15)

    def test_at_mean(self):
        sigma = np.array([0.5, 2.0, 3.0])
        expected = -np.sum(0.5 * np.log(2 * np.pi * sigma**2))
        assert latent_log_prob(np.ones(3), sigma, np.ones(3)) == pytest.approx(expected, rel=1e-14)

    @given(d=st.floats(-5, 5), m=st.floats(-3, 3), s=st.floats(0.05, 5))
    def test_symmetric(self, d, m, s):
        mu, sig = np.array([m]), np.array([s])
        assert latent_log_prob(mu, sig, mu + d) == pytest.approx(latent_log_prob(mu, sig, mu - d), rel=1e-12, abs=1e-12)

    def test_transformed_at_origin(self):
        val = transformed_log_prob(np.zeros(1), np.ones(1), 1.0, np.zeros(1))
        assert val == pytest.approx(-HALF_LOG_2PI, rel=1e-15)

    def test_transformed_equals_latent_plus_jacobian(self, rng):
        mu, sigma, beta = rng.standard_normal(3), np.exp(rng.standard_normal(3)), 1.7
        a_tilde = beta * rng.uniform(-0.95, 0.95, 3)
        a = unsquash(a_tilde, beta)
        expected = latent_log_prob(mu, sigma, a) - np.sum(np.log(1 - (a_tilde / beta) ** 2))
        assert transformed_log_prob(mu, sigma, beta, a_tilde) == pytest.approx(expected, rel=1e-13)

    def test_large_beta_recovers_latent(self):
        a = np.array([-1.1])
        mu, sigma = np.array([-0.9]), np.array([1.3])
        beta = 1e3 * np.max(np.abs(a))
        lt = transformed_log_prob(mu, sigma, beta, squash(a, beta))
        assert lt == pytest.approx(latent_log_prob(mu, sigma, a), abs=1e-6)

    def test_saturation(self):
        with pytest.raises(SaturationError):
            transformed_log_prob(np.zeros(1), np.ones(1), 1.0, np.ones(1))

    def test_transformed_density_normalizes(self):
        # composite Gauss-Legendre, 100 panels x 100 nodes = 10^4 points
        x, w = np.polynomial.legendre.leggauss(100)
        for mu in (-0.5, 0.0, 0.5):
            for s in (0.2, 0.5, 1.0):
                for beta in (1.0, 2.0, 4.0):
                    lim = beta * (1 - 1e-6)
                    edges = np.linspace(-lim, lim, 101)
                    h = (edges[1] - edges[0]) / 2
                    nodes = ((edges[:-1] + edges[1:]) / 2)[:, None] + h * x[None, :]
                    p = np.exp(transformed_log_prob(np.array([mu]), np.array([s]), beta, nodes.reshape(-1, 1)))
                    total = float(np.sum(p.reshape(100, 100) * w) * h)
                    assert total == pytest.approx(1.0, abs=1e-4), (mu, s, beta)

    def test_entropy(self):
        assert gaussian_entropy(np.zeros(1)) == pytest.approx(0.5 + HALF_LOG_2PI)


@given(
    seed=st.integers(0, 2**32 - 1),
    beta=st.sampled_from([0.1, 1.0, 32.0]),
    u=st.floats(-0.99, 0.99),
)
def test_ratio_invariance(seed, beta, u):
    r = np.random.default_rng(seed)
    mu_new, mu_old = r.standard_normal(2), r.standard_normal(2)
    s_new, s_old = np.exp(r.uniform(-1, 1, 2)), np.exp(r.uniform(-1, 1, 2))
    a_tilde = np.array([u, -0.5 * u]) * beta
    a = unsquash(a_tilde, beta)
    d_gpo = transformed_log_prob(mu_new, s_new, beta, a_tilde) - transformed_log_prob(mu_old, s_old, beta, a_tilde)
    d_ppo = latent_log_prob(mu_new, s_new, a) - latent_log_prob(mu_old, s_old, a)
    assert abs(d_gpo - d_ppo) <= 1e-12 * max(1.0, abs(d_ppo))


class TestGradients:
    def test_score_matches_finite_differences(self, small, rng):
        s = rng.standard_normal(5)
        beta = 2.0
        a_tilde = beta * rng.uniform(-0.8, 0.8, 2)
        g = score_gradient(small, s, a_tilde, beta)

        def f(theta):
            p = small.with_flat(theta)
            return float(transformed_log_prob(forward_mean(p, s), p.sigma, beta, a_tilde))

        theta = small.flat()
        for _ in range(16):
            d = rng.standard_normal(theta.size)
            fd = directional_fd(f, theta, d)
            assert g @ d == pytest.approx(fd, rel=1e-5, abs=1e-9)

    def test_score_mean_path_formula(self, small, rng):
        s = rng.standard_normal(5)
        beta = 3.0
        a_tilde = beta * rng.uniform(-0.8, 0.8, 2)
        g = score_gradient(small, s, a_tilde, beta, learn_sigma=False)
        mu = forward_mean(small, s)
        resid = (unsquash(a_tilde, beta) - mu) / small.sigma**2
        expected = resid[0] * mean_gradient(small, s, 0) + resid[1] * mean_gradient(small, s, 1)
        np.testing.assert_allclose(g, expected, rtol=1e-10, atol=1e-14)
        assert np.all(g[small.slice_of("log_sigma")] == 0)

    def test_zero_residual(self, small, rng):
        s = rng.standard_normal(5)
        beta = 2.5
        a_tilde = squash(forward_mean(small, s), beta)
        g = score_gradient(small, s, a_tilde, beta)
        np.testing.assert_allclose(g[small.mean_slice], 0.0, atol=1e-12)

    def test_doubling_sigma_quarters_mean_path(self, small, rng):
        s = rng.standard_normal(5)
        beta = 2.0
        resid = np.array([0.3, -0.2])
        a_tilde = squash(forward_mean(small, s) + resid, beta)
        g1 = score_gradient(small, s, a_tilde, beta, learn_sigma=False)
        wide = PolicyParams(small.mean_layers, small.log_sigma + math.log(2.0), small.value_layers)
        g2 = score_gradient(wide, s, a_tilde, beta, learn_sigma=False)
        np.testing.assert_allclose(g2, g1 / 4, rtol=1e-9, atol=1e-15)

    def test_backprop_examples(self, small):
        zero = small.with_flat(np.zeros(small.n_params))
        val, g = backprop_loss(zero, lambda gr: 0.5 * np.sum(np.square(gr.mean(np.zeros(5)))))
        assert val == 0.0
        np.testing.assert_array_equal(g, 0.0)
        val, g = backprop_loss(small, lambda gr: 4.2)
        assert val == 4.2
        np.testing.assert_array_equal(g, 0.0)

    def test_backprop_mixed_loss_matches_fd(self, small, rng):
        s = rng.standard_normal((7, 5))
        target = rng.standard_normal(7)
        a = rng.standard_normal((7, 2))

        def loss(gr):
            lp = latent_log_prob(gr.mean(s), gr.sigma, a)
            return np.mean(np.square(gr.value(s) - target)) - np.mean(lp * 0.3)

        def f(theta):
            p = small.with_flat(theta)
            lp = latent_log_prob(forward_mean(p, s), p.sigma, a)
            return float(np.mean(np.square(forward_value(p, s) - target)) - np.mean(lp * 0.3))

        val, g = backprop_loss(small, loss)
        assert val == pytest.approx(f(small.flat()), rel=1e-14)
        theta = small.flat()
        for _ in range(16):
            d = rng.standard_normal(theta.size)
            assert g @ d == pytest.approx(directional_fd(f, theta, d), rel=1e-5, abs=1e-9)

    def test_non_finite_loss(self, small):
        with pytest.raises(NumericalError):
            backprop_loss(small, lambda gr: np.sum(gr.mean(np.ones(5))) * np.inf)


class TestCheckpoint:
    def test_bit_exact_reload(self, small, tmp_path):
        path = save_checkpoint(tmp_path / "p.ckpt", small, seed=3, update_idx=17)
        loaded, header = load_checkpoint(path)
        assert loaded.flat().tobytes() == small.flat().tobytes()
        assert header["seed"] == 3 and header["update_idx"] == 17
        assert header["hidden"] == [16, 16]

    def test_rejects_foreign_file(self, tmp_path):
        path = tmp_path / "x.ckpt"
        path.write_bytes(b"not a checkpoint\n")
        with pytest.raises(ValueError):
            load_checkpoint(path)

    def test_rejects_truncated(self, small, tmp_path):
        path = save_checkpoint(tmp_path / "p.ckpt", small)
        path.write_bytes(path.read_bytes()[:-8])
        with pytest.raises(ValueError):
            load_checkpoint(path)
