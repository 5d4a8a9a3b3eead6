import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import multivariate_normal

from flowguide import models, paths
from flowguide.errors import ConfigError, InputError, ModelError, RangeError, TrainingError


def _fd_jac(f, x, h=1e-5):
    return np.stack([(f(x + h * e) - f(x - h * e)) / (2 * h) for e in np.eye(x.size)], axis=-1)


def _is_posterior(x, t, n=1_000_000, seed=0):
    """Self-normalised importance sampling of E[X1 | X_t = x] for X1 ~ N(0, I), CondOT."""
    rng = np.random.default_rng(seed)
    x1 = rng.standard_normal((n, x.size))
    logw = -0.5 * np.sum((x - t * x1) ** 2, axis=1) / (1 - t) ** 2
    w = np.exp(logw - logw.max())
    w /= w.sum()
    mean = w @ x1
    var = (w[:, None] * (x1 - mean)).T @ (x1 - mean)
    ess = 1.0 / np.sum(w**2)
    return mean, var, ess


# -- target validation


def test_weights_must_sum_to_one():
    with pytest.raises(ConfigError):
        models.GaussianMixtureTarget([0.5, 0.6], [[0, 0], [1, 1]], [np.eye(2)] * 2)


def test_covariance_must_be_spd():
    with pytest.raises(ConfigError):
        models.GaussianMixtureTarget([1.0], [[0, 0]], [[[1.0, 2.0], [2.0, 1.0]]])


def test_inconsistent_shapes():
    with pytest.raises(ConfigError):
        models.GaussianMixtureTarget([1.0], [[0, 0, 0]], [np.eye(2)])


def test_bad_state_shape_and_nan(mixture):
    with pytest.raises(InputError):
        mixture.posterior_mean(0.5, np.zeros(3))
    with pytest.raises(InputError):
        mixture.posterior_mean(0.5, np.array([np.nan, 0.0]))


def test_time_outside_domain(mixture):
    with pytest.raises(RangeError):
        mixture.posterior_mean(1.0, np.zeros(2))


# -- posterior mean


def test_dirac_posterior_is_the_point(ot):
    # covariance 1e-10 I leaves a residual of order gamma^2 * 1e-10 * |x|
    m = models.AnalyticMixture(models.GaussianMixtureTarget.dirac([1.0, 0.0]), ot)
    for t in (0.0, 0.3, 0.9, ot.t_end):
        for x in ([0.0, 0.0], [5.0, -3.0]):
            x = np.array(x)
            bound = 1e-10 * ot.gamma(t) ** 2 / max(ot.alpha(t), 1e-300) * np.linalg.norm(x - ot.alpha(t) * np.array([1.0, 0.0]))
            assert np.linalg.norm(m.posterior_mean(t, x) - [1.0, 0.0]) <= 1.01 * bound + 1e-15
    tight = models.AnalyticMixture(models.GaussianMixtureTarget.dirac([1.0, 0.0], scale=1e-16), ot)
    assert np.allclose(tight.posterior_mean(0.9, np.array([5.0, -3.0])), [1.0, 0.0], atol=1e-12)


def test_std_normal_posterior_matches_monte_carlo(std_normal):
    x = np.array([0.3, -0.7])
    got = std_normal.posterior_mean(0.5, x)
    assert np.allclose(got, x, atol=1e-12)  # conjugacy
    mc, mc_var, ess = _is_posterior(x, 0.5)
    se = np.sqrt(np.diag(mc_var) / ess)
    assert np.all(np.abs(got - mc) <= 3 * se)


def test_std_normal_posterior_var_matches_monte_carlo(std_normal):
    x = np.array([0.3, -0.7])
    V = std_normal.posterior_var(0.5, x)
    assert np.allclose(V, 0.5 * np.eye(2), atol=1e-12)
    _, mc_var, ess = _is_posterior(x, 0.5, seed=1)
    # standard error of a Gaussian variance estimate is var * sqrt(2 / n)
    assert np.all(np.abs(V - mc_var) <= 3 * 0.5 * np.sqrt(2.0 / ess) + 1e-12)


def _oracle_mixture_mean(target, t, x):
    """Responsibility-weighted conjugate means, written against scipy.stats."""
    a, s = t, 1.0 - t
    logs, means = [], []
    for w, mu, cov in zip(target.weights, target.means, target.covariances):
        S = a * a * cov + s * s * np.eye(len(mu))
        logs.append(np.log(w) + multivariate_normal(a * mu, S).logpdf(x))
        means.append(mu + a * cov @ np.linalg.solve(S, x - a * mu))
    logs = np.array(logs)
    r = np.exp(logs - logs.max())
    r /= r.sum()
    return r @ np.array(means)


def test_two_mode_near_horizon(ot):
    target = models.GaussianMixtureTarget([0.5, 0.5], [[2.0, 0.0], [-2.0, 0.0]], [np.eye(2)] * 2)
    m = models.AnalyticMixture(target, ot)
    x = np.array([2.0, 0.0])
    got = m.posterior_mean(ot.t_end, x)
    assert np.allclose(got, _oracle_mixture_mean(target, ot.t_end, x), atol=1e-12)
    # the exact mean is about x / alpha = 2.002 at eps = 1e-3
    assert np.linalg.norm(got - [2.0, 0.0]) < 2.5 * ot.t_eps


@pytest.mark.xfail(strict=True, reason="exact posterior mean sits 2e-3 from the mode at eps=1e-3; see decisions ledger")
def test_two_mode_near_horizon_within_1e3(ot):
    target = models.GaussianMixtureTarget([0.5, 0.5], [[2.0, 0.0], [-2.0, 0.0]], [np.eye(2)] * 2)
    m = models.AnalyticMixture(target, ot)
    assert np.linalg.norm(m.posterior_mean(ot.t_end, np.array([2.0, 0.0])) - [2.0, 0.0]) < 1e-3


def test_mixture_mean_matches_scipy_oracle(random_mixture):
    rng = np.random.default_rng(3)
    for _ in range(5):
        t = rng.uniform(0.05, 0.95)
        x = rng.normal(size=3) * 2
        ref = _oracle_mixture_mean(random_mixture.target, t, x)
        assert np.allclose(random_mixture.posterior_mean(t, x), ref, atol=1e-10)


def test_batched_matches_loop(random_mixture):
    xs = np.random.default_rng(1).normal(size=(6, 3))
    batch = random_mixture.posterior_mean(0.4, xs)
    loop = np.stack([random_mixture.posterior_mean(0.4, x) for x in xs])
    assert np.allclose(batch, loop, atol=1e-14)


def test_responsibilities_sum_to_one_far_out(mixture):
    r = mixture.responsibilities(0.99, np.array([1e3, -1e3]))
    assert np.all(np.isfinite(r)) and abs(r.sum() - 1) < 1e-12


# -- variance and Jacobians


def test_dirac_variance_vanishes(dirac):
    assert np.allclose(dirac.posterior_var(0.6, np.array([0.4, 1.0])), 0.0, atol=1e-8)


@settings(max_examples=25, deadline=None)
@given(t=st.floats(0.05, 0.95), seed=st.integers(0, 10_000))
def test_variance_jacobian(random_mixture, t, seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=3)
    J = _fd_jac(lambda z: random_mixture.posterior_mean(t, z), x)
    V = random_mixture.posterior_var(t, x)
    assert np.allclose(random_mixture.posterior_jacobian(t, x), t / (1 - t) ** 2 * V, atol=1e-10)
    assert np.allclose(V, (1 - t) ** 2 / t * J, atol=1e-6)


def test_dirac_vjp_is_zero(dirac):
    assert np.allclose(dirac.posterior_vjp(0.5, np.zeros(2), np.array([1.0, -2.0])), 0.0, atol=1e-8)


def test_std_normal_jvp_is_identity(std_normal):
    v = np.array([0.7, -1.3])
    assert np.allclose(std_normal.posterior_jvp(0.5, np.array([0.3, -0.7]), v), v, atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(t=st.floats(0.05, 0.95), seed=st.integers(0, 10_000))
def test_jvp_vjp_against_finite_differences(random_mixture, t, seed):
    rng = np.random.default_rng(seed)
    x, v, w = rng.normal(size=(3, 3))
    h = 1e-5
    fd = (random_mixture.posterior_mean(t, x + h * v) - random_mixture.posterior_mean(t, x - h * v)) / (2 * h)
    jvp = random_mixture.posterior_jvp(t, x, v)
    assert np.linalg.norm(jvp - fd) <= 1e-5 * max(1.0, np.linalg.norm(fd))
    # adjoint consistency
    assert w @ jvp == pytest.approx(random_mixture.posterior_vjp(t, x, w) @ v, rel=1e-10, abs=1e-12)


# -- vector field


def test_dirac_field_on_closed_flow(ot):
    m = models.AnalyticMixture(models.GaussianMixtureTarget.dirac([2.0, 0.0]), ot)
    t, mu, x0 = 0.5, np.array([2.0, 0.0]), np.zeros(2)
    x = (1 - t) * x0 + t * mu
    assert np.allclose(m.vector_field(t, x), mu - x0, atol=1e-8)  # d/dt of the closed flow


def test_field_at_zero(ot):
    m = models.AnalyticMixture(models.GaussianMixtureTarget.dirac([0.0, 0.0]), ot)
    assert np.allclose(m.vector_field(0.0, np.array([1.0, 1.0])), [-1.0, -1.0], atol=1e-12)


def test_field_vjp_matches_jvp(random_mixture):
    rng = np.random.default_rng(5)
    x, v, w = rng.normal(size=(3, 3))
    assert w @ random_mixture.field_jvp(0.3, x, v) == pytest.approx(random_mixture.field_vjp(0.3, x, w) @ v, rel=1e-10)


# -- micro MLP


def test_width_zero_rejected():
    with pytest.raises(ConfigError):
        models.TrainConfig(width=0)


def test_mlp_needs_cond_ot():
    with pytest.raises(ConfigError):
        models.train_micro_mlp(models.two_mode_target(std=0.5), paths.variance_preserving(), models.TrainConfig(steps=1))


def test_mlp_derivatives_and_round_trip(ot, tmp_path):
    m = models.train_micro_mlp(models.two_mode_target(std=0.5), ot, models.TrainConfig(steps=300, width=16))
    assert np.array_equal(m.vector_field(0.3, np.ones(2)), m.network(0.3, np.ones(2)))  # direct-field mode
    rng = np.random.default_rng(0)
    x, v, w = rng.normal(size=(3, 2))
    h = 1e-6
    fd = (m.vector_field(0.4, x + h * v) - m.vector_field(0.4, x - h * v)) / (2 * h)
    assert np.allclose(m.field_jvp(0.4, x, v), fd, atol=1e-7)
    assert w @ m.field_jvp(0.4, x, v) == pytest.approx(m.field_vjp(0.4, x, w) @ v, rel=1e-10)
    a, b = paths.coeffs(ot, 0.4)
    assert np.allclose(a * x + b * m.posterior_mean(0.4, x), m.vector_field(0.4, x), atol=1e-12)

    path = tmp_path / "w.bin"
    models.save_weights(m, path)
    back = models.load_weights(path, ot)
    for p, q in zip(m.params, back.params):
        assert np.array_equal(p, q)

    blob = path.read_bytes()
    for bad in (b"XXXXXXXX" + blob[8:], blob[:-8], blob + b"\0" * 8, blob[:12]):
        path.write_bytes(bad)
        with pytest.raises(ModelError):
            models.load_weights(path, ot)


def test_mlp_training_deterministic(ot):
    cfg = models.TrainConfig(steps=200, width=8, seed=4)
    a = models.train_micro_mlp(models.two_mode_target(std=0.5), ot, cfg)
    b = models.train_micro_mlp(models.two_mode_target(std=0.5), ot, cfg)
    assert models.weights_bytes(a) == models.weights_bytes(b)


def test_mlp_threshold_failure(ot):
    with pytest.raises(TrainingError) as info:
        models.train_micro_mlp(models.two_mode_target(std=0.5), ot,
                               models.TrainConfig(steps=0, width=4, max_holdout_loss=1e-6))
    assert "holdout_loss" in info.value.diagnostics


def test_mlp_full_training_beats_zero_predictor(ot):
    m = models.train_micro_mlp(models.two_mode_target(std=0.5), ot, models.TrainConfig())
    rep = m.training
    assert rep["holdout_loss"] < rep["zero_predictor_loss"]
