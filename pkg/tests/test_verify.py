import numpy as np
import pytest

from flowguide import grads as G
from flowguide import models, paths, verify
from flowguide.errors import ConfigError


@pytest.fixture(scope="module")
def point_mass(ot):
    return models.AnalyticMixture(models.GaussianMixtureTarget.dirac([2.0, 0.0], scale=1e-16), ot)


# -- fit guard rails


def test_fit_exact_power_law():
    hs = np.geomspace(1, 1e-3, 8)
    fit = verify.fit_order(hs, hs**2, (1.65, 2.35))
    assert fit.slope == pytest.approx(2.0, abs=1e-12) and fit.status == "pass"


def test_fit_statuses():
    hs = np.geomspace(1, 1e-3, 8)
    assert verify.fit_order(hs, np.full(8, 1e-16)).status == "degenerate"
    assert verify.fit_order(hs[:3], hs[:3] ** 2).status == "inconclusive"  # too few points
    assert verify.fit_order(np.geomspace(1, 0.5, 8), np.geomspace(1, 0.25, 8)).status == "inconclusive"  # short span
    noisy = hs**2 * np.exp(np.random.default_rng(0).normal(0, 2, 8))
    assert verify.fit_order(hs, noisy).status == "inconclusive"  # poor r2
    assert verify.fit_order(hs, hs**3, (1.65, 2.35)).status == "fail"


# -- order study


def test_order_study_mixture_euler(mixture):
    fit = verify.order_study_gradient(mixture, G.QuadraticLoss([1.0, 0.5]), "euler", np.array([0.3, -0.2]))
    assert fit.status == "pass" and 1.65 <= fit.slope <= 2.35


def test_order_study_point_mass_degenerate(point_mass):
    fit = verify.order_study_gradient(point_mass, G.QuadraticLoss([1.0, 0.5]), "exp_euler", np.array([0.3, -0.2]),
                                      reference_steps=64)
    assert fit.status == "degenerate"


def test_order_study_coarse_reference_is_inconclusive(mixture):
    fit = verify.order_study_gradient(mixture, G.QuadraticLoss([1.0, 0.5]), "euler", np.array([0.3, -0.2]),
                                      reference_steps=4)
    assert fit.status == "inconclusive"


def test_order_study_rejects_unknown_scheme(mixture):
    with pytest.raises(ConfigError):
        verify.order_study_gradient(mixture, G.QuadraticLoss([1.0, 0.5]), "rk4", np.zeros(2))


# -- greedy against ideal Jacobian


def test_greedy_vs_ideal_point_mass(point_mass):
    fit = verify.greedy_vs_ideal_study(point_mass, np.array([0.3, -0.2]), hs=np.geomspace(4, 0.02, 9))
    assert np.all(fit.errors <= 1e-8)


def test_greedy_vs_ideal_single_gaussian_monotone():
    sch = paths.cond_ot()
    m = models.AnalyticMixture(models.GaussianMixtureTarget([1.0], [[0.5, 0.0]], [np.diag([0.6, 0.3])]), sch)
    hs = np.geomspace(50, 0.5, 10)  # the last ten points on the way to the horizon
    fit = verify.greedy_vs_ideal_study(m, np.array([0.3, -0.2]), hs=hs)
    e = np.asarray(fit.errors)
    assert np.all(np.diff(e) < 0)


def test_greedy_vs_ideal_mixture_slope():
    sch = paths.cond_ot(0.05)
    m = models.AnalyticMixture(models.two_mode_target(std=0.5), sch)
    fit = verify.greedy_vs_ideal_study(m, np.array([0.3, -0.2]))
    assert fit.status == "pass", fit.summary()


# -- greedy convergence


def test_convergence_point_mass(point_mass):
    res = verify.greedy_convergence_study(point_mass, G.QuadraticLoss([0.0, 1.0]), t_values=(0.5, 0.9))
    assert res["status"] == "fail" and "did not converge" in res["note"]
    res = verify.greedy_convergence_study(point_mass, G.QuadraticLoss([2.0, 0.0]), t_values=(0.5, 0.9))
    assert all(r["iterations"] == 0 for r in res["rows"])
    # starting from alpha_t mu the flow lands exactly on T mu, so r = eps |mu|
    for r in res["rows"]:
        assert r["r"] == pytest.approx(1e-3 * 2.0, rel=1e-6)


def test_convergence_single_gaussian(std_normal):
    res = verify.greedy_convergence_study(std_normal, G.QuadraticLoss([1.0, 0.5]), t_values=(0.5, 0.9))
    r = {row["t"]: row for row in res["rows"]}
    assert r[0.9]["converged"] and r[0.9]["r"] < r[0.5]["r"]


def test_convergence_mixture_mode(mixture):
    res = verify.greedy_convergence_study(mixture, G.QuadraticLoss([2.0, 0.0]))
    assert res["status"] == "pass", res


def test_convergence_needs_quadratic(mixture):
    with pytest.raises(ConfigError):
        verify.greedy_convergence_study(mixture, G.LinearMeasurementLoss([[1.0, 0.0]], [1.0], 0.1))


# -- identity suite


def test_identities_point_mass(point_mass):
    # the flow is affine here, so a larger probe removes round-off without truncation error
    res = verify.identity_suite(point_mass, seed=0, n_points=4, gateaux_eta=1e-3)
    assert res["status"] == "pass"
    assert all(v["residual"] < 1e-8 for v in res["identities"].values()), res


def test_identities_mixture(mixture):
    res = verify.identity_suite(mixture, seed=1, n_points=4)
    assert res["status"] == "pass"
    assert set(res["identities"]) == set(verify.IDENTITY_TOLERANCES)


def test_identity_mutation_is_caught(mixture):
    res = verify.identity_suite(verify.ScaledVarianceModel(mixture, 1.01), seed=1, n_points=4)
    assert res["identities"]["variance_jacobian"]["status"] == "fail"
    assert res["status"] == "fail"


# -- control adjoint and cross-engine studies


def test_control_adjoint_study(mixture):
    res = verify.control_adjoint_study(mixture, G.QuadraticLoss([1.0, 0.5]), np.array([0.3, -0.2]))
    assert res["quadrature_residual"] <= 1e-6
    assert res["dto_fit"].status == "pass" and res["status"] == "pass"


def test_cross_engine_study(mixture):
    res = verify.cross_engine_study(mixture, G.QuadraticLoss([1.0, 0.5]), np.array([0.3, -0.2]))
    assert res["status"] == "pass", res["values"]
