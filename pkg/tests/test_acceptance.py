"""Acceptance criteria 1-9, each at its stated tolerance.

Every criterion records one ``PASS``/``FAIL`` line; pytest prints them in the
terminal summary, and ``python tests/test_acceptance.py`` prints them directly.
"""
import json
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from flowguide import cli, models, paths, solvers, tasks, verify
from flowguide import grads as G
from flowguide.solvers import SolverConfig

try:
    from conftest import ACCEPTANCE
except ImportError:  # run as a script
    ACCEPTANCE = {}


def report(n, ok, detail, started):
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'} ({time.perf_counter() - started:.1f}s) {detail}"
    ACCEPTANCE[n] = line
    print(line)
    return ok


def _mixture(t_eps=1e-3):
    return models.AnalyticMixture(models.two_mode_target(std=0.5), paths.cond_ot(t_eps))


X = np.array([0.3, -0.2])
LOSS = G.QuadraticLoss([1.0, 0.5])


def test_c1_identity_suite():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    sch = paths.cond_ot()
    worst = {"variance_jacobian": 0.0, "reconstruction": 0.0, "gamma_dot": 0.0}
    limits = {"variance_jacobian": 1e-5, "reconstruction": 1e-6, "gamma_dot": 1e-9}
    suites_pass = True
    for i in range(10):
        d = (2, 8)[i % 2]
        m = models.AnalyticMixture(models.GaussianMixtureTarget.random(rng, 2, d), sch)
        res = verify.identity_suite(m, seed=i)
        suites_pass &= res["status"] == "pass"
        for k in worst:
            worst[k] = max(worst[k], res["identities"][k]["residual"])
    ok = suites_pass and all(worst[k] <= limits[k] for k in worst) and time.perf_counter() - t0 < 60
    detail = ", ".join(f"{k} {v:.2e} <= {limits[k]:.0e}" for k, v in worst.items())
    assert report(1, ok, f"10 models (2-D/8-D): {detail}; all identities pass: {suites_pass}", t0)


def test_c2_gradient_exactness():
    t0 = time.perf_counter()
    rng = np.random.default_rng(5)
    m = models.AnalyticMixture(models.GaussianMixtureTarget.random(rng, 3, 2), paths.cond_ot())
    loss = G.QuadraticLoss(rng.normal(size=2))
    worst = 0.0
    h = 1e-5
    for scheme in ("euler", "midpoint", "rk4"):
        cfg = SolverConfig(scheme, 16)
        for _ in range(5):
            x = rng.normal(size=2)
            g = G.dto_grad(m, loss, cfg, 0.0, x).grad
            f = lambda z: loss.value(solvers.solve(m, cfg, z).terminal)
            fd = np.array([(f(x + h * e) - f(x - h * e)) / (2 * h) for e in np.eye(2)])
            worst = max(worst, np.linalg.norm(g - fd) / max(np.linalg.norm(fd), 1e-12))
    ok = worst <= 1e-6 and time.perf_counter() - t0 < 60
    assert report(2, ok, f"worst relative FD gap over 5 probes x 3 schemes {worst:.2e} <= 1e-06", t0)


def test_c3_order_law():
    t0 = time.perf_counter()
    m = _mixture()
    fits = {s: verify.order_study_gradient(m, LOSS, s, X, reference_steps=1024) for s in ("euler", "midpoint")}
    windows = {"euler": (1.65, 2.35), "midpoint": (2.65, 3.35)}
    ok = all(f.status == "pass" and f.r2 >= 0.98 and len(f.hs) >= 5 for f in fits.values())
    ok &= all(windows[s][0] <= f.slope <= windows[s][1] for s, f in fits.items())
    ok &= time.perf_counter() - t0 < 300
    detail = "; ".join(f"{s} slope {f.slope:.3f} in {windows[s]}, r2 {f.r2:.4f}, {len(f.hs)} pts" for s, f in fits.items())
    assert report(3, ok, detail + " (reference: 1024-step RK4)", t0)


def test_c4_greedy_jacobian():
    t0 = time.perf_counter()
    # at eps = 0.05; the greedy Jacobian is taken to the horizon T = 1 - eps (see decisions ledger)
    fit = verify.greedy_vs_ideal_study(_mixture(0.05), X)
    gaps = fit.extra["posterior_jacobian_gap"]
    ok = fit.status == "pass" and 1.65 <= fit.slope <= 2.35 and time.perf_counter() - t0 < 300
    assert report(4, ok, f"slope {fit.slope:.3f} in [1.65, 2.35], r2 {fit.r2:.4f}; "
                         f"plain grad x1|t gap floor {min(gaps):.2e} (reported only)", t0)


def test_c5_greedy_convergence():
    t0 = time.perf_counter()
    res = verify.greedy_convergence_study(_mixture(), G.QuadraticLoss([2.0, 0.0]))
    worst = max(r["r"] / r["bound"] for r in res["rows"])
    hs = [r["h"] for r in res["rows"]]
    ok = res["status"] == "pass" and time.perf_counter() - t0 < 300
    # r bottoms out at eps * |x*| and h(gamma) spans only a few percent here; both are printed
    assert report(5, ok, f"t in {{0.5..0.95}}: max r / (1.5 C h^2) = {worst:.3f} <= 1, C = {res['C']:.3e}; "
                         f"h(gamma) in [{min(hs):.1f}, {max(hs):.1f}], min r {min(r['r'] for r in res['rows']):.2e}", t0)


def test_c6_control_adjoint():
    t0 = time.perf_counter()
    res = verify.control_adjoint_study(_mixture(), LOSS, X)
    fit = res["dto_fit"]
    ok = res["quadrature_residual"] <= 1e-6 and fit.status == "pass" and time.perf_counter() - t0 < 120
    assert report(6, ok, f"a_z vs Simpson of a_x {res['quadrature_residual']:.2e} <= 1e-06; "
                         f"DTO control slope {fit.slope:.3f} in [0.65, 1.35], r2 {fit.r2:.4f}", t0)


def test_c7_cross_engine():
    t0 = time.perf_counter()
    res = verify.cross_engine_study(_mixture(), LOSS, X, n_steps=256, scheme="rk4")
    v = res["values"]
    ok = v["otd_vs_dto"] <= 1e-3 and v["kstep_vs_dto_euler"] <= 1e-10
    assert report(7, ok, f"OTD vs DTO (RK4, 256 steps) {v['otd_vs_dto']:.2e} <= 1e-03; "
                         f"k-step(k=256) vs DTO-Euler {v['kstep_vs_dto_euler']:.2e} <= 1e-10", t0)


def test_c8_guidance_hit_rate():
    t0 = time.perf_counter()
    m = models.AnalyticMixture(models.two_mode_target(), paths.cond_ot())
    loss = G.QuadraticLoss([2.0, 0.0])
    solver = SolverConfig("euler", 32)
    x0 = tasks.initial_noise(2, 200, 0)
    base = tasks.terminal_metrics(loss, solvers.solve(m, solver, x0).terminal)["hit_rate"]
    rates = {}
    for engine in ("greedy_euler", "greedy_midpoint", "greedy_kstep"):
        run = tasks.GuidanceRun(engine=engine, eta=8.0, eta_schedule="annealed", k=2, solver=solver, n_samples=200)
        rates[engine] = tasks.guided_sample(m, run, loss, x0)[1]["hit_rate"]
    e = rates["greedy_euler"]
    ok = e >= 0.9 and e > base and rates["greedy_midpoint"] >= e - 0.05 and rates["greedy_kstep"] >= e - 0.05
    ok &= time.perf_counter() - t0 < 600
    detail = ", ".join(f"{k} {v:.3f}" for k, v in rates.items())
    assert report(8, ok, f"unguided {base:.3f}; {detail} (200 seeds, eta 8 annealed)", t0)


def test_c9_determinism(tmp_path, monkeypatch):
    t0 = time.perf_counter()
    configs = Path(__file__).resolve().parents[1] / "configs"
    verify_cfg = tmp_path / "verify.toml"
    verify_cfg.write_text('name = "v"\n[loss]\ntarget = [1.0, 0.5]\n'
                          '[[verify.studies]]\nkind = "cross_engine"\nn_steps = 32\nx = [0.3, -0.2]\n'
                          '[[verify.studies]]\nkind = "identity"\nn_points = 2\n')
    runs = [
        ("sample", configs / "sample_two_mode.toml", []),
        ("guide", configs / "guide_two_mode.toml", ["--set", "guide.n_samples=50"]),
        ("guide", configs / "e2e_linear.toml", ["--set", "guide.n_samples=2", "--set", "guide.iterations=10"]),
        ("verify", verify_cfg, []),
        ("train", configs / "train_mlp.toml", ["--set", "train.steps=200"]),
    ]
    trees = []
    for rep in ("a", "b"):
        monkeypatch.setenv("FLOWGUIDE_OUTDIR", str(tmp_path / rep))
        for cmd, path, extra in runs:
            assert cli.main([cmd, "--config", str(path), "--seed", "11"] + extra) == 0
        root = tmp_path / rep
        trees.append({str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()})
    same = trees[0] == trees[1]
    assert report(9, same, f"{len(trees[0])} output files from sample/guide/e2e/verify/train byte-identical "
                           f"across two runs: {same}", t0)


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q", "-s"]))
