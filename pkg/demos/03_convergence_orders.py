"""Empirical orders behind the gradient engines.

A one-step gradient over an interval of length h (in gamma units) has error
O(h^2) for Euler and O(h^3) for midpoint; the greedy Jacobian approaches the
flow-map Jacobian as O(h^2) near the horizon.  Each study fits a log-log slope
and refuses to call it when the data are too short or too noisy.
"""
import sys
from pathlib import Path

import numpy as np

from flowguide import grads as G
from flowguide import models, paths, report, verify

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo-out") / "orders"
model = models.AnalyticMixture(models.two_mode_target(std=0.5), paths.cond_ot())
loss = G.QuadraticLoss([1.0, 0.5])
x = np.array([0.3, -0.2])


def show(name, fit):
    print(f"{name:<28} slope {fit.slope:6.3f}  r2 {fit.r2:.4f}  window {fit.window}  -> {fit.status}")
    report.loglog_svg(out / f"{name}.svg", fit.hs, fit.errors, title=name, xlabel="h (gamma)")


for scheme in ("euler", "midpoint"):
    show(f"one-step {scheme}", verify.order_study_gradient(model, loss, scheme, x))

near = models.AnalyticMixture(models.two_mode_target(std=0.5), paths.cond_ot(0.05))
show("greedy vs flow Jacobian", verify.greedy_vs_ideal_study(near, x))

# a reference that is too coarse is flagged, not trusted
show("coarse reference", verify.order_study_gradient(model, loss, "euler", x, reference_steps=4))
print(f"\nplots in {out}")
