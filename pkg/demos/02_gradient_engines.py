"""One state, every gradient engine.

The greedy gradient differentiates the loss at a one-shot endpoint estimate.
DTO backpropagates through the discrete solve; OTD integrates the continuous
adjoint backward.  With Euler the two end-to-end engines differ by O(h) (they
are exact for different things), with RK4 they agree to round-off.
"""
import numpy as np

from flowguide import grads as G
from flowguide import models, paths, solvers
from flowguide.solvers import SolverConfig

model = models.AnalyticMixture(models.two_mode_target(std=0.5), paths.cond_ot())
loss = G.QuadraticLoss([1.0, 0.5])
x = np.array([0.3, -0.2])
t = 0.4

print(f"state {x} at t = {t}")
for name, est in [
    ("greedy euler", G.greedy_grad(model, loss, t, x)),
    ("greedy midpoint", G.greedy_grad(model, loss, t, x, "midpoint")),
    ("greedy 2-step", G.greedy_grad(model, loss, t, x, "kstep", k=2)),
    ("dto rk4 64", G.dto_grad(model, loss, SolverConfig("rk4", 64), t, x)),
    ("otd rk4 64", G.otd_grad(model, loss, SolverConfig("rk4", 64), t, x)),
]:
    print(f"  {name:<16} {est.grad}")

print("\nEuler DTO vs Euler OTD, relative gap")
for n in (32, 64, 128, 256, 512):
    cfg = SolverConfig("euler", n)
    a = G.otd_grad(model, loss, cfg, 0.0, x, adjoint_scheme="euler").grad
    b = G.dto_grad(model, loss, cfg, 0.0, x).grad
    print(f"  n={n:<4} {np.linalg.norm(a - b) / np.linalg.norm(b):.3e}")

cfg = SolverConfig("rk4", 256)
a = G.otd_grad(model, loss, cfg, 0.0, x).grad
b = G.dto_grad(model, loss, cfg, 0.0, x).grad
print(f"RK4, n=256: {np.linalg.norm(a - b) / np.linalg.norm(b):.3e}")

# forward mode: the flow-map Jacobian column by column, then J^T grad L
cfg = SolverConfig("rk4", 64)
cols = [G.forward_sensitivity(model, cfg, 0.0, model.schedule.t_end, x, e) for e in np.eye(2)]
J = np.stack(cols, axis=-1)
x1 = solvers.solve(model, cfg, x).terminal
print("\nJ^T grad L(x1) =", J.T @ loss.gradient(x1))
print("dto rk4 64     =", G.dto_grad(model, loss, cfg, 0.0, x).grad)
