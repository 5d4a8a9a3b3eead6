"""A learned field next to the exact one.

A small tanh network is trained by conditional flow matching on the two-mode
mixture and saved in the binary weights format.  Its samples and greedy
gradients are compared with the closed-form posterior.
"""
import sys
from pathlib import Path

import numpy as np

from flowguide import grads as G
from flowguide import models, paths, solvers, tasks
from flowguide.solvers import SolverConfig

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo-out") / "mlp"
out.mkdir(parents=True, exist_ok=True)
sch = paths.cond_ot()
target = models.two_mode_target(std=0.5)
exact = models.AnalyticMixture(target, sch)

net = models.train_micro_mlp(target, sch, models.TrainConfig(steps=20000, width=64))
rep = net.training
print(f"held-out CFM loss {rep['holdout_loss']:.3f} vs zero predictor {rep['zero_predictor_loss']:.3f}")
models.save_weights(net, out / "weights.bin")
net = models.load_weights(out / "weights.bin", sch)

x0 = tasks.initial_noise(2, 2000, seed=1)
cfg = SolverConfig("rk4", 32)
for name, m in (("exact", exact), ("network", net)):
    xs = solvers.solve(m, cfg, x0).terminal
    print(f"{name:<8} right-mode fraction {np.mean(xs[:, 0] > 0):.3f}  mean {xs.mean(0).round(3)}  std {xs.std(0).round(3)}")

loss = G.QuadraticLoss([2.0, 0.0])
x = np.array([0.2, 0.1])
for t in (0.3, 0.6, 0.9):
    g_exact = G.greedy_grad(exact, loss, t, x).grad
    g_net = G.greedy_grad(net, loss, t, x).grad
    print(f"t={t}: greedy gradient exact {g_exact.round(3)}  network {g_net.round(3)}")
