"""Guided-generation tasks at desk scale."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import grads as G
from . import solvers
from .errors import ConfigError, DivergenceError, InputError
from .solvers import SolverConfig, Trajectory

GUIDANCE_ENGINES = ("greedy_euler", "greedy_midpoint", "greedy_kstep", "dto")
ETA_SCHEDULES = ("constant", "annealed")


@dataclass(frozen=True)
class GuidanceRun:
    engine: str = "greedy_euler"
    eta: float = 1.0
    eta_schedule: str = "annealed"
    t_cut: float = 0.0
    inner_steps: int = 1
    k: int = 2  # steps of the k-step estimator
    solver: SolverConfig = field(default_factory=lambda: SolverConfig("euler", 32))
    dto_solver: Optional[SolverConfig] = None  # scheme/steps for DTO on [t_n, 1 - eps]
    seed: int = 0
    n_samples: int = 1

    def __post_init__(self):
        if self.engine not in GUIDANCE_ENGINES:
            raise ConfigError(f"engine: unknown {self.engine!r}; expected one of {GUIDANCE_ENGINES}")
        if self.eta_schedule not in ETA_SCHEDULES:
            raise ConfigError(f"eta_schedule: unknown {self.eta_schedule!r}; expected one of {ETA_SCHEDULES}")
        if not self.eta >= 0:
            raise ConfigError(f"eta must be non-negative, got {self.eta}")
        if not 0.0 <= self.t_cut <= 1.0:
            raise ConfigError(f"t_cut must lie in [0, 1], got {self.t_cut}")
        if self.inner_steps < 1:
            raise ConfigError(f"inner_steps must be >= 1, got {self.inner_steps}")
        if self.k < 1:
            raise ConfigError(f"k must be >= 1, got {self.k}")
        if self.n_samples < 1:
            raise ConfigError(f"n_samples must be >= 1, got {self.n_samples}")

    def eta_at(self, t):
        """Step size at time t: constant, or ``eta (1 - t)`` after ``t_cut`` and 0 before."""
        if self.eta_schedule == "constant":
            return self.eta
        return self.eta * (1.0 - t) if t > self.t_cut else 0.0


def initial_noise(dim, n_samples, seed):
    return np.random.default_rng(seed).standard_normal((n_samples, dim))


def _engine_grad(model, loss, run: GuidanceRun, t, x):
    if run.engine == "greedy_euler":
        return G.greedy_grad(model, loss, t, x, "euler")
    if run.engine == "greedy_midpoint":
        return G.greedy_grad(model, loss, t, x, "midpoint")
    if run.engine == "greedy_kstep":
        return G.greedy_grad(model, loss, t, x, "kstep", k=run.k)
    cfg = run.dto_solver or SolverConfig("euler", 8)
    return G.dto_grad(model, loss, cfg, t, x)


def guided_sample(model, run: GuidanceRun, loss, x0=None):
    """Greedy-action guidance: ``k`` gradient updates, then one solver step.

    Returns ``(trajectory, metrics)``; ``metrics["loss_curve"]`` is the mean loss
    of the engine's endpoint estimate after the updates at each grid time.
    """
    sch = model.schedule
    if x0 is None:
        x0 = initial_noise(model.dim, run.n_samples, run.seed)
    x = np.asarray(x0, dtype=float)
    if not np.all(np.isfinite(x)):
        raise InputError("non-finite initial state")
    grid = solvers.make_grid(sch, run.solver)
    states = [x]
    curve = []
    last = None
    for n in range(len(grid) - 1):
        t = grid[n]
        eta = run.eta_at(t)
        if eta > 0:
            for _ in range(run.inner_steps):
                est = _engine_grad(model, loss, run, t, x)
                x = x - eta * est.grad
                if not np.all(np.isfinite(x)):
                    raise DivergenceError(
                        f"guided state became non-finite at step {n}", step=n, stage="guidance",
                        last_finite_loss=last,
                    )
        value = float(np.mean(loss.value(model.posterior_mean(t, x))))
        curve.append(value)
        if np.isfinite(value):
            last = value
        try:
            x = solvers.step(model, run.solver.scheme, t, grid[n + 1], x, step_index=n)
        except DivergenceError as exc:
            exc.last_finite_loss = last
            raise
        states.append(x)
    traj = Trajectory(grid, np.stack(states))
    metrics = terminal_metrics(loss, x)
    metrics["loss_curve"] = curve
    return traj, metrics


def terminal_metrics(loss, x, radius=0.5, truth=None):
    x = np.atleast_2d(x)
    out = {"terminal_loss": float(np.mean(loss.value(x))), "n_samples": int(x.shape[0])}
    target = getattr(loss, "target", None)
    if target is not None:
        dist = np.linalg.norm(x - target, axis=-1)
        out["mean_distance"] = float(dist.mean())
        out["hit_rate"] = float(np.mean(dist <= radius))
        out["hit_radius"] = radius
    if truth is not None:
        out["distance_to_truth"] = float(np.mean(np.linalg.norm(x - truth, axis=-1)))
    return out


def unguided_sample(model, solver_cfg: SolverConfig, x0):
    return solvers.solve(model, solver_cfg, x0)


# ---------------------------------------------------------------------------
# end-to-end initial-condition optimisation


@dataclass(frozen=True)
class OptConfig:
    method: str = "gd"
    lr: float = 0.1
    iterations: int = 100
    momentum: float = 0.9
    tol: float = 0.0

    def __post_init__(self):
        if self.method not in ("gd", "momentum"):
            raise ConfigError(f"method must be 'gd' or 'momentum', got {self.method!r}")
        if self.iterations < 0:
            raise ConfigError("iterations must be >= 0")
        if not self.lr > 0:
            raise ConfigError("lr must be positive")


def e2e_optimize_x0(model, loss, solver_cfg: SolverConfig, opt_cfg: OptConfig, x0):
    """Optimise the initial noise with DTO gradients through the full solve.

    Returns ``(best_x0, history)`` with ``history`` the loss before each update and
    after the last one.  Works on a single state or a batch (losses summed).
    """
    x = np.asarray(x0, dtype=float).copy()
    best_x, best = x.copy(), np.inf
    velocity = np.zeros_like(x)
    history = []
    for it in range(opt_cfg.iterations + 1):
        est = G.dto_grad(model, loss, solver_cfg, solver_cfg.t_start, x)
        value = float(np.sum(est.loss_value))
        if not np.isfinite(value):
            raise DivergenceError(
                f"loss became non-finite at iteration {it}", step=it, stage="e2e",
                last_finite_loss=history[-1] if history else None,
            )
        history.append(value)
        if value < best:
            best, best_x = value, x.copy()
        if it == opt_cfg.iterations or value <= opt_cfg.tol:
            break
        if opt_cfg.method == "momentum":
            velocity = opt_cfg.momentum * velocity - opt_cfg.lr * est.grad
            x = x + velocity
        else:
            x = x - opt_cfg.lr * est.grad
    return best_x, history


# ---------------------------------------------------------------------------
# inverse problems


@dataclass
class InverseProblem:
    kind: str
    y: np.ndarray
    beta: float
    A: Optional[np.ndarray] = None
    op: Optional[str] = None
    scale: float = 2.0
    truth: Optional[np.ndarray] = None

    def __post_init__(self):
        if not self.beta > 0:
            raise ConfigError("beta_y must be positive")
        if not np.all(np.isfinite(self.y)):
            raise InputError("observation y is not finite")

    def loss(self):
        if self.A is not None:
            return G.LinearMeasurementLoss(self.A, self.y, self.beta)
        return G.NonlinearMeasurementLoss(self.op, self.y, self.beta, self.scale)

    def forward(self, x):
        if self.A is not None:
            return np.asarray(x) @ self.A.T
        return self.loss().forward(x)


def make_inverse_problem(kind, truth, beta_y, seed=0, d_y=1, indices=None, scale=2.0, op="squash"):
    """Synthetic measurement ``y = A(truth) + beta_y * noise``.

    kinds: ``random_projection`` (Gaussian ``d_y x d`` matrix, rows scaled to unit
    norm), ``mask`` (rows of the identity at ``indices``) and ``nonlinear_squash``
    (elementwise ``clip(scale x, -1, 1)``).
    """
    truth = np.asarray(truth, dtype=float)
    d = truth.size
    rng = np.random.default_rng(seed)
    if kind == "random_projection":
        if not 1 <= d_y <= d:
            raise ConfigError(f"d_y must lie in [1, {d}], got {d_y}")
        A = rng.standard_normal((d_y, d))
        A /= np.linalg.norm(A, axis=1, keepdims=True)
        y = A @ truth + beta_y * rng.standard_normal(d_y)
        return InverseProblem(kind, y, beta_y, A=A, truth=truth)
    if kind == "mask":
        if indices is None or len(indices) == 0:
            raise ConfigError("mask needs a non-empty list of indices")
        idx = np.asarray(indices, dtype=int)
        if np.any(idx < 0) or np.any(idx >= d):
            raise ConfigError(f"mask indices must lie in [0, {d})")
        A = np.eye(d)[idx]
        y = A @ truth + beta_y * rng.standard_normal(idx.size)
        return InverseProblem(kind, y, beta_y, A=A, truth=truth)
    if kind == "nonlinear_squash":
        clean = G.NonlinearMeasurementLoss(op, np.zeros(d), 1.0, scale).forward(truth)
        y = clean + beta_y * rng.standard_normal(d)
        return InverseProblem(kind, y, beta_y, op=op, scale=scale, truth=truth)
    raise ConfigError(f"unknown inverse problem kind {kind!r}")
