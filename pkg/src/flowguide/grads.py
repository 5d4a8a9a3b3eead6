"""Gradient engines for a terminal loss ``L(x_1)`` taken at an interior state.

Posterior family (greedy): differentiate ``L`` at a cheap estimate of the
endpoint built from ``x_t``.  End-to-end family: differentiate through a full
solve, either discretize-then-optimize (reverse mode through the scheme) or
optimize-then-discretize (integrate the continuous adjoint backward).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.integrate import solve_ivp
from scipy.interpolate import CubicHermiteSpline

from . import paths, solvers
from .errors import AdjointInstabilityError, ConfigError, InputError, RangeError
from .solvers import SolverConfig, Trajectory

ENGINES = (
    "greedy_euler",
    "greedy_midpoint",
    "greedy_kstep",
    "dto",
    "otd",
    "forward_sensitivity",
)


# ---------------------------------------------------------------------------
# losses


class QuadraticLoss:
    """``0.5 ||x - x*||^2``."""

    kind = "quadratic"

    def __init__(self, target):
        self.target = np.asarray(target, dtype=float)

    def value(self, x):
        return 0.5 * np.sum((np.asarray(x) - self.target) ** 2, axis=-1)

    def gradient(self, x):
        return np.asarray(x, dtype=float) - self.target


class LinearMeasurementLoss:
    """``||y - A x||^2 / (2 beta^2)``."""

    kind = "linear_measurement"

    def __init__(self, A, y, beta):
        self.A = np.atleast_2d(np.asarray(A, dtype=float))
        self.y = np.asarray(y, dtype=float).reshape(-1)
        self.beta = float(beta)
        if self.beta <= 0:
            raise ConfigError("beta must be positive")
        if self.A.shape[0] != self.y.size:
            raise ConfigError(f"A has {self.A.shape[0]} rows but y has {self.y.size} entries")

    def residual(self, x):
        return np.asarray(x) @ self.A.T - self.y

    def value(self, x):
        return 0.5 * np.sum(self.residual(x) ** 2, axis=-1) / self.beta**2

    def gradient(self, x):
        return self.residual(x) @ self.A / self.beta**2


def _clip_op(scale):
    def f(x):
        return np.clip(scale * x, -1.0, 1.0)

    def df(x):
        return np.where(np.abs(scale * x) < 1.0, scale, 0.0)

    return f, df


def _tanh_op(scale):
    def f(x):
        return np.tanh(scale * x)

    def df(x):
        return scale * (1.0 - np.tanh(scale * x) ** 2)

    return f, df


MEASUREMENT_OPS = {"squash": _clip_op, "tanh_squash": _tanh_op}


class NonlinearMeasurementLoss:
    """``||y - op(x)||^2 / (2 beta^2)`` for an elementwise op.

    ``squash`` is ``clip(scale x, -1, 1)`` (a saturating high-dynamic-range
    sensor) and ``tanh_squash`` a smooth stand-in.  The clip has a kink, so its
    gradient is the almost-everywhere derivative.
    """

    kind = "nonlinear_measurement"

    def __init__(self, op, y, beta, scale=2.0):
        if op not in MEASUREMENT_OPS:
            raise ConfigError(f"unknown measurement op {op!r}; expected one of {sorted(MEASUREMENT_OPS)}")
        self.op = op
        self.scale = float(scale)
        self._f, self._df = MEASUREMENT_OPS[op](self.scale)
        self.y = np.asarray(y, dtype=float)
        self.beta = float(beta)
        if self.beta <= 0:
            raise ConfigError("beta must be positive")

    def forward(self, x):
        return self._f(np.asarray(x, dtype=float))

    def value(self, x):
        return 0.5 * np.sum((self.forward(x) - self.y) ** 2, axis=-1) / self.beta**2

    def gradient(self, x):
        x = np.asarray(x, dtype=float)
        return (self.forward(x) - self.y) * self._df(x) / self.beta**2


# ---------------------------------------------------------------------------
# results


@dataclass
class GradientEstimate:
    engine: str
    at_time: float
    grad: np.ndarray
    steps_used: int
    estimate_of_x1: Optional[np.ndarray] = None
    h_t: Optional[float] = None
    h_gamma: Optional[float] = None
    loss_value: Optional[np.ndarray] = None
    curve: Optional[dict] = field(default=None, repr=False)


def _horizon(schedule, t, t_end=None):
    t_end = schedule.t_end if t_end is None else t_end
    return t_end - t, schedule.gamma(t_end) - schedule.gamma(t)


def _check_inputs(model, t, x):
    x = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x)):
        raise InputError("non-finite state")
    model.schedule.check_time(t)
    return x


# ---------------------------------------------------------------------------
# reverse mode through a stored solve


def backprop(model, traj: Trajectory, scheme, abar, return_nodes=False):
    """Pull ``abar`` (cotangent of the terminal state) back to the initial state.

    Runge-Kutta steps are reversed stage by stage using the stored stage states;
    exponential-Euler steps use the closed-form pullback.  With
    ``return_nodes`` the cotangent at every grid node is returned as well.
    """
    if traj.stages is None:
        raise ConfigError("trajectory has no stored stages; solve with store_stages=True")
    sch = model.schedule
    abar = np.asarray(abar, dtype=float)
    nodes = [abar]
    times = traj.times
    exp = scheme in solvers.EXPONENTIAL_SCHEMES
    tab = None if exp else solvers.tableau(scheme)
    for n in range(len(times) - 2, -1, -1):
        t0, t1 = times[n], times[n + 1]
        taus, xs = traj.stages[n]
        if exp:
            ratio = sch.sigma(t1) / sch.sigma(t0)
            coef = sch.alpha(t1) - sch.sigma(t1) * sch.gamma(t0)
            abar = ratio * abar + coef * model.posterior_vjp(t0, xs[0], abar)
        else:
            h = t1 - t0
            kbar = [h * tab.b[j] * abar for j in range(tab.stages)]
            xbar = abar
            for j in range(tab.stages - 1, -1, -1):
                if not np.any(kbar[j]):
                    continue
                xj_bar = model.field_vjp(taus[j], xs[j], kbar[j])
                xbar = xbar + xj_bar
                for i in range(j):
                    if tab.a[j, i] != 0.0:
                        kbar[i] = kbar[i] + h * tab.a[j, i] * xj_bar
            abar = xbar
        if not np.all(np.isfinite(abar)):
            raise AdjointInstabilityError(f"non-finite cotangent at step {n}", step=n, stage="backprop")
        nodes.append(abar)
    if return_nodes:
        return abar, np.stack(nodes[::-1])
    return abar


def _solve_on_grid(model, scheme, grid, x):
    cfg = SolverConfig(scheme=scheme, n_steps=len(grid) - 1, store_stages=True)
    return solvers.solve(model, cfg, x, grid=grid)


def dto_grad(model, loss, cfg: SolverConfig, t, x, grid=None, engine="dto") -> GradientEstimate:
    """Exact reverse-mode gradient of ``L(solve(x))`` on [t, t_end]."""
    x = _check_inputs(model, t, x)
    if grid is None:
        grid = solvers.make_grid(model.schedule, cfg.replace(t_start=t, store_stages=True))
    traj = _solve_on_grid(model, cfg.scheme, grid, x)
    x1 = traj.terminal
    g = backprop(model, traj, cfg.scheme, loss.gradient(x1))
    h_t, h_g = _horizon(model.schedule, t, grid[-1]) if grid[-1] < 1.0 else (1.0 - t, np.inf)
    return GradientEstimate(
        engine, float(t), g, len(grid) - 1, estimate_of_x1=x1, h_t=h_t, h_gamma=h_g,
        loss_value=loss.value(x1),
    )


# ---------------------------------------------------------------------------
# posterior (greedy) family


def greedy_grad(model, loss, t, x, estimator="euler", k=2, domain="t") -> GradientEstimate:
    """Greedy gradient ``grad_x L(xhat_1(x))`` for a one-shot endpoint estimate.

    ``euler``: ``xhat_1 = x_{1|t}(x)``, the posterior mean.
    ``midpoint``: one midpoint step of size ``1 - eps - t``.
    ``kstep``: ``k`` uniform Euler steps to ``1 - eps``.  With ``domain="gamma"``
    the steps are exponential-Euler steps and the last one lands on t = 1, so
    ``k=1`` reproduces the ``euler`` estimator exactly.
    """
    x = _check_inputs(model, t, x)
    sch = model.schedule
    if t >= sch.t_end:
        raise RangeError(f"greedy estimators need t < 1 - eps, got {t}")
    if estimator == "euler":
        x1 = model.posterior_mean(t, x)
        g = model.posterior_vjp(t, x, loss.gradient(x1))
        h_t, h_g = _horizon(sch, t)
        return GradientEstimate("greedy_euler", float(t), g, 1, x1, h_t, h_g, loss.value(x1))
    if estimator == "midpoint":
        grid = np.array([t, sch.t_end])
        return dto_grad(model, loss, SolverConfig("midpoint", 1), t, x, grid=grid, engine="greedy_midpoint")
    if estimator == "kstep":
        if not isinstance(k, (int, np.integer)) or k < 1:
            raise ConfigError(f"k-step estimator needs k >= 1, got {k!r}")
        if domain == "t":
            grid = np.linspace(t, sch.t_end, k + 1)
            return dto_grad(model, loss, SolverConfig("euler", k), t, x, grid=grid, engine="greedy_kstep")
        if domain == "gamma":
            grid = np.linspace(t, 1.0, k + 1)
            return dto_grad(model, loss, SolverConfig("exp_euler", k), t, x, grid=grid, engine="greedy_kstep")
        raise ConfigError(f"domain must be 't' or 'gamma', got {domain!r}")
    raise ConfigError(f"unknown greedy estimator {estimator!r}")


def exp_euler_endpoint_jacobian(model, s, T, x):
    """Jacobian of the single exponential-Euler step ``s -> T`` (T may be 1)."""
    sch = model.schedule
    x = np.asarray(x, dtype=float)
    d = x.shape[-1]
    ratio = sch.sigma(T) / sch.sigma(s)
    coef = sch.alpha(T) - sch.sigma(T) * sch.gamma(s)
    return ratio * np.eye(d) + coef * model.posterior_jacobian(s, x)


def implicit_adjoint_iterate(model, loss, t, x, n_iter=1, T=1.0):
    """Fixed-point iterates of the implicit exponential-Euler adjoint step T -> t.

    Solves ``a = (sigma_T/sigma_t) a_T + (alpha_T - sigma_T gamma_t) J^T a`` with
    ``J`` the posterior Jacobian at ``(t, x)`` by Picard iteration started from
    ``a_T``, where ``a_T`` is the loss gradient at the one-step endpoint estimate.
    Returns the list of iterates (``n_iter`` + 1 entries).
    """
    x = _check_inputs(model, t, x)
    sch = model.schedule
    ratio = sch.sigma(T) / sch.sigma(t)
    coef = sch.alpha(T) - sch.sigma(T) * sch.gamma(t)
    x_end = solvers.exp_euler_step(model, t, T, x)
    a_T = loss.gradient(x_end)
    iterates = [a_T]
    for _ in range(n_iter):
        iterates.append(ratio * a_T + coef * model.posterior_vjp(t, x, iterates[-1]))
    return iterates


def greedy_control_grad(model, loss, t, x, mode="posterior"):
    """Greedy gradient for an additive control at time t.

    ``posterior``: control added to the posterior mean, ``xhat_1 = x_{1|t}(x) + z``;
    the gradient is ``grad L(xhat_1)``.  ``field``: control added to the vector
    field, which equals a posterior control of size ``z / b_t``, so the gradient is
    divided by ``b_t``.
    """
    x = _check_inputs(model, t, x)
    g = loss.gradient(model.posterior_mean(t, x))
    if mode == "posterior":
        return g
    if mode == "field":
        return g / paths.coeffs(model.schedule, t)[1]
    raise ConfigError(f"mode must be 'posterior' or 'field', got {mode!r}")


# ---------------------------------------------------------------------------
# continuous adjoint (optimize-then-discretize)


def state_interpolant(model, traj: Trajectory):
    """Cubic Hermite interpolant of stored states using the field as slopes."""
    slopes = np.stack([model.vector_field(t, x) for t, x in zip(traj.times, traj.states)])
    return CubicHermiteSpline(traj.times, traj.states, slopes, axis=0)


def _adjoint_rhs(model, tau, x, a):
    return -model.field_vjp(tau, x, a)


def otd_grad(
    model, loss, cfg: SolverConfig, t, x, adjoint_scheme="rk4", n_backward=None,
    resolve=False, with_control=False, blowup=1e12,
) -> GradientEstimate:
    """Integrate ``da/dt = -(du/dx)^T a`` backward from ``a(T) = grad L(x_T)``.

    The forward states come from a solve with ``cfg``.  ``adjoint_scheme`` is
    ``euler`` or ``rk4``; off-grid state queries use a cubic Hermite interpolant
    of the stored trajectory.  ``resolve=True`` instead re-integrates the state
    backward from ``x_T`` alongside the adjoint; this is numerically unstable for
    contracting flows and is kept for demonstration only.  ``with_control``
    additionally integrates ``da_z/dt = -a`` with ``a_z(T) = 0``.
    The returned ``curve`` holds the backward grid and the sampled adjoints.
    """
    x = _check_inputs(model, t, x)
    if adjoint_scheme not in ("euler", "rk4"):
        raise ConfigError(f"adjoint_scheme must be 'euler' or 'rk4', got {adjoint_scheme!r}")
    fwd_cfg = cfg.replace(t_start=t, store_stages=False)
    traj = solvers.solve(model, fwd_cfg, x)
    x_T = traj.terminal
    a = loss.gradient(x_T)
    scale = max(float(np.max(np.abs(a))), 1e-300)
    if n_backward is None:
        grid = traj.times
    else:
        grid = solvers.make_grid(model.schedule, fwd_cfg.replace(n_steps=n_backward))
    interp = None if resolve else state_interpolant(model, traj)
    on_grid = n_backward is None

    def state_at(tau, idx=None):
        if on_grid and idx is not None:
            return traj.states[idx]
        return interp(tau)

    a_z = np.zeros_like(a)
    xs = x_T
    a_curve, z_curve = [a], [a_z]
    for n in range(len(grid) - 2, -1, -1):
        t0, t1 = grid[n], grid[n + 1]
        h = t1 - t0
        if adjoint_scheme == "euler":
            if resolve:
                xs_new = xs - h * model.vector_field(t1, xs)
                x1 = xs
                xs = xs_new
            else:
                x1 = state_at(t1, n + 1)
            a_new = a + h * model.field_vjp(t1, x1, a)
            a_z = a_z + h * a
            a = a_new
        else:
            mid = 0.5 * (t0 + t1)
            if resolve:
                # RK4 on the pair (x, a) backward in time
                def f(tau, xx, aa):
                    return model.vector_field(tau, xx), _adjoint_rhs(model, tau, xx, aa)

                k1x, k1a = f(t1, xs, a)
                k2x, k2a = f(mid, xs - 0.5 * h * k1x, a - 0.5 * h * k1a)
                k3x, k3a = f(mid, xs - 0.5 * h * k2x, a - 0.5 * h * k2a)
                k4x, k4a = f(t0, xs - h * k3x, a - h * k3a)
                xs = xs - h / 6.0 * (k1x + 2 * k2x + 2 * k3x + k4x)
                a1, a2, a3 = a - 0.5 * h * k1a, a - 0.5 * h * k2a, a - h * k3a
                a_new = a - h / 6.0 * (k1a + 2 * k2a + 2 * k3a + k4a)
            else:
                x_hi, x_mid, x_lo = state_at(t1, n + 1), state_at(mid), state_at(t0, n)
                k1 = _adjoint_rhs(model, t1, x_hi, a)
                a1 = a - 0.5 * h * k1
                k2 = _adjoint_rhs(model, mid, x_mid, a1)
                a2 = a - 0.5 * h * k2
                k3 = _adjoint_rhs(model, mid, x_mid, a2)
                a3 = a - h * k3
                k4 = _adjoint_rhs(model, t0, x_lo, a3)
                a_new = a - h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
            # da_z/dt = -a, integrated with the same stages
            a_z = a_z + h / 6.0 * (a + 2 * a1 + 2 * a2 + a3)
            a = a_new
        if not np.all(np.isfinite(a)) or np.max(np.abs(a)) > blowup * scale:
            raise AdjointInstabilityError(
                f"adjoint blew up at backward step {n} (t={t0:.6g})", step=n, stage="adjoint"
            )
        a_curve.append(a)
        z_curve.append(a_z)
    curve = {"t": np.asarray(grid, dtype=float), "a_x": np.stack(a_curve[::-1])}
    if with_control:
        curve["a_z"] = np.stack(z_curve[::-1])
    h_t, h_g = _horizon(model.schedule, t, grid[-1])
    return GradientEstimate(
        "otd", float(t), a, len(grid) - 1, estimate_of_x1=x_T, h_t=h_t, h_gamma=h_g,
        loss_value=loss.value(x_T), curve=curve,
    )


# ---------------------------------------------------------------------------
# forward mode


def forward_sensitivity(model, cfg: SolverConfig, s, t, x, v, return_state=False):
    """Propagate the tangent ``v`` through the discrete solve on [s, t].

    Uses the same scheme and grid as the primal solve, so the result is the
    exact directional derivative of the discrete flow map.
    """
    x = _check_inputs(model, s, x)
    v = np.asarray(v, dtype=float)
    sch = model.schedule
    sch.check_time(t)
    if not s < t:
        if s == t:
            return (x, v.copy()) if return_state else v.copy()
        raise RangeError("forward_sensitivity needs s <= t")
    grid = solvers.make_grid(sch, cfg.replace(t_start=s, t_end=t))
    exp = cfg.scheme in solvers.EXPONENTIAL_SCHEMES
    tab = None if exp else solvers.tableau(cfg.scheme)
    for n in range(len(grid) - 1):
        t0, t1 = grid[n], grid[n + 1]
        if exp:
            ratio = sch.sigma(t1) / sch.sigma(t0)
            coef = sch.alpha(t1) - sch.sigma(t1) * sch.gamma(t0)
            x, v = (
                ratio * x + coef * model.posterior_mean(t0, x),
                ratio * v + coef * model.posterior_jvp(t0, x, v),
            )
            continue
        h = t1 - t0
        ks, kds = [], []
        for j in range(tab.stages):
            xj, vj = x, v
            for i in range(j):
                if tab.a[j, i] != 0.0:
                    xj = xj + h * tab.a[j, i] * ks[i]
                    vj = vj + h * tab.a[j, i] * kds[i]
            tau = t0 + tab.c[j] * h
            ks.append(model.vector_field(tau, xj))
            kds.append(model.field_jvp(tau, xj, vj))
        for j in range(tab.stages):
            if tab.b[j] != 0.0:
                x = x + h * tab.b[j] * ks[j]
                v = v + h * tab.b[j] * kds[j]
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(v))):
            raise AdjointInstabilityError(f"non-finite tangent at step {n}", step=n, stage="tangent")
    return (x, v) if return_state else v


def sensitivity_integrands(model, t, x, V):
    """Two forms of ``dJ/dt`` applied to tangents ``V`` (one per row).

    Returns ``(field_form, variance_form)`` where the first is ``(du/dx) V`` and
    the second is ``a_t V + gamma' gamma Var V``; they agree whenever the
    posterior Jacobian equals ``(alpha/sigma^2) Var``.
    """
    sch = model.schedule
    a, _ = paths.coeffs(sch, t)
    V = np.asarray(V, dtype=float)
    field_form = model.field_jvp(t, x, V)
    var = model.posterior_var(t, x)
    variance_form = a * V + sch.gamma_dot(t) * sch.gamma(t) * (V @ var)
    return field_form, variance_form


def dense_jacobian(model, s, t, x, rtol=1e-12, atol=1e-12):
    """Reference flow-map Jacobian via a high-order solve of the variational system."""
    x = np.asarray(x, dtype=float)
    d = x.size
    if s == t:
        return x.copy(), np.eye(d)

    def rhs(tau, y):
        tau = min(tau, t)
        xs, J = y[:d], y[d:].reshape(d, d)
        return np.concatenate([model.vector_field(tau, xs), model.field_jvp(tau, xs, J.T).T.ravel()])

    y0 = np.concatenate([x, np.eye(d).ravel()])
    sol = solve_ivp(rhs, (s, t), y0, method="DOP853", rtol=rtol, atol=atol)
    if not sol.success:
        raise RangeError(f"variational solve failed: {sol.message}")
    y = sol.y[:, -1]
    return y[:d], y[d:].reshape(d, d)


# ---------------------------------------------------------------------------
# control adjoint


def control_adjoint(model, loss, cfg: SolverConfig, x0, t=0.0):
    """Adjoint ``a_z(t) = int_t^T a_x ds`` of an additive field control at z = 0.

    Returns a dict with the backward grid ``t``, ``a_x`` and ``a_z`` samples.
    The pair is integrated with the same RK4 stages on the stored trajectory.
    """
    est = otd_grad(model, loss, cfg, t, x0, adjoint_scheme="rk4", with_control=True)
    return est.curve


def dto_control_grads(model, loss, cfg: SolverConfig, x0, t=0.0):
    """Per-step gradients of ``L`` w.r.t. controls ``z_n`` in an Euler solve.

    The controlled scheme is ``x_{n+1} = x_n + h_n (u(t_n, x_n) + z_n)`` at
    ``z = 0``, so ``dL/dz_n = h_n * xbar_{n+1}``.  Returns ``(grid, grads)``.
    """
    if cfg.scheme != "euler":
        raise ConfigError("per-step control gradients are defined for the euler scheme")
    x0 = _check_inputs(model, t, x0)
    grid = solvers.make_grid(model.schedule, cfg.replace(t_start=t))
    traj = _solve_on_grid(model, "euler", grid, x0)
    _, nodes = backprop(model, traj, "euler", loss.gradient(traj.terminal), return_nodes=True)
    h = np.diff(grid)
    return grid, h.reshape((-1,) + (1,) * (nodes.ndim - 1)) * nodes[1:]
