"""Forward integration of the flow ODE in the t and gamma variables."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np
from scipy.integrate import quad_vec, solve_ivp

from . import paths
from .errors import AccuracyError, ConfigError, DivergenceError, InputError, RangeError, UnsupportedOperation

SCHEMES = ("euler", "midpoint", "rk4", "exp_euler", "reparam_gamma_euler")
GRIDS = ("uniform_t", "uniform_gamma", "polynomial_edm")
EXPONENTIAL_SCHEMES = ("exp_euler", "reparam_gamma_euler")


@dataclass(frozen=True)
class Tableau:
    a: np.ndarray
    b: np.ndarray
    c: np.ndarray

    @property
    def stages(self):
        return len(self.b)


TABLEAUS = {
    "euler": Tableau(np.zeros((1, 1)), np.array([1.0]), np.array([0.0])),
    "midpoint": Tableau(np.array([[0.0, 0.0], [0.5, 0.0]]), np.array([0.0, 1.0]), np.array([0.0, 0.5])),
    "rk4": Tableau(
        np.array([[0, 0, 0, 0], [0.5, 0, 0, 0], [0, 0.5, 0, 0], [0, 0, 1.0, 0]], dtype=float),
        np.array([1, 2, 2, 1], dtype=float) / 6.0,
        np.array([0, 0.5, 0.5, 1.0]),
    ),
}


def tableau(scheme):
    try:
        return TABLEAUS[scheme]
    except KeyError:
        raise ConfigError(f"scheme {scheme!r} has no Runge-Kutta tableau; expected one of {sorted(TABLEAUS)}")


@dataclass(frozen=True)
class SolverConfig:
    scheme: str = "euler"
    n_steps: int = 16
    grid: str = "uniform_t"
    rho: float = 7.0
    t_start: float = 0.0
    t_end: Optional[float] = None
    store_stages: bool = False

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ConfigError(f"scheme: unknown {self.scheme!r}; expected one of {SCHEMES}")
        if self.grid not in GRIDS:
            raise ConfigError(f"grid: unknown {self.grid!r}; expected one of {GRIDS}")
        if not isinstance(self.n_steps, (int, np.integer)) or self.n_steps < 1:
            raise ConfigError(f"n_steps must be a positive integer, got {self.n_steps!r}")
        if not self.rho > 0:
            raise ConfigError(f"rho must be positive, got {self.rho}")
        if self.t_end is not None and not self.t_end > self.t_start:
            raise ConfigError(f"t_end ({self.t_end}) must exceed t_start ({self.t_start})")

    def replace(self, **kw):
        fields = dict(self.__dict__)
        fields.update(kw)
        return SolverConfig(**fields)


@dataclass
class Trajectory:
    times: np.ndarray
    states: np.ndarray
    # per step: (stage times, stage states of shape (stages, *state_shape))
    stages: Optional[List[Tuple[np.ndarray, np.ndarray]]] = None

    def __post_init__(self):
        if len(self.times) != len(self.states):
            raise ValueError("times and states differ in length")

    @property
    def terminal(self):
        return self.states[-1]

    def to_csv(self, path, time_label="t"):
        """Write ``time, [sample,] x_0..x_{d-1}`` rows."""
        states = self.states
        batched = states.ndim == 3
        d = states.shape[-1]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow([time_label] + (["sample"] if batched else []) + [f"x{i}" for i in range(d)])
            for t, x in zip(self.times, states):
                if batched:
                    for j, row in enumerate(x):
                        w.writerow([repr(float(t)), j] + [repr(float(v)) for v in row])
                else:
                    w.writerow([repr(float(t))] + [repr(float(v)) for v in x])


def resolve_t_end(schedule, cfg):
    t_end = schedule.t_end if cfg.t_end is None else cfg.t_end
    if t_end > schedule.t_end + 1e-12:
        raise RangeError(f"t_end {t_end} lies past the truncated horizon 1 - eps = {schedule.t_end}")
    if cfg.t_start < 0 or cfg.t_start >= t_end:
        raise ConfigError(f"t_start {cfg.t_start} must lie in [0, t_end)")
    return t_end


def make_grid(schedule: paths.Schedule, cfg: SolverConfig) -> np.ndarray:
    t0 = cfg.t_start
    t1 = resolve_t_end(schedule, cfg)
    n = cfg.n_steps
    u = np.arange(n + 1) / n
    if cfg.grid == "uniform_t":
        grid = t0 + (t1 - t0) * u
    elif cfg.grid == "uniform_gamma":
        g0, g1 = schedule.gamma(t0), schedule.gamma(t1)
        grid = np.array([schedule.t_of_gamma(g) for g in g0 + (g1 - g0) * u])
    else:
        # polynomial spacing in the noise level sigma_t, dense near the data end
        inv = 1.0 / cfg.rho
        s_hi, s_lo = schedule.sigma(t0), schedule.sigma(t1)
        sig = (s_hi**inv + u * (s_lo**inv - s_hi**inv)) ** cfg.rho
        grid = np.array([schedule.t_of_sigma(s) for s in sig])
    grid = np.asarray(grid, dtype=float)
    grid[0], grid[-1] = t0, t1
    if not np.all(np.diff(grid) > 0):
        raise ConfigError("time grid is not strictly increasing; reduce n_steps or change the grid")
    return grid


def _check_finite(x, step_index, stage):
    if not np.all(np.isfinite(x)):
        raise DivergenceError(
            f"non-finite value at step {step_index}, stage {stage}", step=step_index, stage=stage
        )


def exp_euler_step(model, s, t, x):
    """``x_t = (sigma_t/sigma_s) x_s + (alpha_t - sigma_t gamma_s) x_{1|s}(x_s)``; valid up to t = 1."""
    sch = model.schedule
    ratio = sch.sigma(t) / sch.sigma(s)
    return ratio * x + (sch.alpha(t) - sch.sigma(t) * sch.gamma(s)) * model.posterior_mean(s, x)


def rk_step(model, tab: Tableau, t0, t1, x, step_index=0):
    """One explicit Runge-Kutta step; returns ``(x_next, stage_times, stage_states)``."""
    h = t1 - t0
    ks, xs = [], []
    for j in range(tab.stages):
        xj = x
        for i in range(j):
            if tab.a[j, i] != 0.0:
                xj = xj + h * tab.a[j, i] * ks[i]
        kj = model.vector_field(t0 + tab.c[j] * h, xj)
        _check_finite(kj, step_index, f"k{j + 1}")
        xs.append(xj)
        ks.append(kj)
    out = x
    for j in range(tab.stages):
        if tab.b[j] != 0.0:
            out = out + h * tab.b[j] * ks[j]
    _check_finite(out, step_index, "update")
    return out, t0 + tab.c * h, np.stack(xs)


def step(model, scheme, t0, t1, x, step_index=0):
    x = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x)):
        raise InputError("non-finite state")
    sch = model.schedule
    if not t0 < t1:
        raise RangeError(f"step needs t0 < t1, got {t0} >= {t1}")
    if scheme in EXPONENTIAL_SCHEMES:
        sch.check_time(t0)
        sch.check_time(t1, hi=1.0)
        out = exp_euler_step(model, t0, t1, x)
        _check_finite(out, step_index, "update")
        return out
    sch.check_time(t1)
    return rk_step(model, tableau(scheme), t0, t1, x, step_index)[0]


def solve(model, cfg: SolverConfig, x0, grid=None) -> Trajectory:
    x = np.asarray(x0, dtype=float)
    if not np.all(np.isfinite(x)):
        raise InputError("non-finite initial state")
    grid = make_grid(model.schedule, cfg) if grid is None else np.asarray(grid, dtype=float)
    states = [x]
    stages = [] if cfg.store_stages else None
    exp = cfg.scheme in EXPONENTIAL_SCHEMES
    tab = None if exp else tableau(cfg.scheme)
    for n in range(len(grid) - 1):
        t0, t1 = grid[n], grid[n + 1]
        if exp:
            x = exp_euler_step(model, t0, t1, x)
            _check_finite(x, n, "update")
            if stages is not None:
                stages.append((np.array([t0]), states[-1][None]))
        else:
            x, taus, xs = rk_step(model, tab, t0, t1, x, n)
            if stages is not None:
                stages.append((taus, xs))
        states.append(x)
    return Trajectory(grid, np.stack(states), stages)


def dense_solve(model, s, t, x, rtol=1e-12, atol=1e-12, dense_output=False):
    """High-accuracy reference solve of the flow on [s, t].

    A batch ``(n, d)`` is integrated as one system, so every row sees the same
    step sequence; differences between rows then carry no step-selection noise.
    """
    x = np.asarray(x, dtype=float)
    if x.ndim not in (1, 2):
        raise InputError("dense_solve takes a state or a batch of states")
    if dense_output and x.ndim != 1:
        raise InputError("dense output is available for a single state only")
    if s == t:
        return (x.copy(), None) if dense_output else x.copy()
    shape = x.shape
    sol = solve_ivp(
        lambda tau, y: model.vector_field(min(tau, t), y.reshape(shape)).ravel(),
        (s, t), x.ravel(), method="DOP853", rtol=rtol, atol=atol, dense_output=dense_output,
    )
    if not sol.success:
        raise AccuracyError(f"reference solve failed: {sol.message}")
    end = sol.y[:, -1].reshape(shape)
    return (end, sol.sol) if dense_output else end


def exact_solution_quadrature(model, s, t, x_s, epsabs=1e-9, epsrel=1e-10, rtol=1e-12):
    """Right side of the variation-of-constants formula in gamma.

    ``x_t = (sigma_t/sigma_s) x_s + sigma_t int_{gamma_s}^{gamma_t} x_{1|gamma}(x_gamma) dgamma``,
    with the path ``x_gamma`` taken from a dense high-order solve.
    """
    if getattr(model, "target", None) is None:
        raise UnsupportedOperation("exact_solution_quadrature needs an analytic posterior")
    sch = model.schedule
    sch.check_time(s)
    sch.check_time(t)
    x_s = np.asarray(x_s, dtype=float)
    if s == t:
        return x_s.copy()
    if t < s:
        raise RangeError("exact_solution_quadrature integrates forward (s <= t)")
    _, path = dense_solve(model, s, t, x_s, rtol=rtol, atol=rtol, dense_output=True)
    g_s, g_t = sch.gamma(s), sch.gamma(t)

    def integrand(g):
        tau = min(max(sch.t_of_gamma(g), s), t)
        return model.posterior_mean(tau, path(tau))

    integral, err = quad_vec(integrand, g_s, g_t, epsabs=epsabs, epsrel=epsrel, limit=4000)
    if not np.all(np.isfinite(integral)) or err > max(epsabs, epsrel * np.linalg.norm(integral)) * 10:
        raise AccuracyError(f"quadrature did not converge (error estimate {err:.3g})")
    return sch.sigma(t) / sch.sigma(s) * x_s + sch.sigma(t) * integral


def to_reparam(schedule, t, x):
    """``y = (sigma_0 / sigma_t) x`` with sigma_0 = 1."""
    return np.asarray(x, dtype=float) / schedule.sigma(t)


def from_reparam(schedule, t, y):
    return np.asarray(y, dtype=float) * schedule.sigma(t)


def solve_reparam_gamma(model, cfg: SolverConfig, x0, gamma_scheme="euler") -> Trajectory:
    """Integrate ``dy/dgamma = x_{1|gamma}(sigma_gamma y)`` on the grid of ``cfg``.

    The returned trajectory holds x-space states; times are t values.
    """
    sch = model.schedule
    if abs(sch.sigma(0.0) - 1.0) > 1e-12:
        raise ConfigError("the gamma reparameterization assumes sigma_0 = 1")
    tgrid = make_grid(sch, cfg)
    gammas = np.array([sch.gamma(t) for t in tgrid])
    tab = tableau(gamma_scheme)

    def rhs(g, y):
        tau = min(sch.t_of_gamma(g), sch.t_end)
        return model.posterior_mean(tau, from_reparam(sch, tau, y))

    y = to_reparam(sch, tgrid[0], x0)
    states = [np.asarray(x0, dtype=float)]
    for n in range(cfg.n_steps):
        g0, g1 = gammas[n], gammas[n + 1]
        h = g1 - g0
        ks = []
        for j in range(tab.stages):
            yj = y
            for i in range(j):
                if tab.a[j, i] != 0.0:
                    yj = yj + h * tab.a[j, i] * ks[i]
            kj = rhs(g0 + tab.c[j] * h, yj)
            _check_finite(kj, n, f"k{j + 1}")
            ks.append(kj)
        for j in range(tab.stages):
            if tab.b[j] != 0.0:
                y = y + h * tab.b[j] * ks[j]
        states.append(from_reparam(sch, tgrid[n + 1], y))
    return Trajectory(tgrid, np.stack(states))
