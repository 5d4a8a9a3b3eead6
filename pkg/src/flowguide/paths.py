"""Affine probability path schedules.

A schedule is the pair ``(alpha_t, sigma_t)`` in ``X_t = alpha_t X_1 + sigma_t X_0``
with ``X_0`` the noise and ``X_1`` the data.  Everything downstream works with
the target-prediction split of the marginal field

    u_t(x) = a_t x + b_t x_{1|t}(x),   a_t = sigma'/sigma,   b_t = alpha' - alpha sigma'/sigma

and with the signal-to-noise ratio ``gamma_t = alpha_t / sigma_t``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, NamedTuple, Optional

import numpy as np

from .errors import ConfigError, InputError, RangeError

_BOUNDARY_TOL = 1e-12
_DOMAIN_TOL = 1e-12


class SnrPoint(NamedTuple):
    t: float
    gamma: float
    gamma_dot: float


@dataclass(frozen=True)
class Schedule:
    kind: str
    alpha: Callable[[float], float]
    sigma: Callable[[float], float]
    alpha_dot: Callable[[float], float]
    sigma_dot: Callable[[float], float]
    t_eps: float = 1e-3
    # optional closed forms; bisection / quotient rule otherwise
    gamma_dot_fn: Optional[Callable[[float], float]] = None
    gamma_inverse_fn: Optional[Callable[[float], float]] = None
    sigma_inverse_fn: Optional[Callable[[float], float]] = None

    def __post_init__(self):
        if not (0.0 < self.t_eps <= 0.1):
            raise ConfigError(f"t_eps must lie in (0, 0.1], got {self.t_eps}")
        ends = (self.alpha(0.0), self.sigma(1.0), self.alpha(1.0) - 1.0, self.sigma(0.0) - 1.0)
        if max(abs(v) for v in ends) > _BOUNDARY_TOL:
            raise ConfigError(
                "schedule violates the boundary conditions "
                "alpha(0)=sigma(1)=0, alpha(1)=sigma(0)=1"
            )

    @property
    def t_end(self) -> float:
        return 1.0 - self.t_eps

    def check_time(self, t, lo=0.0, hi=None):
        hi = self.t_end if hi is None else hi
        if not np.all(np.isfinite(t)):
            raise InputError(f"non-finite time {t}")
        if np.any(np.asarray(t) < lo - _DOMAIN_TOL) or np.any(np.asarray(t) > hi + _DOMAIN_TOL):
            raise RangeError(f"time {t} outside [{lo}, {hi}]")

    def gamma(self, t):
        return self.alpha(t) / self.sigma(t)

    def gamma_dot(self, t):
        if self.gamma_dot_fn is not None:
            return self.gamma_dot_fn(t)
        s = self.sigma(t)
        return (self.alpha_dot(t) * s - self.alpha(t) * self.sigma_dot(t)) / (s * s)

    def t_of_gamma(self, gamma):
        if self.gamma_inverse_fn is not None:
            return self.gamma_inverse_fn(gamma)
        return _bisect_increasing(self.gamma, gamma, 0.0, self.t_end)

    def t_of_sigma(self, sigma):
        if self.sigma_inverse_fn is not None:
            return self.sigma_inverse_fn(sigma)
        return _bisect_increasing(lambda t: -self.sigma(t), -sigma, 0.0, 1.0)


def _bisect_increasing(f, target, lo, hi, tol=1e-12, max_iter=200):
    a, b = lo, hi
    for _ in range(max_iter):
        m = 0.5 * (a + b)
        if f(m) < target:
            a = m
        else:
            b = m
        if b - a < tol:
            break
    return 0.5 * (a + b)


def cond_ot(t_eps: float = 1e-3) -> Schedule:
    """alpha = t, sigma = 1 - t."""
    return Schedule(
        kind="cond_ot",
        alpha=lambda t: t,
        sigma=lambda t: 1.0 - t,
        alpha_dot=lambda t: 1.0 + 0.0 * t,
        sigma_dot=lambda t: -1.0 + 0.0 * t,
        t_eps=t_eps,
        gamma_dot_fn=lambda t: 1.0 / (1.0 - t) ** 2,
        gamma_inverse_fn=lambda g: g / (1.0 + g),
        sigma_inverse_fn=lambda s: 1.0 - s,
    )


def variance_preserving(t_eps: float = 1e-3) -> Schedule:
    """Trigonometric path alpha = sin(pi t / 2), sigma = cos(pi t / 2)."""
    c = 0.5 * math.pi
    return Schedule(
        kind="vp",
        alpha=lambda t: np.sin(c * t),
        sigma=lambda t: np.cos(c * t),
        alpha_dot=lambda t: c * np.cos(c * t),
        sigma_dot=lambda t: -c * np.sin(c * t),
        t_eps=t_eps,
        gamma_dot_fn=lambda t: c / np.cos(c * t) ** 2,
        gamma_inverse_fn=lambda g: np.arctan(g) / c,
        sigma_inverse_fn=lambda s: np.arccos(s) / c,
    )


def custom(alpha, sigma, alpha_dot, sigma_dot, t_eps: float = 1e-3) -> Schedule:
    return Schedule("custom", alpha, sigma, alpha_dot, sigma_dot, t_eps=t_eps)


SCHEDULES = {"cond_ot": cond_ot, "vp": variance_preserving}


def make_schedule(kind: str, t_eps: float = 1e-3) -> Schedule:
    try:
        return SCHEDULES[kind](t_eps)
    except KeyError:
        raise ConfigError(f"unknown schedule kind {kind!r}; expected one of {sorted(SCHEDULES)}")


def coeffs(schedule: Schedule, t):
    """Return ``(a_t, b_t)`` of the semi-linear field split."""
    schedule.check_time(t)
    s = schedule.sigma(t)
    if np.any(np.asarray(s) < 1e-12):
        raise RangeError(f"sigma({t}) = {s} is too small for the target-prediction split")
    ratio = schedule.sigma_dot(t) / s
    return ratio, schedule.alpha_dot(t) - schedule.alpha(t) * ratio


def snr(schedule: Schedule, t: float) -> SnrPoint:
    schedule.check_time(t)
    return SnrPoint(t, schedule.gamma(t), schedule.gamma_dot(t))


def snr_inverse(schedule: Schedule, gamma: float) -> float:
    g_max = schedule.gamma(schedule.t_end)
    if not np.isfinite(gamma):
        raise InputError(f"non-finite gamma {gamma}")
    if gamma < -_DOMAIN_TOL or gamma > g_max * (1 + 1e-12):
        raise RangeError(f"gamma {gamma} outside [0, {g_max}]")
    return schedule.t_of_gamma(gamma)
