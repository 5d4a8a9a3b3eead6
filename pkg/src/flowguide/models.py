"""Posterior-mean backends.

Two backends implement the same query surface (posterior mean, its Jacobian
products, and the induced vector field):

* :class:`AnalyticMixture` -- exact ``E[X_1 | X_t = x]`` for a Gaussian-mixture
  data distribution, i.e. a model "trained to zero loss".
* :class:`MicroMlp` -- a small two-hidden-layer tanh network regressed onto the
  conditional flow-matching target, with hand-written forward/reverse mode.

All queries accept a single state of shape ``(d,)`` or a batch ``(n, d)``.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import paths
from .errors import (
    ConfigError,
    InputError,
    ModelError,
    TrainingError,
    UnsupportedOperation,
)

_LOG_2PI = math.log(2.0 * math.pi)


def _as_state(x, dim):
    x = np.asarray(x, dtype=float)
    if x.shape[-1:] != (dim,) or x.ndim > 2:
        raise InputError(f"expected state of shape ({dim},) or (n, {dim}), got {x.shape}")
    if not np.all(np.isfinite(x)):
        raise InputError("non-finite state")
    return x


@dataclass(frozen=True)
class GaussianMixtureTarget:
    weights: np.ndarray
    means: np.ndarray
    covariances: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float).reshape(-1)
        mu = np.atleast_2d(np.asarray(self.means, dtype=float))
        cov = np.asarray(self.covariances, dtype=float)
        if cov.ndim == 2:
            cov = cov[None]
        k, d = mu.shape
        if w.shape != (k,) or cov.shape != (k, d, d):
            raise ConfigError(
                f"inconsistent mixture shapes: weights {w.shape}, means {mu.shape}, "
                f"covariances {cov.shape}"
            )
        if not 1 <= d <= 64:
            raise ConfigError(f"dimension {d} unsupported (1 <= d <= 64)")
        if np.any(w <= 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ConfigError("mixture weights must be positive and sum to 1")
        if not np.allclose(cov, np.swapaxes(cov, -1, -2), atol=1e-14):
            raise ConfigError("covariances must be symmetric")
        try:
            np.linalg.cholesky(cov)
        except np.linalg.LinAlgError:
            raise ConfigError("covariances must be positive definite")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", mu)
        object.__setattr__(self, "covariances", cov)

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def n_components(self) -> int:
        return self.means.shape[0]

    @classmethod
    def isotropic(cls, weights, means, stds):
        means = np.atleast_2d(np.asarray(means, dtype=float))
        k, d = means.shape
        stds = np.broadcast_to(np.asarray(stds, dtype=float), (k,))
        cov = np.stack([s * s * np.eye(d) for s in stds])
        return cls(np.asarray(weights, dtype=float), means, cov)

    @classmethod
    def dirac(cls, mean, scale=1e-10):
        """Single component with covariance ``scale * I`` (a near point mass)."""
        mean = np.asarray(mean, dtype=float)
        return cls(np.ones(1), mean[None], scale * np.eye(mean.size)[None])

    @classmethod
    def random(cls, rng, n_components, dim, spread=2.0, std_range=(0.3, 1.0)):
        """Random well-conditioned mixture used by the verification suites."""
        w = rng.uniform(0.5, 1.5, n_components)
        w = w / w.sum()
        mu = rng.normal(0.0, spread, (n_components, dim))
        cov = []
        for _ in range(n_components):
            q, _ = np.linalg.qr(rng.normal(size=(dim, dim)))
            ev = rng.uniform(*std_range, dim) ** 2
            c = (q * ev) @ q.T
            cov.append(0.5 * (c + c.T))
        return cls(w, mu, np.stack(cov))

    def sample(self, n, rng):
        comp = rng.choice(self.n_components, size=n, p=self.weights)
        chol = np.linalg.cholesky(self.covariances)
        z = rng.standard_normal((n, self.dim))
        return self.means[comp] + np.einsum("nij,nj->ni", chol[comp], z)


class PosteriorModel:
    """Common surface; subclasses provide the posterior mean and its derivatives."""

    schedule: paths.Schedule
    dim: int

    def posterior_mean(self, t, x):
        raise NotImplementedError

    def posterior_jvp(self, t, x, v):
        raise NotImplementedError

    def posterior_vjp(self, t, x, w):
        raise NotImplementedError

    def posterior_var(self, t, x):
        raise UnsupportedOperation(f"{type(self).__name__} has no posterior variance")

    def posterior_jacobian(self, t, x):
        x = _as_state(x, self.dim)
        eye = np.eye(self.dim)
        cols = [self.posterior_jvp(t, x, np.broadcast_to(e, x.shape)) for e in eye]
        return np.stack(cols, axis=-1)

    def vector_field(self, t, x):
        a, b = paths.coeffs(self.schedule, t)
        return a * x + b * self.posterior_mean(t, x)

    def field_jvp(self, t, x, v):
        a, b = paths.coeffs(self.schedule, t)
        return a * v + b * self.posterior_jvp(t, x, v)

    def field_vjp(self, t, x, w):
        a, b = paths.coeffs(self.schedule, t)
        return a * w + b * self.posterior_vjp(t, x, w)


class AnalyticMixture(PosteriorModel):
    """Exact posterior for a Gaussian-mixture target under an affine Gaussian path.

    Component ``k`` contributes ``X_t ~ N(alpha mu_k, S_k)`` with
    ``S_k = alpha^2 Sigma_k + sigma^2 I`` and posterior mean
    ``m_k = mu_k + alpha Sigma_k S_k^{-1} (x - alpha mu_k)``.
    """

    def __init__(self, target: GaussianMixtureTarget, schedule: paths.Schedule):
        self.target = target
        self.schedule = schedule
        self.dim = target.dim
        self._time_terms = lru_cache(maxsize=512)(self._compute_time_terms)

    def __repr__(self):
        return f"AnalyticMixture(K={self.target.n_components}, d={self.dim}, {self.schedule.kind})"

    def _compute_time_terms(self, t):
        alpha, sigma = float(self.schedule.alpha(t)), float(self.schedule.sigma(t))
        cov = self.target.covariances
        eye = np.eye(self.dim)
        s_mat = alpha * alpha * cov + sigma * sigma * eye
        try:
            chol = np.linalg.cholesky(s_mat)
        except np.linalg.LinAlgError as exc:
            raise ModelError(f"Cholesky of the marginal covariance failed at t={t}") from exc
        chol_inv = np.linalg.solve(chol, np.broadcast_to(eye, s_mat.shape))
        prec = np.swapaxes(chol_inv, -1, -2) @ chol_inv
        prec = 0.5 * (prec + np.swapaxes(prec, -1, -2))
        gain = alpha * cov @ prec
        post_cov = sigma * sigma * cov @ prec
        post_cov = 0.5 * (post_cov + np.swapaxes(post_cov, -1, -2))
        logdet = 2.0 * np.log(np.diagonal(chol, axis1=-2, axis2=-1)).sum(-1)
        log_norm = np.log(self.target.weights) - 0.5 * logdet - 0.5 * self.dim * _LOG_2PI
        return alpha, prec, gain, post_cov, log_norm

    def _terms(self, t, x):
        self.schedule.check_time(t)
        x = _as_state(x, self.dim)
        alpha, prec, gain, post_cov, log_norm = self._time_terms(float(t))
        diff = x[..., None, :] - alpha * self.target.means
        sol = np.einsum("kij,...kj->...ki", prec, diff)
        logp = log_norm - 0.5 * np.einsum("...ki,...ki->...k", diff, sol)
        logp = logp - logp.max(axis=-1, keepdims=True)
        r = np.exp(logp)
        r /= r.sum(axis=-1, keepdims=True)
        m = self.target.means + np.einsum("kij,...kj->...ki", gain, diff)
        return r, m, -sol, gain, post_cov

    def responsibilities(self, t, x):
        return self._terms(t, x)[0]

    def posterior_mean(self, t, x):
        r, m, *_ = self._terms(t, x)
        return np.einsum("...k,...ki->...i", r, m)

    def posterior_jvp(self, t, x, v):
        r, m, g, gain, _ = self._terms(t, x)
        v = np.asarray(v, dtype=float)
        g_bar = np.einsum("...k,...ki->...i", r, g)
        lin = np.einsum("...k,kij,...j->...i", r, gain, v)
        dr = r * np.einsum("...ki,...i->...k", g - g_bar[..., None, :], v)
        return lin + np.einsum("...k,...ki->...i", dr, m)

    def posterior_vjp(self, t, x, w):
        r, m, g, gain, _ = self._terms(t, x)
        w = np.asarray(w, dtype=float)
        g_bar = np.einsum("...k,...ki->...i", r, g)
        lin = np.einsum("...k,kji,...j->...i", r, gain, w)
        mw = r * np.einsum("...ki,...i->...k", m, w)
        return lin + np.einsum("...k,...ki->...i", mw, g - g_bar[..., None, :])

    def posterior_var(self, t, x):
        r, m, _, _, post_cov = self._terms(t, x)
        mean = np.einsum("...k,...ki->...i", r, m)
        second = np.einsum("...k,kij->...ij", r, post_cov) + np.einsum(
            "...k,...ki,...kj->...ij", r, m, m
        )
        var = second - mean[..., :, None] * mean[..., None, :]
        return 0.5 * (var + np.swapaxes(var, -1, -2))


# ---------------------------------------------------------------------------
# micro MLP


@dataclass(frozen=True)
class MicroMlpSpec:
    dim: int
    widths: tuple = (64, 64)
    seed: int = 0

    def __post_init__(self):
        if len(self.widths) != 2:
            raise ConfigError("MicroMlp has exactly two hidden layers")
        if any(int(w) < 1 for w in self.widths):
            raise ConfigError(f"hidden widths must be positive, got {self.widths}")
        if self.dim < 1:
            raise ConfigError("dim must be positive")

    @property
    def layer_sizes(self):
        return (self.dim + 1, int(self.widths[0]), int(self.widths[1]), self.dim)


def init_mlp_params(spec: MicroMlpSpec):
    rng = np.random.default_rng(spec.seed)
    sizes = spec.layer_sizes
    params = []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        params.append(rng.normal(0.0, 1.0 / math.sqrt(fan_in), (fan_in, fan_out)))
        params.append(np.zeros(fan_out))
    return params


def _mlp_forward(params, z):
    w1, b1, w2, b2, w3, b3 = params
    h1 = np.tanh(z @ w1 + b1)
    h2 = np.tanh(h1 @ w2 + b2)
    return h1, h2, h2 @ w3 + b3


def _mlp_input(t, x):
    tcol = np.full(x.shape[:-1] + (1,), float(t))
    return np.concatenate([x, tcol], axis=-1)


class MicroMlp(PosteriorModel):
    """Network ``(x, t) -> u_t(x)`` in direct-field mode.

    The posterior mean is recovered from the field through the target-prediction
    split, ``x_{1|t} = (u - a_t x) / b_t``.
    """

    def __init__(self, params, schedule: paths.Schedule, spec: MicroMlpSpec, training=None):
        self.params = [np.asarray(p, dtype=float) for p in params]
        self.schedule = schedule
        self.spec = spec
        self.dim = spec.dim
        self.training = dict(training or {})
        sizes = spec.layer_sizes
        expect = []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            expect += [(fan_in, fan_out), (fan_out,)]
        if [p.shape for p in self.params] != expect:
            raise ConfigError("parameter shapes do not match the architecture")

    def __repr__(self):
        return f"MicroMlp(d={self.dim}, widths={self.spec.widths})"

    def network(self, t, x):
        x = _as_state(x, self.dim)
        return _mlp_forward(self.params, _mlp_input(t, x))[2]

    def vector_field(self, t, x):
        self.schedule.check_time(t)
        return self.network(t, x)

    def field_jvp(self, t, x, v):
        self.schedule.check_time(t)
        x = _as_state(x, self.dim)
        w1, b1, w2, b2, w3, _ = self.params
        h1, h2, _ = _mlp_forward(self.params, _mlp_input(t, x))
        d1 = (np.asarray(v, dtype=float) @ w1[: self.dim]) * (1.0 - h1 * h1)
        d2 = (d1 @ w2) * (1.0 - h2 * h2)
        return d2 @ w3

    def field_vjp(self, t, x, w):
        self.schedule.check_time(t)
        x = _as_state(x, self.dim)
        w1, _, w2, _, w3, _ = self.params
        h1, h2, _ = _mlp_forward(self.params, _mlp_input(t, x))
        g2 = (np.asarray(w, dtype=float) @ w3.T) * (1.0 - h2 * h2)
        g1 = (g2 @ w2.T) * (1.0 - h1 * h1)
        return g1 @ w1[: self.dim].T

    def posterior_mean(self, t, x):
        a, b = paths.coeffs(self.schedule, t)
        x = _as_state(x, self.dim)
        return (self.network(t, x) - a * x) / b

    def posterior_jvp(self, t, x, v):
        a, b = paths.coeffs(self.schedule, t)
        return (self.field_jvp(t, x, v) - a * np.asarray(v, dtype=float)) / b

    def posterior_vjp(self, t, x, w):
        a, b = paths.coeffs(self.schedule, t)
        return (self.field_vjp(t, x, w) - a * np.asarray(w, dtype=float)) / b


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 20000
    width: int = 64
    batch: int = 256
    lr: float = 0.05
    seed: int = 0
    holdout: int = 4096
    max_holdout_loss: Optional[float] = None

    def __post_init__(self):
        if self.width < 1:
            raise ConfigError(f"width must be positive, got {self.width}")
        if self.steps < 0 or self.batch < 1 or self.holdout < 1:
            raise ConfigError("steps must be >= 0 and batch, holdout >= 1")
        if not self.lr > 0:
            raise ConfigError("lr must be positive")


def _cfm_batch(target, rng, n):
    x1 = target.sample(n, rng)
    x0 = rng.standard_normal(x1.shape)
    t = rng.uniform(0.0, 1.0, (n, 1))
    return np.concatenate([t * x1 + (1.0 - t) * x0, t], axis=1), x1 - x0


def cfm_loss(params, z, target_velocity):
    return float(np.mean((_mlp_forward(params, z)[2] - target_velocity) ** 2))


def _cfm_grads(params, z, y):
    w1, b1, w2, b2, w3, b3 = params
    h1, h2, out = _mlp_forward(params, z)
    n = z.shape[0]
    g_out = 2.0 * (out - y) / out.size
    g_w3 = h2.T @ g_out
    g_b3 = g_out.sum(0)
    g_a2 = (g_out @ w3.T) * (1.0 - h2 * h2)
    g_w2 = h1.T @ g_a2
    g_b2 = g_a2.sum(0)
    g_a1 = (g_a2 @ w2.T) * (1.0 - h1 * h1)
    g_w1 = z.T @ g_a1
    g_b1 = g_a1.sum(0)
    loss = float(np.sum((out - y) ** 2) / out.size)
    del n
    return loss, [g_w1, g_b1, g_w2, g_b2, g_w3, g_b3]


def train_micro_mlp(target: GaussianMixtureTarget, schedule: paths.Schedule, cfg: TrainConfig):
    """Conditional flow matching with plain SGD and a cosine step decay."""
    if schedule.kind != "cond_ot":
        raise ConfigError("flow-matching targets are defined for the cond_ot schedule only")
    spec = MicroMlpSpec(target.dim, (cfg.width, cfg.width), cfg.seed)
    params = init_mlp_params(spec)
    rng = np.random.default_rng(cfg.seed)
    z_hold, y_hold = _cfm_batch(target, np.random.default_rng(cfg.seed + 7919), cfg.holdout)

    loss = float("nan")
    for step in range(cfg.steps):
        z, y = _cfm_batch(target, rng, cfg.batch)
        loss, grads = _cfm_grads(params, z, y)
        if not np.isfinite(loss):
            raise TrainingError(
                f"training diverged at step {step}",
                {"step": step, "lr": cfg.lr, "loss": loss},
            )
        lr = cfg.lr * 0.5 * (1.0 + math.cos(math.pi * step / max(cfg.steps, 1)))
        for p, g in zip(params, grads):
            p -= lr * g

    holdout_loss = cfm_loss(params, z_hold, y_hold)
    zero_loss = float(np.mean(y_hold**2))
    report = {
        "steps": cfg.steps,
        "final_batch_loss": loss,
        "holdout_loss": holdout_loss,
        "zero_predictor_loss": zero_loss,
    }
    if not np.isfinite(holdout_loss):
        raise TrainingError("held-out loss is not finite", report)
    limit = cfg.max_holdout_loss if cfg.max_holdout_loss is not None else zero_loss
    if holdout_loss >= limit:
        raise TrainingError(
            f"held-out CFM loss {holdout_loss:.4g} did not reach the threshold {limit:.4g}", report
        )
    return MicroMlp(params, schedule, spec, training=report)


# ---------------------------------------------------------------------------
# weights file
#
# little-endian layout:
#   8s  magic  b"FGMLP\0\0\0"
#   u32 version (1)
#   u32 dim
#   u32 number of layer sizes (4)
#   u32 x 4 layer sizes
#   f64 blocks: W1 (row-major), b1, W2, b2, W3, b3

WEIGHTS_MAGIC = b"FGMLP\x00\x00\x00"
WEIGHTS_VERSION = 1


def weights_bytes(model: MicroMlp) -> bytes:
    sizes = model.spec.layer_sizes
    header = WEIGHTS_MAGIC + struct.pack("<III", WEIGHTS_VERSION, model.dim, len(sizes))
    header += struct.pack(f"<{len(sizes)}I", *sizes)
    return header + b"".join(np.ascontiguousarray(p, dtype="<f8").tobytes() for p in model.params)


def save_weights(model: MicroMlp, path):
    Path(path).write_bytes(weights_bytes(model))


def load_weights(path, schedule: paths.Schedule) -> MicroMlp:
    blob = Path(path).read_bytes()
    if blob[:8] != WEIGHTS_MAGIC:
        raise ModelError(f"{path}: not a weights file (bad magic)")
    try:
        return _parse_weights(blob, path, schedule)
    except (struct.error, ValueError) as exc:
        raise ModelError(f"{path}: truncated or corrupt weights file ({exc})")


def _parse_weights(blob, path, schedule):
    version, dim, n_sizes = struct.unpack_from("<III", blob, 8)
    if version != WEIGHTS_VERSION:
        raise ModelError(f"{path}: unsupported weights version {version}")
    if n_sizes != 4:
        raise ModelError(f"{path}: expected 4 layer sizes, found {n_sizes}")
    offset = 20
    sizes = struct.unpack_from(f"<{n_sizes}I", blob, offset)
    offset += 4 * n_sizes
    if sizes[0] != dim + 1 or sizes[-1] != dim:
        raise ModelError(f"{path}: layer sizes {sizes} do not describe a MicroMlp")
    params = []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        for shape in ((fan_in, fan_out), (fan_out,)):
            count = int(np.prod(shape))
            block = np.frombuffer(blob, dtype="<f8", count=count, offset=offset)
            params.append(block.reshape(shape).astype(float))
            offset += 8 * count
    if offset != len(blob):
        raise ModelError(f"{path}: trailing bytes after weight blocks")
    spec = MicroMlpSpec(dim, (sizes[1], sizes[2]))
    return MicroMlp(params, schedule, spec)


def make_mixture_model(target: GaussianMixtureTarget, schedule: paths.Schedule) -> AnalyticMixture:
    return AnalyticMixture(target, schedule)


def two_mode_target(separation=2.0, std=0.15, dim=2) -> GaussianMixtureTarget:
    """Equal-weight modes at ``+-separation * e_1``."""
    mu = np.zeros((2, dim))
    mu[0, 0], mu[1, 0] = separation, -separation
    return GaussianMixtureTarget.isotropic([0.5, 0.5], mu, std)
