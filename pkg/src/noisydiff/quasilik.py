"""Noise-variance estimator, the two adaptive quasi-likelihoods and their local fields."""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .model import DiffusionModel, SamplingScheme, psd_clip
from .preaverage import LocalMeanSeries, block_increments, local_means
from .simulate import ObservationSeries

MAX_JITTER = 1e-6


class WeightMatrixError(np.linalg.LinAlgError):
    """Weight matrix is not positive definite even after jitter escalation."""


class OutsideAdmissibleSet(ValueError):
    pass


def noise_variance_estimate(series: ObservationSeries) -> np.ndarray:
    """(1/2n) * sum of outer squares of all n first differences."""
    values = series.values if isinstance(series, ObservationSeries) else np.asarray(series, dtype=float)
    if values.ndim == 1:
        values = values[:, None]
    if values.shape[0] < 2:
        raise ValueError("need at least two observations")
    inc = np.diff(values, axis=0)
    n, d = inc.shape
    out = np.empty((d, d))
    for i in range(d):
        for j in range(i, d):
            out[i, j] = out[j, i] = np.sum(inc[:, i] * inc[:, j]) / (2.0 * n)
    return out


def modified_diffusion_matrix(model: DiffusionModel, x, alpha, lam, scheme: SamplingScheme) -> np.ndarray:
    """A(x, alpha) + 3 Delta_n^{(2-tau)/(tau-1)} Lambda, shape (N, d, d)."""
    lam = np.atleast_2d(np.asarray(lam, dtype=float))
    return model.A(x, alpha) + 3.0 * scheme.noise_factor * lam


def _quad_logdet(mats: np.ndarray, vecs: np.ndarray, jitter: float, want_logdet: bool = True):
    """Per-row v^T M^{-1} v and log det M via Cholesky, escalating jitter on failure."""
    d = mats.shape[-1]
    if d == 1:
        m = mats[:, 0, 0]
        extra = 0.0
        while not np.all(m + extra > 0):
            extra = jitter if extra == 0.0 else extra * 10.0
            if extra == 0.0 or extra > MAX_JITTER * (1 + 1e-9):
                raise WeightMatrixError("non-PD weight matrix")
        m = m + extra if extra else m
        return vecs[:, 0] ** 2 / m, (np.log(m) if want_logdet else None)
    eye = np.eye(d)
    extra = 0.0
    while True:
        try:
            chol = np.linalg.cholesky(mats + extra * eye if extra else mats)
            break
        except np.linalg.LinAlgError:
            extra = jitter if extra == 0.0 else extra * 10.0
            if extra == 0.0 or extra > MAX_JITTER * (1 + 1e-9):
                raise WeightMatrixError("non-PD weight matrix") from None
    y = np.linalg.solve(chol, vecs[..., None])[..., 0]
    quad = np.sum(y * y, axis=-1)
    if not want_logdet:
        return quad, None
    logdet = 2.0 * np.sum(np.log(np.diagonal(chol, axis1=-2, axis2=-1)), axis=-1)
    return quad, logdet


@dataclass(frozen=True)
class QuasiLikContext:
    """Local means of one series with the plug-in noise variance.

    ``incs`` holds Ybar_{j+1} - Ybar_j and ``prev`` holds Ybar_{j-1} for
    j = 1, ..., k_n - 2.
    """

    lm: LocalMeanSeries
    scheme: SamplingScheme
    model: DiffusionModel
    lambda_hat: np.ndarray
    jitter: float = 1e-10

    def __post_init__(self):
        if self.jitter < 0:
            raise ValueError("jitter must be nonnegative")
        if self.lm.means.shape[0] < 3:
            raise ValueError("need k_n >= 3 local means")
        lam = psd_clip(self.lambda_hat)
        lam.setflags(write=False)
        object.__setattr__(self, "lambda_hat", lam)
        incs = block_increments(self.lm)[1:]
        prev = self.lm.means[:-2]
        object.__setattr__(self, "incs", incs)
        object.__setattr__(self, "prev", prev)
        object.__setattr__(self, "_a_cache", (None, None))

    def diffusion_at_prev(self, alpha) -> np.ndarray:
        """A(Ybar_{j-1}, alpha), memoised for the most recent alpha."""
        alpha = np.asarray(alpha, dtype=float)
        key = alpha.tobytes()
        cached_key, cached = self._a_cache
        if cached_key != key:
            cached = self.model.A(self.prev, alpha)
            object.__setattr__(self, "_a_cache", (key, cached))
        return cached

    @classmethod
    def from_series(cls, series: ObservationSeries, model: DiffusionModel, lambda_hat=None,
                    jitter: float = 1e-10) -> "QuasiLikContext":
        if lambda_hat is None:
            lambda_hat = noise_variance_estimate(series)
        return cls(lm=local_means(series), scheme=series.scheme, model=model, lambda_hat=lambda_hat,
                   jitter=jitter)

    @property
    def k(self) -> int:
        return self.scheme.k


def h1(ctx: QuasiLikContext, alpha) -> float:
    delta = ctx.scheme.delta
    mats = modified_diffusion_matrix(ctx.model, ctx.prev, alpha, ctx.lambda_hat, ctx.scheme)
    quad, logdet = _quad_logdet(mats, ctx.incs, ctx.jitter)
    return float(-0.5 * np.sum(quad / (2.0 / 3.0 * delta) + logdet))


def h2(ctx: QuasiLikContext, beta, alpha_plugin) -> float:
    delta = ctx.scheme.delta
    resid = ctx.incs - delta * ctx.model.b(ctx.prev, beta)
    quad, _ = _quad_logdet(ctx.diffusion_at_prev(alpha_plugin), resid, ctx.jitter, want_logdet=False)
    return float(-0.5 * np.sum(quad / delta))


def _objective(objective, ctx: QuasiLikContext, alpha_plugin=None):
    """(callable, box, squared rate) for 'h1' or 'h2'."""
    if objective in ("h1", h1):
        return (lambda a: h1(ctx, a)), ctx.model.alpha_box, float(ctx.scheme.k)
    if objective in ("h2", h2):
        if alpha_plugin is None:
            raise ValueError("h2 needs an alpha plug-in value")
        return (lambda b: h2(ctx, b, alpha_plugin)), ctx.model.beta_box, float(ctx.scheme.T)
    raise ValueError(f"unknown objective {objective!r}")


def fd_gradient(f: Callable[[np.ndarray], float], point, box=None) -> np.ndarray:
    """Central differences with step max(1e-6, 1e-7 |x_i|); one-sided at the box walls."""
    x = np.asarray(point, dtype=float)
    box = None if box is None else np.asarray(box, dtype=float)
    grad = np.empty_like(x)
    f0 = None
    for i in range(x.size):
        step = max(1e-6, 1e-7 * abs(x[i]))
        up, down = x.copy(), x.copy()
        up[i] += step
        down[i] -= step
        hi_ok = box is None or up[i] <= box[i, 1]
        lo_ok = box is None or down[i] >= box[i, 0]
        if hi_ok and lo_ok:
            grad[i] = (f(up) - f(down)) / (2.0 * step)
            continue
        if f0 is None:
            f0 = f(x)
        if hi_ok:
            grad[i] = (f(up) - f0) / step
        elif lo_ok:
            grad[i] = (f0 - f(down)) / step
        else:
            raise ValueError("box too narrow for a finite-difference step")
    return grad


def fd_hessian(f: Callable[[np.ndarray], float], point, box=None, rel_step: float = 1e-4) -> np.ndarray:
    """Symmetrised central-difference Hessian; the stencil shifts inward near the walls."""
    x = np.asarray(point, dtype=float).copy()
    m = x.size
    steps = np.maximum(rel_step, rel_step * np.abs(x))
    if box is not None:
        box = np.asarray(box, dtype=float)
        x = np.clip(x, box[:, 0] + steps, box[:, 1] - steps)
    cache: dict = {}

    def at(offsets):
        key = tuple(offsets)
        if key not in cache:
            cache[key] = f(x + np.asarray(offsets, dtype=float) * steps)
        return cache[key]

    zero = [0] * m
    f0 = at(zero)
    hess = np.empty((m, m))
    for i in range(m):
        e = zero.copy()
        e[i] = 1
        em = zero.copy()
        em[i] = -1
        hess[i, i] = (at(e) - 2.0 * f0 + at(em)) / steps[i] ** 2
        for j in range(i):
            vals = []
            for si, sj in itertools.product((1, -1), repeat=2):
                o = zero.copy()
                o[i], o[j] = si, sj
                vals.append(si * sj * at(o))
            hess[i, j] = hess[j, i] = sum(vals) / (4.0 * steps[i] * steps[j])
    return 0.5 * (hess + hess.T)


def gradient(objective, ctx: QuasiLikContext, point, alpha_plugin=None) -> np.ndarray:
    f, box, _ = _objective(objective, ctx, alpha_plugin)
    return fd_gradient(f, point, box)


def curvature(objective, ctx: QuasiLikContext, point, alpha_plugin=None) -> np.ndarray:
    """Negated Hessian of H1/k_n or H2/T_n (positive semi-definite near the truth)."""
    f, box, norm = _objective(objective, ctx, alpha_plugin)
    return -fd_hessian(lambda t: f(t) / norm, point, box)


def score_alpha(ctx: QuasiLikContext, alpha) -> np.ndarray:
    return gradient("h1", ctx, alpha) / math.sqrt(ctx.scheme.k)


def score_beta(ctx: QuasiLikContext, beta, alpha_plugin) -> np.ndarray:
    return gradient("h2", ctx, beta, alpha_plugin) / math.sqrt(ctx.scheme.T)


def log_random_field(objective, ctx: QuasiLikContext, center, u, alpha_plugin=None,
                     center_value: Optional[float] = None) -> float:
    """H(center + u / rate) - H(center); rate is sqrt(k_n) for h1 and sqrt(T_n) for h2."""
    f, box, rate2 = _objective(objective, ctx, alpha_plugin)
    center = np.asarray(center, dtype=float)
    u = np.asarray(u, dtype=float).reshape(center.shape)
    point = center + u / math.sqrt(rate2)
    if np.any(point <= box[:, 0]) or np.any(point >= box[:, 1]):
        raise OutsideAdmissibleSet(f"u = {u.tolist()} maps outside the open parameter box")
    if not np.any(u):
        return 0.0
    if center_value is None:
        center_value = f(center)
    return f(point) - center_value


def random_field(objective, ctx: QuasiLikContext, center, u, alpha_plugin=None) -> float:
    return math.exp(log_random_field(objective, ctx, center, u, alpha_plugin))


def objective_surface(objective, ctx: QuasiLikContext, axes, alpha_plugin=None) -> np.ndarray:
    """Objective over the tensor grid spanned by ``axes``; rows are (param..., value)."""
    f, box, _ = _objective(objective, ctx, alpha_plugin)
    axes = [np.asarray(a, dtype=float) for a in axes]
    if len(axes) != box.shape[0]:
        raise ValueError(f"need {box.shape[0]} grid axes, got {len(axes)}")
    pts = np.stack([g.ravel() for g in np.meshgrid(*axes, indexing="ij")], axis=-1)
    vals = np.array([f(p) for p in pts])
    return np.column_stack([pts, vals])
