"""Adaptive ML-type and Bayes-type estimation: Lambda first, then alpha, then beta."""
from __future__ import annotations

import itertools
import json
import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.optimize import minimize
from scipy.special import logsumexp

from .asymptotics import vech, vech_pairs
from .model import DiffusionModel, SamplingScheme
from .quasilik import QuasiLikContext, fd_gradient, fd_hessian, h1, h2
from .simulate import ObservationSeries


class OptimizerStalled(RuntimeError):
    pass


class PosteriorUnderflow(FloatingPointError):
    pass


@dataclass(frozen=True)
class OptimizerConfig:
    multistarts: int = 8
    max_iterations: int = 500
    xtol: float = 1e-8
    ftol: float = 1e-10
    start_rule: str = "lattice_corners_plus_center"
    starts: tuple = ()

    def __post_init__(self):
        if self.multistarts < 1:
            raise ValueError("multistarts must be >= 1")
        if self.xtol <= 0 or self.ftol <= 0:
            raise ValueError("tolerances must be positive")
        if self.start_rule not in ("lattice_corners_plus_center", "user_list"):
            raise ValueError(f"unknown start rule {self.start_rule!r}")
        if self.start_rule == "user_list" and not self.starts:
            raise ValueError("user_list start rule needs explicit starts")


@dataclass(frozen=True)
class PriorSpec:
    """Prior density on a parameter box; ``None`` means uniform."""

    density: Optional[Callable[[np.ndarray], float]] = None

    def log_density(self, theta) -> float:
        if self.density is None:
            return 0.0
        val = float(self.density(np.asarray(theta, dtype=float)))
        if not val > 0:
            raise ValueError("prior density must be strictly positive on the box")
        return math.log(val)


@dataclass(frozen=True)
class BayesConfig:
    method: str = "auto"
    nodes_per_dim: int = 64
    mcmc_draws: int = 20000
    burn_in: int = 2000
    proposal_scale: Optional[float] = None
    seed: int = 0
    window_sd: float = 12.0
    scan_margin: float = 30.0

    def __post_init__(self):
        if self.method not in ("auto", "gauss_legendre", "metropolis"):
            raise ValueError(f"unknown Bayes method {self.method!r}")
        if self.nodes_per_dim < 8:
            raise ValueError("nodes_per_dim must be >= 8")
        if self.mcmc_draws <= self.burn_in:
            raise ValueError("mcmc_draws must exceed burn_in")


@dataclass
class OptResult:
    x: np.ndarray
    value: float
    iterations: int
    evaluations: int
    restarts: int
    restarts_converged: int
    restarts_agreeing: int


def lattice_starts(box: np.ndarray, count: int) -> list[np.ndarray]:
    """Box centre followed by the 2^m corners pulled 10% toward the centre."""
    box = np.asarray(box, dtype=float)
    center = box.mean(axis=1)
    pts = [center]
    for corner in itertools.product(*box):
        pts.append(center + 0.9 * (np.asarray(corner) - center))
    return pts[:count]


def maximize(f: Callable[[np.ndarray], float], box, opt: OptimizerConfig = OptimizerConfig()) -> OptResult:
    """Multistart Nelder-Mead on the closed box (points are clipped onto it)."""
    box = np.asarray(box, dtype=float)
    if opt.start_rule == "user_list":
        starts = [np.clip(np.asarray(s, dtype=float), box[:, 0], box[:, 1]) for s in opt.starts]
    else:
        starts = lattice_starts(box, opt.multistarts)
    results = []
    iters = evals = converged = 0
    for start in starts:
        res = minimize(lambda t: -f(t), start, method="Nelder-Mead", bounds=box,
                       options={"xatol": opt.xtol, "fatol": opt.ftol, "maxiter": opt.max_iterations})
        x = np.clip(res.x, box[:, 0], box[:, 1])
        results.append((float(-res.fun), x))
        iters += res.nit
        evals += res.nfev
        converged += bool(res.success)
    if converged == 0:
        raise OptimizerStalled(f"optimizer stalled: none of {len(starts)} restarts converged")
    best_val = max(v for v, _ in results)
    tied = [x for v, x in results if v == best_val]
    best = min(tied, key=lambda x: tuple(x))
    tol = 1e-6 * np.maximum(1.0, box[:, 1] - box[:, 0])
    agreeing = sum(bool(np.all(np.abs(x - best) <= tol)) for _, x in results)
    return OptResult(x=best, value=best_val, iterations=iters, evaluations=evals, restarts=len(starts),
                     restarts_converged=converged, restarts_agreeing=agreeing)


def _on_boundary(x: np.ndarray, box: np.ndarray) -> bool:
    tol = 1e-8 * (box[:, 1] - box[:, 0])
    return bool(np.any(x - box[:, 0] <= tol) or np.any(box[:, 1] - x <= tol))


def _opt_diag(res: OptResult, f, box) -> dict:
    return {
        "iterations": res.iterations,
        "evaluations": res.evaluations,
        "restarts": res.restarts,
        "restarts_converged": res.restarts_converged,
        "restarts_agreeing": res.restarts_agreeing,
        "gradient_norm": float(np.linalg.norm(fd_gradient(f, res.x, box))),
        "boundary": _on_boundary(res.x, box),
    }


@dataclass
class EstimationReport:
    method: str
    lambda_hat: np.ndarray
    alpha: np.ndarray
    beta: np.ndarray
    objective: dict
    diagnostics: dict = field(default_factory=dict)

    @property
    def theta_eps(self) -> np.ndarray:
        return vech(self.lambda_hat)

    def to_dict(self) -> dict:
        return {
            "lambda_hat": np.asarray(self.lambda_hat).tolist(),
            "alpha": np.asarray(self.alpha).tolist(),
            "beta": np.asarray(self.beta).tolist(),
            "method": self.method,
            "objective": dict(self.objective),
            "diagnostics": _jsonable(self.diagnostics),
        }

    def to_json(self, **kwargs) -> str:
        return json.dumps(self.to_dict(), **kwargs)

    def csv_header(self) -> list[str]:
        d = self.lambda_hat.shape[0]
        cols = ["method"] + [f"lambda_{i}{j}" for i, j in vech_pairs(d)]
        cols += [f"alpha_{i + 1}" for i in range(self.alpha.size)]
        cols += [f"beta_{i + 1}" for i in range(self.beta.size)]
        return cols + ["h1", "h2"]

    def csv_row(self) -> list:
        vals = [self.method] + [format(v, ".17g") for v in self.theta_eps]
        vals += [format(v, ".17g") for v in np.concatenate([self.alpha, self.beta])]
        return vals + [format(self.objective["h1"], ".17g"), format(self.objective["h2"], ".17g")]


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def _context(series: ObservationSeries, model: DiffusionModel, scheme: Optional[SamplingScheme],
             jitter: float) -> QuasiLikContext:
    if scheme is not None and scheme != series.scheme:
        if scheme.n != series.scheme.n:
            raise ValueError("scheme inconsistent with series length")
        series = ObservationSeries(scheme=scheme, values=series.values)
    if series.dim != model.dim_state:
        raise ValueError(f"series is {series.dim}-dimensional, model expects {model.dim_state}")
    return QuasiLikContext.from_series(series, model, jitter=jitter)


def adaptive_ml(series: ObservationSeries, model: DiffusionModel, scheme: Optional[SamplingScheme] = None,
                opt: OptimizerConfig = OptimizerConfig(), jitter: float = 1e-10) -> EstimationReport:
    ctx = _context(series, model, scheme, jitter)
    return adaptive_ml_from_context(ctx, opt)


def adaptive_ml_from_context(ctx: QuasiLikContext, opt: OptimizerConfig = OptimizerConfig()) -> EstimationReport:
    model = ctx.model
    f1 = lambda a: h1(ctx, a)
    ra = maximize(f1, model.alpha_box, opt)
    f2 = lambda b: h2(ctx, b, ra.x)
    rb = maximize(f2, model.beta_box, opt)
    return EstimationReport(
        method="ml",
        lambda_hat=ctx.lambda_hat.copy(),
        alpha=ra.x,
        beta=rb.x,
        objective={"h1": ra.value, "h2": rb.value},
        diagnostics={"alpha": _opt_diag(ra, f1, model.alpha_box), "beta": _opt_diag(rb, f2, model.beta_box)},
    )


# --- posterior means ------------------------------------------------------------

def _gl_tensor(lo: np.ndarray, hi: np.ndarray, nodes: int):
    z, w = np.polynomial.legendre.leggauss(nodes)
    axes = [0.5 * (l + h) + 0.5 * (h - l) * z for l, h in zip(lo, hi)]
    waxes = [0.5 * (h - l) * w for l, h in zip(lo, hi)]
    pts = np.stack([g.ravel() for g in np.meshgrid(*axes, indexing="ij")], axis=-1)
    logw = np.zeros(pts.shape[0])
    for g in np.meshgrid(*waxes, indexing="ij"):
        logw = logw + np.log(g.ravel())
    return pts, logw


def _posterior_scale(log_target, mode, box) -> np.ndarray:
    width = box[:, 1] - box[:, 0]
    prec = -fd_hessian(log_target, mode, box)
    try:
        np.linalg.cholesky(prec)
        sd = np.sqrt(np.diag(np.linalg.inv(prec)))
    except np.linalg.LinAlgError:
        return width
    return np.where(np.isfinite(sd), np.minimum(sd, width), width)


def quadrature_mean(log_target: Callable[[np.ndarray], float], box, bcfg: BayesConfig = BayesConfig(),
                    opt: OptimizerConfig = OptimizerConfig()):
    """Posterior mean by tensor Gauss-Legendre over a window holding the posterior mass.

    The window is the box cut to mode +- window_sd marginal sds, widened to
    cover every coarse-scan node within ``scan_margin`` nats of the best value.
    """
    box = np.asarray(box, dtype=float)
    lo_box, hi_box = box[:, 0], box[:, 1]
    coarse = max(8, bcfg.nodes_per_dim // 4)
    pts, _ = _gl_tensor(lo_box, hi_box, coarse)
    scan = np.array([log_target(p) for p in pts])
    if not np.any(np.isfinite(scan)):
        raise PosteriorUnderflow("posterior mass underflow: log-posterior not finite at any scan node")
    mode_res = maximize(log_target, box, opt)
    mode = mode_res.x
    sd = _posterior_scale(log_target, mode, box)
    lo = np.maximum(lo_box, mode - bcfg.window_sd * sd)
    hi = np.minimum(hi_box, mode + bcfg.window_sd * sd)

    top = max(float(np.max(scan)), mode_res.value)
    keep = pts[scan >= top - bcfg.scan_margin]
    if keep.size:
        pad = (hi_box - lo_box) / coarse
        lo = np.maximum(lo_box, np.minimum(lo, keep.min(axis=0) - pad))
        hi = np.minimum(hi_box, np.maximum(hi, keep.max(axis=0) + pad))

    pts, logw = _gl_tensor(lo, hi, bcfg.nodes_per_dim)
    logv = np.array([log_target(p) for p in pts]) + logw
    finite = np.isfinite(logv)
    if not np.any(finite):
        raise PosteriorUnderflow("posterior mass underflow: no finite log-weights")
    norm = logsumexp(logv[finite])
    weights = np.exp(logv[finite] - norm)
    if not np.sum(weights) > 0:
        raise PosteriorUnderflow("posterior mass underflow")
    mean = weights @ pts[finite] / np.sum(weights)
    info = {"method": "gauss_legendre", "nodes": int(pts.shape[0]), "window": np.stack([lo, hi], 1),
            "mode": mode, "log_normaliser": float(norm)}
    return np.clip(mean, lo_box, hi_box), info


def _reflect(x: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    width = hi - lo
    t = np.mod(x - lo, 2.0 * width)
    return lo + np.where(t > width, 2.0 * width - t, t)


def metropolis_mean(log_target: Callable[[np.ndarray], float], box, bcfg: BayesConfig = BayesConfig(),
                    opt: OptimizerConfig = OptimizerConfig(), rate2: Optional[float] = None,
                    rng: Optional[np.random.Generator] = None, start=None):
    """Posterior mean from a reflected random-walk Metropolis chain started at the mode."""
    box = np.asarray(box, dtype=float)
    lo, hi = box[:, 0], box[:, 1]
    if rng is None:
        rng = np.random.Generator(np.random.Philox(bcfg.seed))
    scale = bcfg.proposal_scale if bcfg.proposal_scale is not None else (
        1.0 / math.sqrt(rate2) if rate2 else 0.1)
    step = scale * (hi - lo)
    x = np.asarray(start, dtype=float) if start is not None else maximize(log_target, box, opt).x
    lx = log_target(x)
    draws = np.empty((bcfg.mcmc_draws, box.shape[0]))
    accepted = 0
    noise = rng.standard_normal(draws.shape)
    unif = rng.random(bcfg.mcmc_draws)
    for i in range(bcfg.mcmc_draws):
        y = _reflect(x + step * noise[i], lo, hi)
        ly = log_target(y)
        if math.log(unif[i]) < ly - lx:
            x, lx = y, ly
            if i >= bcfg.burn_in:
                accepted += 1
        draws[i] = x
    kept = draws[bcfg.burn_in:]
    rate = accepted / kept.shape[0]
    info = {"method": "metropolis", "acceptance_rate": rate, "draws": int(kept.shape[0]),
            "mcse": _batch_means_se(kept), "acceptance_warning": not (0.1 <= rate <= 0.6)}
    if info["acceptance_warning"]:
        warnings.warn(f"Metropolis acceptance rate {rate:.3f} outside [0.1, 0.6]", RuntimeWarning, stacklevel=2)
    return kept.mean(axis=0), info


def _batch_means_se(draws: np.ndarray, batches: int = 20) -> np.ndarray:
    usable = (draws.shape[0] // batches) * batches
    means = draws[:usable].reshape(batches, -1, draws.shape[1]).mean(axis=1)
    return means.std(axis=0, ddof=1) / math.sqrt(batches)


def posterior_mean(log_target, box, bcfg: BayesConfig = BayesConfig(), opt: OptimizerConfig = OptimizerConfig(),
                   rate2: Optional[float] = None, rng: Optional[np.random.Generator] = None):
    method = bcfg.method
    if method == "auto":
        method = "gauss_legendre" if np.asarray(box).shape[0] <= 2 else "metropolis"
    if method == "gauss_legendre":
        return quadrature_mean(log_target, box, bcfg, opt)
    return metropolis_mean(log_target, box, bcfg, opt, rate2=rate2, rng=rng)


def adaptive_bayes(series: ObservationSeries, model: DiffusionModel, scheme: Optional[SamplingScheme] = None,
                   priors: Sequence[PriorSpec] = (PriorSpec(), PriorSpec()), bcfg: BayesConfig = BayesConfig(),
                   opt: OptimizerConfig = OptimizerConfig(), jitter: float = 1e-10,
                   rng: Optional[np.random.Generator] = None) -> EstimationReport:
    ctx = _context(series, model, scheme, jitter)
    return adaptive_bayes_from_context(ctx, priors, bcfg, opt, rng)


def adaptive_bayes_from_context(ctx: QuasiLikContext, priors: Sequence[PriorSpec] = (PriorSpec(), PriorSpec()),
                                bcfg: BayesConfig = BayesConfig(), opt: OptimizerConfig = OptimizerConfig(),
                                rng: Optional[np.random.Generator] = None) -> EstimationReport:
    model = ctx.model
    p1, p2 = priors
    log1 = lambda a: h1(ctx, a) + p1.log_density(a)
    alpha, info1 = posterior_mean(log1, model.alpha_box, bcfg, opt, rate2=float(ctx.scheme.k), rng=rng)
    log2 = lambda b: h2(ctx, b, alpha) + p2.log_density(b)
    beta, info2 = posterior_mean(log2, model.beta_box, bcfg, opt, rate2=float(ctx.scheme.T), rng=rng)
    return EstimationReport(
        method="bayes",
        lambda_hat=ctx.lambda_hat.copy(),
        alpha=alpha,
        beta=beta,
        objective={"h1": h1(ctx, alpha), "h2": h2(ctx, beta, alpha)},
        diagnostics={"alpha": info1, "beta": info2},
    )
