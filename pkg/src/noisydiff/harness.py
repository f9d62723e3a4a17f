"""Monte Carlo replication engine: simulate, estimate, normalise, aggregate.

Replications are processed in fixed batches of ``batch_size`` consecutive
indices, so the partition (and therefore every number in the report) does
not depend on the worker count.
"""
from __future__ import annotations

import csv
import itertools
import json
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy import stats

from .asymptotics import AsymptoticCovariance, InvariantMeasure, information_matrices, vech, vech_pairs
from .estimate import (
    BayesConfig,
    EstimationReport,
    OptimizerConfig,
    adaptive_bayes_from_context,
    adaptive_ml_from_context,
)
from .model import DiffusionModel, NoiseSpec, SamplingScheme, TrueParameters, build_scheme, get_model
from .quasilik import QuasiLikContext, h1, h2
from .simulate import MCMC_STREAM, LatentPath, PathExplosionError, SimSeed, contaminate, simulate_paths

ESTIMATORS = ("ml", "bayes")


class AllReplicationsFailed(RuntimeError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    alpha: tuple
    beta: tuple
    lam: tuple
    schemes: tuple
    replications: int
    master_seed: int = 0
    model_name: str = "ou1d"
    alpha_box: Optional[tuple] = None
    beta_box: Optional[tuple] = None
    x0: Optional[tuple] = None
    noise_family: str = "gaussian"
    estimators: tuple = ("ml",)
    substeps: int = 10
    random_x0: bool = False
    bound: float = 1e12
    batch_size: int = 100
    threads: int = 1
    out: str = "out"
    optimizer: OptimizerConfig = OptimizerConfig()
    bayes: BayesConfig = BayesConfig()
    r_grid: tuple = (1.0, 2.0, 4.0, 8.0)
    tail_radii: int = 16
    directions_per_pair: int = 8

    def __post_init__(self):
        if self.replications < 1:
            raise ValueError("replications must be >= 1")
        if not self.schemes:
            raise ValueError("at least one scheme is required")
        for s in self.schemes:
            build_scheme(*s)
        bad = set(self.estimators) - set(ESTIMATORS)
        if bad or not self.estimators:
            raise ValueError(f"estimators must be a nonempty subset of {ESTIMATORS}, got {self.estimators}")
        if self.batch_size < 1 or self.threads < 1 or self.substeps < 1:
            raise ValueError("batch_size, threads and substeps must be >= 1")
        if list(self.r_grid) != sorted(self.r_grid) or any(r < 0 for r in self.r_grid):
            raise ValueError("r_grid must be nonnegative and increasing")
        self.model().dim_state  # fail fast on unknown models and bad boxes
        self.truth().check_interior(self.model())
        self.noise()

    def model(self) -> DiffusionModel:
        model = get_model(self.model_name)
        if self.alpha_box is not None or self.beta_box is not None:
            model = model.with_boxes(self.alpha_box, self.beta_box)
        return model

    def truth(self) -> TrueParameters:
        d = np.atleast_2d(np.asarray(self.lam, dtype=float)).shape[0]
        x0 = self.x0 if self.x0 is not None else np.zeros(d)
        return TrueParameters(alpha=self.alpha, beta=self.beta, lam=self.lam, x0=x0)

    def noise(self) -> NoiseSpec:
        return NoiseSpec(lam=self.lam, family=self.noise_family)

    def scheme(self, index: int = 0) -> SamplingScheme:
        return build_scheme(*self.schemes[index])

    def summary(self) -> dict:
        """Everything that determines the numbers in a report (no paths, no worker count)."""
        return {
            "model": self.model_name,
            "alpha_box": self.model().alpha_box.tolist(),
            "beta_box": self.model().beta_box.tolist(),
            "alpha": list(map(float, self.alpha)),
            "beta": list(map(float, self.beta)),
            "lambda": np.atleast_2d(np.asarray(self.lam, dtype=float)).tolist(),
            "x0": self.truth().x0.tolist(),
            "noise_family": self.noise_family,
            "schemes": [list(s) for s in self.schemes],
            "estimators": list(self.estimators),
            "replications": self.replications,
            "master_seed": self.master_seed,
            "substeps": self.substeps,
            "random_x0": self.random_x0,
            "batch_size": self.batch_size,
            "optimizer": {k: v for k, v in vars(self.optimizer).items() if k != "starts"},
            "bayes": dict(vars(self.bayes)),
            "r_grid": list(map(float, self.r_grid)),
        }


@dataclass(frozen=True)
class NormalizedErrors:
    rep_index: int
    scheme_index: int
    method: str
    noise: np.ndarray
    alpha: np.ndarray
    beta: np.ndarray
    failure: Optional[str] = None

    @property
    def vector(self) -> np.ndarray:
        return np.concatenate([self.noise, self.alpha, self.beta])

    @property
    def failed(self) -> bool:
        return self.failure is not None


def coordinate_labels(d: int, m1: int, m2: int) -> list[str]:
    return ([f"lambda_{i}{j}" for i, j in vech_pairs(d)] + [f"alpha_{i + 1}" for i in range(m1)]
            + [f"beta_{i + 1}" for i in range(m2)])


def normalize(report: EstimationReport, truth: TrueParameters, scheme: SamplingScheme, rep_index: int,
              scheme_index: int) -> NormalizedErrors:
    return NormalizedErrors(
        rep_index=rep_index,
        scheme_index=scheme_index,
        method=report.method,
        noise=math.sqrt(scheme.n) * (vech(report.lambda_hat) - vech(truth.lam)),
        alpha=math.sqrt(scheme.k) * (report.alpha - truth.alpha),
        beta=math.sqrt(scheme.T) * (report.beta - truth.beta),
    )


def _failed(cfg: ExperimentConfig, rep: int, si: int, method: str, why: str) -> NormalizedErrors:
    d = np.atleast_2d(np.asarray(cfg.lam)).shape[0]
    nan = lambda m: np.full(m, np.nan)
    return NormalizedErrors(rep, si, method, nan(d * (d + 1) // 2), nan(len(cfg.alpha)), nan(len(cfg.beta)),
                            failure=why)


# --- PLDI tail ----------------------------------------------------------------

def default_directions(m: int, per_pair: int = 8) -> np.ndarray:
    """Unit vectors: +-1 for m = 1, else ``per_pair`` evenly spaced directions in every coordinate plane."""
    if m == 1:
        return np.array([[1.0], [-1.0]])
    dirs = []
    for i, j in itertools.combinations(range(m), 2):
        for t in range(per_pair):
            ang = 2.0 * math.pi * t / per_pair
            v = np.zeros(m)
            v[i], v[j] = math.cos(ang), math.sin(ang)
            v[np.abs(v) < 1e-15] = 0.0
            dirs.append(v)
    uniq = {tuple(np.round(v, 12)): v for v in dirs}
    return np.array(list(uniq.values()))


def _max_radius(center: np.ndarray, v: np.ndarray, box: np.ndarray, rate: float) -> float:
    limits = []
    for c, vi, (lo, hi) in zip(center, v, box):
        if vi > 0:
            limits.append((hi - c) / vi)
        elif vi < 0:
            limits.append((lo - c) / vi)
    return (min(limits) if limits else math.inf) * rate * (1.0 - 1e-9)


def sup_log_field(objective, center, box, rate: float, r_grid: Sequence[float], directions: np.ndarray,
                  n_radii: int = 16) -> np.ndarray:
    """For each r, max of log Z(u) over the grid points u = rho v with rho >= r (-inf if none)."""
    center = np.asarray(center, dtype=float)
    box = np.asarray(box, dtype=float)
    r_grid = np.asarray(r_grid, dtype=float)
    base = objective(center)
    best = np.where(r_grid == 0.0, 0.0, -np.inf)
    positive = r_grid[r_grid > 0]
    for v in np.asarray(directions, dtype=float):
        rho_max = _max_radius(center, v, box, rate)
        lo = positive.min() if positive.size else 1e-3 * rho_max
        if rho_max < lo:
            continue
        radii = np.union1d(positive[positive <= rho_max], np.geomspace(lo, rho_max, n_radii))
        vals = np.array([objective(center + rho * v / rate) - base for rho in radii])
        for idx, r in enumerate(r_grid):
            sel = vals[radii >= r]
            if sel.size:
                best[idx] = max(best[idx], float(sel.max()))
    return best


@dataclass
class TailTable:
    scheme_index: int
    r_grid: list
    frequency: dict
    raw_frequency: dict
    empty_sets: dict
    replications: int

    def to_dict(self) -> dict:
        return {"scheme_index": self.scheme_index, "r_grid": list(self.r_grid), "frequency": self.frequency,
                "raw_frequency": self.raw_frequency, "empty_sets": self.empty_sets,
                "replications": self.replications}


def tail_frequencies(sups: np.ndarray, r_grid) -> tuple[list, list, list]:
    """(envelope frequency, raw frequency, count of empty V(r)) from per-replication sup log Z.

    The raw event at r is sup_{|u| >= r} log Z >= -r.  The envelope event at r
    is the union of raw events at grid radii r' >= r, so it dominates the raw
    event and is nonincreasing in r by construction.
    """
    r = np.asarray(r_grid, dtype=float)
    if sups.size == 0:
        z = [0.0] * r.size
        return z, z, [0] * r.size
    raw = sups >= -r[None, :]
    env = np.flip(np.logical_or.accumulate(np.flip(raw, axis=1), axis=1), axis=1)
    empty = np.isneginf(sups).sum(axis=0)
    return env.mean(axis=0).tolist(), raw.mean(axis=0).tolist(), [int(e) for e in empty]


# --- replication ----------------------------------------------------------------

@dataclass
class _RepOutcome:
    rep_index: int
    errors: list
    tail: dict


def _estimate_one(cfg: ExperimentConfig, series, model, truth, scheme, rep: int, si: int, tail_dirs):
    errors, tail = [], {}
    try:
        ctx = QuasiLikContext.from_series(series, model)
    except Exception as exc:  # noqa: BLE001 - recorded as a failure tag
        why = f"{type(exc).__name__}: {exc}"
        return [_failed(cfg, rep, si, m, why) for m in cfg.estimators], tail
    plugins = {}
    for method in cfg.estimators:
        try:
            if method == "ml":
                est = adaptive_ml_from_context(ctx, cfg.optimizer)
            else:
                rng = SimSeed(cfg.master_seed, rep).generator(MCMC_STREAM)
                est = adaptive_bayes_from_context(ctx, bcfg=cfg.bayes, opt=cfg.optimizer, rng=rng)
            if not (np.all(np.isfinite(est.alpha)) and np.all(np.isfinite(est.beta))):
                raise FloatingPointError("non-finite estimate")
            plugins[method] = est.alpha
            errors.append(normalize(est, truth, scheme, rep, si))
        except Exception as exc:  # noqa: BLE001
            errors.append(_failed(cfg, rep, si, method, f"{type(exc).__name__}: {exc}"))
    if tail_dirs is not None:
        d1, d2 = tail_dirs
        tail["Z1"] = sup_log_field(lambda a: h1(ctx, a), truth.alpha, model.alpha_box, math.sqrt(scheme.k),
                                   cfg.r_grid, d1, cfg.tail_radii)
        for method, name in (("ml", "Z2_ML"), ("bayes", "Z2_Bayes")):
            if method in plugins:
                a = plugins[method]
                tail[name] = sup_log_field(lambda b: h2(ctx, b, a), truth.beta, model.beta_box,
                                           math.sqrt(scheme.T), cfg.r_grid, d2, cfg.tail_radii)
    return errors, tail


def _run_batch(cfg: ExperimentConfig, si: int, reps: Sequence[int], tail_dirs=None) -> list[_RepOutcome]:
    model, truth, noise, scheme = cfg.model(), cfg.truth(), cfg.noise(), cfg.scheme(si)
    seeds = [SimSeed(cfg.master_seed, r) for r in reps]
    try:
        paths = list(simulate_paths(model, truth, scheme, cfg.substeps, seeds, cfg.bound, cfg.random_x0))
    except PathExplosionError:
        paths = []
        for s in seeds:
            try:
                paths.append(simulate_paths(model, truth, scheme, cfg.substeps, [s], cfg.bound, cfg.random_x0)[0])
            except PathExplosionError as exc:
                paths.append(exc)
    times = np.arange(scheme.n + 1) * scheme.h
    out = []
    for rep, seed, states in zip(reps, seeds, paths):
        if isinstance(states, Exception):
            why = f"{type(states).__name__}: {states}"
            out.append(_RepOutcome(rep, [_failed(cfg, rep, si, m, why) for m in cfg.estimators], {}))
            continue
        series = contaminate(LatentPath(times, states), noise, seed, scheme=scheme)
        errors, tail = _estimate_one(cfg, series, model, truth, scheme, rep, si, tail_dirs)
        out.append(_RepOutcome(rep, errors, tail))
    return out


def run_replication(cfg: ExperimentConfig, rep_index: int, scheme_index: int = 0) -> list[NormalizedErrors]:
    if not (0 <= rep_index < cfg.replications):
        raise IndexError(f"rep_index {rep_index} outside [0, {cfg.replications})")
    return _run_batch(cfg, scheme_index, [rep_index])[0].errors


def _batches(cfg: ExperimentConfig) -> list[list[int]]:
    idx = list(range(cfg.replications))
    return [idx[i:i + cfg.batch_size] for i in range(0, len(idx), cfg.batch_size)]


def _tail_directions(cfg: ExperimentConfig) -> tuple[np.ndarray, np.ndarray]:
    model = cfg.model()
    return (default_directions(model.dim_alpha, cfg.directions_per_pair),
            default_directions(model.dim_beta, cfg.directions_per_pair))


def _collect(cfg: ExperimentConfig, si: int, tail_dirs=None) -> list[_RepOutcome]:
    batches = _batches(cfg)
    if cfg.threads == 1:
        chunks = [_run_batch(cfg, si, b, tail_dirs) for b in batches]
    else:
        with ThreadPoolExecutor(max_workers=cfg.threads) as pool:
            chunks = list(pool.map(lambda b: _run_batch(cfg, si, b, tail_dirs), batches))
    return sorted(itertools.chain.from_iterable(chunks), key=lambda o: o.rep_index)


# --- aggregation -----------------------------------------------------------------

@dataclass
class McSummary:
    scheme_index: int
    scheme: dict
    method: str
    labels: list
    replications: int
    failures: int
    mean: list
    se_mean: object
    z_mean: object
    covariance: object
    moment2: list
    moment4: list
    sandwich: list
    cov_rel_err: object
    cov_frob_rel_err: object
    ks_statistic: object
    ks_pvalue: object
    ks_critical_1pct: object

    def to_dict(self) -> dict:
        return dict(vars(self))


def _scheme_dict(s: SamplingScheme) -> dict:
    return {"n": s.n, "h": s.h, "tau": s.tau, "p": s.p, "k": s.k, "delta": s.delta, "T": s.T,
            "k_delta_sq": s.k_delta_sq}


def summarize(errors: Sequence[NormalizedErrors], sandwich: np.ndarray, labels: list, scheme: SamplingScheme,
              scheme_index: int, method: str) -> McSummary:
    ok = [e for e in errors if not e.failed]
    failures = len(errors) - len(ok)
    if not ok:
        raise AllReplicationsFailed(f"all replications failed for scheme {scheme_index}, method {method}")
    x = np.array([e.vector for e in ok])
    m = x.shape[0]
    mean = x.mean(axis=0)
    m2 = np.mean(x**2, axis=0)
    m4 = np.mean(x**4, axis=0)
    sd_theory = np.sqrt(np.diag(sandwich))
    if m >= 2:
        centered = x - mean
        cov = centered.T @ centered / (m - 1)
        cov = 0.5 * (cov + cov.T)
        se = np.sqrt(np.diag(cov) / m)
        z = np.where(se > 0, mean / np.where(se > 0, se, 1.0), np.nan)
        with np.errstate(divide="ignore", invalid="ignore"):
            rel = np.diag(cov) / np.diag(sandwich) - 1.0
        frob = float(np.linalg.norm(cov - sandwich) / np.linalg.norm(sandwich))
        ks = [stats.kstest(x[:, i] / sd_theory[i], "norm") if sd_theory[i] > 0 else None for i in range(x.shape[1])]
        ks_stat = [float(t.statistic) if t else None for t in ks]
        ks_p = [float(t.pvalue) if t else None for t in ks]
        ks_crit = float(stats.kstwo.ppf(0.99, m))
        cov_out, se_out, z_out, rel_out = cov.tolist(), se.tolist(), _nan_to_none(z), _nan_to_none(rel)
    else:
        cov_out = se_out = z_out = rel_out = frob = ks_stat = ks_p = ks_crit = "n/a"
    return McSummary(
        scheme_index=scheme_index, scheme=_scheme_dict(scheme), method=method, labels=labels,
        replications=len(errors), failures=failures, mean=mean.tolist(), se_mean=se_out, z_mean=z_out,
        covariance=cov_out, moment2=m2.tolist(), moment4=m4.tolist(), sandwich=sandwich.tolist(),
        cov_rel_err=rel_out, cov_frob_rel_err=frob, ks_statistic=ks_stat, ks_pvalue=ks_p, ks_critical_1pct=ks_crit,
    )


def _nan_to_none(arr) -> list:
    return [None if not np.isfinite(v) else float(v) for v in np.asarray(arr, dtype=float)]


@dataclass
class McReport:
    config: dict
    summaries: list
    tail: list
    errors: list
    failure_count: int
    runtime: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        """Report content; wall-clock timings are kept out so identical runs serialise identically."""
        return {
            "config": self.config,
            "failure_count": self.failure_count,
            "summaries": [s.to_dict() for s in self.summaries],
            "tail": [t.to_dict() for t in self.tail],
            "errors": [
                {"rep_index": e.rep_index, "scheme_index": e.scheme_index, "method": e.method,
                 "vector": None if e.failed else e.vector.tolist(), "failure": e.failure}
                for e in self.errors
            ],
        }

    def summary(self, scheme_index: int = 0, method: str = "ml") -> McSummary:
        for s in self.summaries:
            if s.scheme_index == scheme_index and s.method == method:
                return s
        raise KeyError((scheme_index, method))

    def tail_table(self, scheme_index: int = 0) -> TailTable:
        for t in self.tail:
            if t.scheme_index == scheme_index:
                return t
        raise KeyError(scheme_index)


def theoretical_covariance(cfg: ExperimentConfig, tau: float) -> AsymptoticCovariance:
    model, truth = cfg.model(), cfg.truth()
    return information_matrices(model, truth, cfg.noise(), tau, InvariantMeasure.for_model(model, truth))


def run_monte_carlo(cfg: ExperimentConfig, with_tail: bool = False) -> McReport:
    model = cfg.model()
    d = cfg.noise().dim
    labels = coordinate_labels(d, model.dim_alpha, model.dim_beta)
    summaries, tails, all_errors, runtime = [], [], [], {"schemes": []}
    covs: dict[float, AsymptoticCovariance] = {}
    for si in range(len(cfg.schemes)):
        scheme = cfg.scheme(si)
        start = time.perf_counter()
        outcomes = _collect(cfg, si, _tail_directions(cfg) if with_tail else None)
        runtime["schemes"].append({"scheme_index": si, "seconds": time.perf_counter() - start})
        if scheme.tau not in covs:
            covs[scheme.tau] = theoretical_covariance(cfg, scheme.tau)
        errors = [e for o in outcomes for e in o.errors]
        all_errors.extend(errors)
        for method in cfg.estimators:
            mine = [e for e in errors if e.method == method]
            summaries.append(summarize(mine, covs[scheme.tau].sandwich, labels, scheme, si, method))
        if with_tail:
            fields = [f for f in ("Z1", "Z2_ML", "Z2_Bayes") if any(f in o.tail for o in outcomes)]
            freq, raw, empty = {}, {}, {}
            for f in fields:
                sups = np.array([o.tail[f] for o in outcomes if f in o.tail]).reshape(-1, len(cfg.r_grid))
                freq[f], raw[f], empty[f] = tail_frequencies(sups, cfg.r_grid)
            used = sum(1 for o in outcomes if o.tail)
            tails.append(TailTable(si, list(map(float, cfg.r_grid)), freq, raw, empty, used))
    failures = sum(e.failed for e in all_errors)
    return McReport(config=cfg.summary(), summaries=summaries, tail=tails, errors=all_errors,
                    failure_count=failures, runtime=runtime)


def pldi_tail_table(cfg: ExperimentConfig, r_grid: Optional[Sequence[float]] = None,
                    u_directions: Optional[tuple] = None) -> list[TailTable]:
    """Empirical frequencies of {sup over |u| >= r of Z >= e^{-r}} for Z1 and the Z2 fields.

    ``u_directions`` optionally gives (alpha directions, beta directions) as
    arrays of unit vectors.
    """
    from dataclasses import replace

    if r_grid is not None:
        cfg = replace(cfg, r_grid=tuple(float(r) for r in r_grid))
    if u_directions is None:
        dirs = _tail_directions(cfg)
    else:
        model = cfg.model()
        dirs = tuple(np.atleast_2d(np.asarray(u, dtype=float)) for u in u_directions)
        for u, m in zip(dirs, (model.dim_alpha, model.dim_beta)):
            if u.shape[1] != m or not np.allclose(np.linalg.norm(u, axis=1), 1.0):
                raise ValueError(f"directions must be unit vectors of dimension {m}")
    tables = []
    for si in range(len(cfg.schemes)):
        outcomes = _collect(cfg, si, dirs)
        fields = [f for f in ("Z1", "Z2_ML", "Z2_Bayes") if any(f in o.tail for o in outcomes)]
        freq, raw, empty = {}, {}, {}
        for f in fields:
            sups = np.array([o.tail[f] for o in outcomes if f in o.tail]).reshape(-1, len(cfg.r_grid))
            freq[f], raw[f], empty[f] = tail_frequencies(sups, cfg.r_grid)
        tables.append(TailTable(si, list(map(float, cfg.r_grid)), freq, raw, empty,
                                sum(1 for o in outcomes if o.tail)))
    return tables


# --- output ----------------------------------------------------------------------

def emit_report(report: McReport, directory) -> dict[str, Path]:
    out = Path(directory)
    try:
        out.mkdir(parents=True, exist_ok=True)
        paths = {name: out / name for name in ("report.json", "errors.csv", "tail.csv", "runtime.json")}
        with open(paths["report.json"], "w", encoding="utf-8") as fh:
            json.dump(report.to_dict(), fh, indent=1, sort_keys=True, allow_nan=False)
            fh.write("\n")
        labels = report.summaries[0].labels if report.summaries else []
        with open(paths["errors.csv"], "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["rep_index", "scheme_index", "method"] + labels)
            for e in report.errors:
                if not e.failed:
                    w.writerow([e.rep_index, e.scheme_index, e.method] + [format(v, ".17g") for v in e.vector])
        with open(paths["tail.csv"], "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            fields = sorted({f for t in report.tail for f in t.frequency})
            w.writerow(["scheme_index", "r"] + fields + [f"{f}_raw" for f in fields])
            for t in report.tail:
                for i, r in enumerate(t.r_grid):
                    row = [t.scheme_index, format(r, ".17g")]
                    row += [format(t.frequency[f][i], ".17g") if f in t.frequency else "" for f in fields]
                    row += [format(t.raw_frequency[f][i], ".17g") if f in t.raw_frequency else "" for f in fields]
                    w.writerow(row)
        with open(paths["runtime.json"], "w", encoding="utf-8") as fh:
            json.dump(report.runtime, fh, indent=1, sort_keys=True)
            fh.write("\n")
    except OSError as exc:
        raise OSError(f"could not write report to {out}: {exc}") from exc
    return paths


def load_report(directory) -> dict:
    with open(Path(directory) / "report.json", encoding="utf-8") as fh:
        return json.load(fh)
