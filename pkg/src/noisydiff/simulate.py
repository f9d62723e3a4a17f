"""Euler-Maruyama simulation of the latent diffusion and noisy observation.

Random numbers come from Philox (counter-based) generators keyed by
``(master_seed, replication_index, stream_id)``; the latent path and the
observation noise draw from different streams.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .model import DiffusionModel, NoiseSpec, SamplingScheme, TrueParameters, psd_sqrt

PATH_STREAM = 0
NOISE_STREAM = 1
X0_STREAM = 2
MCMC_STREAM = 3

# observation intervals per block of pre-drawn increments; fixed so batched and
# single-replication runs consume each stream identically
CHUNK = 1024


class PathExplosionError(RuntimeError):
    pass


@dataclass(frozen=True)
class SimSeed:
    master_seed: int
    replication_index: int = 0

    def __post_init__(self):
        if not (0 <= int(self.master_seed) < 2**64):
            raise ValueError("master_seed must be a 64-bit unsigned integer")
        if int(self.replication_index) < 0:
            raise ValueError("replication_index must be nonnegative")

    def generator(self, stream_id: int) -> np.random.Generator:
        ss = np.random.SeedSequence(
            entropy=int(self.master_seed), spawn_key=(int(self.replication_index), int(stream_id))
        )
        return np.random.Generator(np.random.Philox(ss))


@dataclass(frozen=True)
class LatentPath:
    times: np.ndarray
    states: np.ndarray

    @property
    def h(self) -> float:
        return float(self.times[1] - self.times[0])


@dataclass(frozen=True)
class ObservationSeries:
    scheme: SamplingScheme
    values: np.ndarray

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        if vals.ndim == 1:
            vals = vals[:, None]
        if vals.shape[0] != self.scheme.n + 1:
            raise ValueError(f"series has {vals.shape[0]} rows, scheme expects n+1 = {self.scheme.n + 1}")
        if not np.all(np.isfinite(vals)):
            raise ValueError("observation series contains non-finite values")
        object.__setattr__(self, "values", vals)

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.scheme.n + 1) * self.scheme.h


def initial_states(model: DiffusionModel, params: TrueParameters, seeds: Sequence[SimSeed],
                   random_x0: bool = False) -> np.ndarray:
    d = model.dim_state
    if not random_x0:
        x0 = np.asarray(params.x0, dtype=float).reshape(d)
        return np.tile(x0, (len(seeds), 1))
    if model.invariant_law is None:
        raise ValueError("random x0 requires a model with a registered invariant law")
    mean, cov = model.invariant_law(params.alpha, params.beta)
    root = psd_sqrt(cov)
    rows = [np.asarray(mean, dtype=float) + root @ s.generator(X0_STREAM).standard_normal(d) for s in seeds]
    return np.array(rows).reshape(len(seeds), d)


def simulate_paths(model: DiffusionModel, params: TrueParameters, scheme: SamplingScheme, substeps: int,
                   seeds: Sequence[SimSeed], bound: float = 1e12, random_x0: bool = False) -> np.ndarray:
    """Batched Euler-Maruyama; returns states on the observation grid, shape (B, n+1, d).

    Row ``b`` depends only on ``seeds[b]``: every operation is elementwise across
    the batch, so a replication gives the same bits alone or inside a batch.
    """
    if substeps < 1:
        raise ValueError("substeps must be >= 1")
    n, d, r = scheme.n, model.dim_state, model.dim_noise
    batch = len(seeds)
    dt = scheme.h / substeps
    sqdt = math.sqrt(dt)
    alpha = np.asarray(params.alpha, dtype=float)
    beta = np.asarray(params.beta, dtype=float)
    drift, diffusion = model.drift, model.diffusion

    x = initial_states(model, params, seeds, random_x0)
    out = np.empty((batch, n + 1, d))
    out[:, 0] = x
    gens = [s.generator(PATH_STREAM) for s in seeds]
    scalar = d == 1 and r == 1
    i = 0
    while i < n:
        m = min(CHUNK, n - i)
        dw = np.stack([g.standard_normal((m * substeps, r)) for g in gens], axis=1) * sqdt
        for j in range(m):
            base = j * substeps
            for s in range(substeps):
                a = diffusion(x, alpha)
                if scalar:
                    # same arithmetic as the einsum below for a single product
                    x = x + drift(x, beta) * dt + np.reshape(a, (-1, 1)) * dw[base + s]
                else:
                    a = np.broadcast_to(a, (batch, d, r))
                    x = x + drift(x, beta) * dt + np.einsum("...ij,...j->...i", a, dw[base + s])
            out[:, i + j + 1] = x
        block = out[:, i + 1:i + m + 1]
        if not np.all(np.isfinite(block)) or np.abs(block).max() > bound:
            raise PathExplosionError(f"path exploded (|X| > {bound:g}) before t = {(i + m) * scheme.h:g}")
        i += m
    return out


def simulate_path(model: DiffusionModel, params: TrueParameters, scheme: SamplingScheme, substeps: int,
                  seed: SimSeed, bound: float = 1e12, random_x0: bool = False) -> LatentPath:
    states = simulate_paths(model, params, scheme, substeps, [seed], bound=bound, random_x0=random_x0)[0]
    times = np.arange(scheme.n + 1) * scheme.h
    return LatentPath(times=times, states=states)


def contaminate(path: LatentPath, noise: NoiseSpec, seed: SimSeed, scheme: Optional[SamplingScheme] = None,
                draw: Optional[Callable[[np.random.Generator, tuple], np.ndarray]] = None) -> ObservationSeries:
    """Add Lambda^{1/2} eps to every grid point.  ``draw`` overrides the noise law (test hook)."""
    states = np.asarray(path.states, dtype=float)
    if states.ndim == 1:
        states = states[:, None]
    rows, d = states.shape
    if noise.dim != d:
        raise ValueError(f"dimension mismatch: noise is {noise.dim}-dimensional, path is {d}-dimensional")
    if scheme is None:
        scheme = _scheme_from_path(path, rows)
    rng = seed.generator(NOISE_STREAM)
    eps = noise.draw(rng, rows) if draw is None else np.asarray(draw(rng, (rows, d)), dtype=float)
    return ObservationSeries(scheme=scheme, values=states + eps @ noise.sqrt.T)


def _scheme_from_path(path: LatentPath, rows: int) -> SamplingScheme:
    # only n and h matter for a bare series; block fields are left degenerate
    h = path.h
    return SamplingScheme(n=rows - 1, h=h, tau=2.0, p=1, k=rows, delta=h)


def _write_csv(file, times, values, prefix: str) -> None:
    d = values.shape[1]
    header = ",".join(["t"] + [f"{prefix}{i + 1}" for i in range(d)])
    np.savetxt(file, np.column_stack([times, values]), fmt="%.17g", delimiter=",", header=header, comments="")


def write_path_csv(path: LatentPath, file) -> None:
    _write_csv(file, path.times, np.asarray(path.states).reshape(len(path.times), -1), "x")


def write_series_csv(series: ObservationSeries, file) -> None:
    _write_csv(file, series.times, series.values, "y")


def read_csv_columns(file) -> tuple[np.ndarray, np.ndarray]:
    """Return (t, values) from a dump written by this module."""
    data = np.loadtxt(file, delimiter=",", skiprows=1, ndmin=2)
    return data[:, 0], data[:, 1:]
