"""Limit information matrices and the sandwich covariance of the adaptive estimators.

Block order throughout is (vech Lambda, alpha, beta).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from numpy.polynomial.hermite_e import hermegauss
from scipy.linalg import block_diag

from .model import DiffusionModel, NoiseSpec, SamplingScheme, TrueParameters, psd_sqrt
from .simulate import SimSeed, simulate_paths

FD_STEP = 1e-6


class SingularInformationError(np.linalg.LinAlgError):
    pass


# --- half-vectorisation -------------------------------------------------------

def vech_index(i: int, j: int, d: int) -> int:
    """1-based position of entry (i, j), i <= j, in the row-wise upper-triangle ordering."""
    if not (1 <= i <= j <= d):
        raise IndexError(f"need 1 <= i <= j <= d, got i={i}, j={j}, d={d}")
    if i == 1:
        return j
    return sum(d - ell + 1 for ell in range(1, i)) + j - i + 1


def vech_pairs(d: int) -> list[tuple[int, int]]:
    """Inverse of :func:`vech_index`: element ``s - 1`` is the pair mapped to ``s``."""
    pairs = [(i, j) for i in range(1, d + 1) for j in range(i, d + 1)]
    return sorted(pairs, key=lambda ij: vech_index(ij[0], ij[1], d))


def vech_inverse(s: int, d: int) -> tuple[int, int]:
    size = d * (d + 1) // 2
    if not (1 <= s <= size):
        raise IndexError(f"vech index {s} outside 1..{size}")
    return vech_pairs(d)[s - 1]


def vech(mat) -> np.ndarray:
    mat = np.atleast_2d(np.asarray(mat, dtype=float))
    d = mat.shape[0]
    return np.array([mat[i - 1, j - 1] for i, j in vech_pairs(d)])


# --- noise block --------------------------------------------------------------

def w1_matrix(noise: NoiseSpec) -> np.ndarray:
    lam = noise.lam
    root = noise.sqrt
    d = noise.dim
    excess = noise.excess_kurtosis_per_coord
    pairs = [(i - 1, j - 1) for i, j in vech_pairs(d)]

    def v(l1, l2, l3, l4):
        kurt = np.sum(root[l1] * root[l2] * root[l3] * root[l4] * excess)
        return kurt + 1.5 * (lam[l1, l3] * lam[l2, l4] + lam[l1, l4] * lam[l2, l3])

    size = len(pairs)
    out = np.empty((size, size))
    for a, (l1, l2) in enumerate(pairs):
        for b, (l3, l4) in enumerate(pairs):
            out[a, b] = v(l1, l2, l3, l4)
    return out


# --- invariant measure --------------------------------------------------------

@dataclass(frozen=True)
class InvariantMeasure:
    """Either a closed-form Gaussian law or a time average along a simulated path."""

    kind: str
    mean: Optional[np.ndarray] = None
    cov: Optional[np.ndarray] = None
    model: Optional[DiffusionModel] = None
    params: Optional[TrueParameters] = None
    t_burn: float = 100.0
    t_avg: float = 1e4
    substeps: int = 10
    seed: int = 0
    step: float = 0.05
    segments: int = 20
    info: dict = field(default_factory=dict, compare=False)

    @classmethod
    def gaussian(cls, mean, cov) -> "InvariantMeasure":
        mean = np.atleast_1d(np.asarray(mean, dtype=float))
        cov = np.atleast_2d(np.asarray(cov, dtype=float))
        return cls(kind="closed_form_gaussian", mean=mean, cov=cov)

    @classmethod
    def ergodic(cls, model: DiffusionModel, params: TrueParameters, **kwargs) -> "InvariantMeasure":
        return cls(kind="ergodic_path", model=model, params=params, **kwargs)

    @classmethod
    def for_model(cls, model: DiffusionModel, params: TrueParameters, **kwargs) -> "InvariantMeasure":
        if model.invariant_law is not None:
            mean, cov = model.invariant_law(params.alpha, params.beta)
            return cls.gaussian(mean, cov)
        return cls.ergodic(model, params, **kwargs)

    @property
    def averaging_length(self) -> float:
        return self.t_avg if self.kind == "ergodic_path" else math.inf


def _gauss_hermite_nodes(mean: np.ndarray, cov: np.ndarray):
    d = mean.size
    per_dim = {1: 256, 2: 48}.get(d, 16)
    z, w = hermegauss(per_dim)
    w = w / math.sqrt(2.0 * math.pi)
    grids = np.meshgrid(*([z] * d), indexing="ij")
    zs = np.stack([g.ravel() for g in grids], axis=-1)
    ws = np.ones(zs.shape[0])
    for g in np.meshgrid(*([w] * d), indexing="ij"):
        ws = ws * g.ravel()
    return mean + zs @ psd_sqrt(cov).T, ws


def _ergodic_states(nu: InvariantMeasure) -> np.ndarray:
    seg_avg = nu.t_avg / nu.segments
    n_burn = int(round(nu.t_burn / nu.step))
    n = n_burn + int(round(seg_avg / nu.step))
    scheme = SamplingScheme(n=n, h=nu.step, tau=2.0, p=1, k=n, delta=nu.step)
    seeds = [SimSeed(nu.seed, s) for s in range(nu.segments)]
    paths = simulate_paths(nu.model, nu.params, scheme, nu.substeps, seeds)
    # left-endpoint Riemann sum of (1/T) int f(X_t) dt after burn-in
    return paths[:, n_burn:-1].reshape(-1, nu.model.dim_state)


def invariant_expectation(nu: InvariantMeasure, f: Callable[[np.ndarray], np.ndarray]):
    """nu(f) for f mapping states of shape (N, d) to values of shape (N, ...)."""
    if nu.kind == "closed_form_gaussian":
        xs, ws = _gauss_hermite_nodes(nu.mean, nu.cov)
        vals = np.asarray(f(xs), dtype=float)
        vals = np.broadcast_to(vals, (xs.shape[0],) + vals.shape[1:]) if vals.ndim else np.full(xs.shape[0], vals)
        return np.tensordot(ws, vals, axes=(0, 0))
    if nu.kind == "ergodic_path":
        xs = _ergodic_states(nu)
        vals = np.asarray(f(xs), dtype=float)
        vals = np.broadcast_to(vals, (xs.shape[0],) + vals.shape[1:]) if vals.ndim else np.full(xs.shape[0], vals)
        avg = np.mean(vals, axis=0)
        if not np.all(np.isfinite(avg)):
            raise FloatingPointError("non-finite average along the ergodic path")
        return avg
    raise ValueError(f"unknown invariant measure kind {nu.kind!r}")


# --- information matrices -----------------------------------------------------

@dataclass(frozen=True)
class AsymptoticCovariance:
    i_matrix: np.ndarray
    j_matrix: np.ndarray
    sandwich: np.ndarray
    noise_dim: int
    alpha_dim: int
    beta_dim: int

    @property
    def blocks(self) -> dict[str, slice]:
        a, b = self.noise_dim, self.noise_dim + self.alpha_dim
        return {"noise": slice(0, a), "alpha": slice(a, b), "beta": slice(b, b + self.beta_dim)}

    def block(self, name: str, which: str = "sandwich") -> np.ndarray:
        """Diagonal block ``name`` of the I matrix ('i'), J matrix ('j') or sandwich."""
        s = self.blocks[name]
        mat = {"i": self.i_matrix, "j": self.j_matrix, "sandwich": self.sandwich}[which]
        return mat[s, s]

    def to_dict(self) -> dict:
        return {
            "layout": ["noise"] * self.noise_dim + ["alpha"] * self.alpha_dim + ["beta"] * self.beta_dim,
            "blocks": {k: [v.start, v.stop] for k, v in self.blocks.items()},
            "i_matrix": self.i_matrix.tolist(),
            "j_matrix": self.j_matrix.tolist(),
            "sandwich": self.sandwich.tolist(),
        }


def _fd_param(fun, theta: np.ndarray, index: int) -> np.ndarray:
    up, down = theta.copy(), theta.copy()
    up[index] += FD_STEP
    down[index] -= FD_STEP
    return (fun(up) - fun(down)) / (2.0 * FD_STEP)


def _diffusion_blocks(model: DiffusionModel, params: TrueParameters, lam: np.ndarray, tau: float):
    alpha = np.asarray(params.alpha, dtype=float)
    m1 = alpha.size
    two = tau == 2.0

    def integrands(x):
        A = model.A(x, alpha)
        a_tau = A + 3.0 * lam if two else A
        inv = np.linalg.inv(a_tau)
        dA = [_fd_param(lambda t: model.A(x, t), alpha, k) for k in range(m1)]
        bbar = []
        for k in range(m1):
            bk = 0.75 * inv @ dA[k] @ inv
            bbar.append(0.5 * (bk + np.swapaxes(bk, -1, -2)))
        n = x.shape[0]
        i22 = np.empty((n, m1, m1))
        j22 = np.empty((n, m1, m1))
        for k1 in range(m1):
            for k2 in range(m1):
                b1, b2 = bbar[k1], bbar[k2]
                term = b1 @ A @ b2 @ A
                if two:
                    term = term + 4.0 * b1 @ A @ b2 @ lam + 12.0 * b1 @ lam @ b2 @ lam
                i22[:, k1, k2] = np.trace(term, axis1=-2, axis2=-1)
                j22[:, k1, k2] = 0.5 * np.trace(inv @ dA[k1] @ inv @ dA[k2], axis1=-2, axis2=-1)
        return np.concatenate([i22, j22], axis=-1)

    return integrands


def _drift_block(model: DiffusionModel, params: TrueParameters):
    alpha = np.asarray(params.alpha, dtype=float)
    beta = np.asarray(params.beta, dtype=float)
    m2 = beta.size

    def integrand(x):
        inv = np.linalg.inv(model.A(x, alpha))
        db = np.stack([_fd_param(lambda t: model.b(x, t), beta, k) for k in range(m2)], axis=1)  # (N, m2, d)
        return np.einsum("nkd,nde,nle->nkl", db, inv, db)

    return integrand


def _spd_inverse(mat: np.ndarray, what: str) -> np.ndarray:
    try:
        chol = np.linalg.cholesky(mat)
    except np.linalg.LinAlgError:
        raise SingularInformationError(f"J singular ({what} block is not positive definite)") from None
    inv_chol = np.linalg.inv(chol)
    return inv_chol.T @ inv_chol


def information_matrices(model: DiffusionModel, params: TrueParameters, noise: NoiseSpec, tau: float,
                         nu: Optional[InvariantMeasure] = None) -> AsymptoticCovariance:
    if not (1.0 < tau <= 2.0):
        raise ValueError("tau must lie in (1, 2]")
    if nu is None:
        nu = InvariantMeasure.for_model(model, params)
    lam = noise.lam
    m1, m2 = model.dim_alpha, model.dim_beta
    w1 = w1_matrix(noise)
    both = invariant_expectation(nu, _diffusion_blocks(model, params, lam, tau))
    i22, j22 = both[:, :m1], both[:, m1:]
    i33 = invariant_expectation(nu, _drift_block(model, params))
    i22, j22, i33 = (0.5 * (m + m.T) for m in (i22, j22, i33))
    i_mat = block_diag(w1, i22, i33)
    j_mat = block_diag(np.eye(w1.shape[0]), j22, i33)
    sand = _blockwise_sandwich([w1, i22, i33], [np.eye(w1.shape[0]), j22, i33])
    return AsymptoticCovariance(i_matrix=i_mat, j_matrix=j_mat, sandwich=sand,
                                noise_dim=w1.shape[0], alpha_dim=m1, beta_dim=m2)


def _blockwise_sandwich(i_blocks, j_blocks) -> np.ndarray:
    out = []
    for name, ib, jb in zip(("noise", "alpha", "beta"), i_blocks, j_blocks):
        jinv = _spd_inverse(jb, name)
        s = jinv @ ib @ jinv
        out.append(0.5 * (s + s.T))
    return block_diag(*out)


def sandwich_covariance(ac: AsymptoticCovariance) -> np.ndarray:
    blocks = ac.blocks.values()
    return _blockwise_sandwich([ac.i_matrix[s, s] for s in blocks], [ac.j_matrix[s, s] for s in blocks])


def sandwich(i_matrix, j_matrix) -> np.ndarray:
    """J^{-1} I J^{-1} for arbitrary symmetric I and positive definite J."""
    jinv = _spd_inverse(np.asarray(j_matrix, dtype=float), "J")
    s = jinv @ np.asarray(i_matrix, dtype=float) @ jinv
    return 0.5 * (s + s.T)


def rates(scheme: SamplingScheme) -> tuple[float, float, float]:
    """Normalising rates (sqrt n, sqrt k_n, sqrt T_n)."""
    return math.sqrt(scheme.n), math.sqrt(scheme.k), math.sqrt(scheme.T)
