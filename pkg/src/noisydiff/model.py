"""Parametric diffusion models, noise laws and the block sampling scheme.

Model callbacks are vectorised over states: ``drift(x, beta)`` receives ``x``
of shape ``(N, d)`` and returns ``(N, d)``; ``diffusion(x, alpha)`` returns
``(N, d, r)``.  Parameters are passed as 1-D float arrays.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

DriftFn = Callable[[np.ndarray, np.ndarray], np.ndarray]
DiffusionFn = Callable[[np.ndarray, np.ndarray], np.ndarray]
InvariantLawFn = Callable[[np.ndarray, np.ndarray], "tuple[np.ndarray, np.ndarray]"]


class SchemeError(ValueError):
    """Raised for an unusable (n, h, tau) design."""


def _as_box(box, name: str) -> np.ndarray:
    arr = np.array(box, dtype=float)
    if arr.ndim == 1 and arr.size == 2:
        arr = arr.reshape(1, 2)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise ValueError(f"{name} must be a sequence of (low, high) pairs")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} must be bounded")
    if np.any(arr[:, 1] - arr[:, 0] <= 0):
        raise ValueError(f"{name} needs strictly positive width in every coordinate")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class DiffusionModel:
    name: str
    dim_state: int
    dim_noise: int
    dim_alpha: int
    dim_beta: int
    drift: DriftFn
    diffusion: DiffusionFn
    alpha_box: np.ndarray
    beta_box: np.ndarray
    invariant_law: Optional[InvariantLawFn] = None

    def __post_init__(self):
        for attr in ("dim_state", "dim_noise", "dim_alpha", "dim_beta"):
            if int(getattr(self, attr)) < 1:
                raise ValueError(f"{attr} must be a positive integer")
        object.__setattr__(self, "alpha_box", _as_box(self.alpha_box, "alpha_box"))
        object.__setattr__(self, "beta_box", _as_box(self.beta_box, "beta_box"))
        if self.alpha_box.shape[0] != self.dim_alpha:
            raise ValueError("alpha_box rows must equal dim_alpha")
        if self.beta_box.shape[0] != self.dim_beta:
            raise ValueError("beta_box rows must equal dim_beta")

    def b(self, x, beta) -> np.ndarray:
        x = np.asarray(x, dtype=float).reshape(-1, self.dim_state)
        return np.asarray(self.drift(x, np.asarray(beta, dtype=float)), dtype=float)

    def a(self, x, alpha) -> np.ndarray:
        x = np.asarray(x, dtype=float).reshape(-1, self.dim_state)
        out = np.asarray(self.diffusion(x, np.asarray(alpha, dtype=float)), dtype=float)
        return np.broadcast_to(out, (x.shape[0], self.dim_state, self.dim_noise))

    def A(self, x, alpha) -> np.ndarray:
        """A(x, alpha) = a a^T, shape (N, d, d)."""
        a = self.a(x, alpha)
        if a.shape[-2:] == (1, 1):
            return a * a
        return np.einsum("...ik,...jk->...ij", a, a)

    def with_boxes(self, alpha_box=None, beta_box=None) -> "DiffusionModel":
        return replace(
            self,
            alpha_box=self.alpha_box if alpha_box is None else alpha_box,
            beta_box=self.beta_box if beta_box is None else beta_box,
        )


NOISE_FAMILIES = ("gaussian", "uniform_symmetric", "rademacher_product")
_FOURTH_MOMENT = {"gaussian": 3.0, "uniform_symmetric": 9.0 / 5.0, "rademacher_product": 1.0}


def psd_sqrt(mat) -> np.ndarray:
    """Symmetric square root with negative eigenvalues clipped at zero."""
    mat = np.atleast_2d(np.asarray(mat, dtype=float))
    w, v = np.linalg.eigh(0.5 * (mat + mat.T))
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def psd_clip(mat) -> np.ndarray:
    mat = np.atleast_2d(np.asarray(mat, dtype=float))
    w, v = np.linalg.eigh(0.5 * (mat + mat.T))
    if np.all(w >= 0):
        return 0.5 * (mat + mat.T)
    return (v * np.clip(w, 0.0, None)) @ v.T


@dataclass(frozen=True)
class NoiseSpec:
    """Variance matrix of the additive noise plus the law of its standardised components."""

    lam: np.ndarray
    family: str = "gaussian"

    def __post_init__(self):
        lam = np.atleast_2d(np.array(self.lam, dtype=float))
        if lam.shape[0] != lam.shape[1]:
            raise ValueError("noise variance must be square")
        if not np.allclose(lam, lam.T, rtol=0, atol=1e-12 * max(1.0, np.abs(lam).max())):
            raise ValueError("noise variance must be symmetric")
        if np.linalg.eigvalsh(lam).min() < -1e-12 * max(1.0, np.abs(lam).max()):
            raise ValueError("noise variance must be positive semi-definite")
        if self.family not in NOISE_FAMILIES:
            raise ValueError(f"unknown noise family {self.family!r}; choose from {NOISE_FAMILIES}")
        lam.setflags(write=False)
        object.__setattr__(self, "lam", lam)

    @property
    def dim(self) -> int:
        return self.lam.shape[0]

    @property
    def fourth_moment(self) -> float:
        return _FOURTH_MOMENT[self.family]

    @property
    def excess_kurtosis_per_coord(self) -> np.ndarray:
        return np.full(self.dim, self.fourth_moment - 3.0)

    @property
    def sqrt(self) -> np.ndarray:
        return psd_sqrt(self.lam)

    def draw(self, rng: np.random.Generator, size: int) -> np.ndarray:
        """``size`` i.i.d. standardised noise vectors, shape (size, d)."""
        shape = (size, self.dim)
        if self.family == "gaussian":
            return rng.standard_normal(shape)
        if self.family == "uniform_symmetric":
            s3 = math.sqrt(3.0)
            return rng.uniform(-s3, s3, shape)
        return 2.0 * rng.integers(0, 2, shape).astype(float) - 1.0


@dataclass(frozen=True)
class SamplingScheme:
    n: int
    h: float
    tau: float
    p: int
    k: int
    delta: float

    @property
    def T(self) -> float:
        return self.n * self.h

    @property
    def k_delta_sq(self) -> float:
        return self.k * self.delta**2

    @property
    def noise_factor(self) -> float:
        """Delta_n ** ((2 - tau) / (tau - 1)), the scale of the noise term in A_n."""
        return self.delta ** ((2.0 - self.tau) / (self.tau - 1.0))


def build_scheme(n: int, h: float, tau: float) -> SamplingScheme:
    if not (1.0 < tau <= 2.0):
        raise SchemeError(f"tau must lie in (1, 2], got {tau}")
    if h <= 0 or not math.isfinite(h):
        raise SchemeError(f"h must be positive, got {h}")
    if int(n) < 1:
        raise SchemeError(f"n must be at least 1, got {n}")
    n = int(n)
    p = max(2, int(math.floor(h ** (-1.0 / tau) + 0.5)))
    k = n // p
    if k < 3:
        raise SchemeError(f"insufficient blocks: k_n = {k} < 3 (n={n}, p_n={p})")
    return SamplingScheme(n=n, h=float(h), tau=float(tau), p=p, k=k, delta=p * float(h))


@dataclass(frozen=True)
class TrueParameters:
    alpha: np.ndarray
    beta: np.ndarray
    lam: np.ndarray
    x0: np.ndarray

    def __post_init__(self):
        for attr in ("alpha", "beta", "x0"):
            arr = np.atleast_1d(np.array(getattr(self, attr), dtype=float))
            arr.setflags(write=False)
            object.__setattr__(self, attr, arr)
        lam = np.atleast_2d(np.array(self.lam, dtype=float))
        lam.setflags(write=False)
        object.__setattr__(self, "lam", lam)

    def check_interior(self, model: DiffusionModel) -> None:
        for name, val, box in (("alpha", self.alpha, model.alpha_box), ("beta", self.beta, model.beta_box)):
            if val.shape != (box.shape[0],):
                raise ValueError(f"{name} has dimension {val.size}, model expects {box.shape[0]}")
            if np.any(val <= box[:, 0]) or np.any(val >= box[:, 1]):
                raise ValueError(f"true {name} {val.tolist()} is not interior to its box")


@dataclass
class ValidationReport:
    min_det_A: float
    det_ok: bool
    k_delta_sq: float
    k_delta_sq_ok: bool
    T: float
    p_ok: bool
    notes: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.det_ok and self.p_ok


def _box_corners(box: np.ndarray) -> np.ndarray:
    grids = np.meshgrid(*[row for row in box], indexing="ij")
    return np.stack([g.ravel() for g in grids], axis=-1)


def validate_assumptions(model: DiffusionModel, scheme: SamplingScheme, probe_grid) -> ValidationReport:
    grid = np.asarray(probe_grid, dtype=float).reshape(-1, model.dim_state)
    if grid.shape[0] == 0:
        raise ValueError("probe grid must be nonempty")
    min_det = math.inf
    for alpha in _box_corners(model.alpha_box):
        dets = np.linalg.det(model.A(grid, alpha))
        min_det = min(min_det, float(dets.min()))
    notes = []
    kd2 = scheme.k_delta_sq
    if kd2 >= 1.0:
        notes.append(f"k_n * Delta_n^2 = {kd2:.6g} >= 1: far from the k_n Delta_n^2 -> 0 regime")
    if min_det <= 0:
        notes.append(f"det A(x, alpha) reaches {min_det:.6g} <= 0 on the probe grid")
    notes.append("ergodicity, identifiability and epsilon_0 conditions are not machine-checked")
    return ValidationReport(
        min_det_A=min_det,
        det_ok=min_det > 0,
        k_delta_sq=kd2,
        k_delta_sq_ok=kd2 < 1.0,
        T=scheme.T,
        p_ok=scheme.p >= 2,
        notes=notes,
    )


def _ou_drift(x, beta):
    return -beta[0] * (x - beta[1])


def _ou_diffusion(x, alpha):
    return np.broadcast_to(np.asarray(alpha[0], dtype=float), x.shape[:-1] + (1, 1))


def _ou_invariant_law(alpha, beta):
    return np.array([beta[1]]), np.array([[alpha[0] ** 2 / (2.0 * beta[0])]])


def builtin_ou_model(alpha_box=((0.1, 2.0),), beta_box=((0.1, 3.0), (-2.0, 2.0))) -> DiffusionModel:
    """Scalar Ornstein-Uhlenbeck model dX = -beta1 (X - beta2) dt + alpha dW."""
    return DiffusionModel(
        name="ou1d",
        dim_state=1,
        dim_noise=1,
        dim_alpha=1,
        dim_beta=2,
        drift=_ou_drift,
        diffusion=_ou_diffusion,
        alpha_box=alpha_box,
        beta_box=beta_box,
        invariant_law=_ou_invariant_law,
    )


def ou_invariant_variance(alpha: float, beta1: float) -> float:
    return alpha**2 / (2.0 * beta1)


_REGISTRY: dict[str, Callable[..., DiffusionModel]] = {"ou1d": builtin_ou_model}


def register_model(name: str, factory: Callable[..., DiffusionModel]) -> None:
    _REGISTRY[name] = factory


def get_model(name: str, **kwargs) -> DiffusionModel:
    try:
        factory = _REGISTRY[name]
    except KeyError:
        raise KeyError(f"unknown model {name!r}; registered: {sorted(_REGISTRY)}") from None
    return factory(**kwargs)


def registered_models() -> list[str]:
    return sorted(_REGISTRY)
