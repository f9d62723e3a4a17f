"""Local means over non-overlapping blocks of p_n observations."""
from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .model import SamplingScheme
from .simulate import ObservationSeries


class InsufficientDataError(ValueError):
    pass


@dataclass(frozen=True)
class LocalMeanSeries:
    scheme: SamplingScheme
    means: np.ndarray

    @property
    def dim(self) -> int:
        return self.means.shape[1]


def _block_means(values: np.ndarray, p: int, k: int) -> np.ndarray:
    # Kahan summation across the p columns, vectorised over blocks
    blocks = values[: k * p].reshape(k, p, -1)
    total = np.zeros(blocks[:, 0].shape)
    comp = np.zeros_like(total)
    for i in range(p):
        y = blocks[:, i] - comp
        t = total + y
        comp = (t - total) - y
        total = t
    return total / p


def local_means(series: ObservationSeries) -> LocalMeanSeries:
    scheme = series.scheme
    if series.values.shape[0] < scheme.k * scheme.p:
        raise InsufficientDataError(
            f"insufficient data: {series.values.shape[0]} rows < k_n * p_n = {scheme.k * scheme.p}"
        )
    return LocalMeanSeries(scheme=scheme, means=_block_means(series.values, scheme.p, scheme.k))


def block_increments(lm: LocalMeanSeries) -> np.ndarray:
    if lm.means.shape[0] < 2:
        raise ValueError("need at least two local means")
    return lm.means[1:] - lm.means[:-1]


def zeta_moment_constants(p: int, exact: bool = False):
    """Second moments (per unit Delta_n) of the block Brownian averages.

    Returns ``(m, m_prime, chi)`` with m = 1/3 + 1/(2p) + 1/(6p^2),
    m' = 1/3 - 1/(2p) + 1/(6p^2) and chi = (1 - 1/p^2)/6.  With ``exact=True``
    the values are :class:`fractions.Fraction`.
    """
    if int(p) < 1:
        raise ValueError("p must be >= 1")
    q = Fraction(int(p))
    m = Fraction(1, 3) + 1 / (2 * q) + 1 / (6 * q * q)
    mp = Fraction(1, 3) - 1 / (2 * q) + 1 / (6 * q * q)
    chi = Fraction(1, 6) * (1 - 1 / (q * q))
    if exact:
        return m, mp, chi
    return float(m), float(mp), float(chi)
