from __future__ import annotations

import math

import numpy as np
import pytest

from noisydiff.asymptotics import (
    AsymptoticCovariance,
    InvariantMeasure,
    SingularInformationError,
    information_matrices,
    invariant_expectation,
    rates,
    sandwich,
    sandwich_covariance,
    vech,
    vech_index,
    vech_inverse,
    vech_pairs,
    w1_matrix,
)
from noisydiff.model import DiffusionModel, NoiseSpec, TrueParameters, build_scheme, builtin_ou_model


def test_vech_index_values():
    assert vech_index(1, 1, 3) == 1 and vech_index(1, 3, 3) == 3
    assert (vech_index(2, 2, 3), vech_index(2, 3, 3), vech_index(3, 3, 3)) == (4, 5, 6)


@pytest.mark.parametrize("d", range(1, 7))
def test_vech_round_trip(d):
    seen = set()
    for i in range(1, d + 1):
        for j in range(i, d + 1):
            s = vech_index(i, j, d)
            assert vech_inverse(s, d) == (i, j)
            seen.add(s)
    assert seen == set(range(1, d * (d + 1) // 2 + 1))


def test_vech_errors_and_vector():
    with pytest.raises(IndexError):
        vech_index(2, 1, 3)
    with pytest.raises(IndexError):
        vech_index(1, 4, 3)
    with pytest.raises(IndexError):
        vech_inverse(7, 3)
    m = np.array([[1, 2, 3], [2, 4, 5], [3, 5, 6]])
    assert vech(m).tolist() == [1, 2, 3, 4, 5, 6]
    assert vech_pairs(2) == [(1, 1), (1, 2), (2, 2)]


def test_w1_scalar_cases():
    assert w1_matrix(NoiseSpec(0.3))[0, 0] == pytest.approx(3 * 0.09, rel=1e-14)
    assert w1_matrix(NoiseSpec(0.3, "rademacher_product"))[0, 0] == pytest.approx(0.09, rel=1e-14)
    assert w1_matrix(NoiseSpec(0.3, "uniform_symmetric"))[0, 0] == pytest.approx(0.09 * (9 / 5 - 3) + 0.27)


def _w1_monte_carlo(lam, draws, rng):
    """Long-run covariance of vech of (Delta Y)(Delta Y)^T / 2 for pure noise, 1-dependent terms."""
    root = NoiseSpec(lam).sqrt
    d = lam.shape[0]
    eps = rng.standard_normal((3, draws, d)) @ root.T
    pairs = [(i - 1, j - 1) for i, j in vech_pairs(d)]
    z1, z2 = eps[1] - eps[0], eps[2] - eps[1]
    d0 = np.stack([z1[:, i] * z1[:, j] / 2 - lam[i, j] for i, j in pairs], axis=1)
    d1 = np.stack([z2[:, i] * z2[:, j] / 2 - lam[i, j] for i, j in pairs], axis=1)
    q = d0[:, :, None] * d0[:, None, :] + d0[:, :, None] * d1[:, None, :] + d1[:, :, None] * d0[:, None, :]
    return q.mean(axis=0), q.std(axis=0, ddof=1) / math.sqrt(draws)


def test_w1_bivariate_monte_carlo():
    lam = np.diag([0.3, 0.1])
    est, se = _w1_monte_carlo(lam, 1_000_000, np.random.default_rng(5))
    assert np.all(np.abs(est - w1_matrix(NoiseSpec(lam))) <= 3 * se + 1e-15)


def test_w1_psd_and_gaussian_closed_form():
    rng = np.random.default_rng(0)
    for d in (1, 2, 3):
        for _ in range(5):
            g = rng.standard_normal((d, d))
            lam = g @ g.T
            for fam in ("gaussian", "uniform_symmetric", "rademacher_product"):
                w = w1_matrix(NoiseSpec(lam, fam))
                assert np.allclose(w, w.T)
                assert np.linalg.eigvalsh(w).min() >= -1e-10 * np.trace(w)
            pairs = [(i - 1, j - 1) for i, j in vech_pairs(d)]
            closed = np.array([[1.5 * (lam[a, c] * lam[b, e] + lam[a, e] * lam[b, c]) for c, e in pairs]
                               for a, b in pairs])
            assert np.allclose(w1_matrix(NoiseSpec(lam)), closed, rtol=1e-12, atol=1e-12)


def test_invariant_expectation_closed_form():
    nu = InvariantMeasure.gaussian([0.0], [[1.0]])
    assert invariant_expectation(nu, lambda x: np.ones(x.shape[0])) == pytest.approx(1.0, abs=1e-12)
    assert invariant_expectation(nu, lambda x: x[:, 0] ** 2) == pytest.approx(1.0, abs=1e-10)
    assert nu.averaging_length == math.inf


@pytest.mark.slow
def test_ergodic_average_matches_closed_form():
    model = builtin_ou_model()
    truth = TrueParameters([1.0], [1.0, 0.0], 0.0, [0.0])
    nu = InvariantMeasure.ergodic(model, truth, t_avg=1e4)
    closed = InvariantMeasure.for_model(model, truth)
    fourth = lambda x: x[:, 0] ** 4
    assert invariant_expectation(nu, fourth) == pytest.approx(invariant_expectation(closed, fourth), rel=0.05)
    assert nu.averaging_length == 1e4


def _ou_truth(alpha=1.0, beta=(1.0, 0.0), lam=0.1):
    return TrueParameters([alpha], list(beta), lam, [0.0])


def test_alpha_information_scalar_ou():
    a, lam = 1.2, 0.15
    ac = information_matrices(builtin_ou_model(), _ou_truth(a, lam=lam), NoiseSpec(lam), 2.0)
    assert ac.block("alpha", "j")[0, 0] == pytest.approx(2 * a**2 / (a**2 + 3 * lam) ** 2, rel=1e-8)
    bbar = 0.75 * 2 * a / (a**2 + 3 * lam) ** 2
    i22 = bbar**2 * (a**4 + 4 * a**2 * lam + 12 * lam**2)
    assert ac.block("alpha", "i")[0, 0] == pytest.approx(i22, rel=1e-8)


def test_drift_information_scalar_ou():
    a, b1, b2 = 0.8, 1.5, 0.4
    ac = information_matrices(builtin_ou_model(), _ou_truth(a, (b1, b2)), NoiseSpec(0.1), 2.0)
    i33 = ac.block("beta", "i")
    assert i33[1, 1] == pytest.approx(b1**2 / a**2, rel=1e-8)
    assert i33[0, 0] == pytest.approx(1.0 / (2 * b1), rel=1e-8)
    assert i33[0, 1] == pytest.approx(0.0, abs=1e-8)
    assert np.array_equal(i33, ac.block("beta", "j"))


def test_tau_below_two_branch():
    a = 1.3
    for lam in (0.05, 0.4):
        ac = information_matrices(builtin_ou_model(), _ou_truth(a, lam=lam), NoiseSpec(lam), 1.5)
        assert ac.block("alpha", "i")[0, 0] == pytest.approx(9 / (4 * a**2), rel=1e-8)
        assert ac.block("alpha", "j")[0, 0] == pytest.approx(2 / a**2, rel=1e-8)


def test_block_structure_and_sandwich():
    ac = information_matrices(builtin_ou_model(), _ou_truth(), NoiseSpec(0.1), 2.0)
    assert ac.i_matrix.shape == (4, 4)
    s = ac.sandwich
    off = s.copy()
    for sl in ac.blocks.values():
        off[sl, sl] = 0
    assert np.all(off == 0)
    assert np.allclose(s, s.T) and np.linalg.eigvalsh(s).min() >= 0
    assert np.allclose(np.diag(s), [0.03, 1.1975 / (1.0 / 1.69 * 2) ** 2, 2.0, 1.0], rtol=1e-4)
    assert np.allclose(sandwich_covariance(ac), s)
    doc = ac.to_dict()
    assert doc["layout"] == ["noise", "alpha", "beta", "beta"] and doc["blocks"]["beta"] == [2, 4]


def test_sandwich_identities():
    rng = np.random.default_rng(1)
    g = rng.standard_normal((3, 3))
    j = g @ g.T + 3 * np.eye(3)
    assert np.allclose(sandwich(j, j), np.linalg.inv(j))
    assert np.allclose(sandwich(j, np.eye(3)), j)


def test_singular_j():
    model = DiffusionModel("flat", 1, 1, 1, 1, lambda x, b: np.zeros_like(x),
                           lambda x, a: np.ones(x.shape + (1,)), ((0.5, 2.0),), ((0.5, 2.0),))
    with pytest.raises(SingularInformationError, match="J singular"):
        information_matrices(model, TrueParameters([1.0], [1.0], 0.1, [0.0]), NoiseSpec(0.1), 2.0,
                             InvariantMeasure.gaussian([0.0], [[1.0]]))


def test_rates():
    s = build_scheme(200000, 0.005, 2.0)
    assert rates(s) == (math.sqrt(200000), math.sqrt(s.k), math.sqrt(s.T))
    assert (s.p, s.k) == (14, 14285)
