import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from pbfplan import MaskVector, brute_force_variance, build_variance_weight, cumulative_variance

masks = arrays(bool, st.integers(1, 30)).filter(np.any)


def _state(mask, seed, scale=1000.0):
    return 300 + scale * np.random.default_rng(seed).random(len(mask))


@pytest.mark.parametrize(
    "mu, T, expected",
    [
        ([1], [400.0], 0.0),
        ([1, 1], [300.0, 400.0], 2500.0),
        ([1, 1, 1], [500.0, 500.0, 500.0], 0.0),
    ],
)
def test_examples(mu, T, expected):
    mask = MaskVector(np.array(mu))
    Q = build_variance_weight(mask)
    assert Q.quad(np.array(T)) == pytest.approx(expected, abs=1e-9)
    assert brute_force_variance(T, mask) == pytest.approx(expected, abs=1e-9)


def test_off_mask_slot_ignored():
    mask = MaskVector(np.array([1, 0]))
    Q = build_variance_weight(mask)
    assert Q.quad(np.array([300.0, 0.0])) == Q.quad(np.array([300.0, 1e6])) == 0.0


def test_empty_mask_rejected():
    with pytest.raises(ValueError, match="empty mask"):
        build_variance_weight(MaskVector(np.zeros(3)))


def test_quadratic_form_matches_brute_force_on_100_states(rng):
    mask = MaskVector(rng.random(64) < 0.4)
    Q = build_variance_weight(mask)
    Qs = Q.to_sparse()
    for _ in range(100):
        T = 300 + 1500 * rng.random(64)
        ref = brute_force_variance(T, mask)
        assert Q.quad(T) == pytest.approx(ref, rel=1e-9)
        assert 0.5 * T @ (Qs @ T) == pytest.approx(ref, rel=1e-9)


@given(masks, st.integers(0, 2**31 - 1))
def test_quadratic_form_property(mu, seed):
    mask = MaskVector(mu)
    T = _state(mu, seed)
    assert build_variance_weight(mask).quad(T) == pytest.approx(brute_force_variance(T, mask), rel=1e-9, abs=1e-9)


@given(masks)
def test_nullspace(mu):
    mask = MaskVector(mu)
    Qs = build_variance_weight(mask).to_sparse()
    assert np.abs(Qs @ mask.mu.astype(float)).max() <= 1e-12
    for i in mask.off_ids:
        e = np.zeros(len(mu))
        e[i] = 1.0
        assert np.abs(Qs @ e).max() == 0.0
    np.testing.assert_allclose((Qs - Qs.T).toarray(), 0.0)


@given(masks, st.integers(0, 2**31 - 1))
def test_psd(mu, seed):
    Qs = build_variance_weight(MaskVector(mu)).to_sparse()
    x = np.random.default_rng(seed).normal(size=(20, len(mu)))
    assert np.all(np.einsum("ij,ij->i", x, (Qs @ x.T).T) >= -1e-12)


@given(masks, st.integers(0, 2**31 - 1), st.floats(-500, 500))
def test_shift_invariance(mu, seed, c):
    mask = MaskVector(mu)
    Q = build_variance_weight(mask)
    T = _state(mu, seed)
    assert Q.quad(T + c * mask.mu) == pytest.approx(Q.quad(T), rel=1e-7, abs=1e-6)


def test_matvec_matches_explicit(rng):
    mask = MaskVector(rng.random(25) < 0.5)
    Q = build_variance_weight(mask)
    T = rng.normal(size=25)
    np.testing.assert_allclose(Q.matvec(T), Q.to_sparse() @ T, atol=1e-12)


def test_cumulative_examples():
    mask = MaskVector(np.array([1, 1]))
    total, series = cumulative_variance(np.full((5, 2), 700.0), 0.1, mask)
    assert total == 0.0
    total, series = cumulative_variance(np.array([[300.0, 400.0], [350.0, 350.0]]), 0.1, mask)
    assert total == pytest.approx(250.0)
    np.testing.assert_allclose(series, [250.0, 250.0])


def test_cumulative_per_row_weights():
    mask = MaskVector(np.array([1, 1]))
    total, series = cumulative_variance(np.array([[300.0, 400.0], [300.0, 500.0]]), [0.1, 0.2], mask)
    assert total == pytest.approx(250.0 + 2000.0)
    assert np.all(np.diff(series) >= 0)


def test_cumulative_empty_rejected():
    with pytest.raises(ValueError):
        cumulative_variance(np.zeros((0, 2)), 0.1, MaskVector(np.array([1, 1])))
