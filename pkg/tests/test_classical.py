from __future__ import annotations

import numpy as np
import pytest

from jigsawcm import classical
from jigsawcm.classical import MGC_DELTA, SINGLE, mgc_stabilizers, pairwise


def _mgc_brute(left, right):
    """Direct transcription with explicit per-row loops and numpy's covariance."""
    s, c = left.shape[0], left.shape[2]
    dummies = mgc_stabilizers(c)
    total = 0.0
    for a, b, sign in ((left, right, 1), (right[:, ::-1], left[:, ::-1], 1)):
        grads = [a[r, -1] - a[r, -2] for r in range(s)] + list(dummies)
        grads = np.array(grads)
        mu = grads.mean(axis=0)
        cov = np.cov(grads, rowvar=False)
        inv = np.linalg.inv(cov)
        for r in range(s):
            d = (b[r, 0] - a[r, -1]) - mu
            total += d @ inv @ d
    return total


def test_mgc_matches_brute_force(rng):
    for _ in range(5):
        left, right = rng.random((2, 7, 7, 3))
        assert classical.mgc(left, right) == pytest.approx(_mgc_brute(left, right), rel=1e-10)


def test_mgc_stabilizers():
    d = mgc_stabilizers(3)
    assert d.shape == (9, 3)
    assert np.allclose(np.abs(d).max(), MGC_DELTA)
    assert np.allclose(d.sum(0), 0)


def test_mgc_constant_pieces_finite():
    a = np.full((5, 5, 3), 0.5)
    assert np.isfinite(classical.mgc(a, a))


def test_ssd_and_l1_hand_values():
    left = np.zeros((3, 3, 1))
    right = np.zeros((3, 3, 1))
    left[:, -1, 0] = [1.0, 2.0, 3.0]
    right[:, 0, 0] = [0.0, 2.0, 5.0]
    assert classical.ssd(left, right) == pytest.approx(1 + 0 + 4)
    assert classical.l1_cm(left, right) == pytest.approx(1 + 0 + 2)


def test_pbc_hand_value():
    left = np.zeros((1, 3, 1))
    right = np.zeros((1, 3, 1))
    left[0, :, 0] = [0.0, 1.0, 2.0]   # linear ramp predicts 3 next
    right[0, :, 0] = [3.0, 4.0, 5.0]  # continues it exactly, and predicts 2 backwards
    assert classical.pbc(left, right) == pytest.approx(0.0)
    right[0, 0, 0] = 4.0
    # lr residual |2*2-1-4| = 1, rl residual |2*4-4-2| = 2
    expected = 1.0 ** (1 / 16) + (2.0 ** 0.3) ** ((1 / 16) / 0.3)
    assert classical.pbc(left, right) == pytest.approx(expected)


@pytest.mark.parametrize("name", classical.BACKENDS)
def test_pairwise_matches_single(rng, name):
    left = rng.random((4, 6, 6, 3))
    right = rng.random((5, 6, 6, 3))
    m = pairwise(name, left, right, chunk_elems=50)
    oracle = np.array([[SINGLE[name](a, b) for b in right] for a in left])
    assert np.allclose(m, oracle, rtol=1e-10, atol=1e-12)


@pytest.mark.parametrize("name", classical.BACKENDS)
def test_pairwise_workers_identical(rng, name):
    pieces = rng.random((9, 5, 5, 3))
    a = pairwise(name, pieces, pieces, chunk_elems=100)
    b = pairwise(name, pieces, pieces, chunk_elems=100, workers=3)
    assert np.array_equal(a, b)


def test_true_neighbor_wins_on_smooth_image():
    y, x = np.mgrid[0:8, 0:16] / 16.0
    img = np.stack([x, y, x * y], axis=-1)
    left, right = img[:, :8], img[:, 8:]
    for name in classical.BACKENDS:
        assert SINGLE[name](left, right) < SINGLE[name](right, left)


def test_errors():
    with pytest.raises(ValueError):
        pairwise("nope", np.zeros((1, 4, 4, 3)), np.zeros((1, 4, 4, 3)))
    with pytest.raises(classical.PuzzleDataError):
        classical.ssd(np.zeros((4, 4, 3)), np.zeros((5, 5, 3)))
