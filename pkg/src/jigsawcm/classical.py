"""Classical edge-pixel dissimilarities for the left-right pose.

Every public function scores ``right`` placed immediately to the right of
``left`` (lower = more compatible). The ``*_pairwise`` variants take stacks
of edge columns and return the full anchor x candidate score matrix; the
engine uses them to score whole puzzles without a Python loop per pair.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import NumericalError, PuzzleDataError

PBC_P = 0.3
PBC_Q = 1.0 / 16.0
MGC_DELTA = 1.0 / 255.0

BACKENDS = ("ssd", "l1", "pbc", "mgc")


@dataclass(frozen=True)
class EdgeColumns:
    """The two outermost columns on each side of the shared boundary."""

    last_col: np.ndarray         # left piece, column S-1, shape (..., S, C)
    second_last_col: np.ndarray  # left piece, column S-2
    first_col: np.ndarray        # right piece, column 0
    second_col: np.ndarray       # right piece, column 1


def edge_columns(left: np.ndarray, right: np.ndarray) -> EdgeColumns:
    if left.shape != right.shape:
        raise PuzzleDataError(f"piece size mismatch: {left.shape} vs {right.shape}")
    if left.shape[-2] < 2:
        raise PuzzleDataError("pieces need at least two columns")
    return EdgeColumns(left[..., :, -1, :], left[..., :, -2, :], right[..., :, 0, :], right[..., :, 1, :])


def mgc_stabilizers(channels: int) -> np.ndarray:
    """Dummy gradients keeping the covariance invertible: 0, +-1 and +-e_k, scaled by 1/255."""
    eye = np.eye(channels)
    ones = np.ones((1, channels))
    dummies = np.concatenate([np.zeros((1, channels)), ones, -ones, eye, -eye])
    return dummies * MGC_DELTA


# --------------------------------------------------------------------------
# single-pair API
# --------------------------------------------------------------------------

def ssd(left: np.ndarray, right: np.ndarray) -> float:
    cols = edge_columns(left, right)
    return float(np.sum((cols.last_col - cols.first_col) ** 2))


def l1_cm(left: np.ndarray, right: np.ndarray) -> float:
    cols = edge_columns(left, right)
    return float(np.sum(np.abs(cols.last_col - cols.first_col)))


def pbc(left: np.ndarray, right: np.ndarray) -> float:
    """Prediction-based compatibility, summed over both prediction directions."""
    cols = edge_columns(left, right)
    lr = _pnorm(2 * cols.last_col - cols.second_last_col - cols.first_col)
    rl = _pnorm(2 * cols.first_col - cols.second_col - cols.last_col)
    return float(lr + rl)


def mgc(left: np.ndarray, right: np.ndarray) -> float:
    """Mahalanobis gradient compatibility, left-to-right plus right-to-left."""
    cols = edge_columns(left, right)
    mean_l, prec_l = _gradient_stats(cols.last_col, cols.second_last_col)
    mean_r, prec_r = _gradient_stats(cols.first_col, cols.second_col)
    d_lr = cols.first_col - cols.last_col - mean_l
    d_rl = cols.last_col - cols.first_col - mean_r
    return float(np.einsum("rc,cd,rd->", d_lr, prec_l, d_lr) + np.einsum("rc,cd,rd->", d_rl, prec_r, d_rl))


SINGLE = {"ssd": ssd, "l1": l1_cm, "pbc": pbc, "mgc": mgc}


def _pnorm(diff: np.ndarray, axis=(-2, -1)) -> np.ndarray:
    return np.sum(np.abs(diff) ** PBC_P, axis=axis) ** (PBC_Q / PBC_P)


def _gradient_stats(edge: np.ndarray, inner: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Mean and inverse covariance of the within-piece gradients at one edge.

    ``edge``/``inner`` are (..., S, C); the gradient samples are
    ``edge - inner`` per row, augmented with the stabilizer set.
    """
    grads = edge - inner
    dummies = np.broadcast_to(mgc_stabilizers(grads.shape[-1]), grads.shape[:-2] + (2 * grads.shape[-1] + 3,
                                                                                   grads.shape[-1]))
    samples = np.concatenate([grads, dummies], axis=-2)
    mean = samples.mean(axis=-2)
    centered = samples - mean[..., None, :]
    cov = np.einsum("...rc,...rd->...cd", centered, centered) / (samples.shape[-2] - 1)
    try:
        prec = np.linalg.inv(cov)
    except np.linalg.LinAlgError as exc:
        raise NumericalError("singular gradient covariance despite stabilizers") from exc
    return mean, prec


# --------------------------------------------------------------------------
# all-pairs API
# --------------------------------------------------------------------------

def pairwise(name: str, left_pieces: np.ndarray, right_pieces: np.ndarray, *,
             workers: int = 1, chunk_elems: int = 4_000_000) -> np.ndarray:
    """Score every ``right_pieces[b]`` placed right of every ``left_pieces[a]``.

    Both inputs are stacks of (already rotated) pieces, shape (A|B, S, S, C).
    Returns an (A, B) matrix equal entry-wise to calling the single-pair
    function on each combination.
    """
    if name not in SINGLE:
        raise ValueError(f"unknown classical backend {name!r}; expected one of {BACKENDS}")
    if left_pieces.shape[1:] != right_pieces.shape[1:]:
        raise PuzzleDataError(f"piece size mismatch: {left_pieces.shape[1:]} vs {right_pieces.shape[1:]}")
    left = left_pieces.astype(np.float64, copy=False)
    right = right_pieces.astype(np.float64, copy=False)
    ll, lsl = left[:, :, -1, :], left[:, :, -2, :]
    rf, rs = right[:, :, 0, :], right[:, :, 1, :]

    if name == "mgc":
        mean_l, prec_l = _gradient_stats(ll, lsl)
        mean_r, prec_r = _gradient_stats(rf, rs)
        # right-to-left term only depends on the right piece's precision
        target_r = rf + mean_r[:, None, :]

        def block(lo: int, hi: int) -> np.ndarray:
            out = np.empty((hi - lo, len(right)))
            for a in range(lo, hi):
                d_lr = rf - (ll[a] + mean_l[a])
                d_rl = ll[a] - target_r
                out[a - lo] = (np.einsum("brc,cd,brd->b", d_lr, prec_l[a], d_lr)
                               + np.einsum("brc,bcd,brd->b", d_rl, prec_r, d_rl))
            return out
    else:
        pred_l = 2 * ll - lsl
        pred_r = 2 * rf - rs

        def block(lo: int, hi: int) -> np.ndarray:
            a_last = ll[lo:hi, None]
            if name == "ssd":
                return np.sum((a_last - rf[None]) ** 2, axis=(-2, -1))
            if name == "l1":
                return np.sum(np.abs(a_last - rf[None]), axis=(-2, -1))
            return _pnorm(pred_l[lo:hi, None] - rf[None]) + _pnorm(pred_r[None] - a_last)

    per_row = max(1, right.shape[0] * int(np.prod(rf.shape[1:])))
    step = max(1, chunk_elems // per_row)
    bounds = [(lo, min(lo + step, len(left))) for lo in range(0, len(left), step)]
    if workers > 1 and len(bounds) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(lambda b: block(*b), bounds))
    else:
        parts = [block(lo, hi) for lo, hi in bounds]
    return np.concatenate(parts, axis=0) if parts else np.empty((0, len(right)))
