"""Compatibility tensors: computation, post-processing, metrics and file format.

``scores[i, ri, j, rj]`` is the dissimilarity of stored piece ``j`` rotated
``rj`` quarter turns placed immediately right of stored piece ``i`` rotated
``ri`` quarter turns. Lower is better; impossible poses hold ``+inf``.

Type-1 tensors only populate ``ri == rj``. Poses 0 and 1 (right and down
neighbors) are computed; 2 and 3 are the same physical adjacencies read from
the other piece, so they are filled by transposition.
"""

from __future__ import annotations

import logging
import struct
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from . import classical
from .embed_net import EdgeEmbeddingSet, EmbeddingModel, PairModel, embed_edges, to_tensor
from .errors import PuzzleDataError
from .puzzle_io import ProblemType, PuzzleBundle, rotate

log = logging.getLogger(__name__)

CM_MAGIC = b"CMT1"
BACKENDS = classical.BACKENDS + ("edge2vec", "e2e_proxy")
POSTPROCESS_MODES = ("none", "scaled", "symmetric", "rescaled")
GALLAGHER_EPS = 1e-12


class DegenerateRowWarning(RuntimeWarning):
    """An anchor row could not be normalized as requested."""


@dataclass(eq=False)
class CMTensor:
    scores: np.ndarray
    problem_type: ProblemType

    def __post_init__(self):
        self.problem_type = ProblemType.parse(self.problem_type)
        n = self.scores.shape[0]
        if self.scores.shape != (n, 4, n, 4):
            raise PuzzleDataError(f"CM tensor must be (N,4,N,4), got {self.scores.shape}")

    @property
    def n(self) -> int:
        return self.scores.shape[0]

    def copy(self) -> "CMTensor":
        return CMTensor(self.scores.copy(), self.problem_type)

    def right_of(self, i, ri, j, rj) -> float:
        return float(self.scores[i, ri % 4, j, rj % 4])

    def below(self, i, ri, j, rj) -> float:
        """Piece j directly below piece i (both at the given rotations)."""
        return float(self.scores[i, (ri + 1) % 4, j, (rj + 1) % 4])

    def left_of(self, i, ri, j, rj) -> float:
        """Piece j directly left of piece i."""
        return float(self.scores[j, rj % 4, i, ri % 4])

    def __eq__(self, other):
        if not isinstance(other, CMTensor):
            return NotImplemented
        return self.problem_type == other.problem_type and np.array_equal(self.scores, other.scores)


@dataclass
class CMBackend:
    name: str
    model: EmbeddingModel | PairModel | None = None

    def __post_init__(self):
        if self.name not in BACKENDS + ("oracle",):
            raise ValueError(f"unknown backend {self.name!r}; expected one of {BACKENDS}")
        if self.name == "edge2vec" and not isinstance(self.model, EmbeddingModel):
            raise ValueError("edge2vec backend needs an embedding model checkpoint")
        if self.name == "e2e_proxy" and not isinstance(self.model, PairModel):
            raise ValueError("e2e_proxy backend needs a pair-model checkpoint")


def _empty(n: int) -> np.ndarray:
    return np.full((n, 4, n, 4), np.inf)


def _fill_type1_mirror(scores: np.ndarray) -> None:
    """scores[i,2,j,2] = scores[j,0,i,0] and scores[i,3,j,3] = scores[j,1,i,1]."""
    scores[:, 2, :, 2] = scores[:, 0, :, 0].T
    scores[:, 3, :, 3] = scores[:, 1, :, 1].T


def _finish(scores: np.ndarray, ptype: ProblemType) -> CMTensor:
    n = scores.shape[0]
    scores[np.arange(n), :, np.arange(n), :] = np.inf
    if ptype is ProblemType.TYPE1:
        _fill_type1_mirror(scores)
        for a in range(4):  # ri != rj poses do not exist for type1
            for b in range(4):
                if a != b:
                    scores[:, a, :, b] = np.inf
    return CMTensor(scores, ptype)


def euclidean(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """All-pairs Euclidean distances between rows of ``a`` and ``b`` (float64)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    sq = (a * a).sum(1)[:, None] + (b * b).sum(1)[None, :] - 2.0 * (a @ b.T)
    return np.sqrt(np.maximum(sq, 0.0))


def cm_from_embeddings(emb: EdgeEmbeddingSet, problem_type: ProblemType | str) -> CMTensor:
    """Distances between left-role(i, ri) and right-role(j, rj)."""
    ptype = ProblemType.parse(problem_type)
    n, _, d = emb.right.shape
    scores = _empty(n)
    if ptype is ProblemType.TYPE2:
        full = euclidean(emb.left.reshape(4 * n, d), emb.right.reshape(4 * n, d))
        scores[:] = full.reshape(n, 4, n, 4)
    else:
        for r in (0, 1):
            scores[:, r, :, r] = euclidean(emb.left[:, r], emb.right[:, r])
    return _finish(scores, ptype)


def _rotations(pieces: np.ndarray) -> np.ndarray:
    """(N, 4, S, S, C) stack of every piece at every rotation."""
    return np.stack([np.stack([rotate(p, r) for r in range(4)]) for p in pieces])


def _classical_cm(bundle: PuzzleBundle, name: str, workers: int) -> CMTensor:
    n = bundle.n
    rots = _rotations(bundle.pieces)
    scores = _empty(n)
    if bundle.problem_type is ProblemType.TYPE2:
        flat = rots.reshape((4 * n,) + rots.shape[2:])
        scores[:] = classical.pairwise(name, flat, flat, workers=workers).reshape(n, 4, n, 4)
    else:
        for r in (0, 1):
            scores[:, r, :, r] = classical.pairwise(name, rots[:, r], rots[:, r], workers=workers)
    return _finish(scores, bundle.problem_type)


def _pair_cm(bundle: PuzzleBundle, model: PairModel, batch_size: int = 4096) -> CMTensor:
    n = bundle.n
    dtype = next(model.parameters()).dtype
    rots = to_tensor(_rotations(bundle.pieces).reshape((4 * n,) + bundle.pieces.shape[1:]), dtype)
    poses = (0, 1) if bundle.problem_type is ProblemType.TYPE1 else (0, 1, 2, 3)
    # every anchor pose x candidate pose on different pieces; flattened index = piece * 4 + rotation
    if bundle.problem_type is ProblemType.TYPE1:
        a_idx, b_idx = [], []
        for r in poses:
            ii, jj = np.nonzero(~np.eye(n, dtype=bool))
            a_idx.append(ii * 4 + r)
            b_idx.append(jj * 4 + r)
        a_idx, b_idx = np.concatenate(a_idx), np.concatenate(b_idx)
    else:
        aa, bb = np.meshgrid(np.arange(4 * n), np.arange(4 * n), indexing="ij")
        keep = (aa // 4) != (bb // 4)
        a_idx, b_idx = aa[keep], bb[keep]
    flat = np.full(16 * n * n, np.inf)
    with torch.inference_mode():
        for lo in range(0, len(a_idx), batch_size):
            a = torch.from_numpy(a_idx[lo:lo + batch_size])
            b = torch.from_numpy(b_idx[lo:lo + batch_size])
            logits = model(torch.cat([rots[a], rots[b]], dim=-1))
            flat[a.numpy() * 4 * n + b.numpy()] = -logits.double().numpy()
    return _finish(flat.reshape(n, 4, n, 4), bundle.problem_type)


def gt_pose_table(bundle: PuzzleBundle) -> np.ndarray:
    """Rows (i, ri, j, rj): every anchor edge that has a true neighbor, with that neighbor's pose."""
    q = bundle.quarter_turns
    nbr = bundle.gt_neighbors()
    rows = []
    for i in range(bundle.n):
        for k in range(4):
            j = nbr[i, k]
            if j >= 0:
                rows.append((i, (k - q[i]) % 4, j, (k - q[j]) % 4))
    return np.array(rows, dtype=np.int64).reshape(-1, 4)


def oracle_cm(bundle: PuzzleBundle) -> CMTensor:
    """0 for every ground-truth adjacency pose, 1 for every other legal pose."""
    scores = _empty(bundle.n)
    if bundle.problem_type is ProblemType.TYPE2:
        scores[:] = 1.0
    else:
        for r in range(4):
            scores[:, r, :, r] = 1.0
    t = _finish(scores, bundle.problem_type)
    gt = gt_pose_table(bundle)
    t.scores[gt[:, 0], gt[:, 1], gt[:, 2], gt[:, 3]] = 0.0
    return t


def compute_cm(bundle: PuzzleBundle, backend: CMBackend | str, *, workers: int = 1) -> CMTensor:
    """Full compatibility tensor of a puzzle under one backend."""
    if isinstance(backend, str):
        backend = CMBackend(backend)
    cfg = getattr(backend.model, "cfg", None)
    if cfg is not None and cfg.piece_size != bundle.piece_size:
        raise PuzzleDataError(f"model expects {cfg.piece_size}px pieces, bundle has {bundle.piece_size}px")
    if backend.name in classical.BACKENDS:
        return _classical_cm(bundle, backend.name, workers)
    if backend.name == "edge2vec":
        return cm_from_embeddings(embed_edges(backend.model, bundle.pieces), bundle.problem_type)
    if backend.name == "e2e_proxy":
        return _pair_cm(bundle, backend.model)
    return oracle_cm(bundle)


# --------------------------------------------------------------------------
# post-processing
# --------------------------------------------------------------------------

def _rows(scores: np.ndarray) -> np.ndarray:
    n = scores.shape[0]
    return scores.reshape(4 * n, 4 * n)


def minmax_scale(t: CMTensor) -> CMTensor:
    """Per anchor row: (C - min) / (max - min) over finite entries."""
    out = t.copy()
    rows = _rows(out.scores)
    finite = np.isfinite(rows)
    count = finite.sum(1)
    lo = np.where(finite, rows, np.inf).min(1)
    hi = np.where(finite, rows, -np.inf).max(1)
    span = hi - lo
    good = (count >= 2) & (span > 0)
    degenerate = (count > 0) & ~good
    scaled = (rows - lo[:, None]) / np.where(good, span, 1.0)[:, None]
    rows[:] = np.where(finite & good[:, None], scaled, np.where(finite, 0.0, rows))
    if degenerate.any():
        warnings.warn(f"{int(degenerate.sum())} constant anchor rows set to 0 during min-max scaling",
                      DegenerateRowWarning, stacklevel=2)
    return out


def symmetrize(t: CMTensor) -> CMTensor:
    """Average each pose with the same adjacency seen from the other piece.

    The mirror of ``(i, a, j, b)`` is ``(j, b+2, i, a+2)``: turn the pair
    half a revolution and ``j`` becomes the anchor with ``i`` on its right.
    """
    rolled = np.roll(np.roll(t.scores, 2, axis=1), 2, axis=3)
    mirror = rolled.transpose(2, 3, 0, 1)
    return CMTensor((t.scores + mirror) / 2.0, t.problem_type)


def mirror_identity_holds(t: CMTensor) -> bool:
    rolled = np.roll(np.roll(t.scores, 2, axis=1), 2, axis=3)
    return bool(np.array_equal(t.scores, rolled.transpose(2, 3, 0, 1)))


def gallagher_rescale(t: CMTensor) -> CMTensor:
    """Divide each anchor row by its second-smallest finite score."""
    out = t.copy()
    rows = _rows(out.scores)
    finite = np.isfinite(rows)
    count = finite.sum(1)
    masked = np.where(finite, rows, np.inf)
    second = np.partition(masked, 1, axis=1)[:, 1] if rows.shape[1] > 1 else np.full(len(rows), np.inf)
    usable = count >= 2
    zero = usable & (second == 0)
    if zero.any():
        warnings.warn(f"{int(zero.sum())} anchor rows have a zero runner-up score; adding {GALLAGHER_EPS}",
                      DegenerateRowWarning, stacklevel=2)
    short = (count > 0) & ~usable
    if short.any():
        warnings.warn(f"{int(short.sum())} anchor rows have fewer than two candidates; left unscaled",
                      DegenerateRowWarning, stacklevel=2)
    denom = np.where(usable, second + np.where(zero, GALLAGHER_EPS, 0.0), 1.0)
    rows[:] = np.where(finite, rows / denom[:, None], rows)
    return out


def postprocess(t: CMTensor, mode: str) -> CMTensor:
    """none | scaled (min-max) | symmetric (+ mirror averaging) | rescaled (+ runner-up division)."""
    if mode not in POSTPROCESS_MODES:
        raise ValueError(f"unknown postprocess mode {mode!r}; expected one of {POSTPROCESS_MODES}")
    if mode == "none":
        return t
    t = minmax_scale(t)
    if mode in ("symmetric", "rescaled"):
        t = symmetrize(t)
    if mode == "rescaled":
        t = gallagher_rescale(t)
    return t


# --------------------------------------------------------------------------
# metrics and analyses
# --------------------------------------------------------------------------

def top1_hits(t: CMTensor, bundle: PuzzleBundle) -> np.ndarray:
    """Boolean per ground-truth anchor edge: is the true neighbor the best candidate?"""
    if t.n != bundle.n:
        raise PuzzleDataError(f"tensor covers {t.n} pieces, bundle has {bundle.n}")
    gt = gt_pose_table(bundle)
    rows = t.scores[gt[:, 0], gt[:, 1]].reshape(len(gt), -1)
    best = np.argmin(rows, axis=1)
    return best == gt[:, 2] * 4 + gt[:, 3]


def top1_accuracy(t: CMTensor, bundle: PuzzleBundle) -> float:
    hits = top1_hits(t, bundle)
    return float(hits.mean()) if len(hits) else 0.0


def mask_largest(vectors: np.ndarray, fraction: float) -> np.ndarray:
    """Zero the round(fraction * d) largest-magnitude components of every vector."""
    d = vectors.shape[-1]
    k = int(round(fraction * d))
    out = vectors.copy()
    if k == 0:
        return out
    flat = out.reshape(-1, d)
    order = np.argsort(-np.abs(flat), axis=1, kind="stable")[:, :k]
    np.put_along_axis(flat, order, 0.0, axis=1)
    return out


def mask_and_remeasure(emb: EdgeEmbeddingSet, bundle: PuzzleBundle, fractions: Sequence[float],
                       postprocess_mode: str = "none") -> list[dict]:
    """Top-1 retention as the strongest embedding components are zeroed."""
    for f in fractions:
        if not 0.0 <= f <= 0.5:
            raise ValueError(f"masking fraction {f} outside [0, 0.5]")
    base = top1_accuracy(postprocess(cm_from_embeddings(emb, bundle.problem_type), postprocess_mode), bundle)
    report = []
    for f in fractions:
        masked = EdgeEmbeddingSet(right=mask_largest(emb.right, f), left=mask_largest(emb.left, f))
        acc = top1_accuracy(postprocess(cm_from_embeddings(masked, bundle.problem_type), postprocess_mode),
                            bundle)
        report.append({"fraction": float(f), "top1": acc,
                       "retention": acc / base if base > 0 else float("nan")})
    return report


def distance_map(t: CMTensor, bundle: PuzzleBundle) -> np.ndarray:
    """N x N matrix of negated right-neighbor scores, pieces in ground-truth order.

    Row = anchor, column = candidate, both upright; the true right neighbor of
    cell n (outside the last column) is n+1, so a good CM lights up the
    super-diagonal.
    """
    order = np.empty(bundle.n, dtype=np.int64)
    order[bundle.permutation] = np.arange(bundle.n)  # gt cell -> stored index
    upright = (-bundle.quarter_turns) % 4
    ri = upright[order][:, None]
    rj = upright[order][None, :]
    m = -t.scores[order[:, None], ri, order[None, :], rj]
    finite = np.isfinite(m)
    fill = m[finite].min() if finite.any() else 0.0
    return np.where(finite, m, fill)


def export_distance_map(t: CMTensor, bundle: PuzzleBundle, path: str | Path) -> np.ndarray:
    from .plotting import save_heatmap

    m = distance_map(t, bundle)
    save_heatmap(m, path)
    return m


# --------------------------------------------------------------------------
# CMT1 files
# --------------------------------------------------------------------------

def save_cm(t: CMTensor, path: str | Path) -> None:
    header = CM_MAGIC + struct.pack("<IB3x", t.n, 1 if t.problem_type is ProblemType.TYPE1 else 2)
    Path(path).write_bytes(header + t.scores.astype("<f4").tobytes(order="C"))


def load_cm(path: str | Path) -> CMTensor:
    raw = Path(path).read_bytes()
    if raw[:4] != CM_MAGIC:
        raise PuzzleDataError(f"{path}: not a CMT1 file")
    if len(raw) < 12:
        raise PuzzleDataError(f"{path}: truncated header")
    n, kind = struct.unpack("<IB3x", raw[4:12])
    if kind not in (1, 2):
        raise PuzzleDataError(f"{path}: unknown problem type code {kind}")
    expected = 12 + 16 * n * n * 4
    if len(raw) != expected:
        raise PuzzleDataError(f"{path}: expected {expected} bytes for N={n}, got {len(raw)}")
    scores = np.frombuffer(raw, dtype="<f4", offset=12).astype(np.float64).reshape(n, 4, n, 4)
    return CMTensor(scores, ProblemType.TYPE1 if kind == 1 else ProblemType.TYPE2)
