"""Image ingestion, puzzle cutting, erosion, scrambling and the bundle format.

Images and pieces are plain float arrays of shape (H, W, C) with values in
[0, 1]. Rotations are counter-clockwise quarter turns (``np.rot90``); a piece
scrambled with rotation ``q`` is restored by rotating it ``-q`` quarter turns.

Edge directions are numbered 0 = right, 1 = down, 2 = left, 3 = up. Rotating a
piece one quarter turn counter-clockwise moves the edge that faced direction
``k`` to direction ``k - 1`` (mod 4), so ``rotate(p, k)`` brings the edge that
faced direction ``k`` to the right.
"""

from __future__ import annotations

import enum
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image as PILImage
from PIL import UnidentifiedImageError

from .errors import PuzzleDataError

log = logging.getLogger(__name__)

FORMAT_VERSION = "pzb1"
DIRECTIONS = ((0, 1), (1, 0), (0, -1), (-1, 0))  # (drow, dcol) for right, down, left, up


class ProblemType(str, enum.Enum):
    TYPE1 = "type1"  # unknown location, known orientation
    TYPE2 = "type2"  # unknown location and orientation

    @classmethod
    def parse(cls, value: "ProblemType | str | int") -> "ProblemType":
        if isinstance(value, cls):
            return value
        text = str(value).lower().replace("-", "").replace("_", "")
        if text in ("1", "type1"):
            return cls.TYPE1
        if text in ("2", "type2"):
            return cls.TYPE2
        raise ValueError(f"unknown problem type {value!r}")


def rotate(piece: np.ndarray, quarter_turns: int) -> np.ndarray:
    """Rotate counter-clockwise by ``quarter_turns`` * 90 degrees (exact)."""
    return np.rot90(piece, quarter_turns % 4, axes=(0, 1))


def hflip(piece: np.ndarray) -> np.ndarray:
    """Mirror left-right: the right edge becomes the left edge."""
    return piece[:, ::-1]


def quantize_8bit(img: np.ndarray) -> np.ndarray:
    """Snap values onto the 8-bit grid k/255 so PNG storage is lossless."""
    return np.rint(np.clip(img, 0.0, 1.0) * 255.0) / 255.0


# --------------------------------------------------------------------------
# images
# --------------------------------------------------------------------------

def load_image(path: str | Path) -> np.ndarray:
    """Read a PNG or JPEG file as an RGB float image in [0, 1]."""
    path = Path(path)
    try:
        with PILImage.open(path) as im:
            fmt = im.format
            if fmt not in ("PNG", "JPEG"):
                raise PuzzleDataError(f"{path}: unsupported image format {fmt!r} (PNG or JPEG expected)")
            rgb = im.convert("RGB")
            data = np.asarray(rgb, dtype=np.uint8)
    except (OSError, UnidentifiedImageError) as exc:
        raise PuzzleDataError(f"cannot read image {path}: {exc}") from exc
    return data.astype(np.float64) / 255.0


def save_image(img: np.ndarray, path: str | Path) -> None:
    data = np.rint(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    PILImage.fromarray(data, mode="RGB").save(path, format="PNG")


def _cubic_kernel(t: np.ndarray, a: float = -0.5) -> np.ndarray:
    t = np.abs(t)
    t2, t3 = t * t, t * t * t
    near = (a + 2) * t3 - (a + 3) * t2 + 1
    far = a * t3 - 5 * a * t2 + 8 * a * t - 4 * a
    return np.where(t <= 1, near, np.where(t < 2, far, 0.0))


def _resample_matrix(n_in: int, n_out: int, factor: int) -> np.ndarray:
    """Rows hold the bicubic taps for each output sample; edges are clamped."""
    mat = np.zeros((n_out, n_in))
    for o in range(n_out):
        center = (o + 0.5) * factor - 0.5
        base = int(np.floor(center))
        for tap in range(base - 1, base + 3):
            w = float(_cubic_kernel(np.array(center - tap)))
            if w != 0.0:
                mat[o, min(max(tap, 0), n_in - 1)] += w
    return mat


def downscale_bicubic(img: np.ndarray, factor: int) -> np.ndarray:
    """Shrink by an integer factor with a Catmull-Rom (a=-0.5) bicubic kernel.

    Output size is ``floor(dim / factor)``; pixel centers are aligned and no
    anti-aliasing widening is applied. Results are clipped to [0, 1].
    """
    if factor < 1:
        raise ValueError(f"downscale factor must be >= 1, got {factor}")
    if factor == 1:
        return img.copy()
    h, w = img.shape[:2]
    if h // factor == 0 or w // factor == 0:
        raise ValueError(f"image {h}x{w} too small for factor {factor}")
    wy = _resample_matrix(h, h // factor, factor)
    wx = _resample_matrix(w, w // factor, factor)
    out = np.einsum("pw,owc->opc", wx, np.einsum("oh,hwc->owc", wy, img))
    return np.clip(out, 0.0, 1.0)


# --------------------------------------------------------------------------
# cutting and erosion
# --------------------------------------------------------------------------

def cut_puzzle(img: np.ndarray, piece_size: int,
               max_pieces: int | None = None) -> tuple[np.ndarray, tuple[int, int]]:
    """Cut into square pieces, row-major in ground-truth order.

    Returns ``(pieces, (rows, cols))`` with ``pieces`` shaped (N, S, S, C).
    The grid is anchored top-left and leftover border pixels are dropped.
    With ``max_pieces`` the grid is shrunk (larger side first) and
    center-cropped until ``rows * cols <= max_pieces``.
    """
    s = piece_size
    h, w = img.shape[:2]
    rows, cols = h // s, w // s
    if rows == 0 or cols == 0:
        raise PuzzleDataError(f"image {h}x{w} is smaller than one {s}x{s} piece")
    r0 = c0 = 0
    if max_pieces is not None:
        if max_pieces < 1:
            raise ValueError("max_pieces must be positive")
        keep_r, keep_c = rows, cols
        while keep_r * keep_c > max_pieces:
            if keep_c >= keep_r:
                keep_c -= 1
            else:
                keep_r -= 1
        r0, c0 = (rows - keep_r) // 2, (cols - keep_c) // 2
        rows, cols = keep_r, keep_c
    crop = img[r0 * s:(r0 + rows) * s, c0 * s:(c0 + cols) * s]
    channels = crop.shape[2]
    pieces = (crop.reshape(rows, s, cols, s, channels)
              .transpose(0, 2, 1, 3, 4)
              .reshape(rows * cols, s, s, channels))
    return np.ascontiguousarray(pieces), (rows, cols)


def assemble(pieces: np.ndarray, rows: int, cols: int) -> np.ndarray:
    """Inverse of :func:`cut_puzzle` for pieces in ground-truth order."""
    n, s, _, c = pieces.shape
    if n != rows * cols:
        raise ValueError(f"{n} pieces cannot fill a {rows}x{cols} grid")
    return pieces.reshape(rows, cols, s, s, c).transpose(0, 2, 1, 3, 4).reshape(rows * s, cols * s, c)


def erode_piece(piece: np.ndarray, width: int) -> np.ndarray:
    """Zero the outer ``width``-pixel frame; works on one piece or a stack."""
    s = piece.shape[-2]
    if width < 0 or 2 * width >= s:
        raise ValueError(f"erosion width {width} invalid for piece size {s}")
    out = piece.copy()
    if width == 0:
        return out
    out[..., :width, :, :] = 0.0
    out[..., s - width:, :, :] = 0.0
    out[..., :, :width, :] = 0.0
    out[..., :, s - width:, :] = 0.0
    return out


# --------------------------------------------------------------------------
# bundles
# --------------------------------------------------------------------------

@dataclass(eq=False)
class PuzzleBundle:
    """A scrambled puzzle together with its ground truth.

    ``pieces[s]`` is the ground-truth piece at grid cell ``permutation[s]``
    (row-major index) rotated counter-clockwise by ``rotations[s]`` degrees.
    """

    rows: int
    cols: int
    piece_size: int
    erosion_width: int
    pieces: np.ndarray
    permutation: np.ndarray
    rotations: np.ndarray
    problem_type: ProblemType
    source_id: str = ""

    def __post_init__(self):
        self.problem_type = ProblemType.parse(self.problem_type)
        self.permutation = np.asarray(self.permutation, dtype=np.int64)
        self.rotations = np.asarray(self.rotations, dtype=np.int64)
        n = self.rows * self.cols
        if self.pieces.shape[0] != n:
            raise PuzzleDataError(f"bundle holds {self.pieces.shape[0]} pieces, grid needs {n}")
        if sorted(self.permutation.tolist()) != list(range(n)):
            raise PuzzleDataError("permutation is not a bijection over the grid cells")
        if len(self.rotations) != n or np.any(self.rotations % 90) or np.any(self.rotations < 0) \
                or np.any(self.rotations >= 360):
            raise PuzzleDataError("rotations must be one of 0/90/180/270 per piece")
        if self.problem_type is ProblemType.TYPE1 and np.any(self.rotations):
            raise PuzzleDataError("type1 bundles cannot carry rotated pieces")

    @property
    def n(self) -> int:
        return self.rows * self.cols

    @property
    def quarter_turns(self) -> np.ndarray:
        return self.rotations // 90

    def cell_of(self) -> np.ndarray:
        """(N, 2) array: ground-truth (row, col) of each scrambled piece."""
        return np.stack(np.divmod(self.permutation, self.cols), axis=1)

    def gt_neighbors(self) -> np.ndarray:
        """(N, 4) array of the scrambled index adjacent in each gt direction, or -1."""
        at_cell = np.empty(self.n, dtype=np.int64)
        at_cell[self.permutation] = np.arange(self.n)
        grid = at_cell.reshape(self.rows, self.cols)
        out = np.full((self.n, 4), -1, dtype=np.int64)
        for s, (r, c) in enumerate(self.cell_of()):
            for k, (dr, dc) in enumerate(DIRECTIONS):
                rr, cc = r + dr, c + dc
                if 0 <= rr < self.rows and 0 <= cc < self.cols:
                    out[s, k] = grid[rr, cc]
        return out

    def __eq__(self, other):
        if not isinstance(other, PuzzleBundle):
            return NotImplemented
        return (self.rows == other.rows and self.cols == other.cols
                and self.piece_size == other.piece_size
                and self.erosion_width == other.erosion_width
                and self.problem_type == other.problem_type
                and self.source_id == other.source_id
                and np.array_equal(self.permutation, other.permutation)
                and np.array_equal(self.rotations, other.rotations)
                and self.pieces.shape == other.pieces.shape
                and np.array_equal(self.pieces, other.pieces))


def scramble(pieces: np.ndarray, dims: tuple[int, int], problem_type: ProblemType | str,
             seed: int, *, erosion_width: int = 0, source_id: str = "") -> PuzzleBundle:
    """Shuffle ground-truth-ordered pieces (and rotate them for type2)."""
    problem_type = ProblemType.parse(problem_type)
    rows, cols = dims
    n = rows * cols
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    if problem_type is ProblemType.TYPE2:
        turns = rng.integers(0, 4, size=n)
    else:
        turns = np.zeros(n, dtype=np.int64)
    scrambled = np.stack([rotate(pieces[perm[s]], turns[s]) for s in range(n)])
    return PuzzleBundle(rows=rows, cols=cols, piece_size=pieces.shape[1], erosion_width=erosion_width,
                        pieces=np.ascontiguousarray(scrambled), permutation=perm, rotations=turns * 90,
                        problem_type=problem_type, source_id=source_id)


def unscramble(bundle: PuzzleBundle) -> np.ndarray:
    """Ground-truth-ordered, un-rotated pieces recovered from a bundle."""
    out = np.empty_like(bundle.pieces)
    for s in range(bundle.n):
        out[bundle.permutation[s]] = rotate(bundle.pieces[s], -bundle.quarter_turns[s])
    return out


def make_bundle(img: np.ndarray, piece_size: int, problem_type: ProblemType | str, seed: int, *,
                erosion_width: int = 0, max_pieces: int | None = None,
                source_id: str = "") -> PuzzleBundle:
    """Cut, erode and scramble in one step."""
    pieces, dims = cut_puzzle(img, piece_size, max_pieces)
    pieces = erode_piece(pieces, erosion_width)
    return scramble(pieces, dims, problem_type, seed, erosion_width=erosion_width, source_id=source_id)


def save_bundle(bundle: PuzzleBundle, directory: str | Path) -> None:
    directory = Path(directory)
    (directory / "pieces").mkdir(parents=True, exist_ok=True)
    manifest = {
        "format_version": FORMAT_VERSION,
        "rows": bundle.rows,
        "cols": bundle.cols,
        "piece_size": bundle.piece_size,
        "erosion_width": bundle.erosion_width,
        "problem_type": bundle.problem_type.value,
        "permutation": bundle.permutation.tolist(),
        "rotations": bundle.rotations.tolist(),
        "source_id": bundle.source_id,
    }
    for old in (directory / "pieces").glob("*.png"):
        old.unlink()
    for s, piece in enumerate(bundle.pieces):
        save_image(piece, directory / "pieces" / f"{s:05d}.png")
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=1))


def load_bundle(directory: str | Path) -> PuzzleBundle:
    directory = Path(directory)
    path = directory / "manifest.json"
    try:
        manifest = json.loads(path.read_text())
    except FileNotFoundError as exc:
        raise PuzzleDataError(f"{directory}: missing manifest.json") from exc
    except json.JSONDecodeError as exc:
        raise PuzzleDataError(f"{path}: corrupt manifest ({exc})") from exc
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise PuzzleDataError(f"{path}: unsupported bundle version {version!r} (expected {FORMAT_VERSION!r})")
    try:
        rows, cols, s = int(manifest["rows"]), int(manifest["cols"]), int(manifest["piece_size"])
        erosion = int(manifest["erosion_width"])
        perm, rots = manifest["permutation"], manifest["rotations"]
        ptype = manifest["problem_type"]
    except (KeyError, TypeError, ValueError) as exc:
        raise PuzzleDataError(f"{path}: malformed manifest ({exc})") from exc
    n = rows * cols
    files = sorted((directory / "pieces").glob("*.png"))
    if len(files) != n:
        raise PuzzleDataError(f"{directory}: manifest declares {n} pieces but found {len(files)} piece files")
    pieces = np.empty((n, s, s, 3))
    for idx in range(n):
        f = directory / "pieces" / f"{idx:05d}.png"
        if not f.exists():
            raise PuzzleDataError(f"{directory}: missing piece file {f.name}")
        data = load_image(f)
        if data.shape != (s, s, 3):
            raise PuzzleDataError(f"{f}: expected {s}x{s} RGB piece, got {data.shape}")
        pieces[idx] = data
    return PuzzleBundle(rows=rows, cols=cols, piece_size=s, erosion_width=erosion, pieces=pieces,
                        permutation=perm, rotations=rots, problem_type=ptype,
                        source_id=str(manifest.get("source_id", "")))
