"""Edge embedding network, pair-input proxy network, cost accounting, checkpoints.

The embedding tower is conv(3x3, pad 1) x4 with ReLU after each, 2x2 max
pooling after the second and third convolutions, and a grouped linear
projection without a trailing nonlinearity. A piece is embedded "with
respect to its left edge"; the left-of-pair role is served by the same tower
on the mirrored piece, unless ``twin_mode`` supplies a separate left tower.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from .errors import PuzzleDataError
from .puzzle_io import hflip, rotate

CHECKPOINT_VERSION = "e2v1"


@dataclass(frozen=True)
class ModelConfig:
    piece_size: int = 28
    channels_in: int = 3
    conv_channels: tuple[int, int, int, int] = (64, 128, 256, 512)
    embedding_dim: int = 320
    groups: int = 8
    twin_mode: bool = False

    def __post_init__(self):
        object.__setattr__(self, "conv_channels", tuple(int(c) for c in self.conv_channels))
        if len(self.conv_channels) != 4 or min(self.conv_channels) < 1:
            raise ValueError(f"conv_channels must be four positive ints, got {self.conv_channels}")
        if self.piece_size < 4 or self.piece_size % 4:
            raise ValueError(f"piece_size must be a positive multiple of 4, got {self.piece_size}")
        if self.groups < 1 or self.embedding_dim % self.groups or self.out_channels % self.groups:
            raise ValueError(f"groups={self.groups} must divide embedding_dim={self.embedding_dim} "
                             f"and the last conv width {self.out_channels}")

    @property
    def out_channels(self) -> int:
        return self.conv_channels[-1]

    @property
    def out_size(self) -> int:
        return self.piece_size // 4

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown model config fields: {sorted(unknown)}")
        return cls(**data)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["conv_channels"] = list(self.conv_channels)
        return d


# --------------------------------------------------------------------------
# modules
# --------------------------------------------------------------------------

class GroupedLinear(nn.Module):
    """G independent linear maps, one per contiguous channel block."""

    def __init__(self, in_channels: int, spatial: int, out_features: int, groups: int):
        super().__init__()
        self.groups = groups
        self.in_per_group = in_channels // groups * spatial
        self.weight = nn.Parameter(torch.empty(groups, out_features // groups, self.in_per_group))
        self.bias = nn.Parameter(torch.zeros(out_features))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        blocks = x.reshape(x.shape[0], self.groups, self.in_per_group)
        z = torch.einsum("bgi,goi->bgo", blocks, self.weight)
        return z.reshape(x.shape[0], -1) + self.bias


class _Backbone(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        c1, c2, c3, c4 = cfg.conv_channels
        self.conv1 = nn.Conv2d(cfg.channels_in, c1, 3, padding=1)
        self.conv2 = nn.Conv2d(c1, c2, 3, padding=1)
        self.conv3 = nn.Conv2d(c2, c3, 3, padding=1)
        self.conv4 = nn.Conv2d(c3, c4, 3, padding=1)

    def features(self, x: torch.Tensor, hidden: list | None = None) -> torch.Tensor:
        h = F.relu(self.conv1(x))
        if hidden is not None:
            hidden.append(h)
        h = F.relu(self.conv2(h))
        if hidden is not None:
            hidden.append(h)
        h = F.relu(self.conv3(F.max_pool2d(h, 2)))
        if hidden is not None:
            hidden.append(h)
        h = F.relu(self.conv4(F.max_pool2d(h, 2)))
        if hidden is not None:
            hidden.append(h)
        return h


class Tower(_Backbone):
    """One embedding network: (B, C, S, S) -> (B, d)."""

    def __init__(self, cfg: ModelConfig):
        super().__init__(cfg)
        self.proj = GroupedLinear(cfg.out_channels, cfg.out_size ** 2, cfg.embedding_dim, cfg.groups)

    def forward(self, x: torch.Tensor, hidden: list | None = None) -> torch.Tensor:
        return self.proj(self.features(x, hidden))


class EmbeddingModel(nn.Module):
    """Single shared tower (flip convention) or left/right twins.

    ``passes`` counts every piece image pushed through a tower.
    """

    kind = "edge2vec"

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.right = Tower(cfg)
        self.left = Tower(cfg) if cfg.twin_mode else None
        self.passes = 0

    def forward(self, x: torch.Tensor, hidden: list | None = None) -> torch.Tensor:
        """Right-of-pair role: the piece described with respect to its left edge."""
        self.passes += x.shape[0]
        return self.right(x, hidden)

    def encode_right(self, x: torch.Tensor) -> torch.Tensor:
        return self(x)

    def encode_left(self, x: torch.Tensor) -> torch.Tensor:
        """Left-of-pair role: the piece described with respect to its right edge."""
        if self.left is not None:
            self.passes += x.shape[0]
            return self.left(x)
        return self(torch.flip(x, dims=(-1,)))


class PairModel(_Backbone):
    """Pair-input scorer on the (C, S, 2S) concatenation; output is an adjacency logit."""

    kind = "e2e_proxy"

    def __init__(self, cfg: ModelConfig):
        super().__init__(cfg)
        self.cfg = cfg
        self.head = nn.Linear(cfg.out_channels * cfg.out_size * 2 * cfg.out_size, 1)
        self.passes = 0

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        self.passes += x.shape[0]
        return self.head(self.features(x).flatten(1)).squeeze(1)


# --------------------------------------------------------------------------
# construction and inference helpers
# --------------------------------------------------------------------------

def _he_uniform_(module: nn.Module, gen: torch.Generator) -> None:
    for name, p in module.named_parameters():
        if name.endswith("bias"):
            nn.init.zeros_(p)
            continue
        fan_in = p.shape[-1] if p.dim() != 4 else p.shape[1] * p.shape[2] * p.shape[3]
        bound = math.sqrt(6.0 / fan_in)
        with torch.no_grad():
            p.copy_(torch.rand(p.shape, generator=gen, dtype=torch.float64).mul_(2 * bound).sub_(bound))


def init_params(cfg: ModelConfig, seed: int) -> EmbeddingModel:
    """Fresh embedding model with He fan-in uniform weights and zero biases."""
    model = EmbeddingModel(cfg)
    _he_uniform_(model, torch.Generator().manual_seed(seed))
    return model


def init_pair_model(cfg: ModelConfig, seed: int) -> PairModel:
    model = PairModel(cfg)
    _he_uniform_(model, torch.Generator().manual_seed(seed))
    return model


def to_tensor(pieces: np.ndarray, dtype=torch.float32) -> torch.Tensor:
    """(B, S, S, C) array -> (B, C, S, S) tensor."""
    return torch.from_numpy(np.ascontiguousarray(np.asarray(pieces).transpose(0, 3, 1, 2))).to(dtype)


def _param_dtype(model: nn.Module) -> torch.dtype:
    return next(model.parameters()).dtype


def forward(model: EmbeddingModel, pieces: np.ndarray, *, batch_size: int = 512) -> np.ndarray:
    """Embed a stack of pieces in the right-of-pair role; returns (B, d)."""
    dtype = _param_dtype(model)
    out = []
    with torch.inference_mode():
        for lo in range(0, len(pieces), batch_size):
            out.append(model(to_tensor(pieces[lo:lo + batch_size], dtype)).numpy())
    return np.concatenate(out) if out else np.empty((0, model.cfg.embedding_dim))


@dataclass
class EdgeEmbeddingSet:
    """Per piece and rotation: right-role and left-role embeddings, each (N, 4, d)."""

    right: np.ndarray
    left: np.ndarray

    @property
    def n(self) -> int:
        return self.right.shape[0]


def embed_edges(model: EmbeddingModel, pieces: np.ndarray, *, batch_size: int = 512) -> EdgeEmbeddingSet:
    """Eight embeddings per piece: four rotations x two roles (exactly 8N passes)."""
    n = len(pieces)
    d = model.cfg.embedding_dim
    rotated = np.stack([rotate(p, r) for p in pieces for r in range(4)])  # (4N, S, S, C)
    right = forward(model, rotated, batch_size=batch_size)
    if model.left is None:
        left = forward(model, rotated[:, :, ::-1], batch_size=batch_size)
    else:
        dtype = _param_dtype(model)
        parts = []
        with torch.inference_mode():
            for lo in range(0, len(rotated), batch_size):
                parts.append(model.encode_left(to_tensor(rotated[lo:lo + batch_size], dtype)).numpy())
        left = np.concatenate(parts) if parts else np.empty((0, d))
    return EdgeEmbeddingSet(right=right.reshape(n, 4, d), left=left.reshape(n, 4, d))


def left_role_by_flip(model: EmbeddingModel, piece: np.ndarray, rotation: int) -> np.ndarray:
    """Reference path: the left-role vector as ``forward(hflip(rot(piece)))``."""
    return forward(model, hflip(rotate(piece, rotation))[None])[0]


# --------------------------------------------------------------------------
# accounting
# --------------------------------------------------------------------------

def _conv_params(cfg: ModelConfig) -> int:
    widths = (cfg.channels_in,) + cfg.conv_channels
    return sum(cin * cout * 9 + cout for cin, cout in zip(widths[:-1], widths[1:]))


def _conv_macs(cfg: ModelConfig, width_factor: int = 1) -> int:
    """Convolution MACs for one input of S x (width_factor * S)."""
    s = cfg.piece_size
    widths = (cfg.channels_in,) + cfg.conv_channels
    spatial = [s * s, s * s, (s // 2) ** 2, (s // 4) ** 2]
    return sum(width_factor * hw * cout * cin * 9
               for hw, cin, cout in zip(spatial, widths[:-1], widths[1:]))


def projection_params(cfg: ModelConfig) -> int:
    return cfg.out_channels * cfg.out_size ** 2 * cfg.embedding_dim // cfg.groups + cfg.embedding_dim


def count_params(cfg: ModelConfig) -> int:
    towers = 2 if cfg.twin_mode else 1
    return towers * (_conv_params(cfg) + projection_params(cfg))


def count_params_e2e(cfg: ModelConfig) -> int:
    return _conv_params(cfg) + cfg.out_channels * cfg.out_size * 2 * cfg.out_size + 1


@dataclass(frozen=True)
class MacCounts:
    """Multiply-accumulates; biases and pooling comparisons are not counted."""

    per_embedding: int
    per_pair: int
    mode: str  # "embedding" or "e2e"

    def per_puzzle(self, n: int) -> int:
        if self.mode == "embedding":
            return 8 * n * self.per_embedding
        return 16 * n * n * self.per_pair


def count_macs(cfg: ModelConfig) -> MacCounts:
    per_embedding = _conv_macs(cfg) + cfg.out_channels * cfg.out_size ** 2 * cfg.embedding_dim // cfg.groups
    return MacCounts(per_embedding=per_embedding, per_pair=2 * per_embedding, mode="embedding")


def count_macs_e2e(cfg: ModelConfig) -> MacCounts:
    per_pair = _conv_macs(cfg, width_factor=2) + cfg.out_channels * cfg.out_size * 2 * cfg.out_size
    return MacCounts(per_embedding=0, per_pair=per_pair, mode="e2e")


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------

def save_checkpoint(model: EmbeddingModel | PairModel, directory: str | Path, **extra) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = []
    blobs = []
    for name, tensor in model.state_dict().items():
        manifest.append([name, list(tensor.shape)])
        blobs.append(tensor.detach().cpu().numpy().astype("<f4").ravel())
    meta = {"format_version": CHECKPOINT_VERSION, "kind": model.kind, **model.cfg.to_dict(),
            "parameter_manifest": manifest, **extra}
    (directory / "meta.json").write_text(json.dumps(meta, indent=1))
    data = np.concatenate(blobs) if blobs else np.empty(0, dtype="<f4")
    (directory / "weights.bin").write_bytes(data.tobytes())


def read_checkpoint_meta(directory: str | Path) -> dict:
    path = Path(directory) / "meta.json"
    try:
        meta = json.loads(path.read_text())
    except FileNotFoundError as exc:
        raise PuzzleDataError(f"{directory}: missing meta.json") from exc
    except json.JSONDecodeError as exc:
        raise PuzzleDataError(f"{path}: corrupt checkpoint metadata ({exc})") from exc
    if meta.get("format_version") != CHECKPOINT_VERSION:
        raise PuzzleDataError(f"{path}: unsupported checkpoint version {meta.get('format_version')!r}")
    return meta


def load_checkpoint(directory: str | Path) -> EmbeddingModel | PairModel:
    directory = Path(directory)
    meta = read_checkpoint_meta(directory)
    cfg = ModelConfig.from_dict({f.name: meta[f.name] for f in fields(ModelConfig) if f.name in meta})
    kind = meta.get("kind", "edge2vec")
    model = PairModel(cfg) if kind == "e2e_proxy" else EmbeddingModel(cfg)
    raw = np.frombuffer((directory / "weights.bin").read_bytes(), dtype="<f4")
    state = model.state_dict()
    names = [n for n, _ in meta["parameter_manifest"]]
    if names != list(state):
        raise PuzzleDataError(f"{directory}: parameter manifest does not match a {kind} model")
    expected = sum(int(np.prod(shape)) for _, shape in meta["parameter_manifest"])
    if raw.size != expected:
        raise PuzzleDataError(f"{directory}: weights.bin holds {raw.size} values, manifest needs {expected}")
    offset = 0
    new_state = {}
    for name, shape in meta["parameter_manifest"]:
        size = int(np.prod(shape))
        if list(state[name].shape) != list(shape):
            raise PuzzleDataError(f"{directory}: tensor {name} has shape {shape}, model expects "
                                  f"{list(state[name].shape)}")
        new_state[name] = torch.from_numpy(raw[offset:offset + size].reshape(shape).astype(np.float32))
        offset += size
    model.load_state_dict(new_state)
    return model
