"""Triplet sampling, hard-batch-triplet losses and the optimization loop.

Inputs of a triplet are stored as rotated but un-mirrored pieces: the anchor
is posed so that its query edge faces right, the positive and negative so
that the candidate edge faces left. The model decides how the anchor is
turned into a left-role embedding (mirroring for the shared network, the
left tower in twin mode).

Edge identities are global integers ``image_offset + 4 * piece + side`` with
sides numbered 0 = right, 1 = down, 2 = left, 3 = up.
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
import torch

from .embed_net import EmbeddingModel, ModelConfig, PairModel, init_pair_model, init_params, to_tensor
from .errors import EmptyCandidatePool, PuzzleDataError, TrainingDiverged
from .puzzle_io import DIRECTIONS, ProblemType, PuzzleBundle, cut_puzzle, downscale_bicubic, erode_piece, \
    quantize_8bit, rotate

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    margin: float = 1.0
    lam: float = 1.0
    batch_size: int = 1024
    lr: float = 1e-4
    lr_decay: float = 0.9
    patience: int = 5
    iterations_per_epoch: int = 5000
    epochs: int = 30
    intra_fraction: float = 0.5
    hbt_enabled: bool = True
    seed: int = 0
    val_postprocess: str = "symmetric"

    def __post_init__(self):
        if self.hbt_enabled and self.batch_size < 2:
            raise ValueError("hard batch triplets need batch_size >= 2")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if not 0.0 <= self.intra_fraction <= 1.0:
            raise ValueError("intra_fraction must lie in [0, 1]")
        if self.lr < 0:
            raise ValueError("learning rate must be non-negative")

    @property
    def n_intra(self) -> int:
        return int(math.floor(self.intra_fraction * self.batch_size + 0.5))

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown train config fields: {sorted(unknown)}")
        return cls(**data)


# --------------------------------------------------------------------------
# corpus and sampling
# --------------------------------------------------------------------------

@dataclass
class CutImage:
    pieces: np.ndarray  # (n, S, S, C) ground-truth order
    rows: int
    cols: int
    name: str = ""

    def __post_init__(self):
        self.neighbors = np.full((self.rows * self.cols, 4), -1, dtype=np.int64)
        for idx in range(self.rows * self.cols):
            r, c = divmod(idx, self.cols)
            for k, (dr, dc) in enumerate(DIRECTIONS):
                if 0 <= r + dr < self.rows and 0 <= c + dc < self.cols:
                    self.neighbors[idx, k] = (r + dr) * self.cols + c + dc
        self.anchors = [np.flatnonzero(self.neighbors[:, k] >= 0) for k in range(4)]


@dataclass
class Corpus:
    images: list[CutImage]
    offsets: np.ndarray = field(init=False)

    def __post_init__(self):
        if not self.images:
            raise PuzzleDataError("training corpus is empty")
        for im in self.images:
            if im.rows * im.cols < 2:
                raise PuzzleDataError(f"image {im.name or '?'} is too small for any adjacent pair")
        sizes = [4 * len(im.pieces) for im in self.images]
        self.offsets = np.concatenate([[0], np.cumsum(sizes)[:-1]]).astype(np.int64)

    @property
    def n_pieces(self) -> int:
        return sum(len(im.pieces) for im in self.images)


def build_corpus(images: Iterable[np.ndarray], piece_size: int, erosion: int = 1, downscale: int = 1,
                 names: Sequence[str] | None = None) -> Corpus:
    cut = []
    for idx, img in enumerate(images):
        if downscale > 1:
            img = quantize_8bit(downscale_bicubic(img, downscale))
        pieces, (rows, cols) = cut_puzzle(img, piece_size)
        pieces = erode_piece(pieces, erosion).astype(np.float32)
        cut.append(CutImage(pieces, rows, cols, names[idx] if names else str(idx)))
    return Corpus(cut)


@dataclass
class TripletBatch:
    anchor: np.ndarray     # (B, S, S, C), query edge facing right
    positive: np.ndarray   # true neighbor, shared edge facing left
    negative: np.ndarray   # other edge of the anchor's image, facing left
    image_id: np.ndarray
    anchor_edge: np.ndarray
    positive_edge: np.ndarray
    negative_edge: np.ndarray

    def __len__(self) -> int:
        return len(self.anchor)

    def subset(self, idx) -> "TripletBatch":
        idx = np.asarray(idx)
        return TripletBatch(*(getattr(self, f.name)[idx] for f in fields(self)))


def _draw(corpus: Corpus, image_id: int, rng: np.random.Generator):
    im = corpus.images[image_id]
    n = len(im.pieces)
    while True:
        k = int(rng.integers(4))
        if len(im.anchors[k]):
            break
    a = int(rng.choice(im.anchors[k]))
    b = int(im.neighbors[a, k])
    pos_local = 4 * b + (k + 2) % 4
    e = int(rng.integers(4 * n - 1))
    if e >= pos_local:
        e += 1
    c, side = divmod(e, 4)
    off = corpus.offsets[image_id]
    return (rotate(im.pieces[a], k), rotate(im.pieces[b], k), rotate(im.pieces[c], (side + 2) % 4),
            off + 4 * a + k, off + pos_local, off + e)


def sample_triplets(corpus: Corpus, cfg: TrainConfig, rng: np.random.Generator) -> TripletBatch:
    """One batch: ``cfg.n_intra`` triplets from a single image, the rest one per distinct image."""
    n_img = len(corpus.images)
    n_intra = cfg.n_intra
    n_inter = cfg.batch_size - n_intra
    ids = []
    if n_intra:
        ids += [int(rng.integers(n_img))] * n_intra
    if n_inter:
        reps = -(-n_inter // n_img)
        order = np.concatenate([rng.permutation(n_img) for _ in range(reps)])[:n_inter]
        ids += order.tolist()
    draws = [_draw(corpus, i, rng) for i in ids]
    anchor, positive, negative, ae, pe, ne = zip(*draws)
    return TripletBatch(np.stack(anchor), np.stack(positive), np.stack(negative), np.array(ids, dtype=np.int64),
                        np.array(ae, dtype=np.int64), np.array(pe, dtype=np.int64), np.array(ne, dtype=np.int64))


# --------------------------------------------------------------------------
# losses
# --------------------------------------------------------------------------

def distance(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Euclidean distance along the last axis with a zero subgradient at 0; NaN propagates."""
    sq = ((a - b) ** 2).sum(-1)
    pos = sq > 0
    return torch.where(pos, torch.sqrt(torch.where(pos, sq, torch.ones_like(sq))), sq * 0)


def triplet_loss(za: torch.Tensor, zp: torch.Tensor, zn: torch.Tensor, margin: float = 1.0) -> torch.Tensor:
    """Per-sample hinge max(0, D(a,p) - D(a,n) + margin)."""
    return torch.clamp(distance(za, zp) - distance(za, zn) + margin, min=0.0)


def candidate_pool(zp: torch.Tensor, zn: torch.Tensor) -> torch.Tensor:
    """Interleaved candidates [p_0, n_0, p_1, n_1, ...], shape (2B, d)."""
    return torch.stack([zp, zn], dim=1).reshape(-1, zp.shape[-1])


def hbt_select(za: torch.Tensor, zp: torch.Tensor, zn: torch.Tensor, positive_edge: np.ndarray,
               negative_edge: np.ndarray, *, enabled: bool = True, chunk: int = 64) -> np.ndarray:
    """Index into :func:`candidate_pool` of each anchor's hardest admissible negative.

    The pool excludes the anchor's own positive and every candidate carrying
    the anchor's true-neighbor edge identity. Ties go to the lowest batch
    index, a positive before the negative of the same index.
    """
    b = za.shape[0]
    if not enabled:
        return 2 * np.arange(b) + 1
    positive_edge = np.asarray(positive_edge)
    cand_edges = np.stack([positive_edge, np.asarray(negative_edge)], axis=1).reshape(-1)
    blocked = cand_edges[None, :] == positive_edge[:, None]
    blocked[np.arange(b), 2 * np.arange(b)] = True
    with torch.no_grad():
        pool = candidate_pool(zp, zn)
        dist = np.concatenate([distance(za[lo:lo + chunk, None, :], pool[None]).double().numpy()
                               for lo in range(0, b, chunk)])
    dist[blocked] = np.inf
    empty = np.all(blocked, axis=1)
    if empty.any():
        raise EmptyCandidatePool(f"anchors {np.flatnonzero(empty).tolist()} have no admissible negative")
    return np.argmin(dist, axis=1)


def hbt_loss(za: torch.Tensor, zp: torch.Tensor, zn: torch.Tensor, selected: np.ndarray,
             margin: float = 1.0) -> torch.Tensor:
    z_hard = candidate_pool(zp, zn)[torch.from_numpy(np.asarray(selected))]
    return triplet_loss(za, zp, z_hard, margin).mean()


def l2_reg(za: torch.Tensor, zp: torch.Tensor, zn: torch.Tensor) -> torch.Tensor:
    """Root mean square over every component of the anchors, positives and original negatives."""
    ms = (za.pow(2).sum() + zp.pow(2).sum() + zn.pow(2).sum()) / (3 * za.numel())
    return torch.where(ms > 0, torch.sqrt(torch.where(ms > 0, ms, torch.ones_like(ms))), ms * 0)


def total_loss(za: torch.Tensor, zp: torch.Tensor, zn: torch.Tensor, selected: np.ndarray,
               margin: float = 1.0, lam: float = 1.0) -> torch.Tensor:
    return hbt_loss(za, zp, zn, selected, margin) + lam * l2_reg(za, zp, zn)


def embed_batch(model: EmbeddingModel, batch: TripletBatch) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    dtype = next(model.parameters()).dtype
    za = model.encode_left(to_tensor(batch.anchor, dtype))
    zp = model.encode_right(to_tensor(batch.positive, dtype))
    zn = model.encode_right(to_tensor(batch.negative, dtype))
    return za, zp, zn


def batch_loss(model: EmbeddingModel, batch: TripletBatch, cfg: TrainConfig,
               selected: np.ndarray | None = None) -> tuple[torch.Tensor, np.ndarray]:
    """Total loss of a batch and the hardest-negative selection it used."""
    za, zp, zn = embed_batch(model, batch)
    if selected is None:
        selected = hbt_select(za, zp, zn, batch.positive_edge, batch.negative_edge, enabled=cfg.hbt_enabled)
    return total_loss(za, zp, zn, selected, cfg.margin, cfg.lam), selected


def loss_and_grads(model: EmbeddingModel, batch: TripletBatch, cfg: TrainConfig,
                   selected: np.ndarray | None = None) -> tuple[float, dict[str, np.ndarray]]:
    """Loss value and its gradient for every parameter, selection held fixed."""
    model.zero_grad(set_to_none=True)
    loss, _ = batch_loss(model, batch, cfg, selected)
    loss.backward()
    grads = {name: (p.grad.detach().numpy().copy() if p.grad is not None else np.zeros(tuple(p.shape)))
             for name, p in model.named_parameters()}
    return float(loss.detach()), grads


# --------------------------------------------------------------------------
# optimization
# --------------------------------------------------------------------------

@dataclass
class EpochRecord:
    epoch: int
    mean_loss: float
    lr: float
    val_top1_type1: float | None
    val_top1_type2: float | None
    wall_secs: float
    iterations: int
    first_loss: float

    def to_json(self) -> str:
        return json.dumps(asdict(self))


class PlateauDecay:
    """Multiply the LR by ``factor`` after ``patience`` epochs without strict improvement."""

    def __init__(self, optimizer: torch.optim.Optimizer, factor: float, patience: int):
        self.optimizer = optimizer
        self.factor = factor
        self.patience = patience
        self.best = math.inf
        self.bad_epochs = 0

    def step(self, value: float) -> None:
        if value < self.best:
            self.best = value
            self.bad_epochs = 0
            return
        self.bad_epochs += 1
        if self.bad_epochs >= self.patience:
            for group in self.optimizer.param_groups:
                group["lr"] *= self.factor
            self.bad_epochs = 0


def validation_top1(model: EmbeddingModel, bundles: Sequence[PuzzleBundle], postprocess_mode: str = "symmetric"
                    ) -> tuple[float | None, float | None]:
    from .cm_engine import CMBackend, compute_cm, postprocess, top1_accuracy

    per_type: dict[ProblemType, list[float]] = {ProblemType.TYPE1: [], ProblemType.TYPE2: []}
    backend = CMBackend("edge2vec", model)
    for bundle in bundles:
        t = postprocess(compute_cm(bundle, backend), postprocess_mode)
        per_type[bundle.problem_type].append(top1_accuracy(t, bundle))
    avg = {k: (float(np.mean(v)) if v else None) for k, v in per_type.items()}
    return avg[ProblemType.TYPE1], avg[ProblemType.TYPE2]


def train(corpus: Corpus, cfg: TrainConfig, model_cfg: ModelConfig, *,
          val_bundles: Sequence[PuzzleBundle] = (), model: EmbeddingModel | None = None,
          start_epoch: int = 0, log_path: str | Path | None = None, resume_state: dict | None = None,
          on_epoch: Callable[[EpochRecord, EmbeddingModel, dict], None] | None = None
          ) -> tuple[EmbeddingModel, list[EpochRecord]]:
    """Adam on the hard-batch-triplet objective; returns the model and per-epoch records.

    Batches for epoch ``e`` come from a generator seeded with ``(seed, e)``,
    so a run resumed at epoch ``e`` draws exactly what an uninterrupted run
    would have drawn. ``resume_state`` is the dict handed to ``on_epoch``
    (optimizer moments, learning rate and plateau counters).
    """
    import warnings

    from .cm_engine import DegenerateRowWarning

    torch.manual_seed(cfg.seed)
    if model is None:
        model = init_params(model_cfg, cfg.seed)
    model.train()
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr, betas=(0.9, 0.999), eps=1e-8)
    sched = PlateauDecay(opt, cfg.lr_decay, cfg.patience)
    if resume_state:
        opt.load_state_dict(resume_state["optimizer"])
        sched.best = resume_state["plateau_best"]
        sched.bad_epochs = resume_state["plateau_bad_epochs"]
    history = []
    log_file = open(log_path, "a") if log_path else None
    total_iters = start_epoch * cfg.iterations_per_epoch
    try:
        for epoch in range(start_epoch, cfg.epochs):
            rng = np.random.default_rng([cfg.seed, epoch])
            t0 = time.perf_counter()
            losses = []
            for it in range(cfg.iterations_per_epoch):
                batch = sample_triplets(corpus, cfg, rng)
                loss, _ = batch_loss(model, batch, cfg)
                value = float(loss.detach())
                if not math.isfinite(value):
                    raise TrainingDiverged(f"loss became {value} at epoch {epoch}, iteration {it} "
                                           f"(lr={opt.param_groups[0]['lr']:.3g})")
                losses.append(value)
                opt.zero_grad(set_to_none=True)
                loss.backward()
                opt.step()
                total_iters += 1
            mean_loss = float(np.mean(losses)) if losses else float("nan")
            sched.step(mean_loss)
            model.eval()
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", DegenerateRowWarning)
                v1, v2 = validation_top1(model, val_bundles, cfg.val_postprocess)
            model.train()
            rec = EpochRecord(epoch=epoch, mean_loss=mean_loss, lr=opt.param_groups[0]["lr"],
                              val_top1_type1=v1, val_top1_type2=v2, wall_secs=time.perf_counter() - t0,
                              iterations=total_iters, first_loss=losses[0] if losses else float("nan"))
            history.append(rec)
            log.info("epoch %d loss %.4f lr %.3g top1 %s/%s (%.1fs)", epoch, mean_loss, rec.lr, v1, v2,
                     rec.wall_secs)
            if log_file:
                log_file.write(rec.to_json() + "\n")
                log_file.flush()
            if on_epoch:
                on_epoch(rec, model, {"optimizer": opt.state_dict(), "plateau_best": sched.best,
                                      "plateau_bad_epochs": sched.bad_epochs})
    finally:
        if log_file:
            log_file.close()
    model.eval()
    return model, history


def read_log(path: str | Path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]


# --------------------------------------------------------------------------
# pair-input proxy
# --------------------------------------------------------------------------

def train_pair_model(corpus: Corpus, cfg: TrainConfig, model_cfg: ModelConfig, *,
                     model: PairModel | None = None) -> tuple[PairModel, list[float]]:
    """Binary adjacent / not-adjacent training of the pair-input scorer.

    Each triplet yields one positive pair (anchor, positive) and one negative
    pair (anchor, negative); the loss is the mean logistic loss.
    """
    torch.manual_seed(cfg.seed)
    if model is None:
        model = init_pair_model(model_cfg, cfg.seed)
    model.train()
    dtype = next(model.parameters()).dtype
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr, betas=(0.9, 0.999), eps=1e-8)
    sched = PlateauDecay(opt, cfg.lr_decay, cfg.patience)
    epoch_losses = []
    for epoch in range(cfg.epochs):
        rng = np.random.default_rng([cfg.seed, epoch])
        losses = []
        for _ in range(cfg.iterations_per_epoch):
            batch = sample_triplets(corpus, cfg, rng)
            a = to_tensor(batch.anchor, dtype)
            pos = torch.cat([a, to_tensor(batch.positive, dtype)], dim=-1)
            neg = torch.cat([a, to_tensor(batch.negative, dtype)], dim=-1)
            logits = model(torch.cat([pos, neg]))
            target = torch.cat([torch.ones(len(batch), dtype=dtype), torch.zeros(len(batch), dtype=dtype)])
            loss = torch.nn.functional.binary_cross_entropy_with_logits(logits, target)
            if not torch.isfinite(loss):
                raise TrainingDiverged(f"pair-model loss became {float(loss)} at epoch {epoch}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            losses.append(float(loss.detach()))
        epoch_losses.append(float(np.mean(losses)))
        sched.step(epoch_losses[-1])
    model.eval()
    return model, epoch_losses
