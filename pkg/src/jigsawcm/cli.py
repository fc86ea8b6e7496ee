"""Command-line entry point: ``jigsawcm <command> ...``.

Results are printed as tab-separated ``key<TAB>value`` lines or TSV tables
so they can be piped into other tools; figures go to PNG files.
Exit codes: 0 success, 2 usage error, 3 data error, 4 numerical error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import warnings
from dataclasses import asdict, fields
from pathlib import Path

import torch

from . import bench as bench_mod
from . import samples
from .cm_engine import (BACKENDS, POSTPROCESS_MODES, CMBackend, DegenerateRowWarning, compute_cm,
                        export_distance_map, gallagher_rescale, load_cm, mask_and_remeasure,
                        mirror_identity_holds, postprocess, save_cm, top1_accuracy)
from .embed_net import EmbeddingModel, ModelConfig, embed_edges, init_params, load_checkpoint, \
    read_checkpoint_meta, save_checkpoint
from .errors import NumericalError, PuzzleDataError
from .puzzle_io import ProblemType, downscale_bicubic, load_bundle, load_image, make_bundle, quantize_8bit, \
    save_bundle
from .reconstructor import greedy_solve, neighbor_accuracy, perfect_reconstruction, save_board, save_placement
from .trainer import TrainConfig, build_corpus, read_log, train

log = logging.getLogger("jigsawcm")

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")
DATA_KEYS = {"erosion": 1, "downscale": 1, "val_pieces": 100}
SOLVERS = ("greedy",)


class UsageError(Exception):
    """Bad flag combination or config contents (exit code 2)."""


def _emit(key: str, value) -> None:
    print(f"{key}\t{value}")


def _table(rows: list[dict]) -> None:
    if not rows:
        return
    keys = list(rows[0])
    print("\t".join(keys))
    for r in rows:
        print("\t".join(f"{r[k]:.6g}" if isinstance(r[k], float) else str(r[k]) for k in keys))


def _image_files(directory: str | Path) -> list[Path]:
    directory = Path(directory)
    if not directory.is_dir():
        raise PuzzleDataError(f"{directory} is not a directory")
    files = sorted(p for p in directory.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    if not files:
        raise PuzzleDataError(f"no PNG or JPEG images in {directory}")
    return files


# --------------------------------------------------------------------------
# configuration
# --------------------------------------------------------------------------

def load_config(path: str | Path | None, overrides: dict, base: dict | None = None
                ) -> tuple[TrainConfig, ModelConfig, dict]:
    """Merge ``base``, a flat JSON config and CLI overrides (later wins) and split them by owner."""
    data: dict = dict(base or {})
    if path:
        try:
            loaded = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(loaded, dict):
            raise UsageError(f"config {path} must hold a JSON object")
        data.update(loaded)
    data.update({k: v for k, v in overrides.items() if v is not None})
    train_keys = {f.name for f in fields(TrainConfig)}
    model_keys = {f.name for f in fields(ModelConfig)}
    unknown = set(data) - train_keys - model_keys - set(DATA_KEYS)
    if unknown:
        raise UsageError(f"unknown config keys: {sorted(unknown)}")
    try:
        tcfg = TrainConfig(**{k: v for k, v in data.items() if k in train_keys})
        mcfg = ModelConfig(**{k: v for k, v in data.items() if k in model_keys})
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid config: {exc}") from exc
    extra = {k: data.get(k, v) for k, v in DATA_KEYS.items()}
    return tcfg, mcfg, extra


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

def cmd_cut(args) -> int:
    files = _image_files(args.input)
    out = Path(args.out)
    rows = []
    for path in files:
        img = load_image(path)
        if args.downscale > 1:
            img = quantize_8bit(downscale_bicubic(img, args.downscale))
        bundle = make_bundle(img, args.piece_size, args.type, args.seed, erosion_width=args.erosion,
                             max_pieces=args.max_pieces, source_id=path.name)
        save_bundle(bundle, out / path.stem)
        rows.append({"bundle": path.stem, "rows": bundle.rows, "cols": bundle.cols, "N": bundle.n})
    _table(rows)
    return 0


def _validation_bundles(val_dir, mcfg: ModelConfig, extra: dict, seed: int) -> list:
    if not val_dir:
        return []
    bundles = []
    for path in _image_files(val_dir):
        img = load_image(path)
        if extra["downscale"] > 1:
            img = quantize_8bit(downscale_bicubic(img, extra["downscale"]))
        for ptype in ProblemType:
            bundles.append(make_bundle(img, mcfg.piece_size, ptype, seed, erosion_width=extra["erosion"],
                                       max_pieces=extra["val_pieces"], source_id=path.name))
    return bundles


def cmd_train(args) -> int:
    overrides = {"epochs": args.epochs, "lr": args.lr, "batch_size": args.batch_size,
                 "iterations_per_epoch": args.iterations, "seed": args.seed, "lam": args.lam,
                 "erosion": args.erosion, "downscale": args.downscale}
    start_epoch, model, resume_state = 0, None, None
    out = Path(args.out)
    if args.resume:
        meta = read_checkpoint_meta(args.resume)
        base = dict(meta.get("train_config", {}))
        base.update({k: meta[k] for k in DATA_KEYS if k in meta})
        base.update({f.name: meta[f.name] for f in fields(ModelConfig) if f.name in meta})
        tcfg, mcfg, extra = load_config(args.config, overrides, base)
        model = load_checkpoint(args.resume)
        if not isinstance(model, EmbeddingModel):
            raise UsageError("resume checkpoint is not an embedding model")
        start_epoch = int(meta.get("next_epoch", 0))
        state_path = Path(args.resume) / "train_state.pt"
        if state_path.exists():
            resume_state = torch.load(state_path, weights_only=False)
    else:
        tcfg, mcfg, extra = load_config(args.config, overrides)
    files = _image_files(args.corpus)
    images = [load_image(p) for p in files]
    corpus = build_corpus(images, mcfg.piece_size, extra["erosion"], extra["downscale"],
                          names=[p.name for p in files])
    val = _validation_bundles(args.val, mcfg, extra, tcfg.seed)
    _emit("corpus_images", len(corpus.images))
    _emit("corpus_pieces", corpus.n_pieces)
    out.mkdir(parents=True, exist_ok=True)
    log_path = out / "train_log.jsonl"
    if start_epoch == 0 and log_path.exists():
        log_path.unlink()

    def checkpoint(rec, mdl, state) -> None:
        save_checkpoint(mdl, out, next_epoch=rec.epoch + 1, train_config=asdict(tcfg), **extra)
        torch.save(state, out / "train_state.pt")

    if start_epoch >= tcfg.epochs or tcfg.epochs == 0:
        # nothing to run; still materialize the (initial or resumed) weights
        model = model or init_params(mcfg, tcfg.seed)
        save_checkpoint(model, out, next_epoch=start_epoch, train_config=asdict(tcfg), **extra)
    model, history = train(corpus, tcfg, mcfg, val_bundles=val, model=model, start_epoch=start_epoch,
                           log_path=log_path, resume_state=resume_state, on_epoch=checkpoint)
    _table([{"epoch": r.epoch, "mean_loss": r.mean_loss, "lr": r.lr,
             "val_top1_type1": r.val_top1_type1 if r.val_top1_type1 is not None else "",
             "val_top1_type2": r.val_top1_type2 if r.val_top1_type2 is not None else ""} for r in history])
    if log_path.exists() and log_path.stat().st_size:
        from .plotting import plot_training
        plot_training(read_log(log_path), out / "training.png")
    return 0


def _load_backend(name: str, checkpoint: str | None) -> CMBackend:
    if name in ("edge2vec", "e2e_proxy"):
        if not checkpoint:
            raise UsageError(f"backend {name} needs --checkpoint")
        model = load_checkpoint(checkpoint)
        if model.kind != name:
            raise UsageError(f"checkpoint holds a {model.kind} model, not {name}")
        return CMBackend(name, model)
    return CMBackend(name)


def cmd_cm(args) -> int:
    bundle = load_bundle(args.bundle)
    backend = _load_backend(args.backend, args.checkpoint)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", DegenerateRowWarning)
        t = postprocess(compute_cm(bundle, backend, workers=args.workers), args.postprocess)
    for w in caught:
        log.warning("%s", w.message)
    save_cm(t, args.out)
    _emit("backend", args.backend)
    _emit("N", bundle.n)
    _emit("problem_type", bundle.problem_type.value)
    _emit("postprocess", args.postprocess)
    if backend.model is not None:
        _emit("forward_passes", backend.model.passes)
    _emit("mirror_identity", mirror_identity_holds(t))
    _emit("top1", f"{top1_accuracy(t, bundle):.6f}")
    if args.heatmap:
        export_distance_map(t, bundle, args.heatmap)
        _emit("heatmap", args.heatmap)
    return 0


def cmd_solve(args) -> int:
    bundle = load_bundle(args.bundle)
    t = load_cm(args.cm)
    if t.n != bundle.n:
        raise PuzzleDataError(f"CM holds {t.n} pieces but bundle has {bundle.n}")
    if t.problem_type is not bundle.problem_type:
        raise PuzzleDataError(f"CM is {t.problem_type.value} but bundle is {bundle.problem_type.value}")
    if not args.no_rescale:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", DegenerateRowWarning)
            t = gallagher_rescale(t)
    pl = greedy_solve(t, (bundle.rows, bundle.cols), bundle.problem_type, seed=args.seed)
    save_placement(pl, args.out)
    _emit("solver", args.solver)
    _emit("neighbor_accuracy", f"{neighbor_accuracy(pl, bundle):.6f}")
    _emit("perfect", perfect_reconstruction(pl, bundle))
    if args.render:
        save_board(pl, bundle.pieces, args.render)
        _emit("render", args.render)
    return 0


def _channels(text: str | None):
    if text is None:
        return None
    try:
        vals = tuple(int(v) for v in text.split(","))
    except ValueError as exc:
        raise UsageError(f"bad channel list {text!r}") from exc
    return vals


def cmd_bench(args) -> int:
    try:
        sizes = [int(s) for s in args.sizes.split(",")]
    except ValueError as exc:
        raise UsageError(f"bad --sizes {args.sizes!r}") from exc
    backends = args.backends.split(",")
    for b in backends:
        if b not in BACKENDS:
            raise UsageError(f"unknown backend {b!r}")
    try:
        emb_cfg = ModelConfig(piece_size=args.piece_size, conv_channels=_channels(args.conv_channels),
                              embedding_dim=args.embedding_dim, groups=args.groups)
        e2e_cfg = ModelConfig(piece_size=args.e2e_piece_size or args.piece_size,
                              conv_channels=_channels(args.e2e_conv_channels or args.conv_channels),
                              embedding_dim=1, groups=1)  # the pair head has no projection
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    rows = []
    for b in backends:
        cfg = e2e_cfg if b == "e2e_proxy" else emb_cfg
        try:
            rows += bench_mod.bench_backend(b, sizes, model_cfg=cfg, repeat=args.repeat, seed=args.seed,
                                            workers=args.workers, problem_type=args.type)
        except ValueError as exc:
            raise UsageError(str(exc)) from exc
    _table([asdict(r) for r in rows])
    for b in backends:
        sub = [r for r in rows if r.backend == b]
        if len(sub) >= 2:
            _emit(f"slope_{b}", f"{bench_mod.loglog_slope(sub):.4f}")
    if args.out:
        bench_mod.write_jsonl(rows, args.out)
    if args.plot:
        from .plotting import plot_scaling
        plot_scaling([asdict(r) for r in rows], args.plot)
    return 0


def cmd_mask(args) -> int:
    bundle = load_bundle(args.bundle)
    model = load_checkpoint(args.checkpoint)
    if not isinstance(model, EmbeddingModel):
        raise UsageError("masking needs an embedding model checkpoint")
    try:
        fractions = [float(f) for f in args.fractions.split(",")]
    except ValueError as exc:
        raise UsageError(f"bad --fractions {args.fractions!r}") from exc
    emb = embed_edges(model, bundle.pieces)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DegenerateRowWarning)
        try:
            rows = mask_and_remeasure(emb, bundle, fractions, args.postprocess)
        except ValueError as exc:
            raise UsageError(str(exc)) from exc
    _table(rows)
    if args.plot:
        from .plotting import plot_masking
        plot_masking({Path(args.checkpoint).name: rows}, args.plot)
    return 0


def cmd_samples(args) -> int:
    paths = samples.export(args.out, args.which)
    _table([{"file": p.name} for p in paths])
    return 0


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="jigsawcm", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    parser.add_argument("--workers", type=int, default=1, help="cap on worker threads")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("cut", help="cut images into scrambled puzzle bundles")
    p.add_argument("--input", required=True, help="directory of PNG/JPEG images")
    p.add_argument("--out", required=True, help="output directory (one bundle per image)")
    p.add_argument("--piece-size", type=int, default=28)
    p.add_argument("--erosion", type=int, default=0)
    p.add_argument("--type", choices=[t.value for t in ProblemType], default="type1")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--downscale", type=int, default=1)
    p.add_argument("--max-pieces", type=int, default=None)
    p.set_defaults(func=cmd_cut)

    p = sub.add_parser("train", help="train an edge embedding model")
    p.add_argument("--corpus", required=True, help="directory of training images")
    p.add_argument("--config", help="JSON file with TrainConfig/ModelConfig fields")
    p.add_argument("--out", required=True, help="checkpoint directory")
    p.add_argument("--val", help="directory of held-out validation images")
    p.add_argument("--resume", help="checkpoint directory to continue from")
    p.add_argument("--epochs", type=int)
    p.add_argument("--iterations", type=int, help="iterations per epoch")
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--lam", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--erosion", type=int)
    p.add_argument("--downscale", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("cm", help="compute a compatibility tensor")
    p.add_argument("--bundle", required=True)
    p.add_argument("--backend", required=True, choices=BACKENDS + ("oracle",))
    p.add_argument("--checkpoint")
    p.add_argument("--postprocess", choices=POSTPROCESS_MODES, default="none")
    p.add_argument("--out", required=True, help="CMT1 output file")
    p.add_argument("--heatmap", help="PNG path for the right-neighbor distance map")
    p.set_defaults(func=cmd_cm)

    p = sub.add_parser("solve", help="reconstruct a puzzle from a CM file")
    p.add_argument("--cm", required=True)
    p.add_argument("--bundle", required=True)
    p.add_argument("--out", required=True, help="placement JSON output")
    p.add_argument("--solver", choices=SOLVERS, default="greedy")
    p.add_argument("--no-rescale", action="store_true", help="skip second-best rescaling")
    p.add_argument("--render", help="PNG path for the assembled board")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("bench", help="wall-clock and analytic cost per backend and size")
    p.add_argument("--sizes", default="100,200,400")
    p.add_argument("--backends", default="edge2vec,e2e_proxy")
    p.add_argument("--repeat", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--piece-size", type=int, default=28)
    p.add_argument("--conv-channels", default="64,128,256,512")
    p.add_argument("--embedding-dim", type=int, default=320)
    p.add_argument("--groups", type=int, default=16)
    p.add_argument("--type", choices=["type1", "type2"], default="type2")
    p.add_argument("--e2e-piece-size", type=int, help="piece size for the pair-input proxy")
    p.add_argument("--e2e-conv-channels", help="conv widths for the pair-input proxy")
    p.add_argument("--out", help="JSON-lines report path")
    p.add_argument("--plot", help="PNG path for the log-log scaling plot")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("mask", help="Top-1 retention under embedding masking")
    p.add_argument("--bundle", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--fractions", default="0,0.05,0.1,0.2,0.3")
    p.add_argument("--postprocess", choices=POSTPROCESS_MODES, default="symmetric")
    p.add_argument("--plot", help="PNG path for the retention curve")
    p.set_defaults(func=cmd_mask)

    p = sub.add_parser("samples", help="export the bundled sample photos")
    p.add_argument("--out", required=True)
    p.add_argument("--which", choices=("train", "val"), default="train")
    p.set_defaults(func=cmd_samples)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    torch.set_num_threads(max(1, args.workers))
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"jigsawcm: usage error: {exc}", file=sys.stderr)
        return 2
    except PuzzleDataError as exc:
        print(f"jigsawcm: data error: {exc}", file=sys.stderr)
        return 3
    except (NumericalError, FloatingPointError) as exc:
        print(f"jigsawcm: numerical error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
