"""Wall-clock and analytic cost benchmark of CM backends over puzzle sizes."""

from __future__ import annotations

import json
import statistics
import time
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .cm_engine import CMBackend, compute_cm
from .embed_net import (ModelConfig, count_macs, count_macs_e2e, count_params, count_params_e2e,
                        init_pair_model, init_params)
from .puzzle_io import ProblemType, scramble

# refuse pair-input runs whose pass count would take hours on a laptop
MAX_PAIR_PASSES = 50_000_000


@dataclass
class BenchRow:
    backend: str
    N: int
    wall_secs: float
    analytic_macs: int
    params: int
    passes: int
    repeat: int

    def to_json(self) -> str:
        return json.dumps(asdict(self))


def synthetic_bundle(n: int, piece_size: int, seed: int = 0, problem_type: str = "type2"):
    """Random-pixel puzzle of ``n`` pieces laid out as a single row."""
    rng = np.random.default_rng(seed)
    pieces = rng.random((n, piece_size, piece_size, 3))
    return scramble(pieces, (1, n), problem_type, seed)


def _timed(fn, repeat: int) -> float:
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times)


def bench_backend(backend: str, sizes: Sequence[int], *, model_cfg: ModelConfig | None = None, repeat: int = 3,
                  seed: int = 0, workers: int = 1, problem_type: str = "type2") -> list[BenchRow]:
    rows = []
    if backend in ("edge2vec", "e2e_proxy"):
        model_cfg = model_cfg or ModelConfig()
        model = init_params(model_cfg, seed) if backend == "edge2vec" else init_pair_model(model_cfg, seed)
        piece_size = model_cfg.piece_size
    else:
        model = None
        piece_size = model_cfg.piece_size if model_cfg else 28
    be = CMBackend(backend, model)
    for n in sizes:
        if backend == "e2e_proxy" and 16 * n * (n - 1) > MAX_PAIR_PASSES:
            raise ValueError(f"e2e_proxy at N={n} needs {16 * n * (n - 1):,} passes; above the "
                             f"{MAX_PAIR_PASSES:,} guard")
        bundle = synthetic_bundle(n, piece_size, seed, problem_type)
        if model is not None:
            model.passes = 0
        secs = _timed(lambda: compute_cm(bundle, be, workers=workers), repeat)
        passes = model.passes // repeat if model is not None else 0
        if backend == "edge2vec":
            macs, params = count_macs(model_cfg).per_puzzle(n), count_params(model_cfg)
        elif backend == "e2e_proxy":
            macs, params = count_macs_e2e(model_cfg).per_puzzle(n), count_params_e2e(model_cfg)
        else:
            macs, params = 0, 0
        rows.append(BenchRow(backend, n, secs, macs, params, passes, repeat))
    return rows


def loglog_slope(rows: Sequence[BenchRow | dict]) -> float:
    """Least-squares slope of log(wall_secs) against log(N)."""
    pts = [(r["N"], r["wall_secs"]) if isinstance(r, dict) else (r.N, r.wall_secs) for r in rows]
    x = np.log([p[0] for p in pts])
    y = np.log([p[1] for p in pts])
    return float(np.polyfit(x, y, 1)[0])


def write_jsonl(rows: Sequence[BenchRow], path: str | Path) -> None:
    with open(path, "w") as fh:
        for r in rows:
            fh.write(r.to_json() + "\n")
