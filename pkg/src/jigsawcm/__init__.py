"""Compatibility measures for square-piece jigsaw puzzles.

Classical edge-pixel measures, a learned edge-embedding measure trained with
hard batch triplets, a greedy reconstructor, metrics and cost accounting.
"""

from __future__ import annotations

from .errors import EmptyCandidatePool, NumericalError, PuzzleDataError, TrainingDiverged
from .puzzle_io import ProblemType, PuzzleBundle, load_bundle, make_bundle, save_bundle

__version__ = "0.1.0"

__all__ = [
    "EmptyCandidatePool",
    "NumericalError",
    "ProblemType",
    "PuzzleBundle",
    "PuzzleDataError",
    "TrainingDiverged",
    "load_bundle",
    "make_bundle",
    "save_bundle",
]
