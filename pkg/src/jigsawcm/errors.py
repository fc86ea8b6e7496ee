"""Exception types shared across the package.

The CLI maps these onto process exit codes: data problems exit with 3,
numerical failures with 4.
"""

from __future__ import annotations


class PuzzleDataError(ValueError):
    """Malformed or inconsistent input data (images, bundles, checkpoints, CM files)."""

    exit_code = 3


class NumericalError(ArithmeticError):
    """A computation produced non-finite values or hit a singular system."""

    exit_code = 4


class EmptyCandidatePool(NumericalError):
    """Collision masking removed every negative candidate for some anchor."""


class TrainingDiverged(NumericalError):
    """Loss became NaN or infinite during optimization."""
