"""
Error hierarchy for the SLAM toolkit.

Every error carries the process exit code the CLI reports for it.
"""
from typing import Iterable, Optional


class SlamError(Exception):
    """Base class for all toolkit errors."""

    exit_code = 1


class InvalidInputError(SlamError, ValueError):
    """Bad arguments or malformed input data."""

    exit_code = 2


class LogParseError(InvalidInputError):
    """A sensor log could not be parsed."""

    def __init__(self, path: str, line: Optional[int], message: str):
        self.path = str(path)
        self.line = line
        location = f"{self.path}:{line}" if line is not None else self.path
        super().__init__(f"{location}: {message}")


class TimestampGapError(InvalidInputError):
    """Two sensor streams do not overlap closely enough in time."""


class DuplicateEdgeError(InvalidInputError):
    """An edge with the same endpoints and kind already exists."""


class InformationMatrixError(InvalidInputError):
    """An information matrix is not symmetric positive definite."""


class NumericalFailureError(SlamError):
    """The optimizer produced a non-finite or divergent solution."""

    exit_code = 3


class InsufficientConstraintsError(SlamError):
    """Not enough constraints to produce a meaningful estimate."""

    exit_code = 4


class DisconnectedGraphError(InsufficientConstraintsError):
    """Some nodes cannot be reached from the anchored node."""

    def __init__(self, unreachable: Iterable[int]):
        self.unreachable = sorted(int(n) for n in unreachable)
        preview = ", ".join(str(n) for n in self.unreachable[:20])
        if len(self.unreachable) > 20:
            preview += ", ..."
        super().__init__(f"Pose graph is disconnected; unreachable nodes: {preview}")


# Per-pair failures. Detectors catch and count these.

class NoEstimateError(SlamError):
    """All k nearest fingerprints had zero similarity."""


class InsufficientCorrespondencesError(SlamError):
    """Too few valid correspondences to fit a rigid transform."""


class NoMatchError(SlamError):
    """ICP found too few correspondences between two scans."""
