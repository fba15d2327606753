"""
Exception hierarchy for Fracture Width Filter
Every error raised by the solver, the filter and the experiment harness
derives from FractureFilterError so callers can catch the whole family.
"""

from typing import Optional


class FractureFilterError(Exception):
    """Base class for all package errors."""


class GeometryError(FractureFilterError):
    """Invalid fractured-domain description."""


class MeshError(FractureFilterError):
    """Mesh size does not tile the geometry, or the mesh is inconsistent."""


class AssemblyError(FractureFilterError):
    """Invalid coefficients or widths handed to the assembly routines."""


class BoundaryConditionError(FractureFilterError):
    """Conflicting or dangling boundary condition pieces."""


class ConstraintError(FractureFilterError):
    """Intersection constraint applied where no fractures cross."""


class SolverError(FractureFilterError):
    """A linear solve failed its residual check or produced non-finite values."""


class SingularMatrixError(SolverError):
    """Factorization hit a zero or negligible pivot."""

    def __init__(self, message: str, pivot: Optional[int] = None, context: str = ""):
        self.pivot = pivot
        self.context = context
        details = message
        if pivot is not None:
            details += f" (pivot {pivot})"
        if context:
            details += f" [{context}]"
        super().__init__(details)


class ObservationError(FractureFilterError):
    """Observation vector does not match the state layout."""


class FilterDivergenceError(FractureFilterError):
    """Every particle weight vanished during an update."""

    def __init__(self, step: Optional[int] = None, message: str = ""):
        self.step = step
        where = f" at step {step}" if step is not None else ""
        text = message or "all particle weights are zero or NaN"
        super().__init__(
            f"Filter divergence{where}: {text}; "
            "increase the likelihood variance R or the exploration variance"
        )


class ConfigError(FractureFilterError):
    """Unknown keys or invalid values in an experiment configuration."""


class StageError(FractureFilterError):
    """Harness failure, labelled with the stage that raised it."""

    def __init__(self, stage: str, cause: BaseException):
        self.stage = stage
        self.cause = cause
        super().__init__(f"[{stage}] {type(cause).__name__}: {cause}")
