"""
Utility functions for Fracture Width Filter
Shared helpers for random streams, CSV output and small numerics.
"""

import csv
import logging
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

logger = logging.getLogger(__name__)


def rng_stream(seed: int, *keys: int) -> np.random.Generator:
    """
    Counter-based random stream addressed by (seed, keys).

    Streams for different keys are independent, so the draws a particle
    sees do not depend on which thread evaluates it.

    Args:
        seed: Master seed.
        keys: Stream address, e.g. (stage, step, particle).

    Returns:
        Generator backed by Philox.
    """
    sequence = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in keys))
    return np.random.Generator(np.random.Philox(sequence))


def as_diagonal(value, size: int, name: str = "value") -> np.ndarray:
    """
    Broadcast a scalar or vector to a length-``size`` diagonal.

    Args:
        value: Scalar, length-1 or length-``size`` sequence.
        size: Required length.
        name: Used in error messages.

    Returns:
        Float array of shape (size,).
    """
    arr = np.atleast_1d(np.asarray(value, dtype=float))
    if arr.ndim != 1:
        raise ValueError(f"{name} must be a scalar or a vector, got shape {arr.shape}")
    if arr.size == 1:
        return np.full(size, arr[0])
    if arr.size != size:
        raise ValueError(f"{name} has {arr.size} entries, expected {size}")
    return arr.copy()


def relative_error(estimate, truth) -> np.ndarray:
    """Componentwise |estimate - truth| / |truth|."""
    estimate = np.asarray(estimate, dtype=float)
    truth = np.asarray(truth, dtype=float)
    return np.abs(estimate - truth) / np.abs(truth)


def band_entry_step(trace: np.ndarray, truth: float, band: float,
                    steps: Optional[Sequence[int]] = None) -> Optional[int]:
    """
    First step from which the value stays within the relative band around truth.

    A trace that touches the band and leaves it again has not entered it;
    only the final uninterrupted run inside the band counts.

    Args:
        trace: Per-step values of one component.
        truth: Reference value.
        band: Relative half-width, e.g. 0.1.
        steps: Step labels for the entries; defaults to 1..len(trace).

    Returns:
        Step label, or None if the last value lies outside the band.
    """
    trace = np.asarray(trace, dtype=float)
    labels = np.arange(1, trace.size + 1) if steps is None else np.asarray(steps)
    inside = np.isfinite(trace) & (np.abs(trace - truth) <= band * abs(truth))
    if inside.size == 0 or not inside[-1]:
        return None
    outside = np.flatnonzero(~inside)
    first = 0 if outside.size == 0 else outside[-1] + 1
    return int(labels[first])


def write_csv(path: Path, header: Sequence[str], rows: Iterable[Sequence],
              comments: Sequence[str] = ()) -> Path:
    """
    Write rows to CSV with optional leading ``#`` comment lines.

    Args:
        path: Output file.
        header: Column names.
        rows: Row sequences.
        comments: Lines written before the header, prefixed with '# '.

    Returns:
        Path written.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        for line in comments:
            f.write(f"# {line}\n")
        writer = csv.writer(f)
        writer.writerow(header)
        for row in rows:
            writer.writerow([format_number(v) for v in row])
    return path


def format_number(value) -> str:
    """Render numbers with full precision, leave everything else as str."""
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if value is None:
        return ""
    return str(value)


def format_duration(seconds: float) -> str:
    """
    Format a duration for log lines.

    Args:
        seconds: Elapsed seconds.

    Returns:
        String such as '2m 03.4s' or '0.52s'.
    """
    if seconds < 60:
        return f"{seconds:.2f}s"
    minutes, rest = divmod(seconds, 60)
    return f"{int(minutes)}m {rest:04.1f}s"
