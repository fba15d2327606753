"""
Fracture observations for Fracture Width Filter
Restriction of the state to the fracture unknowns, synthetic noisy data,
and the companion state that fills in the unobserved coordinates.
"""

import csv
import json
import logging
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from .constants import NOISE_INTERPRETATIONS, STATE_MODES, STREAM_NOISE
from .exceptions import ObservationError
from .forward import DiscreteState, LowRankUpdate, SystemAssembler
from .forward import step as advance_state
from .utils import as_diagonal, rng_stream, write_csv

logger = logging.getLogger(__name__)


@dataclass(eq=False)
class ObservationSeries:
    """
    Observations Y_0..Y_N over the fracture unknowns.

    ``values[n]`` is the record at time index ``steps[n]``; ``dof_ids``
    are the state indices the columns came from.
    """
    steps: np.ndarray
    values: np.ndarray
    noise_variance: np.ndarray
    seed: Optional[int]
    dof_ids: np.ndarray

    @property
    def n_steps(self) -> int:
        """Number of transitions N."""
        return int(self.values.shape[0] - 1)

    @property
    def size(self) -> int:
        return int(self.values.shape[1])

    def record(self, n: int) -> np.ndarray:
        return self.values[n]


def effective_noise_variance(value: float, interpretation: str = "variance",
                             scale: float = 1.0) -> float:
    """
    Noise variance in observation units.

    Args:
        value: Stated noise level.
        interpretation: 'variance' or 'std' for the stated number.
        scale: Multiplier applied to the stated number first.

    Returns:
        Variance.
    """
    if interpretation not in NOISE_INTERPRETATIONS:
        raise ObservationError(f"Noise interpretation must be one of {NOISE_INTERPRETATIONS}")
    stated = float(value) * float(scale)
    if stated < 0:
        raise ObservationError(f"Noise level must be non-negative, got {stated}")
    return stated if interpretation == "variance" else stated ** 2


def observe(X: DiscreteState) -> np.ndarray:
    """Fracture flux nodes followed by fracture edge pressures."""
    return X.values[X.layout.observed_indices()].copy()


def lift(Y: np.ndarray, companion: DiscreteState) -> DiscreteState:
    """
    Companion state with its observed coordinates replaced by Y.

    Raises:
        ObservationError: Y does not match the observation size.
    """
    Y = np.asarray(Y, dtype=float)
    idx = companion.layout.observed_indices()
    if Y.shape != idx.shape:
        raise ObservationError(f"Observation has {Y.size} entries, layout observes {idx.size}")
    values = companion.values.copy()
    values[idx] = Y
    return DiscreteState(values, companion.step, companion.layout)


def make_synthetic(trajectory: Sequence[DiscreteState], R: Union[float, Sequence[float]],
                   seed: Optional[int]) -> ObservationSeries:
    """
    Y_n = observe(X_n) + xi_n with xi_n ~ N(0, diag R), reproducible from seed.

    Args:
        trajectory: True states X_0..X_N.
        R: Noise variance, scalar or one entry per observed unknown; zero
            gives noiseless data.
        seed: Master seed.

    Returns:
        ObservationSeries.
    """
    if not trajectory:
        raise ObservationError("Empty trajectory")
    clean = np.array([observe(X) for X in trajectory])
    try:
        R_diag = as_diagonal(R, clean.shape[1], "noise variance")
    except ValueError as e:
        raise ObservationError(str(e)) from e
    if np.any(R_diag < 0):
        raise ObservationError("Noise variance must be non-negative")
    noise = np.zeros_like(clean)
    if np.any(R_diag > 0):
        if seed is None:
            raise ObservationError("A seed is required for noisy observations")
        rng = rng_stream(seed, STREAM_NOISE)
        noise = rng.standard_normal(clean.shape) * np.sqrt(R_diag)
    logger.info(
        f"Synthetic observations: {clean.shape[0]} records of {clean.shape[1]} values, "
        f"noise variance {R_diag.max():.3g}"
    )
    return ObservationSeries(
        steps=np.array([X.step for X in trajectory]),
        values=clean + noise,
        noise_variance=R_diag,
        seed=seed,
        dof_ids=trajectory[0].layout.observed_indices(),
    )


def write_series(series: ObservationSeries, path: Path) -> Path:
    """CSV with columns n, dof, value; header comments hold R and the seed."""
    def rows():
        for n, record in zip(series.steps, series.values):
            for dof, value in zip(series.dof_ids, record):
                yield (int(n), int(dof), value)

    comments = [
        f"noise_variance = {json.dumps([float(v) for v in series.noise_variance])}",
        f"seed = {json.dumps(series.seed)}",
    ]
    return write_csv(path, ["n", "dof", "value"], rows(), comments)


def read_series(path: Path) -> ObservationSeries:
    """Read a series written by write_series."""
    meta = {}
    records: List[tuple] = []
    with open(path, newline="") as f:
        body = []
        for line in f:
            if line.startswith("#"):
                key, _, value = line[1:].partition("=")
                meta[key.strip()] = json.loads(value.strip())
            else:
                body.append(line)
    for row in csv.DictReader(body):
        records.append((int(row["n"]), int(row["dof"]), float(row["value"])))
    if not records:
        raise ObservationError(f"No observations in {path}")
    steps = sorted({r[0] for r in records})
    dofs = [r[1] for r in records if r[0] == steps[0]]
    values = np.array([r[2] for r in records]).reshape(len(steps), len(dofs))
    return ObservationSeries(
        steps=np.array(steps),
        values=values,
        noise_variance=np.asarray(meta.get("noise_variance", [0.0] * len(dofs)), dtype=float),
        seed=meta.get("seed"),
        dof_ids=np.array(dofs),
    )


class CompanionModel:
    """
    Forward model seen by the filter.

    Keeps one full companion state. A prediction lifts the observation at
    step n into the companion and advances it with the particle's widths;
    after each filter step the companion itself is advanced with the
    posterior-mean widths. In ``fracture_only`` mode the assembler solves
    the fracture unknowns alone and the matrix part of the companion never
    changes.

    With ``reference_widths`` set, every solve goes through one
    LowRankUpdate instead of a factorization per particle.
    """

    def __init__(self, assembler: SystemAssembler, initial: DiscreteState, mode: str = "companion",
                 reference_widths: Optional[Sequence[float]] = None):
        if mode not in STATE_MODES:
            raise ObservationError(f"State mode must be one of {STATE_MODES}")
        expected = "full" if mode == "companion" else "fracture"
        if assembler.subsystem != expected:
            raise ObservationError(f"Mode '{mode}' needs a '{expected}' assembler")
        self.assembler = assembler
        self.mode = mode
        self.companion = initial.copy()
        self.update: Optional[LowRankUpdate] = None
        if reference_widths is not None:
            self.update = LowRankUpdate(assembler, reference_widths)
        self._cache: Optional[Tuple[int, bytes, np.ndarray]] = None
        self._lock = threading.Lock()

    def _base_solution(self, step: int, y_prev: np.ndarray, lifted: DiscreteState) -> np.ndarray:
        key = np.ascontiguousarray(y_prev, dtype=float).tobytes()
        with self._lock:
            if self._cache is None or self._cache[0] != step or self._cache[1] != key:
                self._cache = (step, key, self.update.base_solution(lifted))
            return self._cache[2]

    def _advance(self, theta: np.ndarray, step: int, y_prev: np.ndarray) -> DiscreteState:
        widths = 1.0 / np.asarray(theta, dtype=float)
        lifted = lift(y_prev, self.companion)
        if self.update is None:
            return advance_state(self.assembler.build(widths), lifted)
        return self.update.step(lifted, widths, self._base_solution(step, y_prev, lifted))

    def predict(self, theta: np.ndarray, step: int, y_prev: np.ndarray) -> np.ndarray:
        """Observation at step+1 predicted from y_prev with widths 1/theta."""
        if self.companion.step != step:
            raise ObservationError(f"Companion is at step {self.companion.step}, asked for {step}")
        return observe(self._advance(theta, step, y_prev))

    def advance(self, theta_mean: np.ndarray, step: int, y_prev: np.ndarray) -> None:
        """Move the companion to step+1 with the posterior-mean parameter."""
        self.companion = self._advance(theta_mean, step, y_prev)
