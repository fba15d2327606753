"""
Direct particle filter for Fracture Width Filter
Estimates the parameter theta = 1/d by jittering parameter particles,
weighting them with the one-step likelihood of the next observation,
resampling, and averaging the posterior means after a burn-in.
"""

import logging
import time
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Protocol, Sequence, Tuple, Union

import numpy as np
from scipy.special import logsumexp
from scipy.stats import norm

from .constants import (PRIOR_KINDS, RESAMPLING_SCHEMES, STREAM_JITTER,
                        STREAM_PRIOR, STREAM_RESAMPLE)
from .exceptions import (ConfigError, FilterDivergenceError,
                         FractureFilterError)
from .observation import ObservationSeries
from .utils import as_diagonal, format_duration, rng_stream

logger = logging.getLogger(__name__)

ForwardMap = Callable[[np.ndarray, np.ndarray], np.ndarray]

# prior mass below zero that a normal prior may carry without truncation
_NEGLIGIBLE_MASS = 1e-9


class ParameterModel(Protocol):
    """Anything the filter can drive."""

    def predict(self, theta: np.ndarray, step: int, y_prev: np.ndarray) -> np.ndarray:
        ...

    def advance(self, theta_mean: np.ndarray, step: int, y_prev: np.ndarray) -> None:
        ...


@dataclass(eq=False)
class ParticleEnsemble:
    particles: np.ndarray  # (M, p)
    weights: np.ndarray    # (M,)
    step: int = 0

    @property
    def size(self) -> int:
        return int(self.particles.shape[0])

    @property
    def dim(self) -> int:
        return int(self.particles.shape[1])

    @property
    def mean(self) -> np.ndarray:
        return self.weights @ self.particles

    @property
    def spread(self) -> np.ndarray:
        """Weighted standard deviation per component."""
        centred = self.particles - self.mean
        return np.sqrt(self.weights @ (centred ** 2))

    def effective_sample_size(self) -> float:
        return float(1.0 / np.sum(self.weights ** 2))


@dataclass(frozen=True)
class PriorSpec:
    """Initial particle distribution."""
    kind: str = "uniform"
    low: Optional[Sequence[float]] = None
    high: Optional[Sequence[float]] = None
    value: Optional[Sequence[float]] = None
    mean: Optional[Sequence[float]] = None
    std: Optional[Sequence[float]] = None
    truncate: bool = False

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "PriorSpec":
        """
        Build from the ``filter.prior`` config section. A uniform prior
        without explicit bounds uses bracket[0]*guess .. bracket[1]*guess.
        """
        kind = data.get("kind", "uniform")
        low, high = data.get("low"), data.get("high")
        if kind == "uniform" and (low is None or high is None):
            guess = data.get("guess")
            if guess is None:
                raise ConfigError("Uniform prior needs low/high or a guess")
            lo_f, hi_f = data.get("bracket", [0.5, 2.0])
            guess = np.atleast_1d(np.asarray(guess, dtype=float))
            low = list(lo_f * guess) if low is None else low
            high = list(hi_f * guess) if high is None else high
        return cls(kind=kind, low=low, high=high, value=data.get("value"),
                   mean=data.get("mean"), std=data.get("std"),
                   truncate=bool(data.get("truncate", False)))

    def center(self, dim: int) -> np.ndarray:
        """Midpoint, point value or mean of the prior."""
        if self.kind == "uniform":
            return 0.5 * (as_diagonal(self.low, dim, "prior low") + as_diagonal(self.high, dim, "prior high"))
        if self.kind == "point":
            return as_diagonal(self.value, dim, "prior value")
        return as_diagonal(self.mean, dim, "prior mean")


@dataclass(frozen=True, eq=False)
class FilterConfig:
    particles: int
    exploration: np.ndarray
    prior: PriorSpec
    likelihood_variance: Optional[Union[float, Sequence[float]]] = None
    burn_in: int = 10
    seed: int = 0
    theta_floor: float = 1.0
    resampling: str = "multinomial"
    threads: int = 1

    @property
    def dim(self) -> int:
        return int(np.atleast_1d(self.exploration).size)

    def validate(self, n_steps: Optional[int] = None) -> None:
        if self.particles < 2:
            raise ConfigError(f"At least 2 particles are required, got {self.particles}")
        eps = np.atleast_1d(np.asarray(self.exploration, dtype=float))
        if np.any(eps < 0) or not np.all(np.isfinite(eps)):
            raise ConfigError("Exploration variances must be non-negative")
        if self.likelihood_variance is not None:
            R = np.atleast_1d(np.asarray(self.likelihood_variance, dtype=float))
            if np.any(R <= 0):
                raise ConfigError("Likelihood variance must be positive")
        if self.burn_in < 0 or (n_steps is not None and self.burn_in >= n_steps):
            raise ConfigError(f"Burn-in {self.burn_in} must lie in [0, {n_steps})")
        if self.theta_floor <= 0:
            raise ConfigError("Parameter floor must be positive")
        if self.resampling not in RESAMPLING_SCHEMES:
            raise ConfigError(f"Resampling must be one of {RESAMPLING_SCHEMES}")
        if self.prior.kind not in PRIOR_KINDS:
            raise ConfigError(f"Prior kind must be one of {PRIOR_KINDS}")
        if self.threads < 1:
            raise ConfigError("Thread count must be at least 1")


@dataclass(eq=False)
class EstimateTrace:
    """Per-step filter output for steps 1..N."""
    steps: np.ndarray
    posterior_mean: np.ndarray
    spread: np.ndarray
    ess: np.ndarray
    burn_in: int

    @property
    def width_estimate(self) -> np.ndarray:
        """Componentwise 1 / posterior mean."""
        return 1.0 / self.posterior_mean

    @property
    def running_average(self) -> np.ndarray:
        """Burn-in average of the posterior means; NaN before the burn-in ends."""
        out = np.full_like(self.posterior_mean, np.nan)
        j = self.burn_in
        if j < len(self.steps):
            tail = self.posterior_mean[j:]
            out[j:] = np.cumsum(tail, axis=0) / np.arange(1, tail.shape[0] + 1)[:, None]
        return out

    def __len__(self) -> int:
        return int(self.steps.size)


# ========== Operations ==========

def _reflect(particles: np.ndarray, floor: float) -> np.ndarray:
    return np.where(particles < floor, floor + np.abs(particles - floor), particles)


def init_ensemble(cfg: FilterConfig) -> ParticleEnsemble:
    """
    Draw M particles from the prior with uniform weights.

    Raises:
        ConfigError: Prior puts mass on non-positive values and is not
            truncated, or is missing its parameters.
    """
    M, p = cfg.particles, cfg.dim
    prior = cfg.prior
    rng = rng_stream(cfg.seed, STREAM_PRIOR)

    if prior.kind == "point":
        if prior.value is None:
            raise ConfigError("Point prior needs a value")
        value = as_diagonal(prior.value, p, "prior value")
        if np.any(value <= 0):
            raise ConfigError("Point prior must be positive")
        particles = np.tile(value, (M, 1))
    elif prior.kind == "uniform":
        low = as_diagonal(prior.low, p, "prior low")
        high = as_diagonal(prior.high, p, "prior high")
        if np.any(high < low):
            raise ConfigError(f"Uniform prior has high < low: {low}, {high}")
        if np.any(low <= 0):
            raise ConfigError(f"Uniform prior puts mass on non-positive values: low={low}")
        particles = rng.uniform(low, high, size=(M, p))
    elif prior.kind == "normal":
        if prior.mean is None or prior.std is None:
            raise ConfigError("Normal prior needs mean and std")
        mean = as_diagonal(prior.mean, p, "prior mean")
        std = as_diagonal(prior.std, p, "prior std")
        if np.any(std <= 0):
            raise ConfigError("Normal prior std must be positive")
        if prior.truncate:
            particles = rng.normal(mean, std, size=(M, p))
            bad = particles <= cfg.theta_floor
            while np.any(bad):
                particles[bad] = rng.normal(np.broadcast_to(mean, particles.shape)[bad],
                                            np.broadcast_to(std, particles.shape)[bad])
                bad = particles <= cfg.theta_floor
        else:
            mass = norm.cdf(0.0, loc=mean, scale=std)
            if np.any(mass > _NEGLIGIBLE_MASS):
                raise ConfigError(
                    f"Normal prior puts mass {mass.max():.2e} on non-positive values; set truncate"
                )
            particles = _reflect(rng.normal(mean, std, size=(M, p)), cfg.theta_floor)
    else:
        raise ConfigError(f"Unknown prior kind '{prior.kind}'")

    return ParticleEnsemble(particles, np.full(M, 1.0 / M), 0)


def predict(ens: ParticleEnsemble, eps_cov, seed: int, step: int = 0,
            floor: float = 1.0) -> ParticleEnsemble:
    """
    Jitter every particle with N(0, diag eps_cov) and reflect at the floor.

    Each particle draws from its own stream (seed, step, particle index).
    """
    eps = as_diagonal(eps_cov, ens.dim, "exploration variance")
    if np.all(eps == 0):
        return ParticleEnsemble(ens.particles.copy(), ens.weights.copy(), step)
    noise = np.empty_like(ens.particles)
    for m in range(ens.size):
        noise[m] = rng_stream(seed, STREAM_JITTER, step, m).standard_normal(ens.dim)
    particles = _reflect(ens.particles + noise * np.sqrt(eps), floor)
    return ParticleEnsemble(particles, ens.weights.copy(), step)


def log_likelihood(y_prev: np.ndarray, y_next: np.ndarray, theta: np.ndarray,
                   forward: ForwardMap, R) -> float:
    """
    -1/2 ||forward(y_prev, theta) - y_next||^2 with the R^-1 weighted norm.

    A failing forward solve gives -inf, which discards the particle.
    """
    try:
        predicted = np.asarray(forward(y_prev, theta), dtype=float)
    except (FractureFilterError, ArithmeticError, ValueError) as e:
        logger.warning(f"Forward solve failed for theta={theta}: {e}")
        return -np.inf
    if not np.all(np.isfinite(predicted)):
        logger.warning(f"Non-finite prediction for theta={theta}")
        return -np.inf
    residual = predicted - np.asarray(y_next, dtype=float)
    R_diag = as_diagonal(R, residual.size, "likelihood variance")
    return float(-0.5 * np.sum(residual ** 2 / R_diag))


def likelihood(y_prev: np.ndarray, y_next: np.ndarray, theta: np.ndarray,
               forward: ForwardMap, R) -> float:
    """Weight exp(log_likelihood), in [0, 1]."""
    return float(np.exp(log_likelihood(y_prev, y_next, theta, forward, R)))


def update(prior: ParticleEnsemble, weights: Sequence[float], step: Optional[int] = None) -> ParticleEnsemble:
    """
    Normalize raw weights.

    Raises:
        FilterDivergenceError: All weights zero or any NaN.
    """
    w = np.asarray(weights, dtype=float)
    total = w.sum()
    if np.any(np.isnan(w)) or not np.isfinite(total) or total <= 0:
        raise FilterDivergenceError(step)
    return ParticleEnsemble(prior.particles, w / total, prior.step)


def update_log(prior: ParticleEnsemble, log_weights: Sequence[float],
               step: Optional[int] = None) -> ParticleEnsemble:
    """Normalize log-domain weights with logsumexp."""
    lw = np.asarray(log_weights, dtype=float)
    if np.any(np.isnan(lw)) or np.all(np.isneginf(lw)):
        raise FilterDivergenceError(step)
    w = np.exp(lw - logsumexp(lw))
    return ParticleEnsemble(prior.particles, w / w.sum(), prior.step)


def resample_indices(weights: np.ndarray, rng: np.random.Generator,
                     scheme: str = "multinomial") -> np.ndarray:
    """
    Indices of the particles kept by resampling.

    Args:
        weights: Normalized weights.
        rng: Random generator.
        scheme: multinomial, systematic or residual.

    Returns:
        Array of M indices in increasing order.
    """
    M = weights.size
    w = weights / weights.sum()
    if scheme == "multinomial":
        counts = rng.multinomial(M, w)
    elif scheme == "systematic":
        positions = (rng.random() + np.arange(M)) / M
        cumulative = np.cumsum(w)
        cumulative[-1] = 1.0
        return np.searchsorted(cumulative, positions, side="right")
    elif scheme == "residual":
        expected = w * M
        counts = np.floor(expected).astype(np.int64)
        remaining = M - counts.sum()
        if remaining > 0:
            residual = expected - counts
            counts += rng.multinomial(remaining, residual / residual.sum())
    else:
        raise ConfigError(f"Unknown resampling scheme '{scheme}'")
    return np.repeat(np.arange(M), counts)


def resample(ens: ParticleEnsemble, seed: int, step: int = 0,
             scheme: str = "multinomial") -> ParticleEnsemble:
    """Draw M particles with replacement by weight; weights become 1/M."""
    idx = resample_indices(ens.weights, rng_stream(seed, STREAM_RESAMPLE, step), scheme)
    M = ens.size
    return ParticleEnsemble(ens.particles[idx].copy(), np.full(M, 1.0 / M), ens.step)


def estimate(trace: EstimateTrace, j: int) -> Tuple[np.ndarray, np.ndarray]:
    """
    Average of the per-step posterior means from entry j on.

    Returns:
        (theta average, width estimate 1/theta average).
    """
    if not 0 <= j < len(trace):
        raise FractureFilterError(f"Burn-in index {j} outside the trace of length {len(trace)}")
    theta = trace.posterior_mean[j:].mean(axis=0)
    return theta, 1.0 / theta


def _evaluate_log_weights(prior: ParticleEnsemble, y_prev: np.ndarray, y_next: np.ndarray,
                          forward: ForwardMap, R, threads: int) -> np.ndarray:
    log_w = np.empty(prior.size)
    if threads <= 1:
        for m in range(prior.size):
            log_w[m] = log_likelihood(y_prev, y_next, prior.particles[m], forward, R)
        return log_w

    with ThreadPoolExecutor(max_workers=threads) as executor:
        futures = {
            executor.submit(log_likelihood, y_prev, y_next, prior.particles[m], forward, R): m
            for m in range(prior.size)
        }
        for future in as_completed(futures):
            log_w[futures[future]] = future.result()
    return log_w


def run_filter(obs: ObservationSeries, cfg: FilterConfig, model: ParameterModel) -> EstimateTrace:
    """
    Run predict, likelihood, update and resample over every observation step.

    Args:
        obs: Observations Y_0..Y_N.
        cfg: Filter configuration.
        model: Forward model providing predict/advance.

    Returns:
        EstimateTrace for steps 1..N.

    Raises:
        FilterDivergenceError: All particles lost at some step.
    """
    N = obs.n_steps
    cfg.validate(N)
    R = obs.noise_variance if cfg.likelihood_variance is None else cfg.likelihood_variance
    R_diag = as_diagonal(R, obs.size, "likelihood variance")
    if np.any(R_diag <= 0):
        raise ConfigError("Likelihood variance must be positive; set filter.likelihood_variance")

    ensemble = init_ensemble(cfg)
    means = np.empty((N, cfg.dim))
    spreads = np.empty((N, cfg.dim))
    ess = np.empty(N)
    started = time.perf_counter()

    for n in range(N):
        y_prev, y_next = obs.record(n), obs.record(n + 1)
        prior = predict(ensemble, cfg.exploration, cfg.seed, n + 1, cfg.theta_floor)

        def forward(y, theta, _n=n):
            return model.predict(theta, _n, y)

        log_w = _evaluate_log_weights(prior, y_prev, y_next, forward, R_diag, cfg.threads)
        lost = int(np.sum(np.isneginf(log_w)))
        if lost:
            logger.warning(f"Step {n + 1}: {lost} particle(s) discarded after failed solves")
        posterior = update_log(prior, log_w, step=n + 1)

        means[n] = posterior.mean
        spreads[n] = posterior.spread
        ess[n] = posterior.effective_sample_size()
        if ess[n] < 2:
            logger.warning(f"Step {n + 1}: ensemble collapsed, ESS={ess[n]:.2f}")

        model.advance(posterior.mean, n, y_prev)
        ensemble = resample(posterior, cfg.seed, n + 1, cfg.resampling)
        logger.info(
            f"Filter step {n + 1}/{N}: width estimate {np.array2string(1.0 / means[n], precision=4)}, "
            f"ESS {ess[n]:.1f}"
        )

    logger.info(f"Filter finished {N} steps in {format_duration(time.perf_counter() - started)}")
    return EstimateTrace(
        steps=np.arange(1, N + 1),
        posterior_mean=means,
        spread=spreads,
        ess=ess,
        burn_in=cfg.burn_in,
    )
