"""Reconstruction-quality estimation without ground truth.

Leave-one-out re-inference turns the collected values themselves into error
observations; bootstrap resampling or a normal posterior over the mean error
then estimates P(error <= epsilon).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import norm

from spider.core import (
    InsufficientDataError,
    QualityConfig,
    SelectionMatrix,
    SparseMeasurement,
    StateWindow,
)
from spider.reconstruct import Reconstructor


@dataclass(frozen=True)
class LooObservations:
    """Collected values, their re-inferred counterparts, and absolute residuals."""

    collected: np.ndarray
    reinferred: np.ndarray
    residuals: np.ndarray

    def __post_init__(self) -> None:
        collected = np.asarray(self.collected, dtype=np.float64)
        reinferred = np.asarray(self.reinferred, dtype=np.float64)
        if collected.shape != reinferred.shape or collected.ndim != 1:
            raise InsufficientDataError("collected and reinferred must be equal-length vectors")
        object.__setattr__(self, "collected", collected)
        object.__setattr__(self, "reinferred", reinferred)
        object.__setattr__(self, "residuals", np.abs(reinferred - collected))

    def __len__(self) -> int:
        return len(self.collected)


def loo_observations(window: StateWindow, reconstructor: Reconstructor) -> LooObservations:
    """Re-infer each collected cell of the current frame with that cell withheld.

    For every sampled cell, the cell's value is zeroed and its mask bit
    cleared, the reconstructor runs on the modified window, and the re-inferred
    value at that cell is recorded. The input window is never mutated; cells
    are processed in row-major order.
    """
    current = window.current
    sampled = current.mask.selected_indices()
    if sampled.size < 2:
        raise InsufficientDataError(
            f"leave-one-out needs at least 2 sampled cells, got {sampled.size}"
        )
    shape = current.shape
    collected = current.values.ravel()[sampled]
    reinferred = np.empty(sampled.size)
    for pos, cell in enumerate(sampled):
        values = current.values.copy().ravel()
        bits = current.mask.bits.copy().ravel()
        values[cell] = 0.0
        bits[cell] = 0
        reduced = SparseMeasurement(
            t=current.t,
            values=values.reshape(shape),
            mask=SelectionMatrix(t=current.t, bits=bits.reshape(shape)),
        )
        estimate = reconstructor(window.replace_current(reduced))
        reinferred[pos] = estimate.values.ravel()[cell]
    return LooObservations(collected=collected, reinferred=reinferred,
                           residuals=np.abs(reinferred - collected))


def bootstrap_estimate(obs: LooObservations, epsilon: float, m: int = 10_000,
                       seed: int = 0) -> float:
    """Fraction of with-replacement resample means that land at or below epsilon."""
    if m < 1:
        raise InsufficientDataError("need at least one bootstrap resample")
    if len(obs) == 0:
        raise InsufficientDataError("cannot bootstrap empty observations")
    rng = np.random.default_rng(seed)
    n = len(obs)
    draws = rng.integers(0, n, size=(m, n))
    means = obs.residuals[draws].mean(axis=1)
    return float(np.mean(means <= epsilon))


def normal_posterior_estimate(obs: LooObservations, epsilon: float) -> float:
    """Normal approximation of P(mean error <= epsilon) from the residuals.

    The mean error is modelled as Normal(sample mean, stderr of the mean);
    zero-variance observations collapse to a point mass.
    """
    if len(obs) < 2:
        raise InsufficientDataError("normal posterior needs at least 2 observations")
    mu = float(obs.residuals.mean())
    stderr = float(obs.residuals.std(ddof=1) / np.sqrt(len(obs)))
    if stderr == 0.0:
        return 1.0 if mu <= epsilon else 0.0
    return float(norm.cdf((epsilon - mu) / stderr))


def quality_gate(obs: LooObservations, config: QualityConfig, m: int = 10_000,
                 seed: int = 0) -> bool:
    """True when the bootstrap estimate of P(e <= epsilon) strictly exceeds beta."""
    return bootstrap_estimate(obs, config.epsilon, m=m, seed=seed) > config.beta
