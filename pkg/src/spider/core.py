"""Shared domain types, masking, error metrics, and traffic normalization.

Grids are row-major numpy arrays of shape (rows, cols); cell (i, j) means
(row, column), zero-indexed, and the flat cell index is ``i * cols + j``.
All types are immutable after construction, so they can be shared freely
between workers. Operations are pure functions.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass

import numpy as np


# ---------------------------------------------------------------------------
# Errors
# ---------------------------------------------------------------------------

class SpiderError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(SpiderError, ValueError):
    """Grid dimensions do not match."""


class ConsistencyError(SpiderError, ValueError):
    """Timestamps or frame sequencing disagree."""


class DomainError(SpiderError, ValueError):
    """Input value outside the mathematical domain of the operation."""


class RangeError(SpiderError, ValueError):
    """Index, id, or split outside the valid range."""


class InsufficientDataError(SpiderError, ValueError):
    """Not enough observations to perform the operation."""


class DegenerateStatsError(SpiderError, ValueError):
    """Fitted statistics are degenerate (e.g. all-zero training traffic)."""


class IngestionError(SpiderError, ValueError):
    """A raw input record could not be parsed."""


class InvalidActionError(SpiderError, ValueError):
    """Action already selected or not available in the environment."""


class ConfigError(SpiderError, ValueError):
    """Invalid or inconsistent configuration."""


class ArtifactError(SpiderError, ValueError):
    """A referenced artifact (checkpoint, cache, table) is missing or bad."""


class AccountingError(SpiderError, ValueError):
    """Unknown layer kind in a complexity accounting request."""


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------

def _freeze(arr: np.ndarray) -> np.ndarray:
    out = np.ascontiguousarray(arr)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class GridGeometry:
    """A rows x cols cell grid covering the measurement area.

    ``cell_area_km2`` is informational only.
    """

    rows: int
    cols: int
    cell_area_km2: float | None = None

    def __post_init__(self) -> None:
        if self.rows < 1 or self.cols < 1:
            raise ConfigError(f"grid must be at least 1x1, got {self.rows}x{self.cols}")
        if self.cell_area_km2 is not None and self.cell_area_km2 <= 0:
            raise ConfigError("cell_area_km2 must be positive")

    @property
    def n_cells(self) -> int:
        return self.rows * self.cols

    @property
    def shape(self) -> tuple[int, int]:
        return (self.rows, self.cols)

    def cell_index(self, row: int, col: int) -> int:
        return row * self.cols + col

    def cell_coords(self, index: int) -> tuple[int, int]:
        return divmod(index, self.cols)


@dataclass(frozen=True)
class TrafficSnapshot:
    """Traffic volume over the full grid during one timestep."""

    t: int
    values: np.ndarray

    def __post_init__(self) -> None:
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 2:
            raise ShapeError(f"snapshot values must be 2-D, got shape {values.shape}")
        if np.any(values < 0):
            raise DomainError("traffic volume must be non-negative")
        object.__setattr__(self, "values", _freeze(values))

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


@dataclass(frozen=True)
class SelectionMatrix:
    """Binary mask of cells activated for measurement at one timestep."""

    t: int
    bits: np.ndarray

    def __post_init__(self) -> None:
        bits = np.asarray(self.bits)
        if bits.ndim != 2:
            raise ShapeError(f"selection bits must be 2-D, got shape {bits.shape}")
        if not np.isin(bits, (0, 1)).all():
            raise DomainError("selection matrix entries must be exactly 0 or 1")
        object.__setattr__(self, "bits", _freeze(bits.astype(np.uint8)))

    @property
    def shape(self) -> tuple[int, int]:
        return self.bits.shape

    @property
    def n_selected(self) -> int:
        return int(self.bits.sum())

    def selected_indices(self) -> np.ndarray:
        """Flat indices of the selected cells, in row-major order."""
        return np.flatnonzero(self.bits.ravel())


@dataclass(frozen=True)
class SparseMeasurement:
    """What the operator actually collects: the snapshot masked by a selection."""

    t: int
    values: np.ndarray
    mask: SelectionMatrix

    def __post_init__(self) -> None:
        values = np.asarray(self.values, dtype=np.float64)
        if values.shape != self.mask.shape:
            raise ShapeError(
                f"measurement values {values.shape} do not match mask {self.mask.shape}"
            )
        if self.t != self.mask.t:
            raise ConsistencyError(
                f"measurement timestamp {self.t} != mask timestamp {self.mask.t}"
            )
        if np.any(values[self.mask.bits == 0] != 0):
            raise ConsistencyError("unsampled cells must hold zero")
        if np.any(values < 0):
            raise DomainError("measured traffic must be non-negative")
        object.__setattr__(self, "values", _freeze(values))

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    @property
    def n_sampled(self) -> int:
        return self.mask.n_selected


def empty_measurement(t: int, shape: tuple[int, int]) -> SparseMeasurement:
    """A measurement with nothing collected (all zeros, empty mask)."""
    return SparseMeasurement(
        t=t,
        values=np.zeros(shape),
        mask=SelectionMatrix(t=t, bits=np.zeros(shape, dtype=np.uint8)),
    )


@dataclass(frozen=True)
class StateWindow:
    """Ordered run of recent sparse measurements, most recent last."""

    frames: tuple[SparseMeasurement, ...]

    def __post_init__(self) -> None:
        frames = tuple(self.frames)
        if not frames:
            raise InsufficientDataError("window must hold at least one frame")
        shape = frames[0].shape
        for prev, cur in zip(frames, frames[1:]):
            if cur.t != prev.t + 1:
                raise ConsistencyError(
                    f"window timestamps must increase by 1: {prev.t} -> {cur.t}"
                )
        if any(f.shape != shape for f in frames):
            raise ShapeError("all window frames must share one geometry")
        object.__setattr__(self, "frames", frames)

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def t(self) -> int:
        """Timestamp of the most recent frame."""
        return self.frames[-1].t

    @property
    def current(self) -> SparseMeasurement:
        return self.frames[-1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.frames[0].shape

    def stacked_values(self) -> np.ndarray:
        """(n_frames, rows, cols) array of the measured values."""
        return np.stack([f.values for f in self.frames])

    def stacked_bits(self) -> np.ndarray:
        return np.stack([f.mask.bits for f in self.frames])

    def replace_current(self, frame: SparseMeasurement) -> "StateWindow":
        if frame.t != self.t:
            raise ConsistencyError("replacement frame must keep the current timestamp")
        return StateWindow(self.frames[:-1] + (frame,))


@dataclass(frozen=True)
class NormStats:
    """Traffic normalization statistics: the mean of log(1 + x) over training data."""

    log_mean: float

    def __post_init__(self) -> None:
        if not np.isfinite(self.log_mean) or self.log_mean <= 0:
            raise DegenerateStatsError(
                f"log_mean must be finite and positive, got {self.log_mean}"
            )


@dataclass(frozen=True)
class QualityConfig:
    """Reconstruction quality targets: MAE threshold and probability threshold."""

    epsilon: float
    beta: float = 0.9

    def __post_init__(self) -> None:
        if self.epsilon <= 0:
            raise ConfigError("epsilon must be positive")
        if not 0 < self.beta < 1:
            raise ConfigError("beta must lie strictly between 0 and 1")


# ---------------------------------------------------------------------------
# Operations
# ---------------------------------------------------------------------------

def apply_mask(snapshot: TrafficSnapshot, selection: SelectionMatrix) -> SparseMeasurement:
    """Element-wise product of a snapshot with a binary selection mask."""
    if snapshot.shape != selection.shape:
        raise ShapeError(
            f"snapshot {snapshot.shape} does not match selection {selection.shape}"
        )
    if snapshot.t != selection.t:
        raise ConsistencyError(
            f"snapshot timestamp {snapshot.t} != selection timestamp {selection.t}"
        )
    return SparseMeasurement(
        t=snapshot.t,
        values=snapshot.values * selection.bits,
        mask=selection,
    )


def grid_mae(estimate: np.ndarray, truth: np.ndarray) -> float:
    """Mean absolute error between two grids of equal shape."""
    estimate = np.asarray(estimate, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if estimate.shape != truth.shape:
        raise ShapeError(f"shape mismatch: {estimate.shape} vs {truth.shape}")
    return float(np.mean(np.abs(estimate - truth)))


def mae(estimate: TrafficSnapshot, truth: TrafficSnapshot) -> float:
    return grid_mae(estimate.values, truth.values)


def grid_nmae(estimate: np.ndarray, truth: np.ndarray) -> float:
    """Total absolute error divided by total true traffic (scale-free)."""
    estimate = np.asarray(estimate, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if estimate.shape != truth.shape:
        raise ShapeError(f"shape mismatch: {estimate.shape} vs {truth.shape}")
    denom = float(np.sum(np.abs(truth)))
    if denom == 0:
        raise DomainError("NMAE undefined for all-zero ground truth")
    return float(np.sum(np.abs(estimate - truth)) / denom)


def nmae(estimate: TrafficSnapshot, truth: TrafficSnapshot) -> float:
    return grid_nmae(estimate.values, truth.values)


def normalize(values: np.ndarray, stats: NormStats) -> np.ndarray:
    """Map raw traffic x to log(1 + x) / log_mean, element-wise."""
    values = np.asarray(values, dtype=np.float64)
    if np.any(values < 0):
        raise DomainError("normalize requires non-negative traffic")
    return np.log1p(values) / stats.log_mean


def denormalize(values: np.ndarray, stats: NormStats) -> np.ndarray:
    """Inverse of :func:`normalize`: exp(x * log_mean) - 1."""
    values = np.asarray(values, dtype=np.float64)
    return np.expm1(values * stats.log_mean)


def random_selection(t: int, shape: tuple[int, int], count: int,
                     rng: np.random.Generator) -> SelectionMatrix:
    """Uniform-random selection of exactly ``count`` distinct cells."""
    n = shape[0] * shape[1]
    if not 0 <= count <= n:
        raise RangeError(f"cannot select {count} cells out of {n}")
    bits = np.zeros(n, dtype=np.uint8)
    bits[rng.choice(n, size=count, replace=False)] = 1
    return SelectionMatrix(t=t, bits=bits.reshape(shape))


def rate_to_count(rate: float, n_cells: int) -> int:
    """Sampling rate to a concrete cell count (nearest integer)."""
    if not 0 <= rate <= 1:
        raise RangeError(f"sampling rate must lie in [0, 1], got {rate}")
    return int(round(rate * n_cells))


# ---------------------------------------------------------------------------
# Seed derivation
# ---------------------------------------------------------------------------

def derived_seed(master: int, *tags: object) -> int:
    """Stable sub-seed derived from a master seed and string/int tags.

    Every stochastic sub-operation takes a seed derived this way, so a whole
    pipeline rerun with one master seed is reproducible byte-for-byte.
    """
    crc = zlib.crc32(repr(tags).encode("utf-8"))
    return int(np.random.SeedSequence(entropy=(int(master), crc)).generate_state(1)[0])
