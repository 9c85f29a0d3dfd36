"""Classical reconstruction baselines: spatial KNN interpolation and low-rank
matrix completion, plain and with spatio-temporal smoothness penalties.

Each baseline maps sparse measurements to a complete snapshot estimate, so any
of them can serve as the reconstruction function inside the sampling loop and
as an oracle when testing the neural reconstructor.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
import scipy.sparse as sp

from spider.core import (
    ConfigError,
    InsufficientDataError,
    SparseMeasurement,
    StateWindow,
    TrafficSnapshot,
    derived_seed,
)

Reconstructor = Callable[[StateWindow], TrafficSnapshot]


# ---------------------------------------------------------------------------
# Spatial KNN
# ---------------------------------------------------------------------------

def knn_s(measurement: SparseMeasurement, k_nn: int = 5) -> TrafficSnapshot:
    """Inverse-distance-weighted interpolation from the k nearest sampled cells.

    Sampled cells keep their measured value. Distances are Euclidean between
    cell coordinates, and distance ties are broken in row-major cell order.
    """
    if k_nn < 1:
        raise ConfigError(f"k_nn must be >= 1, got {k_nn}")
    bits = measurement.mask.bits
    rows, cols = bits.shape
    sampled = np.flatnonzero(bits.ravel())  # row-major order, ties rely on this
    if sampled.size == 0:
        raise InsufficientDataError("KNN interpolation needs at least one sampled cell")

    out = measurement.values.copy()
    targets = np.flatnonzero(bits.ravel() == 0)
    if targets.size == 0:
        return TrafficSnapshot(t=measurement.t, values=out)

    k = min(k_nn, sampled.size)
    src_r, src_c = np.divmod(sampled, cols)
    src_vals = measurement.values.ravel()[sampled]
    flat = out.ravel()

    chunk = max(1, 2_000_000 // max(1, sampled.size))
    for lo in range(0, targets.size, chunk):
        tgt = targets[lo:lo + chunk]
        tr, tc = np.divmod(tgt, cols)
        d2 = ((tr[:, None] - src_r[None, :]) ** 2.0
              + (tc[:, None] - src_c[None, :]) ** 2.0)
        order = np.argsort(d2, axis=1, kind="stable")[:, :k]
        near_d2 = np.take_along_axis(d2, order, axis=1)
        near_v = src_vals[order]
        weights = 1.0 / np.sqrt(near_d2)
        flat[tgt] = (weights * near_v).sum(axis=1) / weights.sum(axis=1)

    return TrafficSnapshot(t=measurement.t, values=out)


def knn_reconstructor(k_nn: int = 5) -> Reconstructor:
    """Window-level adapter: interpolate the current frame only."""
    def reconstruct(window: StateWindow) -> TrafficSnapshot:
        return knn_s(window.current, k_nn=k_nn)
    reconstruct.window_frames = None  # any window length accepted
    return reconstruct


# ---------------------------------------------------------------------------
# Low-rank completion
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CsConfig:
    """Settings for regularized low-rank completion.

    ``lam`` trades factor-norm regularization against fit to the observed
    entries; ``tol`` is the relative objective-change stopping tolerance.
    Each restart anneals the ridge from a data-scaled value down to ``lam``
    over ``warm_sweeps`` sweeps before the monotone fixed-``lam`` phase;
    the best restart by final objective wins (exact alternating minimization
    stalls on rank-collapse plateaus from a single random start).
    """

    rank: int = 4
    lam: float = 1e-3
    max_iters: int = 200
    tol: float = 1e-6
    seed: int = 0
    warm_sweeps: int = 20
    n_restarts: int = 4

    def __post_init__(self) -> None:
        if self.rank < 1:
            raise ConfigError("rank must be >= 1")
        if self.lam < 0:
            raise ConfigError("lam must be >= 0")
        if self.max_iters < 1:
            raise ConfigError("max_iters must be >= 1")
        if self.tol <= 0:
            raise ConfigError("tol must be positive")
        if self.warm_sweeps < 0 or self.n_restarts < 1:
            raise ConfigError("warm_sweeps must be >= 0 and n_restarts >= 1")


@dataclass(frozen=True)
class StcsConfig(CsConfig):
    """Low-rank completion plus grid-Laplacian and first-difference penalties."""

    spatial_weight: float = 0.1
    temporal_weight: float = 0.1

    def __post_init__(self) -> None:
        super().__post_init__()
        if self.spatial_weight < 0 or self.temporal_weight < 0:
            raise ConfigError("penalty weights must be >= 0")


@dataclass(frozen=True)
class FactorPair:
    """Low-rank factors: the completed matrix is ``left @ right.T``."""

    left: np.ndarray   # (n, rank)
    right: np.ndarray  # (m, rank)


@dataclass(frozen=True)
class CompletionResult:
    estimate: TrafficSnapshot
    factors: FactorPair
    objective: tuple[float, ...]
    converged: bool


def _objective(left, right, values, observed, lam, sp_op, sw, tmp_op, tw) -> float:
    pred = left @ right.T
    resid = (pred - values) * observed
    obj = lam * (np.sum(left * left) + np.sum(right * right)) + np.sum(resid * resid)
    if sw != 0.0:
        smoothed = sp_op @ pred
        obj += sw * np.sum(smoothed * smoothed)
    if tw != 0.0:
        diffed = pred @ tmp_op
        obj += tw * np.sum(diffed * diffed)
    return float(obj)


def _sweep(left, right, values, lam, row_obs, col_obs, eye,
           sp_gram, sw, tmp_gram, tw) -> None:
    """One alternating pass of exact per-row ridge solves (in place).

    Each row solve minimizes the full objective over that row with every
    other row held at its latest value, so the pass never increases the
    objective. The penalty terms enter both factors: the spatial penalty
    adds its Gram through the left rows' coupling and a constant
    ``left' A left`` load on every right row; the temporal penalty is the
    mirror image.
    """
    n, m = values.shape
    gram_r = right.T @ right
    load_r = tw * (right.T @ (tmp_gram @ right)) if tw != 0.0 else None
    if sw != 0.0:
        sp_indptr, sp_indices, sp_data = sp_gram.indptr, sp_gram.indices, sp_gram.data
        sp_diag = sp_gram.diagonal()
    for i in range(n):
        cols_i = row_obs[i]
        r_obs = right[cols_i]
        system = lam * eye + r_obs.T @ r_obs
        rhs = values[i, cols_i] @ r_obs
        if sw != 0.0:
            lo, hi = sp_indptr[i], sp_indptr[i + 1]
            row_dot = sp_data[lo:hi] @ left[sp_indices[lo:hi]]
            coupling = row_dot - sp_diag[i] * left[i]
            system = system + sw * sp_diag[i] * gram_r
            rhs = rhs - sw * (coupling @ gram_r)
        if tw != 0.0:
            system = system + load_r
        left[i] = np.linalg.solve(system, rhs)

    gram_l = left.T @ left
    load_l = sw * (left.T @ (sp_gram @ left)) if sw != 0.0 else None
    for j in range(m):
        rows_j = col_obs[j]
        l_obs = left[rows_j]
        system = lam * eye + l_obs.T @ l_obs
        rhs = values[rows_j, j] @ l_obs
        if tw != 0.0:
            diag = tmp_gram[j, j]
            coupling = tmp_gram[j] @ right - diag * right[j]
            system = system + tw * diag * gram_l
            rhs = rhs - tw * (coupling @ gram_l)
        if sw != 0.0:
            system = system + load_l
        right[j] = np.linalg.solve(system, rhs)


def complete_matrix(values: np.ndarray, observed: np.ndarray, config: CsConfig,
                    spatial_op: sp.spmatrix | None = None,
                    spatial_weight: float = 0.0,
                    temporal_op: np.ndarray | None = None,
                    temporal_weight: float = 0.0,
                    ) -> tuple[np.ndarray, FactorPair, tuple[float, ...], bool]:
    """Alternating ridge least-squares on the masked completion objective.

    Minimizes ``lam (|L|^2 + |R|^2) + |(L R^T) o S - C|^2`` plus the optional
    penalties ``spatial_weight |P (L R^T)|^2`` and ``temporal_weight
    |(L R^T) T|^2``. Factors start i.i.d. uniform scaled by the mean observed
    value; a short annealed-ridge warm phase then a fixed-``lam`` phase run
    per restart, and the restart with the lowest final objective wins. The
    reported history covers the fixed-``lam`` phase and is monotone
    non-increasing; any increase beyond float slack raises.
    """
    values = np.asarray(values, dtype=np.float64)
    observed = np.asarray(observed, dtype=np.float64)
    if values.shape != observed.shape or values.ndim != 2:
        raise ConfigError("values and observed mask must be equal 2-D shapes")
    n, m = values.shape
    r = config.rank
    if r > min(n, m):
        raise ConfigError(f"rank {r} exceeds min matrix dimension {min(n, m)}")
    n_obs = observed.sum()
    if n_obs < 1:
        raise InsufficientDataError("completion needs at least one observed entry")

    sw, tw = float(spatial_weight), float(temporal_weight)
    sp_gram = (spatial_op.T @ spatial_op).tocsr() if sw != 0.0 else None
    tmp_gram = (temporal_op @ temporal_op.T) if tw != 0.0 else None

    scale = float((values * observed).sum() / n_obs)
    lam_start = max(config.lam, float((values * values).sum() / (n + m)))
    row_obs = [np.flatnonzero(observed[i]) for i in range(n)]
    col_obs = [np.flatnonzero(observed[:, j]) for j in range(m)]
    eye = np.eye(r)

    best: tuple[np.ndarray, np.ndarray, list[float], bool] | None = None
    for restart in range(config.n_restarts):
        rng = np.random.default_rng(derived_seed(config.seed, "als-restart", restart))
        left = rng.random((n, r)) * scale
        right = rng.random((m, r)) * scale

        for k in range(config.warm_sweeps):
            frac = k / max(config.warm_sweeps - 1, 1)
            lam_k = lam_start * (max(config.lam, 1e-12) / lam_start) ** frac
            _sweep(left, right, values, lam_k, row_obs, col_obs, eye,
                   sp_gram, sw, tmp_gram, tw)

        history = [_objective(left, right, values, observed, config.lam,
                              spatial_op, sw, temporal_op, tw)]
        converged = False
        for _ in range(config.max_iters):
            _sweep(left, right, values, config.lam, row_obs, col_obs, eye,
                   sp_gram, sw, tmp_gram, tw)
            obj = _objective(left, right, values, observed, config.lam,
                             spatial_op, sw, temporal_op, tw)
            prev = history[-1]
            if obj > prev * (1 + 1e-9) + 1e-12:
                raise RuntimeError(f"completion objective increased: {prev} -> {obj}")
            history.append(obj)
            if prev == 0.0 or abs(prev - obj) / max(prev, 1e-300) < config.tol:
                converged = True
                break

        if best is None or history[-1] < best[2][-1]:
            best = (left, right, history, converged)

    left, right, history, converged = best
    pred = left @ right.T
    return pred, FactorPair(left=left, right=right), tuple(history), converged


def cs_complete(measurement: SparseMeasurement, config: CsConfig) -> CompletionResult:
    """Complete one snapshot grid by regularized low-rank factorization."""
    bits = measurement.mask.bits
    if int(bits.sum()) < config.rank:
        raise InsufficientDataError(
            f"need at least rank={config.rank} sampled cells, got {int(bits.sum())}"
        )
    pred, factors, history, converged = complete_matrix(
        measurement.values, bits.astype(np.float64), config
    )
    estimate = TrafficSnapshot(t=measurement.t, values=np.clip(pred, 0.0, None))
    return CompletionResult(estimate, factors, history, converged)


def grid_laplacian(rows: int, cols: int) -> sp.csr_matrix:
    """4-neighbor graph Laplacian of the row-major cell grid."""
    n = rows * cols
    diag = np.zeros(n)
    data, ri, ci = [], [], []
    for idx in range(n):
        r, c = divmod(idx, cols)
        for nr, nc in ((r - 1, c), (r + 1, c), (r, c - 1), (r, c + 1)):
            if 0 <= nr < rows and 0 <= nc < cols:
                diag[idx] += 1.0
                ri.append(idx)
                ci.append(nr * cols + nc)
                data.append(-1.0)
    lap = sp.coo_matrix((data, (ri, ci)), shape=(n, n))
    return (lap + sp.diags(diag)).tocsr()


def first_difference(m: int) -> np.ndarray:
    """(m, m-1) operator whose columns are consecutive-step differences."""
    op = np.zeros((m, max(m - 1, 0)))
    for k in range(m - 1):
        op[k, k] = 1.0
        op[k + 1, k] = -1.0
    return op


def stcs_complete(window: StateWindow, config: StcsConfig) -> CompletionResult:
    """Low-rank completion of the stacked (cells x frames) window matrix with
    spatial-Laplacian and temporal first-difference smoothness penalties.

    Returns the last-frame column reshaped back to the grid.
    """
    rows, cols = window.shape
    stacked = window.stacked_values().reshape(len(window), rows * cols).T
    observed = window.stacked_bits().reshape(len(window), rows * cols).T
    if observed.sum() < 1:
        raise InsufficientDataError("window holds no observed cells")
    if config.rank > min(stacked.shape):
        raise ConfigError(
            f"rank {config.rank} exceeds stacked matrix min dimension "
            f"{min(stacked.shape)}"
        )
    pred, factors, history, converged = complete_matrix(
        stacked, observed.astype(np.float64), config,
        spatial_op=grid_laplacian(rows, cols),
        spatial_weight=config.spatial_weight,
        temporal_op=first_difference(len(window)),
        temporal_weight=config.temporal_weight,
    )
    last = np.clip(pred[:, -1].reshape(rows, cols), 0.0, None)
    estimate = TrafficSnapshot(t=window.t, values=last)
    return CompletionResult(estimate, factors, history, converged)


def cs_reconstructor(config: CsConfig) -> Reconstructor:
    def reconstruct(window: StateWindow) -> TrafficSnapshot:
        return cs_complete(window.current, config).estimate
    reconstruct.window_frames = None
    return reconstruct


def stcs_reconstructor(config: StcsConfig) -> Reconstructor:
    def reconstruct(window: StateWindow) -> TrafficSnapshot:
        return stcs_complete(window, config).estimate
    reconstruct.window_frames = None
    return reconstruct
