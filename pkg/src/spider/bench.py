"""Baselines, threshold analysis, FLOP accounting, and the experiment runner.

The random baseline reproduces the operator practice of sampling a fixed,
schedule-dependent number of random cells: its per-(weekday, hour) budget is
fitted on training data as the smallest count whose mean error over seeded
random masks clears the quality threshold. The historical baseline spends the
same budget on the most frequently selected cells instead.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

import matplotlib

matplotlib.use("Agg")
matplotlib.rcParams["svg.hashsalt"] = "spider"
import matplotlib.pyplot as plt

from spider.core import (
    AccountingError,
    ConfigError,
    NormStats,
    QualityConfig,
    RangeError,
    SelectionMatrix,
    derived_seed,
    random_selection,
    rate_to_count,
)
from spider.data import BUCKET_NAMES, BucketConfig, DatasetSeries
from spider.mtrnet import MtrnetModel, mtrnet_batch_infer
from spider.policy import (
    PolicyModel,
    aggregate_records,
    policy_predict,
    run_deployment,
)
from spider.reconstruct import Reconstructor

# ---------------------------------------------------------------------------
# FLOP accounting
# ---------------------------------------------------------------------------

_CONV_KINDS = {"conv2d", "conv3d", "deconv2d", "linear"}


def count_flops(layers: list[dict]) -> int:
    """Standard accounting: 2 * out_elems * kernel_volume * in_channels per
    convolution-like layer; pools pay their additions, activations one op per
    element. Unknown kinds raise."""
    total = 0
    for layer in layers:
        kind = layer.get("kind")
        out_elems = int(layer["out_elems"])
        kernel_volume = int(layer.get("kernel_volume", 1))
        in_channels = int(layer.get("in_channels", 1))
        if kind in _CONV_KINDS:
            total += 2 * out_elems * kernel_volume * in_channels
        elif kind == "sum_pool":
            total += out_elems * (kernel_volume - 1)
        elif kind in ("lrelu", "add", "sigmoid"):
            total += out_elems
        else:
            raise AccountingError(f"unknown layer kind {kind!r}")
    return total


# ---------------------------------------------------------------------------
# Random-mask reconstruction error (shared by budgets and the gain curve)
# ---------------------------------------------------------------------------

def _resolve_window_frames(reconstructor: Reconstructor,
                           window_frames: int | None) -> int:
    if window_frames is not None:
        return window_frames
    declared = getattr(reconstructor, "window_frames", None)
    return declared if declared is not None else 3


def _masked_window(normalized: np.ndarray, pos: int, t_w: int, count: int,
                   rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """One random-sampling trial: every frame of the window gets an
    independent mask of `count` cells; returns (masked values, bits)."""
    frames = normalized[pos - t_w + 1: pos + 1]
    shape = frames.shape[1:]
    masked = np.empty_like(frames)
    bits = np.empty((t_w,) + shape, dtype=np.uint8)
    for k in range(t_w):
        bits[k] = random_selection(0, shape, count, rng).bits
        masked[k] = frames[k] * bits[k]
    return masked, bits


def random_mask_error(series: DatasetSeries, stats: NormStats,
                      reconstructor: Reconstructor, positions: list[int],
                      count: int, n_masks: int, seed: int,
                      window_frames: int | None = None) -> float:
    """Mean reconstruction MAE at a fixed random-sampling cell count.

    Windows mimic the random-sampling steady state: history frames are masked
    at the same count as the current frame. ``positions`` index into the
    series and must leave room for a full window.
    """
    normalized = np.log1p(series.values) / stats.log_mean
    t_w = _resolve_window_frames(reconstructor, window_frames)
    if any(pos < t_w - 1 or pos >= len(series) for pos in positions):
        raise RangeError(f"positions must lie in [{t_w - 1}, {len(series)})")
    batch_model = getattr(reconstructor, "batch_model", None)
    errors = []
    for pos in positions:
        rng = np.random.default_rng(derived_seed(seed, "mask-error", pos, count))
        trials = [_masked_window(normalized, pos, t_w, count, rng)
                  for _ in range(n_masks)]
        truth = normalized[pos]
        if batch_model is not None:
            windows = np.stack([values for values, _ in trials])
            bits = np.stack([b[-1] for _, b in trials])
            estimates = mtrnet_batch_infer(batch_model, windows,
                                           current_bits=bits)
        else:
            from spider.core import SelectionMatrix as _SM
            from spider.core import SparseMeasurement, StateWindow
            estimates = []
            t_base = series.t0 + pos - t_w + 1
            for values, bits in trials:
                frames = tuple(
                    SparseMeasurement(
                        t=t_base + k, values=values[k],
                        mask=_SM(t=t_base + k, bits=bits[k]))
                    for k in range(t_w)
                )
                estimates.append(reconstructor(StateWindow(frames)).values)
            estimates = np.stack(estimates)
        errors.append(float(np.abs(estimates - truth[None]).mean()))
    return float(np.mean(errors))


# ---------------------------------------------------------------------------
# Budget table and frequency matrix
# ---------------------------------------------------------------------------

@dataclass
class BudgetTable:
    """Mean random-sampling cell count needed per (weekday, hour) bucket."""

    entries: dict[tuple[int, int], float]
    unreachable: set[tuple[int, int]] = field(default_factory=set)

    def lookup(self, series: DatasetSeries, t: int) -> float:
        key = (series.day_of_week(t), series.hour_of_day(t))
        if key in self.entries:
            return self.entries[key]
        warnings.warn(f"no budget fitted for bucket {key}; using the mean")
        return float(np.mean(list(self.entries.values())))


@dataclass
class FrequencyMatrix:
    """Per-(weekday, hour) mean of binary selection matrices."""

    entries: dict[tuple[int, int], np.ndarray]
    shape: tuple[int, int]

    def lookup(self, series: DatasetSeries, t: int) -> np.ndarray:
        key = (series.day_of_week(t), series.hour_of_day(t))
        grid = self.entries.get(key)
        if grid is None:
            warnings.warn(f"no selections recorded for bucket {key}; zero grid")
            return np.zeros(self.shape)
        return grid


def build_budget_table(train: DatasetSeries, reconstructor: Reconstructor,
                       quality: QualityConfig, stats: NormStats,
                       n_masks: int = 20, times_per_bucket: int = 2,
                       max_search_iters: int = 12, seed: int = 0,
                       window_frames: int | None = None) -> BudgetTable:
    """Fit the per-bucket random-sampling budget by bisecting the cell count
    whose mean MAE over seeded masks first drops below the threshold."""
    t_w = _resolve_window_frames(reconstructor, window_frames)
    n_cells = train.geometry.n_cells
    usable = [t for t in train.timestamps if t - train.t0 >= t_w - 1]
    if not usable:
        raise RangeError("training series too short for one window")

    by_bucket: dict[tuple[int, int], list[int]] = {}
    for t in usable:
        by_bucket.setdefault(
            (train.day_of_week(t), train.hour_of_day(t)), []).append(t)

    entries: dict[tuple[int, int], float] = {}
    unreachable: set[tuple[int, int]] = set()
    for key in sorted(by_bucket):
        bucket_rng = np.random.default_rng(derived_seed(seed, "budget", key))
        times = sorted(
            int(x) for x in bucket_rng.choice(
                by_bucket[key],
                size=min(times_per_bucket, len(by_bucket[key])),
                replace=False)
        )
        positions = [train.index_of(t) for t in times]
        if np.isinf(quality.epsilon):
            entries[key] = 0.0
            continue

        cache: dict[int, float] = {}

        def mae_at(count: int) -> float:
            if count not in cache:
                cache[count] = random_mask_error(
                    train, stats, reconstructor, positions, count,
                    n_masks, derived_seed(seed, "budget-mask", key),
                    window_frames=t_w)
            return cache[count]

        if mae_at(n_cells) >= quality.epsilon:
            entries[key] = float(n_cells)
            unreachable.add(key)
            continue
        lo, hi = 1, n_cells
        for _ in range(max_search_iters):
            if lo >= hi:
                break
            mid = (lo + hi) // 2
            if mae_at(mid) < quality.epsilon:
                hi = mid
            else:
                lo = mid + 1
        entries[key] = float(hi)
    return BudgetTable(entries=entries, unreachable=unreachable)


def random_baseline(budget: BudgetTable, series: DatasetSeries, t: int,
                    seed: int = 0) -> SelectionMatrix:
    """Exactly the budgeted number of uniform-random cells, seeded per t."""
    count = int(round(budget.lookup(series, t)))
    count = min(count, series.geometry.n_cells)
    rng = np.random.default_rng(derived_seed(seed, "random-baseline", t))
    return random_selection(t, series.geometry.shape, count, rng)


def build_frequency_matrix(selections: list[tuple[int, SelectionMatrix]],
                           series: DatasetSeries) -> FrequencyMatrix:
    """Element-wise mean of the selection matrices landing in each bucket."""
    sums: dict[tuple[int, int], np.ndarray] = {}
    counts: dict[tuple[int, int], int] = {}
    shape = series.geometry.shape
    for t, selection in selections:
        if selection.shape != shape:
            raise ConfigError("selection matrix shape does not match the series")
        key = (series.day_of_week(t), series.hour_of_day(t))
        sums[key] = sums.get(key, np.zeros(shape)) + selection.bits
        counts[key] = counts.get(key, 0) + 1
    entries = {key: sums[key] / counts[key] for key in sums}
    return FrequencyMatrix(entries=entries, shape=shape)


def historical_baseline(freq: FrequencyMatrix, budget: BudgetTable,
                        series: DatasetSeries, t: int) -> SelectionMatrix:
    """The budgeted number of most-frequently-selected cells (ties row-major)."""
    count = int(round(budget.lookup(series, t)))
    count = min(count, series.geometry.n_cells)
    grid = freq.lookup(series, t)
    order = np.argsort(-grid.ravel(), kind="stable")
    bits = np.zeros(grid.size, dtype=np.uint8)
    bits[order[:count]] = 1
    return SelectionMatrix(t=t, bits=bits.reshape(grid.shape))


# ---------------------------------------------------------------------------
# Gain curve and threshold choice
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GainPoint:
    rate: float
    mean_mae: float
    gain: float  # relative MAE reduction vs. the previous rate


def gain_curve(test: DatasetSeries, reconstructor: Reconstructor,
               rates: list[float], stats: NormStats, n_masks: int = 20,
               times: int = 3, seed: int = 0,
               window_frames: int | None = None) -> list[GainPoint]:
    """Mean MAE per random sampling rate and the relative reduction between
    consecutive rates (the first rate's gain is 0)."""
    if sorted(rates) != list(rates):
        raise ConfigError("rates must be ascending")
    t_w = _resolve_window_frames(reconstructor, window_frames)
    usable = [t for t in test.timestamps if t - test.t0 >= t_w - 1]
    if not usable:
        raise RangeError("series too short for one window")
    rng = np.random.default_rng(derived_seed(seed, "gain-times"))
    sample_times = sorted(
        int(x) for x in rng.choice(usable, size=min(times, len(usable)),
                                   replace=False)
    )
    positions = [test.index_of(t) for t in sample_times]
    n_cells = test.geometry.n_cells

    points: list[GainPoint] = []
    prev_mae: float | None = None
    for rate in rates:
        count = max(1, rate_to_count(rate, n_cells))
        mae = random_mask_error(test, stats, reconstructor, positions, count,
                                n_masks, derived_seed(seed, "gain", rate),
                                window_frames=t_w)
        gain = 0.0 if prev_mae is None else (prev_mae - mae) / prev_mae
        points.append(GainPoint(rate=float(rate), mean_mae=mae, gain=gain))
        prev_mae = mae
    return points


def choose_threshold(curve: list[GainPoint], knee_rate: float = 0.35,
                     gain_cutoff: float | None = None) -> float:
    """Quality threshold = mean MAE at the sampling-rate knee.

    With no ``gain_cutoff`` the knee is the fixed ``knee_rate`` (nearest
    available rate, with a warning if absent); otherwise it is the first rate
    at or past ``knee_rate`` whose gain falls below the cutoff, else the last
    rate.
    """
    if not curve:
        raise ConfigError("empty gain curve")
    if gain_cutoff is None:
        exact = [p for p in curve if p.rate == knee_rate]
        if exact:
            return exact[0].mean_mae
        nearest = min(curve, key=lambda p: abs(p.rate - knee_rate))
        warnings.warn(
            f"rate {knee_rate} absent from the curve; using {nearest.rate}"
        )
        return nearest.mean_mae
    for point in curve:
        if point.rate >= knee_rate and point.gain < gain_cutoff:
            return point.mean_mae
    return curve[-1].mean_mae


# ---------------------------------------------------------------------------
# Experiment runner
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ReportRow:
    strategy: str
    bucket: str
    mean_count: int
    nmae: float


@dataclass(frozen=True)
class ExperimentReport:
    rows: tuple[ReportRow, ...]

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["strategy", "bucket", "count", "nmae"])
            for row in self.rows:
                writer.writerow([row.strategy, row.bucket, row.mean_count,
                                 f"{row.nmae:.6f}"])

    def cell(self, strategy: str, bucket: str) -> ReportRow:
        for row in self.rows:
            if row.strategy == strategy and row.bucket == bucket:
                return row
        raise KeyError((strategy, bucket))


def _write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def run_experiment(test: DatasetSeries, mtrnet: MtrnetModel,
                   policy: PolicyModel, budget: BudgetTable,
                   freq: FrequencyMatrix, buckets: BucketConfig,
                   seed: int, out_dir: str | Path) -> ExperimentReport:
    """Evaluate random, historical, and learned-policy selection over the test
    split; write the report table and the data behind each figure."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stats = mtrnet.norm_stats
    if stats is None:
        raise ConfigError("reconstruction model carries no normalizer")

    def random_selector(t, window, tf):
        return random_baseline(budget, test, t, seed=derived_seed(seed, "rnd"))

    def historical_selector(t, window, tf):
        return historical_baseline(freq, budget, test, t)

    def policy_selector(t, window, tf):
        selection, _ = policy_predict(policy, window, tf)
        return selection

    strategies = {
        "random": random_selector,
        "historical": historical_selector,
        "spider": policy_selector,
    }
    all_records = {}
    all_selections: dict[str, list[tuple[int, SelectionMatrix]]] = {}
    reports = {}
    for name, selector in strategies.items():
        captured: list[tuple[int, SelectionMatrix]] = []

        def recording_selector(t, window, tf, _selector=selector,
                               _captured=captured):
            selection = _selector(t, window, tf)
            _captured.append((t, selection))
            return selection

        records = run_deployment(recording_selector, test, mtrnet, stats)
        all_records[name] = records
        all_selections[name] = captured
        reports[name] = aggregate_records(records, test, buckets)

    rows = []
    for name in strategies:
        for bucket in BUCKET_NAMES:
            agg = reports[name][bucket]
            rows.append(ReportRow(
                strategy=name,
                bucket=bucket,
                mean_count=int(round(agg["mean_cells"])),
                nmae=float(agg["nmae"]),
            ))
    report = ExperimentReport(rows=tuple(rows))
    report.to_csv(out_dir / "report.csv")

    _emit_cells_over_time(all_records, test, stats, out_dir)
    _emit_per_snapshot_tables(all_records, out_dir)
    emit_selection_heatmaps(all_selections, test, buckets, out_dir)
    return report


def _emit_cells_over_time(all_records: dict, test: DatasetSeries,
                          stats: NormStats, out_dir: Path) -> None:
    names = sorted(all_records)
    timestamps = [r.t for r in all_records[names[0]]]
    mean_traffic = [float(test.values[test.index_of(t)].mean())
                    for t in timestamps]
    rows = []
    for i, t in enumerate(timestamps):
        row = [t] + [all_records[n][i].cells_selected for n in names]
        row.append(f"{mean_traffic[i]:.6f}")
        rows.append(row)
    _write_csv(out_dir / "cells_over_time.csv",
               ["t"] + names + ["mean_traffic"], rows)

    fig, ax1 = plt.subplots(figsize=(10, 4))
    for n in names:
        ax1.plot(timestamps, [r.cells_selected for r in all_records[n]],
                 label=n)
    ax1.set_xlabel("timestep")
    ax1.set_ylabel("cells selected")
    ax2 = ax1.twinx()
    ax2.plot(timestamps, mean_traffic, color="red", alpha=0.4,
             label="mean traffic")
    ax2.set_ylabel("mean traffic volume")
    ax1.legend(loc="upper left")
    fig.tight_layout()
    fig.savefig(out_dir / "cells_over_time.svg", metadata={"Date": None})
    plt.close(fig)


def _emit_per_snapshot_tables(all_records: dict, out_dir: Path) -> None:
    for name, records in sorted(all_records.items()):
        rows = [[r.t, r.cells_selected, f"{r.nmae:.6f}"] for r in records]
        _write_csv(out_dir / f"strategy_{name}_per_snapshot.csv",
                   ["t", "cells", "nmae"], rows)


def emit_selection_heatmaps(selections: dict[str, list[tuple[int, SelectionMatrix]]],
                            test: DatasetSeries, buckets: BucketConfig,
                            out_dir: str | Path) -> None:
    """Per-strategy cell selection frequency grids, split peak/off-peak,
    written as CSV grids and heatmap figures."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for name, pairs in sorted(selections.items()):
        for bucket in ("peak", "off-peak"):
            grids = [
                np.asarray(sel.bits, dtype=float)
                for t, sel in pairs
                if bucket in buckets.buckets_of(test, t)
            ]
            grid = np.mean(grids, axis=0) if grids else np.zeros(
                test.geometry.shape)
            tag = bucket.replace("-", "")
            _write_csv(out_dir / f"freq_{name}_{tag}.csv",
                       [f"c{j}" for j in range(grid.shape[1])],
                       [[f"{v:.6f}" for v in row] for row in grid])
            fig, ax = plt.subplots(figsize=(4, 4))
            im = ax.imshow(grid, cmap="viridis", vmin=0.0)
            fig.colorbar(im, ax=ax, shrink=0.8)
            ax.set_title(f"{name} selection frequency ({bucket})")
            fig.tight_layout()
            fig.savefig(out_dir / f"freq_{name}_{tag}.svg", metadata={"Date": None})
            plt.close(fig)
