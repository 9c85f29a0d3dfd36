"""One-shot selection policy: predict the whole selection matrix for the next
snapshot directly from the sparse history window, trained on the matrices the
selection agent produced.

Prediction treats selection as per-cell multi-label classification. The
sigmoid probability grid is min-max normalized per snapshot (selection
frequencies are typically skewed) and binarized with a strict threshold.
"""

from __future__ import annotations

import time
import warnings
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from spider.core import (
    ConfigError,
    InsufficientDataError,
    NormStats,
    QualityConfig,
    SelectionMatrix,
    ShapeError,
    SparseMeasurement,
    StateWindow,
    derived_seed,
    empty_measurement,
)
from spider.agent import SelectionDataset
from spider.data import BucketConfig, BUCKET_NAMES, DatasetSeries
from spider.mtrnet import (
    MtrnetConfig,
    MtrnetModel,
    MtrnetNet,
    TrainHyper,
    mtrnet_infer,
)


@dataclass(frozen=True)
class PolicyConfig:
    """Selection policy settings: the reconstruction trunk's widths plus the
    binarization threshold."""

    trunk: MtrnetConfig = field(default_factory=MtrnetConfig)
    threshold: float = 0.5

    def __post_init__(self) -> None:
        if not 0 < self.threshold < 1:
            raise ConfigError("threshold must lie strictly between 0 and 1")


@dataclass
class PolicyModel:
    net: MtrnetNet
    config: PolicyConfig
    seed: int
    norm_stats: NormStats | None = None


def policy_init(config: PolicyConfig, seed: int) -> PolicyModel:
    torch.manual_seed(derived_seed(seed, "policy-init"))
    net = MtrnetNet(config.trunk, extra_planes=3, sigmoid_output=True)
    return PolicyModel(net=net, config=config, seed=seed)


def binarize_probabilities(probs: np.ndarray, threshold: float,
                           t: int) -> tuple[SelectionMatrix, np.ndarray]:
    """Min-max normalize a probability grid per snapshot, then threshold.

    Bits are 1 strictly above the threshold. A constant grid has no order
    information, so it degenerates to an empty selection (with a warning).
    """
    lo, hi = float(probs.min()), float(probs.max())
    if hi == lo:
        warnings.warn("constant probability grid: selecting no cells")
        bits = np.zeros(probs.shape, dtype=np.uint8)
        return SelectionMatrix(t=t, bits=bits), np.zeros_like(probs)
    normed = (probs - lo) / (hi - lo)
    bits = (normed > threshold).astype(np.uint8)
    return SelectionMatrix(t=t, bits=bits), normed


def policy_predict(model: PolicyModel, window: StateWindow,
                   time_features: tuple[float, float, float]
                   ) -> tuple[SelectionMatrix, np.ndarray]:
    """Predict which cells to sample for the window's current timestamp."""
    if len(window) != model.config.trunk.window_frames:
        raise ShapeError(
            f"window has {len(window)} frames, policy expects "
            f"{model.config.trunk.window_frames}"
        )
    model.net.eval()
    with torch.no_grad():
        x = torch.from_numpy(
            window.stacked_values().astype(np.float32))[None, None]
        tf = torch.tensor([time_features], dtype=torch.float32)
        probs = model.net(x, tf)[0].numpy().astype(np.float64)
    selection, _ = binarize_probabilities(probs, model.config.threshold,
                                          window.t)
    return selection, probs


def bce_loss(probabilities: np.ndarray, labels: np.ndarray,
             eps: float = 1e-7) -> float:
    """Binary cross-entropy between probability grids and binary labels."""
    p = np.clip(np.asarray(probabilities, dtype=np.float64), eps, 1 - eps)
    y = np.asarray(labels, dtype=np.float64)
    if p.shape != y.shape:
        raise ShapeError(f"shape mismatch: {p.shape} vs {y.shape}")
    return float(-(y * np.log(p) + (1 - y) * np.log(1 - p)).mean())


def policy_train(model: PolicyModel, dataset: SelectionDataset,
                 hyper: TrainHyper) -> tuple[PolicyModel, list[dict]]:
    """Minimize binary cross-entropy between predicted probabilities and the
    agent's selection matrices."""
    if len(dataset) == 0:
        raise InsufficientDataError("selection dataset is empty")
    if dataset.window_frames != model.config.trunk.window_frames:
        raise ConfigError(
            f"dataset windows have {dataset.window_frames} frames, policy "
            f"expects {model.config.trunk.window_frames}"
        )
    xs = np.stack([s.window_values for s in dataset.samples])
    tfs = np.array([s.time_features for s in dataset.samples])
    ys = np.stack([s.label_bits for s in dataset.samples]).astype(np.float32)

    torch.manual_seed(derived_seed(hyper.seed, "policy-torch"))
    net = model.net
    optimizer = torch.optim.Adam(net.parameters(), lr=hyper.learning_rate)
    history: list[dict] = []
    n = len(dataset)
    for epoch in range(hyper.epochs):
        rng = np.random.default_rng(derived_seed(hyper.seed, "policy-epoch", epoch))
        order = rng.permutation(n)
        net.train()
        total = 0.0
        for start in range(0, n, hyper.batch_size):
            idx = order[start: start + hyper.batch_size]
            x = torch.from_numpy(xs[idx].astype(np.float32))[:, None]
            tf = torch.from_numpy(tfs[idx].astype(np.float32))
            y = torch.from_numpy(ys[idx])
            optimizer.zero_grad()
            probs = net(x, tf).clamp(1e-7, 1 - 1e-7)
            loss = F.binary_cross_entropy(probs, y)
            loss.backward()
            optimizer.step()
            total += float(loss.item()) * len(idx)
        history.append({"epoch": epoch, "bce": total / n})
    return model, history


# ---------------------------------------------------------------------------
# Deployment-style evaluation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DeploymentRecord:
    """Per-timestamp outcome of an online selection+reconstruction step."""

    t: int
    cells_selected: int
    mae: float
    abs_err_sum: float
    truth_abs_sum: float
    history_only: bool
    latency_s: float

    @property
    def nmae(self) -> float:
        return self.abs_err_sum / self.truth_abs_sum if self.truth_abs_sum else 0.0


def run_deployment(selector, test: DatasetSeries, mtrnet: MtrnetModel,
                   stats: NormStats) -> list[DeploymentRecord]:
    """Online loop: each timestamp's selection sees only past sparse frames.

    ``selector(t, start_window, time_features) -> SelectionMatrix`` chooses
    the cells; the chosen measurements are collected from ground truth, the
    reconstruction network fills the rest, and the collected frame becomes
    history for later timestamps. All math in normalized space.
    """
    t_w = mtrnet.config.window_frames
    shape = test.geometry.shape
    normalized = np.log1p(test.values) / stats.log_mean
    history: dict[int, SparseMeasurement] = {}
    records: list[DeploymentRecord] = []
    for t in range(test.t0 + t_w - 1, test.t0 + len(test)):
        frames = tuple(
            history.get(tt) or empty_measurement(tt, shape)
            for tt in range(t - t_w + 1, t)
        )
        start_window = StateWindow(frames + (empty_measurement(t, shape),))
        tf = test.time_features(t)
        started = time.perf_counter()
        selection = selector(t, start_window, tf)
        latency = time.perf_counter() - started

        truth = normalized[test.index_of(t)]
        collected = truth * selection.bits
        frame = SparseMeasurement(t=t, values=collected,
                                  mask=SelectionMatrix(t=t, bits=selection.bits))
        window = start_window.replace_current(frame)
        estimate = mtrnet_infer(mtrnet, window)
        err = np.abs(estimate.values - truth)
        records.append(DeploymentRecord(
            t=t,
            cells_selected=int(selection.n_selected),
            mae=float(err.mean()),
            abs_err_sum=float(err.sum()),
            truth_abs_sum=float(np.abs(truth).sum()),
            history_only=selection.n_selected == 0,
            latency_s=latency,
        ))
        history[t] = frame
    return records


def aggregate_records(records: list[DeploymentRecord], test: DatasetSeries,
                      buckets: BucketConfig) -> dict[str, dict]:
    """Bucket rollup: mean cells selected and traffic-weighted NMAE."""
    sums: dict[str, dict] = {
        name: {"count": 0, "cells": 0.0, "err": 0.0, "truth": 0.0}
        for name in BUCKET_NAMES
    }
    for record in records:
        for name in buckets.buckets_of(test, record.t):
            agg = sums[name]
            agg["count"] += 1
            agg["cells"] += record.cells_selected
            agg["err"] += record.abs_err_sum
            agg["truth"] += record.truth_abs_sum
    report = {}
    for name, agg in sums.items():
        report[name] = {
            "snapshots": agg["count"],
            "mean_cells": agg["cells"] / agg["count"] if agg["count"] else 0.0,
            "nmae": agg["err"] / agg["truth"] if agg["truth"] else 0.0,
        }
    return report


def policy_evaluate(model: PolicyModel, test: DatasetSeries,
                    mtrnet: MtrnetModel, quality: QualityConfig | None = None,
                    buckets: BucketConfig | None = None) -> dict:
    """Run the policy online over a test series and report selection counts,
    reconstruction NMAE, per-bucket breakdowns, and prediction latency."""
    stats = mtrnet.norm_stats
    if stats is None:
        raise ConfigError("reconstruction model carries no normalizer")

    def selector(t, start_window, tf):
        selection, _ = policy_predict(model, start_window, tf)
        return selection

    records = run_deployment(selector, test, mtrnet, stats)
    report = aggregate_records(records, test, buckets or BucketConfig())
    out = {
        "mean_cells": float(np.mean([r.cells_selected for r in records])),
        "mean_nmae": report["overall"]["nmae"],
        "mean_mae": float(np.mean([r.mae for r in records])),
        "mean_latency_s": float(np.mean([r.latency_s for r in records])),
        "per_bucket": report,
        "records": records,
    }
    if quality is not None:
        out["fraction_within_epsilon"] = float(
            np.mean([r.mae < quality.epsilon for r in records])
        )
    return out
