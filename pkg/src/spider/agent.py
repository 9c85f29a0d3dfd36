"""Learned cell selection for large discrete action spaces.

Scoring every cell of a city-scale grid per step is intractable, so the agent
first emits a continuous pseudo action (a grid coordinate), gathers the
nearest available cells around it plus a decaying share of random ones, scores
only that small candidate set with the frozen reconstruction network, executes
the best candidate, and regresses its pseudo action toward the executed cell.

Completed-episode selection matrices become the training set for the one-shot
policy network.
"""

from __future__ import annotations

import base64
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from spider.core import (
    ConfigError,
    GridGeometry,
    InsufficientDataError,
    SelectionMatrix,
    SparseMeasurement,
    StateWindow,
    TrafficSnapshot,
    derived_seed,
)
from spider.data import DatasetSeries
from spider.env import CellSelectionEnv, EnvState, EpisodeLog
from spider.mtrnet import (
    MtrnetModel,
    _sum_pool2d,
    mtrnet_batch_infer,
    mtrnet_reconstructor,
)
from spider.reconstruct import Reconstructor


@dataclass(frozen=True)
class AgentConfig:
    """Candidate-search and training settings for the selection agent."""

    subset_size: int = 16
    prev_actions_len: int = 20
    conv_channels: int = 8
    reduce_channels: int = 4
    hidden_width: int = 64
    epochs: int = 1
    learning_rate: float = 1e-4
    random_decay_scale: float = 1.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.subset_size < 1:
            raise ConfigError("subset_size must be >= 1")
        if self.prev_actions_len < 1:
            raise ConfigError("prev_actions_len must be >= 1")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.learning_rate <= 0 or self.random_decay_scale <= 0:
            raise ConfigError("learning_rate and random_decay_scale must be positive")


@dataclass(frozen=True)
class PseudoAction:
    """Continuous grid coordinate seeding the candidate search."""

    row: float
    col: float

    def __post_init__(self) -> None:
        if not (np.isfinite(self.row) and np.isfinite(self.col)):
            raise ConfigError("pseudo action must be finite")


@dataclass(frozen=True)
class CandidateSet:
    """Distinct candidate cells: nearest ones first, then the random injections."""

    cells: tuple[int, ...]
    n_random: int

    def __post_init__(self) -> None:
        if len(set(self.cells)) != len(self.cells):
            raise ConfigError("candidate cells must be distinct")


class PseudoActionNet(nn.Module):
    """Current sparse frame + time + previous actions -> (row, col) in bounds.

    Two convolutions with a sum pooling between them, a stride-2 reducing
    convolution, then two fully connected layers over the flattened maps
    concatenated with the time features and the recent-action list. The output
    passes through a sigmoid scaled to the grid, so it stays inside
    [0, rows) x [0, cols) for any input.
    """

    def __init__(self, geometry: GridGeometry, config: AgentConfig):
        super().__init__()
        self.geometry = geometry
        self.prev_actions_len = config.prev_actions_len
        c, cr = config.conv_channels, config.reduce_channels
        self.conv1 = nn.Conv2d(1, c, 3, padding=1)
        self.conv2 = nn.Conv2d(c, c, 3, padding=1)
        self.reduce = nn.Conv2d(c, cr, 3, stride=2, padding=1)
        pooled = (max(geometry.rows // 2, 1), max(geometry.cols // 2, 1))
        reduced = ((pooled[0] + 1) // 2, (pooled[1] + 1) // 2)
        flat = cr * reduced[0] * reduced[1]
        self.fc1 = nn.Linear(flat + 3 + config.prev_actions_len,
                             config.hidden_width)
        self.fc2 = nn.Linear(config.hidden_width, 2)
        self.act = nn.LeakyReLU(0.2)

    def encode_prev_actions(self, prev_actions: list[int]) -> torch.Tensor:
        """Pad/truncate to fixed length (most recent last, pad -1), then map
        cell index c to (c + 1)/n so the pad lands at zero."""
        length = self.prev_actions_len
        trimmed = list(prev_actions)[-length:]
        padded = [-1] * (length - len(trimmed)) + trimmed
        n = self.geometry.n_cells
        return torch.tensor([(a + 1) / n for a in padded], dtype=torch.float32)

    def forward(self, frame: torch.Tensor, time_features: torch.Tensor,
                prev_actions: torch.Tensor) -> torch.Tensor:
        h = self.act(self.conv1(frame))
        h = _sum_pool2d(h, 2)
        h = self.act(self.conv2(h))
        h = self.act(self.reduce(h))
        h = h.flatten(start_dim=1)
        h = torch.cat([h, time_features, prev_actions], dim=1)
        h = self.act(self.fc1(h))
        raw = torch.sigmoid(self.fc2(h))
        limits = torch.tensor(
            [self.geometry.rows - 1, self.geometry.cols - 1],
            dtype=raw.dtype,
        )
        return raw * limits


def agent_init(geometry: GridGeometry, config: AgentConfig) -> PseudoActionNet:
    torch.manual_seed(derived_seed(config.seed, "agent-init"))
    return PseudoActionNet(geometry, config)


def _forward_state(net: PseudoActionNet, current: SparseMeasurement,
                   time_features: tuple[float, float, float],
                   prev_actions: list[int]) -> torch.Tensor:
    frame = torch.from_numpy(current.values.astype(np.float32))[None, None]
    tf = torch.tensor([time_features], dtype=torch.float32)
    prev = net.encode_prev_actions(prev_actions)[None]
    return net(frame, tf, prev)[0]


def pseudo_action(net: PseudoActionNet, current: SparseMeasurement,
                  time_features: tuple[float, float, float],
                  prev_actions: list[int]) -> PseudoAction:
    net.eval()
    with torch.no_grad():
        out = _forward_state(net, current, time_features, prev_actions)
    return PseudoAction(row=float(out[0]), col=float(out[1]))


def random_share(subset_size: int, episodes_completed: int,
                 decay_scale: float = 1.0) -> int:
    """Number of random candidates: starts at the full subset, decays toward
    10% as training episodes accumulate (round-half-even)."""
    decayed = subset_size * (0.1 + 0.9 * np.exp(-episodes_completed * decay_scale))
    return min(subset_size, int(round(decayed)))


def candidate_subset(a_hat: PseudoAction, available: set[int] | frozenset[int],
                     geometry: GridGeometry, config: AgentConfig,
                     episodes_completed: int, seed: int = 0,
                     n_random: int | None = None) -> CandidateSet:
    """Nearest available cells around the pseudo action plus random extras.

    Distances are Euclidean on integer (row, col) cell coordinates with ties
    broken in row-major order. When fewer cells are available than the subset
    size, all of them are returned. ``n_random`` overrides the decay schedule
    when given (used by fixtures).
    """
    if not available:
        raise InsufficientDataError("no available cells to build candidates from")
    cells = np.fromiter(sorted(available), dtype=np.int64)
    k = config.subset_size
    if cells.size <= k:
        return CandidateSet(cells=tuple(int(c) for c in cells), n_random=0)

    if n_random is None:
        n_random = random_share(k, episodes_completed, config.random_decay_scale)
    n_random = min(n_random, k)
    n_near = k - n_random

    chosen: list[int] = []
    if n_near > 0:
        rows, cols = np.divmod(cells, geometry.cols)
        d2 = (rows - a_hat.row) ** 2 + (cols - a_hat.col) ** 2
        order = np.argsort(d2, kind="stable")  # ties keep ascending cell index
        chosen.extend(int(c) for c in cells[order[:n_near]])

    if n_random > 0:
        remaining = np.setdiff1d(cells, np.array(chosen, dtype=np.int64),
                                 assume_unique=True)
        rng = np.random.default_rng(seed)
        take = min(n_random, remaining.size)
        picks = rng.choice(remaining, size=take, replace=False)
        chosen.extend(int(c) for c in picks)

    return CandidateSet(cells=tuple(chosen), n_random=n_random)


def _reveal_candidate(state: EnvState, action: int,
                      truth: TrafficSnapshot) -> StateWindow:
    current = state.current
    shape = current.shape
    values = current.values.copy().ravel()
    bits = current.mask.bits.copy().ravel()
    values[action] = truth.values.ravel()[action]
    bits[action] = 1
    frame = SparseMeasurement(
        t=current.t,
        values=values.reshape(shape),
        mask=SelectionMatrix(t=current.t, bits=bits.reshape(shape)),
    )
    return state.window.replace_current(frame)


def select_action(candidates: CandidateSet, state: EnvState,
                  reconstructor: Reconstructor, truth: TrafficSnapshot
                  ) -> tuple[int, np.ndarray]:
    """Score each candidate by hypothetically revealing it and reconstructing.

    Returns the error-minimizing cell (ties go to the lowest cell index) and
    the per-candidate error vector aligned with the candidate order. The state
    is never mutated. Reconstructors advertising a ``batch_model`` score all
    candidates in one forward pass.
    """
    if not candidates.cells:
        raise InsufficientDataError("cannot select from an empty candidate set")
    windows = [_reveal_candidate(state, cell, truth) for cell in candidates.cells]
    batch_model = getattr(reconstructor, "batch_model", None)
    if batch_model is not None:
        stacked = np.stack([w.stacked_values() for w in windows])
        bits = np.stack([w.current.mask.bits for w in windows])
        estimates = mtrnet_batch_infer(batch_model, stacked, current_bits=bits)
    else:
        estimates = np.stack([reconstructor(w).values for w in windows])
    errors = np.abs(estimates - truth.values[None]).mean(axis=(1, 2))
    best = min(
        range(len(candidates.cells)),
        key=lambda i: (errors[i], candidates.cells[i]),
    )
    return candidates.cells[best], errors


def scored_reconstructor(model: MtrnetModel) -> Reconstructor:
    """Window reconstructor that also advertises batched candidate scoring."""
    reconstruct = mtrnet_reconstructor(model)
    reconstruct.batch_model = model
    return reconstruct


def train_agent(env: CellSelectionEnv, config: AgentConfig
                ) -> tuple[PseudoActionNet, list[EpisodeLog]]:
    """Run the episodic selection loop over the environment's series, training
    the pseudo-action network toward each executed action.

    The reconstruction network inside the environment stays frozen; only the
    pseudo-action network learns (squared-error regression to the chosen
    cell's coordinates). Returns the logs of the final epoch.
    """
    geometry = env.config.geometry
    net = agent_init(geometry, config)
    torch.manual_seed(derived_seed(config.seed, "agent-train"))
    optimizer = torch.optim.Adam(net.parameters(), lr=config.learning_rate)
    episodes_completed = 0
    last_epoch_logs: list[EpisodeLog] = []

    for epoch in range(config.epochs):
        logs: list[EpisodeLog] = []
        for t in env.episode_timestamps():
            state = env.reset(t, seed=derived_seed(config.seed, "reset", epoch, t))
            truth = env.normalized_truth(t)
            actions: list[int] = []
            rewards: list[float] = []
            info: dict = {"mae": float("inf"), "truncated": False}
            step_idx = 0
            while True:
                net.train()
                predicted = _forward_state(net, state.current,
                                           state.time_features, actions)
                a_hat = PseudoAction(row=float(predicted[0].detach()),
                                     col=float(predicted[1].detach()))
                subset = candidate_subset(
                    a_hat, env.action_space(state), geometry, config,
                    episodes_completed,
                    seed=derived_seed(config.seed, "subset", epoch, t, step_idx),
                )
                action, _ = select_action(subset, state,
                                          env.config.reconstructor, truth)
                result = env.step(state, action)

                target_row, target_col = geometry.cell_coords(action)
                target = torch.tensor([float(target_row), float(target_col)])
                loss = F.mse_loss(predicted, target, reduction="sum")
                optimizer.zero_grad()
                loss.backward()
                optimizer.step()

                actions.append(int(action))
                rewards.append(result.reward)
                state = result.next_state
                info = result.info
                step_idx += 1
                if result.done:
                    break
            env.commit(state)
            episodes_completed += 1
            logs.append(EpisodeLog(
                t=t,
                actions=tuple(actions),
                rewards=tuple(rewards),
                final_selection=state.current.mask,
                final_mae=info["mae"],
                iterations=len(actions),
                truncated=info["truncated"],
            ))
        last_epoch_logs = logs
    return net, last_epoch_logs


# ---------------------------------------------------------------------------
# Selection dataset export (policy-network training pairs)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SelectionSample:
    """One policy-training pair: episode-start window -> final selection."""

    t: int
    time_features: tuple[float, float, float]
    window_values: np.ndarray  # (window_frames, rows, cols), normalized
    window_bits: np.ndarray    # (window_frames, rows, cols)
    label_bits: np.ndarray     # (rows, cols)


@dataclass(frozen=True)
class SelectionDataset:
    geometry: GridGeometry
    window_frames: int
    samples: tuple[SelectionSample, ...]

    def __len__(self) -> int:
        return len(self.samples)


def export_selection_dataset(logs: list[EpisodeLog], series: DatasetSeries,
                             log_mean: float, window_frames: int
                             ) -> SelectionDataset:
    """Rebuild each episode's start window from earlier episodes' final masks
    and pair it with the episode's final selection matrix.

    Mirrors the environment history rule: a past timestamp contributes its
    final sparse frame when an episode ran there, otherwise an all-zero frame.
    """
    if not logs:
        raise InsufficientDataError("no episode logs to export")
    normalized = np.log1p(series.values) / log_mean
    by_t = {log.t: log for log in logs}
    shape = series.geometry.shape
    samples = []
    for log in logs:
        values = np.zeros((window_frames,) + shape)
        bits = np.zeros((window_frames,) + shape, dtype=np.uint8)
        for k, tt in enumerate(range(log.t - window_frames + 1, log.t)):
            past = by_t.get(tt)
            if past is not None and tt in series.timestamps:
                mask = past.final_selection.bits
                values[k] = normalized[series.index_of(tt)] * mask
                bits[k] = mask
        samples.append(SelectionSample(
            t=log.t,
            time_features=series.time_features(log.t),
            window_values=values,
            window_bits=bits,
            label_bits=np.asarray(log.final_selection.bits),
        ))
    return SelectionDataset(
        geometry=series.geometry,
        window_frames=window_frames,
        samples=tuple(samples),
    )


def _encode_f32(arr: np.ndarray) -> str:
    return base64.b64encode(arr.astype("<f4").tobytes()).decode("ascii")


def _decode_f32(payload: str, shape: tuple[int, ...]) -> np.ndarray:
    flat = np.frombuffer(base64.b64decode(payload), dtype="<f4")
    return flat.reshape(shape).astype(np.float64)


def _encode_bits(arr: np.ndarray) -> str:
    return base64.b64encode(np.packbits(arr.ravel().astype(np.uint8))).decode("ascii")


def _decode_bits(payload: str, shape: tuple[int, ...]) -> np.ndarray:
    n = int(np.prod(shape))
    raw = np.unpackbits(np.frombuffer(base64.b64decode(payload), dtype=np.uint8))
    return raw[:n].reshape(shape).astype(np.uint8)


def save_selection_dataset(dataset: SelectionDataset, path: str | Path) -> None:
    """Line-delimited records; float32 values and packed bits are base64-coded.

    Line schema: ``{"t", "time_features", "values", "bits", "label",
    "window_frames", "rows", "cols"}``.
    """
    with open(path, "w", encoding="utf-8") as fh:
        for s in dataset.samples:
            record = {
                "t": s.t,
                "time_features": list(s.time_features),
                "values": _encode_f32(s.window_values),
                "bits": _encode_bits(s.window_bits),
                "label": _encode_bits(s.label_bits),
                "window_frames": dataset.window_frames,
                "rows": dataset.geometry.rows,
                "cols": dataset.geometry.cols,
            }
            fh.write(json.dumps(record, sort_keys=True) + "\n")


def load_selection_dataset(path: str | Path) -> SelectionDataset:
    samples = []
    geometry = None
    window_frames = None
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            record = json.loads(line)
            rows, cols = record["rows"], record["cols"]
            window_frames = record["window_frames"]
            geometry = GridGeometry(rows, cols)
            wshape = (window_frames, rows, cols)
            samples.append(SelectionSample(
                t=record["t"],
                time_features=tuple(record["time_features"]),
                window_values=_decode_f32(record["values"], wshape),
                window_bits=_decode_bits(record["bits"], wshape),
                label_bits=_decode_bits(record["label"], (rows, cols)),
            ))
    if geometry is None:
        raise InsufficientDataError(f"no selection samples in {path}")
    return SelectionDataset(geometry=geometry, window_frames=window_frames,
                            samples=tuple(samples))
