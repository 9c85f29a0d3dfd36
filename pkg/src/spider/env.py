"""Episodic cell-selection environment: reveal one cell per step, reward the
negative reconstruction error, finish when the error drops under the quality
threshold (or the action space runs out).

Everything runs in normalized-traffic space, consistent with training losses.
The discount is pinned to zero: each step's value is its immediate reward, and
no API here accumulates returns.
"""

from __future__ import annotations

import base64
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from spider.core import (
    ConfigError,
    GridGeometry,
    InvalidActionError,
    NormStats,
    QualityConfig,
    RangeError,
    SelectionMatrix,
    SparseMeasurement,
    StateWindow,
    TrafficSnapshot,
    derived_seed,
    empty_measurement,
    grid_mae,
)
from spider.data import DatasetSeries
from spider.reconstruct import Reconstructor


@dataclass(frozen=True)
class EnvConfig:
    geometry: GridGeometry
    window_frames: int
    quality: QualityConfig
    reconstructor: Reconstructor
    unavailable_fraction: float = 0.0
    gamma: float = 0.0

    def __post_init__(self) -> None:
        if self.gamma != 0.0:
            raise ConfigError("the selection MDP is defined with gamma = 0")
        if not 0 <= self.unavailable_fraction < 1:
            raise ConfigError("unavailable_fraction must lie in [0, 1)")
        if self.window_frames < 2:
            raise ConfigError("window_frames must be >= 2")
        declared = getattr(self.reconstructor, "window_frames", None)
        if declared is not None and declared != self.window_frames:
            raise ConfigError(
                f"reconstructor declares {declared} window frames, "
                f"config says {self.window_frames}"
            )


@dataclass(frozen=True)
class EnvState:
    """Sparse history plus the partially collected current frame."""

    window: StateWindow
    selected: tuple[int, ...]
    unavailable: frozenset[int]
    t: int
    time_features: tuple[float, float, float]

    @property
    def iteration(self) -> int:
        return len(self.selected)

    @property
    def current(self) -> SparseMeasurement:
        return self.window.current


@dataclass(frozen=True)
class StepResult:
    next_state: EnvState
    reward: float
    done: bool
    info: dict


@dataclass(frozen=True)
class EpisodeLog:
    t: int
    actions: tuple[int, ...]
    rewards: tuple[float, ...]
    final_selection: SelectionMatrix
    final_mae: float
    iterations: int
    truncated: bool = False

    def __post_init__(self) -> None:
        if self.iterations != len(self.actions):
            raise ConfigError("iteration count must equal the number of actions")


class CellSelectionEnv:
    """Single-writer episodic environment over one traffic series.

    Episodes run sequentially over timestamps; committing a finished episode
    stores its final sparse frame as history for later windows. Timestamps
    with no committed episode contribute all-zero frames (cold start).
    """

    def __init__(self, series: DatasetSeries, config: EnvConfig,
                 stats: NormStats):
        if series.geometry != config.geometry:
            raise ConfigError("series and config geometries differ")
        self.series = series
        self.config = config
        self.stats = stats
        self.normalized = np.log1p(series.values) / stats.log_mean
        self._final_frames: dict[int, SparseMeasurement] = {}

    # -- helpers ------------------------------------------------------------

    @property
    def n_cells(self) -> int:
        return self.config.geometry.n_cells

    def episode_timestamps(self) -> range:
        """Timestamps with a full history window inside the series."""
        return range(self.series.t0 + self.config.window_frames - 1,
                     self.series.t0 + len(self.series))

    def normalized_truth(self, t: int) -> TrafficSnapshot:
        return TrafficSnapshot(t=t, values=self.normalized[self.series.index_of(t)])

    def _history_frame(self, t: int) -> SparseMeasurement:
        frame = self._final_frames.get(t)
        if frame is not None:
            return frame
        return empty_measurement(t, self.config.geometry.shape)

    # -- MDP interface ------------------------------------------------------

    def reset(self, t: int, seed: int = 0) -> EnvState:
        t_w = self.config.window_frames
        if t not in self.episode_timestamps():
            raise RangeError(
                f"episode timestamp {t} outside usable range "
                f"{self.episode_timestamps()}"
            )
        frames = tuple(self._history_frame(tt) for tt in range(t - t_w + 1, t))
        window = StateWindow(frames + (empty_measurement(t, self.config.geometry.shape),))
        n_unavailable = int(round(self.config.unavailable_fraction * self.n_cells))
        rng = np.random.default_rng(derived_seed(seed, "unavailable", t))
        unavailable = frozenset(
            int(c) for c in rng.choice(self.n_cells, size=n_unavailable,
                                       replace=False)
        ) if n_unavailable else frozenset()
        return EnvState(
            window=window,
            selected=(),
            unavailable=unavailable,
            t=t,
            time_features=self.series.time_features(t),
        )

    def action_space(self, state: EnvState) -> frozenset[int]:
        return frozenset(range(self.n_cells)) - set(state.selected) - state.unavailable

    def reveal(self, state: EnvState, action: int) -> StateWindow:
        """Window with the ground-truth value of one more cell filled in.

        Pure helper: neither the state nor the environment changes, so agents
        may score hypothetical actions with it.
        """
        shape = self.config.geometry.shape
        current = state.current
        values = current.values.copy().ravel()
        bits = current.mask.bits.copy().ravel()
        truth_flat = self.normalized[self.series.index_of(state.t)].ravel()
        values[action] = truth_flat[action]
        bits[action] = 1
        frame = SparseMeasurement(
            t=state.t,
            values=values.reshape(shape),
            mask=SelectionMatrix(t=state.t, bits=bits.reshape(shape)),
        )
        return state.window.replace_current(frame)

    def step(self, state: EnvState, action: int) -> StepResult:
        if action not in self.action_space(state):
            raise InvalidActionError(
                f"cell {action} is already selected or unavailable at t={state.t}"
            )
        window = self.reveal(state, action)
        estimate = self.config.reconstructor(window)
        error = grid_mae(estimate.values,
                         self.normalized[self.series.index_of(state.t)])
        next_state = EnvState(
            window=window,
            selected=state.selected + (int(action),),
            unavailable=state.unavailable,
            t=state.t,
            time_features=state.time_features,
        )
        reached = error < self.config.quality.epsilon
        exhausted = len(self.action_space(next_state)) == 0
        return StepResult(
            next_state=next_state,
            reward=-error,
            done=reached or exhausted,
            info={
                "mae": error,
                "cells_selected": next_state.iteration,
                "truncated": exhausted and not reached,
            },
        )

    def commit(self, state: EnvState) -> None:
        """Store a finished episode's final frame as history for later windows."""
        self._final_frames[state.t] = state.current


def run_episode(env: CellSelectionEnv, t: int,
                choose: Callable[[EnvState], int], seed: int = 0,
                commit: bool = True) -> EpisodeLog:
    """Drive one episode with an action-choosing callback."""
    state = env.reset(t, seed=seed)
    actions: list[int] = []
    rewards: list[float] = []
    info: dict = {"mae": float("inf"), "truncated": False}
    while True:
        action = choose(state)
        result = env.step(state, action)
        actions.append(int(action))
        rewards.append(result.reward)
        state = result.next_state
        info = result.info
        if result.done:
            break
    if commit:
        env.commit(state)
    return EpisodeLog(
        t=t,
        actions=tuple(actions),
        rewards=tuple(rewards),
        final_selection=state.current.mask,
        final_mae=info["mae"],
        iterations=len(actions),
        truncated=info["truncated"],
    )


# ---------------------------------------------------------------------------
# Episode log serialization (line-delimited JSON)
# ---------------------------------------------------------------------------

def _encode_bits(bits: np.ndarray) -> str:
    return base64.b64encode(np.packbits(bits.ravel())).decode("ascii")


def _decode_bits(payload: str, shape: tuple[int, int]) -> np.ndarray:
    n = shape[0] * shape[1]
    raw = np.unpackbits(np.frombuffer(base64.b64decode(payload), dtype=np.uint8))
    return raw[:n].reshape(shape).astype(np.uint8)


def save_episode_logs(logs: list[EpisodeLog], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for log in logs:
            record = {
                "t": log.t,
                "actions": list(log.actions),
                "rewards": [float(r) for r in log.rewards],
                "final_bits": _encode_bits(log.final_selection.bits),
                "final_mae": float(log.final_mae),
                "iterations": log.iterations,
                "truncated": log.truncated,
            }
            fh.write(json.dumps(record, sort_keys=True) + "\n")


def load_episode_logs(path: str | Path, geometry: GridGeometry) -> list[EpisodeLog]:
    logs = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            record = json.loads(line)
            bits = _decode_bits(record["final_bits"], geometry.shape)
            logs.append(EpisodeLog(
                t=record["t"],
                actions=tuple(record["actions"]),
                rewards=tuple(record["rewards"]),
                final_selection=SelectionMatrix(t=record["t"], bits=bits),
                final_mae=record["final_mae"],
                iterations=record["iterations"],
                truncated=record["truncated"],
            ))
    return logs
