import hashlib

import numpy as np
import pytest
import torch

from spider.core import (
    GridGeometry,
    QualityConfig,
    TrafficSnapshot,
    empty_measurement,
    StateWindow,
)
from spider.agent import (
    AgentConfig,
    CandidateSet,
    PseudoAction,
    agent_init,
    candidate_subset,
    export_selection_dataset,
    load_selection_dataset,
    pseudo_action,
    random_share,
    save_selection_dataset,
    scored_reconstructor,
    select_action,
    train_agent,
)
from spider.data import SyntheticConfig, fit_normalizer, synthesize_traffic
from spider.env import CellSelectionEnv, EnvConfig, EnvState
from spider.mtrnet import MtrnetConfig, mtrnet_init
from spider.reconstruct import knn_reconstructor

GEOM3 = GridGeometry(3, 3)
GEOM4 = GridGeometry(4, 4)


def tiny_series(days=2, rows=4, cols=4):
    cfg = SyntheticConfig(geometry=GridGeometry(rows, cols), days=days,
                          delta_minutes=120, seed=3, n_hotspots=1,
                          noise_std=0.05)
    return synthesize_traffic(cfg)


def make_env(epsilon=0.25, reconstructor=None, series=None):
    series = series or tiny_series()
    stats = fit_normalizer(series)
    config = EnvConfig(
        geometry=series.geometry,
        window_frames=3,
        quality=QualityConfig(epsilon=epsilon),
        reconstructor=reconstructor or knn_reconstructor(k_nn=3),
    )
    return CellSelectionEnv(series, config, stats)


def fresh_state(env, t=None):
    return env.reset(t if t is not None else env.episode_timestamps()[0])


class TestRandomShare:
    def test_starts_fully_random(self):
        for k in (4, 10, 64):
            assert random_share(k, 0) == k

    def test_monotone_nonincreasing(self):
        shares = [random_share(10, x) for x in range(20)]
        assert all(a >= b for a, b in zip(shares, shares[1:]))

    def test_limit_is_ten_percent(self):
        assert random_share(10, 1000) == 1
        assert random_share(64, 1000) == round(6.4)
        # round-half-even at the limit: 0.1 * 25 = 2.5 -> 2
        assert random_share(25, 1000) == 2


class TestCandidateSubset:
    def test_hand_enumerated_3x3(self):
        # pseudo action on the center cell: distance 0 to cell (1,1), then a
        # four-way tie among its axis neighbors; row-major order keeps the
        # first three of them
        cfg = AgentConfig(subset_size=4)
        available = set(range(9))
        subset = candidate_subset(PseudoAction(1.0, 1.0), available, GEOM3,
                                  cfg, episodes_completed=0, n_random=0)
        assert subset.cells[0] == 4  # cell (1,1)
        assert set(subset.cells) == {4, 1, 3, 5}

    def test_all_random_at_start(self):
        cfg = AgentConfig(subset_size=4)
        subset = candidate_subset(PseudoAction(0.0, 0.0), set(range(16)),
                                  GEOM4, cfg, episodes_completed=0, seed=9)
        assert subset.n_random == 4

    def test_never_returns_unavailable(self):
        rng = np.random.default_rng(0)
        cfg = AgentConfig(subset_size=6)
        for trial in range(1000):
            available = set(int(c) for c in
                            rng.choice(16, size=rng.integers(1, 16),
                                       replace=False))
            a_hat = PseudoAction(float(rng.uniform(0, 3.99)),
                                 float(rng.uniform(0, 3.99)))
            subset = candidate_subset(a_hat, available, GEOM4, cfg,
                                      episodes_completed=int(rng.integers(0, 5)),
                                      seed=trial)
            assert set(subset.cells) <= available
            assert len(set(subset.cells)) == len(subset.cells)

    def test_small_action_space_returns_all(self):
        cfg = AgentConfig(subset_size=10)
        subset = candidate_subset(PseudoAction(0.0, 0.0), {3, 7, 11}, GEOM4,
                                  cfg, episodes_completed=0)
        assert set(subset.cells) == {3, 7, 11}

    def test_deterministic_given_seed(self):
        cfg = AgentConfig(subset_size=6)
        a = candidate_subset(PseudoAction(1.5, 2.5), set(range(16)), GEOM4,
                             cfg, episodes_completed=1, seed=5)
        b = candidate_subset(PseudoAction(1.5, 2.5), set(range(16)), GEOM4,
                             cfg, episodes_completed=1, seed=5)
        assert a == b


class TestPseudoAction:
    def test_deterministic(self):
        net = agent_init(GEOM4, AgentConfig(seed=1))
        frame = empty_measurement(0, (4, 4))
        a = pseudo_action(net, frame, (0.0, 0.0, 0.0), [])
        b = pseudo_action(net, frame, (0.0, 0.0, 0.0), [])
        assert (a.row, a.col) == (b.row, b.col)

    def test_bounds_hold_for_adversarial_inputs(self):
        net = agent_init(GEOM4, AgentConfig(seed=2))
        rng = np.random.default_rng(0)
        for scale in (1.0, 1e3, 1e6):
            values = rng.random((4, 4)) * scale
            from spider.core import SelectionMatrix, SparseMeasurement
            frame = SparseMeasurement(
                t=0, values=values,
                mask=SelectionMatrix(t=0, bits=np.ones((4, 4), dtype=np.uint8)),
            )
            out = pseudo_action(net, frame, (1.0, -1.0, 1.0),
                                list(range(30)))
            assert 0 <= out.row < 4
            assert 0 <= out.col < 4
            assert np.isfinite([out.row, out.col]).all()

    def test_zero_frame_finite(self):
        net = agent_init(GEOM4, AgentConfig(seed=3))
        out = pseudo_action(net, empty_measurement(0, (4, 4)),
                            (0.0, 0.0, 0.0), [])
        assert np.isfinite([out.row, out.col]).all()


class TestSelectAction:
    def test_single_candidate(self):
        env = make_env()
        state = fresh_state(env)
        truth = env.normalized_truth(state.t)
        cell, errors = select_action(CandidateSet(cells=(7,), n_random=0),
                                     state, env.config.reconstructor, truth)
        assert cell == 7
        assert errors.shape == (1,)

    def test_tie_goes_to_lowest_index(self):
        env = make_env()
        state = fresh_state(env)
        truth = env.normalized_truth(state.t)

        def oracle(window):
            return truth

        cell, errors = select_action(CandidateSet(cells=(9, 2, 5), n_random=0),
                                     state, oracle, truth)
        assert cell == 2
        np.testing.assert_allclose(errors, errors[0])

    def test_hotspot_candidate_wins(self):
        # 1x6 strip, truth [1,1,9,1,1,1], cells 0,1,3,4 already sampled.
        # Revealing the hotspot (cell 2) leaves zero error; revealing cell 5
        # leaves the hotspot interpolated as (1+1)/2=1, an error of 8/6.
        from spider.core import SelectionMatrix, SparseMeasurement

        truth_values = np.array([[1.0, 1.0, 9.0, 1.0, 1.0, 1.0]])
        bits = np.array([[1, 1, 0, 1, 1, 0]], dtype=np.uint8)
        frame = SparseMeasurement(
            t=2, values=truth_values * bits,
            mask=SelectionMatrix(t=2, bits=bits),
        )
        window = StateWindow((empty_measurement(0, (1, 6)),
                              empty_measurement(1, (1, 6)), frame))
        state = EnvState(window=window, selected=(0, 1, 3, 4),
                         unavailable=frozenset(), t=2,
                         time_features=(0.0, 0.0, 0.0))
        truth = TrafficSnapshot(t=2, values=truth_values)
        cell, errors = select_action(
            CandidateSet(cells=(2, 5), n_random=0), state,
            knn_reconstructor(k_nn=2), truth,
        )
        assert cell == 2
        np.testing.assert_allclose(errors, [0.0, 8.0 / 6.0])

    def test_state_not_mutated(self):
        env = make_env()
        state = fresh_state(env)
        truth = env.normalized_truth(state.t)
        bits_before = state.current.mask.bits.copy()
        select_action(CandidateSet(cells=(1, 2, 3), n_random=0), state,
                      env.config.reconstructor, truth)
        np.testing.assert_array_equal(state.current.mask.bits, bits_before)

    def test_batched_scores_match_sequential(self):
        series = tiny_series()
        stats = fit_normalizer(series)
        model = mtrnet_init(
            MtrnetConfig(window_frames=3, n_feature_layers=2,
                         channels=(2, 3, 3, 4)), seed=0)
        model.norm_stats = stats
        batched = scored_reconstructor(model)
        sequential = scored_reconstructor(model)
        del sequential.batch_model
        env = make_env(series=series, reconstructor=batched)
        state = fresh_state(env)
        truth = env.normalized_truth(state.t)
        candidates = CandidateSet(cells=(0, 5, 10, 15), n_random=0)
        cell_b, err_b = select_action(candidates, state, batched, truth)
        cell_s, err_s = select_action(candidates, state, sequential, truth)
        assert cell_b == cell_s
        np.testing.assert_allclose(err_b, err_s, atol=1e-7)


def net_checksum(model):
    digest = hashlib.sha256()
    for _, tensor in sorted(model.net.state_dict().items()):
        digest.update(tensor.numpy().tobytes())
    return digest.hexdigest()


class TestTrainAgent:
    def test_episode_count_and_frozen_reconstructor(self):
        series = tiny_series(days=2)
        stats = fit_normalizer(series)
        model = mtrnet_init(
            MtrnetConfig(window_frames=3, n_feature_layers=2,
                         channels=(2, 3, 3, 4)), seed=0)
        model.norm_stats = stats
        env = CellSelectionEnv(series, EnvConfig(
            geometry=series.geometry, window_frames=3,
            quality=QualityConfig(epsilon=0.3),
            reconstructor=scored_reconstructor(model)), stats)
        checksum_before = net_checksum(model)
        # limit to few episodes for speed
        env_timestamps = list(env.episode_timestamps())[:2]
        env.episode_timestamps = lambda: env_timestamps
        net, logs = train_agent(env, AgentConfig(subset_size=4, epochs=1,
                                                 seed=0))
        assert len(logs) == 2
        assert net_checksum(model) == checksum_before
        for log in logs:
            assert log.iterations == len(log.actions)
            assert log.final_selection.n_selected == log.iterations

    def test_loss_zero_when_prediction_matches_target(self):
        predicted = torch.tensor([2.0, 3.0])
        target = torch.tensor([2.0, 3.0])
        loss = torch.nn.functional.mse_loss(predicted, target, reduction="sum")
        assert float(loss) == 0.0


class TestSelectionDataset:
    def build(self):
        series = tiny_series(days=2)
        stats = fit_normalizer(series)
        env = make_env(series=series, epsilon=0.35)
        from spider.env import run_episode
        logs = [
            run_episode(env, t, lambda s: min(env.action_space(s)))
            for t in list(env.episode_timestamps())[:5]
        ]
        dataset = export_selection_dataset(logs, series, stats.log_mean, 3)
        return logs, dataset

    def test_one_pair_per_episode(self):
        logs, dataset = self.build()
        assert len(dataset) == len(logs)

    def test_label_ones_equal_iterations(self):
        logs, dataset = self.build()
        for log, sample in zip(logs, dataset.samples):
            assert int(sample.label_bits.sum()) == log.iterations

    def test_history_frames_match_previous_episodes(self):
        logs, dataset = self.build()
        # third sample's window should carry episode 2's final mask
        sample = dataset.samples[2]
        np.testing.assert_array_equal(sample.window_bits[-2],
                                      logs[1].final_selection.bits)
        # current frame of the start window is empty
        np.testing.assert_array_equal(sample.window_bits[-1], 0)

    def test_file_roundtrip_lossless(self, tmp_path):
        _, dataset = self.build()
        path = tmp_path / "selection.jsonl"
        save_selection_dataset(dataset, path)
        loaded = load_selection_dataset(path)
        assert len(loaded) == len(dataset)
        assert loaded.window_frames == dataset.window_frames
        for a, b in zip(dataset.samples, loaded.samples):
            assert a.t == b.t
            np.testing.assert_allclose(a.window_values, b.window_values,
                                       atol=1e-6)
            np.testing.assert_array_equal(a.window_bits, b.window_bits)
            np.testing.assert_array_equal(a.label_bits, b.label_bits)
