import numpy as np
import pytest

from spider.core import (
    GridGeometry,
    InvalidActionError,
    QualityConfig,
    RangeError,
    TrafficSnapshot,
    grid_mae,
)
from spider.data import SyntheticConfig, fit_normalizer, synthesize_traffic
from spider.env import (
    CellSelectionEnv,
    EnvConfig,
    EpisodeLog,
    load_episode_logs,
    run_episode,
    save_episode_logs,
)
from spider.reconstruct import knn_reconstructor


def desk_series(rows=4, cols=4, days=2):
    cfg = SyntheticConfig(geometry=GridGeometry(rows, cols), days=days,
                          delta_minutes=120, seed=3, n_hotspots=1,
                          noise_std=0.05)
    return synthesize_traffic(cfg)


def make_env(series=None, epsilon=0.05, reconstructor=None,
             unavailable=0.0, window=3):
    series = series if series is not None else desk_series()
    stats = fit_normalizer(series)
    config = EnvConfig(
        geometry=series.geometry,
        window_frames=window,
        quality=QualityConfig(epsilon=epsilon),
        reconstructor=reconstructor or knn_reconstructor(k_nn=3),
        unavailable_fraction=unavailable,
    )
    return CellSelectionEnv(series, config, stats)


def perfect_oracle(env):
    def reconstruct(window):
        return env.normalized_truth(window.t)
    reconstruct.window_frames = None
    return reconstruct


class TestReset:
    def test_cold_start(self):
        env = make_env()
        t = env.episode_timestamps()[0]
        state = env.reset(t)
        assert state.iteration == 0
        assert state.selected == ()
        np.testing.assert_array_equal(state.window.stacked_values(), 0.0)
        np.testing.assert_array_equal(state.window.stacked_bits(), 0)

    def test_action_space_full_when_all_available(self):
        env = make_env()
        state = env.reset(env.episode_timestamps()[0])
        assert len(env.action_space(state)) == 16

    def test_unavailable_fraction(self):
        series = desk_series(rows=20, cols=20)
        env = make_env(series=series, unavailable=0.1)
        state = env.reset(env.episode_timestamps()[0], seed=5)
        assert len(state.unavailable) == 40
        assert len(env.action_space(state)) == 360

    def test_out_of_range(self):
        env = make_env()
        with pytest.raises(RangeError):
            env.reset(env.series.t0)  # no full history window yet

    def test_history_frames_used_after_commit(self):
        env = make_env(epsilon=1e9)  # first action finishes the episode
        t0 = env.episode_timestamps()[0]
        log = run_episode(env, t0, lambda s: min(env.action_space(s)), commit=True)
        assert log.iterations == 1
        state = env.reset(t0 + 1)
        assert state.window.frames[-2].n_sampled == 1


class TestStep:
    def test_perfect_oracle_finishes_immediately(self):
        env = make_env()
        env.config = env.config  # no-op; oracle needs env built first
        env_oracle = make_env(reconstructor=None)
        env_oracle.config = EnvConfig(
            geometry=env_oracle.series.geometry,
            window_frames=3,
            quality=env_oracle.config.quality,
            reconstructor=perfect_oracle(env_oracle),
        )
        state = env_oracle.reset(env_oracle.episode_timestamps()[0])
        result = env_oracle.step(state, 0)
        assert result.reward == 0.0
        assert result.done is True
        assert result.info["truncated"] is False

    def test_double_selection_rejected(self):
        env = make_env(epsilon=1e-9)
        state = env.reset(env.episode_timestamps()[0])
        result = env.step(state, 5)
        with pytest.raises(InvalidActionError):
            env.step(result.next_state, 5)

    def test_reward_matches_manual_reconstruction(self):
        env = make_env()
        t = env.episode_timestamps()[0]
        state = env.reset(t)
        action = 6
        result = env.step(state, action)
        window = env.reveal(state, action)
        manual = knn_reconstructor(k_nn=3)(window)
        expected = -grid_mae(manual.values, env.normalized_truth(t).values)
        assert result.reward == pytest.approx(expected)

    def test_reward_bounded(self):
        env = make_env(epsilon=1e-9)
        t = env.episode_timestamps()[0]
        bound = float(np.abs(env.normalized).max())
        state = env.reset(t)
        for _ in range(5):
            action = min(env.action_space(state))
            result = env.step(state, action)
            assert -bound <= result.reward <= 0
            state = result.next_state
            if result.done:
                break

    def test_step_does_not_mutate_state(self):
        env = make_env(epsilon=1e-9)
        state = env.reset(env.episode_timestamps()[0])
        before_bits = state.current.mask.bits.copy()
        env.step(state, 3)
        np.testing.assert_array_equal(state.current.mask.bits, before_bits)
        assert state.selected == ()


class TestEpisodes:
    def test_truncation_on_exhaustion(self):
        def zero_stub(window):
            return TrafficSnapshot(t=window.t, values=np.zeros(window.shape))

        zero_stub.window_frames = None
        env = make_env(epsilon=1e-12, reconstructor=zero_stub)
        log = run_episode(env, env.episode_timestamps()[0],
                          lambda s: min(env.action_space(s)))
        assert log.truncated is True
        assert log.iterations == 16
        assert log.final_selection.n_selected == 16

    def test_episode_terminates_under_threshold(self):
        env = make_env(epsilon=0.5)
        log = run_episode(env, env.episode_timestamps()[0],
                          lambda s: min(env.action_space(s)))
        if not log.truncated:
            assert log.final_mae < 0.5
        assert log.iterations == len(log.actions) == len(log.rewards)

    def test_episode_length_bounded_by_available(self):
        series = desk_series()
        env = make_env(series=series, epsilon=1e-12, unavailable=0.25)
        log = run_episode(env, env.episode_timestamps()[0],
                          lambda s: min(env.action_space(s)))
        assert log.iterations == 12  # 16 - 4 unavailable

    def test_log_consistency(self):
        env = make_env(epsilon=0.3)
        log = run_episode(env, env.episode_timestamps()[0],
                          lambda s: min(env.action_space(s)))
        assert log.final_selection.n_selected == log.iterations
        assert log.rewards[-1] == pytest.approx(-log.final_mae)


class TestLogSerialization:
    def test_roundtrip(self, tmp_path):
        env = make_env(epsilon=0.4)
        logs = []
        for t in list(env.episode_timestamps())[:3]:
            logs.append(run_episode(env, t, lambda s: min(env.action_space(s))))
        path = tmp_path / "episodes.jsonl"
        save_episode_logs(logs, path)
        loaded = load_episode_logs(path, env.series.geometry)
        assert len(loaded) == len(logs)
        for a, b in zip(logs, loaded):
            assert a.t == b.t
            assert a.actions == b.actions
            assert a.final_mae == pytest.approx(b.final_mae)
            np.testing.assert_array_equal(a.final_selection.bits,
                                          b.final_selection.bits)
            assert a.truncated == b.truncated
