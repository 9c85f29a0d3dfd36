"""Command-line pipeline: synthesize or ingest traffic, train the models,
analyze thresholds, fit baselines, and produce the benchmark report.

Every subcommand takes one JSON config file plus ``--seed`` and ``--out-dir``
overrides. All randomness derives from the single master seed, so rerunning a
subcommand with the same seed reproduces its artifacts byte for byte.
"""

from __future__ import annotations

import argparse
import base64
import csv
import json
import sys
from pathlib import Path

import numpy as np

from spider.core import (
    ArtifactError,
    GridGeometry,
    QualityConfig,
    derived_seed,
)
from spider.data import (
    BucketConfig,
    DatasetSeries,
    SplitSpec,
    SyntheticConfig,
    fit_normalizer,
    load_grid_csv,
    load_series_cache,
    save_series_cache,
    split,
    synthesize_traffic,
)

# matplotlib config must precede pyplot use anywhere in the pipeline
import matplotlib

matplotlib.use("Agg")
matplotlib.rcParams["svg.hashsalt"] = "spider"


# ---------------------------------------------------------------------------
# Config and artifact helpers
# ---------------------------------------------------------------------------

def _load_config(path: str) -> dict:
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def _require(config: dict, key: str) -> object:
    if key not in config:
        raise ArtifactError(f"config is missing required key {key!r}")
    return config[key]


def _check_paths_exist(paths: dict[str, str | Path]) -> None:
    missing = [f"{name}: {p}" for name, p in paths.items()
               if not Path(p).exists()]
    if missing:
        raise ArtifactError("missing artifacts:\n  " + "\n  ".join(missing))


def save_series(series: DatasetSeries, directory: str | Path) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    save_series_cache(series, directory / "series.spdr")
    meta = {
        "rows": series.geometry.rows,
        "cols": series.geometry.cols,
        "delta_minutes": series.delta_minutes,
        "t0": series.t0,
        "day0_weekday": series.day0_weekday,
        "start_minute_of_day": series.start_minute_of_day,
        "day0_offset": series.day0_offset,
    }
    if series.load_report is not None:
        meta["load_report"] = {
            "n_rows": series.load_report.n_rows,
            "n_buckets": series.load_report.n_buckets,
            "n_zero_filled": series.load_report.n_zero_filled,
        }
    with open(directory / "series_meta.json", "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)


def load_series(directory: str | Path) -> DatasetSeries:
    directory = Path(directory)
    _check_paths_exist({"series cache": directory / "series.spdr",
                        "series meta": directory / "series_meta.json"})
    with open(directory / "series_meta.json", encoding="utf-8") as fh:
        meta = json.load(fh)
    loaded = load_series_cache(
        directory / "series.spdr",
        geometry=GridGeometry(meta["rows"], meta["cols"]),
        delta_minutes=meta["delta_minutes"],
        t0=meta["t0"],
        day0_weekday=meta["day0_weekday"],
        start_minute_of_day=meta["start_minute_of_day"],
    )
    if meta.get("day0_offset"):
        loaded = DatasetSeries(
            geometry=loaded.geometry, delta_minutes=loaded.delta_minutes,
            values=loaded.values, t0=loaded.t0,
            day0_weekday=loaded.day0_weekday,
            start_minute_of_day=loaded.start_minute_of_day,
            day0_offset=meta["day0_offset"],
        )
    return loaded


def _resolve_series(config: dict) -> DatasetSeries:
    series = load_series(_require(config, "series"))
    split_cfg = config.get("split")
    if not split_cfg:
        return series
    spec = SplitSpec(train_days=split_cfg["train_days"],
                     test_days=split_cfg["test_days"])
    train, test = split(series, spec)
    use = config.get("use", "train")
    if use not in ("train", "test"):
        raise ArtifactError(f"config 'use' must be train or test, got {use!r}")
    return train if use == "train" else test


def _mtrnet_config(cfg: dict):
    from spider.mtrnet import MtrnetConfig

    return MtrnetConfig(
        window_frames=cfg.get("window_frames", 7),
        n_feature_layers=cfg.get("n_feature_layers", 5),
        lrelu_slope=cfg.get("lrelu_slope", 0.2),
        channels=tuple(cfg.get("channels", (16, 32, 32, 64))),
        pool_factor=cfg.get("pool_factor", 2),
    )


def _train_hyper(cfg: dict, seed: int):
    from spider.mtrnet import TrainHyper

    return TrainHyper(
        learning_rate=cfg.get("learning_rate", 1e-4),
        batch_size=cfg.get("batch_size", 128),
        epochs=cfg.get("epochs", 1),
        mask_rate_range=tuple(cfg.get("mask_rate_range", (0.10, 0.70))),
        seed=seed,
    )


def _write_history_csv(path: Path, history: list[dict], fields: list[str]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(fields)
        for record in history:
            writer.writerow([
                record[field] if field == "epoch" else f"{record[field]:.6f}"
                for field in fields
            ])


def _encode_grid(grid: np.ndarray) -> str:
    return base64.b64encode(grid.astype("<f4").tobytes()).decode("ascii")


def _decode_grid(payload: str, shape: tuple[int, int]) -> np.ndarray:
    flat = np.frombuffer(base64.b64decode(payload), dtype="<f4")
    return flat.reshape(shape).astype(np.float64)


def save_budget_table(budget, path: str | Path) -> None:
    record = {
        "entries": {f"{d},{h}": v for (d, h), v in sorted(budget.entries.items())},
        "unreachable": sorted(f"{d},{h}" for d, h in budget.unreachable),
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(record, fh, indent=2, sort_keys=True)


def load_budget_table(path: str | Path):
    from spider.bench import BudgetTable

    _check_paths_exist({"budget table": path})
    with open(path, encoding="utf-8") as fh:
        record = json.load(fh)
    entries = {}
    for key, value in record["entries"].items():
        d, h = key.split(",")
        entries[(int(d), int(h))] = float(value)
    unreachable = set()
    for key in record["unreachable"]:
        d, h = key.split(",")
        unreachable.add((int(d), int(h)))
    return BudgetTable(entries=entries, unreachable=unreachable)


def save_frequency_matrix(freq, path: str | Path) -> None:
    record = {
        "rows": freq.shape[0],
        "cols": freq.shape[1],
        "entries": {f"{d},{h}": _encode_grid(grid)
                    for (d, h), grid in sorted(freq.entries.items())},
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(record, fh, indent=2, sort_keys=True)


def load_frequency_matrix(path: str | Path):
    from spider.bench import FrequencyMatrix

    _check_paths_exist({"frequency matrix": path})
    with open(path, encoding="utf-8") as fh:
        record = json.load(fh)
    shape = (record["rows"], record["cols"])
    entries = {}
    for key, payload in record["entries"].items():
        d, h = key.split(",")
        entries[(int(d), int(h))] = _decode_grid(payload, shape)
    return FrequencyMatrix(entries=entries, shape=shape)


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_synth(config: dict, seed: int, out_dir: Path) -> None:
    geom_cfg = _require(config, "geometry")
    gen = SyntheticConfig(
        geometry=GridGeometry(geom_cfg["rows"], geom_cfg["cols"]),
        days=config.get("days", 10),
        delta_minutes=config.get("delta_minutes", 10),
        seed=seed,
        base_level=config.get("base_level", 5.0),
        peak_amplitude=config.get("peak_amplitude", 40.0),
        n_hotspots=config.get("n_hotspots", 3),
        noise_std=config.get("noise_std", 0.05),
        weekend_scale=config.get("weekend_scale", 0.6),
        texture_std=config.get("texture_std", 0.5),
    )
    series = synthesize_traffic(gen)
    save_series(series, out_dir)
    print(f"synthesized {len(series)} snapshots on "
          f"{gen.geometry.rows}x{gen.geometry.cols} -> {out_dir}")


def cmd_ingest(config: dict, seed: int, out_dir: Path) -> None:
    csv_path = _require(config, "csv")
    _check_paths_exist({"input csv": csv_path})
    geom_cfg = _require(config, "geometry")
    series = load_grid_csv(
        csv_path,
        GridGeometry(geom_cfg["rows"], geom_cfg["cols"]),
        delta_minutes=config.get("delta_minutes", 10),
    )
    save_series(series, out_dir)
    report = series.load_report
    print(f"ingested {report.n_rows} rows into {report.n_buckets} buckets "
          f"({report.n_zero_filled} zero-filled cells) -> {out_dir}")


def cmd_train_mtrnet(config: dict, seed: int, out_dir: Path) -> None:
    from spider.mtrnet import mtrnet_init, mtrnet_train, save_model

    series = _resolve_series(config)
    model = mtrnet_init(_mtrnet_config(config.get("mtrnet", {})),
                        seed=derived_seed(seed, "mtrnet-init"))
    hyper = _train_hyper(config.get("hyper", {}),
                         seed=derived_seed(seed, "mtrnet-hyper"))
    model, history = mtrnet_train(model, series, hyper)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_model(model, out_dir / "mtrnet")
    _write_history_csv(out_dir / "history.csv", history,
                       ["epoch", "train_mae", "val_mae"])
    print(f"trained {hyper.epochs} epochs; final train MAE "
          f"{history[-1]['train_mae']:.6f}, val MAE "
          f"{history[-1]['val_mae']:.6f} -> {out_dir}")


def _resolve_epsilon(config: dict, series, reconstructor, stats,
                     seed: int) -> float:
    from spider.bench import choose_threshold, gain_curve

    eps_cfg = _require(config, "epsilon")
    if isinstance(eps_cfg, (int, float)):
        return float(eps_cfg)
    rates = eps_cfg.get("rates", [0.10, 0.15, 0.20, 0.25, 0.35, 0.50, 0.70])
    curve = gain_curve(
        series, reconstructor, rates, stats,
        n_masks=eps_cfg.get("n_masks", 10),
        times=eps_cfg.get("times", 12),
        seed=derived_seed(seed, "epsilon-curve"),
        window_frames=config.get("window_frames"),
    )
    knee = choose_threshold(curve, knee_rate=eps_cfg.get("knee_rate", 0.35))
    return knee * eps_cfg.get("scale", 1.0)


def cmd_train_agent(config: dict, seed: int, out_dir: Path) -> None:
    from spider.agent import (
        AgentConfig,
        export_selection_dataset,
        save_selection_dataset,
        scored_reconstructor,
        train_agent,
    )
    from spider.env import CellSelectionEnv, EnvConfig, save_episode_logs
    from spider.mtrnet import load_model

    series = _resolve_series(config)
    mtrnet_dir = _require(config, "mtrnet")
    _check_paths_exist({"mtrnet checkpoint": Path(mtrnet_dir) / "manifest.json"})
    model = load_model(mtrnet_dir)
    stats = model.norm_stats
    if stats is None:
        raise ArtifactError("mtrnet checkpoint carries no normalizer stats")
    reconstructor = scored_reconstructor(model)

    epsilon = _resolve_epsilon(config, series, reconstructor, stats, seed)
    agent_cfg_d = config.get("agent", {})
    agent_cfg = AgentConfig(
        subset_size=agent_cfg_d.get("subset_size", 16),
        prev_actions_len=agent_cfg_d.get("prev_actions_len", 20),
        conv_channels=agent_cfg_d.get("conv_channels", 8),
        reduce_channels=agent_cfg_d.get("reduce_channels", 4),
        hidden_width=agent_cfg_d.get("hidden_width", 64),
        epochs=agent_cfg_d.get("epochs", 1),
        learning_rate=agent_cfg_d.get("learning_rate", 1e-4),
        random_decay_scale=agent_cfg_d.get("random_decay_scale", 1.0),
        seed=derived_seed(seed, "agent"),
    )
    env = CellSelectionEnv(series, EnvConfig(
        geometry=series.geometry,
        window_frames=model.config.window_frames,
        quality=QualityConfig(epsilon=epsilon),
        reconstructor=reconstructor,
        unavailable_fraction=config.get("unavailable_fraction", 0.0),
    ), stats)

    stride = config.get("episode_stride", 1)
    timestamps = list(env.episode_timestamps())[::stride]
    base_timestamps = env.episode_timestamps
    env.episode_timestamps = lambda: timestamps  # desk-budget subsampling

    net, logs = train_agent(env, agent_cfg)
    env.episode_timestamps = base_timestamps

    out_dir.mkdir(parents=True, exist_ok=True)
    save_episode_logs(logs, out_dir / "episodes.jsonl")
    dataset = export_selection_dataset(logs, series, stats.log_mean,
                                       model.config.window_frames)
    save_selection_dataset(dataset, out_dir / "selection.jsonl")
    with open(out_dir / "summary.json", "w", encoding="utf-8") as fh:
        json.dump({
            "epsilon": epsilon,
            "episodes": len(logs),
            "mean_episode_length": float(np.mean([l.iterations for l in logs])),
            "mean_final_mae": float(np.mean([l.final_mae for l in logs])),
            "truncated": int(sum(l.truncated for l in logs)),
        }, fh, indent=2, sort_keys=True)
    print(f"agent: {len(logs)} episodes, mean length "
          f"{np.mean([l.iterations for l in logs]):.1f}, epsilon {epsilon:.6f} "
          f"-> {out_dir}")


def cmd_train_policy(config: dict, seed: int, out_dir: Path) -> None:
    from spider.agent import load_selection_dataset
    from spider.mtrnet import save_model
    from spider.policy import PolicyConfig, policy_init, policy_train

    selection_path = _require(config, "selection")
    _check_paths_exist({"selection dataset": selection_path})
    dataset = load_selection_dataset(selection_path)
    policy_cfg_d = config.get("policy", {})
    trunk = _mtrnet_config(policy_cfg_d.get("trunk", {}))
    if trunk.window_frames != dataset.window_frames:
        trunk = _mtrnet_config(
            {**policy_cfg_d.get("trunk", {}),
             "window_frames": dataset.window_frames})
    policy_cfg = PolicyConfig(trunk=trunk,
                              threshold=policy_cfg_d.get("threshold", 0.5))
    model = policy_init(policy_cfg, seed=derived_seed(seed, "policy-init"))
    hyper = _train_hyper(config.get("hyper", {}),
                         seed=derived_seed(seed, "policy-hyper"))
    model, history = policy_train(model, dataset, hyper)

    out_dir.mkdir(parents=True, exist_ok=True)
    wrapped = _policy_as_checkpoint(model)
    save_model(wrapped, out_dir / "policy", kind="policy",
               extra={"threshold": policy_cfg.threshold})
    _write_history_csv(out_dir / "history.csv", history, ["epoch", "bce"])
    print(f"policy: {hyper.epochs} epochs, final BCE "
          f"{history[-1]['bce']:.6f} -> {out_dir}")


def _policy_as_checkpoint(policy_model):
    from spider.mtrnet import MtrnetModel

    return MtrnetModel(
        net=policy_model.net,
        config=policy_model.config.trunk,
        seed=policy_model.seed,
        norm_stats=policy_model.norm_stats,
    )


def load_policy(directory: str | Path):
    from spider.mtrnet import load_manifest, load_model
    from spider.policy import PolicyConfig, PolicyModel

    manifest = load_manifest(directory)
    wrapped = load_model(directory, extra_planes=3, sigmoid_output=True)
    config = PolicyConfig(trunk=wrapped.config,
                          threshold=manifest["extra"].get("threshold", 0.5))
    return PolicyModel(net=wrapped.net, config=config, seed=wrapped.seed,
                       norm_stats=wrapped.norm_stats)


def cmd_gain_curve(config: dict, seed: int, out_dir: Path) -> None:
    from spider.bench import choose_threshold, gain_curve
    from spider.reconstruct import knn_reconstructor

    series = _resolve_series(config)
    kind = config.get("reconstructor", "knn")
    if kind == "knn":
        reconstructor = knn_reconstructor(k_nn=config.get("k_nn", 5))
        stats = fit_normalizer(series)
        window_frames = config.get("window_frames", 3)
    elif kind == "mtrnet":
        from spider.agent import scored_reconstructor
        from spider.mtrnet import load_model

        mtrnet_dir = _require(config, "mtrnet")
        _check_paths_exist(
            {"mtrnet checkpoint": Path(mtrnet_dir) / "manifest.json"})
        model = load_model(mtrnet_dir)
        reconstructor = scored_reconstructor(model)
        stats = model.norm_stats
        window_frames = model.config.window_frames
    else:
        raise ArtifactError(f"unknown reconstructor kind {kind!r}")

    rates = config.get("rates", [0.10, 0.15, 0.20, 0.25, 0.35, 0.50, 0.70])
    curve = gain_curve(series, reconstructor, rates, stats,
                       n_masks=config.get("n_masks", 20),
                       times=config.get("times", 12),
                       seed=derived_seed(seed, "gain"),
                       window_frames=window_frames)
    epsilon = choose_threshold(curve, knee_rate=config.get("knee_rate", 0.35))

    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "gain_curve.csv", "w", newline="",
              encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["rate", "mean_mae", "gain"])
        for p in curve:
            writer.writerow([f"{p.rate:.4f}", f"{p.mean_mae:.6f}",
                             f"{p.gain:.6f}"])
    with open(out_dir / "threshold.json", "w", encoding="utf-8") as fh:
        json.dump({"epsilon": epsilon,
                   "knee_rate": config.get("knee_rate", 0.35)}, fh,
                  indent=2, sort_keys=True)

    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot([p.rate for p in curve], [p.mean_mae for p in curve], marker="o")
    ax.set_xlabel("random sampling rate")
    ax.set_ylabel("mean MAE (normalized)")
    fig.tight_layout()
    fig.savefig(out_dir / "gain_curve.svg", metadata={"Date": None})
    plt.close(fig)
    print(f"gain curve over {len(rates)} rates; threshold {epsilon:.6f} "
          f"-> {out_dir}")


def cmd_evaluate(config: dict, seed: int, out_dir: Path) -> None:
    from spider.agent import scored_reconstructor
    from spider.bench import build_budget_table, build_frequency_matrix
    from spider.env import load_episode_logs
    from spider.mtrnet import load_model

    series = _resolve_series(config)
    mtrnet_dir = _require(config, "mtrnet")
    episodes_path = _require(config, "episodes")
    _check_paths_exist({
        "mtrnet checkpoint": Path(mtrnet_dir) / "manifest.json",
        "episode logs": episodes_path,
    })
    model = load_model(mtrnet_dir)
    stats = model.norm_stats
    reconstructor = scored_reconstructor(model)
    epsilon = float(_require(config, "epsilon"))

    budget = build_budget_table(
        series, reconstructor, QualityConfig(epsilon=epsilon), stats,
        n_masks=config.get("n_masks", 20),
        times_per_bucket=config.get("times_per_bucket", 2),
        seed=derived_seed(seed, "budget"),
        window_frames=model.config.window_frames,
    )
    logs = load_episode_logs(episodes_path, series.geometry)
    freq = build_frequency_matrix(
        [(log.t, log.final_selection) for log in logs], series)

    out_dir.mkdir(parents=True, exist_ok=True)
    save_budget_table(budget, out_dir / "budget_table.json")
    save_frequency_matrix(freq, out_dir / "frequency.json")
    counts = np.array(list(budget.entries.values()))
    print(f"budget over {len(budget.entries)} buckets: mean "
          f"{counts.mean():.1f} cells ({len(budget.unreachable)} unreachable); "
          f"frequency from {len(logs)} episodes -> {out_dir}")


def cmd_report(config: dict, seed: int, out_dir: Path) -> None:
    from spider.bench import run_experiment
    from spider.mtrnet import load_model

    series = _resolve_series(config)
    mtrnet_dir = _require(config, "mtrnet")
    policy_dir = _require(config, "policy")
    budget_path = _require(config, "budget")
    freq_path = _require(config, "frequency")
    _check_paths_exist({
        "mtrnet checkpoint": Path(mtrnet_dir) / "manifest.json",
        "policy checkpoint": Path(policy_dir) / "manifest.json",
        "budget table": budget_path,
        "frequency matrix": freq_path,
    })
    model = load_model(mtrnet_dir)
    policy = load_policy(policy_dir)
    budget = load_budget_table(budget_path)
    freq = load_frequency_matrix(freq_path)
    buckets_cfg = config.get("buckets", {})
    buckets = BucketConfig(
        peak_start_hour=buckets_cfg.get("peak_start_hour", 7),
        peak_end_hour=buckets_cfg.get("peak_end_hour", 19),
        holidays=frozenset(buckets_cfg.get("holidays", ())),
    )
    report = run_experiment(series, model, policy, budget, freq, buckets,
                            seed=derived_seed(seed, "experiment"),
                            out_dir=out_dir)
    overall = {row.strategy: row for row in report.rows
               if row.bucket == "overall"}
    for name, row in sorted(overall.items()):
        print(f"{name}: overall count {row.mean_count}, NMAE {row.nmae:.4f}")
    print(f"report -> {out_dir / 'report.csv'}")


COMMANDS = {
    "synth": cmd_synth,
    "ingest": cmd_ingest,
    "train-mtrnet": cmd_train_mtrnet,
    "train-agent": cmd_train_agent,
    "train-policy": cmd_train_policy,
    "gain-curve": cmd_gain_curve,
    "evaluate": cmd_evaluate,
    "report": cmd_report,
}


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="spider",
        description="Sparse mobile-traffic sampling and reconstruction pipeline",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("config", help="JSON config file")
        p.add_argument("--seed", type=int, default=None,
                       help="master seed (overrides config)")
        p.add_argument("--out-dir", default=None,
                       help="output directory (overrides config)")
    args = parser.parse_args(argv)

    config = _load_config(args.config)
    seed = args.seed if args.seed is not None else int(config.get("seed", 0))
    out_dir = Path(args.out_dir if args.out_dir is not None
                   else config.get("out_dir", "out"))
    try:
        COMMANDS[args.command](config, seed, out_dir)
    except ArtifactError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
