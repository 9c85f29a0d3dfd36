"""Neural traffic reconstruction: a window of sparse measurement frames in,
one complete snapshot out, plus the supervised training loop on randomly
masked ground truth and checkpoint IO.

The network has three stages:

* correlation capture: one 3D convolution over (time, row, col) collapses the
  window, LReLU, then sum pooling over the spatial dims (sums keep sparse
  activations from being diluted);
* feature extraction: ``n_feature_layers`` 3x3 conv+LReLU blocks at constant
  width; residual connections join every two blocks, and a global skip links
  the stage input to its output;
* summarization: a learned upsampling projection restores the grid size, then
  three convolutions with growing width squeeze down to the single output map.

All model IO is in normalized-traffic space.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from spider.core import (
    ConfigError,
    DomainError,
    NormStats,
    RangeError,
    ShapeError,
    StateWindow,
    TrafficSnapshot,
    derived_seed,
    random_selection,
    rate_to_count,
)
from spider.data import DatasetSeries, fit_normalizer, read_tensor, write_tensor
from spider.reconstruct import Reconstructor


@dataclass(frozen=True)
class MtrnetConfig:
    """Architecture settings for the reconstruction network.

    ``channels`` holds the four stage widths: 3D-capture output, feature-block
    width, and the two intermediate summarization widths.
    """

    window_frames: int = 7
    n_feature_layers: int = 5
    lrelu_slope: float = 0.2
    channels: tuple[int, ...] = (16, 32, 32, 64)
    pool_factor: int = 2

    def __post_init__(self) -> None:
        if self.window_frames < 2:
            raise ConfigError("window_frames must be >= 2")
        if self.n_feature_layers < 1:
            raise ConfigError("n_feature_layers must be >= 1")
        if not 0 < self.lrelu_slope < 1:
            raise ConfigError("lrelu_slope must lie in (0, 1)")
        channels = tuple(int(c) for c in self.channels)
        if len(channels) != 4 or any(c < 1 for c in channels):
            raise ConfigError(
                f"channels must be 4 positive widths (capture, feature, "
                f"summarize1, summarize2), got {self.channels!r}"
            )
        object.__setattr__(self, "channels", channels)
        if self.pool_factor < 1:
            raise ConfigError("pool_factor must be >= 1")


@dataclass(frozen=True)
class TrainHyper:
    """Supervised training settings; masks are drawn fresh every epoch."""

    learning_rate: float = 1e-4
    batch_size: int = 128
    epochs: int = 1
    optimizer: str = "adam"
    mask_rate_range: tuple[float, float] = (0.10, 0.70)
    seed: int = 0

    def __post_init__(self) -> None:
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if self.batch_size < 1 or self.epochs < 1:
            raise ConfigError("batch_size and epochs must be >= 1")
        if self.optimizer != "adam":
            raise ConfigError("only the adaptive-moment (adam) optimizer is supported")
        lo, hi = self.mask_rate_range
        if not 0 < lo <= hi < 1:
            raise ConfigError("mask_rate_range must satisfy 0 < low <= high < 1")


def _sum_pool2d(x: torch.Tensor, factor: int) -> torch.Tensor:
    if factor == 1:
        return x
    return F.avg_pool2d(x, factor) * float(factor * factor)


class MtrnetNet(nn.Module):
    """Three-stage reconstruction trunk, shared with the selection policy net.

    ``extra_planes`` appends that many constant input planes (time features)
    before the feature stage; ``sigmoid_output`` turns the trunk into a
    per-cell probability head.
    """

    def __init__(self, config: MtrnetConfig, extra_planes: int = 0,
                 sigmoid_output: bool = False):
        super().__init__()
        c_capture, c_feat, c_sum1, c_sum2 = config.channels
        t = config.window_frames
        self.config = config
        self.extra_planes = extra_planes
        self.sigmoid_output = sigmoid_output
        # time axis survives the 3D conv (kernel 3, padded); the per-frame
        # feature maps then fold into channels so the 2D stage can weigh
        # individual frames instead of one premixed combination
        self.capture = nn.Conv3d(1, c_capture, (3, 3, 3), padding=(1, 1, 1))
        self.entry = nn.Conv2d(c_capture * t + extra_planes, c_feat, 1)
        self.blocks = nn.ModuleList(
            nn.Conv2d(c_feat, c_feat, 3, padding=1)
            for _ in range(config.n_feature_layers)
        )
        self.upsample = nn.ConvTranspose2d(c_feat, c_feat, config.pool_factor,
                                           stride=config.pool_factor)
        self.summarize1 = nn.Conv2d(c_feat, c_sum1, 3, padding=1)
        self.summarize2 = nn.Conv2d(c_sum1, c_sum2, 3, padding=1)
        self.summarize3 = nn.Conv2d(c_sum2, 1, 3, padding=1)
        self.act = nn.LeakyReLU(config.lrelu_slope)

    def capture_stage(self, x: torch.Tensor) -> torch.Tensor:
        """(B, 1, T, rows, cols) -> pooled feature maps (B, C*T, rows/p, cols/p)."""
        h = self.act(self.capture(x))
        b = h.shape[0]
        h = h.reshape(b, -1, h.shape[-2], h.shape[-1])
        return _sum_pool2d(h, self.config.pool_factor)

    def feature_stage(self, h: torch.Tensor) -> torch.Tensor:
        """Skip-connected feature blocks around the projected stage input."""
        h0 = self.entry(h)
        h = h0
        pair_in = h0
        for i, conv in enumerate(self.blocks, start=1):
            if i % 2 == 1:
                pair_in = h
            h = self.act(conv(h))
            if i % 2 == 0:
                h = h + pair_in
        return h + h0

    def head_stage(self, h: torch.Tensor) -> torch.Tensor:
        h = self.upsample(h)
        h = self.act(self.summarize1(h))
        h = self.act(self.summarize2(h))
        out = self.summarize3(h)
        if self.sigmoid_output:
            out = torch.sigmoid(out)
        return out.squeeze(1)

    def forward(self, x: torch.Tensor,
                time_features: torch.Tensor | None = None) -> torch.Tensor:
        rows, cols = x.shape[-2], x.shape[-1]
        p = self.config.pool_factor
        if rows % p or cols % p:
            raise ShapeError(
                f"grid {rows}x{cols} is not divisible by pool factor {p}"
            )
        h = self.capture_stage(x)
        if self.extra_planes:
            if time_features is None or time_features.shape[-1] != self.extra_planes:
                raise ShapeError(
                    f"expected {self.extra_planes} time features per sample"
                )
            planes = time_features[:, :, None, None].expand(
                -1, -1, h.shape[-2], h.shape[-1]
            )
            h = torch.cat([h, planes.to(h.dtype)], dim=1)
        return self.head_stage(self.feature_stage(h))


@dataclass
class MtrnetModel:
    """A reconstruction network plus the settings and normalizer it lives with."""

    net: MtrnetNet
    config: MtrnetConfig
    seed: int
    norm_stats: NormStats | None = None
    history: list[dict] = field(default_factory=list)

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.net.parameters())


def mtrnet_init(config: MtrnetConfig, seed: int) -> MtrnetModel:
    """Build a reconstruction model with seed-deterministic initialization."""
    torch.manual_seed(derived_seed(seed, "mtrnet-init"))
    net = MtrnetNet(config)
    return MtrnetModel(net=net, config=config, seed=seed)


def _window_tensor(window: StateWindow) -> torch.Tensor:
    stacked = window.stacked_values()
    if not np.isfinite(stacked).all():
        raise DomainError("window holds non-finite values")
    return torch.from_numpy(stacked.astype(np.float32))[None, None]


def mtrnet_infer(model: MtrnetModel, window: StateWindow) -> TrafficSnapshot:
    """Reconstruct the full grid for the window's current timestamp.

    Inputs must already be in normalized-traffic space; the output is too,
    clipped at zero. Collected cells keep their measured values exactly (the
    network only fills what was not sampled), so a fully observed frame
    reconstructs with zero error.
    """
    if len(window) != model.config.window_frames:
        raise ShapeError(
            f"window has {len(window)} frames, model expects "
            f"{model.config.window_frames}"
        )
    model.net.eval()
    with torch.no_grad():
        out = model.net(_window_tensor(window))[0].numpy().astype(np.float64)
    out = np.clip(out, 0.0, None)
    current = window.current
    observed = current.mask.bits == 1
    out[observed] = current.values[observed]
    return TrafficSnapshot(t=window.t, values=out)


def mtrnet_batch_infer(model: MtrnetModel, windows: np.ndarray,
                       current_bits: np.ndarray | None = None) -> np.ndarray:
    """Vectorized inference over pre-masked windows (B, T, rows, cols).

    ``current_bits`` (B, rows, cols) marks the collected cells of each
    window's current frame; those keep their measured values in the output.
    """
    model.net.eval()
    with torch.no_grad():
        x = torch.from_numpy(windows.astype(np.float32))[:, None]
        out = model.net(x).numpy().astype(np.float64)
    out = np.clip(out, 0.0, None)
    if current_bits is not None:
        observed = current_bits == 1
        current = windows[:, -1]
        out[observed] = current[observed]
    return out


def mtrnet_reconstructor(model: MtrnetModel) -> Reconstructor:
    def reconstruct(window: StateWindow) -> TrafficSnapshot:
        return mtrnet_infer(model, window)
    reconstruct.window_frames = model.config.window_frames
    return reconstruct


def _draw_masked_window(norm_values: np.ndarray, target_pos: int, t_w: int,
                        rate: float, rng: np.random.Generator) -> np.ndarray:
    frames = norm_values[target_pos - t_w + 1: target_pos + 1]
    shape = frames.shape[1:]
    count = rate_to_count(rate, shape[0] * shape[1])
    masked = np.empty_like(frames)
    for k in range(t_w):
        bits = random_selection(0, shape, count, rng).bits
        masked[k] = frames[k] * bits
    return masked


def mtrnet_train(model: MtrnetModel, train: DatasetSeries, hyper: TrainHyper
                 ) -> tuple[MtrnetModel, list[dict]]:
    """Regress masked windows to the complete normalized snapshot under MAE loss.

    Every sample draws a sampling rate uniformly from ``mask_rate_range`` and
    an independent uniform-random mask per frame at that rate; training masks
    are redrawn each epoch while the held-out validation masks stay fixed.
    Returns the trained model and its per-epoch train/validation MAE history.
    """
    t_w = model.config.window_frames
    if len(train) < t_w:
        raise RangeError(
            f"series of {len(train)} steps cannot fill a {t_w}-frame window"
        )
    stats = model.norm_stats or fit_normalizer(train)
    model.norm_stats = stats
    norm_values = np.log1p(train.values) / stats.log_mean

    positions = np.arange(t_w - 1, len(train))
    n_val = positions.size // 10 if positions.size >= 10 else (
        1 if positions.size >= 2 else 0)
    val_positions = positions[positions.size - n_val:]
    train_positions = positions[: positions.size - n_val]

    lo, hi = hyper.mask_rate_range
    val_rng = np.random.default_rng(derived_seed(hyper.seed, "mtrnet-val"))
    val_batch = [
        _draw_masked_window(norm_values, p, t_w, val_rng.uniform(lo, hi), val_rng)
        for p in val_positions
    ]
    val_x = np.stack(val_batch) if val_batch else None

    torch.manual_seed(derived_seed(hyper.seed, "mtrnet-torch"))
    net = model.net
    optimizer = torch.optim.Adam(net.parameters(), lr=hyper.learning_rate)
    history: list[dict] = []

    for epoch in range(hyper.epochs):
        rng = np.random.default_rng(derived_seed(hyper.seed, "mtrnet-epoch", epoch))
        order = rng.permutation(train_positions)
        net.train()
        total_loss, total_samples = 0.0, 0
        for start in range(0, order.size, hyper.batch_size):
            batch_pos = order[start: start + hyper.batch_size]
            xs = np.stack([
                _draw_masked_window(norm_values, p, t_w, rng.uniform(lo, hi), rng)
                for p in batch_pos
            ])
            ys = norm_values[batch_pos]
            x = torch.from_numpy(xs.astype(np.float32))[:, None]
            y = torch.from_numpy(ys.astype(np.float32))
            optimizer.zero_grad()
            loss = F.l1_loss(net(x), y)
            loss.backward()
            optimizer.step()
            total_loss += float(loss.item()) * len(batch_pos)
            total_samples += len(batch_pos)

        train_mae = total_loss / max(total_samples, 1)
        if val_x is not None:
            net.eval()
            with torch.no_grad():
                x = torch.from_numpy(val_x.astype(np.float32))[:, None]
                y = torch.from_numpy(
                    norm_values[val_positions].astype(np.float32))
                val_mae = float(F.l1_loss(net(x), y).item())
        else:
            val_mae = train_mae
        history.append({"epoch": epoch, "train_mae": train_mae,
                        "val_mae": val_mae})

    model.history = model.history + history
    return model, history


# ---------------------------------------------------------------------------
# Checkpoint IO: one tensor container per parameter plus a JSON manifest
# ---------------------------------------------------------------------------

def save_model(model: MtrnetModel, directory: str | Path,
               kind: str = "mtrnet", extra: dict | None = None) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    params = []
    for idx, (name, tensor) in enumerate(model.net.state_dict().items()):
        fname = f"p{idx:03d}.spdr"
        arr = tensor.detach().numpy().astype(np.float32)
        write_tensor(directory / fname, arr.reshape(-1, 1, 1))
        params.append({"name": name, "shape": list(arr.shape), "file": fname})
    manifest = {
        "kind": kind,
        "config": {
            "window_frames": model.config.window_frames,
            "n_feature_layers": model.config.n_feature_layers,
            "lrelu_slope": model.config.lrelu_slope,
            "channels": list(model.config.channels),
            "pool_factor": model.config.pool_factor,
        },
        "seed": model.seed,
        "norm_stats": (
            {"log_mean": model.norm_stats.log_mean} if model.norm_stats else None
        ),
        "extra": extra or {},
        "params": params,
    }
    with open(directory / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)


def load_manifest(directory: str | Path) -> dict:
    path = Path(directory) / "manifest.json"
    if not path.exists():
        raise FileNotFoundError(f"no checkpoint manifest at {path}")
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def load_model(directory: str | Path, extra_planes: int = 0,
               sigmoid_output: bool = False) -> MtrnetModel:
    directory = Path(directory)
    manifest = load_manifest(directory)
    config = MtrnetConfig(
        window_frames=manifest["config"]["window_frames"],
        n_feature_layers=manifest["config"]["n_feature_layers"],
        lrelu_slope=manifest["config"]["lrelu_slope"],
        channels=tuple(manifest["config"]["channels"]),
        pool_factor=manifest["config"]["pool_factor"],
    )
    net = MtrnetNet(config, extra_planes=extra_planes,
                    sigmoid_output=sigmoid_output)
    state = {}
    for entry in manifest["params"]:
        flat = read_tensor(directory / entry["file"])
        arr = flat.astype(np.float32).reshape(entry["shape"])
        state[entry["name"]] = torch.from_numpy(arr)
    net.load_state_dict(state)
    stats = manifest.get("norm_stats")
    return MtrnetModel(
        net=net,
        config=config,
        seed=manifest["seed"],
        norm_stats=NormStats(**stats) if stats else None,
    )


# ---------------------------------------------------------------------------
# Complexity accounting description
# ---------------------------------------------------------------------------

def flop_layers(config: MtrnetConfig, grid: tuple[int, int]) -> list[dict]:
    """Per-layer dimensions for FLOP accounting of one inference."""
    rows, cols = grid
    p = config.pool_factor
    pr, pc = rows // p, cols // p
    t = config.window_frames
    c_capture, c_feat, c_sum1, c_sum2 = config.channels
    layers: list[dict] = [
        {"kind": "conv3d", "out_elems": c_capture * t * rows * cols,
         "kernel_volume": 27, "in_channels": 1},
        {"kind": "lrelu", "out_elems": c_capture * t * rows * cols,
         "kernel_volume": 1, "in_channels": 1},
        {"kind": "sum_pool", "out_elems": c_capture * t * pr * pc,
         "kernel_volume": p * p, "in_channels": 1},
        {"kind": "conv2d", "out_elems": c_feat * pr * pc,
         "kernel_volume": 1, "in_channels": c_capture * t},
    ]
    for i in range(1, config.n_feature_layers + 1):
        layers.append({"kind": "conv2d", "out_elems": c_feat * pr * pc,
                       "kernel_volume": 9, "in_channels": c_feat})
        layers.append({"kind": "lrelu", "out_elems": c_feat * pr * pc,
                       "kernel_volume": 1, "in_channels": 1})
        if i % 2 == 0:
            layers.append({"kind": "add", "out_elems": c_feat * pr * pc,
                           "kernel_volume": 1, "in_channels": 1})
    layers.append({"kind": "add", "out_elems": c_feat * pr * pc,
                   "kernel_volume": 1, "in_channels": 1})  # global skip
    layers.extend([
        {"kind": "deconv2d", "out_elems": c_feat * rows * cols,
         "kernel_volume": p * p, "in_channels": c_feat},
        {"kind": "conv2d", "out_elems": c_sum1 * rows * cols,
         "kernel_volume": 9, "in_channels": c_feat},
        {"kind": "lrelu", "out_elems": c_sum1 * rows * cols,
         "kernel_volume": 1, "in_channels": 1},
        {"kind": "conv2d", "out_elems": c_sum2 * rows * cols,
         "kernel_volume": 9, "in_channels": c_sum1},
        {"kind": "lrelu", "out_elems": c_sum2 * rows * cols,
         "kernel_volume": 1, "in_channels": 1},
        {"kind": "conv2d", "out_elems": 1 * rows * cols,
         "kernel_volume": 9, "in_channels": c_sum2},
    ])
    return layers
