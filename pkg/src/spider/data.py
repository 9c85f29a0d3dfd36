"""Dataset handling: gridded-traffic CSV ingest, synthetic traffic generation,
train/test splitting, normalization fitting, and the binary tensor cache.

A series is indexed by contiguous timestep t (one step = ``delta_minutes``).
Calendar context (hour of day, day of week) is carried by the series itself:
timestep ``t0`` falls ``start_minute_of_day`` minutes into a day whose weekday
is ``day0_weekday`` (0 = Monday).
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from spider.core import (
    ConfigError,
    DegenerateStatsError,
    GridGeometry,
    IngestionError,
    InsufficientDataError,
    NormStats,
    RangeError,
    TrafficSnapshot,
    _freeze,
)

MINUTES_PER_DAY = 1440


@dataclass(frozen=True)
class LoadReport:
    """Bookkeeping from a CSV ingest run."""

    n_rows: int
    n_buckets: int
    n_zero_filled: int


@dataclass(frozen=True)
class DatasetSeries:
    """A time-ordered stack of traffic snapshots over one grid."""

    geometry: GridGeometry
    delta_minutes: int
    values: np.ndarray  # (n_steps, rows, cols), non-negative
    t0: int = 0
    day0_weekday: int = 0  # weekday of the day containing t0 (0 = Monday)
    start_minute_of_day: int = 0  # minutes into that day at t0
    day0_offset: int = 0  # whole days between the original series start and t0
    load_report: LoadReport | None = None

    def __post_init__(self) -> None:
        if self.delta_minutes <= 0 or MINUTES_PER_DAY % self.delta_minutes != 0:
            raise ConfigError(
                f"delta_minutes must divide a day evenly, got {self.delta_minutes}"
            )
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 3 or values.shape[1:] != self.geometry.shape:
            raise ConfigError(
                f"series values must be (steps, {self.geometry.rows}, "
                f"{self.geometry.cols}), got {values.shape}"
            )
        if values.size and values.min() < 0:
            raise ConfigError("traffic values must be non-negative")
        object.__setattr__(self, "values", _freeze(values))

    def __len__(self) -> int:
        return self.values.shape[0]

    @property
    def steps_per_day(self) -> int:
        return MINUTES_PER_DAY // self.delta_minutes

    @property
    def timestamps(self) -> range:
        return range(self.t0, self.t0 + len(self))

    def index_of(self, t: int) -> int:
        if t not in self.timestamps:
            raise RangeError(f"timestamp {t} outside series range {self.timestamps}")
        return t - self.t0

    def snapshot(self, t: int) -> TrafficSnapshot:
        return TrafficSnapshot(t=t, values=self.values[self.index_of(t)])

    @property
    def snapshots(self) -> list[TrafficSnapshot]:
        return [TrafficSnapshot(t=t, values=self.values[i])
                for i, t in enumerate(self.timestamps)]

    # -- calendar context ---------------------------------------------------

    def minute_of_day(self, t: int) -> int:
        offset = self.start_minute_of_day + (t - self.t0) * self.delta_minutes
        return offset % MINUTES_PER_DAY

    def day_offset(self, t: int) -> int:
        """Whole days elapsed since the day containing t0."""
        offset = self.start_minute_of_day + (t - self.t0) * self.delta_minutes
        return offset // MINUTES_PER_DAY

    def absolute_day(self, t: int) -> int:
        """Whole days since the original (pre-slicing) series start."""
        return self.day0_offset + self.day_offset(t)

    def hour_of_day(self, t: int) -> int:
        return self.minute_of_day(t) // 60

    def day_of_week(self, t: int) -> int:
        return (self.day0_weekday + self.day_offset(t)) % 7

    def week_of_month(self, t: int) -> int:
        return (self.day_offset(t) // 7) % 4

    def time_features(self, t: int) -> tuple[float, float, float]:
        """(hour, weekday, week-of-month), each scaled to [-1, 1]."""
        return (
            2.0 * self.hour_of_day(t) / 23.0 - 1.0,
            2.0 * self.day_of_week(t) / 6.0 - 1.0,
            2.0 * self.week_of_month(t) / 3.0 - 1.0,
        )

    # -- slicing ------------------------------------------------------------

    def slice_steps(self, start: int, stop: int) -> "DatasetSeries":
        if not (0 <= start <= stop <= len(self)):
            raise RangeError(f"slice [{start}, {stop}) outside series of length {len(self)}")
        minutes = self.start_minute_of_day + start * self.delta_minutes
        return DatasetSeries(
            geometry=self.geometry,
            delta_minutes=self.delta_minutes,
            values=self.values[start:stop].copy(),
            t0=self.t0 + start,
            day0_weekday=(self.day0_weekday + minutes // MINUTES_PER_DAY) % 7,
            start_minute_of_day=minutes % MINUTES_PER_DAY,
            day0_offset=self.day0_offset + minutes // MINUTES_PER_DAY,
        )


@dataclass(frozen=True)
class BucketConfig:
    """Evaluation-period partitions: peak hours and holiday days.

    Holidays are day offsets from the start of the full series' day 0.
    """

    peak_start_hour: int = 7
    peak_end_hour: int = 19
    holidays: frozenset[int] = frozenset()

    def __post_init__(self) -> None:
        if not 0 <= self.peak_start_hour < self.peak_end_hour <= 24:
            raise ConfigError("peak hours must satisfy 0 <= start < end <= 24")
        object.__setattr__(self, "holidays", frozenset(int(d) for d in self.holidays))

    def buckets_of(self, series: "DatasetSeries", t: int) -> tuple[str, ...]:
        """All buckets a timestamp belongs to (plus the implicit overall)."""
        hour = series.hour_of_day(t)
        out = ["peak" if self.peak_start_hour <= hour < self.peak_end_hour
               else "off-peak"]
        out.append("weekend" if series.day_of_week(t) >= 5 else "weekdays")
        if series.absolute_day(t) in self.holidays:
            out.append("holiday")
        out.append("overall")
        return tuple(out)


BUCKET_NAMES = ("peak", "off-peak", "weekdays", "weekend", "holiday", "overall")


@dataclass(frozen=True)
class SyntheticConfig:
    """Desk-scale diurnal traffic generator settings.

    ``texture_std`` controls a static per-cell log-normal gain on the spatial
    kernel; real deployments show strong cell-to-cell demand heterogeneity
    that persists over time, which is what history-aware reconstruction
    exploits and pure spatial interpolation cannot.
    """

    geometry: GridGeometry = field(default_factory=lambda: GridGeometry(20, 20))
    days: int = 10
    delta_minutes: int = 10
    seed: int = 0
    base_level: float = 5.0
    peak_amplitude: float = 40.0
    n_hotspots: int = 3
    noise_std: float = 0.1
    weekend_scale: float = 0.6
    texture_std: float = 0.5

    def __post_init__(self) -> None:
        if self.days < 1:
            raise ConfigError("days must be >= 1")
        if self.base_level <= 0 and self.peak_amplitude <= 0:
            raise ConfigError("base_level or peak_amplitude must be positive")
        if self.base_level < 0 or self.peak_amplitude < 0:
            raise ConfigError("levels must be non-negative")
        if self.n_hotspots < 0:
            raise ConfigError("n_hotspots must be >= 0")
        if self.noise_std < 0:
            raise ConfigError("noise_std must be >= 0")
        if not 0 < self.weekend_scale <= 1:
            raise ConfigError("weekend_scale must lie in (0, 1]")
        if self.texture_std < 0:
            raise ConfigError("texture_std must be >= 0")


@dataclass(frozen=True)
class SplitSpec:
    """Contiguous train-then-test split measured in whole days."""

    train_days: int
    test_days: int

    def __post_init__(self) -> None:
        if self.train_days < 1 or self.test_days < 1:
            raise ConfigError("train_days and test_days must be >= 1")


def _diurnal_profile(minute_of_day: np.ndarray) -> np.ndarray:
    # Raised cosine peaking at 13:30, so the high plateau spans 09:00-18:00.
    hours = minute_of_day / 60.0
    return 0.5 * (1.0 + np.cos(2.0 * np.pi * (hours - 13.5) / 24.0))


def synthesize_traffic(config: SyntheticConfig) -> DatasetSeries:
    """Generate diurnal hotspot traffic, deterministic for a given seed.

    Per-cell signal = base_level + peak_amplitude * kernel * diurnal * dayfactor,
    where the kernel is 1 plus Gaussian bumps at seeded hotspot locations.
    Noise is Gaussian with a standard deviation proportional to the momentary
    signal (noise_std is a relative level), and the result is clipped at 0 so
    peak hours carry more absolute noise than quiet ones.
    """
    rng = np.random.default_rng(config.seed)
    geom = config.geometry
    steps_per_day = MINUTES_PER_DAY // config.delta_minutes
    n_steps = config.days * steps_per_day

    rows = np.arange(geom.rows, dtype=np.float64)[:, None]
    cols = np.arange(geom.cols, dtype=np.float64)[None, :]
    kernel = np.ones(geom.shape)
    sigma = max(1.5, min(geom.rows, geom.cols) / 6.0)
    centers = rng.uniform(low=(0.0, 0.0), high=(geom.rows, geom.cols),
                          size=(config.n_hotspots, 2))
    for cr, cc in centers:
        kernel += np.exp(-((rows - cr) ** 2 + (cols - cc) ** 2) / (2.0 * sigma**2))
    kernel *= np.exp(rng.standard_normal(geom.shape) * config.texture_std)

    minutes = (np.arange(n_steps) * config.delta_minutes) % MINUTES_PER_DAY
    diurnal = _diurnal_profile(minutes)
    weekday = (np.arange(n_steps) // steps_per_day) % 7
    day_factor = np.where(weekday >= 5, config.weekend_scale, 1.0)

    signal = (config.base_level
              + config.peak_amplitude * kernel[None, :, :]
              * (diurnal * day_factor)[:, None, None])
    noise = rng.standard_normal(signal.shape) * (config.noise_std * signal)
    return DatasetSeries(
        geometry=geom,
        delta_minutes=config.delta_minutes,
        values=np.clip(signal + noise, 0.0, None),
    )


def split(series: DatasetSeries, spec: SplitSpec) -> tuple[DatasetSeries, DatasetSeries]:
    """Cut a series into a contiguous train prefix and test suffix on day boundaries."""
    spd = series.steps_per_day
    need = (spec.train_days + spec.test_days) * spd
    if need > len(series):
        raise RangeError(
            f"split needs {need} steps ({spec.train_days}+{spec.test_days} days) "
            f"but series has {len(series)}"
        )
    cut = spec.train_days * spd
    return series.slice_steps(0, cut), series.slice_steps(cut, need)


def fit_normalizer(train: DatasetSeries) -> NormStats:
    """Mean of log(1 + x) over every cell and timestep of the training split."""
    if len(train) == 0:
        raise InsufficientDataError("cannot fit a normalizer on an empty series")
    log_mean = float(np.log1p(train.values).mean())
    if log_mean <= 0:
        raise DegenerateStatsError("training series is all zeros; normalizer undefined")
    return NormStats(log_mean=log_mean)


# ---------------------------------------------------------------------------
# CSV ingest
# ---------------------------------------------------------------------------

_EPOCH_WEEKDAY = 3  # 1970-01-01 was a Thursday


def load_grid_csv(path: str | Path, geometry: GridGeometry,
                  delta_minutes: int) -> DatasetSeries:
    """Ingest ``timestamp_ms,cell_id,traffic`` rows into a zero-filled series.

    Records landing in the same (time bucket, cell) pair are summed. Buckets
    never seen in the file are zero-filled, and the count of zero-filled
    (bucket, cell) pairs is available on the returned series' ``load_report``.
    Cell ids are 1-based row-major: ``cell_id = row * cols + col + 1``.
    A header row is detected by a non-numeric first field and skipped.
    """
    geom = geometry
    bucket_ms = delta_minutes * 60_000
    totals: dict[tuple[int, int], float] = {}
    n_rows = 0
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        for line_no, row in enumerate(reader, start=1):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if line_no == 1:
                try:
                    float(row[0])
                except ValueError:
                    continue  # header
            if len(row) < 3:
                raise IngestionError(f"line {line_no}: expected 3 fields, got {len(row)}")
            try:
                ts_ms = int(float(row[0]))
                cell_id = int(row[1])
                traffic = float(row[2])
            except ValueError as exc:
                raise IngestionError(f"line {line_no}: {exc}") from exc
            if not 1 <= cell_id <= geom.n_cells:
                raise RangeError(
                    f"line {line_no}: cell_id {cell_id} outside [1, {geom.n_cells}]"
                )
            key = (ts_ms // bucket_ms, cell_id - 1)
            totals[key] = totals.get(key, 0.0) + traffic
            n_rows += 1

    if not totals:
        empty = np.zeros((0, geom.rows, geom.cols))
        return DatasetSeries(
            geometry=geom, delta_minutes=delta_minutes, values=empty,
            load_report=LoadReport(n_rows=0, n_buckets=0, n_zero_filled=0),
        )

    buckets = sorted({b for b, _ in totals})
    first, last = buckets[0], buckets[-1]
    n_steps = last - first + 1
    values = np.zeros((n_steps, geom.n_cells))
    for (bucket, cell), total in totals.items():
        values[bucket - first, cell] += total

    start_minutes = first * delta_minutes
    report = LoadReport(
        n_rows=n_rows,
        n_buckets=n_steps,
        n_zero_filled=n_steps * geom.n_cells - len(totals),
    )
    return DatasetSeries(
        geometry=geom,
        delta_minutes=delta_minutes,
        values=values.reshape(n_steps, geom.rows, geom.cols),
        t0=0,
        day0_weekday=(_EPOCH_WEEKDAY + start_minutes // MINUTES_PER_DAY) % 7,
        start_minute_of_day=start_minutes % MINUTES_PER_DAY,
        load_report=report,
    )


# ---------------------------------------------------------------------------
# Binary tensor cache
# ---------------------------------------------------------------------------

_MAGIC = b"SPDR"
_VERSION = 1
_HEADER = struct.Struct("<4sIIII")  # magic, version, T, X, Y


def write_tensor(path: str | Path, values: np.ndarray) -> None:
    """Write a (T, X, Y) float tensor in the flat little-endian container."""
    values = np.asarray(values)
    if values.ndim != 3:
        raise ConfigError(f"tensor container holds 3-D arrays, got {values.ndim}-D")
    t, x, y = values.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(_MAGIC, _VERSION, t, x, y))
        fh.write(np.ascontiguousarray(values, dtype="<f4").tobytes())


def read_tensor(path: str | Path) -> np.ndarray:
    with open(path, "rb") as fh:
        header = fh.read(_HEADER.size)
        if len(header) != _HEADER.size:
            raise ArtifactTruncated(path, "header")
        magic, version, t, x, y = _HEADER.unpack(header)
        if magic != _MAGIC:
            raise IngestionError(f"{path}: bad magic {magic!r}")
        if version != _VERSION:
            raise IngestionError(f"{path}: unsupported version {version}")
        payload = fh.read(4 * t * x * y)
        if len(payload) != 4 * t * x * y:
            raise ArtifactTruncated(path, "payload")
    return np.frombuffer(payload, dtype="<f4").reshape(t, x, y).astype(np.float64)


class ArtifactTruncated(IngestionError):
    def __init__(self, path: object, part: str):
        super().__init__(f"{path}: truncated tensor file ({part})")


def save_series_cache(series: DatasetSeries, path: str | Path) -> None:
    write_tensor(path, series.values)


def load_series_cache(path: str | Path, geometry: GridGeometry | None = None,
                      delta_minutes: int = 10, t0: int = 0,
                      day0_weekday: int = 0,
                      start_minute_of_day: int = 0) -> DatasetSeries:
    values = read_tensor(path)
    geom = geometry or GridGeometry(values.shape[1], values.shape[2])
    return DatasetSeries(
        geometry=geom, delta_minutes=delta_minutes, values=values, t0=t0,
        day0_weekday=day0_weekday, start_minute_of_day=start_minute_of_day,
    )
