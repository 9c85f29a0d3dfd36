"""Sparse mobile-traffic sampling and reconstruction toolkit."""

from spider.core import (
    GridGeometry,
    NormStats,
    QualityConfig,
    SelectionMatrix,
    SparseMeasurement,
    StateWindow,
    TrafficSnapshot,
    apply_mask,
    denormalize,
    mae,
    nmae,
    normalize,
)
from spider.data import (
    BucketConfig,
    DatasetSeries,
    SplitSpec,
    SyntheticConfig,
    fit_normalizer,
    load_grid_csv,
    split,
    synthesize_traffic,
)
from spider.reconstruct import (
    CsConfig,
    StcsConfig,
    cs_complete,
    knn_s,
    stcs_complete,
)

__all__ = [
    "BucketConfig",
    "CsConfig",
    "DatasetSeries",
    "GridGeometry",
    "NormStats",
    "QualityConfig",
    "SelectionMatrix",
    "SparseMeasurement",
    "SplitSpec",
    "StateWindow",
    "StcsConfig",
    "SyntheticConfig",
    "TrafficSnapshot",
    "apply_mask",
    "cs_complete",
    "denormalize",
    "fit_normalizer",
    "knn_s",
    "load_grid_csv",
    "mae",
    "nmae",
    "normalize",
    "split",
    "stcs_complete",
    "synthesize_traffic",
]
