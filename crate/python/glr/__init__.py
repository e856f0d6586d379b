"""Point-cloud representation learning: geometry kernels, synthetic
datasets, and frozen-model feature extraction, implemented in Rust."""

from ._native import (
    Model,
    Sample,
    ball_query,
    chamfer,
    folding_grid,
    fps,
    synthetic_dataset,
)

__all__ = [
    "Model",
    "Sample",
    "ball_query",
    "chamfer",
    "folding_grid",
    "fps",
    "synthetic_dataset",
]
