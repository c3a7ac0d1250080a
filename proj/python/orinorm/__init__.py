"""Oriented normal estimation for point clouds."""

from ._core import (
    DataError,
    Model,
    NumericError,
    cnd,
    estimate_baseline,
    evaluate,
    generate_benchmark,
    pca_normals,
    rmse,
    sample_shape,
    train,
    write_normals,
)

__all__ = [
    "DataError",
    "Model",
    "NumericError",
    "cnd",
    "estimate_baseline",
    "evaluate",
    "generate_benchmark",
    "pca_normals",
    "rmse",
    "sample_shape",
    "train",
    "write_normals",
]
