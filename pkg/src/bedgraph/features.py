"""Covariate standardization plus gradient and trend-surface augmentation."""

import json
from dataclasses import dataclass
from itertools import chain
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .exceptions import EmptyInputError, ShapeError, SingularFitError
from .raster_io import FEATURE_NAMES, RasterGrid, RegionDataset, read_raster, write_raster, ensure_dir

STD_GUARD = 1e-12


def standardize(grid):
    """Z-score over valid cells. Returns ``(grid, mean, std)``.

    A field with std below ``STD_GUARD`` becomes all zeros and reports std 1.
    """
    valid = grid.values[grid.valid_mask]
    if valid.size == 0:
        raise EmptyInputError("cannot standardize a raster with no valid cells")
    mean = float(valid.mean())
    std = float(valid.std())
    if std < STD_GUARD:
        return grid.like(np.where(grid.valid_mask, 0.0, np.nan)), mean, 1.0
    return grid.like((grid.values - mean) / std), mean, std


def compute_gradients(grid):
    """Per-index finite differences; x runs along columns, y along rows."""
    if grid.height < 2 or grid.width < 2:
        raise ShapeError(f"gradients need at least a 2x2 grid, got {grid.shape}")
    gy, gx = np.gradient(grid.values, edge_order=1)
    return grid.like(gx), grid.like(gy)


def trend_exponents(degree):
    """(i, j) pairs with i + j <= degree, lexicographic."""
    return [(i, j) for i in range(degree + 1) for j in range(degree + 1 - i)]


def normalized_coords(height, width):
    """Column (x) and row (y) coordinates mapped affinely onto [-1, 1]."""
    def axis(n):
        return np.zeros(1) if n == 1 else np.linspace(-1.0, 1.0, n)

    return np.meshgrid(axis(width), axis(height))


def trend_basis(x, y, degree):
    return np.stack([x ** i * y ** j for i, j in trend_exponents(degree)], axis=-1)


@dataclass(frozen=True)
class TrendModel:
    degree: int
    coeffs: np.ndarray
    height: int
    width: int

    @property
    def coord_scale(self):
        """(scale, offset) per axis such that coord = scale * index + offset."""
        def affine(n):
            return (0.0, 0.0) if n == 1 else (2.0 / (n - 1), -1.0)

        return {"x": affine(self.width), "y": affine(self.height)}

    def evaluate(self):
        x, y = normalized_coords(self.height, self.width)
        return trend_basis(x, y, self.degree) @ self.coeffs


def fit_trend(grid, degree=2):
    """Least-squares polynomial trend surface over the valid cells."""
    if degree < 0:
        raise ValueError("degree must be non-negative")
    n_terms = (degree + 1) * (degree + 2) // 2
    mask = grid.valid_mask
    if mask.sum() < n_terms:
        raise SingularFitError(f"{mask.sum()} valid cells cannot determine {n_terms} trend coefficients")
    x, y = normalized_coords(grid.height, grid.width)
    basis = trend_basis(x[mask], y[mask], degree)
    coeffs, _, rank, sv = np.linalg.lstsq(basis, grid.values[mask], rcond=None)
    if rank < n_terms:
        cond = float(sv[0] / sv[-1]) if sv[-1] > 0 else float("inf")
        raise SingularFitError(f"trend design matrix is rank deficient (rank {rank} < {n_terms}, cond {cond:.3g})", cond)
    model = TrendModel(degree, coeffs, grid.height, grid.width)
    return model, grid.like(model.evaluate())


def channel_names(use_gradients=True, use_trend=True):
    names = list(FEATURE_NAMES)
    if use_gradients:
        names += list(chain.from_iterable((f"d{n}_dx", f"d{n}_dy") for n in FEATURE_NAMES))
    if use_trend:
        names += [f"trend_{n}" for n in FEATURE_NAMES]
    return names


@dataclass(frozen=True, eq=False)
class FeatureStack:
    """Node-feature tensor ``data`` of shape (channels, height, width)."""

    channels: tuple
    data: np.ndarray
    norm_stats: dict

    @property
    def height(self):
        return self.data.shape[1]

    @property
    def width(self):
        return self.data.shape[2]

    @property
    def n_features(self):
        return len(self.channels)

    def patch_nodes(self, row0, col0, size):
        """Features of a square patch as an (size*size, F) node matrix."""
        block = self.data[:, row0:row0 + size, col0:col0 + size]
        return np.ascontiguousarray(block.reshape(len(self.channels), -1).T)

    def save(self, directory):
        directory = ensure_dir(directory)
        for k, name in enumerate(self.channels):
            write_raster(RasterGrid(self.data[k]), directory / f"{k:02d}_{name}.npy")
        meta = {"channels": list(self.channels), "norm_stats": {k: list(v) for k, v in self.norm_stats.items()}}
        (directory / "stack.json").write_text(json.dumps(meta, indent=2))

    @classmethod
    def load(cls, directory):
        directory = Path(directory)
        meta = json.loads((directory / "stack.json").read_text())
        data = np.stack([read_raster(directory / f"{k:02d}_{name}.npy").values
                         for k, name in enumerate(meta["channels"])])
        return cls(tuple(meta["channels"]), data, {k: tuple(v) for k, v in meta["norm_stats"].items()})


class FeatureAugmenter(TransformerMixin, BaseEstimator):
    """Standardize the five covariates and append gradient/trend channels.

    ``fit`` records per-covariate mean and std; ``transform`` produces a
    :class:`FeatureStack` with channels ordered raw, gradients, trends.
    Nodata cells are zero-filled (the standardized mean) so every node has
    finite features.
    """

    def __init__(self, use_gradients=True, use_trend=True, degree=2):
        self.use_gradients = use_gradients
        self.use_trend = use_trend
        self.degree = degree

    def fit(self, region, y=None):
        _check_region(region)
        self.norm_stats_ = {}
        for name, grid in region.features.items():
            _, mean, std = standardize(grid)
            self.norm_stats_[name] = (mean, std)
        self.channels_ = tuple(channel_names(self.use_gradients, self.use_trend))
        self.n_features_out_ = len(self.channels_)
        return self

    def transform(self, region):
        check_is_fitted(self, "norm_stats_")
        _check_region(region)
        raw, grads, trends = [], [], []
        for name, grid in region.features.items():
            mean, std = self.norm_stats_[name]
            z = grid.like((grid.values - mean) / std)
            filled = grid.like(np.where(z.valid_mask, z.values, 0.0))
            raw.append(filled.values)
            if self.use_gradients:
                gx, gy = compute_gradients(filled)
                grads += [gx.values, gy.values]
            if self.use_trend:
                _, surface = fit_trend(z, self.degree)
                trends.append(surface.values)
        data = np.stack(raw + grads + trends)
        return FeatureStack(self.channels_, data, dict(self.norm_stats_))

    def get_feature_names_out(self, input_features=None):
        check_is_fitted(self, "channels_")
        return np.asarray(self.channels_, dtype=object)


def _check_region(region):
    if not isinstance(region, RegionDataset):
        raise TypeError(f"expected a RegionDataset, got {type(region).__name__}")


def build_feature_stack(region, use_gradients=True, use_trend=True, degree=2):
    return FeatureAugmenter(use_gradients, use_trend, degree).fit_transform(region)
