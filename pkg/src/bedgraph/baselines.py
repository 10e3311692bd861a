"""Classical interpolation baselines over radar picks.

All distances are in projected meters. The grid functions return a
:class:`RasterGrid` with the geometry of the template grid; the
``*Regressor`` classes expose the same interpolators with the usual
``fit(coords, values)`` / ``predict(coords)`` interface.
"""

import numpy as np
from scipy import ndimage
from scipy.interpolate import LinearNDInterpolator
from scipy.spatial import QhullError, cKDTree
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .exceptions import EmptyInputError, TriangulationError

COINCIDENT = 1e-9
QUERY_CHUNK = 4096


class PointIndex:
    """Exact k-nearest-neighbour index over 2-D points (a k-d tree)."""

    def __init__(self, coords):
        self.coords = np.asarray(coords, dtype=np.float64)
        self._tree = cKDTree(self.coords, balanced_tree=True)

    def __len__(self):
        return len(self.coords)

    def query(self, points, k):
        """Distances and indices of the ``k`` nearest points, ascending."""
        k = min(int(k), len(self))
        dist, idx = self._tree.query(np.atleast_2d(points), k=k)
        return dist.reshape(len(dist), k), idx.reshape(len(idx), k)


def _inverse_distance(dist, values, power):
    """Weighted mean per row; rows with a coincident pick return its value."""
    coincident = dist < COINCIDENT
    hit = coincident.any(axis=1)
    with np.errstate(divide="ignore"):
        w = np.where(coincident, 0.0, dist ** -float(power))
    out = np.sum(w * values, axis=1) / np.sum(w, axis=1) if w.size else np.empty(0)
    if hit.any():
        c = coincident[hit]
        out[hit] = np.sum(np.where(c, values[hit], 0.0), axis=1) / c.sum(axis=1)
    return out


class IDWRegressor(RegressorMixin, BaseEstimator):
    """Inverse-distance weighting over the ``n_neighbors`` nearest picks."""

    def __init__(self, power=2.0, n_neighbors=4000):
        self.power = power
        self.n_neighbors = n_neighbors

    def fit(self, X, y):
        X, y = check_X_y(X, y, y_numeric=True)
        if X.shape[1] != 2:
            raise ValueError("coordinates must have two columns (x, y)")
        self.index_ = PointIndex(X)
        self.values_ = y.astype(np.float64)
        self.n_features_in_ = 2
        return self

    def predict(self, X):
        check_is_fitted(self, "index_")
        X = check_array(X)
        out = np.empty(len(X))
        for start in range(0, len(X), QUERY_CHUNK):
            dist, idx = self.index_.query(X[start:start + QUERY_CHUNK], self.n_neighbors)
            out[start:start + QUERY_CHUNK] = _inverse_distance(dist, self.values_[idx], self.power)
        return out


class KNNRegressor(IDWRegressor):
    """Inverse-distance (power 1) weighted mean of the k nearest picks."""

    def __init__(self, n_neighbors=10000):
        super().__init__(power=1.0, n_neighbors=n_neighbors)


def _require_picks(picks):
    if len(picks) == 0:
        raise EmptyInputError("interpolation needs at least one radar pick")


def _grid_query(grid):
    x, y = grid.cell_centers()
    return np.column_stack([x.ravel(), y.ravel()])


def _to_grid(values, grid):
    return grid.like(values.reshape(grid.shape), np.ones(grid.shape, bool))


def idw_predict(picks, grid, power=2.0, k=4000):
    _require_picks(picks)
    model = IDWRegressor(power, k).fit(picks.coords, picks.bed_elev)
    return _to_grid(model.predict(_grid_query(grid)), grid)


def knn_weighted(picks, grid, k=10000):
    _require_picks(picks)
    model = KNNRegressor(k).fit(picks.coords, picks.bed_elev)
    return _to_grid(model.predict(_grid_query(grid)), grid)


def _merge_duplicates(coords, values):
    uniq, inverse = np.unique(coords, axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    sums = np.zeros(len(uniq))
    np.add.at(sums, inverse, values)
    return uniq, sums / np.bincount(inverse)


def linear_fill(picks, grid):
    """Delaunay piecewise-linear interpolation, nearest pick outside the hull."""
    if len(picks) < 3:
        raise TriangulationError(f"triangulation needs at least 3 picks, got {len(picks)}")
    coords, values = _merge_duplicates(picks.coords, picks.bed_elev)
    centered = coords - coords.mean(axis=0)
    if len(coords) < 3 or np.linalg.matrix_rank(centered, tol=1e-9 * max(1.0, np.abs(centered).max())) < 2:
        raise TriangulationError("radar picks are collinear")
    try:
        interp = LinearNDInterpolator(coords, values)
    except QhullError as exc:
        raise TriangulationError(f"Delaunay triangulation failed: {exc}") from exc
    query = _grid_query(grid)
    out = interp(query)
    outside = np.isnan(out)
    if outside.any():
        _, idx = PointIndex(coords).query(query[outside], 1)
        out[outside] = values[idx[:, 0]]
    return _to_grid(out, grid)


def gsgi(picks, grid, blur_sigma=5.0):
    """Gaussian-smoothed grid interpolation: linear fill then Gaussian blur."""
    filled = linear_fill(picks, grid)
    blurred = ndimage.gaussian_filter(filled.values, sigma=blur_sigma, mode="reflect", truncate=4.0)
    return _to_grid(blurred, grid)


BASELINES = {"idw": idw_predict, "knn": knn_weighted, "gsgi": gsgi}
