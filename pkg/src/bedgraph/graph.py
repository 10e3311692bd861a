"""Grid graphs, overlapping patches and patch stitching."""

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .exceptions import CoverageError, ShapeError
from .raster_io import RasterGrid


@dataclass(frozen=True, eq=False)
class GridGraph:
    """Directed edge list over ``node_count`` nodes.

    ``edges`` is a (2, E) int array of (src, dst) columns without self-loops.
    After :func:`normalize_adjacency`, ``self_weights`` (n,) and
    ``edge_weights`` (E,) hold the coefficients of D^-1/2 (A + I) D^-1/2.
    """

    node_count: int
    edges: np.ndarray
    self_weights: np.ndarray = None
    edge_weights: np.ndarray = None

    @property
    def edge_count(self):
        return self.edges.shape[1]

    @property
    def normalized(self):
        return self.self_weights is not None

    def adjacency(self):
        """Sparse propagation matrix P with (P @ h)[dst] = sum_src w * h[src]."""
        if not self.normalized:
            raise ValueError("graph has no normalized weights; call normalize_adjacency first")
        n = self.node_count
        nodes = np.arange(n)
        rows = np.concatenate([nodes, self.edges[1]])
        cols = np.concatenate([nodes, self.edges[0]])
        data = np.concatenate([self.self_weights, self.edge_weights])
        return sp.csr_matrix((data, (rows, cols)), shape=(n, n))

    def permuted(self, perm):
        """Relabel node ``u`` as ``perm[u]``."""
        perm = np.asarray(perm)
        edges = perm[self.edges]
        self_w = None
        if self.normalized:
            self_w = np.empty_like(self.self_weights)
            self_w[perm] = self.self_weights
        return GridGraph(self.node_count, edges, self_w, self.edge_weights)


def build_grid_edges(height, width):
    """4-neighbour bidirectional edges; node index is ``row * width + col``."""
    if height < 1 or width < 1:
        raise ShapeError(f"grid must be at least 1x1, got {height}x{width}")
    idx = np.arange(height * width).reshape(height, width)
    right = np.stack([idx[:, :-1].ravel(), idx[:, 1:].ravel()])
    down = np.stack([idx[:-1, :].ravel(), idx[1:, :].ravel()])
    pairs = np.concatenate([right, down], axis=1)
    edges = np.concatenate([pairs, pairs[::-1]], axis=1).astype(np.int64)
    return GridGraph(height * width, edges)


def normalize_adjacency(graph):
    deg = np.ones(graph.node_count)
    np.add.at(deg, graph.edges[1], 1.0)
    inv_sqrt = 1.0 / np.sqrt(deg)
    edge_w = inv_sqrt[graph.edges[0]] * inv_sqrt[graph.edges[1]]
    return GridGraph(graph.node_count, graph.edges, 1.0 / deg, edge_w)


def grid_graph(height, width):
    """Normalized 4-neighbour graph for an ``height x width`` patch."""
    return normalize_adjacency(build_grid_edges(height, width))


@dataclass(frozen=True, order=True)
class Patch:
    row0: int
    col0: int
    size: int = 16

    @property
    def rows(self):
        return slice(self.row0, self.row0 + self.size)

    @property
    def cols(self):
        return slice(self.col0, self.col0 + self.size)


def patch_offsets(extent, size, stride):
    if size > extent:
        raise ShapeError(f"patch size {size} exceeds extent {extent}")
    if stride < 1:
        raise ShapeError("stride must be >= 1")
    offsets = list(range(0, extent - size + 1, stride))
    if offsets[-1] != extent - size:
        offsets.append(extent - size)
    return offsets


def extract_patches(height, width, size=16, stride=8):
    rows = patch_offsets(height, size, stride)
    cols = patch_offsets(width, size, stride)
    return [Patch(r, c, size) for r in rows for c in cols]


def coverage_count(patches, height, width):
    count = np.zeros((height, width), dtype=np.int64)
    for p in patches:
        count[p.rows, p.cols] += 1
    return count


def stitch_predictions(patches, height, width, template=None):
    """Average overlapping patch predictions onto the full grid.

    ``patches`` is an iterable of ``(Patch, values)`` with ``values`` of
    shape (size, size) or (size*size,). ``template`` (a RasterGrid) supplies
    geometry for the result.
    """
    mean = np.zeros((height, width))
    count = np.zeros((height, width), dtype=np.int64)
    for patch, values in patches:
        values = np.asarray(values, dtype=np.float64).reshape(patch.size, patch.size)
        sl = (patch.rows, patch.cols)
        count[sl] += 1
        # running mean: agreeing patches reproduce their value bit for bit
        mean[sl] += (values - mean[sl]) / count[sl]
    if np.any(count == 0):
        raise CoverageError(f"{int((count == 0).sum())} cells are not covered by any patch")
    if template is None:
        return RasterGrid(mean)
    return template.like(mean, np.ones((height, width), dtype=bool))
