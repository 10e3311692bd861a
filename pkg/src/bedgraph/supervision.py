"""Radar confidence map, the three loss terms and the learnable balancer."""

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .exceptions import ConfigError, ShapeError

TERMS = ("radar", "ref", "unc")


def euclidean_distance_transform(mask, return_indices=False):
    """Exact distance (cell units) from every cell to the nearest True cell.

    An all-False mask yields +inf everywhere. With ``return_indices`` the
    (2, H, W) row/col index of the nearest True cell is returned as well.
    """
    mask = np.asarray(mask, dtype=bool)
    if mask.size == 0:
        raise ShapeError("mask must be non-empty")
    if not mask.any():
        dist = np.full(mask.shape, np.inf)
        if return_indices:
            return dist, np.full((mask.ndim,) + mask.shape, -1)
        return dist
    return ndimage.distance_transform_edt(~mask, return_indices=return_indices)


@dataclass(frozen=True, eq=False)
class ConfidenceMap:
    distances: np.ndarray
    confidences: np.ndarray
    sigma: float


def confidence_from_distance(distances, sigma=10.0):
    if not sigma > 0:
        raise ConfigError(f"sigma must be positive, got {sigma}")
    d = np.asarray(distances, dtype=np.float64)
    conf = np.exp(-(d * d) / (2.0 * sigma * sigma))
    return ConfidenceMap(d, conf, float(sigma))


def confidence_map(radar_mask, sigma=10.0):
    return confidence_from_distance(euclidean_distance_transform(radar_mask), sigma)


@dataclass(frozen=True)
class LossTerms:
    radar: float
    ref: float
    unc: float
    n_radar: int = 0
    n_ref: int = 0
    n_unc: int = 0

    def as_array(self):
        return np.array([self.radar, self.ref, self.unc])


def _check_congruent(*arrays):
    shapes = {np.shape(a) for a in arrays}
    if len(shapes) != 1:
        raise ShapeError(f"loss inputs are not congruent: {sorted(shapes)}")


def loss_terms(mean_pred, passes, radar_values, radar_mask, confidences, ref_bed,
               eval_mask=None, valid_mask=None):
    """Evaluate the radar, reference and variance terms on full arrays.

    ``passes`` stacks the N stochastic predictions along axis 0. Radar cells
    (R) are ``radar_mask & eval_mask``; reference cells (B) are the valid,
    evaluated cells outside the radar mask; the variance term averages over
    valid evaluated cells. An empty set contributes 0.
    """
    mean_pred = np.asarray(mean_pred, dtype=np.float64)
    passes = np.asarray(passes, dtype=np.float64)
    if passes.ndim == mean_pred.ndim:
        passes = passes[None]
    if passes.shape[1:] != mean_pred.shape or passes.shape[0] < 1:
        raise ShapeError(f"passes shape {passes.shape} does not stack mean shape {mean_pred.shape}")
    radar_mask = np.asarray(radar_mask, dtype=bool)
    eval_mask = np.ones(mean_pred.shape, bool) if eval_mask is None else np.asarray(eval_mask, bool)
    if valid_mask is None:
        valid_mask = np.isfinite(np.asarray(ref_bed, dtype=np.float64)) | radar_mask
    _check_congruent(mean_pred, radar_values, radar_mask, confidences, ref_bed, eval_mask, valid_mask)

    in_r = radar_mask & eval_mask
    in_b = ~radar_mask & valid_mask & eval_mask
    in_u = valid_mask & eval_mask

    err_r = np.where(in_r, mean_pred - np.where(in_r, radar_values, 0.0), 0.0)
    n_r = int(in_r.sum())
    l_radar = float(np.sum(np.where(in_r, confidences, 0.0) * err_r ** 2) / n_r) if n_r else 0.0

    err_b = np.where(in_b, mean_pred - np.where(in_b, ref_bed, 0.0), 0.0)
    n_b = int(in_b.sum())
    l_ref = float(np.sum(err_b ** 2) / n_b) if n_b else 0.0

    var = passes.var(axis=0)
    n_u = int(in_u.sum())
    l_unc = float(var[in_u].sum() / n_u) if n_u else 0.0
    return LossTerms(l_radar, l_ref, l_unc, n_r, n_b, n_u)


@dataclass
class BalancerState:
    """Learnable log-sigma per loss term; weight on term k is exp(-2 s_k) / 2.

    ``active`` switches terms off entirely (used for the no-reference-loss
    ablation): an inactive term contributes neither its loss nor ``s_k``.
    """

    s: np.ndarray = field(default_factory=lambda: np.zeros(3))
    active: tuple = (True, True, True)

    def __post_init__(self):
        self.s = np.array(self.s, dtype=np.float64).reshape(3)
        self.active = tuple(bool(a) for a in self.active)

    @property
    def weights(self):
        return 0.5 * np.exp(-2.0 * self.s)

    @property
    def sigmas(self):
        return np.exp(self.s)

    def copy(self):
        return BalancerState(self.s.copy(), self.active)


def balanced_total(terms, balancer):
    L = terms.as_array() if isinstance(terms, LossTerms) else np.asarray(terms, dtype=np.float64)
    on = np.array(balancer.active)
    return float(np.sum((balancer.weights * L + balancer.s)[on]))


def balancer_gradient(terms, balancer):
    """d total / d s_k = 1 - exp(-2 s_k) L_k for active terms, else 0."""
    L = terms.as_array() if isinstance(terms, LossTerms) else np.asarray(terms, dtype=np.float64)
    return np.where(balancer.active, 1.0 - np.exp(-2.0 * balancer.s) * L, 0.0)


@dataclass(frozen=True, eq=False)
class SupervisionGrids:
    """Full-grid targets in model units, ready for patch slicing.

    ``radar_weight`` is the per-cell confidence on supervised radar cells
    and 0 elsewhere; ``ref_sel`` marks reference-loss cells (set B) and
    ``unc_sel`` the cells averaged by the variance term.
    """

    radar: np.ndarray
    radar_weight: np.ndarray
    radar_sel: np.ndarray
    ref: np.ndarray
    ref_sel: np.ndarray
    unc_sel: np.ndarray
    confidence: ConfidenceMap

    def patch(self, patch):
        sl = (patch.rows, patch.cols)
        return PatchTargets(*(a[sl].ravel() for a in (
            self.radar, self.radar_weight, self.radar_sel, self.ref, self.ref_sel, self.unc_sel)))


@dataclass(frozen=True, eq=False)
class PatchTargets:
    radar: np.ndarray
    radar_weight: np.ndarray
    radar_sel: np.ndarray
    ref: np.ndarray
    ref_sel: np.ndarray
    unc_sel: np.ndarray

    @classmethod
    def from_arrays(cls, radar_values, radar_mask, confidences, ref_bed, eval_mask=None, valid_mask=None):
        radar_mask = np.asarray(radar_mask, bool).ravel()
        ref_bed = np.asarray(ref_bed, np.float64).ravel()
        n = radar_mask.size
        eval_mask = np.ones(n, bool) if eval_mask is None else np.asarray(eval_mask, bool).ravel()
        valid_mask = (np.isfinite(ref_bed) | radar_mask) if valid_mask is None else np.asarray(valid_mask, bool).ravel()
        in_r = radar_mask & eval_mask
        in_b = ~radar_mask & valid_mask & eval_mask
        radar = np.where(in_r, np.asarray(radar_values, np.float64).ravel(), 0.0)
        weight = np.where(in_r, np.asarray(confidences, np.float64).ravel(), 0.0)
        return cls(radar, weight, in_r, np.where(in_b, ref_bed, 0.0), in_b, valid_mask & eval_mask)

    def counts(self):
        return np.array([self.radar_sel.sum(), self.ref_sel.sum(), self.unc_sel.sum()], dtype=np.int64)


def build_supervision(radar_values, radar_mask, ref_bed, valid_mask, sigma=10.0,
                      eval_mask=None, dilation_radius=0.0, offset=0.0, scale=1.0):
    """Assemble supervision grids, mapping targets through (v - offset) / scale.

    Radar cells outside ``eval_mask`` are discarded before the distance
    transform so that held-out cells cannot influence any weight. With a
    positive ``dilation_radius``, non-radar cells within that distance adopt
    the value of their nearest radar cell with the decayed confidence.
    """
    radar_values = np.asarray(radar_values, np.float64)
    valid_mask = np.asarray(valid_mask, bool)
    eval_mask = np.ones(valid_mask.shape, bool) if eval_mask is None else np.asarray(eval_mask, bool)
    seen_radar = np.asarray(radar_mask, bool) & eval_mask & valid_mask
    dist, nearest = euclidean_distance_transform(seen_radar, return_indices=True)
    conf = confidence_from_distance(dist, sigma)

    radar_sel = seen_radar.copy()
    radar = np.where(seen_radar, radar_values, 0.0)
    if dilation_radius > 0 and seen_radar.any():
        extra = ~seen_radar & (dist <= dilation_radius) & valid_mask & eval_mask
        radar[extra] = radar_values[nearest[0][extra], nearest[1][extra]]
        radar_sel |= extra
    weight = np.where(radar_sel, conf.confidences, 0.0)
    ref_sel = ~radar_sel & valid_mask & eval_mask
    ref = np.where(ref_sel, np.asarray(ref_bed, np.float64), 0.0)
    radar = np.where(radar_sel, (radar - offset) / scale, 0.0)
    ref = np.where(ref_sel, (ref - offset) / scale, 0.0)
    return SupervisionGrids(radar, weight, radar_sel, ref, ref_sel, valid_mask & eval_mask, conf)
