import numpy as np
import pytest

from bedgraph.exceptions import ConfigError, ShapeError
from bedgraph.supervision import (
    BalancerState,
    LossTerms,
    PatchTargets,
    balanced_total,
    balancer_gradient,
    build_supervision,
    confidence_from_distance,
    confidence_map,
    euclidean_distance_transform,
    loss_terms,
)


def brute_edt(mask):
    pts = np.argwhere(mask)
    H, W = mask.shape
    out = np.full(mask.shape, np.inf)
    for r in range(H):
        for c in range(W):
            if len(pts):
                out[r, c] = np.sqrt(np.min((pts[:, 0] - r) ** 2 + (pts[:, 1] - c) ** 2))
    return out


def test_edt_small_cases():
    mask = np.zeros((3, 3), bool)
    mask[0, 0] = True
    d = euclidean_distance_transform(mask)
    assert d[0, 0] == 0 and d[2, 2] == 2 * np.sqrt(2)
    assert np.all(np.isinf(euclidean_distance_transform(np.zeros((4, 4), bool))))


def test_edt_brute_force(rng):
    for _ in range(20):
        mask = rng.random((12, 12)) < rng.uniform(0.01, 0.3)
        assert np.array_equal(euclidean_distance_transform(mask), brute_edt(mask))


def test_confidence_closed_forms():
    c = confidence_from_distance(np.array([0.0, 10.0, 30.0, np.inf]), 10.0).confidences
    assert c[0] == 1.0
    assert abs(c[1] - np.exp(-0.5)) < 1e-15 and abs(c[1] - 0.60653) < 1e-5
    assert abs(c[2] - 0.01111) < 1e-5
    assert c[3] == 0.0
    for bad in (0.0, -1.0):
        with pytest.raises(ConfigError):
            confidence_from_distance(np.zeros(2), bad)


def test_confidence_map_properties(rng):
    mask = rng.random((20, 20)) < 0.05
    mask[0, 0] = True
    cm = confidence_map(mask, 3.0)
    assert np.all(cm.confidences[mask] == 1.0)
    assert np.all((cm.confidences > 0) & (cm.confidences <= 1))
    order = np.argsort(cm.distances.ravel())
    assert np.all(np.diff(cm.confidences.ravel()[order]) <= 0)


def test_confidence_map_pick_order_invariant(rng):
    from bedgraph.raster_io import RadarPickSet, RasterGrid, rasterize_picks
    grid = RasterGrid(np.zeros((15, 15)))
    x, y, z = rng.uniform(0, 14, 40), rng.uniform(0, 14, 40), rng.normal(size=40)
    perm = rng.permutation(40)
    _, m1, _, _ = rasterize_picks(RadarPickSet(x, y, z), grid)
    _, m2, _, _ = rasterize_picks(RadarPickSet(x[perm], y[perm], z[perm]), grid)
    assert np.array_equal(confidence_map(m1).confidences, confidence_map(m2).confidences)


def _grid_inputs(rng, shape=(6, 7)):
    pred = rng.normal(size=shape)
    passes = pred[None] + rng.normal(size=(5,) + shape) * 0.1
    radar_mask = rng.random(shape) < 0.3
    return pred, passes, rng.normal(size=shape), radar_mask, rng.uniform(0.1, 1, shape), rng.normal(size=shape)


def test_loss_perfect_fit():
    y = np.arange(12.0).reshape(3, 4)
    mask = np.zeros((3, 4), bool)
    mask[1, 1] = True
    t = loss_terms(y, np.stack([y, y, y]), y, mask, np.ones((3, 4)), y)
    assert (t.radar, t.ref, t.unc) == (0.0, 0.0, 0.0)


def test_loss_hand_cases():
    t = loss_terms(np.array([3.0]), np.array([[3.0]]), np.array([1.0]), np.array([True]),
                   np.array([0.5]), np.array([np.nan]))
    assert t.radar == 2.0 and t.n_radar == 1 and t.ref == 0.0 and t.n_ref == 0
    t = loss_terms(np.array([2.0]), np.array([[1.0], [3.0]]), np.array([0.0]), np.array([False]),
                   np.array([0.0]), np.array([2.0]))
    assert t.unc == 1.0 and t.ref == 0.0
    t = loss_terms(np.array([2.0]), np.array([[2.0]]), np.array([1.0]), np.array([True]),
                   np.array([1.0]), np.array([0.0]))
    assert t.radar == 1.0


def test_loss_brute_force(rng):
    pred, passes, rv, rm, conf, ref = _grid_inputs(rng)
    ref[0, 0] = np.nan
    rm[0, 0] = False
    valid = np.isfinite(ref)
    ev = rng.random(pred.shape) < 0.7
    t = loss_terms(pred, passes, rv, rm, conf, ref, ev, valid)
    R = [(i, j) for i in range(6) for j in range(7) if rm[i, j] and ev[i, j]]
    B = [(i, j) for i in range(6) for j in range(7) if not rm[i, j] and valid[i, j] and ev[i, j]]
    U = [(i, j) for i in range(6) for j in range(7) if valid[i, j] and ev[i, j]]
    lr = sum(conf[c] * (pred[c] - rv[c]) ** 2 for c in R) / len(R)
    lb = sum((pred[c] - ref[c]) ** 2 for c in B) / len(B)
    lu = sum(np.mean((passes[(slice(None),) + c] - passes[(slice(None),) + c].mean()) ** 2) for c in U) / len(U)
    assert np.allclose([t.radar, t.ref, t.unc], [lr, lb, lu], rtol=1e-12)
    assert (t.n_radar, t.n_ref, t.n_unc) == (len(R), len(B), len(U))


def test_loss_shape_error(rng):
    pred, passes, rv, rm, conf, ref = _grid_inputs(rng)
    with pytest.raises(ShapeError):
        loss_terms(pred, passes, rv[:, :3], rm, conf, ref)


def test_mask_partition_invariance(rng):
    pred, passes, rv, rm, conf, ref = _grid_inputs(rng)
    base = loss_terms(pred, passes, rv, rm, conf, ref)
    outside = np.where(rm, pred, pred + 5.0)
    inside = np.where(rm, pred + 5.0, pred)
    assert loss_terms(outside, passes, rv, rm, conf, ref).radar == base.radar
    assert loss_terms(inside, passes, rv, rm, conf, ref).ref == base.ref


def test_confidence_scaling(rng):
    pred, passes, rv, rm, conf, ref = _grid_inputs(rng)
    base = loss_terms(pred, passes, rv, rm, conf, ref).radar
    assert loss_terms(pred, passes, rv, rm, conf * 4.0, ref).radar == 4.0 * base
    assert np.isclose(loss_terms(pred, passes, rv, rm, conf * 0.37, ref).radar, 0.37 * base, rtol=1e-14)


def test_balanced_total():
    assert balanced_total(LossTerms(1, 1, 1), BalancerState()) == 1.5
    bal = BalancerState([0.3, -0.2, 1.1])
    L = np.array([2.0, 0.5, 7.0])
    assert np.isclose(balanced_total(L, bal), np.sum(np.exp(-2 * bal.s) / 2 * L + bal.s))
    off = BalancerState([0.3, -0.2, 1.1], active=(True, False, True))
    assert np.isclose(balanced_total(L, off), balanced_total(L, bal) - (np.exp(0.4) / 2 * 0.5 - 0.2))


def test_balancer_gradient_fd(rng):
    L = rng.uniform(0.01, 10, 3)
    s = rng.normal(size=3)
    g = balancer_gradient(L, BalancerState(s))
    h = 1e-6
    for k in range(3):
        e = np.zeros(3)
        e[k] = h
        fd = (balanced_total(L, BalancerState(s + e)) - balanced_total(L, BalancerState(s - e))) / (2 * h)
        assert abs(g[k] - fd) < 1e-6


def test_balancer_stationary_point():
    # sigma^2 = L minimizes L / (2 sigma^2) + log sigma
    for L in (0.1, 1.0, 42.0):
        s_star = 0.5 * np.log(L)
        assert abs(balancer_gradient([L] * 3, BalancerState([s_star] * 3))[0]) < 1e-12


def test_balancer_descent_converges():
    Ls = np.logspace(-3, 3, 13)
    s = np.zeros_like(Ls)
    for _ in range(6000):
        s -= 0.01 * (1.0 - np.exp(-2 * s) * Ls)
    # route through the public gradient for the final check
    for L, sk in zip(Ls, s):
        assert abs(sk - 0.5 * np.log(L)) < 1e-8
        assert abs(balancer_gradient([L, L, L], BalancerState([sk] * 3))[0]) < 1e-7


def test_balancer_gradient_iterates():
    Ls = np.array([1e-3, 1.0, 1e3])
    bal = BalancerState()
    for _ in range(6000):
        bal = BalancerState(bal.s - 0.01 * balancer_gradient(Ls, bal))
    assert np.allclose(bal.s, 0.5 * np.log(Ls), atol=1e-8)


def test_build_supervision_partition(rng):
    shape = (10, 10)
    rm = rng.random(shape) < 0.2
    valid = np.ones(shape, bool)
    valid[0, :] = False
    ev = np.ones(shape, bool)
    ev[5:] = False
    ref = rng.normal(size=shape)
    sup = build_supervision(rng.normal(size=shape), rm, ref, valid, 3.0, ev, offset=1.0, scale=2.0)
    assert not np.any(sup.radar_sel & sup.ref_sel)
    assert np.array_equal(sup.radar_sel | sup.ref_sel, valid & ev)
    assert np.allclose(sup.ref[sup.ref_sel], (ref[sup.ref_sel] - 1.0) / 2.0)
    assert np.all(sup.radar_weight[sup.radar_sel] == 1.0)
    # held-out radar cells do not shape the confidence map
    assert np.array_equal(sup.confidence.distances, euclidean_distance_transform(rm & ev & valid))


def test_build_supervision_dilation():
    shape = (1, 9)
    rm = np.zeros(shape, bool)
    rm[0, 4] = True
    vals = np.zeros(shape)
    vals[0, 4] = 7.0
    sup = build_supervision(vals, rm, np.zeros(shape), np.ones(shape, bool), sigma=2.0, dilation_radius=2.0)
    assert sup.radar_sel.sum() == 5
    assert np.all(sup.radar[0, 2:7] == 7.0)
    assert np.isclose(sup.radar_weight[0, 2], np.exp(-4 / 8))


def test_patch_targets_from_arrays():
    t = PatchTargets.from_arrays(np.array([1.0, 0.0, 0.0]), np.array([True, False, False]),
                                 np.array([1.0, 0.5, 0.2]), np.array([np.nan, 2.0, np.nan]))
    assert list(t.counts()) == [1, 1, 2]
