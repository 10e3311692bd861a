import json
import math

import numpy as np
import pytest

from bedgraph.exceptions import EmptyInputError, ShapeError
from bedgraph.metrics import (
    MetricsReport,
    evaluate,
    gaussian_window,
    pointwise_metrics,
    psnr,
    ssim,
    ssim_components,
)


def pointwise_oracle(p, y):
    n = len(p)
    mae = sum(abs(a - b) for a, b in zip(p, y)) / n
    rmse = math.sqrt(sum((a - b) ** 2 for a, b in zip(p, y)) / n)
    ybar = sum(y) / n
    r2 = 1 - sum((a - b) ** 2 for a, b in zip(p, y)) / sum((b - ybar) ** 2 for b in y)
    return mae, rmse, r2


def ssim_oracle(x, y, L):
    """Direct sliding-window SSIM: explicit weighted moments per window."""
    g = [math.exp(-((i - 5) ** 2) / (2 * 1.5 ** 2)) for i in range(11)]
    w = np.outer(g, g)
    w /= w.sum()
    c1, c2 = (0.01 * L) ** 2, (0.03 * L) ** 2
    vals = []
    for r in range(x.shape[0] - 10):
        for c in range(x.shape[1] - 10):
            a, b = x[r:r + 11, c:c + 11], y[r:r + 11, c:c + 11]
            ma, mb = np.sum(w * a), np.sum(w * b)
            va = np.sum(w * (a - ma) ** 2)
            vb = np.sum(w * (b - mb) ** 2)
            cov = np.sum(w * (a - ma) * (b - mb))
            vals.append((2 * ma * mb + c1) * (2 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2)))
    return float(np.mean(vals))


def test_pointwise_trivial(rng):
    y = rng.normal(size=(5, 6))
    assert pointwise_metrics(y, y) == (0.0, 0.0, 1.0)
    mae, rmse, _ = pointwise_metrics(y + 5, y)
    assert np.isclose(mae, 5, atol=1e-12) and np.isclose(rmse, 5, atol=1e-12)


def test_pointwise_oracle(rng):
    for _ in range(10):
        p, y = rng.normal(size=(2, 40)) * 30
        got = pointwise_metrics(p, y)
        assert np.allclose(got, pointwise_oracle(list(p), list(y)), rtol=1e-12, atol=1e-12)


def test_pointwise_mask_and_errors(rng):
    p, y = rng.normal(size=(2, 4, 4))
    mask = np.zeros((4, 4), bool)
    mask[1:3, 1:3] = True
    assert np.allclose(pointwise_metrics(p, y, mask), pointwise_oracle(list(p[mask]), list(y[mask])))
    one = np.zeros((4, 4), bool)
    one[0, 0] = True
    with pytest.raises(EmptyInputError):
        pointwise_metrics(p, y, one)
    assert pointwise_metrics(p, np.ones((4, 4)))[2] is None


def test_pointwise_invariances(rng):
    p, y = rng.normal(size=(2, 50))
    base = pointwise_metrics(p, y)
    perm = rng.permutation(50)
    assert np.allclose(pointwise_metrics(p[perm], y[perm]), base, rtol=1e-13)
    assert np.allclose(pointwise_metrics(p + 123.0, y + 123.0), base, rtol=1e-9)
    assert base[1] >= base[0]


def test_psnr(rng):
    y = rng.normal(size=(8, 8))
    L = 10.0
    assert math.isclose(psnr(y + 1.0, y, data_range=L), 20.0, abs_tol=1e-12)
    assert psnr(y, y) == math.inf
    p = rng.normal(size=(8, 8))
    L = y.max() - y.min()
    assert math.isclose(psnr(p, y), 10 * math.log10(L ** 2 / np.mean((p - y) ** 2)), rel_tol=1e-10)
    perm = rng.permutation(64)
    assert math.isclose(psnr(p.ravel()[perm], y.ravel()[perm], data_range=L), psnr(p, y), rel_tol=1e-13)


def test_gaussian_window():
    w = gaussian_window()
    assert w.shape == (11, 11) and abs(w.sum() - 1) < 1e-15
    assert w[5, 5] == w.max()


def test_ssim_identity(rng):
    x = rng.normal(size=(20, 20))
    assert abs(ssim(x, x) - 1.0) < 1e-12


def test_ssim_constants_closed_form():
    # c1 = 0.01, so luminance = (2*3 + 0.01) / (1 + 9 + 0.01) = 6.01 / 10.01
    got = ssim(np.ones((11, 11)), np.full((11, 11), 3.0), data_range=10.0)
    assert abs(got - 6.01 / 10.01) < 1e-12
    assert abs(got - 0.6004) < 1e-4


def test_ssim_window_oracle(rng):
    for _ in range(3):
        x = rng.normal(size=(32, 32))
        y = x + rng.normal(size=(32, 32)) * 0.5
        L = y.max() - y.min()
        assert abs(ssim(x, y) - ssim_oracle(x, y, L)) < 1e-8


def test_ssim_shift_changes_only_luminance(rng):
    x = rng.normal(size=(16, 16))
    y = x + rng.normal(size=(16, 16)) * 0.3
    lum, cs = ssim_components(x, y, 4.0)
    lum2, cs2 = ssim_components(x + 7.0, y + 7.0, 4.0)
    assert np.max(np.abs(cs2 - cs)) < 1e-12
    assert not np.allclose(lum, lum2)


def test_ssim_small_image():
    with pytest.raises(ShapeError):
        ssim(np.zeros((10, 20)), np.zeros((10, 20)))


def test_ssim_skips_invalid_windows(rng):
    x = rng.normal(size=(24, 24))
    y = x.copy()
    y[0, 0] = np.nan
    # only windows away from the corner count
    lum, cs = ssim_components(x + 0.1, y, 5.0)
    assert np.isnan(lum[0, 0]) and np.isfinite(lum[-1, -1])


def test_evaluate_report_roundtrip(rng):
    y = rng.normal(size=(16, 16)) * 100
    p = y + rng.normal(size=(16, 16))
    rep = evaluate(p, y)
    d = json.loads(rep.to_json())
    assert set(d) == {"mae", "rmse", "r2", "ssim", "psnr", "cell_count", "data_range"}
    assert rep.rmse >= rep.mae >= 0 and rep.r2 <= 1
    assert MetricsReport.from_dict(d) == rep
    perfect = evaluate(y, y)
    assert perfect.to_dict()["psnr"] == "inf"
    assert MetricsReport.from_dict(json.loads(perfect.to_json())).psnr == math.inf


def test_evaluate_masked_ssim_none(rng):
    y = rng.normal(size=(16, 16))
    mask = np.zeros((16, 16), bool)
    mask[::2, ::2] = True
    rep = evaluate(y + 1, y, mask)
    assert rep.ssim is None and rep.cell_count == 64
