"""Pointwise and structural error metrics over masked rasters."""

import json
import math
from dataclasses import asdict, dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import ndimage

from .exceptions import EmptyInputError, ShapeError

WINDOW = 11
WINDOW_SIGMA = 1.5
K1, K2 = 0.01, 0.03


def _arrays(pred, ref, mask=None):
    pred = np.asarray(getattr(pred, "values", pred), dtype=np.float64)
    ref = np.asarray(getattr(ref, "values", ref), dtype=np.float64)
    if pred.shape != ref.shape:
        raise ShapeError(f"prediction shape {pred.shape} != reference shape {ref.shape}")
    valid = np.isfinite(pred) & np.isfinite(ref)
    if mask is not None:
        valid &= np.asarray(mask, dtype=bool)
    return pred, ref, valid


def pointwise_metrics(pred, ref, mask=None):
    """(MAE, RMSE, R2) over masked cells; R2 is None when ref is constant."""
    pred, ref, valid = _arrays(pred, ref, mask)
    if valid.sum() < 2:
        raise EmptyInputError("pointwise metrics need at least two masked cells")
    p, y = pred[valid], ref[valid]
    e = p - y
    mae = float(np.mean(np.abs(e)))
    rmse = float(np.sqrt(np.mean(e * e)))
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = None if ss_tot == 0.0 else 1.0 - float(np.sum(e * e)) / ss_tot
    return mae, rmse, r2


def default_data_range(ref, mask=None):
    ref = np.asarray(getattr(ref, "values", ref), dtype=np.float64)
    valid = np.isfinite(ref) if mask is None else np.isfinite(ref) & np.asarray(mask, bool)
    if not valid.any():
        raise EmptyInputError("reference has no valid cells")
    return float(ref[valid].max() - ref[valid].min())


def gaussian_window(size=WINDOW, sigma=WINDOW_SIGMA):
    ax = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(ax ** 2) / (2.0 * sigma ** 2))
    w = np.outer(g, g)
    return w / w.sum()


def _valid_filter(img, w):
    return ndimage.correlate(img, w, mode="constant")[
        w.shape[0] // 2: img.shape[0] - w.shape[0] // 2,
        w.shape[1] // 2: img.shape[1] - w.shape[1] // 2]


def ssim_components(pred, ref, data_range=None):
    """Luminance and contrast-structure maps over every interior window.

    Their product is the SSIM map. Windows touching an invalid cell are NaN.
    """
    pred, ref, valid = _arrays(pred, ref)
    if min(pred.shape) < WINDOW:
        raise ShapeError(f"SSIM needs at least {WINDOW}x{WINDOW} images, got {pred.shape}")
    L = default_data_range(ref) if data_range is None else float(data_range)
    c1, c2 = (K1 * L) ** 2, (K2 * L) ** 2
    w = gaussian_window()
    x = np.where(valid, pred, 0.0)
    y = np.where(valid, ref, 0.0)
    mu_x, mu_y = _valid_filter(x, w), _valid_filter(y, w)
    sxx = _valid_filter(x * x, w) - mu_x ** 2
    syy = _valid_filter(y * y, w) - mu_y ** 2
    sxy = _valid_filter(x * y, w) - mu_x * mu_y
    lum = (2 * mu_x * mu_y + c1) / (mu_x ** 2 + mu_y ** 2 + c1)
    cs = (2 * sxy + c2) / (sxx + syy + c2)
    window_ok = sliding_window_view(valid, (WINDOW, WINDOW)).all(axis=(-1, -2))
    return np.where(window_ok, lum, np.nan), np.where(window_ok, cs, np.nan)


def ssim_map(pred, ref, data_range=None):
    lum, cs = ssim_components(pred, ref, data_range)
    return lum * cs


def ssim(pred, ref, data_range=None):
    s = ssim_map(pred, ref, data_range)
    if np.all(np.isnan(s)):
        raise EmptyInputError("no SSIM window is free of invalid cells")
    return float(np.nanmean(s))


def psnr(pred, ref, mask=None, data_range=None):
    pred, ref, valid = _arrays(pred, ref, mask)
    if not valid.any():
        raise EmptyInputError("PSNR needs at least one masked cell")
    L = default_data_range(ref, valid) if data_range is None else float(data_range)
    mse = float(np.mean((pred[valid] - ref[valid]) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(L * L / mse)


@dataclass(frozen=True)
class MetricsReport:
    mae: float
    rmse: float
    r2: float
    ssim: float
    psnr: float
    cell_count: int
    data_range: float

    def to_dict(self):
        d = asdict(self)
        if d["psnr"] == math.inf:
            d["psnr"] = "inf"
        return d

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if d.get("psnr") == "inf":
            d["psnr"] = math.inf
        return cls(**d)


def evaluate(pred, ref, mask=None, data_range=None):
    """Full metric report.

    SSIM is computed on the full rasters with cells outside ``mask`` treated
    as nodata, so only windows lying entirely inside the mask count.
    """
    pred_a, ref_a, valid = _arrays(pred, ref, mask)
    L = default_data_range(ref_a, valid) if data_range is None else float(data_range)
    mae, rmse, r2 = pointwise_metrics(pred_a, ref_a, valid)
    try:
        s = ssim(np.where(valid, pred_a, np.nan), np.where(valid, ref_a, np.nan), L)
    except (ShapeError, EmptyInputError):
        s = None
    return MetricsReport(mae, rmse, r2, s, psnr(pred_a, ref_a, valid, L), int(valid.sum()), L)
