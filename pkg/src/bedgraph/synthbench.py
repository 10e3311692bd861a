"""Deterministic synthetic regions for desk-scale testing.

The generated bed is a tilted plane plus Gaussian hills and troughs. The
surface sits a smooth, positive ice thickness above it, and the velocity
field follows the thickness-weighted surface slope, so the covariates
carry real (nonlinear) information about the bed. The reference map is
the true bed plus spatially correlated error; radar picks lie along gently
meandering flight lines.
"""

from dataclasses import dataclass, asdict

import numpy as np
from scipy import ndimage

from .exceptions import ConfigError
from .raster_io import RadarPickSet, RasterGrid, RegionDataset, rasterize_picks, pick_cells


@dataclass(frozen=True)
class SynthConfig:
    height: int = 64
    width: int = 64
    seed: int = 0
    cell_size: float = 150.0
    origin_x: float = 0.0
    origin_y: float = 0.0
    n_bumps: int = 14
    bump_amplitude: tuple = (100.0, 350.0)
    bump_width: tuple = (3.0, 8.0)
    trend_slope: float = 4.0
    thickness_mean: float = 900.0
    thickness_amplitude: float = 250.0
    ref_error_std: float = 40.0
    ref_error_scale: float = 5.0
    track_count: int = 9
    track_spacing: float = 7.0
    track_amplitude: float = 1.5
    track_wavelength: float = 48.0
    pick_step: float = 0.5
    noise_std: float = 5.0

    def __post_init__(self):
        if self.height < 32 or self.width < 32:
            raise ConfigError("synthetic regions must be at least 32x32")
        if self.track_count < 0:
            raise ConfigError("track_count must be >= 0")
        if self.pick_step <= 0:
            raise ConfigError("pick_step must be positive")

    def to_dict(self):
        return asdict(self)


def smooth_field(rng, shape, scale):
    """Unit-variance, zero-mean Gaussian-filtered white noise."""
    f = ndimage.gaussian_filter(rng.standard_normal(shape), scale, mode="reflect")
    return (f - f.mean()) / f.std()


def track_rows(config):
    """Baseline row of every flight line, centered on the grid."""
    span = (config.track_count - 1) * config.track_spacing
    start = (config.height - 1 - span) / 2.0
    return start + config.track_spacing * np.arange(config.track_count)


def track_curves(config, rng):
    """(col, row) samples along each sinusoidal flight line, in cell units."""
    cols = np.arange(0.0, config.width - 1 + 1e-9, config.pick_step)
    curves = []
    for base in track_rows(config):
        phase = rng.uniform(0, 2 * np.pi)
        rows = base + config.track_amplitude * np.sin(2 * np.pi * cols / config.track_wavelength + phase)
        curves.append((cols, rows, phase))
    return curves


def analytic_coverage(config):
    """Total in-grid flight-line arc length over grid area (cells / cells).

    Arc length of a sinusoid does not depend on its phase, so this needs no
    random draws.
    """
    x = np.linspace(0.0, config.width - 1, 20001)
    k = 2 * np.pi / config.track_wavelength
    ds = np.sqrt(1.0 + (config.track_amplitude * k * np.cos(k * x)) ** 2)
    length = np.sum((ds[1:] + ds[:-1]) / 2 * np.diff(x)) + 1.0
    return config.track_count * length / (config.height * config.width)


def generate_region(config=None):
    """Returns ``(RegionDataset, true_bed)``; bitwise deterministic per seed."""
    config = config or SynthConfig()
    rng = np.random.default_rng(config.seed)
    H, W = config.height, config.width
    rr, cc = np.mgrid[0:H, 0:W].astype(np.float64)

    angle = rng.uniform(0, 2 * np.pi)
    bed = config.trend_slope * (np.cos(angle) * (cc - W / 2) + np.sin(angle) * (rr - H / 2))
    for _ in range(config.n_bumps):
        r0, c0 = rng.uniform(0, H), rng.uniform(0, W)
        amp = rng.uniform(*config.bump_amplitude) * rng.choice([-1.0, 1.0])
        width = rng.uniform(*config.bump_width)
        bed += amp * np.exp(-((rr - r0) ** 2 + (cc - c0) ** 2) / (2 * width ** 2))

    thickness = config.thickness_mean + config.thickness_amplitude * smooth_field(rng, (H, W), 10.0)
    thickness = np.maximum(thickness, 0.1 * config.thickness_mean)
    surface = bed + thickness
    gy, gx = np.gradient(surface / config.cell_size)
    vx = -thickness * gx
    vy = -thickness * gy
    smb = 0.5 * smooth_field(rng, (H, W), 12.0) - 0.002 * (surface - surface.mean())
    dhdt = smooth_field(rng, (H, W), 8.0)
    ref = bed + config.ref_error_std * smooth_field(rng, (H, W), config.ref_error_scale)

    xs, ys, zs = [], [], []
    for cols, rows, _ in track_curves(config, rng):
        inside = (rows > -0.5) & (rows < H - 0.5)
        cols, rows = cols[inside], rows[inside]
        r_idx = np.floor(rows + 0.5).astype(int)
        c_idx = np.floor(cols + 0.5).astype(int)
        xs.append(config.origin_x + cols * config.cell_size)
        ys.append(config.origin_y + rows * config.cell_size)
        zs.append(bed[r_idx, c_idx])
    if xs:
        x, y, z = np.concatenate(xs), np.concatenate(ys), np.concatenate(zs)
        z = z + config.noise_std * rng.standard_normal(len(z))
    else:
        x = y = z = np.empty(0)
    picks = RadarPickSet(x, y, z)

    def grid(values):
        return RasterGrid(values, config.cell_size, config.origin_x, config.origin_y)

    true_bed = grid(bed)
    features = {"smb": grid(smb), "elv": grid(surface), "vx": grid(vx), "vy": grid(vy), "dhdt": grid(dhdt)}
    ref_bed = grid(ref)
    radar_values, radar_mask, kept, dropped = rasterize_picks(picks, ref_bed)
    return RegionDataset(features, ref_bed, radar_values, radar_mask, kept, dropped), true_bed


def sample_truth_at_picks(picks, true_bed):
    """True-bed value of the cell containing each pick."""
    row, col, _ = pick_cells(picks, true_bed)
    return true_bed.values[row, col]
