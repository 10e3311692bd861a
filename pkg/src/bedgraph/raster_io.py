"""Raster container, radar pick tables and region bundles.

A raster on disk is a pair of files:

* ``name.npy`` -- NumPy ``.npy`` v1.0 array, dtype ``<f8``, C order, shape
  ``(height, width)``. Nodata cells are stored as NaN.
* ``name.json`` -- sidecar with ``height``, ``width``, ``cell_size``,
  ``origin_x`` and ``origin_y``.

Cell ``(row, col)`` has its center at
``(origin_x + col * cell_size, origin_y + row * cell_size)``.
"""

import csv
import hashlib
import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib import format as npy_format

from .exceptions import (
    CorruptError,
    FormatError,
    GeometryError,
    IoError,
    SchemaError,
)

logger = logging.getLogger(__name__)

FEATURE_NAMES = ("smb", "elv", "vx", "vy", "dhdt")
MANIFEST_KEYS = FEATURE_NAMES + (
    "ref_bed",
    "radar_csv",
    "cell_size",
    "origin_x",
    "origin_y",
)


def _frozen(arr):
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class RasterGrid:
    """H x W scalar field with geometry and a validity mask.

    Invalid cells always hold NaN and every valid cell is finite; the
    constructor enforces both, so the mask and the payload cannot drift.
    """

    values: np.ndarray
    cell_size: float = 1.0
    origin_x: float = 0.0
    origin_y: float = 0.0
    valid_mask: np.ndarray = None

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64, order="C", copy=True)
        if values.ndim != 2 or values.shape[0] < 1 or values.shape[1] < 1:
            raise GeometryError(f"raster must be 2-D and non-empty, got shape {values.shape}")
        if not (np.isfinite(self.cell_size) and self.cell_size > 0):
            raise GeometryError(f"cell_size must be positive, got {self.cell_size}")
        if self.valid_mask is None:
            mask = np.isfinite(values)
        else:
            mask = np.array(self.valid_mask, dtype=bool, copy=True)
            if mask.shape != values.shape:
                raise GeometryError("valid_mask shape differs from values shape")
            mask &= np.isfinite(values)
        values[~mask] = np.nan
        object.__setattr__(self, "values", _frozen(values))
        object.__setattr__(self, "valid_mask", _frozen(mask))
        object.__setattr__(self, "cell_size", float(self.cell_size))
        object.__setattr__(self, "origin_x", float(self.origin_x))
        object.__setattr__(self, "origin_y", float(self.origin_y))

    @property
    def height(self):
        return self.values.shape[0]

    @property
    def width(self):
        return self.values.shape[1]

    @property
    def shape(self):
        return self.values.shape

    @property
    def geometry(self):
        return (self.height, self.width, self.cell_size, self.origin_x, self.origin_y)

    def same_geometry(self, other):
        return self.geometry == other.geometry

    def like(self, values, valid_mask=None):
        """New grid with this geometry and the given payload."""
        return RasterGrid(values, self.cell_size, self.origin_x, self.origin_y, valid_mask)

    def cell_centers(self):
        """Projected (x, y) coordinates of every cell center, each (H, W)."""
        cols = self.origin_x + np.arange(self.width) * self.cell_size
        rows = self.origin_y + np.arange(self.height) * self.cell_size
        return np.meshgrid(cols, rows)

    def identical(self, other):
        """Bit-for-bit equality of payload, mask and geometry."""
        return (
            self.geometry == other.geometry
            and self.values.tobytes() == other.values.tobytes()
            and np.array_equal(self.valid_mask, other.valid_mask)
        )


@dataclass(frozen=True, eq=False)
class RadarPickSet:
    """Radar bed picks as three parallel float arrays (projected meters)."""

    x: np.ndarray
    y: np.ndarray
    bed_elev: np.ndarray

    def __post_init__(self):
        arrays = [np.array(a, dtype=np.float64, copy=True).reshape(-1) for a in (self.x, self.y, self.bed_elev)]
        if not (len(arrays[0]) == len(arrays[1]) == len(arrays[2])):
            raise CorruptError("pick columns have different lengths")
        for a in arrays:
            if not np.all(np.isfinite(a)):
                raise CorruptError("radar picks must be finite")
        for name, a in zip(("x", "y", "bed_elev"), arrays):
            object.__setattr__(self, name, _frozen(a))

    def __len__(self):
        return len(self.x)

    @property
    def coords(self):
        return np.column_stack([self.x, self.y])

    @classmethod
    def empty(cls):
        return cls(np.empty(0), np.empty(0), np.empty(0))


@dataclass(frozen=True, eq=False)
class RegionDataset:
    """Covariates, reference bed and gridded radar supervision for one region."""

    features: dict
    ref_bed: RasterGrid
    radar_values: RasterGrid
    radar_mask: np.ndarray
    picks: RadarPickSet = field(default_factory=RadarPickSet.empty)
    dropped_picks: int = 0

    def __post_init__(self):
        missing = [n for n in FEATURE_NAMES if n not in self.features]
        extra = [n for n in self.features if n not in FEATURE_NAMES]
        if missing or extra:
            raise SchemaError(f"features must be exactly {FEATURE_NAMES}; missing {missing}, unexpected {extra}")
        ordered = {n: self.features[n] for n in FEATURE_NAMES}
        for name, grid in list(ordered.items()) + [("radar_values", self.radar_values)]:
            if not grid.same_geometry(self.ref_bed):
                raise GeometryError(f"{name} geometry {grid.geometry} != ref_bed geometry {self.ref_bed.geometry}")
        mask = np.array(self.radar_mask, dtype=bool, copy=True)
        if mask.shape != self.ref_bed.shape:
            raise GeometryError("radar_mask shape differs from grid shape")
        if not np.all(np.isfinite(self.radar_values.values[mask])):
            raise CorruptError("radar_mask marks cells without a finite radar value")
        object.__setattr__(self, "features", ordered)
        object.__setattr__(self, "radar_mask", _frozen(mask))

    @property
    def shape(self):
        return self.ref_bed.shape

    @property
    def valid_mask(self):
        """Cells valid in the reference bed and in every covariate."""
        mask = self.ref_bed.valid_mask.copy()
        for grid in self.features.values():
            mask &= grid.valid_mask
        return mask


def _sidecar(path):
    return Path(path).with_suffix(".json")


def write_raster(grid, path):
    path = Path(path)
    meta = {
        "height": grid.height,
        "width": grid.width,
        "cell_size": grid.cell_size,
        "origin_x": grid.origin_x,
        "origin_y": grid.origin_y,
    }
    try:
        with open(path, "wb") as fh:
            npy_format.write_array(fh, np.ascontiguousarray(grid.values, dtype="<f8"), version=(1, 0))
        with open(_sidecar(path), "w") as fh:
            json.dump(meta, fh, indent=2)
    except OSError as exc:
        raise IoError(f"cannot write raster to {path}: {exc}") from exc


def read_raster(path):
    path = Path(path)
    try:
        fh = open(path, "rb")
    except OSError as exc:
        raise IoError(f"cannot open raster {path}: {exc}") from exc
    with fh:
        try:
            version = npy_format.read_magic(fh)
        except ValueError as exc:
            raise FormatError(f"{path}: not a raster container ({exc})") from exc
        try:
            if version == (1, 0):
                shape, fortran, dtype = npy_format.read_array_header_1_0(fh)
            else:
                shape, fortran, dtype = npy_format.read_array_header_2_0(fh)
        except ValueError as exc:
            raise FormatError(f"{path}: malformed header ({exc})") from exc
        if dtype != np.dtype("<f8") or fortran or len(shape) != 2:
            raise FormatError(f"{path}: expected 2-D little-endian float64 C-order array, got {dtype} {shape}")
        payload = fh.read()
    expected = shape[0] * shape[1] * 8
    if len(payload) != expected:
        raise CorruptError(f"{path}: payload has {len(payload)} bytes, header implies {expected}")
    values = np.frombuffer(payload, dtype="<f8").reshape(shape)

    try:
        with open(_sidecar(path)) as fh:
            meta = json.load(fh)
    except OSError as exc:
        raise IoError(f"cannot open sidecar for {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: sidecar is not JSON ({exc})") from exc
    try:
        if (int(meta["height"]), int(meta["width"])) != tuple(shape):
            raise CorruptError(f"{path}: sidecar dims {meta['height']}x{meta['width']} != payload {shape}")
        return RasterGrid(values, meta["cell_size"], meta["origin_x"], meta["origin_y"])
    except KeyError as exc:
        raise FormatError(f"{path}: sidecar missing {exc}") from exc


def read_picks(path):
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames is None or [f.strip() for f in reader.fieldnames] != ["x", "y", "bed_elev"]:
                raise FormatError(f"{path}: header must be x,y,bed_elev, got {reader.fieldnames}")
            rows = [(float(r["x"]), float(r["y"]), float(r["bed_elev"])) for r in reader]
    except OSError as exc:
        raise IoError(f"cannot read radar picks {path}: {exc}") from exc
    except (TypeError, ValueError) as exc:
        raise FormatError(f"{path}: unparsable pick row ({exc})") from exc
    if not rows:
        return RadarPickSet.empty()
    x, y, z = np.array(rows).T
    return RadarPickSet(x, y, z)


def write_picks(picks, path):
    try:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["x", "y", "bed_elev"])
            for row in zip(picks.x, picks.y, picks.bed_elev):
                writer.writerow([repr(float(v)) for v in row])
    except OSError as exc:
        raise IoError(f"cannot write radar picks {path}: {exc}") from exc


def pick_cells(picks, grid):
    """Row/col of the cell containing each pick, plus an in-extent flag."""
    col = np.floor((picks.x - grid.origin_x) / grid.cell_size + 0.5).astype(np.int64)
    row = np.floor((picks.y - grid.origin_y) / grid.cell_size + 0.5).astype(np.int64)
    inside = (row >= 0) & (row < grid.height) & (col >= 0) & (col < grid.width)
    return row, col, inside


def rasterize_picks(picks, grid):
    """Average picks per cell.

    Returns ``(radar_values, radar_mask, kept_picks, dropped_count)``.
    """
    row, col, inside = pick_cells(picks, grid)
    total = np.zeros(grid.shape)
    count = np.zeros(grid.shape, dtype=np.int64)
    np.add.at(total, (row[inside], col[inside]), picks.bed_elev[inside])
    np.add.at(count, (row[inside], col[inside]), 1)
    mask = count > 0
    values = np.full(grid.shape, np.nan)
    values[mask] = total[mask] / count[mask]
    kept = RadarPickSet(picks.x[inside], picks.y[inside], picks.bed_elev[inside])
    return grid.like(values), mask, kept, int((~inside).sum())


def load_region(manifest):
    manifest = Path(manifest)
    try:
        with open(manifest) as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise IoError(f"cannot read manifest {manifest}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise FormatError(f"{manifest}: not JSON ({exc})") from exc
    missing = [k for k in MANIFEST_KEYS if k not in doc]
    if missing:
        raise SchemaError(f"{manifest}: missing keys {missing}")

    base = manifest.parent
    features = {name: read_raster(base / doc[name]) for name in FEATURE_NAMES}
    ref_bed = read_raster(base / doc["ref_bed"])
    expected = (ref_bed.height, ref_bed.width, float(doc["cell_size"]),
                float(doc["origin_x"]), float(doc["origin_y"]))
    for name, grid in list(features.items()) + [("ref_bed", ref_bed)]:
        if grid.geometry != expected:
            raise GeometryError(f"{name}: geometry {grid.geometry} does not match manifest {expected}")

    picks = read_picks(base / doc["radar_csv"])
    radar_values, radar_mask, kept, dropped = rasterize_picks(picks, ref_bed)
    if dropped:
        logger.info("dropped %d radar picks outside the grid extent", dropped)
    return RegionDataset(features, ref_bed, radar_values, radar_mask, kept, dropped)


def write_region(region, directory, picks=None):
    """Write a region as rasters + radar CSV + manifest; returns the manifest path."""
    directory = Path(directory)
    try:
        directory.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoError(f"cannot create {directory}: {exc}") from exc
    ref = region.ref_bed
    manifest = {}
    for name, grid in list(region.features.items()) + [("ref_bed", ref)]:
        write_raster(grid, directory / f"{name}.npy")
        manifest[name] = f"{name}.npy"
    write_picks(region.picks if picks is None else picks, directory / "radar.csv")
    manifest.update(radar_csv="radar.csv", cell_size=ref.cell_size, origin_x=ref.origin_x, origin_y=ref.origin_y)
    path = directory / "manifest.json"
    try:
        with open(path, "w") as fh:
            json.dump(manifest, fh, indent=2)
    except OSError as exc:
        raise IoError(f"cannot write manifest {path}: {exc}") from exc
    return path


def file_digest(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def ensure_dir(path):
    try:
        os.makedirs(path, exist_ok=True)
    except OSError as exc:
        raise IoError(f"cannot create {path}: {exc}") from exc
    return Path(path)
