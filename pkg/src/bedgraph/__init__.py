"""Bed topography reconstruction with graph convolutional regression."""

__version__ = "0.1.0"

from .estimator import BedTopoRegressor
from .raster_io import RadarPickSet, RasterGrid, RegionDataset, load_region, read_raster, write_raster
from .synthbench import SynthConfig, generate_region
from .training import TrainConfig, predict_full, train_model

__all__ = [
    "BedTopoRegressor",
    "RadarPickSet",
    "RasterGrid",
    "RegionDataset",
    "SynthConfig",
    "TrainConfig",
    "generate_region",
    "load_region",
    "predict_full",
    "read_raster",
    "train_model",
    "write_raster",
]
