"""scikit-learn style front end for the graph regressor."""

from dataclasses import fields

from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from .metrics import pointwise_metrics
from .raster_io import RegionDataset
from .training import TrainConfig, predict_full, train_model

_DESK = TrainConfig.desk()


class BedTopoRegressor(RegressorMixin, BaseEstimator):
    """Graph convolutional bed-elevation regressor.

    ``fit`` takes a :class:`RegionDataset`; ``predict`` returns the stitched
    mean bed as a RasterGrid (and the epistemic std with ``return_std``).
    Constructor arguments mirror :class:`TrainConfig` and default to the
    desk-scale schedule.
    """

    def __init__(self, patch_size=16, stride=8, batch_size=16, lr=1e-4, max_epochs=_DESK.max_epochs,
                 patience=_DESK.patience, mc_passes=10, dropout_rate=0.2, sigma_cells=10.0,
                 split_fraction=0.8, seed=0, use_gradients=True, use_trend=True, use_ref_loss=True,
                 band_mode=False, bands=30, trend_degree=2, hidden=128, dilation_radius=0.0):
        self.patch_size = patch_size
        self.stride = stride
        self.batch_size = batch_size
        self.lr = lr
        self.max_epochs = max_epochs
        self.patience = patience
        self.mc_passes = mc_passes
        self.dropout_rate = dropout_rate
        self.sigma_cells = sigma_cells
        self.split_fraction = split_fraction
        self.seed = seed
        self.use_gradients = use_gradients
        self.use_trend = use_trend
        self.use_ref_loss = use_ref_loss
        self.band_mode = band_mode
        self.bands = bands
        self.trend_degree = trend_degree
        self.hidden = hidden
        self.dilation_radius = dilation_radius

    def _config(self):
        params = self.get_params()
        return TrainConfig(**{f.name: params[f.name] for f in fields(TrainConfig)})

    def fit(self, region, y=None):
        if not isinstance(region, RegionDataset):
            raise TypeError("fit expects a RegionDataset")
        self.model_, self.report_ = train_model(region, self._config())
        self.n_features_in_ = self.model_.params.n_features
        self.feature_names_in_ = self.model_.augmenter.get_feature_names_out()
        return self

    def predict(self, region, return_std=False, deterministic=False):
        """Bed elevation as an (H, W) array, plus the MC std when ``return_std``."""
        check_is_fitted(self, "model_")
        result = predict_full(self.model_, region, deterministic=deterministic)
        mean, std = result.mean.values, result.std.values
        return (mean, std) if return_std else mean

    def score(self, region, y=None, sample_weight=None):
        """R^2 of the deterministic prediction against ``y`` (default: the
        region's reference bed) over valid cells."""
        reference = region.ref_bed if y is None else y
        pred = self.predict(region, deterministic=True)
        return pointwise_metrics(pred, reference, region.valid_mask)[2]
