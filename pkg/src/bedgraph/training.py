"""Patch datasets, the training loop, full-grid inference and band splits."""

import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .exceptions import ConfigError, NumericalError, ShapeError
from .features import FeatureAugmenter
from .gcn import (
    AdamState,
    DropoutConfig,
    GcnParams,
    adam_step,
    init_params,
    load_checkpoint,
    loss_and_gradients,
    predict_passes,
    save_checkpoint,
)
from .graph import extract_patches, grid_graph
from .metrics import evaluate
from .supervision import BalancerState, TERMS, build_supervision

logger = logging.getLogger(__name__)

# RNG stream tags: every random draw is keyed on (seed, tag, ...) so that
# batch order or parallelism cannot change any dropout mask.
_SPLIT, _SHUFFLE, _TRAIN, _VALID, _PREDICT = range(5)


@dataclass(frozen=True)
class TrainConfig:
    patch_size: int = 16
    stride: int = 8
    batch_size: int = 16
    lr: float = 1e-4
    max_epochs: int = 20000
    patience: int = 5000
    mc_passes: int = 10
    dropout_rate: float = 0.2
    sigma_cells: float = 10.0
    split_fraction: float = 0.8
    seed: int = 0
    use_gradients: bool = True
    use_trend: bool = True
    use_ref_loss: bool = True
    band_mode: bool = False
    bands: int = 30
    trend_degree: int = 2
    hidden: int = 128
    dilation_radius: float = 0.0

    def __post_init__(self):
        if not 0.0 < self.split_fraction < 1.0:
            raise ConfigError("split_fraction must lie in (0, 1)")
        if self.patience > self.max_epochs:
            raise ConfigError("patience cannot exceed max_epochs")
        if self.batch_size < 1 or self.mc_passes < 1 or self.max_epochs < 1:
            raise ConfigError("batch_size, mc_passes and max_epochs must be positive")
        if not self.sigma_cells > 0:
            raise ConfigError("sigma_cells must be positive")

    @classmethod
    def desk(cls, **overrides):
        """Laptop-scale schedule: 500 epochs, patience 50."""
        return cls(**{"max_epochs": 500, "patience": 50, **overrides})

    @classmethod
    def full_protocol(cls, **overrides):
        return cls(**{"max_epochs": 20000, "patience": 5000, **overrides})

    def to_dict(self):
        return asdict(self)

    @property
    def dropout(self):
        return DropoutConfig(self.dropout_rate, self.mc_passes, self.seed)


@dataclass
class TrainReport:
    epochs: list = field(default_factory=list)
    best_epoch: int = 0
    best_val_total: float = math.inf
    stop_reason: str = ""

    def to_dict(self):
        return asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass(eq=False)
class GcnModel:
    """Trained regressor: weights, balancer, feature scaling and target scaling.

    The network regresses ``(bed - target_offset) / target_scale``.
    """

    params: GcnParams
    balancer: BalancerState
    config: TrainConfig
    augmenter: FeatureAugmenter
    target_offset: float
    target_scale: float
    adam: AdamState = None

    def save(self, directory, extra=None):
        meta = {
            "config": self.config.to_dict(),
            "target_offset": self.target_offset,
            "target_scale": self.target_scale,
            "norm_stats": {k: list(v) for k, v in self.augmenter.norm_stats_.items()},
            "channels": list(self.augmenter.channels_),
            "training_step": 0 if self.adam is None else self.adam.step,
            "seed": self.config.seed,
        }
        meta.update(extra or {})
        return save_checkpoint(directory, self.params, self.balancer, meta)

    @classmethod
    def load(cls, directory):
        params, balancer, meta = load_checkpoint(directory)
        config = TrainConfig(**meta["config"])
        aug = FeatureAugmenter(config.use_gradients, config.use_trend, config.trend_degree)
        aug.norm_stats_ = {k: tuple(v) for k, v in meta["norm_stats"].items()}
        aug.channels_ = tuple(meta["channels"])
        aug.n_features_out_ = len(aug.channels_)
        return cls(params, balancer, config, aug, meta["target_offset"], meta["target_scale"])


@dataclass(frozen=True, eq=False)
class PredictionResult:
    mean: object
    std: object
    metrics: object = None


def split_patches(patches, fraction=0.8, seed=0):
    """Seeded uniform shuffle, first floor(fraction * N) go to training."""
    if len(patches) < 2:
        raise ConfigError("need at least two patches to split")
    order = np.random.default_rng([seed, _SPLIT]).permutation(len(patches))
    n_train = int(math.floor(fraction * len(patches)))
    return [patches[i] for i in order[:n_train]], [patches[i] for i in order[n_train:]]


def band_partition(height, bands=30):
    """Row masks for alternating horizontal bands.

    Bands are numbered from 1; odd bands train, even bands test. Each band
    has ``height // bands`` rows and the last band absorbs any remainder.
    """
    if bands < 1 or bands > height:
        raise ConfigError(f"cannot cut {height} rows into {bands} bands")
    rows = height // bands
    band = np.minimum(np.arange(height) // rows, bands - 1) + 1
    train = band % 2 == 1
    return train, ~train


def band_masks(shape, bands=30):
    train_rows, test_rows = band_partition(shape[0], bands)
    return (np.repeat(train_rows[:, None], shape[1], axis=1),
            np.repeat(test_rows[:, None], shape[1], axis=1))


@dataclass(eq=False)
class _PatchData:
    patch: object
    X: np.ndarray
    targets: object


def _target_scaling(region, mask):
    vals = region.ref_bed.values[mask & region.ref_bed.valid_mask]
    if vals.size == 0:
        return 0.0, 1.0
    std = float(vals.std())
    return float(vals.mean()), std if std > 1e-12 else 1.0


def prepare(region, config, augmenter=None, target_scaling=None):
    """Feature stack, supervision grids and per-patch arrays for a region."""
    if augmenter is None:
        augmenter = FeatureAugmenter(config.use_gradients, config.use_trend, config.trend_degree).fit(region)
    stack = augmenter.transform(region)
    valid = region.valid_mask
    eval_mask = band_masks(region.shape, config.bands)[0] if config.band_mode else np.ones(region.shape, bool)
    if target_scaling is None:
        target_scaling = _target_scaling(region, eval_mask & valid)
    offset, scale = target_scaling
    sup = build_supervision(region.radar_values.values, region.radar_mask, region.ref_bed.values, valid,
                            config.sigma_cells, eval_mask, config.dilation_radius, offset, scale)
    patches = extract_patches(region.shape[0], region.shape[1], config.patch_size, config.stride)
    data = [_PatchData(p, stack.patch_nodes(p.row0, p.col0, p.size), sup.patch(p)) for p in patches]
    return augmenter, stack, sup, data, (offset, scale)


def _rngs(seed, tag, epoch, ids):
    return [np.random.default_rng([seed, tag, epoch, i]) for i in ids]


def _evaluate_patches(params, graph, P, data, ids, dropout, balancer, seed):
    if not ids:
        return None, math.nan
    terms, total, _ = loss_and_gradients(
        params, graph, [data[i].X for i in ids], [data[i].targets for i in ids], dropout, balancer,
        rngs=_rngs(seed, _VALID, 0, ids), P=P, want_grad=False)
    return terms, total


def train_model(region, config=None, callback=None):
    """Fit the regressor; returns ``(GcnModel, TrainReport)``.

    Validation uses a fixed set of dropout masks (the same every epoch), so
    the early-stopping signal only moves when the weights do. The returned
    model carries the weights of the best validation epoch.
    """
    config = config or TrainConfig.desk()
    augmenter, stack, _, data, (offset, scale) = prepare(region, config)
    ids = list(range(len(data)))
    train_ids, val_ids = split_patches(ids, config.split_fraction, config.seed)
    graph = grid_graph(config.patch_size, config.patch_size)
    P = graph.adjacency()
    dropout = config.dropout

    params = init_params(stack.n_features, config.seed, config.hidden)
    balancer = BalancerState(np.zeros(3), (True, config.use_ref_loss, True))
    adam = AdamState(lr=config.lr)
    best = (params.copy(), balancer.copy())
    report = TrainReport()
    since_best = 0

    for epoch in range(1, config.max_epochs + 1):
        order = np.random.default_rng([config.seed, _SHUFFLE, epoch]).permutation(train_ids)
        batch_totals = []
        for start in range(0, len(order), config.batch_size):
            batch = [int(i) for i in order[start:start + config.batch_size]]
            try:
                _, total, grads = loss_and_gradients(
                    params, graph, [data[i].X for i in batch], [data[i].targets for i in batch],
                    dropout, balancer, rngs=_rngs(config.seed, _TRAIN, epoch, batch), P=P)
            except NumericalError as exc:
                exc.checkpoint = (best[0], best[1])
                raise
            state = dict(params.to_dict(), s=balancer.s)
            new, adam = adam_step(state, grads.to_dict(), adam)
            params = GcnParams.from_dict(new)
            balancer = BalancerState(new["s"], balancer.active)
            batch_totals.append(total)

        try:
            val_terms, val_total = _evaluate_patches(params, graph, P, data, val_ids, dropout, balancer, config.seed)
        except NumericalError as exc:
            exc.checkpoint = (best[0], best[1])
            raise
        record = {
            "epoch": epoch,
            "train_total": float(np.mean(batch_totals)),
            "val_total": float(val_total),
            "sigma": [float(s) for s in balancer.sigmas],
        }
        record.update({f"val_{k}": float(v) for k, v in zip(TERMS, val_terms.as_array())})
        report.epochs.append(record)
        if callback is not None:
            callback(record)

        if val_total < report.best_val_total:
            report.best_val_total = float(val_total)
            report.best_epoch = epoch
            best = (params.copy(), balancer.copy())
            since_best = 0
        else:
            since_best += 1
            if since_best >= config.patience:
                report.stop_reason = f"no validation improvement for {config.patience} epochs"
                break
    else:
        report.stop_reason = f"reached max_epochs={config.max_epochs}"

    model = GcnModel(best[0], best[1], config, augmenter, offset, scale, adam)
    return model, report


def validation_total(model, region):
    """Re-evaluate the validation total of ``model`` with the training seeds."""
    config = model.config
    _, _, _, data, _ = prepare(region, config, model.augmenter, (model.target_offset, model.target_scale))
    _, val_ids = split_patches(list(range(len(data))), config.split_fraction, config.seed)
    graph = grid_graph(config.patch_size, config.patch_size)
    return _evaluate_patches(model.params, graph, graph.adjacency(), data, val_ids,
                             config.dropout, model.balancer, config.seed)[1]


def predict_full(model, region, deterministic=False, reference=None, mask=None, dropout_rate=None):
    """Stitched full-grid mean and epistemic std.

    Each of the N passes is stitched separately (overlaps averaged), then
    the per-cell mean and population std across the stitched maps are
    taken. ``reference`` (a RasterGrid, default the region's reference bed)
    and ``mask`` select what the metrics compare against.
    """
    config = model.config
    if dropout_rate is not None:
        config = replace(config, dropout_rate=dropout_rate)
    stack = model.augmenter.transform(region)
    if stack.n_features != model.params.n_features:
        raise ShapeError(f"model expects {model.params.n_features} features, region yields {stack.n_features}")
    H, W = region.shape
    size = config.patch_size
    patches = extract_patches(H, W, size, config.stride)
    graph = grid_graph(size, size)
    P = graph.adjacency()
    n_passes = 1 if deterministic else config.mc_passes
    dropout = DropoutConfig(config.dropout_rate, n_passes, config.seed)

    total = np.zeros((n_passes, H, W))
    count = np.zeros((H, W))
    for k, patch in enumerate(patches):
        X = stack.patch_nodes(patch.row0, patch.col0, size)
        rng = np.random.default_rng([config.seed, _PREDICT, k])
        Y = predict_passes(model.params, graph, X, dropout, not deterministic, rng, P)
        total[:, patch.rows, patch.cols] += Y.reshape(n_passes, size, size)
        count[patch.rows, patch.cols] += 1
    stitched = total / count * model.target_scale + model.target_offset
    # offset from the first pass keeps identical passes exact (std == 0)
    mean = stitched[0] + (stitched - stitched[:1]).mean(axis=0)
    std = np.sqrt(((stitched - mean) ** 2).mean(axis=0))

    valid = region.valid_mask
    mean_grid = region.ref_bed.like(mean, valid)
    std_grid = region.ref_bed.like(std, valid)
    reference = region.ref_bed if reference is None else reference
    eval_mask = valid if mask is None else valid & mask
    metrics = evaluate(mean_grid, reference, eval_mask)
    return PredictionResult(mean_grid, std_grid, metrics)


def save_report(report, path):
    Path(path).write_text(report.to_json())
