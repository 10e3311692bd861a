"""Command line driver: ``bedgraph <subcommand> ...``.

Exit status is 0 on success, 1 on a runtime error and 2 on a usage error.
Every subcommand that writes outputs also writes ``run_manifest.json``
(resolved configuration, tool version, input digests, seed).
"""

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .baselines import BASELINES
from .exceptions import BedGraphError
from .metrics import evaluate
from .raster_io import ensure_dir, file_digest, load_region, read_raster, write_raster, write_region
from .synthbench import SynthConfig, generate_region
from .training import GcnModel, TrainConfig, band_masks, predict_full, save_report, train_model

logger = logging.getLogger("bedgraph")

ABLATIONS = {
    "no-grad": {"use_gradients": False},
    "no-trend": {"use_trend": False},
    "no-both": {"use_gradients": False, "use_trend": False},
    "no-ref": {"use_ref_loss": False},
}


def _region_inputs(manifest):
    manifest = Path(manifest)
    doc = json.loads(manifest.read_text())
    paths = [manifest] + [manifest.parent / doc[k] for k in
                          ("smb", "elv", "vx", "vy", "dhdt", "ref_bed", "radar_csv")]
    return {str(p): file_digest(p) for p in paths}


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n")


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, tuple):
        return list(o)
    raise TypeError(f"cannot serialize {type(o).__name__}")


def write_run_manifest(path, command, config, inputs, seed, extra=None):
    manifest = {
        "tool": "bedgraph",
        "version": __version__,
        "command": command,
        "config": config,
        "inputs": inputs,
        "seed": seed,
    }
    manifest.update(extra or {})
    _write_json(path, manifest)


def write_pgm(values, path):
    """8-bit binary PGM scaled linearly from min to max; returns (min, max)."""
    v = np.asarray(values, dtype=np.float64)
    finite = np.isfinite(v)
    lo, hi = (float(v[finite].min()), float(v[finite].max())) if finite.any() else (0.0, 0.0)
    span = hi - lo if hi > lo else 1.0
    img = np.where(finite, np.round((v - lo) / span * 255.0), 0).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{v.shape[1]} {v.shape[0]}\n255\n".encode("ascii"))
        fh.write(img.tobytes())
    return lo, hi


def _add_train_flags(p):
    g = p.add_argument_group("training")
    g.add_argument("--patch-size", type=int, default=16)
    g.add_argument("--stride", type=int, default=8)
    g.add_argument("--batch-size", type=int, default=16)
    g.add_argument("--lr", type=float, default=1e-4)
    g.add_argument("--max-epochs", type=int, default=None, help="default 500 (20000 with --paper-settings)")
    g.add_argument("--patience", type=int, default=None, help="default 50 (5000 with --paper-settings)")
    g.add_argument("--mc-passes", type=int, default=10)
    g.add_argument("--dropout-rate", type=float, default=0.2)
    g.add_argument("--sigma-cells", type=float, default=10.0)
    g.add_argument("--split-fraction", type=float, default=0.8)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--no-gradients", dest="use_gradients", action="store_false")
    g.add_argument("--no-trend", dest="use_trend", action="store_false")
    g.add_argument("--no-ref-loss", dest="use_ref_loss", action="store_false")
    g.add_argument("--bands", type=int, default=30)
    g.add_argument("--trend-degree", type=int, default=2)
    g.add_argument("--hidden", type=int, default=128)
    g.add_argument("--dilation-radius", type=float, default=0.0)
    g.add_argument("--paper-settings", action="store_true",
                   help="full schedule: max 20000 epochs, patience 5000")
    g.add_argument("--log-every", type=int, default=25, help="log progress every N epochs (0 = quiet)")


def _train_config(args, **overrides):
    base = TrainConfig.full_protocol() if args.paper_settings else TrainConfig.desk()
    max_epochs = base.max_epochs if args.max_epochs is None else args.max_epochs
    patience = base.patience if args.patience is None else args.patience
    values = dict(
        patch_size=args.patch_size, stride=args.stride, batch_size=args.batch_size, lr=args.lr,
        max_epochs=max_epochs, patience=min(patience, max_epochs), mc_passes=args.mc_passes,
        dropout_rate=args.dropout_rate, sigma_cells=args.sigma_cells, split_fraction=args.split_fraction,
        seed=args.seed, use_gradients=args.use_gradients, use_trend=args.use_trend,
        use_ref_loss=args.use_ref_loss, bands=args.bands, trend_degree=args.trend_degree,
        hidden=args.hidden, dilation_radius=args.dilation_radius)
    values.update(overrides)
    return TrainConfig(**values)


def _progress(args):
    every = getattr(args, "log_every", 0)
    if not every:
        return None

    def log(record):
        if record["epoch"] % every == 0 or record["epoch"] == 1:
            logger.info("epoch %d train %.5f val %.5f", record["epoch"], record["train_total"], record["val_total"])
    return log


def _fit_and_write(args, config, out, command, extra_inputs=None):
    region = load_region(args.manifest)
    model, report = train_model(region, config, _progress(args))
    out = ensure_dir(out)
    model.save(out)
    save_report(report, out / "report.json")
    inputs = _region_inputs(args.manifest)
    inputs.update(extra_inputs or {})
    write_run_manifest(out / "run_manifest.json", command, config.to_dict(), inputs, config.seed)
    return region, model, report


def _truth(args):
    return read_raster(args.truth) if getattr(args, "truth", None) else None


def cmd_synth(args):
    cfg = SynthConfig(height=args.height, width=args.width, seed=args.seed, n_bumps=args.n_bumps,
                      track_count=args.track_count, track_spacing=args.track_spacing,
                      noise_std=args.noise_std, ref_error_std=args.ref_error_std)
    region, true_bed = generate_region(cfg)
    out = ensure_dir(args.out)
    manifest = write_region(region, out)
    write_raster(true_bed, out / "true_bed.npy")
    write_run_manifest(out / "run_manifest.json", "synth", cfg.to_dict(), {}, cfg.seed,
                       {"manifest": str(manifest), "radar_cells": int(region.radar_mask.sum()),
                        "picks": len(region.picks)})
    print(manifest)


def cmd_train(args):
    config = _train_config(args)
    _, _, report = _fit_and_write(args, config, args.out, "train")
    print(json.dumps({"best_epoch": report.best_epoch, "best_val_total": report.best_val_total,
                      "stop_reason": report.stop_reason}))


def cmd_predict(args):
    region = load_region(args.manifest)
    model = GcnModel.load(args.checkpoint)
    result = predict_full(model, region, deterministic=args.deterministic, reference=_truth(args))
    out = ensure_dir(args.out)
    write_raster(result.mean, out / "mean.npy")
    write_raster(result.std, out / "std.npy")
    _write_json(out / "metrics.json", result.metrics.to_dict())
    extra = {}
    if args.heatmap:
        extra["heatmaps"] = {}
        for name, grid in (("mean", result.mean), ("std", result.std)):
            lo, hi = write_pgm(grid.values, out / f"{name}.pgm")
            extra["heatmaps"][f"{name}.pgm"] = {"min": lo, "max": hi}
    inputs = _region_inputs(args.manifest)
    inputs[str(Path(args.checkpoint) / "params.manifest.json")] = file_digest(
        Path(args.checkpoint) / "params.manifest.json")
    write_run_manifest(out / "run_manifest.json", "predict",
                       dict(model.config.to_dict(), deterministic=args.deterministic),
                       inputs, model.config.seed, extra)
    print(result.metrics.to_json())


def cmd_evaluate(args):
    region = load_region(args.manifest)
    inputs = _region_inputs(args.manifest)
    if args.prediction:
        pred = read_raster(args.prediction)
        inputs[str(args.prediction)] = file_digest(args.prediction)
        seed = None
    else:
        model = GcnModel.load(args.checkpoint)
        pred = predict_full(model, region, deterministic=args.deterministic).mean
        inputs[str(Path(args.checkpoint) / "params.manifest.json")] = file_digest(
            Path(args.checkpoint) / "params.manifest.json")
        seed = model.config.seed
    truth = _truth(args)
    if args.against == "radar":
        reference, mask = region.radar_values, region.radar_mask
    else:
        reference, mask = (truth if truth is not None else region.ref_bed), region.valid_mask
    report = evaluate(pred, reference, mask)
    out = Path(args.out)
    ensure_dir(out.parent)
    _write_json(out, report.to_dict())
    write_run_manifest(out.with_name(out.stem + ".run_manifest.json"), "evaluate",
                       {"against": "truth" if truth is not None and args.against == "ref" else args.against},
                       inputs, seed)
    print(report.to_json())


def cmd_baseline(args):
    region = load_region(args.manifest)
    kwargs = {"idw": {"power": args.power, "k": args.k if args.k else 4000},
              "knn": {"k": args.k if args.k else 10000},
              "gsgi": {"blur_sigma": args.blur_sigma}}[args.method]
    pred = BASELINES[args.method](region.picks, region.ref_bed, **kwargs)
    out = ensure_dir(args.out)
    write_raster(pred, out / "prediction.npy")
    truth = _truth(args)
    report = evaluate(pred, truth if truth is not None else region.ref_bed, region.valid_mask)
    _write_json(out / "metrics.json", report.to_dict())
    write_run_manifest(out / "run_manifest.json", f"baseline {args.method}", dict(kwargs, method=args.method),
                       _region_inputs(args.manifest), None)
    print(report.to_json())


def cmd_partition_eval(args):
    config = _train_config(args, band_mode=True)
    region, model, _ = _fit_and_write(args, config, args.out, "partition-eval")
    train_mask, test_mask = band_masks(region.shape, config.bands)
    truth = _truth(args)
    result = predict_full(model, region, reference=truth, mask=test_mask)
    train_metrics = evaluate(result.mean, truth if truth is not None else region.ref_bed, region.valid_mask & train_mask)
    out = Path(args.out)
    write_raster(result.mean, out / "mean.npy")
    write_raster(result.std, out / "std.npy")
    metrics = {"test_bands": result.metrics.to_dict(), "train_bands": train_metrics.to_dict()}
    _write_json(out / "metrics.json", metrics)
    print(json.dumps(metrics, indent=2))


def cmd_ablate(args):
    config = _train_config(args, **ABLATIONS[args.variant])
    region, model, _ = _fit_and_write(args, config, args.out, f"ablate {args.variant}")
    result = predict_full(model, region, reference=_truth(args))
    out = Path(args.out)
    write_raster(result.mean, out / "mean.npy")
    write_raster(result.std, out / "std.npy")
    _write_json(out / "metrics.json", dict(result.metrics.to_dict(), variant=args.variant))
    print(result.metrics.to_json())


def build_parser():
    parser = argparse.ArgumentParser(prog="bedgraph", description="Graph-based bed topography reconstruction.")
    parser.add_argument("--version", action="version", version=f"bedgraph {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", metavar="{synth,train,predict,evaluate,baseline,partition-eval,ablate}")
    sub.required = True

    p = sub.add_parser("synth", help="generate a synthetic region directory")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--height", type=int, default=64)
    p.add_argument("--width", type=int, default=64)
    p.add_argument("--n-bumps", type=int, default=SynthConfig.n_bumps)
    p.add_argument("--track-count", type=int, default=SynthConfig.track_count)
    p.add_argument("--track-spacing", type=float, default=SynthConfig.track_spacing)
    p.add_argument("--noise-std", type=float, default=SynthConfig.noise_std)
    p.add_argument("--ref-error-std", type=float, default=SynthConfig.ref_error_std)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train the graph regressor on a region")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="checkpoint directory")
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="full-grid MC-dropout prediction")
    p.add_argument("--manifest", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--deterministic", action="store_true", help="single pass, no dropout")
    p.add_argument("--heatmap", action="store_true", help="also write mean.pgm and std.pgm")
    p.add_argument("--truth", help="raster to score against instead of the reference bed")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", help="metrics JSON for a prediction or checkpoint")
    p.add_argument("--manifest", required=True)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--prediction")
    src.add_argument("--checkpoint")
    p.add_argument("--against", choices=("ref", "radar"), default="ref")
    p.add_argument("--truth", help="raster to score against instead of the reference bed")
    p.add_argument("--deterministic", action="store_true")
    p.add_argument("--out", required=True, help="metrics JSON path")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("baseline", help="classical interpolation baseline")
    p.add_argument("method", choices=sorted(BASELINES),
                   help="idw; knn (inverse-distance weighted k nearest, not 1-NN); gsgi")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--power", type=float, default=2.0)
    p.add_argument("--k", type=int, default=None, help="neighbours (idw 4000, knn 10000)")
    p.add_argument("--blur-sigma", type=float, default=5.0)
    p.add_argument("--truth")
    p.set_defaults(func=cmd_baseline)

    p = sub.add_parser("partition-eval", help="train on odd bands, score on even bands")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--truth")
    _add_train_flags(p)
    p.set_defaults(func=cmd_partition_eval)

    p = sub.add_parser("ablate", help="train with a component removed")
    p.add_argument("variant", choices=sorted(ABLATIONS))
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--truth")
    _add_train_flags(p)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 2
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        args.func(args)
    except (BedGraphError, OSError, ValueError) as exc:
        logger.error("%s", exc)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
