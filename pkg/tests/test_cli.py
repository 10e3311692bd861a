import json
import subprocess
import sys

import numpy as np
import pytest

from bedgraph.cli import main, write_pgm
from bedgraph.raster_io import read_raster

SUBCOMMANDS = ("synth", "train", "predict", "evaluate", "baseline", "partition-eval", "ablate")
FAST = ["--max-epochs", "2", "--hidden", "16", "--mc-passes", "3", "--log-every", "0"]
REPORT_FIELDS = {"mae", "rmse", "r2", "ssim", "psnr", "cell_count", "data_range"}


@pytest.fixture(scope="module")
def region_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("region")
    assert main(["synth", "--seed", "1", "--height", "32", "--width", "32", "--out", str(out)]) == 0
    return out


def test_help_lists_subcommands(capsys):
    assert main(["--help"]) == 0
    text = capsys.readouterr().out
    assert all(name in text for name in SUBCOMMANDS)


def test_subcommand_help(capsys):
    assert main(["train", "--help"]) == 0
    text = capsys.readouterr().out
    for flag in ("--patch-size", "--stride", "--mc-passes", "--sigma-cells", "--paper-settings"):
        assert flag in text


def test_unknown_subcommand():
    assert main(["frobnicate"]) == 2


def test_missing_required_flag():
    assert main(["train"]) == 2


def test_runtime_error_exit(tmp_path):
    assert main(["train", "--manifest", str(tmp_path / "nope.json"), "--out", str(tmp_path / "o")] + FAST) == 1


def test_synth_outputs(region_dir):
    manifest = json.loads((region_dir / "manifest.json").read_text())
    assert {"smb", "elv", "vx", "vy", "dhdt", "ref_bed", "radar_csv"} <= set(manifest)
    run = json.loads((region_dir / "run_manifest.json").read_text())
    assert run["seed"] == 1 and run["tool"] == "bedgraph" and run["config"]["height"] == 32
    assert read_raster(region_dir / "true_bed.npy").shape == (32, 32)


def test_train_predict_evaluate(tmp_path, region_dir):
    manifest = str(region_dir / "manifest.json")
    ck = tmp_path / "ck"
    assert main(["train", "--manifest", manifest, "--out", str(ck)] + FAST) == 0
    assert (ck / "params.manifest.json").exists() and (ck / "report.json").exists()
    run = json.loads((ck / "run_manifest.json").read_text())
    assert run["config"]["max_epochs"] == 2 and run["config"]["patience"] == 2
    assert all(len(d) == 64 for d in run["inputs"].values())

    pred = tmp_path / "pred"
    assert main(["predict", "--manifest", manifest, "--checkpoint", str(ck), "--out", str(pred), "--heatmap"]) == 0
    assert read_raster(pred / "std.npy").shape == (32, 32)
    assert (pred / "mean.pgm").read_bytes().startswith(b"P5\n32 32\n255\n")
    assert "heatmaps" in json.loads((pred / "run_manifest.json").read_text())

    out = tmp_path / "m.json"
    assert main(["evaluate", "--manifest", manifest, "--checkpoint", str(ck), "--out", str(out)]) == 0
    first = out.read_bytes()
    assert set(json.loads(first)) == REPORT_FIELDS
    assert main(["evaluate", "--manifest", manifest, "--checkpoint", str(ck), "--out", str(out)]) == 0
    assert out.read_bytes() == first
    assert (tmp_path / "m.run_manifest.json").exists()

    radar = tmp_path / "r.json"
    assert main(["evaluate", "--manifest", manifest, "--prediction", str(pred / "mean.npy"),
                 "--against", "radar", "--out", str(radar)]) == 0
    assert json.loads(radar.read_text())["cell_count"] < 32 * 32


@pytest.mark.parametrize("method", ["idw", "knn", "gsgi"])
def test_baselines(tmp_path, region_dir, method):
    out = tmp_path / method
    args = ["baseline", method, "--manifest", str(region_dir / "manifest.json"), "--out", str(out),
            "--truth", str(region_dir / "true_bed.npy")]
    assert main(args) == 0
    assert set(json.loads((out / "metrics.json").read_text())) == REPORT_FIELDS
    assert json.loads((out / "run_manifest.json").read_text())["config"]["method"] == method


def test_partition_eval(tmp_path, region_dir):
    out = tmp_path / "bands"
    assert main(["partition-eval", "--manifest", str(region_dir / "manifest.json"), "--out", str(out)] + FAST) == 0
    metrics = json.loads((out / "metrics.json").read_text())
    assert set(metrics) == {"test_bands", "train_bands"}
    assert json.loads((out / "run_manifest.json").read_text())["config"]["band_mode"] is True


@pytest.mark.parametrize("variant,features", [("no-grad", 10), ("no-trend", 15), ("no-both", 5), ("no-ref", 20)])
def test_ablate(tmp_path, region_dir, variant, features):
    out = tmp_path / variant
    assert main(["ablate", variant, "--manifest", str(region_dir / "manifest.json"), "--out", str(out)] + FAST) == 0
    assert json.loads((out / "params.manifest.json").read_text())["n_features"] == features
    assert json.loads((out / "metrics.json").read_text())["variant"] == variant


def test_paper_settings_flag(tmp_path, region_dir):
    from bedgraph.cli import _train_config, build_parser
    args = build_parser().parse_args(["train", "--manifest", "m", "--out", "o", "--paper-settings"])
    cfg = _train_config(args)
    assert (cfg.max_epochs, cfg.patience) == (20000, 5000)
    args = build_parser().parse_args(["train", "--manifest", "m", "--out", "o"])
    assert (_train_config(args).max_epochs, _train_config(args).patience) == (500, 50)


def test_write_pgm(tmp_path):
    lo, hi = write_pgm(np.array([[0.0, 1.0], [2.0, np.nan]]), tmp_path / "a.pgm")
    data = (tmp_path / "a.pgm").read_bytes()
    assert (lo, hi) == (0.0, 2.0)
    assert data.endswith(bytes([0, 128, 255, 0]))


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "bedgraph", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "partition-eval" in proc.stdout
