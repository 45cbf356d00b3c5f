import json
import subprocess
import sys

import numpy as np
import pytest
import yaml

from typhoon_cddpm import ingestion as ing
from typhoon_cddpm.cli import main


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["synth", "--n", "25", "--size", "16", "--seed", "1", "--out", str(root / "raw")]) == 0
    assert main(["prepare", "--data", str(root / "raw"), "--out", str(root / "proc"), "--grid-size", "16"]) == 0
    runs = {}
    for kind, params in (("cnn", {"width": 8}), ("cddpm", {"base_width": 8, "depth": 2, "gamma_embed_dim": 16})):
        cfg = {"dataset": str(root / "proc"), "model": kind, "grid_size": 16,
               "output_dir": str(root / kind), "model_params": params,
               "schedule": {"T": 4}, "optimizer": {"lr": 1e-3, "batch_size": 8, "epochs": 1}}
        (root / f"{kind}.yaml").write_text(yaml.safe_dump(cfg))
        assert main(["train", "--config", str(root / f"{kind}.yaml")]) == 0
        assert main(["evaluate", "--checkpoint", str(root / kind / "checkpoint.pt"),
                     "--data", str(root / "proc"), "--out", str(root / kind)]) == 0
        runs[kind] = root / kind
    return root, runs


def test_synth_and_prepare_layout(workspace):
    root, _ = workspace
    manifest = json.loads((root / "raw" / "manifest.json").read_text())
    assert manifest["format"] == "typhoon-cddpm-dataset" and len(manifest["samples"]) == 25
    assert (root / "raw" / manifest["samples"][0]["file"]).exists()
    assert (root / "proc" / "norm_stats.json").exists()
    split = json.loads((root / "proc" / "split.0.json").read_text())
    assert not set(split["train"]) & set(split["test"])


def test_train_and_evaluate_outputs(workspace, capsys):
    _, runs = workspace
    for out in runs.values():
        assert (out / "checkpoint.pt").exists() and (out / "metrics.csv").exists()
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["status"] == "trained"


def test_report_command(workspace, capsys):
    root, runs = workspace
    assert main(["report", "--runs", str(runs["cnn"]), str(runs["cddpm"]), "--out", str(root / "rep")]) == 0
    assert "Mean" in capsys.readouterr().out
    assert (root / "rep" / "comparison.csv").exists()
    assert (root / "rep" / "magnitude_0000.png").exists()


@pytest.mark.parametrize("suffix", [".npy", ".npz", ".h5"])
def test_sample_command(workspace, suffix, tmp_path):
    root, runs = workspace
    img = np.random.default_rng(0).uniform(size=(24, 24))
    path = tmp_path / f"frame{suffix}"
    if suffix == ".npy":
        np.save(path, img)
    elif suffix == ".npz":
        np.savez(path, satellite=img)
    else:
        rec = ing.RawRecord("2022-09-01T00:00:00Z", "DigitalTyphoon", "satellite", img,
                            np.linspace(20, 25, 24), np.linspace(118, 123, 24), typhoon_id="X")
        ing.write_fixture([rec], tmp_path / "dt")
        path = next((tmp_path / "dt" / "X").glob("*.h5"))
    out = tmp_path / "pred.npz"
    assert main(["sample", "--checkpoint", str(runs["cddpm"] / "checkpoint.pt"),
                 "--input", str(path), "--seed", "3", "--out", str(out)]) == 0
    with np.load(out) as z:
        assert set(z.files) == {"u10", "v10", "sp", "t2m", "magnitude"}
        assert z["sp"].shape == (16, 16)
        np.testing.assert_allclose(z["magnitude"], np.hypot(z["u10"], z["v10"]))


def test_ingest_command(tmp_path, capsys):
    recs = ing.synth_dataset(6, 16, seed=0)
    (tmp_path / "era5").mkdir()
    ing.write_fixture([r for r in recs if r.source is ing.Source.ERA5], tmp_path / "era5" / "a.nc")
    ing.write_fixture([r for r in recs if r.source is ing.Source.DIGITAL_TYPHOON], tmp_path / "dt")
    assert main(["ingest", "--era5-dir", str(tmp_path / "era5"), "--dt-dir", str(tmp_path / "dt"),
                 "--out", str(tmp_path / "ds")]) == 0
    assert "24 ERA5 and 6 satellite" in capsys.readouterr().out
    back = ing.load_dataset(tmp_path / "ds")
    key = lambda r: (r.timestamp, r.variable)
    assert sorted(back, key=key) == sorted(recs, key=key)


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "typhoon_cddpm", "--help"], capture_output=True, text=True)
    assert res.returncode == 0
    for cmd in ("ingest", "synth", "train", "evaluate", "report", "sample"):
        assert cmd in res.stdout
