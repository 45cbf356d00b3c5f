import json

import numpy as np
import pytest
import torch
import yaml

from typhoon_cddpm import pipeline as pl
from typhoon_cddpm import runner as R
from typhoon_cddpm.errors import CheckpointMismatchError, EmptyDatasetError, NumericalFailure

TINY_UNET = {"base_width": 8, "depth": 2, "gamma_embed_dim": 16}


def tiny_config(tmp, model="cddpm", **kw):
    params = TINY_UNET if model == "cddpm" else {"width": 8}
    cfg = R.ExperimentConfig(model=model, grid_size=16, output_dir=str(tmp), model_params=params,
                             schedule=R.ScheduleConfig(T=5),
                             optimizer=R.OptimizerConfig(lr=1e-3, batch_size=8, epochs=2))
    for k, v in kw.items():
        setattr(cfg, k, v)
    return cfg


@pytest.fixture(scope="module")
def runs(tmp_path_factory, processed_small):
    root = tmp_path_factory.mktemp("runs")
    out = {}
    for kind in ("cnn", "senet", "cddpm"):
        manifest, report, mismatch = R.run_experiment(tiny_config(root / kind, kind), processed_small)
        out[kind] = (root / kind, manifest, report, mismatch)
    return out


# ----------------------------------------------------------------- config

def test_config_yaml_round_trip(tmp_path):
    cfg = tiny_config(tmp_path)
    R.save_config(cfg, tmp_path / "c.yaml")
    text = (tmp_path / "c.yaml").read_text()
    assert "schema_version: 1" in text
    back = R.load_config(tmp_path / "c.yaml", env={})
    assert back == cfg


def test_config_rejects_unknown_keys_and_versions(tmp_path):
    (tmp_path / "c.yaml").write_text(yaml.safe_dump({"model": "cnn", "learning_rate": 1}))
    with pytest.raises(ValueError, match="learning_rate"):
        R.load_config(tmp_path / "c.yaml", env={})
    with pytest.raises(ValueError):
        R.ExperimentConfig(schema_version=2)
    with pytest.raises(ValueError):
        R.ExperimentConfig(model="ddpm")


def test_env_overrides_only_output_and_seed(tmp_path):
    (tmp_path / "c.yaml").write_text(yaml.safe_dump({"model": "cnn", "seed": 1, "grid_size": 32}))
    env = {R.ENV_OUTPUT_DIR: "/tmp/elsewhere", R.ENV_SEED: "9", "TYPHOON_CDDPM_GRID_SIZE": "64"}
    cfg = R.load_config(tmp_path / "c.yaml", env=env)
    assert (cfg.output_dir, cfg.seed, cfg.grid_size) == ("/tmp/elsewhere", 9, 32)


def test_schedule_config_scales_default_betas():
    s = R.ScheduleConfig(T=50).build()
    assert s.beta[0] == pytest.approx(2e-3) and s.beta[-1] == pytest.approx(0.4)
    s = R.ScheduleConfig(T=1000).build()
    assert s.beta[0] == pytest.approx(1e-4) and s.beta[-1] == pytest.approx(0.02)
    s = R.ScheduleConfig(T=50, beta_start=1e-4, beta_end=0.02).build()
    assert s.beta[-1] == pytest.approx(0.02)


# ----------------------------------------------------------------- training

def test_cnn_trains_and_saves_loadable_checkpoint(runs):
    out, manifest, _, _ = runs["cnn"]
    assert manifest.status == "evaluated"
    assert len(manifest.loss_curve) == 2 and len(manifest.probe_curve) == 3
    for name in ("checkpoint.pt", "loss_curve.json", "manifest.json", "config.yaml", "metrics.csv"):
        assert (out / name).exists()
    ckpt = R.load_checkpoint(out / "checkpoint.pt", grid_size=16)
    assert ckpt.kind == "cnn" and ckpt.schedule is None
    assert ckpt.model(torch.rand(2, 1, 1, 1)).shape == (2, 4, 16, 16)
    saved = json.loads((out / "manifest.json").read_text())
    assert saved["config"]["seed"] == 0 and saved["code_version"]


def test_training_is_deterministic(tmp_path, processed_small):
    a = R.train(tiny_config(tmp_path / "a", epochs=1), processed_small)
    b = R.train(tiny_config(tmp_path / "b", epochs=1), processed_small)
    assert a.loss_curve == b.loss_curve and a.probe_curve == b.probe_curve
    sa = torch.load(tmp_path / "a" / "checkpoint.pt", weights_only=True)["state_dict"]
    sb = torch.load(tmp_path / "b" / "checkpoint.pt", weights_only=True)["state_dict"]
    assert all(torch.equal(sa[k], sb[k]) for k in sa)


def test_training_failure_marks_manifest(tmp_path, processed_small, monkeypatch):
    def boom(*a, **k):
        raise NumericalFailure("non-finite loss", step=[3])

    cfg = tiny_config(tmp_path)
    monkeypatch.setattr(R, "_probe_loss", lambda *a, **k: 1.0)
    monkeypatch.setattr(R, "training_step", boom)
    with pytest.raises(NumericalFailure):
        R.train(cfg, processed_small)
    saved = json.loads((tmp_path / "manifest.json").read_text())
    assert saved["status"] == "failed" and "non-finite" in saved["error"]
    assert not (tmp_path / "checkpoint.pt").exists()


def test_leakage_audit(tmp_path, processed_small):
    leaky = pl.ProcessedDataset(processed_small.train, processed_small.train[:2],
                                processed_small.stats, 0, 16)
    with pytest.raises(ValueError, match="both splits"):
        R.train(tiny_config(tmp_path), leaky)


def test_grid_mismatch_refused(tmp_path, processed_small):
    cfg = tiny_config(tmp_path)
    cfg.grid_size = 32
    with pytest.raises(CheckpointMismatchError):
        R.train(cfg, processed_small)


def test_missing_dataset_path(tmp_path):
    cfg = tiny_config(tmp_path)
    cfg.dataset = str(tmp_path / "nope")
    with pytest.raises(FileNotFoundError):
        R.train(cfg)


# ----------------------------------------------------------------- checkpoints

def test_checkpoint_mismatch_refusal(runs):
    path = runs["cddpm"][0] / "checkpoint.pt"
    with pytest.raises(CheckpointMismatchError):
        R.load_checkpoint(path, grid_size=64)
    with pytest.raises(CheckpointMismatchError):
        R.load_checkpoint(path, channels=("v10", "u10", "sp", "t2m"))
    assert R.load_checkpoint(path, grid_size=16).kind == "cddpm"


def test_checkpoint_contents(runs, processed_small):
    ckpt = R.load_checkpoint(runs["cddpm"][0] / "checkpoint.pt")
    assert ckpt.stats == processed_small.stats
    assert ckpt.schedule.T == 5
    assert ckpt.config["model_params"] == TINY_UNET
    assert ckpt.sampler_options == {"clip_denoised": True, "variance": "beta"}


def test_checkpoint_bad_format(tmp_path):
    torch.save({"format": "something-else"}, tmp_path / "x.pt")
    with pytest.raises(CheckpointMismatchError):
        R.load_checkpoint(tmp_path / "x.pt")


# ----------------------------------------------------------------- evaluation

def test_evaluate_outputs(runs):
    out, _, report, mismatch = runs["cddpm"]
    for name in ("metrics.csv", "metrics.txt", "mismatch.csv", "predictions.npz", "evaluation.json"):
        assert (out / name).exists()
    assert report.is_finite()
    meta = json.loads((out / "evaluation.json").read_text())
    assert meta["seed"] == 0 and meta["n_draws"] == 1 and meta["model"] == "cddpm"
    with np.load(out / "predictions.npz") as z:
        assert z["pred"].shape == z["true"].shape
        assert z["pred"].min() >= 0 and z["pred"].max() <= 1


def test_predict_seeded(runs, processed_small):
    ckpt = R.load_checkpoint(runs["cddpm"][0] / "checkpoint.pt")
    x, _ = pl.pairs_to_arrays(processed_small.normalized("test")[:3])
    a, b = R.predict(ckpt, x, seed=4), R.predict(ckpt, x, seed=4)
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, R.predict(ckpt, x, seed=5))
    avg = R.predict(ckpt, x, seed=4, n_draws=2)
    assert avg.shape == a.shape and not np.array_equal(avg, a)


def test_evaluate_empty_test_split(runs, processed_small):
    empty = pl.ProcessedDataset(processed_small.train, [], processed_small.stats, 0, 16)
    with pytest.raises(EmptyDatasetError):
        R.evaluate(runs["cnn"][0] / "checkpoint.pt", empty, runs["cnn"][0] / "empty")


def test_evaluate_from_directory(tmp_path, runs, processed_small):
    pl.save_processed(processed_small, tmp_path / "proc")
    report, _ = R.evaluate(runs["cnn"][0] / "checkpoint.pt", tmp_path / "proc", tmp_path / "ev")
    assert report.rows == runs["cnn"][2].rows


# ----------------------------------------------------------------- report

def test_report_outputs(tmp_path, runs):
    dirs = [runs[k][0] for k in ("cnn", "senet", "cddpm")]
    res = R.report(dirs, tmp_path / "rep", samples=(0, 2))
    assert res.n_magnitude_panels == 2 * (2 + 3)
    assert len(res.magnitude_figures) == 2 and all(p.exists() for p in res.magnitude_figures)
    assert all(p.exists() for p in res.difference_figures)
    lines = res.table_csv.read_text().splitlines()
    assert lines[0] == "model,variable,KL-Div,RMSE,MAE,PSNR,SSIM,FID,LPIPS"
    assert len(lines) == 1 + 3 * 5
    assert [l.split(",")[0] for l in lines[1::5]] == ["cnn", "senet", "cddpm"]
    with np.load(tmp_path / "rep" / "magnitude_0000.npz") as z:
        assert set(z.files) == {"input", "truth", "cnn", "senet", "cddpm"}


def test_difference_map_of_perfect_prediction():
    y = np.random.default_rng(0).uniform(size=(4, 8, 8))
    assert np.all(R.difference_map(y, y) == 0)
    np.testing.assert_allclose(R.difference_map(y, y + 1), np.ones_like(y), rtol=0, atol=1e-15)


def test_report_perfect_run_has_zero_difference(tmp_path, runs):
    src = runs["cnn"][0]
    perfect = tmp_path / "perfect"
    perfect.mkdir()
    for name in ("metrics.csv", "evaluation.json"):
        (perfect / name).write_text((src / name).read_text())
    with np.load(src / "predictions.npz") as z:
        arrays = {k: z[k] for k in z.files}
    arrays["pred"] = arrays["true"]
    np.savez(perfect / "predictions.npz", **arrays)
    res = R.report([perfect], tmp_path / "rep")
    with np.load(res.difference_figures[0].with_suffix(".npz")) as z:
        assert all(np.all(z[k] == 0) for k in z.files)


def test_report_missing_metrics_file(tmp_path, runs):
    broken = tmp_path / "broken"
    broken.mkdir()
    (broken / "evaluation.json").write_text("{}")
    with pytest.raises(FileNotFoundError, match="metrics.csv"):
        R.report([broken], tmp_path / "rep")
    with pytest.raises(ValueError):
        R.report([], tmp_path / "rep")
