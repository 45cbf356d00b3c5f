"""Training, evaluation and reporting runs.

A run directory holds::

    config.yaml          config snapshot
    checkpoint.pt        weights + schedule + norm stats + config (see save_checkpoint)
    loss_curve.json      per-epoch mean training loss and the fixed-probe loss
    manifest.json        RunManifest, written atomically at the end of the run

``evaluate`` writes ``metrics.csv`` / ``metrics.txt`` / ``mismatch.csv`` /
``predictions.npz`` / ``evaluation.json`` into its output directory, and
``report`` builds comparison tables and figures from those files only.
"""

from __future__ import annotations

import json
import logging
import os
import tempfile
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import yaml
from matplotlib.figure import Figure

from . import __version__
from .diffusion import NoiseSchedule, build_schedule, linear_beta_range, sample, training_step
from .errors import CheckpointMismatchError, EmptyDatasetError, NumericalFailure
from .metrics import MetricsReport, MismatchReport, evaluate_arrays, wind_magnitude
from .models import MODEL_KINDS, build_model, model_kind, spec_dict
from .pipeline import (CHANNELS, AugmentConfig, NormStats, ProcessedDataset, augment,
                       denormalize_array, load_processed, normalize_pair, pairs_to_arrays)

logger = logging.getLogger(__name__)

CONFIG_SCHEMA_VERSION = 1
CHECKPOINT_FORMAT = "typhoon-cddpm-checkpoint"
CHECKPOINT_VERSION = 1
ENV_OUTPUT_DIR = "TYPHOON_CDDPM_OUTPUT_DIR"
ENV_SEED = "TYPHOON_CDDPM_SEED"


@dataclass
class ScheduleConfig:
    """Diffusion schedule settings.

    Leaving ``beta_start``/``beta_end`` unset gives the 1e-4..0.02 range at
    T = 1000, scaled by 1000 / T for shorter chains so that the final noise
    level still approaches zero.
    """

    T: int = 1000
    kind: str = "linear"
    beta_start: float | None = None
    beta_end: float | None = None
    variance: str = "beta"
    clip_denoised: bool = True

    def build(self) -> NoiseSchedule:
        lo, hi = linear_beta_range(self.T)
        return build_schedule(self.T, self.kind,
                              lo if self.beta_start is None else self.beta_start,
                              hi if self.beta_end is None else self.beta_end)


@dataclass
class OptimizerConfig:
    lr: float = 2e-4
    batch_size: int = 16
    epochs: int = 20


@dataclass
class ExperimentConfig:
    dataset: str = ""
    model: str = "cddpm"
    grid_size: int = 64
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    model_params: dict = field(default_factory=dict)
    split_seed: int = 0
    seed: int = 0
    output_dir: str = "runs/default"
    n_draws: int = 1
    mismatch_threshold: float = 0.05
    schema_version: int = CONFIG_SCHEMA_VERSION

    def __post_init__(self):
        if self.model not in MODEL_KINDS:
            raise ValueError(f"model must be one of {MODEL_KINDS}, got {self.model!r}")
        if self.schema_version != CONFIG_SCHEMA_VERSION:
            raise ValueError(f"unsupported config schema_version {self.schema_version}")
        if isinstance(self.schedule, dict):
            self.schedule = ScheduleConfig(**self.schedule)
        if isinstance(self.optimizer, dict):
            self.optimizer = OptimizerConfig(**self.optimizer)
        if isinstance(self.augment, dict):
            aug = dict(self.augment)
            if "contrast_range" in aug:
                aug["contrast_range"] = tuple(aug["contrast_range"])
            self.augment = AugmentConfig(**aug)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["augment"]["contrast_range"] = list(d["augment"]["contrast_range"])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


def load_config(path, env=None) -> ExperimentConfig:
    """Read a YAML config; ``TYPHOON_CDDPM_OUTPUT_DIR`` / ``TYPHOON_CDDPM_SEED`` override it."""
    data = yaml.safe_load(Path(path).read_text()) or {}
    return apply_env(ExperimentConfig.from_dict(data), env)


def apply_env(config: ExperimentConfig, env=None) -> ExperimentConfig:
    env = os.environ if env is None else env
    if env.get(ENV_OUTPUT_DIR):
        config.output_dir = env[ENV_OUTPUT_DIR]
    if env.get(ENV_SEED):
        config.seed = int(env[ENV_SEED])
    return config


def save_config(config: ExperimentConfig, path) -> None:
    Path(path).write_text(yaml.safe_dump(config.to_dict(), sort_keys=False))


@dataclass
class RunManifest:
    config: dict
    code_version: str = __version__
    status: str = "running"
    timings: dict = field(default_factory=dict)
    loss_curve: list = field(default_factory=list)
    probe_curve: list = field(default_factory=list)
    initial_loss: float | None = None
    final_loss: float | None = None
    checkpoint: str | None = None
    metrics: str | None = None
    error: str | None = None

    def write(self, path) -> None:
        _atomic_write(Path(path), json.dumps(asdict(self), indent=2))

    @classmethod
    def read(cls, path) -> "RunManifest":
        return cls(**json.loads(Path(path).read_text()))


def _atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    with os.fdopen(fd, "w") as fh:
        fh.write(text)
    os.replace(tmp, path)


# --------------------------------------------------------------- checkpoints

@dataclass
class Checkpoint:
    kind: str
    model: torch.nn.Module
    stats: NormStats
    grid_size: int
    schedule: NoiseSchedule | None = None
    config: dict = field(default_factory=dict)

    @property
    def sampler_options(self) -> dict:
        sched = self.config.get("schedule", {})
        return {"variance": sched.get("variance", "beta"),
                "clip_denoised": sched.get("clip_denoised", True)}


def save_checkpoint(path, model: torch.nn.Module, stats: NormStats,
                    schedule: NoiseSchedule | None = None, config: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save({
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "kind": model_kind(model),
        "spec": spec_dict(model),
        "grid_size": model.spec.grid_size,
        "channels": list(CHANNELS),
        "state_dict": model.state_dict(),
        "schedule": schedule.to_dict() if schedule is not None else None,
        "norm_stats": stats.to_dict(),
        "config": config or {},
    }, path)
    return path


def load_checkpoint(path, grid_size: int | None = None, channels: Sequence[str] = CHANNELS) -> Checkpoint:
    """Load a checkpoint, refusing a grid size or channel order other than the requested one."""
    blob = torch.load(path, map_location="cpu", weights_only=True)
    if blob.get("format") != CHECKPOINT_FORMAT or blob.get("version") != CHECKPOINT_VERSION:
        raise CheckpointMismatchError(f"{path}: unrecognised checkpoint format")
    if tuple(blob["channels"]) != tuple(channels):
        raise CheckpointMismatchError(f"channel order {blob['channels']} != {list(channels)}")
    if grid_size is not None and blob["grid_size"] != grid_size:
        raise CheckpointMismatchError(f"checkpoint grid {blob['grid_size']} != requested {grid_size}")
    model = build_model(blob["kind"], **blob["spec"])
    model.load_state_dict(blob["state_dict"])
    model.eval()
    schedule = NoiseSchedule.from_dict(blob["schedule"]) if blob["schedule"] else None
    return Checkpoint(blob["kind"], model, NormStats.from_dict(blob["norm_stats"]),
                      blob["grid_size"], schedule, blob["config"])


# ------------------------------------------------------------------ training

def _audit_split(ds: ProcessedDataset) -> None:
    leak = {p.typhoon_id for p in ds.train} & {p.typhoon_id for p in ds.test}
    if leak:
        raise ValueError(f"typhoons present in both splits: {sorted(leak)}")


def _augmented_train(pairs, config: AugmentConfig, seed: int, epoch: int):
    if max(config.noise_p, config.smooth_p, config.contrast_p) == 0:
        return pairs
    return [augment(p, config, [seed, epoch, i]) for i, p in enumerate(pairs)]


def _loss(model, kind, x, y, schedule, gen, t=None):
    if kind == "cddpm":
        return training_step(model, x, y, schedule, gen, t=t)
    pred = model(model.prepare_input(x))
    loss = torch.mean((pred - y) ** 2)
    if not torch.isfinite(loss):
        raise NumericalFailure("non-finite baseline loss")
    return loss


def _probe_loss(model, kind, x, y, schedule, seed) -> float:
    """Loss on a fixed batch with fixed (t, eps) so values are comparable across epochs."""
    was_training = model.training
    model.eval()
    gen = torch.Generator().manual_seed(seed + 7919)
    t = torch.randint(1, schedule.T + 1, (x.shape[0],), generator=gen) if kind == "cddpm" else None
    with torch.no_grad():
        value = float(_loss(model, kind, x, y, schedule, gen, t=t))
    model.train(was_training)
    return value


def train(config: ExperimentConfig, dataset: ProcessedDataset | None = None) -> RunManifest:
    """Train one model; writes checkpoint, loss curve and manifest under ``config.output_dir``."""
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_config(config, out / "config.yaml")
    manifest = RunManifest(config=config.to_dict())
    t_start = time.perf_counter()

    if dataset is None:
        if not config.dataset or not Path(config.dataset).exists():
            raise FileNotFoundError(f"dataset directory {config.dataset!r} does not exist")
        dataset = load_processed(config.dataset, config.split_seed)
    if dataset.grid_size != config.grid_size:
        raise CheckpointMismatchError(f"dataset grid {dataset.grid_size} != config grid {config.grid_size}")
    _audit_split(dataset)
    if not dataset.train:
        raise EmptyDatasetError("empty training split")

    torch.manual_seed(config.seed)
    gen = torch.Generator().manual_seed(config.seed)
    kind = config.model
    model = build_model(kind, config.grid_size, **config.model_params)
    schedule = config.schedule.build()
    opt = torch.optim.Adam(model.parameters(), lr=config.optimizer.lr)

    train_pairs = [normalize_pair(p, dataset.stats) for p in dataset.train]
    px, py = (torch.from_numpy(a) for a in pairs_to_arrays(train_pairs[:32]))
    manifest.probe_curve.append(_probe_loss(model, kind, px, py, schedule, config.seed))
    manifest.timings["setup_s"] = time.perf_counter() - t_start

    bs = config.optimizer.batch_size
    t_train = time.perf_counter()
    try:
        for epoch in range(config.optimizer.epochs):
            model.train()
            epoch_pairs = _augmented_train(train_pairs, config.augment, config.seed, epoch)
            x_all, y_all = (torch.from_numpy(a) for a in pairs_to_arrays(epoch_pairs))
            perm = torch.randperm(len(epoch_pairs), generator=gen)
            losses = []
            for start in range(0, len(perm), bs):
                idx = perm[start:start + bs]
                if kind != "cddpm" and len(idx) < 2:
                    continue  # BatchNorm needs more than one sample
                loss = _loss(model, kind, x_all[idx], y_all[idx], schedule, gen)
                opt.zero_grad()
                loss.backward()
                opt.step()
                losses.append(loss.item())
            manifest.loss_curve.append(float(np.mean(losses)))
            manifest.probe_curve.append(_probe_loss(model, kind, px, py, schedule, config.seed))
            logger.info("epoch %d loss %.5f probe %.5f", epoch + 1, manifest.loss_curve[-1],
                        manifest.probe_curve[-1])
    except NumericalFailure as exc:
        manifest.status = "failed"
        manifest.error = str(exc)
        manifest.timings["train_s"] = time.perf_counter() - t_train
        manifest.write(out / "manifest.json")
        raise

    manifest.timings["train_s"] = time.perf_counter() - t_train
    manifest.initial_loss = manifest.probe_curve[0]
    manifest.final_loss = manifest.probe_curve[-1]
    ckpt = save_checkpoint(out / "checkpoint.pt", model, dataset.stats,
                           schedule if kind == "cddpm" else None, config.to_dict())
    manifest.checkpoint = str(ckpt)
    (out / "loss_curve.json").write_text(json.dumps(
        {"epoch_mean": manifest.loss_curve, "probe": manifest.probe_curve}, indent=2))
    manifest.status = "trained"
    manifest.timings["total_s"] = time.perf_counter() - t_start
    manifest.write(out / "manifest.json")
    return manifest


# ---------------------------------------------------------------- evaluation

def predict(ckpt: Checkpoint, x: np.ndarray, seed: int = 0, n_draws: int = 1,
            batch_size: int = 64) -> np.ndarray:
    """Normalized (N, 4, H, W) predictions for normalized conditions (N, 1, H, W).

    The diffusion model averages ``n_draws`` seeded samples; baselines run
    their deterministic forward pass. Outputs are clipped to [0, 1].
    """
    model = ckpt.model.eval()
    xt = torch.as_tensor(np.asarray(x, dtype=np.float32))
    outs = []
    with torch.no_grad():
        if ckpt.kind == "cddpm":
            acc = torch.zeros((xt.shape[0], 4, *xt.shape[-2:]))
            for d in range(n_draws):
                gen = torch.Generator().manual_seed(seed * 1000003 + d)
                draws = [sample(model, xt[i:i + batch_size], ckpt.schedule, gen, **ckpt.sampler_options)
                         for i in range(0, len(xt), batch_size)]
                acc += torch.cat(draws)
            pred = acc / n_draws
        else:
            for i in range(0, len(xt), batch_size):
                xb = xt[i:i + batch_size]
                outs.append(model(model.prepare_input(xb)).clamp(0.0, 1.0))
            pred = torch.cat(outs)
    return pred.numpy().astype(np.float64)


def evaluate(checkpoint, data, out_dir, seed: int = 0, n_draws: int = 1, features=None,
             mismatch_threshold: float = 0.05, split_seed: int | None = None
             ) -> tuple[MetricsReport, MismatchReport]:
    """Score a checkpoint on the test split and persist tables and predictions."""
    dataset = data if isinstance(data, ProcessedDataset) else load_processed(data, split_seed)
    ckpt = load_checkpoint(checkpoint, grid_size=dataset.grid_size)
    if not dataset.test:
        raise EmptyDatasetError("empty test split")
    test = [normalize_pair(p, ckpt.stats) for p in dataset.test]
    x, y = pairs_to_arrays(test, np.float64)

    t0 = time.perf_counter()
    pred = predict(ckpt, x, seed, n_draws)
    t_pred = time.perf_counter() - t0
    report, mismatch = evaluate_arrays(pred, y, features, mismatch_threshold)

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.csv").write_text(report.to_csv(ckpt.kind))
    (out / "metrics.txt").write_text(report.render(ckpt.kind) + "\n")
    (out / "mismatch.csv").write_text(mismatch.to_csv(ckpt.kind))
    np.savez(out / "predictions.npz", pred=pred, true=y, condition=x,
             timestamps=np.array([p.timestamp.isoformat() for p in test]),
             typhoon_ids=np.array([p.typhoon_id for p in test]))
    _atomic_write(out / "evaluation.json", json.dumps({
        "model": ckpt.kind, "checkpoint": str(checkpoint), "seed": seed, "n_draws": n_draws,
        "n_test": len(test), "mismatch_threshold": mismatch_threshold,
        "norm_stats": ckpt.stats.to_dict(), "predict_s": t_pred, "code_version": __version__,
    }, indent=2))
    return report, mismatch


def run_experiment(config: ExperimentConfig, dataset: ProcessedDataset | None = None,
                   features=None) -> tuple[RunManifest, MetricsReport, MismatchReport]:
    """train + evaluate into the same run directory."""
    manifest = train(config, dataset)
    out = Path(config.output_dir)
    data = dataset if dataset is not None else config.dataset
    report, mismatch = evaluate(manifest.checkpoint, data, out, config.seed, config.n_draws,
                                features, config.mismatch_threshold, config.split_seed)
    manifest.metrics = str(out / "metrics.csv")
    manifest.status = "evaluated"
    manifest.write(out / "manifest.json")
    return manifest, report, mismatch


# ------------------------------------------------------------------ reporting

@dataclass
class ReportResult:
    table_csv: Path
    table_txt: Path
    magnitude_figures: list
    difference_figures: list
    n_magnitude_panels: int
    reports: dict


def _load_run(run_dir: Path):
    run_dir = Path(run_dir)
    for name in ("metrics.csv", "evaluation.json", "predictions.npz"):
        if not (run_dir / name).exists():
            raise FileNotFoundError(f"{run_dir}: missing {name}")
    meta = json.loads((run_dir / "evaluation.json").read_text())
    report = MetricsReport.from_csv((run_dir / "metrics.csv").read_text())
    with np.load(run_dir / "predictions.npz") as z:
        arrays = {k: z[k] for k in z.files}
    return meta, report, arrays


def comparison_table(reports: dict) -> str:
    """Comparison-table CSV for several models."""
    lines = []
    for i, (name, rep) in enumerate(reports.items()):
        text = rep.to_csv(name)
        lines.append(text if i == 0 else text.split("\n", 1)[1])
    return "".join(lines)


def difference_map(pred: np.ndarray, true: np.ndarray) -> np.ndarray:
    """Signed error true - pred."""
    return np.asarray(true, dtype=np.float64) - np.asarray(pred, dtype=np.float64)


def report(run_dirs: Sequence, out_dir, samples: Sequence[int] = (0,)) -> ReportResult:
    """Comparison table, wind-magnitude panels and difference maps for evaluated runs."""
    if not run_dirs:
        raise ValueError("report needs at least one evaluated run")
    runs = [_load_run(Path(d)) for d in run_dirs]
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    names = []
    for meta, _, _ in runs:
        name, k = meta["model"], 2
        while name in names:
            name, k = f"{meta['model']}{k}", k + 1
        names.append(name)
    reports = {n: r for n, (_, r, _) in zip(names, runs)}

    table_csv = out / "comparison.csv"
    table_csv.write_text(comparison_table(reports))
    table_txt = out / "comparison.txt"
    table_txt.write_text("\n".join(r.render(n) for n, r in reports.items()) + "\n")

    ref = runs[0][2]
    for _, _, arr in runs[1:]:
        if not np.array_equal(arr["timestamps"], ref["timestamps"]):
            raise ValueError("runs were evaluated on different test sets")
    stats = NormStats.from_dict(runs[0][0]["norm_stats"])

    def phys(a, c):
        return denormalize_array(a, CHANNELS[c], stats)

    mag_figs, diff_figs, n_panels = [], [], 0
    for s in samples:
        true = ref["true"][s]
        gt_mag = wind_magnitude(phys(true[0], 0), phys(true[1], 1))
        preds = {n: arr["pred"][s] for n, (_, _, arr) in zip(names, runs)}
        mags = {n: wind_magnitude(phys(p[0], 0), phys(p[1], 1)) for n, p in preds.items()}

        panels = [("input", ref["condition"][s][0]), ("truth |V|", gt_mag)] + \
                 [(f"{n} |V|", m) for n, m in mags.items()]
        n_panels += len(panels)
        vmax = max(float(gt_mag.max()), *(float(m.max()) for m in mags.values()))
        fig = Figure(figsize=(3 * len(panels), 3))
        axes = fig.subplots(1, len(panels), squeeze=False)
        for ax, (title, img) in zip(axes[0], panels):
            kw = {"cmap": "gray"} if title == "input" else {"cmap": "viridis", "vmin": 0, "vmax": vmax}
            im = ax.imshow(img, origin="lower", **kw)
            ax.set_title(title, fontsize=9)
            ax.axis("off")
        fig.colorbar(im, ax=axes[0].tolist(), shrink=0.8, label="m s$^{-1}$")
        path = out / f"magnitude_{s:04d}.png"
        fig.savefig(path, dpi=80)
        np.savez(out / f"magnitude_{s:04d}.npz", input=ref["condition"][s][0], truth=gt_mag,
                 **{n: m for n, m in mags.items()})
        mag_figs.append(path)

        diffs = {n: np.stack([difference_map(p[c], true[c]) for c in range(4)]) for n, p in preds.items()}
        lim = max(1e-12, max(float(np.abs(d).max()) for d in diffs.values()))
        fig = Figure(figsize=(2.6 * len(names), 10))
        axes = fig.subplots(4, len(names), squeeze=False)
        for j, n in enumerate(names):
            for c, var in enumerate(CHANNELS):
                ax = axes[c][j]
                im = ax.imshow(diffs[n][c], origin="lower", cmap="RdBu_r", vmin=-lim, vmax=lim)
                ax.set_title(f"{n} {var}", fontsize=8)
                ax.axis("off")
        fig.colorbar(im, ax=axes.ravel().tolist(), shrink=0.6, label="true - pred (normalized)")
        path = out / f"difference_{s:04d}.png"
        fig.savefig(path, dpi=80)
        np.savez(out / f"difference_{s:04d}.npz", **diffs)
        diff_figs.append(path)

    return ReportResult(table_csv, table_txt, mag_figs, diff_figs, n_panels, reports)

