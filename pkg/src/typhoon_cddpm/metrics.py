"""Evaluation metrics on normalized grids.

All functions take numpy arrays and compute in float64. FID and the
perceptual distance run on a pluggable feature extractor; the default is a
frozen, fixed-seed random convolutional stack, so their absolute values are
only comparable between runs that share an extractor.

Interpretations fixed here:

* ``kl_div`` compares 64-bin value histograms over [0, 1] of the true grid
  (p) and the predicted grid (q), with 1e-10 added to every bin.
* ``pixel_mismatch`` counts pixels with ``|pred - true| > threshold``; called
  on a stacked test set it returns the count summed over every item.
* ``psnr`` returns 100 dB for identical inputs.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DomainError

VARIABLES = ("u10", "v10", "sp", "t2m")
METRIC_COLUMNS = ("kl_div", "rmse", "mae", "psnr", "ssim", "fid", "lpips")
COLUMN_TITLES = {"kl_div": "KL-Div", "rmse": "RMSE", "mae": "MAE", "psnr": "PSNR",
                 "ssim": "SSIM", "fid": "FID", "lpips": "LPIPS"}
PSNR_CAP = 100.0
KL_SMOOTHING = 1e-10

# Reference values reported for full-scale training; not expected at desk scale.
REFERENCE_CDDPM_MEAN = {"kl_div": 0.003, "rmse": 0.032, "mae": 0.024, "psnr": 32.807,
                        "ssim": 0.929, "fid": 0.032, "lpips": 66.514}
REFERENCE_MISMATCH_MEAN = {"cnn": 143.520, "senet": 150.061, "ddpm": 936.517, "cddpm": 153.329}


def _pair(pred, true):
    pred = np.asarray(pred, dtype=np.float64)
    true = np.asarray(true, dtype=np.float64)
    if pred.shape != true.shape:
        raise TypeError(f"shape mismatch: {pred.shape} vs {true.shape}")
    return pred, true


def rmse(pred, true) -> float:
    pred, true = _pair(pred, true)
    return float(np.sqrt(np.mean((pred - true) ** 2)))


def mae(pred, true) -> float:
    pred, true = _pair(pred, true)
    return float(np.mean(np.abs(pred - true)))


def psnr(pred, true, data_range: float = 1.0) -> float:
    pred, true = _pair(pred, true)
    if data_range <= 0:
        raise DomainError("data_range must be positive")
    mse = np.mean((pred - true) ** 2)
    if mse == 0:
        return PSNR_CAP
    return float(min(PSNR_CAP, 10.0 * np.log10(data_range ** 2 / mse)))


def gaussian_window(size: int = 7, sigma: float = 1.5) -> np.ndarray:
    ax = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(ax ** 2) / (2 * sigma ** 2))
    w = np.outer(g, g)
    return w / w.sum()


def ssim(pred, true, window: int = 7, k1: float = 0.01, k2: float = 0.03,
         data_range: float = 1.0, sigma: float = 1.5) -> float:
    """Mean SSIM over all fully-contained Gaussian-weighted windows."""
    pred, true = _pair(pred, true)
    if pred.ndim != 2:
        raise TypeError("ssim expects a 2-D grid")
    if min(pred.shape) < window:
        raise DomainError(f"grid {pred.shape} smaller than window {window}")
    w = gaussian_window(window, sigma)
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2

    def filt(a):
        return np.einsum("ijkl,kl->ij", sliding_window_view(a, (window, window)), w)

    mu_x, mu_y = filt(pred), filt(true)
    sxx = filt(pred * pred) - mu_x ** 2
    syy = filt(true * true) - mu_y ** 2
    sxy = filt(pred * true) - mu_x * mu_y
    num = (2 * mu_x * mu_y + c1) * (2 * sxy + c2)
    den = (mu_x ** 2 + mu_y ** 2 + c1) * (sxx + syy + c2)
    return float(np.mean(num / den))


def histogram(values, n_bins: int = 64) -> np.ndarray:
    v = np.clip(np.asarray(values, dtype=np.float64).ravel(), 0.0, 1.0)
    counts, _ = np.histogram(v, bins=n_bins, range=(0.0, 1.0))
    return counts.astype(np.float64)


def kl_from_counts(p_counts, q_counts, smoothing: float = KL_SMOOTHING) -> float:
    p = np.asarray(p_counts, dtype=np.float64)
    q = np.asarray(q_counts, dtype=np.float64)
    p = p / p.sum() + smoothing
    q = q / q.sum() + smoothing
    p /= p.sum()
    q /= q.sum()
    return float(max(0.0, np.sum(p * np.log(p / q))))


def kl_div(pred, true, n_bins: int = 64) -> float:
    pred, true = _pair(pred, true)
    return kl_from_counts(histogram(true, n_bins), histogram(pred, n_bins))


def wind_magnitude(u10, v10) -> np.ndarray:
    """Per-pixel wind speed; pass physical (denormalized) components."""
    u, v = _pair(u10, v10)
    return np.hypot(u, v)


def pixel_mismatch(pred, true, threshold: float = 0.05) -> float:
    pred, true = _pair(pred, true)
    return float(np.count_nonzero(np.abs(pred - true) > threshold))


# -------------------------------------------------------- feature extractors

class RandomConvFeatures:
    """Frozen random conv stack used as the default FID / perceptual backbone.

    ``layers(grids)`` returns per-layer activation maps; calling the object
    returns the pooled feature vector (per-channel spatial means of every
    layer) used by :func:`fid`.
    """

    def __init__(self, channels=(8, 16, 32), seed: int = 0):
        gen = torch.Generator().manual_seed(seed)
        self.weights = []
        c_in = 1
        for c in channels:
            std = np.sqrt(2.0 / (c_in * 9))
            self.weights.append(torch.randn(c, c_in, 3, 3, generator=gen, dtype=torch.float64) * std)
            c_in = c

    def layers(self, grids) -> list[np.ndarray]:
        x = torch.as_tensor(np.asarray(grids, dtype=np.float64))
        if x.ndim == 2:
            x = x[None]
        x = x[:, None]
        out = []
        with torch.no_grad():
            for w in self.weights:
                x = F.relu(F.conv2d(x, w, padding=1))
                out.append(x.numpy().copy())
                if x.shape[-1] >= 4:
                    x = F.avg_pool2d(x, 2)
        return out

    def __call__(self, grids) -> np.ndarray:
        return np.concatenate([a.mean(axis=(2, 3)) for a in self.layers(grids)], axis=1)


_DEFAULT_FEATURES = None


def default_features() -> RandomConvFeatures:
    global _DEFAULT_FEATURES
    if _DEFAULT_FEATURES is None:
        _DEFAULT_FEATURES = RandomConvFeatures()
    return _DEFAULT_FEATURES


def _sqrt_psd(m: np.ndarray, floor: float = 1e-10) -> np.ndarray:
    vals, vecs = np.linalg.eigh((m + m.T) / 2)
    vals = np.clip(vals, floor, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def frechet_distance(f1: np.ndarray, f2: np.ndarray) -> float:
    f1 = np.asarray(f1, dtype=np.float64)
    f2 = np.asarray(f2, dtype=np.float64)
    if f1.ndim == 1:
        f1 = f1[:, None]
    if f2.ndim == 1:
        f2 = f2[:, None]
    if len(f1) < 2 or len(f2) < 2:
        raise DomainError("FID needs at least two samples per set")
    mu1, mu2 = f1.mean(0), f2.mean(0)
    s1 = np.atleast_2d(np.cov(f1, rowvar=False))
    s2 = np.atleast_2d(np.cov(f2, rowvar=False))
    r1 = _sqrt_psd(s1)
    cross = np.linalg.eigvalsh(r1 @ s2 @ r1)
    tr_sqrt = np.sum(np.sqrt(np.clip(cross, 0.0, None)))
    d = np.sum((mu1 - mu2) ** 2) + np.trace(s1) + np.trace(s2) - 2.0 * tr_sqrt
    return float(max(d, 0.0))


def fid(pred_set, true_set, features=None) -> float:
    """Frechet distance between Gaussian fits of the two sets' features."""
    features = features or default_features()
    return frechet_distance(features(pred_set), features(true_set))


def perceptual_distance(pred, true, features=None, weights=None) -> float:
    """Squared distance between channel-unit-normalized feature maps, averaged
    over space and summed over channels and layers."""
    pred, true = _pair(pred, true)
    features = features or default_features()
    la, lb = features.layers(pred), features.layers(true)
    weights = weights or [1.0] * len(la)
    total = 0.0
    for w, a, b in zip(weights, la, lb):
        a = a / (np.sqrt(np.sum(a ** 2, axis=1, keepdims=True)) + 1e-10)
        b = b / (np.sqrt(np.sum(b ** 2, axis=1, keepdims=True)) + 1e-10)
        total += w * float(np.mean(np.sum((a - b) ** 2, axis=1)))
    return total


# ------------------------------------------------------------------- reports

@dataclass
class MetricsReport:
    """Per-variable metric rows; ``mean`` is their arithmetic mean."""

    rows: dict = field(default_factory=dict)

    @property
    def mean(self) -> dict:
        return {m: float(np.mean([self.rows[v][m] for v in VARIABLES])) for m in METRIC_COLUMNS}

    def all_rows(self) -> dict:
        return {**{v: self.rows[v] for v in VARIABLES}, "Mean": self.mean}

    def is_finite(self) -> bool:
        return all(np.isfinite(x) for row in self.all_rows().values() for x in row.values())

    def to_csv(self, model: str = "", delimiter: str = ",") -> str:
        buf = io.StringIO()
        w = csv.writer(buf, delimiter=delimiter, lineterminator="\n")
        w.writerow(["model", "variable"] + [COLUMN_TITLES[m] for m in METRIC_COLUMNS])
        for name, row in self.all_rows().items():
            w.writerow([model, name] + [repr(float(row[m])) for m in METRIC_COLUMNS])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str, delimiter: str = ",") -> "MetricsReport":
        reader = csv.reader(io.StringIO(text), delimiter=delimiter)
        header = next(reader)
        idx = {COLUMN_TITLES[m]: m for m in METRIC_COLUMNS}
        rows = {}
        for line in reader:
            if line[1] in VARIABLES:
                rows[line[1]] = {idx[h]: float(x) for h, x in zip(header[2:], line[2:])}
        return cls(rows)

    def render(self, model: str = "") -> str:
        head = f"{'Model':<8}{'Variable':<10}" + "".join(f"{COLUMN_TITLES[m]:>10}" for m in METRIC_COLUMNS)
        lines = [head]
        for name, row in self.all_rows().items():
            lines.append(f"{model:<8}{name:<10}" + "".join(f"{row[m]:>10.3f}" for m in METRIC_COLUMNS))
        return "\n".join(lines)


@dataclass
class MismatchReport:
    values: dict = field(default_factory=dict)

    @property
    def mean(self) -> float:
        return float(np.mean([self.values[v] for v in VARIABLES]))

    def to_csv(self, model: str = "") -> str:
        return ("model," + ",".join(VARIABLES) + ",Mean\n" + f"{model},"
                + ",".join(repr(float(self.values[v])) for v in VARIABLES) + f",{self.mean!r}\n")


def evaluate_arrays(pred: np.ndarray, true: np.ndarray, features=None,
                    mismatch_threshold: float = 0.05) -> tuple[MetricsReport, MismatchReport]:
    """Metric tables for stacked normalized predictions ``(N, 4, H, W)``.

    Pairwise metrics are averaged over the N items; FID is computed once per
    variable over the whole set; pixel mismatch is summed over the set.
    """
    pred, true = _pair(pred, true)
    if pred.ndim != 4 or pred.shape[1] != 4:
        raise TypeError(f"expected (N, 4, H, W), got {pred.shape}")
    if pred.shape[0] == 0:
        raise ValueError("nothing to evaluate")
    features = features or default_features()
    rows, mismatch = {}, {}
    for c, var in enumerate(VARIABLES):
        p, t = pred[:, c], true[:, c]
        n = len(p)
        rows[var] = {
            "kl_div": float(np.mean([kl_div(p[i], t[i]) for i in range(n)])),
            "rmse": float(np.mean([rmse(p[i], t[i]) for i in range(n)])),
            "mae": float(np.mean([mae(p[i], t[i]) for i in range(n)])),
            "psnr": float(np.mean([psnr(p[i], t[i]) for i in range(n)])),
            "ssim": float(np.mean([ssim(p[i], t[i]) for i in range(n)])),
            "fid": fid(p, t, features) if n >= 2 else float("nan"),
            "lpips": float(np.mean([perceptual_distance(p[i], t[i], features) for i in range(n)])),
        }
        mismatch[var] = pixel_mismatch(p, t, mismatch_threshold)
    return MetricsReport(rows), MismatchReport(mismatch)
