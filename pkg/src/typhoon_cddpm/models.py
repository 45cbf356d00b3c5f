"""Noise-prediction U-Net and the CNN / SENet baselines."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import DomainError

N_TARGETS = 4
MODEL_KINDS = ("cnn", "senet", "cddpm")


@dataclass(frozen=True)
class DenoiserSpec:
    grid_size: int = 64
    base_width: int = 32
    depth: int = 3
    gamma_embed_dim: int = 64
    in_channels: int = 5
    out_channels: int = 4

    def __post_init__(self):
        if self.in_channels != 5 or self.out_channels != 4:
            raise ValueError("the denoiser maps 1 condition + 4 noisy channels to 4 channels")
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if self.grid_size % 2 ** (self.depth - 1):
            raise ValueError(f"grid_size {self.grid_size} not divisible by 2**(depth-1)")

    def widths(self) -> list[int]:
        return [self.base_width * min(2 ** level, 4) for level in range(self.depth)]


@dataclass(frozen=True)
class BaselineSpec:
    kind: str = "cnn"
    grid_size: int = 64
    width: int = 32
    n_residual_blocks: int = 4
    n_upsample_layers: int = 4
    se_reduction: int = 16

    def __post_init__(self):
        if self.kind not in ("cnn", "senet"):
            raise ValueError(f"baseline kind must be cnn or senet, got {self.kind!r}")
        if self.n_residual_blocks != 4 or self.n_upsample_layers != 4:
            raise ValueError("baselines use exactly four residual blocks and four upsample layers")
        if self.grid_size % 2 ** self.n_upsample_layers:
            raise ValueError(f"grid_size must be a multiple of {2 ** self.n_upsample_layers}")

    @property
    def input_size(self) -> int:
        return self.grid_size // 2 ** self.n_upsample_layers


def replicate_channels(img: torch.Tensor, n: int = 4) -> torch.Tensor:
    """Stack ``n`` copies of a single-channel image along the channel axis.

    Accepts ``(1, H, W)`` or ``(B, 1, H, W)``.
    """
    if img.ndim not in (3, 4) or img.shape[-3] != 1:
        raise TypeError(f"expected a single-channel image, got shape {tuple(img.shape)}")
    reps = [1] * img.ndim
    reps[-3] = n
    return img.repeat(*reps)


# ----------------------------------------------------------------- baselines

class SEBlock(nn.Module):
    """Squeeze-and-excitation channel gate.

    Setting ``force_open`` replaces the gate by ones, turning the block into
    an identity (used to compare SENet with the plain CNN).
    """

    def __init__(self, channels: int, reduction: int = 16):
        super().__init__()
        hidden = max(1, channels // reduction)
        self.squeeze = nn.AdaptiveAvgPool2d(1)
        self.excitation = nn.Sequential(
            nn.Conv2d(channels, hidden, 1),
            nn.ReLU(inplace=True),
            nn.Conv2d(hidden, channels, 1),
            nn.Sigmoid(),
        )
        self.force_open = False
        self.last_gate = None

    def forward(self, x):
        if self.force_open:
            return x
        gate = self.excitation(self.squeeze(x))
        self.last_gate = gate.detach()
        return x * gate


class ResidualBlock(nn.Module):
    def __init__(self, channels: int, se_reduction: int | None = None):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(channels, channels, 3, padding=1, bias=False),
            nn.BatchNorm2d(channels),
            nn.ReLU(inplace=True),
            nn.Conv2d(channels, channels, 3, padding=1, bias=False),
            nn.BatchNorm2d(channels),
        )
        self.se = SEBlock(channels, se_reduction) if se_reduction else None

    def forward(self, x):
        h = self.body(x)
        if self.se is not None:
            h = self.se(h)
        return F.relu(h + x)


class BaselineNet(nn.Module):
    """Replicate -> stem -> 4 residual blocks -> 4 x2 upsample layers -> 4-channel head.

    Input is the satellite image at ``grid_size / 16``; output is
    ``(B, 4, grid_size, grid_size)``.
    """

    def __init__(self, spec: BaselineSpec):
        super().__init__()
        self.spec = spec
        w = spec.width
        se = spec.se_reduction if spec.kind == "senet" else None
        self.stem = nn.Sequential(
            nn.Conv2d(N_TARGETS, w, 3, padding=1, bias=False),
            nn.BatchNorm2d(w),
            nn.ReLU(inplace=True),
        )
        self.blocks = nn.ModuleList(ResidualBlock(w, se) for _ in range(spec.n_residual_blocks))
        self.upsample = nn.ModuleList(
            nn.Sequential(
                nn.Upsample(scale_factor=2, mode="bilinear", align_corners=False),
                nn.Conv2d(w, w, 3, padding=1, bias=False),
                nn.BatchNorm2d(w),
                nn.ReLU(inplace=True),
            )
            for _ in range(spec.n_upsample_layers)
        )
        self.head = nn.Conv2d(w, N_TARGETS, 3, padding=1)

    def prepare_input(self, condition: torch.Tensor) -> torch.Tensor:
        """Area-downsample a full-resolution condition to the baseline input size."""
        return F.adaptive_avg_pool2d(condition, self.spec.input_size)

    def forward(self, img: torch.Tensor) -> torch.Tensor:
        if img.ndim != 4:
            raise TypeError(f"expected (B, 1, H, W), got {tuple(img.shape)}")
        if img.shape[-1] * 2 ** self.spec.n_upsample_layers != self.spec.grid_size or \
                img.shape[-2] != img.shape[-1]:
            raise ValueError(
                f"input {tuple(img.shape[-2:])} does not reach grid {self.spec.grid_size} "
                f"after {self.spec.n_upsample_layers} doublings")
        h = self.stem(replicate_channels(img, N_TARGETS))
        for block in self.blocks:
            h = block(h)
        for up in self.upsample:
            h = up(h)
        return self.head(h)


def cnn_forward(model: BaselineNet, img: torch.Tensor) -> torch.Tensor:
    return model(img)


def senet_forward(model: BaselineNet, img: torch.Tensor) -> torch.Tensor:
    if model.spec.kind != "senet":
        raise TypeError("senet_forward needs an SENet baseline")
    return model(img)


# ------------------------------------------------------------------ denoiser

def gamma_embedding(gamma_bar: torch.Tensor, dim: int, scale: float = 50.0) -> torch.Tensor:
    """Sinusoidal features of the log signal-to-noise ratio log(g / (1 - g)).

    The log ratio separates the tiny noise levels near the end of the chain
    that a linear function of g would squash together.
    """
    g = gamma_bar.double().clamp(1e-12, 1.0 - 1e-9)
    log_snr = torch.log(g) - torch.log1p(-g)
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    args = scale * log_snr[:, None] * freqs[None]
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=1).to(gamma_bar.dtype)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


def _norm(ch: int) -> nn.GroupNorm:
    groups = math.gcd(ch, 8)
    return nn.GroupNorm(groups, ch)


class EmbResBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, emb_dim: int):
        super().__init__()
        self.norm1 = _norm(in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.emb = nn.Linear(emb_dim, out_ch)
        self.norm2 = _norm(out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x, emb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.emb(emb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class ConditionalUNet(nn.Module):
    """Predicts the noise in ``y_t`` from ``concat(x, y_t)`` and the noise level."""

    def __init__(self, spec: DenoiserSpec):
        super().__init__()
        self.spec = spec
        widths = spec.widths()
        e = spec.gamma_embed_dim
        self.embed = nn.Sequential(nn.Linear(e, e), nn.SiLU(), nn.Linear(e, e))
        self.inc = nn.Conv2d(spec.in_channels, widths[0], 3, padding=1)

        self.down = nn.ModuleList()
        self.pool = nn.ModuleList()
        prev = widths[0]
        for level, w in enumerate(widths):
            self.down.append(EmbResBlock(prev, w, e))
            last = level == len(widths) - 1
            self.pool.append(nn.Identity() if last else nn.Conv2d(w, w, 3, stride=2, padding=1))
            prev = w
        self.mid = EmbResBlock(prev, prev, e)

        self.up = nn.ModuleList()
        self.unpool = nn.ModuleList()
        for level in reversed(range(len(widths))):
            w = widths[level]
            self.up.append(EmbResBlock(prev + w, w, e))
            self.unpool.append(nn.Identity() if level == 0 else nn.Upsample(scale_factor=2, mode="nearest"))
            prev = w
        self.out = nn.Sequential(_norm(prev), nn.SiLU(), nn.Conv2d(prev, spec.out_channels, 3, padding=1))

    def forward(self, x: torch.Tensor, y_t: torch.Tensor, gamma_bar) -> torch.Tensor:
        gamma_bar = torch.as_tensor(gamma_bar, dtype=y_t.dtype).reshape(-1)
        if gamma_bar.numel() == 1:
            gamma_bar = gamma_bar.expand(y_t.shape[0])
        if (gamma_bar <= 0).any() or (gamma_bar > 1).any():
            raise DomainError("gamma_bar must lie in (0, 1]")
        if x.shape[1] != 1 or y_t.shape[1] != 4 or x.shape[-2:] != y_t.shape[-2:]:
            raise ValueError(f"bad shapes: x {tuple(x.shape)}, y_t {tuple(y_t.shape)}")
        emb = self.embed(gamma_embedding(gamma_bar, self.spec.gamma_embed_dim))
        h = self.inc(torch.cat([x, y_t], dim=1))
        skips = []
        for block, pool in zip(self.down, self.pool):
            h = block(h, emb)
            skips.append(h)
            h = pool(h)
        h = self.mid(h, emb)
        for block, unpool in zip(self.up, self.unpool):
            h = block(torch.cat([h, skips.pop()], dim=1), emb)
            h = unpool(h)
        return self.out(h)


def denoiser_forward(model: ConditionalUNet, x, y_t, gamma_bar):
    return model(x, y_t, gamma_bar)


# ------------------------------------------------------------------ registry

def build_model(kind: str, grid_size: int = 64, **kwargs) -> nn.Module:
    if kind == "cddpm":
        return ConditionalUNet(DenoiserSpec(grid_size=grid_size, **kwargs))
    if kind in ("cnn", "senet"):
        return BaselineNet(BaselineSpec(kind=kind, grid_size=grid_size, **kwargs))
    raise ValueError(f"unknown model kind {kind!r}; expected one of {MODEL_KINDS}")


def model_kind(model: nn.Module) -> str:
    return "cddpm" if isinstance(model, ConditionalUNet) else model.spec.kind


def spec_dict(model: nn.Module) -> dict:
    d = asdict(model.spec)
    d.pop("kind", None)
    d.pop("in_channels", None)
    d.pop("out_channels", None)
    return d


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())
