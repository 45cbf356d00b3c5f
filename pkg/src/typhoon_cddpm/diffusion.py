"""Conditional DDPM: noise schedule, forward noising, eps-prediction loss and sampling.

Step indices run from 1 to T. ``gamma_bar[t - 1]`` is the cumulative signal
fraction at step t and is what the denoiser receives as its noise level.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .errors import DomainError, NumericalFailure, ScheduleError


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    beta: np.ndarray
    kind: str = "linear"

    def __post_init__(self):
        beta = np.asarray(self.beta, dtype=np.float64)
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "alpha", 1.0 - beta)
        object.__setattr__(self, "gamma_bar", np.cumprod(1.0 - beta))

    @property
    def T(self) -> int:
        return int(self.beta.size)

    def check(self) -> None:
        b, g = self.beta, self.gamma_bar
        if b.ndim != 1 or b.size < 1:
            raise ScheduleError("beta must be a non-empty 1-D array")
        if not np.all((b > 0) & (b < 1)):
            raise ScheduleError("beta must lie strictly inside (0, 1)")
        if np.any(np.diff(b) < 0):
            raise ScheduleError("beta must be non-decreasing")
        if not np.all((g > 0) & (g <= 1)) or np.any(np.diff(g) >= 0):
            raise ScheduleError("gamma_bar must be strictly decreasing within (0, 1]")

    def to_dict(self) -> dict:
        return {"kind": self.kind, "beta": self.beta.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "NoiseSchedule":
        s = cls(np.asarray(d["beta"]), d.get("kind", "linear"))
        s.check()
        return s


def linear_beta_range(T: int) -> tuple[float, float]:
    """(1e-4, 0.02) at T = 1000, scaled by 1000 / T (beta_end capped at 0.999)."""
    scale = 1000.0 / T
    return min(1e-4 * scale, 0.5), min(0.02 * scale, 0.999)


def build_schedule(T: int, kind: str = "linear", beta_start: float = 1e-4,
                   beta_end: float = 0.02, cosine_offset: float = 0.008) -> NoiseSchedule:
    """Linear betas, or the cosine cumulative-signal curve (betas capped at 0.999).

    ``beta_start``/``beta_end`` only apply to the linear kind.
    """
    if T < 1:
        raise DomainError(f"T must be >= 1, got {T}")
    if kind == "linear":
        if not 0 < beta_start <= beta_end < 1:
            raise DomainError("need 0 < beta_start <= beta_end < 1")
        beta = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    elif kind == "cosine":
        s = cosine_offset
        steps = np.arange(T + 1, dtype=np.float64) / T
        f = np.cos((steps + s) / (1 + s) * math.pi / 2) ** 2
        g = f / f[0]
        beta = np.clip(1.0 - g[1:] / g[:-1], 1e-8, 0.999)
    else:
        raise DomainError(f"unknown schedule kind {kind!r}")
    schedule = NoiseSchedule(beta, kind)
    schedule.check()
    return schedule


def _expand(coef, like: torch.Tensor) -> torch.Tensor:
    coef = torch.as_tensor(coef, dtype=like.dtype, device=like.device)
    if coef.ndim == 1 and like.ndim > 1:
        coef = coef.reshape(-1, *([1] * (like.ndim - 1)))
    return coef


def forward_diffuse(y0, eps, gamma_bar_t):
    """``sqrt(g) * y0 + sqrt(1 - g) * eps``; ``g`` may be a scalar or one value per batch item."""
    if y0.shape != eps.shape:
        raise TypeError(f"shape mismatch: y0 {tuple(y0.shape)} vs eps {tuple(eps.shape)}")
    g = np.asarray(gamma_bar_t) if not torch.is_tensor(gamma_bar_t) else gamma_bar_t
    if (g <= 0).any() or (g > 1).any():
        raise DomainError("gamma_bar must lie in (0, 1]")
    if not torch.is_tensor(y0):
        g = np.asarray(g, dtype=np.float64)
        if g.ndim == 1 and np.ndim(y0) > 1:
            g = g.reshape(-1, *([1] * (np.ndim(y0) - 1)))
        return np.sqrt(g) * y0 + np.sqrt(1.0 - g) * eps
    g = _expand(g, y0)
    return torch.sqrt(g) * y0 + torch.sqrt(1.0 - g) * eps


def training_step(model, x: torch.Tensor, y0: torch.Tensor, schedule: NoiseSchedule,
                  generator: torch.Generator | None = None, t: torch.Tensor | None = None) -> torch.Tensor:
    """Noise-prediction loss for one batch.

    Draws t ~ U{1..T} and eps ~ N(0, I) per item (unless ``t`` is given),
    forms y_t, and returns the MSE between ``model(x, y_t, gamma_bar_t)`` and
    eps. The returned tensor carries gradients.
    """
    n = y0.shape[0]
    if t is None:
        t = torch.randint(1, schedule.T + 1, (n,), generator=generator)
    t = torch.as_tensor(t, dtype=torch.long).reshape(-1).expand(n)
    if (t < 1).any() or (t > schedule.T).any():
        raise DomainError("t out of range")
    eps = torch.randn(y0.shape, generator=generator, dtype=y0.dtype)
    gamma = torch.as_tensor(schedule.gamma_bar, dtype=y0.dtype)[t - 1]
    y_t = forward_diffuse(y0, eps, gamma)
    eps_hat = model(x, y_t, gamma)
    loss = torch.mean((eps_hat - eps) ** 2)
    if not torch.isfinite(loss):
        raise NumericalFailure(f"non-finite loss at t={t.tolist()}", step=t.tolist())
    return loss


def reverse_step(model, x: torch.Tensor, y_t: torch.Tensor, t: int, z: torch.Tensor | None,
                 schedule: NoiseSchedule, clip_denoised: bool = False,
                 variance: str = "beta") -> torch.Tensor:
    """One ancestral step y_t -> y_{t-1} with a fixed (not learned) variance.

    The mean is ``(y_t - beta_t / sqrt(1 - gamma_bar_t) * eps_hat) / sqrt(alpha_t)``.
    With ``clip_denoised`` the implied clean estimate is clipped to [0, 1]
    first and the same mean is formed from it; the two agree whenever the
    estimate is already in range. ``variance`` is ``"beta"`` (sigma_t^2 =
    beta_t) or ``"posterior"`` (the forward posterior variance, smaller and
    better suited to short chains). At t = 1 the noise term is dropped
    whatever ``z`` holds.
    """
    if not 1 <= t <= schedule.T:
        raise DomainError(f"t={t} outside [1, {schedule.T}]")
    beta = float(schedule.beta[t - 1])
    alpha = float(schedule.alpha[t - 1])
    gamma = float(schedule.gamma_bar[t - 1])
    g = torch.full((y_t.shape[0],), gamma, dtype=y_t.dtype)
    eps_hat = model(x, y_t, g)
    if not torch.isfinite(eps_hat).all():
        raise NumericalFailure(f"non-finite noise prediction at reverse step t={t}", step=t)
    gamma_prev = float(schedule.gamma_bar[t - 2]) if t > 1 else 1.0
    if variance == "beta":
        var = beta
    elif variance == "posterior":
        var = beta * (1.0 - gamma_prev) / (1.0 - gamma)
    else:
        raise ValueError(f"unknown variance {variance!r}")
    if clip_denoised:
        y0_hat = ((y_t - math.sqrt(1.0 - gamma) * eps_hat) / math.sqrt(gamma)).clamp(0.0, 1.0)
        mean = (math.sqrt(gamma_prev) * beta / (1.0 - gamma)) * y0_hat \
            + (math.sqrt(alpha) * (1.0 - gamma_prev) / (1.0 - gamma)) * y_t
    else:
        mean = (y_t - (beta / math.sqrt(1.0 - gamma)) * eps_hat) / math.sqrt(alpha)
    if t > 1:
        if z is None:
            raise ValueError("z is required for t > 1")
        out = mean + math.sqrt(var) * z
    else:
        out = mean
    if not torch.isfinite(out).all():
        raise NumericalFailure(f"non-finite values at reverse step t={t}", step=t)
    return out


@torch.no_grad()
def sample(model, x: torch.Tensor, schedule: NoiseSchedule, generator: torch.Generator | None = None,
           clip: bool = True, y_T: torch.Tensor | None = None, clip_denoised: bool = True,
           variance: str = "beta") -> torch.Tensor:
    """Draw y_T ~ N(0, I), denoise for t = T..1 conditioned on ``x``, clip to [0, 1]."""
    shape = (x.shape[0], 4, *x.shape[-2:])
    y = torch.randn(shape, generator=generator, dtype=x.dtype) if y_T is None else y_T
    for t in range(schedule.T, 0, -1):
        z = torch.randn(shape, generator=generator, dtype=x.dtype) if t > 1 else None
        y = reverse_step(model, x, y, t, z, schedule, clip_denoised, variance)
    return y.clamp(0.0, 1.0) if clip else y
