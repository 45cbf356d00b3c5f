"""
Diffusion walkthrough
=====================

The forward process blends a clean field with Gaussian noise according to the
cumulative schedule; the reverse process walks back one step at a time using a
noise prediction. With a predictor that knows the true noise the chain lands
exactly on the clean field, which is a handy sanity check for the algebra.

Run with ``python3 demos/02_diffusion_walkthrough.py [out_dir]``.
"""

import sys
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np
import torch

from typhoon_cddpm import diffusion as df
from typhoon_cddpm import ingestion as ing
from typhoon_cddpm import models as m
from typhoon_cddpm import pipeline as pl

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_output") / "diffusion"
out.mkdir(parents=True, exist_ok=True)

# %% schedules
fig, ax = plt.subplots(figsize=(5, 3.5))
for kind in ("linear", "cosine"):
    s = df.build_schedule(1000, kind)
    ax.plot(np.arange(1, 1001), s.gamma_bar, label=kind)
ax.set_xlabel("t")
ax.set_ylabel("cumulative signal fraction")
ax.legend()
fig.tight_layout()
fig.savefig(out / "schedules.png", dpi=100)
plt.close(fig)

# %% forward noising of one normalized wind field
ds = pl.prepare_dataset(ing.synth_dataset(20, 32, seed=0), grid_size=32, seed=0)
x, y0 = (torch.from_numpy(a) for a in pl.pairs_to_arrays(ds.normalized("train")[:1]))
schedule = df.build_schedule(50)
eps = torch.randn(y0.shape, generator=torch.Generator().manual_seed(0), dtype=y0.dtype)

steps = [1, 10, 25, 40, 50]
fig, axes = plt.subplots(1, len(steps), figsize=(12, 2.6))
for ax, t in zip(axes, steps):
    y_t = df.forward_diffuse(y0, eps, schedule.gamma_bar[t - 1])
    ax.imshow(y_t[0, 0], origin="lower", cmap="coolwarm")
    ax.set_title(f"t={t}")
    ax.set_axis_off()
fig.tight_layout()
fig.savefig(out / "forward.png", dpi=100)
plt.close(fig)


# %% reverse chain with a noise oracle recovers the clean field
class Oracle(torch.nn.Module):
    def forward(self, x, y_t, g):
        g = g.reshape(-1, 1, 1, 1).to(y_t.dtype)
        return (y_t - g.sqrt() * y0) / (1 - g).sqrt()


recovered = df.sample(Oracle(), x, schedule, torch.Generator().manual_seed(1))
print(f"oracle chain max error: {(recovered - y0).abs().max().item():.2e}")

# %% an untrained denoiser, by contrast, produces unstructured output
torch.manual_seed(0)
net = m.build_model("cddpm", 32, base_width=16, depth=3).eval()
with torch.no_grad():
    guess = df.sample(net, x, schedule, torch.Generator().manual_seed(1))
print(f"untrained chain RMSE vs truth: {(guess - y0).pow(2).mean().sqrt().item():.3f}")
