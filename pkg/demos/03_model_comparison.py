"""
Model comparison at toy scale
=============================

Train the CNN and SENet baselines and the conditional diffusion model on the
same synthetic split with the same budget, then build the comparison table,
wind-magnitude panels and difference maps. At this scale the ranking is not
expected to match what a full-size run produces; the point is the harness.

Run with ``python3 demos/03_model_comparison.py [out_dir]`` (a few minutes on CPU).
"""

import sys
from pathlib import Path

from typhoon_cddpm import ingestion as ing
from typhoon_cddpm import pipeline as pl
from typhoon_cddpm import runner as R

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_output") / "comparison"
ds = pl.prepare_dataset(ing.synth_dataset(200, 32, seed=0), grid_size=32, seed=0)

budget = R.OptimizerConfig(lr=1e-3, batch_size=2, epochs=5)
params = {"cnn": {}, "senet": {}, "cddpm": {"base_width": 32, "depth": 3}}
for kind, model_params in params.items():
    cfg = R.ExperimentConfig(model=kind, grid_size=32, output_dir=str(out / kind),
                             schedule=R.ScheduleConfig(T=50), optimizer=budget,
                             model_params=model_params)
    manifest, report, mismatch = R.run_experiment(cfg, ds)
    print(f"{kind:>6s}: probe loss {manifest.probe_curve[0]:.4f} -> {manifest.probe_curve[-1]:.4f}, "
          f"mean PSNR {report.mean['psnr']:.2f} dB, mismatched pixels {mismatch.mean:.0f}")

res = R.report([out / k for k in params], out / "report", samples=(0, 1, 2))
print(res.table_txt.read_text())
print("figures:", [p.name for p in res.magnitude_figures + res.difference_figures])
