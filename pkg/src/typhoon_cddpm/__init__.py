"""Satellite-to-reanalysis translation with a conditional DDPM and CNN/SENet baselines."""

__version__ = "0.1.0"

from .diffusion import NoiseSchedule, build_schedule, forward_diffuse, reverse_step, sample, training_step
from .ingestion import GeoWindow, RawRecord, read_digital_typhoon, read_era5, synth_dataset, write_fixture
from .metrics import MetricsReport, MismatchReport, evaluate_arrays
from .models import BaselineNet, BaselineSpec, ConditionalUNet, DenoiserSpec, build_model, replicate_channels
from .pipeline import AugmentConfig, FieldGrid, NormStats, SamplePair, prepare_dataset

__all__ = [
    "AugmentConfig", "BaselineNet", "BaselineSpec", "ConditionalUNet", "DenoiserSpec", "FieldGrid",
    "GeoWindow", "MetricsReport", "MismatchReport", "NoiseSchedule", "NormStats", "RawRecord",
    "SamplePair", "build_model", "build_schedule", "evaluate_arrays", "forward_diffuse",
    "prepare_dataset", "read_digital_typhoon", "read_era5", "replicate_channels", "reverse_step",
    "sample", "synth_dataset", "training_step", "write_fixture",
]
