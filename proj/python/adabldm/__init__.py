"""Trimap-controlled latent diffusion defect synthesis with per-sample decoder adaptation.

The heavy lifting lives in the compiled ``_core`` module; this package re-exports it.
"""

from ._core import (
    DegenerateForegroundError,
    Error,
    FitError,
    Model,
    NoiseSchedule,
    ParameterError,
    PreconditionError,
    StateError,
    UndefinedMetricError,
    UsageError,
    build_trimap,
    config_hash,
    dilate_downsample,
    estimate_foreground,
    evaluate,
    load_config,
    make_toy_benchmark,
    plan_timesteps,
    run,
    split_trimap,
    synth_defect_mask,
    threshold_sweep,
)

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
