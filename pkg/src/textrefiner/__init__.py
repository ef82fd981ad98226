"""Refine class text embeddings with a local cache of visual-token attributes."""

from .cache import AssignmentResult, LocalCache, init_cache
from .dataio import EmbeddingBundle, SynthSpec, generate, load_bundle, save_bundle, split_views
from .evalkit import B2NReport, BenchReport, accuracy, b2n_eval, bench, harmonic_mean, sweep
from .numkit import DiffValue, grad_check
from .objective import LossBreakdown, LossConfig, predict
from .refiner import RefinerParams, align, aggregate, init_params, refine
from .training import TrainConfig, TrainState, fit, load_checkpoint, save_checkpoint, train_step

__all__ = [
    "AssignmentResult", "LocalCache", "init_cache",
    "EmbeddingBundle", "SynthSpec", "generate", "load_bundle", "save_bundle", "split_views",
    "B2NReport", "BenchReport", "accuracy", "b2n_eval", "bench", "harmonic_mean", "sweep",
    "DiffValue", "grad_check", "LossBreakdown", "LossConfig", "predict",
    "RefinerParams", "align", "aggregate", "init_params", "refine",
    "TrainConfig", "TrainState", "fit", "load_checkpoint", "save_checkpoint", "train_step",
]
