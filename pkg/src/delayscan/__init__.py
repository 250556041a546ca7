"""Conditional diffusion for predicting delayed PET scans from early scans and the delay time."""
from .diffusion import (NoiseSchedule, PairedBatch, PairedSample, build_schedule, predict, q_sample, q_step,
                        sample_step, training_loss)
from .denoiser import DenoiserConfig, HybridDenoiser, load_weights, save_weights
from .estimator import DelayedScanDiffusion
from .exceptions import (ConfigError, DelayScanError, DivergenceError, GradCheckError, NumericError,
                         PhantomSpecError, SampleSizeError, ScheduleError, ShapeError, StepIndexError,
                         TrainingError)
from .metrics import frechet_distance, frechet_feature_distance, mse, psnr, ssim
from .numerics import RngStream, grad_check, load_grid, save_grid
from .phantom import PhantomSpec, generate_dataset, load_dataset, save_dataset
from .trainer import TrainConfig, ablate, evaluate, train

__version__ = "0.1.0"

__all__ = [
    "DelayedScanDiffusion", "DenoiserConfig", "HybridDenoiser", "NoiseSchedule", "PairedBatch", "PairedSample",
    "PhantomSpec", "RngStream", "TrainConfig", "ablate", "build_schedule", "evaluate", "frechet_distance",
    "frechet_feature_distance", "generate_dataset", "grad_check", "load_dataset", "load_grid", "load_weights",
    "mse", "predict", "psnr", "q_sample", "q_step", "sample_step", "save_dataset", "save_grid", "save_weights",
    "ssim", "train", "training_loss",
    "ConfigError", "DelayScanError", "DivergenceError", "GradCheckError", "NumericError", "PhantomSpecError",
    "SampleSizeError", "ScheduleError", "ShapeError", "StepIndexError", "TrainingError",
]
