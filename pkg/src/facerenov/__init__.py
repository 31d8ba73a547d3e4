"""Blind face restoration with content-adaptive suppression and guided replenishment."""

__version__ = "0.1.0"

from ._backend import BACKEND, available_backends
from .core import derive_seed, from_model, load_image, make_rng, resize_bicubic, save_image, to_model
from .degrade import DegradationPipeline, DegradationSpec, Kind, compose_full_degradation, task_pipeline
from .discriminator import MultiScaleDiscriminator
from .generator import Generator
from .losses import LossWeights, PerceptualExtractor
from .metrics import MetricReport, ms_ssim, niqe_fit, niqe_score, psnr, ssim
from .suppress import SuppressionConv, SuppressionEncoder

__all__ = [
    "__version__",
    "BACKEND",
    "available_backends",
    "derive_seed",
    "make_rng",
    "load_image",
    "save_image",
    "resize_bicubic",
    "to_model",
    "from_model",
    "Kind",
    "DegradationSpec",
    "DegradationPipeline",
    "compose_full_degradation",
    "task_pipeline",
    "SuppressionConv",
    "SuppressionEncoder",
    "Generator",
    "MultiScaleDiscriminator",
    "LossWeights",
    "PerceptualExtractor",
    "psnr",
    "ssim",
    "ms_ssim",
    "niqe_fit",
    "niqe_score",
    "MetricReport",
]
