"""Invertible image rescaling: a bijective downscaler with a Gaussian latent, on numpy."""
from .imaging import bicubic_resize, load_png, save_png
from .invnet import IRNModel, haar_forward, haar_inverse, quantize_ste, sample_latent
from .losses import Discriminator, LossWeights
from .metrics import MetricConfig, evaluate_pair_set, psnr, ssim
from .pipeline import downscale_image, roundtrip_image, upscale_image
from .tensor import Tensor, backward, grad_check, no_grad
from .training import TrainConfig, Trainer, load_checkpoint, save_checkpoint

__all__ = [
    "Discriminator", "IRNModel", "LossWeights", "MetricConfig", "Tensor", "TrainConfig", "Trainer",
    "backward", "bicubic_resize", "downscale_image", "evaluate_pair_set", "grad_check",
    "haar_forward", "haar_inverse", "load_checkpoint", "load_png", "no_grad", "psnr",
    "quantize_ste", "roundtrip_image", "sample_latent", "save_checkpoint", "save_png", "ssim",
    "upscale_image",
]
__version__ = "0.1.0"
