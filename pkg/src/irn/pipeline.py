"""Whole-image rescaling with a trained model: HR <-> (8-bit LR, latent)."""
from __future__ import annotations

import numpy as np

from .imaging import from_float, hwc_to_nchw, modcrop, nchw_to_hwc, to_float
from .invnet import IRNModel, sample_latent
from .tensor import Tensor, no_grad


def downscale_image(model: IRNModel, img_u8: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """HR uint8 (H x W x 3) -> (LR uint8, latent z as 1 x C x h x w float32).

    The image is mod-cropped to a multiple of the scale first.
    """
    x = hwc_to_nchw(to_float(modcrop(img_u8, model.scale)))
    with no_grad():
        y, z = model(x)
    return from_float(nchw_to_hwc(y.data)), z.data


def upscale_image(model: IRNModel, lr_u8: np.ndarray, z: np.ndarray | None = None,
                  alpha: float = 1.0, rng: np.random.Generator | None = None) -> np.ndarray:
    """LR uint8 -> HR uint8. Without ``z`` a fresh N(0, alpha^2) latent is drawn."""
    y = Tensor(hwc_to_nchw(to_float(lr_u8)))
    if z is None:
        z = sample_latent(model.latent_shape(y.shape), alpha, rng, dtype=y.dtype)
    with no_grad():
        x = model.inverse(y, z)
    return from_float(nchw_to_hwc(x.data))


def roundtrip_image(model: IRNModel, img_u8: np.ndarray, rng: np.random.Generator | None = None,
                    alpha: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
    """Downscale to 8-bit LR, then upscale with a sampled latent. Returns (lr, hr)."""
    lr, _ = downscale_image(model, img_u8)
    return lr, upscale_image(model, lr, alpha=alpha, rng=rng)
