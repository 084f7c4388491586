"""Training objectives for both stages, plus the discriminator network."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .invnet import IRNModel, quantize_ste, sample_latent
from .nn import Conv2d, Linear, Module
from .tensor import (
    ShapeError,
    Tensor,
    add,
    as_tensor,
    flatten,
    leaky_relu,
    log_sigmoid,
    mean,
    mean_abs,
    mean_square,
    mul,
    neg,
    sub,
)

HALF_LOG_2PI = 0.5 * math.log(2 * math.pi)
_METRICS = ("l1", "l2")


@dataclass
class LossWeights:
    recon: float = 1.0
    guide: float = 16.0
    distr: float = 1.0
    percp: float = 0.0
    guide_metric: str = "l2"
    recon_metric: str = "l1"

    def __post_init__(self):
        for name in ("recon", "guide", "distr", "percp"):
            if getattr(self, name) < 0:
                raise ValueError(f"loss weight {name} must be non-negative")
        if self.percp != 0:
            raise ValueError("the perceptual term is not implemented; percp must be 0")
        self.guide_metric = self.guide_metric.lower()
        self.recon_metric = self.recon_metric.lower()
        if self.guide_metric not in _METRICS or self.recon_metric not in _METRICS:
            raise ValueError(f"loss metrics must be one of {_METRICS}")

    @classmethod
    def pretrain(cls) -> "LossWeights":
        return cls(recon=1.0, guide=16.0, distr=1.0)

    @classmethod
    def finetune(cls) -> "LossWeights":
        return cls(recon=0.01, guide=16.0, distr=1.0)

    def to_dict(self) -> dict:
        return asdict(self)


def _difference(a: Tensor, b, metric: str, what: str) -> Tensor:
    b = as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"{what}: shape mismatch {a.shape} vs {b.shape}")
    diff = sub(a, b)
    if metric == "l1":
        return mean_abs(diff)
    if metric == "l2":
        return mean_square(diff)
    raise ValueError(f"unknown metric {metric!r}")


def lr_guide_loss(y: Tensor, y_guide, metric: str = "l2") -> Tensor:
    return _difference(y, y_guide, metric, "lr_guide_loss")


def hr_recon_loss(x, x_hat: Tensor, metric: str = "l1") -> Tensor:
    return _difference(x_hat, x, metric, "hr_recon_loss")


def latent_ce_loss(z: Tensor) -> Tensor:
    """Mean per-element negative log-density of z under N(0, 1)."""
    return add(mul(mean_square(z), 0.5), HALF_LOG_2PI)


class Discriminator(Module):
    """Eight 3x3 convs (stride 2 on every second one) and two dense layers."""

    BASE_WIDTHS = (64, 64, 128, 128, 256, 256, 512, 512)

    def __init__(self, image_size: int, in_channels: int = 3, width_mult: float = 0.25,
                 hidden: int = 100, slope: float = 0.2, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.slope = slope
        self.image_size = image_size
        widths = [max(1, int(round(w * width_mult))) for w in self.BASE_WIDTHS]
        self.convs = []
        size = image_size
        prev = in_channels
        for i, width in enumerate(widths):
            stride = 2 if i % 2 else 1
            self.convs.append(Conv2d(prev, width, 3, stride=stride, padding=1, rng=rng))
            size = (size - 1) // stride + 1
            prev = width
        self.fc1 = Linear(prev * size * size, hidden, rng=rng)
        self.fc2 = Linear(hidden, 1, rng=rng)

    def forward(self, x: Tensor) -> Tensor:
        x = as_tensor(x)
        if x.shape[0] == 0:
            raise ShapeError("discriminator got an empty batch")
        if x.shape[2:] != (self.image_size, self.image_size):
            raise ShapeError(f"discriminator built for {self.image_size}px inputs, got {x.shape}")
        h = x
        for conv in self.convs:
            h = leaky_relu(conv(h), self.slope)
        h = leaky_relu(self.fc1(flatten(h)), self.slope)
        return self.fc2(h)


def discriminator_loss(disc, real, fake) -> Tensor:
    """-mean log sigma(T(real)) - mean log(1 - sigma(T(fake))); fake is detached."""
    real, fake = as_tensor(real), as_tensor(fake)
    if real.shape[0] == 0 or fake.shape[0] == 0:
        raise ShapeError("discriminator_loss needs non-empty batches")
    real_term = mean(log_sigmoid(disc(real)))
    fake_term = mean(log_sigmoid(neg(disc(fake.detach()))))
    return neg(add(real_term, fake_term))


def generator_js_loss(disc, fake: Tensor) -> Tensor:
    """Non-saturating generator objective -mean log sigma(T(fake))."""
    fake = as_tensor(fake)
    if fake.shape[0] == 0:
        raise ShapeError("generator_js_loss needs a non-empty batch")
    if isinstance(disc, Module):
        with disc.frozen():
            logits = disc(fake)
    else:
        logits = disc(fake)
    return neg(mean(log_sigmoid(logits)))


@dataclass
class LossBreakdown:
    total: Tensor
    components: dict = field(default_factory=dict)
    y: Tensor | None = None
    z: Tensor | None = None
    fake: Tensor | None = None

    def weighted_sum(self, weights: LossWeights) -> float:
        c = self.components
        return weights.recon * c["recon"] + weights.guide * c["guide"] + weights.distr * c["distr"]


def _rescale(model: IRNModel, hr, latent, rng, quantize: bool, alpha: float = 1.0):
    y, z = model(hr)
    y_stored = quantize_ste(y) if quantize else y
    if latent is None:
        latent = sample_latent(z.shape, alpha, rng, dtype=y.dtype)
    x_hat = model.inverse(y_stored, latent)
    return y, z, x_hat


def _weighted(weights: LossWeights, recon: Tensor, guide: Tensor, distr: Tensor) -> Tensor:
    total = add(add(mul(recon, weights.recon), mul(guide, weights.guide)), mul(distr, weights.distr))
    return total


def total_loss_pretrain(hr, guide, model: IRNModel, weights: LossWeights,
                        rng: np.random.Generator | None = None, latent=None,
                        quantize: bool = True) -> LossBreakdown:
    """Reconstruction + LR guidance + latent cross-entropy.

    ``latent`` overrides the single random z draw; ``quantize=False`` swaps the
    8-bit rounding for the identity (the smooth surrogate used by gradient checks).
    """
    hr = as_tensor(hr)
    y, z, x_hat = _rescale(model, hr, latent, rng, quantize)
    recon = hr_recon_loss(hr, x_hat, weights.recon_metric)
    guide_term = lr_guide_loss(y, guide, weights.guide_metric)
    distr = latent_ce_loss(z)
    total = _weighted(weights, recon, guide_term, distr)
    parts = {"recon": recon.item(), "guide": guide_term.item(), "distr": distr.item()}
    return LossBreakdown(total, parts, y=y, z=z, fake=x_hat)


def total_loss_finetune(hr, guide, model: IRNModel, disc, weights: LossWeights,
                        rng: np.random.Generator | None = None, latent=None,
                        quantize: bool = True) -> LossBreakdown:
    """Reconstruction + LR guidance + adversarial JS matching on reconstructions."""
    hr = as_tensor(hr)
    y, z, x_hat = _rescale(model, hr, latent, rng, quantize)
    recon = hr_recon_loss(hr, x_hat, weights.recon_metric)
    guide_term = lr_guide_loss(y, guide, weights.guide_metric)
    distr = generator_js_loss(disc, x_hat)
    total = _weighted(weights, recon, guide_term, distr)
    parts = {"recon": recon.item(), "guide": guide_term.item(), "distr": distr.item()}
    return LossBreakdown(total, parts, y=y, z=z, fake=x_hat)
