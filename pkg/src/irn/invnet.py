"""The invertible rescaling network.

A scale-``2**m`` model is ``m`` downscaling modules. Each module applies an
orthonormal Haar transform and then a stack of coupling blocks that treat the
first three channels (the low-pass planes of the image-derived channels) as
one branch and everything else as the other. After the last module the first
three channels are the LR image and the rest is the latent.
"""
from __future__ import annotations

import numpy as np

from .nn import Conv2d, Module
from .tensor import (
    ShapeError,
    Tensor,
    add,
    as_tensor,
    channel_concat,
    channel_split,
    custom_op,
    exp,
    get_default_dtype,
    leaky_relu,
    mul,
    neg,
    sigmoid,
    sub,
)

IMAGE_CHANNELS = 3


def _haar_fwd(v: np.ndarray) -> np.ndarray:
    a = v[:, :, 0::2, 0::2]
    b = v[:, :, 0::2, 1::2]
    c = v[:, :, 1::2, 0::2]
    d = v[:, :, 1::2, 1::2]
    half = v.dtype.type(0.5)
    return np.concatenate([(a + b + c + d) * half,
                           (a - b + c - d) * half,
                           (a + b - c - d) * half,
                           (a - b - c + d) * half], axis=1)


def _haar_inv(v: np.ndarray) -> np.ndarray:
    n, c4, h, w = v.shape
    c = c4 // 4
    ll, lh, hl, hh = v[:, :c], v[:, c:2 * c], v[:, 2 * c:3 * c], v[:, 3 * c:]
    half = v.dtype.type(0.5)
    out = np.empty((n, c, 2 * h, 2 * w), dtype=v.dtype)
    out[:, :, 0::2, 0::2] = (ll + lh + hl + hh) * half
    out[:, :, 0::2, 1::2] = (ll - lh + hl - hh) * half
    out[:, :, 1::2, 0::2] = (ll + lh - hl - hh) * half
    out[:, :, 1::2, 1::2] = (ll - lh - hl + hh) * half
    return out


def haar_forward(x: Tensor) -> Tensor:
    """N x C x H x W -> N x 4C x H/2 x W/2, grouped as [LL | LH | HL | HH]."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"haar_forward expects NCHW, got shape {x.shape}")
    if x.shape[2] % 2 or x.shape[3] % 2:
        raise ShapeError(f"haar_forward needs even H and W, got {x.shape[2]}x{x.shape[3]}")
    # the transform is symmetric orthonormal, so its adjoint is its inverse
    return custom_op(_haar_fwd(x.data), (x,), lambda g: (_haar_inv(g),), "haar_forward")


def haar_inverse(x: Tensor) -> Tensor:
    x = as_tensor(x)
    if x.ndim != 4 or x.shape[1] % 4:
        raise ShapeError(f"haar_inverse expects NCHW with channels divisible by 4, got {x.shape}")
    return custom_op(_haar_inv(x.data), (x,), lambda g: (_haar_fwd(g),), "haar_inverse")


class DenseBlock(Module):
    """Five 3x3 convolutions with dense connectivity; the last one starts at zero."""

    def __init__(self, in_channels: int, out_channels: int, growth: int = 32,
                 layers: int = 5, slope: float = 0.2, rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.slope = slope
        self.convs = [Conv2d(in_channels + i * growth, growth, rng=rng, init_scale=0.1,
                             negative_slope=slope)
                      for i in range(layers - 1)]
        last = Conv2d(in_channels + (layers - 1) * growth, out_channels, rng=rng)
        last.weight.data[...] = 0
        self.convs.append(last)

    def forward(self, x: Tensor) -> Tensor:
        features = [x]
        for conv in self.convs[:-1]:
            inp = features[0] if len(features) == 1 else channel_concat(features)
            features.append(leaky_relu(conv(inp), self.slope))
        return self.convs[-1](channel_concat(features))


class InvBlock(Module):
    """Additive coupling on the low branch, bounded affine coupling on the high branch.

    forward:  h1' = h1 + phi(h2);  h2' = h2 * exp(r(h1')) + eta(h1')
    where r = clamp * (2 * sigmoid(rho(.)) - 1), so every multiplicative
    factor lies in [exp(-clamp), exp(clamp)].
    """

    def __init__(self, channels: int, split: int = IMAGE_CHANNELS, growth: int = 32,
                 clamp: float = 1.0, rng: np.random.Generator | None = None):
        if not 0 < split < channels:
            raise ShapeError(f"split {split} outside (0, {channels})")
        self.split = split
        self.channels = channels
        self.clamp = clamp
        high = channels - split
        self.phi = DenseBlock(high, split, growth, rng=rng)
        self.eta = DenseBlock(split, high, growth, rng=rng)
        self.rho = DenseBlock(split, high, growth, rng=rng)

    def log_scale(self, h1: Tensor) -> Tensor:
        s = sigmoid(self.rho(h1))
        return mul(sub(mul(s, 2.0), 1.0), self.clamp)

    def _check(self, h1: Tensor, h2: Tensor) -> None:
        if h1.shape[1] != self.split or h2.shape[1] != self.channels - self.split:
            raise ShapeError(f"InvBlock({self.split}|{self.channels - self.split}) got "
                             f"branches with {h1.shape[1]} and {h2.shape[1]} channels")

    def forward(self, h1: Tensor, h2: Tensor) -> tuple[Tensor, Tensor]:
        self._check(h1, h2)
        h1 = add(h1, self.phi(h2))
        h2 = add(mul(h2, exp(self.log_scale(h1))), self.eta(h1))
        return h1, h2

    def inverse(self, h1: Tensor, h2: Tensor) -> tuple[Tensor, Tensor]:
        self._check(h1, h2)
        h2 = mul(sub(h2, self.eta(h1)), exp(neg(self.log_scale(h1))))
        h1 = sub(h1, self.phi(h2))
        return h1, h2


class DownscaleModule(Module):
    def __init__(self, in_channels: int, blocks: int, growth: int, clamp: float,
                 rng: np.random.Generator):
        self.in_channels = in_channels
        self.blocks = [InvBlock(4 * in_channels, IMAGE_CHANNELS, growth, clamp, rng=rng)
                       for _ in range(blocks)]

    def forward(self, x: Tensor) -> Tensor:
        h1, h2 = channel_split(haar_forward(x), IMAGE_CHANNELS)
        for block in self.blocks:
            h1, h2 = block(h1, h2)
        return channel_concat(h1, h2)

    def inverse(self, out: Tensor) -> Tensor:
        h1, h2 = channel_split(out, IMAGE_CHANNELS)
        for block in reversed(self.blocks):
            h1, h2 = block.inverse(h1, h2)
        return haar_inverse(channel_concat(h1, h2))


class IRNModel(Module):
    """Bijection x <-> (y, z) for power-of-two scales."""

    def __init__(self, scale: int = 2, blocks_per_module: int = 8, growth: int = 32,
                 clamp: float = 1.0, seed: int = 0):
        if scale < 2 or scale & (scale - 1):
            raise ValueError(f"scale must be a power of two >= 2, got {scale}")
        self.scale = scale
        self.blocks_per_module = blocks_per_module
        self.growth = growth
        self.clamp = clamp
        rng = np.random.default_rng(seed)
        levels = int(np.log2(scale))
        self.modules = [DownscaleModule(IMAGE_CHANNELS * 4 ** i, blocks_per_module, growth, clamp, rng)
                        for i in range(levels)]

    @property
    def latent_channels(self) -> int:
        return IMAGE_CHANNELS * (self.scale ** 2 - 1)

    def architecture(self) -> dict:
        return {"scale": self.scale, "blocks_per_module": self.blocks_per_module,
                "growth": self.growth, "clamp": self.clamp}

    def latent_shape(self, lr_shape: tuple) -> tuple:
        n, _, h, w = lr_shape
        return (n, self.latent_channels, h, w)

    def forward(self, x) -> tuple[Tensor, Tensor]:
        x = as_tensor(x)
        if x.ndim != 4 or x.shape[1] != IMAGE_CHANNELS:
            raise ShapeError(f"model expects N x 3 x H x W, got {x.shape}")
        if x.shape[2] % self.scale or x.shape[3] % self.scale:
            raise ShapeError(f"image size {x.shape[2]}x{x.shape[3]} is not divisible by scale {self.scale}")
        out = x
        for module in self.modules:
            out = module(out)
        return channel_split(out, IMAGE_CHANNELS)

    def inverse(self, y, z) -> Tensor:
        y, z = as_tensor(y), as_tensor(z)
        if y.ndim != 4 or y.shape[1] != IMAGE_CHANNELS:
            raise ShapeError(f"LR input must be N x 3 x h x w, got {y.shape}")
        expected = self.latent_shape(y.shape)
        if z.shape != expected:
            raise ShapeError(f"latent shape {z.shape} does not match expected {expected}")
        out = channel_concat(y, z)
        for module in reversed(self.modules):
            out = module.inverse(out)
        return out


def sample_latent(shape, alpha: float = 1.0, rng: np.random.Generator | None = None,
                  dtype=None) -> Tensor:
    """i.i.d. N(0, alpha^2) latent."""
    if alpha < 0:
        raise ValueError(f"alpha must be non-negative, got {alpha}")
    rng = rng if rng is not None else np.random.default_rng()
    dtype = dtype or get_default_dtype()
    return Tensor((rng.standard_normal(shape) * alpha).astype(dtype))


def round_half_away(v: np.ndarray) -> np.ndarray:
    return np.sign(v) * np.floor(np.abs(v) + 0.5)


def quantize_ste(y: Tensor) -> Tensor:
    """Snap to the 8-bit grid; the backward pass is the identity."""
    y = as_tensor(y)
    q = np.clip(round_half_away(y.data * 255), 0, 255) / 255
    return custom_op(q.astype(y.dtype), (y,), lambda g: (g,), "quantize_ste")
