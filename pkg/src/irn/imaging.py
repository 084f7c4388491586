"""Image I/O, colour conversion, bicubic resampling and training patches.

Images live in two forms: ``uint8`` arrays of shape H x W x 3 (what goes to
and from disk) and floating arrays of the same shape with values nominally in
[0, 1]. Batches handed to the network are N x 3 x H x W float arrays.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

logger = logging.getLogger(__name__)

_PNG_SIGNATURE = b"\x89PNG\r\n\x1a\n"
_COLOR_TYPES = {0: "grayscale", 2: "RGB", 3: "palette", 4: "grayscale+alpha", 6: "RGBA"}


class ImageIOError(IOError):
    pass


class _Counter:
    def __init__(self):
        self.nan_clamped = 0


stats = _Counter()


def _png_header(path: Path) -> tuple[int, int]:
    with open(path, "rb") as fh:
        head = fh.read(33)
    if len(head) < 33 or head[:8] != _PNG_SIGNATURE or head[12:16] != b"IHDR":
        raise ImageIOError(f"{path}: not a PNG file")
    bit_depth, color_type = head[24], head[25]
    return bit_depth, color_type


def load_png(path) -> np.ndarray:
    """Read an 8-bit RGB or grayscale PNG as an H x W x 3 uint8 array."""
    path = Path(path)
    if not path.is_file():
        raise ImageIOError(f"{path}: no such file")
    bit_depth, color_type = _png_header(path)
    if bit_depth != 8:
        raise ImageIOError(f"{path}: unsupported bit depth {bit_depth} (only 8-bit PNGs are accepted)")
    if color_type not in (0, 2):
        kind = _COLOR_TYPES.get(color_type, f"type {color_type}")
        raise ImageIOError(f"{path}: unsupported color type ({kind}); expected RGB or grayscale")
    with Image.open(path) as im:
        arr = np.asarray(im, dtype=np.uint8)
    if arr.ndim == 2:
        arr = np.repeat(arr[:, :, None], 3, axis=2)
    return np.ascontiguousarray(arr)


def save_png(img: np.ndarray, path) -> None:
    img = np.asarray(img)
    if img.dtype != np.uint8 or img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"save_png expects an H x W x 3 uint8 array, got {img.dtype} {img.shape}")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(img, mode="RGB").save(path, format="PNG")


def to_float(img: np.ndarray, dtype=np.float64) -> np.ndarray:
    return np.asarray(img, dtype=dtype) / 255


def from_float(img: np.ndarray) -> np.ndarray:
    """Quantize to uint8: clip(round(v * 255)) with ties rounded away from zero."""
    v = np.asarray(img, dtype=np.float64) * 255
    bad = np.isnan(v)
    if bad.any():
        stats.nan_clamped += int(bad.sum())
        logger.warning("from_float: %d NaN values clamped to 0", int(bad.sum()))
        v = np.where(bad, 0.0, v)
    v = np.sign(v) * np.floor(np.abs(v) + 0.5)
    return np.clip(v, 0, 255).astype(np.uint8)


def rgb_to_y(img: np.ndarray) -> np.ndarray:
    """BT.601 studio-range luma (16..235) of an RGB image in [0, 1]."""
    img = np.asarray(img, dtype=np.float64)
    return 65.481 * img[..., 0] + 128.553 * img[..., 1] + 24.966 * img[..., 2] + 16.0


# ----------------------------------------------------------------------------
# bicubic resampling


def cubic_kernel(t, a: float = -0.5):
    """Keys cubic convolution kernel."""
    t = np.abs(np.asarray(t, dtype=np.float64))
    t2, t3 = t * t, t * t * t
    near = (a + 2) * t3 - (a + 3) * t2 + 1
    far = a * t3 - 5 * a * t2 + 8 * a * t - 4 * a
    return np.where(t <= 1, near, np.where(t <= 2, far, 0.0))


def resize_weights(in_len: int, out_len: int, antialias: bool = True,
                   boundary: str = "reflect") -> np.ndarray:
    """Dense (out_len x in_len) resampling matrix; every row sums to one.

    Sample positions follow the MATLAB ``imresize`` convention. When
    shrinking with ``antialias`` the kernel is widened by the inverse scale.
    Out-of-range taps are mirrored (``"reflect"``, as imresize does) or
    clamped to the nearest edge pixel (``"clamp"``).
    """
    if in_len < 1 or out_len < 1:
        raise ValueError(f"resize lengths must be positive, got {in_len} -> {out_len}")
    scale = out_len / in_len
    width = 4.0
    if antialias and scale < 1:
        width /= scale

        def kernel(t):
            return scale * cubic_kernel(scale * t)
    else:
        kernel = cubic_kernel
    x = np.arange(1, out_len + 1, dtype=np.float64)
    u = x / scale + 0.5 * (1 - 1 / scale)
    left = np.floor(u - width / 2)
    taps = int(math.ceil(width)) + 2
    idx = left[:, None] + np.arange(taps)[None, :]
    weights = kernel(u[:, None] - idx)
    weights /= weights.sum(axis=1, keepdims=True)
    if boundary == "clamp":
        idx = np.clip(idx, 1, in_len) - 1
    elif boundary == "reflect":
        mirror = np.concatenate([np.arange(in_len), np.arange(in_len)[::-1]])
        idx = mirror[np.mod(idx - 1, 2 * in_len).astype(int)]
    else:
        raise ValueError(f"unknown boundary mode {boundary!r}")
    mat = np.zeros((out_len, in_len))
    np.add.at(mat, (np.repeat(np.arange(out_len), taps), idx.astype(int).ravel()), weights.ravel())
    return mat


def bicubic_resize(img: np.ndarray, out_h: int, out_w: int, antialias: bool = True,
                   boundary: str = "reflect") -> np.ndarray:
    """Separable bicubic resize of an H x W x C (or H x W) float image."""
    if out_h < 1 or out_w < 1:
        raise ValueError(f"target size must be positive, got {out_h}x{out_w}")
    img = np.asarray(img, dtype=np.float64)
    rows = resize_weights(img.shape[0], out_h, antialias, boundary)
    cols = resize_weights(img.shape[1], out_w, antialias, boundary)
    out = np.tensordot(rows, img, axes=(1, 0))
    out = np.tensordot(cols, out, axes=(1, 1))
    return np.swapaxes(out, 0, 1)


def bicubic_resize_batch(x: np.ndarray, out_h: int, out_w: int, antialias: bool = True,
                         boundary: str = "reflect") -> np.ndarray:
    """Same resampling for an N x C x H x W batch, keeping the dtype."""
    rows = resize_weights(x.shape[2], out_h, antialias, boundary).astype(x.dtype)
    cols = resize_weights(x.shape[3], out_w, antialias, boundary).astype(x.dtype)
    return np.ascontiguousarray(rows @ x @ cols.T)


def modcrop(img: np.ndarray, scale: int) -> np.ndarray:
    h, w = img.shape[0] - img.shape[0] % scale, img.shape[1] - img.shape[1] % scale
    return img[:h, :w]


def bicubic_roundtrip(img_u8: np.ndarray, scale: int) -> tuple[np.ndarray, np.ndarray]:
    """Bicubic down then up with 8-bit storage in between; returns (lr, hr) uint8."""
    hr = to_float(modcrop(img_u8, scale))
    h, w = hr.shape[:2]
    lr = from_float(bicubic_resize(hr, h // scale, w // scale))
    up = from_float(bicubic_resize(to_float(lr), h, w))
    return lr, up


def hwc_to_nchw(img: np.ndarray, dtype=np.float32) -> np.ndarray:
    return np.ascontiguousarray(np.asarray(img, dtype=dtype).transpose(2, 0, 1)[None])


def nchw_to_hwc(x: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(np.asarray(x)[0].transpose(1, 2, 0))


# ----------------------------------------------------------------------------
# datasets


@dataclass
class DatasetSpec:
    directory: str | None = None
    glob: str = "*.png"
    patch_size: int = 144
    hflip: bool = True
    vflip: bool = True
    seed: int = 0

    def validate(self, scale: int) -> None:
        if self.patch_size % scale:
            raise ValueError(f"patch size {self.patch_size} is not divisible by scale {scale}")


class PatchDataset:
    """A list of float HR images from which random augmented crops are drawn."""

    def __init__(self, images: list[np.ndarray], spec: DatasetSpec, names: list[str] | None = None):
        self.spec = spec
        self.images: list[np.ndarray] = []
        self.names: list[str] = []
        names = names or [f"image{i:04d}" for i in range(len(images))]
        p = spec.patch_size
        for name, img in zip(names, images):
            if img.shape[0] < p or img.shape[1] < p:
                logger.warning("skipping %s: %dx%d is smaller than patch size %d",
                               name, img.shape[0], img.shape[1], p)
                continue
            self.images.append(img)
            self.names.append(name)
        if not self.images:
            raise ValueError("dataset has no images large enough for the patch size")

    @classmethod
    def from_directory(cls, spec: DatasetSpec) -> "PatchDataset":
        root = Path(spec.directory)
        files = sorted(root.glob(spec.glob))
        if not files:
            raise FileNotFoundError(f"no files matching {spec.glob!r} in {root}")
        return cls([to_float(load_png(f)) for f in files], spec, [f.name for f in files])

    @classmethod
    def synthetic(cls, spec: DatasetSpec, count: int, size: int) -> "PatchDataset":
        images = [synth_texture(spec.seed * 100003 + i, size, size) for i in range(count)]
        return cls(images, spec)

    def __len__(self) -> int:
        return len(self.images)

    def sample_patch(self, index: int, rng: np.random.Generator) -> np.ndarray:
        return sample_patch(self.images[index], self.spec, rng)

    def sample_batch(self, batch_size: int, rng: np.random.Generator, dtype=np.float32) -> np.ndarray:
        picks = rng.integers(0, len(self.images), size=batch_size)
        patches = [self.sample_patch(int(i), rng) for i in picks]
        return np.ascontiguousarray(np.stack(patches).transpose(0, 3, 1, 2).astype(dtype))


def sample_patch(img: np.ndarray, spec: DatasetSpec, rng: np.random.Generator) -> np.ndarray:
    """Uniform random crop, then each enabled flip with probability 1/2."""
    p = spec.patch_size
    h, w = img.shape[:2]
    if h < p or w < p:
        raise ValueError(f"image {h}x{w} is smaller than patch size {p}")
    top = int(rng.integers(0, h - p + 1))
    left = int(rng.integers(0, w - p + 1))
    patch = img[top:top + p, left:left + p]
    if spec.hflip and rng.random() < 0.5:
        patch = patch[:, ::-1]
    if spec.vflip and rng.random() < 0.5:
        patch = patch[::-1]
    return np.ascontiguousarray(patch)


def synth_texture(seed: int, h: int, w: int) -> np.ndarray:
    """Procedural RGB test image with smooth shading, gratings and hard edges."""
    if h < 16 or w < 16:
        raise ValueError(f"synthetic images must be at least 16x16, got {h}x{w}")
    rng = np.random.default_rng(seed)
    yy, xx = np.meshgrid(np.linspace(0, 1, h), np.linspace(0, 1, w), indexing="ij")
    img = np.empty((h, w, 3))
    base = rng.uniform(0.2, 0.8, 3)
    slope = rng.uniform(-0.3, 0.3, (2, 3))
    for ch in range(3):
        img[:, :, ch] = base[ch] + slope[0, ch] * (yy - 0.5) + slope[1, ch] * (xx - 0.5)

    for _ in range(rng.integers(2, 5)):
        theta = rng.uniform(0, np.pi)
        freq = rng.uniform(2, min(h, w) / 6)
        phase = rng.uniform(0, 2 * np.pi)
        amp = rng.uniform(0.03, 0.15)
        color = rng.uniform(0.3, 1.0, 3)
        wave = np.sin(2 * np.pi * freq * (np.cos(theta) * xx + np.sin(theta) * yy) + phase)
        img += amp * wave[:, :, None] * color

    for _ in range(rng.integers(3, 8)):
        y0, x0 = rng.integers(0, h - 4), rng.integers(0, w - 4)
        y1 = min(h, y0 + rng.integers(4, max(5, h // 2)))
        x1 = min(w, x0 + rng.integers(4, max(5, w // 2)))
        color = rng.uniform(0, 1, 3)
        alpha = rng.uniform(0.4, 1.0)
        img[y0:y1, x0:x1] = (1 - alpha) * img[y0:y1, x0:x1] + alpha * color

    # one straight edge across the whole frame
    theta = rng.uniform(0, np.pi)
    offset = rng.uniform(-0.3, 0.3)
    side = (np.cos(theta) * (xx - 0.5) + np.sin(theta) * (yy - 0.5)) > offset
    img[side] += rng.uniform(-0.2, 0.2, 3)

    img += rng.normal(0, 0.01, img.shape)
    return np.clip(img, 0.0, 1.0)
