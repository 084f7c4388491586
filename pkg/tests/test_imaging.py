import struct
import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from irn.imaging import (
    DatasetSpec,
    ImageIOError,
    PatchDataset,
    bicubic_resize,
    bicubic_resize_batch,
    bicubic_roundtrip,
    cubic_kernel,
    from_float,
    load_png,
    resize_weights,
    rgb_to_y,
    sample_patch,
    save_png,
    stats,
    synth_texture,
    to_float,
)


def _write_raw_png(path, width, height, bit_depth, color_type, rows: bytes):
    def chunk(tag, data):
        return struct.pack(">I", len(data)) + tag + data + struct.pack(">I", zlib.crc32(tag + data))

    ihdr = struct.pack(">IIBBBBB", width, height, bit_depth, color_type, 0, 0, 0)
    path.write_bytes(b"\x89PNG\r\n\x1a\n" + chunk(b"IHDR", ihdr) + chunk(b"IDAT", zlib.compress(rows))
                     + chunk(b"IEND", b""))


# --- PNG I/O -------------------------------------------------------------------

def test_png_roundtrip_is_bit_exact(tmp_path):
    img = np.random.default_rng(0).integers(0, 256, (32, 32, 3), dtype=np.uint8)
    save_png(img, tmp_path / "a.png")
    back = load_png(tmp_path / "a.png")
    assert back.dtype == np.uint8
    assert np.array_equal(back, img)


def test_sixteen_bit_png_rejected(tmp_path):
    path = tmp_path / "deep.png"
    _write_raw_png(path, 2, 2, 16, 2, b"".join(b"\x00" + b"\x00" * 12 for _ in range(2)))
    with pytest.raises(ImageIOError, match="unsupported bit depth"):
        load_png(path)


def test_palette_png_rejected(tmp_path):
    Image.new("P", (4, 4)).save(tmp_path / "p.png")
    with pytest.raises(ImageIOError, match="palette"):
        load_png(tmp_path / "p.png")


def test_grayscale_expands_to_three_equal_channels(tmp_path):
    gray = np.arange(16, dtype=np.uint8).reshape(4, 4) * 10
    Image.fromarray(gray, mode="L").save(tmp_path / "g.png")
    img = load_png(tmp_path / "g.png")
    assert img.shape == (4, 4, 3)
    for c in range(3):
        assert np.array_equal(img[:, :, c], gray)


def test_missing_file(tmp_path):
    with pytest.raises(ImageIOError, match="no such file"):
        load_png(tmp_path / "nope.png")


# --- float conversion --------------------------------------------------------------

def test_float_conversion_examples():
    assert to_float(np.uint8(255)) == 1.0
    assert from_float(np.array([1.0])).tolist() == [255]
    assert from_float(np.array([0.5019607])).tolist() == [128]
    assert from_float(np.array([1.3])).tolist() == [255]
    assert from_float(np.array([-0.2])).tolist() == [0]


def test_all_bytes_roundtrip():
    u = np.arange(256, dtype=np.uint8)
    assert np.array_equal(from_float(to_float(u)), u)


def test_half_rounds_away_from_zero():
    assert from_float(np.array([127.5 / 255, 0.5 / 255])).tolist() == [128, 1]


def test_nan_clamps_and_counts():
    before = stats.nan_clamped
    out = from_float(np.array([np.nan, 0.5]))
    assert out.tolist() == [0, 128]
    assert stats.nan_clamped == before + 1


# --- luma ---------------------------------------------------------------------------

def test_luma_examples():
    assert rgb_to_y(np.array([0.0, 0.0, 0.0])) == pytest.approx(16.0)
    assert rgb_to_y(np.array([1.0, 1.0, 1.0])) == pytest.approx(235.0)
    assert rgb_to_y(np.array([0.0, 1.0, 0.0])) == pytest.approx(144.553)


@settings(max_examples=50, deadline=None)
@given(r=st.floats(0, 1), g=st.floats(0, 1), b=st.floats(0, 1), alpha=st.floats(0, 1))
def test_luma_is_affine(r, g, b, alpha):
    p = np.array([r, g, b])
    assert rgb_to_y(alpha * p) - 16 == pytest.approx(alpha * (rgb_to_y(p) - 16), abs=1e-6)


# --- bicubic ------------------------------------------------------------------------

def test_kernel_values():
    assert cubic_kernel(0.0) == 1.0
    assert cubic_kernel(1.0) == 0.0
    assert cubic_kernel(0.5) == pytest.approx(0.5625)
    assert cubic_kernel(2.5) == 0.0


@pytest.mark.parametrize("boundary", ["reflect", "clamp"])
@pytest.mark.parametrize("n_in,n_out", [(144, 36), (144, 72), (36, 144), (10, 7), (7, 10), (33, 11)])
def test_weight_rows_sum_to_one(n_in, n_out, boundary):
    w = resize_weights(n_in, n_out, antialias=True, boundary=boundary)
    np.testing.assert_allclose(w.sum(axis=1), 1.0, atol=1e-6)


@pytest.mark.parametrize("size", [(5, 9), (20, 20), (64, 16), (8, 30)])
def test_constant_image_preserved(size):
    img = np.full((24, 18, 3), 0.37)
    out = bicubic_resize(img, *size)
    np.testing.assert_allclose(out, 0.37, atol=1e-12)


def test_zero_target_rejected():
    with pytest.raises(ValueError):
        bicubic_resize(np.zeros((4, 4, 3)), 0, 4)


@pytest.mark.parametrize("h,w,oh,ow", [(48, 40, 12, 10), (48, 40, 24, 20), (12, 10, 48, 40), (30, 30, 17, 23)])
def test_matches_reference_imresize(h, w, oh, ow):
    torch = pytest.importorskip("torch")
    core = pytest.importorskip("bicubic_pytorch.core")
    img = np.random.default_rng(h + ow).random((h, w, 3))
    ours = bicubic_resize(img, oh, ow)
    ref = core.imresize(torch.tensor(img.transpose(2, 0, 1)[None]), sizes=(oh, ow))
    np.testing.assert_allclose(ours, ref[0].numpy().transpose(1, 2, 0), atol=1e-6)


def test_batch_matches_single():
    x = np.random.default_rng(0).random((2, 3, 16, 12))
    batch = bicubic_resize_batch(x, 8, 6)
    for i in range(2):
        single = bicubic_resize(x[i].transpose(1, 2, 0), 8, 6).transpose(2, 0, 1)
        np.testing.assert_allclose(batch[i], single, atol=1e-12)


def test_clamp_mode_differs_only_near_border():
    img = np.random.default_rng(1).random((40, 40, 3))
    a = bicubic_resize(img, 10, 10, boundary="reflect")
    b = bicubic_resize(img, 10, 10, boundary="clamp")
    np.testing.assert_allclose(a[2:-2, 2:-2], b[2:-2, 2:-2], atol=1e-12)


def test_bicubic_roundtrip_geometry():
    img = (np.random.default_rng(0).random((33, 30, 3)) * 255).astype(np.uint8)
    lr, up = bicubic_roundtrip(img, 2)
    assert lr.shape == (16, 15, 3) and up.shape == (32, 30, 3)


# --- patches and synthetic images -------------------------------------------------

def test_patch_deterministic():
    img = synth_texture(0, 64, 64)
    spec = DatasetSpec(patch_size=16)
    a = sample_patch(img, spec, np.random.default_rng(5))
    b = sample_patch(img, spec, np.random.default_rng(5))
    assert np.array_equal(a, b)


def test_full_size_patch_without_flips_is_whole_image():
    img = synth_texture(1, 32, 32)
    spec = DatasetSpec(patch_size=32, hflip=False, vflip=False)
    assert np.array_equal(sample_patch(img, spec, np.random.default_rng(0)), img)


def test_horizontal_flip_definition():
    img = np.array([[1.0, 2.0], [3.0, 4.0]])[:, :, None]
    spec = DatasetSpec(patch_size=2, hflip=True, vflip=False)
    seen = set()
    for seed in range(20):
        seen.add(tuple(sample_patch(img, spec, np.random.default_rng(seed))[:, :, 0].ravel()))
    assert seen == {(1.0, 2.0, 3.0, 4.0), (2.0, 1.0, 4.0, 3.0)}


def test_flip_probability_is_half():
    img = np.array([[1.0, 2.0], [3.0, 4.0]])[:, :, None]
    spec = DatasetSpec(patch_size=2, hflip=True, vflip=False)
    rng = np.random.default_rng(0)
    flipped = sum(sample_patch(img, spec, rng)[0, 0, 0] == 2.0 for _ in range(4000))
    assert abs(flipped / 4000 - 0.5) < 0.03


def test_undersized_images_skipped(caplog):
    spec = DatasetSpec(patch_size=32)
    ds = PatchDataset([np.zeros((16, 16, 3)), np.zeros((40, 40, 3))], spec, ["small", "big"])
    assert ds.names == ["big"]
    assert "skipping small" in caplog.text


def test_patch_size_must_divide_scale():
    with pytest.raises(ValueError):
        DatasetSpec(patch_size=30).validate(4)


def test_directory_dataset(tmp_path):
    for i in range(3):
        save_png((synth_texture(i, 20, 20) * 255).astype(np.uint8), tmp_path / f"{i}.png")
    ds = PatchDataset.from_directory(DatasetSpec(directory=str(tmp_path), patch_size=16))
    batch = ds.sample_batch(5, np.random.default_rng(0))
    assert batch.shape == (5, 3, 16, 16) and batch.dtype == np.float32


def test_synth_texture_properties():
    a = synth_texture(3, 64, 48)
    assert a.shape == (64, 48, 3)
    assert np.array_equal(a, synth_texture(3, 64, 48))
    assert a.min() >= 0 and a.max() <= 1
    for s in range(10):
        assert np.mean(np.abs(synth_texture(s, 32, 32) - synth_texture(s + 100, 32, 32))) > 0.01


def test_synth_texture_has_high_frequencies():
    img = synth_texture(7, 64, 64).mean(axis=2)
    spectrum = np.abs(np.fft.fft2(img - img.mean()))
    high = spectrum[16:48, 16:48].sum()
    assert high / spectrum.sum() > 0.01


def test_synth_texture_rejects_tiny():
    with pytest.raises(ValueError):
        synth_texture(0, 8, 32)
