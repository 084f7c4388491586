import csv
import math

import numpy as np
import pytest

from irn.imaging import from_float, rgb_to_y, save_png, synth_texture
from irn.metrics import MetricConfig, evaluate_pair_set, gaussian_window, psnr, ssim
from irn.tensor import ShapeError

RGB = MetricConfig(channel="RGB")


def ssim_reference(a, b, size=11, sigma=1.5, L=255.0):
    """Straight loop over every valid window position (independent oracle)."""
    t = np.arange(size) - (size - 1) / 2
    g = np.exp(-t ** 2 / (2 * sigma ** 2))
    w = np.outer(g, g) / np.outer(g, g).sum()
    c1, c2 = (0.01 * L) ** 2, (0.03 * L) ** 2
    vals = []
    for i in range(a.shape[0] - size + 1):
        for j in range(a.shape[1] - size + 1):
            pa, pb = a[i:i + size, j:j + size], b[i:i + size, j:j + size]
            ma, mb = (w * pa).sum(), (w * pb).sum()
            va = (w * (pa - ma) ** 2).sum()
            vb = (w * (pb - mb) ** 2).sum()
            cov = (w * (pa - ma) * (pb - mb)).sum()
            vals.append((2 * ma * mb + c1) * (2 * cov + c2) / ((ma ** 2 + mb ** 2 + c1) * (va + vb + c2)))
    return float(np.mean(vals))


def test_identical_images_give_infinite_psnr():
    img = np.random.default_rng(0).random((16, 16, 3))
    assert psnr(img, img) == math.inf


def test_uniform_luma_offset_of_ten():
    img = np.random.default_rng(0).random((16, 16, 3)) * 0.5
    # adding d to every channel moves Y by 219 d on the 16..235 scale
    shifted = img + 10 / 219
    expected = 20 * math.log10(255 / 10)
    assert psnr(img, shifted) == pytest.approx(expected, abs=1e-9)
    assert psnr(img, img + 10 / 255, RGB) == pytest.approx(expected, abs=1e-9)
    assert abs(psnr(img, shifted) - 28.136) < 0.01


def test_psnr_symmetric_exactly():
    rng = np.random.default_rng(1)
    a, b = rng.random((20, 20, 3)), rng.random((20, 20, 3))
    assert psnr(a, b) == psnr(b, a)


def test_psnr_of_known_noise_variance():
    rng = np.random.default_rng(2)
    img = np.full((512, 512), 128.0) / 255
    sigma = 5.0
    noisy = img + rng.normal(0, sigma / 255, img.shape)
    assert psnr(img, noisy) == pytest.approx(10 * math.log10(255 ** 2 / sigma ** 2), abs=0.2)


def test_dimension_mismatch():
    with pytest.raises(ShapeError):
        psnr(np.zeros((4, 4, 3)), np.zeros((4, 5, 3)))
    with pytest.raises(ShapeError):
        ssim(np.zeros((12, 12, 3)), np.zeros((12, 13, 3)))


def test_border_crop():
    a = np.zeros((20, 20, 3))
    b = a.copy()
    b[0, :, :] = 1.0
    assert psnr(a, b, MetricConfig(border_crop=2)) == math.inf
    assert psnr(a, b) < math.inf
    with pytest.raises(ShapeError):
        psnr(a, b, MetricConfig(border_crop=10))


def test_gaussian_window_normalized():
    g = gaussian_window(11, 1.5)
    assert g.sum() == pytest.approx(1.0)
    assert np.argmax(g) == 5


def test_ssim_identical_is_one():
    img = synth_texture(0, 32, 32)
    assert ssim(img, img) == 1.0


def test_ssim_constant_images_closed_form():
    a = np.full((16, 16), 50.0) / 255
    b = np.full((16, 16), 178.0) / 255
    c1 = (0.01 * 255) ** 2
    expected = (2 * 50 * 178 + c1) / (50 ** 2 + 178 ** 2 + c1)
    assert ssim(a, b) == pytest.approx(expected, rel=1e-9)


def test_ssim_symmetric():
    rng = np.random.default_rng(3)
    a, b = rng.random((24, 24, 3)), rng.random((24, 24, 3))
    assert abs(ssim(a, b) - ssim(b, a)) < 1e-12


def test_ssim_matches_loop_oracle():
    rng = np.random.default_rng(4)
    a = synth_texture(1, 20, 18)
    b = np.clip(a + rng.normal(0, 0.05, a.shape), 0, 1)
    assert ssim(a, b) == pytest.approx(ssim_reference(rgb_to_y(a), rgb_to_y(b)), abs=1e-10)


def test_ssim_matches_scikit_image():
    metrics = pytest.importorskip("skimage.metrics")

    a = synth_texture(5, 40, 40)
    b = np.clip(a + np.random.default_rng(5).normal(0, 0.03, a.shape), 0, 1)
    ref = metrics.structural_similarity(rgb_to_y(a), rgb_to_y(b), gaussian_weights=True, sigma=1.5,
                                        use_sample_covariance=False, data_range=255)
    # scikit-image averages over a slightly smaller interior; agreement is approximate
    assert ssim(a, b) == pytest.approx(ref, abs=5e-3)


def test_ssim_range_and_identity_on_random_pairs():
    rng = np.random.default_rng(6)
    for _ in range(100):
        a = rng.random((12, 12))
        b = a.copy() if rng.random() < 0.2 else rng.random((12, 12))
        s = ssim(a, b)
        assert -1 <= s <= 1
        assert (s == 1.0) == np.array_equal(a, b)


def test_ssim_undersized():
    with pytest.raises(ShapeError):
        ssim(np.zeros((10, 10, 3)), np.zeros((10, 10, 3)))


def test_metric_config_validation():
    with pytest.raises(ValueError):
        MetricConfig(channel="Cb")
    assert MetricConfig.from_dict({"channel": "rgb", "ignored": 1}).channel == "RGB"


# --- directory reports ---------------------------------------------------------

def _write_set(root, seeds, size=24):
    root.mkdir()
    for s in seeds:
        save_png(from_float(synth_texture(s, size, size)), root / f"img{s}.png")


def test_directory_against_itself(tmp_path):
    _write_set(tmp_path / "a", [1, 2, 3])
    report = evaluate_pair_set(tmp_path / "a", tmp_path / "a")
    assert len(report.rows) == 3
    assert all(r[1] == math.inf for r in report.rows)
    assert report.mean_ssim == 1.0
    report.write_csv(tmp_path / "r.csv")
    rows = list(csv.reader(open(tmp_path / "r.csv")))
    assert rows[0] == ["file", "psnr_db", "ssim"]
    assert rows[1][1] == "inf"


def test_missing_counterparts_listed(tmp_path):
    _write_set(tmp_path / "a", [1, 2])
    _write_set(tmp_path / "b", [2, 3])
    report = evaluate_pair_set(tmp_path / "a", tmp_path / "b")
    assert [r[0] for r in report.rows] == ["img2.png"]
    assert report.missing == ["img1.png", "img3.png"]
    assert "no counterpart" in report.format_table()


def test_empty_intersection_warns(tmp_path):
    _write_set(tmp_path / "a", [1])
    _write_set(tmp_path / "b", [2])
    report = evaluate_pair_set(tmp_path / "a", tmp_path / "b")
    assert report.rows == []
    assert report.warnings > 0
    assert math.isnan(report.mean_psnr)
