import csv
import hashlib
import json
import math
import subprocess
import sys

import numpy as np
import pytest

from irn.checks import tiny_model
from irn.cli import EXIT_ABORT, EXIT_OK, EXIT_SELFCHECK, EXIT_USAGE, main
from irn.imaging import from_float, load_png, save_png, synth_texture
from irn.training import AdamState, TrainConfig, load_checkpoint, read_log_csv, save_checkpoint

TINY = dict(patch_size=16, batch_size=2, iters_pretrain=2, iters_finetune=1, disc_warmup=1,
            growth=4, inv_blocks_per_module=2, disc_width=0.125, synthetic={"count": 4, "size": 32},
            milestones=[1], milestones_finetune=[1], checkpoint_every=1)


def digest(path):
    return hashlib.sha256(open(path, "rb").read()).hexdigest()


@pytest.fixture
def model_path(tmp_path):
    def make(scale=2, std=0.05):
        path = tmp_path / f"x{scale}.ckpt"
        model = tiny_model(scale, std=std)
        save_checkpoint(model, AdamState(model.parameters()), path)
        return path
    return make


@pytest.fixture
def image(tmp_path):
    def make(h=32, w=32, seed=0, name="img.png"):
        path = tmp_path / name
        save_png(from_float(synth_texture(seed, h, w)), path)
        return path
    return make


def write_config(tmp_path, **kw):
    path = tmp_path / "tiny.json"
    path.write_text(json.dumps({**TINY, **kw}))
    return path


# --- train ----------------------------------------------------------------------------

def test_train_missing_config(tmp_path, capsys):
    assert main(["train", "--config", str(tmp_path / "nope.json")]) == EXIT_USAGE
    assert "nope.json" in capsys.readouterr().err


def test_train_invalid_config(tmp_path, capsys):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps({"patch_size": 30, "scale": 4}))
    assert main(["train", "--config", str(path)]) == EXIT_USAGE
    assert "divisible" in capsys.readouterr().err


def test_train_zero_iterations_saves_initialization(tmp_path):
    cfg = write_config(tmp_path, iters_pretrain=0, iters_finetune=0, disc_warmup=0)
    out = tmp_path / "run"
    assert main(["train", "--config", str(cfg), "--out-dir", str(out)]) == EXIT_OK
    init = TrainConfig.from_json(cfg).build_model()
    saved = dict(load_checkpoint(out / "model.ckpt").model.named_parameters())
    for name, p in init.named_parameters():
        assert np.array_equal(saved[name].data, p.data)


def test_train_writes_outputs(tmp_path):
    out = tmp_path / "run"
    assert main(["train", "--config", str(write_config(tmp_path)), "--out-dir", str(out)]) == EXIT_OK
    for name in ("model.ckpt", "last.ckpt", "train_log.csv", "train_log.png"):
        assert (out / name).is_file(), name
    rows = read_log_csv(out / "train_log.csv")
    assert [r["iter"] for r in rows] == [0, 1, 2]
    assert (out / "train_log.png").read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"


def test_train_resume_reaches_same_checkpoint(tmp_path):
    cfg = write_config(tmp_path, checkpoint_every=1)
    straight = tmp_path / "a"
    assert main(["train", "--config", str(cfg), "--out-dir", str(straight), "--no-figures"]) == EXIT_OK
    resumed = tmp_path / "b"
    assert main(["train", "--config", str(cfg), "--out-dir", str(resumed), "--no-figures",
                 "--resume", str(straight / "model.ckpt")]) == EXIT_OK
    assert digest(straight / "model.ckpt") == digest(resumed / "model.ckpt")


def test_train_abort_keeps_last_checkpoint(tmp_path, monkeypatch, capsys):
    import irn.training

    real = irn.training.total_loss_pretrain
    calls = []

    def poisoned(*a, **kw):
        br = real(*a, **kw)
        calls.append(1)
        if len(calls) == 2:
            br.total.data = np.array(np.nan, dtype=br.total.data.dtype)
        return br

    monkeypatch.setattr(irn.training, "total_loss_pretrain", poisoned)
    out = tmp_path / "run"
    assert main(["train", "--config", str(write_config(tmp_path)), "--out-dir", str(out)]) == EXIT_ABORT
    assert "aborted" in capsys.readouterr().err
    assert (out / "last.ckpt").is_file()
    assert load_checkpoint(out / "last.ckpt").extra["iteration"] == 1


# --- downscale / upscale ----------------------------------------------------------------

def test_downscale_geometry(tmp_path, model_path, image):
    src = image(144, 144)
    before = digest(src)
    out = tmp_path / "lr.png"
    assert main(["downscale", "--model", str(model_path(4)), "--in", str(src), "--out", str(out)]) == EXIT_OK
    assert load_png(out).shape == (36, 36, 3)
    assert digest(src) == before


def test_downscale_rejects_indivisible(tmp_path, model_path, image, capsys):
    src = image(145, 144)
    code = main(["downscale", "--model", str(model_path(4)), "--in", str(src), "--out", str(tmp_path / "o.png")])
    assert code == EXIT_USAGE
    assert "divisible" in capsys.readouterr().err
    assert not (tmp_path / "o.png").exists()


def test_downscale_refuses_to_overwrite_input(model_path, image):
    src = image()
    before = digest(src)
    assert main(["downscale", "--model", str(model_path()), "--in", str(src), "--out", str(src)]) == EXIT_USAGE
    assert digest(src) == before


def test_missing_model(tmp_path, image, capsys):
    assert main(["downscale", "--model", str(tmp_path / "m.ckpt"), "--in", str(image()),
                 "--out", str(tmp_path / "o.png")]) == EXIT_USAGE
    assert "m.ckpt" in capsys.readouterr().err


def test_corrupt_model_is_usage_error(tmp_path, image, capsys):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"garbage")
    assert main(["upscale", "--model", str(bad), "--in", str(image()), "--out", str(tmp_path / "o.png")]) == EXIT_USAGE
    assert "not a checkpoint" in capsys.readouterr().err


def test_upscale_seeded(tmp_path, model_path, image):
    ckpt, lr = model_path(2, std=0.2), image(16, 16)
    before = digest(lr)

    def run(seed, name, alpha=1.0):
        out = tmp_path / name
        assert main(["upscale", "--model", str(ckpt), "--in", str(lr), "--out", str(out),
                     "--seed", str(seed), "--alpha", str(alpha)]) == EXIT_OK
        return load_png(out)

    a, b, c = run(7, "a.png"), run(7, "b.png"), run(8, "c.png")
    assert a.shape == (32, 32, 3)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)
    assert digest(lr) == before


def test_upscale_alpha_controls_noise(tmp_path, model_path, image):
    ckpt, lr = model_path(2, std=0.2), image(16, 16)
    outs = {}
    for alpha in (0.0, 1.0, 4.0):
        spread = []
        for seed in range(3):
            out = tmp_path / f"{alpha}_{seed}.png"
            main(["upscale", "--model", str(ckpt), "--in", str(lr), "--out", str(out),
                  "--seed", str(seed), "--alpha", str(alpha)])
            spread.append(load_png(out).astype(float))
        outs[alpha] = np.std(np.stack(spread), axis=0).mean()
    assert outs[0.0] == 0.0
    assert outs[4.0] > outs[1.0] > 0


def test_upscale_with_dumped_latent_recovers_input(tmp_path, model_path, image):
    # untrained, the LR is roughly twice the HR intensity; keep it below 1 so the PNG does not clip
    ckpt, src = model_path(2), tmp_path / "dark.png"
    save_png(from_float(0.4 * synth_texture(0, 32, 32)), src)
    lr, z = tmp_path / "lr.png", tmp_path / "z.npy"
    main(["downscale", "--model", str(ckpt), "--in", str(src), "--out", str(lr), "--latent", str(z)])
    out = tmp_path / "hr.png"
    assert main(["upscale", "--model", str(ckpt), "--in", str(lr), "--out", str(out), "--latent", str(z)]) == EXIT_OK
    # LR quantization is the only loss
    assert np.abs(load_png(out).astype(int) - load_png(src).astype(int)).mean() < 3


def test_negative_alpha_rejected(tmp_path, model_path, image):
    assert main(["upscale", "--model", str(model_path()), "--in", str(image(16, 16)),
                 "--out", str(tmp_path / "o.png"), "--alpha", "-1"]) == EXIT_USAGE


# --- roundtrip --------------------------------------------------------------------------

def test_roundtrip_report_and_figure(tmp_path, model_path, image, capsys):
    src = image(32, 32)
    report, fig = tmp_path / "r.csv", tmp_path / "diff.png"
    code = main(["roundtrip", "--model", str(model_path()), "--in", str(src),
                 "--report", str(report), "--figure", str(fig)])
    assert code == EXIT_OK
    line = capsys.readouterr().out
    assert "psnr_db=" in line and "bicubic_psnr_db=" in line
    rows = list(csv.reader(open(report)))
    assert rows[0] == ["file", "psnr_db", "ssim", "bicubic_psnr_db", "bicubic_ssim"]
    assert len(rows) == 2
    assert math.isfinite(float(rows[1][1]))
    assert fig.read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"


def test_roundtrip_deterministic_default_seed(model_path, image, capsys):
    ckpt, src = model_path(std=0.2), image(32, 32)
    main(["roundtrip", "--model", str(ckpt), "--in", str(src)])
    first = capsys.readouterr().out
    main(["roundtrip", "--model", str(ckpt), "--in", str(src)])
    assert capsys.readouterr().out == first


# --- eval -------------------------------------------------------------------------------

def _fill(d, seeds):
    d.mkdir()
    for s in seeds:
        save_png(from_float(synth_texture(s, 24, 24)), d / f"{s}.png")


def test_eval_directory_against_itself(tmp_path, capsys):
    _fill(tmp_path / "a", [1, 2])
    csv_path, fig = tmp_path / "e.csv", tmp_path / "e.png"
    assert main(["eval", "--dir-a", str(tmp_path / "a"), "--dir-b", str(tmp_path / "a"),
                 "--csv", str(csv_path), "--figure", str(fig)]) == EXIT_OK
    rows = list(csv.reader(open(csv_path)))
    assert [r[1] for r in rows[1:]] == ["inf", "inf"]
    assert all(float(r[2]) == 1.0 for r in rows[1:])
    assert fig.is_file()


def test_eval_mismatched_sets(tmp_path, capsys):
    _fill(tmp_path / "a", [1, 2])
    _fill(tmp_path / "b", [2, 3])
    assert main(["eval", "--dir-a", str(tmp_path / "a"), "--dir-b", str(tmp_path / "b")]) == EXIT_OK
    out = capsys.readouterr().out
    assert "1.png" in out and "3.png" in out and "no counterpart" in out


def test_eval_metric_config_file(tmp_path, capsys):
    _fill(tmp_path / "a", [1])
    _fill(tmp_path / "b", [1])
    cfg = tmp_path / "m.json"
    cfg.write_text(json.dumps({"channel": "RGB", "border_crop": 2}))
    assert main(["eval", "--dir-a", str(tmp_path / "a"), "--dir-b", str(tmp_path / "b"),
                 "--metric-config", str(cfg)]) == EXIT_OK
    cfg.write_text(json.dumps({"channel": "Cr"}))
    assert main(["eval", "--dir-a", str(tmp_path / "a"), "--dir-b", str(tmp_path / "b"),
                 "--metric-config", str(cfg)]) == EXIT_USAGE


def test_eval_missing_directory(tmp_path):
    assert main(["eval", "--dir-a", str(tmp_path / "x"), "--dir-b", str(tmp_path)]) == EXIT_USAGE


# --- selfcheck and parsing -----------------------------------------------------------------

def test_selfcheck_passes(capsys):
    assert main(["selfcheck"]) == EXIT_OK
    lines = capsys.readouterr().out.splitlines()
    assert len([ln for ln in lines if ln.startswith("PASS")]) >= 5
    assert not any(ln.startswith("FAIL") for ln in lines)


def test_selfcheck_strict_tolerance_fails(capsys):
    assert main(["selfcheck", "--strict-f32-tol"]) == EXIT_SELFCHECK
    assert "FAIL" in capsys.readouterr().out


def test_unknown_subcommand_exits_one():
    with pytest.raises(SystemExit) as info:
        main(["frobnicate"])
    assert info.value.code == EXIT_USAGE


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "irn", "--help"], capture_output=True, text=True)
    assert res.returncode == 0
    assert "selfcheck" in res.stdout
