"""Built-in verification battery behind ``irn selfcheck``."""
from __future__ import annotations

import tempfile
import traceback
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .invnet import IRNModel, _haar_fwd, quantize_ste, round_half_away, sample_latent
from .losses import LossWeights, total_loss_pretrain
from .nn import randomize_
from .tensor import Tensor, default_dtype, grad_check, no_grad


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'}  {self.name:<22} {self.detail}"


def tiny_model(scale: int = 2, blocks: int = 2, growth: int = 4, seed: int = 0,
               std: float = 0.05) -> IRNModel:
    """A small model with every weight randomized, so couplings are non-trivial."""
    model = IRNModel(scale, blocks, growth, seed=seed)
    return randomize_(model, np.random.default_rng(seed + 1), std)


def bijectivity_error(model: IRNModel, x: np.ndarray) -> float:
    with no_grad():
        y, z = model(x)
        back = model.inverse(y, z)
    return float(np.max(np.abs(back.data - x)))


def check_bijectivity(dtype, tol: float, seed: int = 0) -> CheckResult:
    worst = 0.0
    with default_dtype(dtype):
        for k, scale in enumerate((2, 4)):
            model = tiny_model(scale, seed=seed + k)
            x = np.random.default_rng(seed + 10 + k).random((2, 3, 16, 16)).astype(dtype)
            worst = max(worst, bijectivity_error(model, x))
    name = f"bijectivity_{np.dtype(dtype).name}"
    return CheckResult(name, worst < tol, f"max|f^-1(f(x)) - x| = {worst:.3g} (tol {tol:g})")


def check_haar(seed: int = 0) -> CheckResult:
    block = np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2)
    worked = _haar_fwd(block).ravel().tolist() == [5.0, -1.0, -2.0, 0.0]
    x = np.random.default_rng(seed).standard_normal((2, 3, 8, 8))
    rel = abs(np.sum(_haar_fwd(x) ** 2) - np.sum(x ** 2)) / np.sum(x ** 2)
    return CheckResult("haar", worked and rel < 1e-10,
                       f"worked block {'ok' if worked else 'WRONG'}, energy rel err {rel:.2g}")


def check_gradients(seed: int = 0, tol: float = 1e-3) -> CheckResult:
    with default_dtype(np.float64):
        model = tiny_model(2, seed=seed)
        rng = np.random.default_rng(seed + 100)
        hr = Tensor(rng.random((2, 3, 16, 16)))
        guide = rng.random((2, 3, 8, 8))
        latent = Tensor(rng.standard_normal((2, 9, 8, 8)))
        weights = LossWeights.pretrain()

        def f():
            return total_loss_pretrain(hr, guide, model, weights, latent=latent, quantize=False).total

        err = grad_check(f, model.parameters(), epsilon=1e-5, samples_per_param=2,
                         rng=np.random.default_rng(seed + 7))
    return CheckResult("grad_check", err < tol, f"max rel err {err:.2g} (tol {tol:g})")


def check_quantization() -> CheckResult:
    grid = Tensor((np.arange(256) / 255).astype(np.float32))
    fixed = np.array_equal(quantize_ste(grid).data, grid.data)
    halves = round_half_away(np.array([0.5, 1.5, -0.5, 2.5]))
    away = halves.tolist() == [1.0, 2.0, -1.0, 3.0]
    clipped = quantize_ste(Tensor(np.array([-0.3, 1.7], dtype=np.float32))).data.tolist() == [0.0, 1.0]
    ok = fixed and away and clipped
    return CheckResult("quantization", ok,
                       f"grid fixed point {fixed}, half-away rounding {away}, clipping {clipped}")


def check_sampling(seed: int = 0) -> CheckResult:
    a = sample_latent((1, 9, 8, 8), 1.0, np.random.default_rng(seed)).data
    b = sample_latent((1, 9, 8, 8), 1.0, np.random.default_rng(seed)).data
    c = sample_latent((1, 9, 8, 8), 1.0, np.random.default_rng(seed + 1)).data
    ok = np.array_equal(a, b) and not np.array_equal(a, c)
    return CheckResult("deterministic_sampling", ok, "same seed equal, different seed differs" if ok
                       else "sampling is not seed-deterministic")


def check_checkpoint(seed: int = 0) -> CheckResult:
    from .training import AdamState, load_checkpoint, save_checkpoint

    model = tiny_model(2, seed=seed)
    x = np.random.default_rng(seed).random((1, 3, 8, 8)).astype(np.float32)
    with no_grad():
        before = model(x)[0].data
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "m.ckpt"
        save_checkpoint(model, AdamState(model.parameters()), path)
        loaded = load_checkpoint(path).model
    with no_grad():
        after = loaded(x)[0].data
    ok = np.array_equal(before, after)
    return CheckResult("checkpoint_roundtrip", ok, "bit-exact forward after reload" if ok
                       else "forward differs after reload")


def run_all(f32_tol: float = 1e-4, seed: int = 0) -> list[CheckResult]:
    battery = [
        lambda: check_bijectivity(np.float32, f32_tol, seed),
        lambda: check_bijectivity(np.float64, 1e-9, seed),
        lambda: check_haar(seed),
        lambda: check_gradients(seed),
        check_quantization,
        lambda: check_sampling(seed),
        lambda: check_checkpoint(seed),
    ]
    results = []
    for i, check in enumerate(battery):
        try:
            results.append(check())
        except Exception as exc:  # a crashing check is a failing check
            traceback.print_exc()
            results.append(CheckResult(f"check_{i}", False, f"raised {type(exc).__name__}: {exc}"))
    return results
