"""Optimizer, schedules, the two training stages and the checkpoint format."""
from __future__ import annotations

import csv
import json
import logging
import math
import os
import struct
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np

from .imaging import DatasetSpec, PatchDataset, bicubic_resize_batch
from .invnet import IRNModel, quantize_ste, sample_latent
from .losses import (
    Discriminator,
    LossWeights,
    discriminator_loss,
    total_loss_finetune,
    total_loss_pretrain,
)
from .nn import Module
from .tensor import Parameter, backward, no_grad

logger = logging.getLogger(__name__)

MAGIC = b"IRNCKPT1"
FORMAT_VERSION = 1
LOG_COLUMNS = ("iter", "lr", "loss_total", "loss_recon", "loss_guide", "loss_distr", "loss_disc")
DISC_COLLAPSE_LOGIT = 50.0


class TrainingAborted(RuntimeError):
    """A non-finite loss stopped training; the last written checkpoint is intact."""


class CheckpointError(ValueError):
    pass


# ----------------------------------------------------------------------------
# optimizer and schedule


class AdamState:
    """Per-parameter moment buffers for bias-corrected Adam."""

    def __init__(self, params: list[Parameter], beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]
        self.t = 0


def adam_step(params: list[Parameter], state: AdamState, lr: float) -> None:
    """One Adam update from the populated ``grad`` buffers. Gradients are not cleared."""
    if len(params) != len(state.m):
        raise ValueError(f"optimizer tracks {len(state.m)} parameters, got {len(params)}")
    for i, p in enumerate(params):
        if not np.all(np.isfinite(p.grad)):
            raise FloatingPointError(f"non-finite gradient in parameter {p.name or i}; step skipped")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1 - b1 ** state.t
    c2 = 1 - b2 ** state.t
    for p, m, v in zip(params, state.m, state.v):
        g = p.grad
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype)


@dataclass
class Schedule:
    base_lr: float
    milestones: tuple = ()
    factor: float = 0.5

    def __post_init__(self):
        ms = tuple(int(m) for m in self.milestones)
        if any(b <= a for a, b in zip(ms, ms[1:])):
            raise ValueError(f"milestones must be strictly increasing, got {ms}")
        self.milestones = ms


def lr_at(schedule: Schedule, iteration: int) -> float:
    if iteration < 0:
        raise ValueError("iteration must be non-negative")
    passed = sum(1 for m in schedule.milestones if m <= iteration)
    return schedule.base_lr * schedule.factor ** passed


# ----------------------------------------------------------------------------
# configuration


def _weights_from(d) -> LossWeights:
    return d if isinstance(d, LossWeights) else LossWeights(**d)


# Desk runs are 25x shorter than the full-scale schedule.  A larger step and a light CE weight let
# the latent spread out to unit scale within 2000 iterations (see README, desk defaults).
DESK_LR = 2e-3
DESK_DISTR_WEIGHT = 0.005


@dataclass
class TrainConfig:
    scale: int = 2
    patch_size: int = 32
    batch_size: int = 4
    iters_pretrain: int = 2000
    iters_finetune: int = 500
    disc_warmup: int = 100
    lr: float = DESK_LR
    milestones: tuple = (400, 800, 1200, 1600)
    lr_finetune: float = 1e-4
    milestones_finetune: tuple = (125, 250)
    lambdas: dict = field(default_factory=lambda: {
        "pretrain": LossWeights(recon=1.0, guide=16.0, distr=DESK_DISTR_WEIGHT).to_dict(),
        "finetune": LossWeights.finetune().to_dict(),
    })
    growth: int = 16
    inv_blocks_per_module: int = 8
    clamp: float = 1.0
    disc_width: float = 0.25
    seed: int = 0
    dataset: dict | None = None
    synthetic: dict | None = field(default_factory=lambda: {"count": 64, "size": 128})
    hflip: bool = True
    vflip: bool = True
    checkpoint_every: int = 500
    log_every: int = 1
    desk_factor: float = 1.0

    def __post_init__(self):
        self.milestones = tuple(self.milestones)
        self.milestones_finetune = tuple(self.milestones_finetune)
        if self.patch_size % self.scale:
            raise ValueError(f"patch size {self.patch_size} is not divisible by scale {self.scale}")
        for name in ("iters_pretrain", "iters_finetune", "disc_warmup"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.dataset is None and self.synthetic is None:
            raise ValueError("config needs either 'dataset' or 'synthetic'")
        if self.desk_factor != 1.0:
            f = self.desk_factor
            self.iters_pretrain = int(round(self.iters_pretrain * f))
            self.iters_finetune = int(round(self.iters_finetune * f))
            self.disc_warmup = int(round(self.disc_warmup * f))
            self.milestones = tuple(int(round(m * f)) for m in self.milestones)
            self.milestones_finetune = tuple(int(round(m * f)) for m in self.milestones_finetune)
            self.desk_factor = 1.0
        self.weights_pretrain = _weights_from(self.lambdas["pretrain"])
        self.weights_finetune = _weights_from(self.lambdas["finetune"])

    @classmethod
    def full_scale(cls, scale: int = 2, **overrides) -> "TrainConfig":
        base = dict(scale=scale, patch_size=144, batch_size=16, iters_pretrain=50000,
                    iters_finetune=20000, disc_warmup=5000, lr=2e-4,
                    lambdas={"pretrain": LossWeights.pretrain().to_dict(),
                             "finetune": LossWeights.finetune().to_dict()},
                    milestones=(10000, 20000, 30000, 40000),
                    milestones_finetune=(5000, 10000), growth=32, disc_width=1.0,
                    checkpoint_every=5000, log_every=100)
        base.update(overrides)
        return cls(**base)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ValueError(f"unknown config keys: {', '.join(unknown)}")
        d = dict(d)
        if "dataset" in d and "synthetic" not in d:
            d["synthetic"] = None
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "TrainConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["milestones"] = list(self.milestones)
        d["milestones_finetune"] = list(self.milestones_finetune)
        d["lambdas"] = {"pretrain": self.weights_pretrain.to_dict(),
                        "finetune": self.weights_finetune.to_dict()}
        return d

    def dataset_spec(self) -> DatasetSpec:
        src = self.dataset or {}
        return DatasetSpec(directory=src.get("dir"), glob=src.get("glob", "*.png"),
                           patch_size=self.patch_size, hflip=self.hflip, vflip=self.vflip,
                           seed=self.seed)

    def build_dataset(self) -> PatchDataset:
        spec = self.dataset_spec()
        if self.dataset is not None:
            return PatchDataset.from_directory(spec)
        return PatchDataset.synthetic(spec, int(self.synthetic["count"]), int(self.synthetic["size"]))

    def build_model(self) -> IRNModel:
        return IRNModel(self.scale, self.inv_blocks_per_module, self.growth, self.clamp, seed=self.seed)

    def build_discriminator(self) -> Discriminator:
        return Discriminator(self.patch_size, width_mult=self.disc_width, seed=self.seed + 1)


# ----------------------------------------------------------------------------
# stages


def iteration_rng(seed: int, stage: int, iteration: int) -> np.random.Generator:
    """Independent stream per (stage, iteration), so resumed runs replay exactly."""
    return np.random.default_rng([seed, stage, iteration])


def make_batch(config: TrainConfig, dataset: PatchDataset, rng: np.random.Generator):
    hr = dataset.sample_batch(config.batch_size, rng)
    lr_size = config.patch_size // config.scale
    return hr, bicubic_resize_batch(hr, lr_size, lr_size)


@dataclass
class StageResult:
    history: list = field(default_factory=list)
    iterations: int = 0


class Trainer:
    """Owns the model, discriminator, optimizers and iteration counters of one run."""

    PRETRAIN, WARMUP, FINETUNE = 1, 2, 3

    def __init__(self, config: TrainConfig, dataset: PatchDataset | None = None,
                 model: IRNModel | None = None):
        self.config = config
        self.dataset = dataset
        self.model = model or config.build_model()
        self.opt = AdamState(self.model.parameters())
        self.disc: Discriminator | None = None
        self.opt_disc: AdamState | None = None
        self.stage = "pretrain"
        self.iteration = 0
        self.warmup_done = 0
        self.history: list[dict] = []
        self.on_log: Callable[[dict], None] | None = None
        self.on_checkpoint: Callable[["Trainer"], None] | None = None

    def _ensure_disc(self) -> None:
        if self.disc is None:
            self.disc = self.config.build_discriminator()
            self.opt_disc = AdamState(self.disc.parameters())

    def _record(self, row: dict) -> None:
        self.history.append(row)
        if self.on_log and row["iter"] % self.config.log_every == 0:
            self.on_log(row)

    def _maybe_checkpoint(self, done: int) -> None:
        every = self.config.checkpoint_every
        if self.on_checkpoint and every and done % every == 0:
            self.on_checkpoint(self)

    def pretrain(self) -> StageResult:
        cfg = self.config
        weights = cfg.weights_pretrain
        sched = Schedule(cfg.lr, cfg.milestones)
        params = self.model.parameters()
        result = StageResult()
        while self.stage == "pretrain" and self.iteration < cfg.iters_pretrain:
            it = self.iteration
            rng = iteration_rng(cfg.seed, self.PRETRAIN, it)
            hr, guide = make_batch(cfg, self.dataset, rng)
            self.model.zero_grad()
            br = total_loss_pretrain(hr, guide, self.model, weights, rng=rng)
            total = br.total.item()
            if not math.isfinite(total):
                raise TrainingAborted(f"non-finite pretrain loss at iteration {it}")
            backward(br.total)
            lr = lr_at(sched, it)
            adam_step(params, self.opt, lr)
            row = {"iter": it, "lr": lr, "loss_total": total,
                   "loss_recon": br.components["recon"], "loss_guide": br.components["guide"],
                   "loss_distr": br.components["distr"], "loss_disc": math.nan}
            self._record(row)
            result.history.append(row)
            self.iteration += 1
            self._maybe_checkpoint(self.iteration)
        if self.stage == "pretrain":
            self.stage, self.iteration = "finetune", 0
        result.iterations = len(result.history)
        return result

    def _fake_batch(self, hr: np.ndarray, rng: np.random.Generator):
        with no_grad():
            y, z = self.model(hr)
            return self.model.inverse(quantize_ste(y), sample_latent(z.shape, 1.0, rng, dtype=y.dtype))

    def _disc_step(self, hr, fake, lr: float) -> float:
        self.disc.zero_grad()
        loss = discriminator_loss(self.disc, hr, fake)
        value = loss.item()
        if not math.isfinite(value):
            raise TrainingAborted("non-finite discriminator loss")
        backward(loss)
        adam_step(self.disc.parameters(), self.opt_disc, lr)
        return value

    def finetune(self) -> StageResult:
        cfg = self.config
        self._ensure_disc()
        weights = cfg.weights_finetune
        sched = Schedule(cfg.lr_finetune, cfg.milestones_finetune)
        params = self.model.parameters()
        result = StageResult()
        while self.warmup_done < cfg.disc_warmup:
            rng = iteration_rng(cfg.seed, self.WARMUP, self.warmup_done)
            hr, _ = make_batch(cfg, self.dataset, rng)
            self._disc_step(hr, self._fake_batch(hr, rng), cfg.lr_finetune)
            self.warmup_done += 1
        while self.iteration < cfg.iters_finetune:
            it = self.iteration
            rng = iteration_rng(cfg.seed, self.FINETUNE, it)
            hr, guide = make_batch(cfg, self.dataset, rng)
            lr = lr_at(sched, it)
            # discriminator step on the current model's reconstructions, then generator step
            fake = self._fake_batch(hr, rng)
            d_loss = self._disc_step(hr, fake, lr)
            with no_grad():
                peak = float(np.max(np.abs(self.disc(fake).data)))
            if peak > DISC_COLLAPSE_LOGIT:
                logger.warning("discriminator logit magnitude %.1f at finetune iteration %d", peak, it)
            self.model.zero_grad()
            br = total_loss_finetune(hr, guide, self.model, self.disc, weights, rng=rng)
            total = br.total.item()
            if not math.isfinite(total):
                raise TrainingAborted(f"non-finite finetune loss at iteration {it}")
            backward(br.total)
            adam_step(params, self.opt, lr)
            row = {"iter": cfg.iters_pretrain + it, "lr": lr, "loss_total": total,
                   "loss_recon": br.components["recon"], "loss_guide": br.components["guide"],
                   "loss_distr": br.components["distr"], "loss_disc": d_loss}
            self._record(row)
            result.history.append(row)
            self.iteration += 1
            self._maybe_checkpoint(self.iteration)
        self.stage = "done"
        result.iterations = len(result.history)
        return result

    def run(self) -> list[dict]:
        if self.stage == "pretrain":
            self.pretrain()
        if self.stage == "finetune" and (self.config.iters_finetune or self.config.disc_warmup):
            self.finetune()
        self.stage = "done"
        return self.history

    # checkpoint glue -----------------------------------------------------

    def save(self, path) -> None:
        extra = {"stage": self.stage, "iteration": self.iteration, "warmup_done": self.warmup_done,
                 "config": self.config.to_dict()}
        save_checkpoint(self.model, self.opt, path, disc=self.disc, opt_disc=self.opt_disc, extra=extra)

    @classmethod
    def resume(cls, path, config: TrainConfig | None = None,
               dataset: PatchDataset | None = None) -> "Trainer":
        ckpt = load_checkpoint(path)
        config = config or TrainConfig.from_dict(ckpt.extra["config"])
        trainer = cls(config, dataset, model=ckpt.model)
        trainer.opt = ckpt.opt
        if ckpt.disc is not None:
            trainer.disc, trainer.opt_disc = ckpt.disc, ckpt.opt_disc
        trainer.stage = ckpt.extra.get("stage", "pretrain")
        trainer.iteration = ckpt.extra.get("iteration", 0)
        trainer.warmup_done = ckpt.extra.get("warmup_done", 0)
        return trainer


def pretrain_stage(config: TrainConfig, dataset: PatchDataset, model: IRNModel) -> tuple[IRNModel, StageResult]:
    trainer = Trainer(config, dataset, model)
    return trainer.model, trainer.pretrain()


def finetune_stage(config: TrainConfig, dataset: PatchDataset, model: IRNModel,
                   disc: Discriminator | None = None) -> tuple[IRNModel, Discriminator, StageResult]:
    trainer = Trainer(config, dataset, model)
    trainer.stage = "finetune"
    if disc is not None:
        trainer.disc, trainer.opt_disc = disc, AdamState(disc.parameters())
    result = trainer.finetune()
    return trainer.model, trainer.disc, result


def write_log_csv(rows: list[dict], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(LOG_COLUMNS)
        for row in rows:
            writer.writerow([row["iter"]] + [_fmt(row[c]) for c in LOG_COLUMNS[1:]])


def read_log_csv(path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [{k: (int(v) if k == "iter" else float(v) if v else math.nan) for k, v in row.items()}
                for row in csv.DictReader(fh)]


def _fmt(v: float) -> str:
    return "" if v is None or (isinstance(v, float) and math.isnan(v)) else repr(float(v))


# ----------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    model: IRNModel
    opt: AdamState
    disc: Discriminator | None = None
    opt_disc: AdamState | None = None
    extra: dict = field(default_factory=dict)


def _module_entries(prefix: str, module: Module, opt: AdamState | None):
    named = list(module.named_parameters())
    for name, p in named:
        yield f"{prefix}/{name}", p.data
    if opt is not None:
        for (name, _), m, v in zip(named, opt.m, opt.v):
            yield f"{prefix}.adam.m/{name}", m
            yield f"{prefix}.adam.v/{name}", v


def save_checkpoint(model: IRNModel, opt: AdamState, path, disc: Discriminator | None = None,
                    opt_disc: AdamState | None = None, extra: dict | None = None) -> None:
    """Write ``IRNCKPT1`` + u64 header length + JSON header + raw little-endian float32."""
    entries = list(_module_entries("model", model, opt))
    header = {"format_version": FORMAT_VERSION, "arch": model.architecture(),
              "adam": {"model": _adam_meta(opt)}, "extra": extra or {}}
    if disc is not None:
        entries += list(_module_entries("disc", disc, opt_disc))
        header["disc_arch"] = {"image_size": disc.image_size,
                               "width_mult": _disc_width(disc)}
        header["adam"]["disc"] = _adam_meta(opt_disc)
    tensors, offset, blobs = [], 0, []
    for name, arr in entries:
        blob = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        tensors.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(blob)})
        offset += len(blob)
        blobs.append(blob)
    header["tensors"] = tensors
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(head)))
        fh.write(head)
        for blob in blobs:
            fh.write(blob)
    os.replace(tmp, path)


def _adam_meta(opt: AdamState | None) -> dict | None:
    if opt is None:
        return None
    return {"t": opt.t, "beta1": opt.beta1, "beta2": opt.beta2, "eps": opt.eps}


def _disc_width(disc: Discriminator) -> float:
    return disc.convs[0].weight.shape[0] / Discriminator.BASE_WIDTHS[0]


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    """Parse a checkpoint into its header and a name -> array map."""
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic bytes)")
    if len(raw) < 16:
        raise CheckpointError(f"{path}: truncated checkpoint header")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    if 16 + hlen > len(raw):
        raise CheckpointError(f"{path}: truncated checkpoint header")
    try:
        header = json.loads(raw[16:16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt checkpoint header ({exc})") from None
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: checkpoint format version {header.get('format_version')} "
                              f"is not supported (expected {FORMAT_VERSION})")
    base = 16 + hlen
    arrays = {}
    for t in header["tensors"]:
        start = base + t["offset"]
        end = start + t["nbytes"]
        if end > len(raw):
            raise CheckpointError(f"{path}: truncated data for tensor {t['name']}")
        arrays[t["name"]] = np.frombuffer(raw[start:end], dtype="<f4").reshape(t["shape"]).astype(np.float32)
    return header, arrays


def _restore(prefix: str, module: Module, arrays: dict, meta: dict | None, path) -> AdamState:
    named = list(module.named_parameters())
    for name, p in named:
        key = f"{prefix}/{name}"
        if key not in arrays:
            raise CheckpointError(f"{path}: parameter {name} {p.shape} missing from checkpoint")
        if arrays[key].shape != p.shape:
            raise CheckpointError(f"{path}: parameter {name} has shape {arrays[key].shape} in checkpoint, "
                                  f"model expects {p.shape}")
    stored = sorted(k.split("/", 1)[1] for k in arrays if k.startswith(prefix + "/"))
    own = {name for name, _ in named}
    for name in stored:
        if name not in own:
            raise CheckpointError(f"{path}: checkpoint parameter {name} does not exist in the model")
    for name, p in named:
        p.data = arrays[f"{prefix}/{name}"].astype(p.dtype)
        p.grad = np.zeros_like(p.data)
    params = [p for _, p in named]
    meta = meta or {}
    opt = AdamState(params, meta.get("beta1", 0.9), meta.get("beta2", 0.999), meta.get("eps", 1e-8))
    opt.t = int(meta.get("t", 0))
    for i, (name, p) in enumerate(named):
        m = arrays.get(f"{prefix}.adam.m/{name}")
        v = arrays.get(f"{prefix}.adam.v/{name}")
        if m is not None:
            opt.m[i] = m.astype(p.dtype)
            opt.v[i] = v.astype(p.dtype)
    return opt


def load_checkpoint(path, model: IRNModel | None = None) -> Checkpoint:
    header, arrays = read_checkpoint(path)
    if model is None:
        arch = header["arch"]
        model = IRNModel(arch["scale"], arch["blocks_per_module"], arch["growth"], arch["clamp"])
    opt = _restore("model", model, arrays, header["adam"].get("model"), path)
    disc = opt_disc = None
    if "disc_arch" in header:
        da = header["disc_arch"]
        disc = Discriminator(da["image_size"], width_mult=da["width_mult"])
        opt_disc = _restore("disc", disc, arrays, header["adam"].get("disc"), path)
    return Checkpoint(model, opt, disc, opt_disc, header.get("extra", {}))
