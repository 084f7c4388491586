"""``irn`` command line: train, downscale, upscale, roundtrip, eval, selfcheck.

Exit codes: 0 success, 1 usage or input error, 2 training aborted, 3 selfcheck failure.
"""
from __future__ import annotations

import argparse
import contextlib
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import checks
from .imaging import ImageIOError, bicubic_roundtrip, load_png, save_png, to_float
from .metrics import MetricConfig, evaluate_pair_set, format_db, psnr, ssim
from .pipeline import downscale_image, upscale_image
from .tensor import ShapeError
from .training import (
    CheckpointError,
    TrainConfig,
    Trainer,
    TrainingAborted,
    load_checkpoint,
    write_log_csv,
)

EXIT_OK, EXIT_USAGE, EXIT_ABORT, EXIT_SELFCHECK = 0, 1, 2, 3

log = logging.getLogger("irn")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _existing(path: str, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{what} not found: {path}")
    return p


def _load_model(path: str):
    try:
        return load_checkpoint(_existing(path, "checkpoint")).model
    except CheckpointError as exc:
        raise UsageError(str(exc)) from None


def _load_image(path: str) -> np.ndarray:
    try:
        return load_png(_existing(path, "input image"))
    except ImageIOError as exc:
        raise UsageError(str(exc)) from None


def _check_divisible(img: np.ndarray, scale: int, path: str) -> None:
    h, w = img.shape[:2]
    if h % scale or w % scale:
        raise UsageError(f"{path}: image size {w}x{h} must be divisible by the model scale {scale}")


def _same_file(a, b) -> bool:
    return Path(b).exists() and Path(a).resolve() == Path(b).resolve()


# ----------------------------------------------------------------------------
# commands


def cmd_train(args) -> int:
    cfg_path = _existing(args.config, "config file")
    try:
        config = TrainConfig.from_json(cfg_path)
    except (ValueError, TypeError, json.JSONDecodeError) as exc:
        raise UsageError(f"{cfg_path}: invalid config ({exc})") from None
    if args.seed is not None:
        config.seed = args.seed
    out = Path(args.out_dir or Path("runs") / cfg_path.stem)
    try:
        dataset = config.build_dataset()
    except (FileNotFoundError, ValueError) as exc:
        raise UsageError(str(exc)) from None
    if args.resume:
        try:
            trainer = Trainer.resume(_existing(args.resume, "checkpoint"), config, dataset)
        except CheckpointError as exc:
            raise UsageError(str(exc)) from None
        log.info("resumed %s at stage %s, iteration %d", args.resume, trainer.stage, trainer.iteration)
    else:
        trainer = Trainer(config, dataset)
    out.mkdir(parents=True, exist_ok=True)
    log_path = out / "train_log.csv"

    def on_log(row):
        if row["iter"] % max(1, config.log_every * 50) == 0:
            log.info("iter %d  loss %.5f", row["iter"], row["loss_total"])

    def on_checkpoint(t: Trainer):
        t.save(out / "last.ckpt")
        write_log_csv(t.history, log_path)

    trainer.on_log = on_log
    trainer.on_checkpoint = on_checkpoint
    try:
        trainer.run()
    except (TrainingAborted, FloatingPointError) as exc:
        write_log_csv(trainer.history, log_path)
        print(f"training aborted: {exc}", file=sys.stderr)
        return EXIT_ABORT
    trainer.save(out / "model.ckpt")
    write_log_csv(trainer.history, log_path)
    if trainer.history and not args.no_figures:
        from .plots import plot_training_log

        plot_training_log(trainer.history, out / "train_log.png")
    print(f"checkpoint: {out / 'model.ckpt'}")
    print(f"log: {log_path}")
    return EXIT_OK


def cmd_downscale(args) -> int:
    model = _load_model(args.model)
    img = _load_image(args.input)
    _check_divisible(img, model.scale, args.input)
    if _same_file(args.input, args.out):
        raise UsageError("refusing to overwrite the input image")
    lr, z = downscale_image(model, img)
    save_png(lr, args.out)
    if args.latent:
        np.save(args.latent, z)
    print(f"{args.out}: {lr.shape[1]}x{lr.shape[0]}")
    return EXIT_OK


def cmd_upscale(args) -> int:
    model = _load_model(args.model)
    lr = _load_image(args.input)
    if args.alpha < 0:
        raise UsageError("--alpha must be non-negative")
    if _same_file(args.input, args.out):
        raise UsageError("refusing to overwrite the input image")
    z = None
    if args.latent:
        z = np.load(_existing(args.latent, "latent file")).astype(np.float32)
        expected = model.latent_shape((1, 3) + lr.shape[:2])
        if z.shape != expected:
            raise UsageError(f"latent shape {z.shape} does not match {expected} for this model and image")
    hr = upscale_image(model, lr, z=z, alpha=args.alpha, rng=np.random.default_rng(args.seed))
    save_png(hr, args.out)
    print(f"{args.out}: {hr.shape[1]}x{hr.shape[0]}")
    return EXIT_OK


def cmd_roundtrip(args) -> int:
    model = _load_model(args.model)
    img = _load_image(args.input)
    _check_divisible(img, model.scale, args.input)
    cfg = MetricConfig()
    lr, _ = downscale_image(model, img)
    hr = upscale_image(model, lr, alpha=args.alpha, rng=np.random.default_rng(args.seed))
    _, bic = bicubic_roundtrip(img, model.scale)
    ref = to_float(img)
    row = {"file": Path(args.input).name,
           "psnr_db": psnr(ref, to_float(hr), cfg), "ssim": ssim(ref, to_float(hr), cfg),
           "bicubic_psnr_db": psnr(ref, to_float(bic), cfg), "bicubic_ssim": ssim(ref, to_float(bic), cfg)}
    print(f"{row['file']}: psnr_db={format_db(row['psnr_db'])} ssim={row['ssim']:.4f} "
          f"bicubic_psnr_db={format_db(row['bicubic_psnr_db'])} bicubic_ssim={row['bicubic_ssim']:.4f}")
    if args.report:
        with open(args.report, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(list(row))
            writer.writerow([row["file"]] + [format_db(row[k]) if "psnr" in k else f"{row[k]:.6f}"
                                             for k in list(row)[1:]])
    if args.figure:
        from .plots import plot_difference

        plot_difference(img, {"model": hr, "bicubic": bic}, args.figure)
    return EXIT_OK


def cmd_eval(args) -> int:
    for d in (args.dir_a, args.dir_b):
        if not Path(d).is_dir():
            raise UsageError(f"directory not found: {d}")
    settings = {}
    if args.metric_config:
        with open(_existing(args.metric_config, "metric config"), encoding="utf-8") as fh:
            settings = json.load(fh)
    if args.channel:
        settings["channel"] = args.channel
    if args.border_crop is not None:
        settings["border_crop"] = args.border_crop
    try:
        cfg = MetricConfig.from_dict(settings)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid metric config ({exc})") from None
    report = evaluate_pair_set(args.dir_a, args.dir_b, cfg, args.glob)
    print(report.format_table())
    if args.csv:
        report.write_csv(args.csv)
    if args.figure and report.rows:
        from .plots import plot_eval_report

        plot_eval_report(report, args.figure)
    return EXIT_OK


def cmd_selfcheck(args) -> int:
    f32_tol = 1e-9 if args.strict_f32_tol else 1e-4
    results = checks.run_all(f32_tol=f32_tol, seed=args.seed or 0)
    for r in results:
        print(r.line())
    failed = sum(not r.passed for r in results)
    print(f"{len(results) - failed}/{len(results)} checks passed")
    return EXIT_OK if failed == 0 else EXIT_SELFCHECK


# ----------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="irn", description="Invertible image rescaling.")
    parser.add_argument("--seed", type=int, default=None, help="global seed for stochastic steps")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="pretrain then finetune from a JSON config")
    p.add_argument("--config", required=True)
    p.add_argument("--resume")
    p.add_argument("--out-dir", help="output directory (default runs/<config name>)")
    p.add_argument("--no-figures", action="store_true", help="skip the loss-curve figure")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("downscale", help="HR png -> LR png")
    p.add_argument("--model", required=True)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--latent", help="also dump z to this .npy file (debugging only)")
    p.set_defaults(func=cmd_downscale)

    p = sub.add_parser("upscale", help="LR png -> HR png with a sampled latent")
    p.add_argument("--model", required=True)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    p.add_argument("--alpha", type=float, default=1.0, help="latent standard deviation")
    p.add_argument("--latent", help="use a dumped z instead of sampling")
    p.set_defaults(func=cmd_upscale)

    p = sub.add_parser("roundtrip", help="downscale, upscale and report Y PSNR / SSIM")
    p.add_argument("--model", required=True)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    p.add_argument("--alpha", type=float, default=1.0)
    p.add_argument("--report", help="write the metrics as a one-row CSV")
    p.add_argument("--figure", help="write a difference-image figure (png)")
    p.set_defaults(func=cmd_roundtrip)

    p = sub.add_parser("eval", help="PSNR / SSIM between same-named PNGs in two directories")
    p.add_argument("--dir-a", required=True)
    p.add_argument("--dir-b", required=True)
    p.add_argument("--metric-config", help="JSON with channel, border_crop, window, sigma, k1, k2")
    p.add_argument("--channel", choices=["Y", "RGB"])
    p.add_argument("--border-crop", type=int)
    p.add_argument("--glob", default="*.png")
    p.add_argument("--csv", help="write per-file results as CSV")
    p.add_argument("--figure", help="write a per-file bar chart (png)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("selfcheck", help="run the built-in verification battery")
    p.add_argument("--strict-f32-tol", action="store_true",
                   help="demand 1e-9 float32 bijectivity (expected to fail)")
    p.set_defaults(func=cmd_selfcheck)
    return parser


def _thread_limit():
    n = os.environ.get("IRN_THREADS")
    if not n:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=int(n))


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if getattr(args, "seed", None) is None and args.command in ("upscale", "roundtrip"):
        args.seed = 0
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with _thread_limit():
            return args.func(args)
    except UsageError as exc:
        print(f"irn {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ShapeError, ImageIOError, ValueError) as exc:
        print(f"irn {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
