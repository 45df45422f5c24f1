"""
Command Line Module
Subcommands synth, superres, align, train, gradcheck and eval

Exit codes: 0 success, 1 validation error (bad config, arguments or input
files), 2 runtime failure.
"""

import argparse
import logging
import os
import sys
import traceback
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from . import autodiff as ad
from . import numerics as K
from .alignment import flexible_match, match_accuracy, match_displacement
from .config import RunConfig, load_config
from .data_io import (NoiseSpec, SynthPair, SynthPairSpec, apply_noise, load_checkpoint, load_image,
                      make_lr, save_checkpoint, save_image, save_tensor, synth_pair)
from .errors import ConfigError, ContractError, DimensionError, FormatError
from .extractor import build_inputs, extract_pyramid
from .fusion import FASRModel
from .losses import l1_loss, psnr, residual_map, ssim_index, total_loss
from .numerics import GridMeta
from .report_generator import RunReportGenerator
from .training import create_session, predict

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_RUNTIME = 2

LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"
VALIDATION_ERRORS = (ConfigError, ContractError, DimensionError, FormatError, FileNotFoundError)
SCENARIOS = ("aligned", "scale-mismatch")
MISMATCH_RATIO = 2.0
MISMATCH_CLUTTER = 0.1


class UsageError(ContractError):
    """Bad command line"""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="key=value run configuration file")
    common.add_argument("--seed", type=int, help="seed for every random choice")
    common.add_argument("--out", type=Path, help="output directory")
    common.add_argument("--log-level", default=os.getenv("FASR_LOG_LEVEL", "INFO"))

    parser = _Parser(prog="fasr", description="Reference-guided MRI super-resolution at desk scale")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("synth", parents=[common], help="render a synthetic T2/PD pair")
    p.add_argument("--scenario", choices=SCENARIOS, default="aligned")

    p = sub.add_parser("superres", parents=[common], help="super-resolve an LR image with a reference")
    p.add_argument("--lr", type=Path, required=True)
    p.add_argument("--ref", type=Path, required=True)
    p.add_argument("--checkpoint", type=Path)

    p = sub.add_parser("align", parents=[common], help="score CA, S-A, M-A and FA patch matching")
    p.add_argument("--scenario", choices=SCENARIOS, default="scale-mismatch")
    p.add_argument("--scenes", type=int, default=50)

    p = sub.add_parser("train", parents=[common], help="train on one synthetic pair")
    p.add_argument("--steps", type=int)
    p.add_argument("--scenario", choices=SCENARIOS, default="aligned")

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of every kernel")
    p.add_argument("--samples", type=int, default=50)

    p = sub.add_parser("eval", parents=[common], help="PSNR/SSIM of model and bicubic baseline")
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--pairs", type=int, default=4)
    p.add_argument("--scenario", choices=SCENARIOS, default="aligned")
    p.add_argument("--noise", type=str, default=None,
                   help="motion:length=L,angle=A or rf:frequency=F,amplitude=A[,band=lo-hi]")
    return parser


# --------------------------------------------------------------------------
# Shared helpers
# --------------------------------------------------------------------------

def resolve_config(args: argparse.Namespace) -> RunConfig:
    """settings.json < --config file < command-line flags"""
    cfg = load_config(args.config)
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.out is not None:
        changes["output_dir"] = str(args.out)
    if getattr(args, "steps", None) is not None:
        changes["steps"] = args.steps
    return cfg.replace(**changes) if changes else cfg


def scenario_spec(cfg: RunConfig, scenario: str, seed: int, noise: Optional[NoiseSpec] = None) -> SynthPairSpec:
    """Phantom spec; scale-mismatch shows the reference anatomy at half size over clutter"""
    ratio, clutter = cfg.scale_ratio, cfg.clutter
    if scenario == "scale-mismatch":
        ratio, clutter = MISMATCH_RATIO, max(clutter, MISMATCH_CLUTTER)
    return SynthPairSpec(seed=seed, size=cfg.image_size, t2_scale=1.0, pd_scale=1.0 / ratio,
                         texture_freq=cfg.texture_freq, clutter=clutter, noise=noise)


def make_pair(cfg: RunConfig, scenario: str, seed: int) -> Tuple[SynthPair, np.ndarray]:
    pair = synth_pair(scenario_spec(cfg, scenario, seed))
    return pair, make_lr(pair.t2, cfg.scale)


def build_model(cfg: RunConfig, checkpoint: Optional[Path] = None) -> FASRModel:
    model = FASRModel.init(cfg.model_config(), cfg.seed)
    if checkpoint is not None:
        model.load_state_dict(load_checkpoint(checkpoint))
    return model


def _as_display(x: np.ndarray) -> np.ndarray:
    """Map a non-negative map to [-1, 1] for graymap export"""
    peak = float(np.max(x))
    return (x / peak if peak > 0 else x) * 2.0 - 1.0


def _image_metrics(image_id: str, sr: np.ndarray, hr: np.ndarray, cfg: RunConfig) -> Dict[str, object]:
    report = total_loss(sr, hr, cfg.loss_weights())
    return {"image_id": image_id, "psnr_db": psnr(sr, hr), "ssim": ssim_index(sr, hr),
            "l1": report.l1, "fr": report.fr, "total": report.total}


# --------------------------------------------------------------------------
# Subcommands
# --------------------------------------------------------------------------

def cmd_synth(args, cfg: RunConfig, reports: RunReportGenerator) -> int:
    pair, t2_lr = make_pair(cfg, args.scenario, cfg.seed)
    save_image(pair.t2, reports.track(reports.path("t2_hr.pgm")))
    save_image(t2_lr, reports.track(reports.path("t2_lr.pgm")))
    save_image(pair.pd, reports.track(reports.path("pd.pgm")))
    save_image(pair.foreground[None] * 2.0 - 1.0, reports.track(reports.path("foreground.pgm")))
    save_tensor(pair.correspondence.astype(np.float32), reports.track(reports.path("correspondence.ftns")))
    logger.info(f"Synthetic pair written to {reports.output_dir} (scenario {args.scenario})")
    return EXIT_OK


def cmd_superres(args, cfg: RunConfig, reports: RunReportGenerator) -> int:
    t2_lr = load_image(args.lr)
    ref = load_image(args.ref)
    model = build_model(cfg, args.checkpoint)
    sr = predict(model, t2_lr, ref)
    lr_up = build_inputs(t2_lr, ref, cfg.scale).lr_up
    save_image(sr, reports.track(reports.path("sr.pgm")))
    save_image(lr_up, reports.track(reports.path("bicubic.pgm")))
    return EXIT_OK


def cmd_align(args, cfg: RunConfig, reports: RunReportGenerator) -> int:
    if args.scenes < 1:
        raise UsageError("--scenes must be >= 1")
    model = build_model(cfg)
    params = model.alignment
    variants = {
        "ca": dict(sa_scales=(4,), ma_scales=()),
        "sa": dict(sa_scales=(1, 2, 4), ma_scales=()),
        "ma": dict(sa_scales=(), ma_scales=(1, 2, 4)),
        "fa": dict(sa_scales=(1, 2, 4), ma_scales=(1, 2, 4)),
    }
    rows = []
    for scene in range(args.scenes):
        pair, t2_lr = make_pair(cfg, args.scenario, cfg.seed * 1000 + scene)
        inputs = build_inputs(t2_lr, pair.pd, cfg.scale)
        lr = extract_pyramid(inputs.lr_up, model.extractor).detached()
        refdd = extract_pyramid(inputs.refdd, model.extractor).detached()
        query_grid = GridMeta.for_image(cfg.channels[0], cfg.image_size, cfg.image_size,
                                        cfg.patch, cfg.stride, cfg.pad)
        row = {"scene": scene}
        for name, scales in variants.items():
            match = flexible_match(lr, refdd, params, **scales)
            row[name] = match_accuracy(match, query_grid, pair.correspondence, pair.foreground, cfg.patch)
            if scene == 0:
                save_image(_as_display(match_displacement(match, query_grid)),
                           reports.track(reports.path(f"match_map_{name}.pgm")))
        logger.info(f"scene {scene}: " + " ".join(f"{k}={row[k]:.3f}" for k in variants))
        rows.append(row)

    table = pd.DataFrame(rows, columns=["scene"] + list(variants))
    reports.write_table(table, "align.csv")
    summary = {f"mean_{k}": float(table[k].mean()) for k in variants}
    summary["fa_at_least_ca"] = float((table["fa"] >= table["ca"]).mean())
    summary["scenario"] = args.scenario
    summary["scenes"] = args.scenes
    reports.write_text_report("alignment accuracy", summary, {"per scene": table})
    reports.write_json_report("align", summary)
    return EXIT_OK


def cmd_train(args, cfg: RunConfig, reports: RunReportGenerator) -> int:
    pair, t2_lr = make_pair(cfg, args.scenario, cfg.seed)
    model = build_model(cfg)
    session = create_session(model, cfg.loss_weights(), cfg.optimizer_state(),
                             cfg.realign_every, cfg.log_every)
    history = session.run(t2_lr, pair.pd, pair.t2, cfg.steps)

    sr = predict(model, t2_lr, pair.pd)
    lr_up = build_inputs(t2_lr, pair.pd, cfg.scale).lr_up
    save_checkpoint(model.state_dict(), reports.track(reports.path("model.ftns")))
    reports.write_table(history, "loss_history.csv")
    reports.plot_loss_curve(history)
    save_image(sr, reports.track(reports.path("sr.pgm")))

    summary = {**session.get_progress(), "psnr_sr_db": psnr(sr, pair.t2), "psnr_bicubic_db": psnr(lr_up, pair.t2)}
    reports.write_text_report("training", summary)
    reports.write_json_report("train", summary)
    return EXIT_OK


def gradcheck_suite(seed: int, samples: int = 50) -> pd.DataFrame:
    """
    Finite-difference check of every differentiable kernel and loss term

    SSIM is checked on 8x8 images, where the window shrinks to 7 taps. With
    11-tap windows on 16x16 images the corner pixels sit under the Gaussian
    tail, their analytic gradients fall to the size of the central
    difference error at h=1e-5, and some seeds pass only 98% of samples.
    """
    from . import losses

    rng = np.random.default_rng(seed)

    def rand(*shape):
        return rng.standard_normal(shape)

    x_img = rand(2, 6, 6)
    w_conv = rand(3, 2, 3, 3)
    target = rand(3, 6, 6)
    x_rows = rand(5, 4)
    w_lin = rand(3, 4)
    grid = K.GridMeta.for_image(2, 5, 5, 3, 1, 1)
    img_a = np.clip(rand(1, 16, 16) * 0.4, -0.9, 0.9)
    img_b = np.clip(rand(1, 16, 16) * 0.4, -0.9, 0.9)
    small_a = np.clip(rand(1, 8, 8) * 0.4, -0.9, 0.9)
    small_b = np.clip(rand(1, 8, 8) * 0.4, -0.9, 0.9)
    weights_a = rand(2, 5, 5)
    weights_b = rand(25, 18)
    weights_c = rand(2, 8, 8)
    proj_lin = rand(5, 3)
    proj_soft = rand(5, 4)

    checks: Dict[str, Tuple[Callable[[ad.Node], ad.Node], np.ndarray]] = {
        "conv2d": (lambda x: ad.sum_all(ad.mul(ad.conv2d(x, w_conv, None, 1, 1), target)), x_img),
        "conv2d_weight": (lambda w: ad.sum_all(ad.mul(ad.conv2d(x_img, w, None, 1, 1), target)), w_conv),
        "linear": (lambda x: ad.sum_all(ad.mul(ad.linear(x, w_lin), proj_lin)), x_rows),
        "softmax_rows": (lambda m: ad.sum_all(ad.mul(ad.softmax_rows(m), proj_soft)), x_rows),
        "unfold": (lambda x: ad.sum_all(ad.mul(ad.unfold(x, 3, 1, 1)[0], weights_b)), rand(2, 5, 5)),
        "fold": (lambda r: ad.sum_all(ad.mul(ad.fold(r, grid), weights_a)), rand(25, 18)),
        "resize_bilinear": (lambda x: ad.sum_all(ad.mul(ad.resize(x, 8, 8, "bilinear"), weights_c)), rand(2, 4, 4)),
        "fft2_real": (lambda x: ad.sum_all(ad.mul(ad.fft2(x)[0], weights_c)), rand(2, 8, 8)),
        "fft2_imag": (lambda x: ad.sum_all(ad.mul(ad.fft2(x)[1], weights_c)), rand(2, 8, 8)),
        "l1_loss": (lambda x: losses.l1_term(x, img_b), img_a),
        "ssim_loss": (lambda x: losses.ssim_loss_term(x, small_b), small_a),
        "fr_loss": (lambda x: losses.fr_term(x, img_b), img_a),
    }
    rows = []
    for name, (f, point) in checks.items():
        report = ad.gradcheck(f, point, h=1e-5, tol=1e-4, samples=samples, seed=seed)
        rows.append({"kernel": name, "max_rel_err": report.max_rel_err,
                     "pass_fraction": report.pass_fraction, "passed": report.passed})
    return pd.DataFrame(rows, columns=["kernel", "max_rel_err", "pass_fraction", "passed"])


def cmd_gradcheck(args, cfg: RunConfig, reports: RunReportGenerator) -> int:
    table = gradcheck_suite(cfg.seed, args.samples)
    print(table.to_string(index=False))
    reports.write_table(table, "gradcheck.csv")
    failed = table.loc[~table["passed"], "kernel"].tolist()
    if failed:
        logger.error(f"gradcheck failed for: {', '.join(failed)}")
        return EXIT_RUNTIME
    return EXIT_OK


def cmd_eval(args, cfg: RunConfig, reports: RunReportGenerator) -> int:
    if args.pairs < 1:
        raise UsageError("--pairs must be >= 1")
    try:
        noise = NoiseSpec.parse(args.noise)
    except ValueError as e:
        raise UsageError(f"invalid --noise: {e}")
    model = build_model(cfg, args.checkpoint)

    model_rows, baseline_rows = [], []
    for i in range(args.pairs):
        image_id = f"pair{i:03d}"
        pair, t2_lr = make_pair(cfg, args.scenario, cfg.seed * 1000 + i)
        t2_lr = apply_noise(t2_lr, noise)
        ref = apply_noise(pair.pd, noise)
        sr = predict(model, t2_lr, ref)
        lr_up = build_inputs(t2_lr, ref, cfg.scale).lr_up
        model_rows.append(_image_metrics(image_id, sr, pair.t2, cfg))
        baseline_rows.append(_image_metrics(image_id, lr_up, pair.t2, cfg))
        save_image(_as_display(residual_map(sr, pair.t2)), reports.track(reports.path(f"residual_{image_id}.pgm")))
        save_image(sr, reports.track(reports.path(f"sr_{image_id}.pgm")))

    columns = ["image_id", "psnr_db", "ssim", "l1", "fr", "total"]
    metrics = pd.DataFrame(model_rows, columns=columns)
    baseline = pd.DataFrame(baseline_rows, columns=columns)
    reports.write_table(metrics, "metrics.csv")
    reports.write_table(baseline, "baseline.csv")
    summary = {
        "pairs": args.pairs,
        "noise": args.noise or "none",
        "mean_psnr_db": float(metrics["psnr_db"].mean()),
        "mean_ssim": float(metrics["ssim"].mean()),
        "mean_psnr_bicubic_db": float(baseline["psnr_db"].mean()),
        "mean_ssim_bicubic": float(baseline["ssim"].mean()),
    }
    reports.write_text_report("evaluation", summary, {"model": metrics, "bicubic": baseline})
    reports.write_json_report("eval", summary, {"model": metrics, "bicubic": baseline})
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth,
    "superres": cmd_superres,
    "align": cmd_align,
    "train": cmd_train,
    "gradcheck": cmd_gradcheck,
    "eval": cmd_eval,
}


# --------------------------------------------------------------------------
# Entry point
# --------------------------------------------------------------------------

def _attach_run_log(output_dir: Path, level: str) -> List[logging.Handler]:
    output_dir.mkdir(parents=True, exist_ok=True)
    formatter = logging.Formatter(LOG_FORMAT)
    handlers = [logging.FileHandler(output_dir / "run.log", mode="w", encoding="utf-8"), logging.StreamHandler()]
    root = logging.getLogger()
    root.setLevel(getattr(logging, str(level).upper(), logging.INFO))
    for handler in handlers:
        handler.setFormatter(formatter)
        root.addHandler(handler)
    return handlers


def _detach_run_log(handlers: List[logging.Handler]):
    root = logging.getLogger()
    for handler in handlers:
        root.removeHandler(handler)
        handler.close()


def run_command(argv: Optional[Sequence[str]] = None) -> int:
    """
    Parse argv, run one subcommand and map failures to exit codes

    Args:
        argv: Arguments without the program name (sys.argv[1:] when None)

    Returns:
        0 on success, 1 on validation error, 2 on runtime failure
    """
    parser = build_parser()
    try:
        args = parser.parse_args(list(sys.argv[1:] if argv is None else argv))
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except SystemExit as e:
        return EXIT_OK if e.code in (0, None) else EXIT_VALIDATION

    try:
        cfg = resolve_config(args)
    except VALIDATION_ERRORS as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VALIDATION

    output_dir = Path(cfg.output_dir)
    handlers = _attach_run_log(output_dir, args.log_level)
    try:
        logger.info(f"Running '{args.command}' into {output_dir}")
        cfg.echo()
        reports = RunReportGenerator(output_dir)
        code = COMMANDS[args.command](args, cfg, reports)
        reports.write_manifest({"command": args.command, **cfg.as_dict()})
        return code
    except VALIDATION_ERRORS as e:
        logger.error(f"Validation error: {e}")
        return EXIT_VALIDATION
    except Exception as e:
        logger.error(f"Run failed: {e}")
        logger.error(traceback.format_exc())
        return EXIT_RUNTIME
    finally:
        _detach_run_log(handlers)
