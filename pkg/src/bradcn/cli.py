"""Command-line front end.

Exit codes: 0 success, 1 usage or config error, 2 data/checkpoint error,
3 any other runtime failure. Diagnostics go to stderr; results go to files.
"""
from __future__ import annotations

import argparse
import logging
import shlex
import sys
import time
from pathlib import Path

from .core import CheckpointError, ConfigError, DataError, ModelConfig, PredictorError, ShapeError
from .data import (load_manifest, load_paired_corpus, load_rgbd_corpus, make_split, paper_split, read_image,
                   save_manifest, validation_ids, write_image, write_synth_corpus)
from .depth_net import SubprocessDepthPredictor
from .hybrid import HybridMode
from .pipeline import (LossLog, adcn_pretrain_plan, desk_adcn_plan, desk_hybrid_plans, evaluate, hybrid_plans,
                       load_checkpoint, model_from_checkpoint, pretrain_adcn, run_ablation, save_checkpoint,
                       train_hybrid)

log = logging.getLogger("bradcn")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_RUNTIME = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _size(text: str) -> tuple[int, int]:
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"size must look like HxW, got {text!r}")
    return h, w


def _common(p, data=True):
    p.add_argument("--config", help="flat JSON ModelConfig file")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config key (repeatable)")
    p.add_argument("--seed", type=int, default=0)
    if data:
        p.add_argument("--data", required=True, help="corpus root directory")


def _mode(p):
    p.add_argument("--mode", choices=[m.value for m in HybridMode], default=HybridMode.Full.value)


def _depth(p):
    p.add_argument("--depth-cmd", help="external depth predictor command, called as CMD in.png out.png")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="bradcn", description="Depth-aware bokeh rendering: data, training, evaluation.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="verb", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="write a procedural corpus (both paired and RGB-D layouts)")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--size", type=_size, default=(96, 64), help="HxW, default 96x64")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("prepare", help="write train/test split manifests")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="manifest directory")
    p.add_argument("--kind", choices=["paired", "rgbd"], default="paired")
    p.add_argument("--train-count", type=int, help="default: the published split size for --kind")
    p.add_argument("--test-count", type=int)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("pretrain-adcn", help="pretrain the depth calibration net on an RGB-D corpus")
    _common(p)
    _depth(p)
    p.add_argument("--out", default="adcn.ckpt", help="checkpoint path")
    p.add_argument("--steps", type=int, help="step budget at --size; omit for the full-length schedule")
    p.add_argument("--size", type=_size, default=(96, 64))
    p.add_argument("--lr", type=float)
    p.add_argument("--fit-depth-steps", type=int, default=0,
                   help="first fit the built-in depth net on the RGB-D ground truth")

    p = sub.add_parser("train", help="hybrid training (L1 stage, then L1 + MS-SSIM stage)")
    _common(p)
    _mode(p)
    _depth(p)
    p.add_argument("--ckpt", help="pretrained ADCN checkpoint")
    p.add_argument("--resume", help="interrupted hybrid checkpoint to continue")
    p.add_argument("--out", default="hybrid.ckpt")
    p.add_argument("--steps", type=int, help="L1-stage step budget at --size; omit for the full schedule")
    p.add_argument("--combined-steps", type=int, default=0, help="L1 + MS-SSIM stage budget with --steps")
    p.add_argument("--size", type=_size, default=(96, 64))
    p.add_argument("--lr", type=float)
    p.add_argument("--manifest", help="split directory; train on its train ids only")

    p = sub.add_parser("eval", help="metrics of a trained model on a paired corpus")
    _common(p)
    _mode(p)
    _depth(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", default="metrics.csv")
    p.add_argument("--manifest", help="split directory; evaluate its test ids only")

    p = sub.add_parser("ablate", help="train RenderOnly / RenderPlusDepth / Full identically and compare")
    _common(p)
    _depth(p)
    p.add_argument("--ckpt", help="pretrained ADCN checkpoint")
    p.add_argument("--out", default="ablation.csv")
    p.add_argument("--steps", type=int, default=100)
    p.add_argument("--size", type=_size, default=(96, 64))
    p.add_argument("--manifest", help="split directory; default holds out 20%% of the corpus")

    p = sub.add_parser("render", help="render one image at twice its input resolution")
    _mode(p)
    _depth(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("image")
    return parser


def _config(args) -> ModelConfig:
    cfg = ModelConfig.load(args.config) if args.config else ModelConfig()
    cfg = cfg.with_overrides(args.overrides)
    if args.overrides:
        log.info("config overrides: %s", " ".join(args.overrides))
    return cfg


def _predictor(args):
    return SubprocessDepthPredictor(shlex.split(args.depth_cmd)) if args.depth_cmd else None


def _checkpoint(path, config=None):
    if not Path(path).is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    return load_checkpoint(path, config)


def _loss_log(out) -> LossLog:
    path = Path(str(out) + ".losses.csv")
    if path.exists():
        path.unlink()
    return LossLog(path)


def cmd_synth(args):
    ids = write_synth_corpus(args.out, args.n, args.size, args.seed)
    log.info("wrote %d scenes to %s", len(ids), args.out)


def cmd_prepare(args):
    corpus = (load_paired_corpus if args.kind == "paired" else load_rgbd_corpus)(args.data)
    if args.train_count is None and args.test_count is None:
        m = paper_split(corpus, "ebb" if args.kind == "paired" else "sunrgbd", args.seed)
    else:
        if args.train_count is None or args.test_count is None:
            raise UsageError("--train-count and --test-count go together")
        m = make_split(corpus, args.train_count, args.test_count, args.seed)
    save_manifest(m, args.out)
    log.info("manifest: %d train / %d test ids -> %s", len(m.train_ids), len(m.test_ids), args.out)


def cmd_pretrain(args):
    cfg = _config(args)
    corpus = load_rgbd_corpus(args.data)
    extra = {} if args.lr is None else {"lr": args.lr}
    plan = desk_adcn_plan(args.steps, args.size, **extra) if args.steps else adcn_pretrain_plan(**extra)
    t = time.perf_counter()
    ck = pretrain_adcn(plan, corpus, _predictor(args), cfg, seed=args.seed, loss_log=_loss_log(args.out),
                       fit_predictor_steps=args.fit_depth_steps)
    save_checkpoint(ck, args.out)
    log.info("ADCN checkpoint %s (%.1fs)", args.out, time.perf_counter() - t)


def _paired_subset(args, which):
    corpus = load_paired_corpus(args.data)
    if args.manifest:
        m = load_manifest(args.manifest, corpus)
        return corpus.subset(m.train_ids if which == "train" else m.test_ids)
    return corpus


def cmd_train(args):
    cfg = _config(args)
    corpus = _paired_subset(args, "train")
    extra = {} if args.lr is None else {"lr": args.lr}
    if args.steps:
        plans = desk_hybrid_plans(args.steps, args.combined_steps, args.size, **extra)
    else:
        plans = hybrid_plans(**extra)
    adcn = _checkpoint(args.ckpt) if args.ckpt else None
    resume = _checkpoint(args.resume) if args.resume else None
    if adcn is None and resume is None:
        log.warning("no ADCN checkpoint given; the calibration net stays at its initialization")
    t = time.perf_counter()
    ck = train_hybrid(plans, corpus, adcn, cfg=None if (adcn or resume) else cfg, predictor=_predictor(args),
                      mode=HybridMode(args.mode), seed=args.seed, loss_log=_loss_log(args.out), resume=resume)
    save_checkpoint(ck, args.out)
    log.info("hybrid checkpoint %s (%.1fs)", args.out, time.perf_counter() - t)


def cmd_eval(args):
    corpus = _paired_subset(args, "test")
    model = model_from_checkpoint(_checkpoint(args.ckpt), _predictor(args))
    _, mean = evaluate(model, corpus, HybridMode(args.mode), csv_path=args.out)
    log.info("mean over %d images: psnr %.3f dB, ssim %.4f, ms-ssim %.4f -> %s",
             len(corpus), mean.psnr_db, mean.ssim, mean.ms_ssim, args.out)


def cmd_ablate(args):
    cfg = _config(args)
    corpus = load_paired_corpus(args.data)
    if args.manifest:
        m = load_manifest(args.manifest, corpus)
        train_ids, test_ids = m.train_ids, m.test_ids
    else:
        train_ids, test_ids = validation_ids(corpus.ids, args.seed, 0.2)
        if not test_ids:
            raise DataError("ablation needs at least two samples")
    adcn = _checkpoint(args.ckpt) if args.ckpt else None
    plans = desk_hybrid_plans(args.steps, 0, args.size)
    table = run_ablation(plans, corpus.subset(train_ids), corpus.subset(test_ids), adcn,
                         cfg=None if adcn else cfg, predictor=_predictor(args), seed=args.seed, csv_path=args.out)
    for name, r in table.items():
        log.info("%-16s psnr %.3f  ssim %.4f  ms-ssim %.4f", name, r.psnr_db, r.ssim, r.ms_ssim)


def cmd_render(args):
    model = model_from_checkpoint(_checkpoint(args.ckpt), _predictor(args))
    img = read_image(args.image)
    t = time.perf_counter()
    out = model.infer_highres(img, HybridMode(args.mode))
    dt = time.perf_counter() - t
    write_image(args.out, out)
    print(f"{args.image}: {img.shape[-2]}x{img.shape[-1]} -> {out.shape[-2]}x{out.shape[-1]} in {dt:.3f}s",
          file=sys.stderr)


COMMANDS = {
    "synth": cmd_synth, "prepare": cmd_prepare, "pretrain-adcn": cmd_pretrain, "train": cmd_train,
    "eval": cmd_eval, "ablate": cmd_ablate, "render": cmd_render,
}


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if not exc.code else EXIT_USAGE
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, stream=sys.stderr,
                        format="%(levelname)s %(message)s")
    try:
        COMMANDS[args.verb](args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, CheckpointError, ShapeError, PredictorError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:
        log.debug("traceback", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def main():
    sys.exit(run())
