"""Two-stage training, evaluation / ablation harness and checkpoints."""
from __future__ import annotations

import csv
import dataclasses
import enum
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import torch
import torch.nn.functional as F

from .adcn import adcn_forward, build_error_target
from .core import CheckpointError, ConfigError, DataError, ModelConfig, seed_all
from .data import Corpus, validation_ids
from .depth_net import DepthPredictor, FallbackDepthNet, fit_depth_predictor, predict_depth
from .hybrid import BradcnModel, HybridMode, build_model
from .metrics import (LossKind, LossSpec, LpipsProvider, MetricReport, combined_loss, l1_loss, mean_report,
                      measure, write_csv)

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
PAPER_INPUT_HW = (768, 512)


class Stage(enum.Enum):
    AdcnPretrain = "adcn_pretrain"
    HybridL1 = "hybrid_l1"
    HybridCombined = "hybrid_combined"


@dataclass(frozen=True)
class TrainPlan:
    stage: Stage
    epochs: int
    lr: float
    batch_size: int = 1
    loss: LossSpec = LossSpec()
    trainable_sets: tuple[str, ...] = ()
    input_hw: tuple[int, int] = PAPER_INPUT_HW
    max_steps: Optional[int] = None  # caps the stage below epochs * steps_per_epoch
    val_fraction: float = 0.05
    grad_clip: Optional[float] = None  # max global grad norm, None disables

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if not self.lr > 0:
            raise ConfigError("lr must be > 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.grad_clip is not None and not self.grad_clip > 0:
            raise ConfigError("grad_clip must be > 0")
        if self.max_steps is not None and self.max_steps < 1:
            raise ConfigError("max_steps must be >= 1")
        object.__setattr__(self, "trainable_sets", tuple(self.trainable_sets))
        object.__setattr__(self, "input_hw", tuple(self.input_hw))

    def replace(self, **kw) -> "TrainPlan":
        return dataclasses.replace(self, **kw)


HYBRID_SETS = ("render", "depth_predictor", "depth_adapter", "error_adapter")


def adcn_pretrain_plan(**kw) -> TrainPlan:
    base = dict(stage=Stage.AdcnPretrain, epochs=50, lr=1e-4, batch_size=1,
                loss=LossSpec(LossKind.L1), trainable_sets=("adcn",))
    base.update(kw)
    return TrainPlan(**base)


def hybrid_plans(freeze_adcn: bool = True, alpha: float = 0.16, **kw) -> list[TrainPlan]:
    sets = HYBRID_SETS if freeze_adcn else HYBRID_SETS + ("adcn",)
    common = dict(epochs=30, lr=5e-5, batch_size=1, trainable_sets=sets)
    common.update(kw)
    return [
        TrainPlan(stage=Stage.HybridL1, loss=LossSpec(LossKind.L1), **common),
        TrainPlan(stage=Stage.HybridCombined, loss=LossSpec(LossKind.L1_plus_MS_SSIM, alpha), **common),
    ]


DESK_HW = (96, 64)


def desk_adcn_plan(steps: int, input_hw=DESK_HW, lr: float = 1e-3, **kw) -> TrainPlan:
    """Step-budgeted pretrain for CPU runs; epochs only bounds the budget."""
    return adcn_pretrain_plan(epochs=steps, max_steps=steps, lr=lr, input_hw=input_hw, **kw)


def desk_hybrid_plans(l1_steps: int, combined_steps: int = 0, input_hw=DESK_HW, lr: float = 1e-3,
                      grad_clip: float | None = 1.0, **kw) -> list[TrainPlan]:
    l1, comb = hybrid_plans(lr=lr, input_hw=input_hw, grad_clip=grad_clip, **kw)
    plans = []
    if l1_steps:
        plans.append(l1.replace(epochs=l1_steps, max_steps=l1_steps))
    if combined_steps:
        plans.append(comb.replace(epochs=combined_steps, max_steps=combined_steps))
    if not plans:
        raise ConfigError("desk plan needs at least one step")
    return plans


# ---- checkpoints -----------------------------------------------------------


@dataclass
class Checkpoint:
    config: ModelConfig
    parameters: dict
    optimizer_state: Optional[dict] = None
    plan_progress: dict = field(default_factory=dict)
    rng_state: Optional[torch.Tensor] = None
    predictor_kind: str = "fallback"
    schema_version: int = SCHEMA_VERSION

    def to_payload(self) -> dict:
        return {
            "schema_version": self.schema_version,
            "config": self.config.to_dict(),
            "parameters": self.parameters,
            "optimizer_state": self.optimizer_state,
            "plan_progress": self.plan_progress,
            "rng_state": self.rng_state,
            "predictor_kind": self.predictor_kind,
        }


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    torch.save(ckpt.to_payload(), tmp)
    os.replace(tmp, path)


def load_checkpoint(path, config: ModelConfig | None = None) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:
        raise CheckpointError(f"corrupt checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or "schema_version" not in payload:
        raise CheckpointError(f"{path} is not a checkpoint")
    if payload["schema_version"] != SCHEMA_VERSION:
        raise CheckpointError(
            f"checkpoint schema_version {payload['schema_version']} != supported {SCHEMA_VERSION}")
    try:
        cfg = ModelConfig.from_dict(payload["config"])
    except (ConfigError, TypeError) as exc:
        raise CheckpointError(f"bad config in checkpoint: {exc}") from exc
    if config is not None and config != cfg:
        raise CheckpointError("checkpoint config does not match the requested config")
    return Checkpoint(cfg, payload["parameters"], payload["optimizer_state"], payload["plan_progress"],
                      payload["rng_state"], payload["predictor_kind"], payload["schema_version"])


def checkpoint_model(model: BradcnModel, **kw) -> Checkpoint:
    kind = "fallback" if model.external_predictor is None else "external"
    params = {k: v.detach().clone() for k, v in model.state_dict().items()}
    return Checkpoint(model.cfg, params, predictor_kind=kind, rng_state=torch.get_rng_state(), **kw)


def model_from_checkpoint(ckpt: Checkpoint, predictor: DepthPredictor | None = None) -> BradcnModel:
    if ckpt.predictor_kind == "external" and predictor is None:
        raise CheckpointError("checkpoint was trained with an external depth predictor; supply one")
    model = BradcnModel(ckpt.config, predictor if ckpt.predictor_kind == "external" else None)
    try:
        model.load_state_dict(ckpt.parameters)
    except RuntimeError as exc:
        raise CheckpointError(f"checkpoint parameters do not fit the model: {exc}") from exc
    return model


# ---- loss log ----------------------------------------------------------------


class LossLog:
    """Rows of (stage, epoch, step, loss_name, value), optionally mirrored to CSV."""

    fields = ("stage", "epoch", "step", "loss_name", "value")

    def __init__(self, path=None):
        self.rows: list[tuple] = []
        self.path = Path(path) if path else None
        if self.path and not self.path.exists():
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, "w", newline="") as fh:
                csv.writer(fh).writerow(self.fields)

    def add(self, stage: Stage, epoch: int, step: int, name: str, value: float):
        row = (stage.value, epoch, step, name, float(value))
        self.rows.append(row)
        if self.path:
            with open(self.path, "a", newline="") as fh:
                csv.writer(fh).writerow(row)

    def values(self, name: str) -> list[float]:
        return [r[4] for r in self.rows if r[3] == name]


# ---- training engine -------------------------------------------------------------


def _resize(t: torch.Tensor, hw) -> torch.Tensor:
    if tuple(t.shape[-2:]) == tuple(hw):
        return t
    return F.interpolate(t, size=tuple(hw), mode="bilinear", align_corners=False, antialias=True).clamp(0, 1)


def _epoch_order(seed: int, stage_idx: int, epoch: int, n: int) -> list[int]:
    g = torch.Generator().manual_seed(seed * 1_000_003 + stage_idx * 10_007 + epoch)
    return torch.randperm(n, generator=g).tolist()


def _set_trainable(model: BradcnModel, sets) -> list[torch.nn.Parameter]:
    groups = model.groups()
    unknown = set(sets) - set(groups)
    if unknown:
        raise ConfigError(f"unknown parameter groups: {sorted(unknown)}")
    for p in model.parameters():
        p.requires_grad_(False)
    params = []
    for name in sets:
        for p in groups[name]:
            p.requires_grad_(True)
            params.append(p)
    return params


@dataclass
class _Progress:
    stage_idx: int = 0
    done: int = 0  # optimizer steps completed in the current stage

    def as_dict(self, plans, steps_per_epoch) -> dict:
        stage = plans[self.stage_idx].stage.value if self.stage_idx < len(plans) else "finished"
        return {"stage_idx": self.stage_idx, "stage": stage, "done": self.done,
                "epoch": self.done // max(steps_per_epoch, 1), "step": self.done % max(steps_per_epoch, 1)}


def _run(model, plans, fit, val, batch_fn, step_loss, val_loss, seed, log_, resume=None, stop_after=None):
    """Shared loop. Returns (progress, optimizer state dict or None, finished)."""
    prog = _Progress(**{k: resume[k] for k in ("stage_idx", "done")}) if resume else _Progress()
    opt_state = resume.get("optimizer") if resume else None
    executed = 0
    while prog.stage_idx < len(plans):
        si = prog.stage_idx
        plan = plans[si]
        params = _set_trainable(model, plan.trainable_sets)
        opt = torch.optim.Adam(params, lr=plan.lr)
        if opt_state is not None:
            opt.load_state_dict(opt_state)
            opt_state = None
        per_epoch = math.ceil(len(fit) / plan.batch_size)
        budget = plan.epochs * per_epoch if plan.max_steps is None else plan.max_steps
        model.train()
        while prog.done < budget:
            if stop_after is not None and executed >= stop_after:
                return prog, opt.state_dict(), False
            epoch, pos = divmod(prog.done, per_epoch)
            order = _epoch_order(seed, si, epoch, len(fit))
            idx = order[pos * plan.batch_size:(pos + 1) * plan.batch_size]
            batch = batch_fn([fit[i] for i in idx], plan.input_hw)
            loss = step_loss(plan, batch)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            if plan.grad_clip is not None:
                torch.nn.utils.clip_grad_norm_(params, plan.grad_clip)
            opt.step()
            prog.done += 1
            executed += 1
            log_.add(plan.stage, epoch, prog.done, f"train_{plan.loss.kind.value}", loss.item())
            if prog.done % per_epoch == 0 or prog.done == budget:
                if val:
                    model.eval()
                    with torch.no_grad():
                        v = sum(val_loss(plan, batch_fn([s], plan.input_hw)).item() for s in val) / len(val)
                    model.train()
                    log_.add(plan.stage, epoch, prog.done, "val_l1", v)
        prog = _Progress(si + 1, 0)
    _set_trainable(model, ())
    return prog, None, True


def _paired_batch(samples, hw):
    return (torch.cat([_resize(s.sharp, hw) for s in samples]),
            torch.cat([_resize(s.bokeh, hw) for s in samples]))


def _rgbd_batch(samples, hw):
    return (torch.cat([_resize(s.rgb, hw) for s in samples]),
            torch.cat([_resize(s.depth_gt, hw) for s in samples]))


def as_corpus(samples) -> Corpus:
    return samples if isinstance(samples, Corpus) else Corpus.from_samples(samples)


def _split(corpus, fraction: float, seed: int):
    corpus = as_corpus(corpus)
    if len(corpus) == 0:
        raise DataError("empty corpus")
    fit_ids, val_ids = validation_ids(corpus.ids, seed, fraction)
    by_id = dict(zip(corpus.ids, corpus.load_all()))
    return [by_id[k] for k in fit_ids], [by_id[k] for k in val_ids]


def adcn_error_loss(model: BradcnModel, rgb, depth_gt):
    with torch.no_grad():
        d_o = predict_depth(model.predictor, rgb)
    target = build_error_target(d_o, depth_gt)
    return l1_loss(adcn_forward(model.adcn, rgb, d_o), target)


def pretrain_adcn(plan: TrainPlan, rgbd_corpus, predictor: DepthPredictor | None = None,
                  cfg: ModelConfig | None = None, *, seed: int = 0, loss_log: LossLog | None = None,
                  model: BradcnModel | None = None, fit_predictor_steps: int = 0,
                  predictor_lr: float = 1e-3) -> Checkpoint:
    """Train the calibration U-Net against absolute depth-error targets.

    With the built-in fallback predictor, ``fit_predictor_steps`` first fits
    it on the RGB-D ground truth so its errors are meaningful.
    """
    if plan.stage is not Stage.AdcnPretrain:
        raise ConfigError(f"pretrain_adcn needs an AdcnPretrain plan, got {plan.stage}")
    if len(rgbd_corpus) == 0:
        raise DataError("empty RGB-D corpus")
    loss_log = loss_log if loss_log is not None else LossLog()
    model = model if model is not None else build_model(cfg or ModelConfig(), predictor)
    fit, val = _split(rgbd_corpus, plan.val_fraction, seed)
    if fit_predictor_steps and isinstance(model.predictor, FallbackDepthNet):
        fit_s = [dataclasses.replace(s, rgb=_resize(s.rgb, plan.input_hw), depth_gt=_resize(s.depth_gt, plan.input_hw))
                 for s in fit]
        for i, v in enumerate(fit_depth_predictor(model.predictor, fit_s, fit_predictor_steps, predictor_lr, seed)):
            loss_log.add(plan.stage, 0, i + 1, "depth_fit_l1", v)

    def step_loss(p, batch):
        return adcn_error_loss(model, *batch)

    seed_all(seed)
    prog, _, _ = _run(model, [plan], fit, val, _rgbd_batch, step_loss, step_loss, seed, loss_log)
    return checkpoint_model(model, plan_progress=prog.as_dict([plan], 1))


def train_hybrid(plans: list[TrainPlan], paired_corpus, ckpt_adcn: Checkpoint | None = None, *,
                 cfg: ModelConfig | None = None, predictor: DepthPredictor | None = None,
                 mode: HybridMode = HybridMode.Full, seed: int = 0, loss_log: LossLog | None = None,
                 resume: Checkpoint | None = None, stop_after: int | None = None,
                 model: BradcnModel | None = None) -> Checkpoint:
    """Render-loss training, stage by stage (L1, then L1 + MS-SSIM by default).

    ``stop_after`` interrupts after that many optimizer steps and returns a
    resumable checkpoint; pass it back as ``resume`` with the same plans.
    """
    order = [p.stage for p in plans]
    if any(s is Stage.AdcnPretrain for s in order):
        raise ConfigError("train_hybrid takes hybrid plans only")
    loss_log = loss_log if loss_log is not None else LossLog()
    if resume is not None:
        model = model_from_checkpoint(resume, predictor)
        if resume.plan_progress.get("mode", mode.value) != mode.value:
            raise CheckpointError("resume checkpoint was trained in a different mode")
    elif model is None:
        if ckpt_adcn is not None:
            if cfg is not None and cfg != ckpt_adcn.config:
                raise CheckpointError("ADCN checkpoint config differs from the requested config")
            model = model_from_checkpoint(ckpt_adcn, predictor)
        else:
            model = build_model(cfg or ModelConfig(), predictor)
    fit, val = _split(paired_corpus, plans[0].val_fraction, seed)

    def step_loss(plan, batch):
        x, y = batch
        return combined_loss(model(x, mode), y, plan.loss)

    def val_loss(plan, batch):
        x, y = batch
        return l1_loss(model(x, mode), y)

    resume_state = None
    if resume is not None:
        resume_state = dict(resume.plan_progress, optimizer=resume.optimizer_state)
        if resume.rng_state is not None:
            torch.set_rng_state(resume.rng_state)
    else:
        seed_all(seed)
    prog, opt_state, finished = _run(model, plans, fit, val, _paired_batch, step_loss, val_loss, seed,
                                     loss_log, resume_state, stop_after)
    per_epoch = math.ceil(len(fit) / plans[min(prog.stage_idx, len(plans) - 1)].batch_size)
    progress = dict(prog.as_dict(plans, per_epoch), mode=mode.value, finished=finished)
    return checkpoint_model(model, optimizer_state=opt_state, plan_progress=progress)


# ---- evaluation ------------------------------------------------------------------


def evaluate(model, paired_corpus, mode: HybridMode = HybridMode.Full, provider: LpipsProvider | None = None,
             input_hw=None, csv_path=None, predictor: DepthPredictor | None = None
             ) -> tuple[list[MetricReport], MetricReport]:
    """Half-resolution input, x2 bilinear output, metrics against the target.

    ``model`` is a BradcnModel or a Checkpoint. ``input_hw`` fixes the model
    input size; by default it is half the target size. Targets are resampled
    only if sizes still disagree.
    """
    if len(paired_corpus) == 0:
        raise DataError("empty evaluation corpus")
    if isinstance(model, Checkpoint):
        model = model_from_checkpoint(model, predictor)
    reports = []
    for s in paired_corpus:
        h, w = s.bokeh.shape[-2:]
        hw = tuple(input_hw) if input_hw else (h // 2, w // 2)
        out = model.infer_highres(_resize(s.sharp, hw), mode)
        target = _resize(s.bokeh, out.shape[-2:])
        reports.append(measure(out, target, s.id, provider))
    mean = mean_report(reports)
    if csv_path:
        write_csv(reports + [mean], csv_path)
    return reports, mean


ABLATION_ROWS = (HybridMode.RenderOnly, HybridMode.RenderPlusDepth, HybridMode.Full)
ABLATION_NAMES = {HybridMode.RenderOnly: "RenderOnly", HybridMode.RenderPlusDepth: "RenderPlusDepth",
                  HybridMode.Full: "Full"}


def ablation_table(models: dict, paired_corpus, provider=None, input_hw=None, csv_path=None):
    """Evaluate one model per mode; returns {method_name: mean MetricReport}."""
    table = {}
    for mode in ABLATION_ROWS:
        _, mean = evaluate(models[mode], paired_corpus, mode, provider, input_hw)
        table[ABLATION_NAMES[mode]] = mean
    if csv_path:
        write_ablation_csv(table, csv_path)
    return table


def write_ablation_csv(table: dict, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("method", "psnr_db", "ssim", "ms_ssim", "lpips"))
        for name, r in table.items():
            w.writerow((name, r.psnr_db, r.ssim, r.ms_ssim, "" if r.lpips is None else r.lpips))


def run_ablation(plans, train_corpus, eval_corpus, ckpt_adcn: Checkpoint | None = None, *, cfg=None,
                 predictor=None, seed: int = 0, provider=None, input_hw=None, csv_path=None):
    """Train one model per ablation mode under identical plans and seed, then evaluate."""
    models = {}
    for mode in ABLATION_ROWS:
        ck = train_hybrid(plans, train_corpus, ckpt_adcn, cfg=cfg, predictor=predictor, mode=mode, seed=seed)
        models[mode] = model_from_checkpoint(ck, predictor)
    return ablation_table(models, eval_corpus, provider, input_hw, csv_path)
