"""Full model wiring: encoder output plus adapted depth plus adapted depth error
feeds the render decoder."""
from __future__ import annotations

import enum

import torch
import torch.nn as nn
import torch.nn.functional as F

from .adcn import AdcnNet, adapt_error, adcn_forward
from .core import ModelConfig, ShapeError, crop_padding, pad_to_stride, seed_all, validate_image
from .depth_net import AdaptiveNet, DepthPredictor, FallbackDepthNet, adapt_depth, predict_depth
from .render_net import MultiScaleFeatures, RenderNet


class HybridMode(enum.Enum):
    RenderOnly = "render_only"
    RenderPlusDepth = "render_depth"
    Full = "full"


def _check_levels(a: MultiScaleFeatures, b: MultiScaleFeatures):
    if len(a) != len(b):
        raise ShapeError(f"level counts differ: {len(a)} vs {len(b)}")
    for i, (x, y) in enumerate(zip(a, b)):
        if x.shape != y.shape:
            raise ShapeError(f"level {i} shapes differ: {tuple(x.shape)} vs {tuple(y.shape)}")


def fuse_depth(e_o: MultiScaleFeatures, adapted_depth: MultiScaleFeatures) -> MultiScaleFeatures:
    _check_levels(e_o, adapted_depth)
    return [e + d for e, d in zip(e_o, adapted_depth)]


def fuse_error(d_i: MultiScaleFeatures, adapted_error: MultiScaleFeatures) -> MultiScaleFeatures:
    _check_levels(d_i, adapted_error)
    return [d + a for d, a in zip(d_i, adapted_error)]


GROUPS = ("render", "depth_predictor", "depth_adapter", "adcn", "error_adapter")


class BradcnModel(nn.Module):
    def __init__(self, cfg: ModelConfig, predictor: DepthPredictor | None = None):
        super().__init__()
        self.cfg = cfg
        self.render_net = RenderNet(cfg)
        self.depth_adapter = AdaptiveNet(cfg)
        self.adcn = AdcnNet(cfg)
        self.error_adapter = AdaptiveNet(cfg)
        # an external predictor is not a submodule, so its state is not checkpointed
        self.depth_net = FallbackDepthNet(cfg.depth_base_channels) if predictor is None else None
        self.external_predictor = predictor

    @property
    def predictor(self) -> DepthPredictor:
        return self.depth_net if self.external_predictor is None else self.external_predictor

    def groups(self) -> dict[str, list[nn.Parameter]]:
        out = {
            "render": list(self.render_net.parameters()),
            "depth_predictor": [],
            "depth_adapter": list(self.depth_adapter.parameters()),
            "adcn": list(self.adcn.parameters()),
            "error_adapter": list(self.error_adapter.parameters()),
        }
        if isinstance(self.predictor, nn.Module) and self.predictor.trainable:
            out["depth_predictor"] = list(self.predictor.parameters())
        return out

    def decoder_input(self, img, mode: HybridMode = HybridMode.Full) -> MultiScaleFeatures:
        levels = self.render_net.encode(img)
        if mode is HybridMode.RenderOnly:
            return levels
        d_o = predict_depth(self.predictor, img)
        levels = fuse_depth(levels, adapt_depth(self.depth_adapter, d_o, self.cfg))
        if mode is HybridMode.Full:
            d_e = adcn_forward(self.adcn, img, d_o)
            levels = fuse_error(levels, adapt_error(self.error_adapter, d_e, self.cfg))
        return levels

    def forward(self, img, mode: HybridMode = HybridMode.Full):
        return self.render_net.decode(self.decoder_input(img, mode), img.shape[-2:], img)

    def render(self, img, mode: HybridMode = HybridMode.Full):
        """Forward on any image size: reflect-pad to the input multiple, then crop."""
        validate_image(img)
        padded, pad = pad_to_stride(img, self.cfg.input_multiple)
        return crop_padding(self(padded, mode), pad)

    @torch.no_grad()
    def infer_highres(self, img, mode: HybridMode = HybridMode.Full):
        was_training = self.training
        self.eval()
        try:
            out = self.render(img, mode)
        finally:
            self.train(was_training)
        return upsample2x(out)


def upsample2x(img: torch.Tensor) -> torch.Tensor:
    h, w = img.shape[-2:]
    return F.interpolate(img, size=(2 * h, 2 * w), mode="bilinear", align_corners=False).clamp(0.0, 1.0)


def build_model(cfg: ModelConfig, predictor: DepthPredictor | None = None) -> BradcnModel:
    """Seeded construction: parameters are a pure function of ``cfg.seed``."""
    seed_all(cfg.seed)
    return BradcnModel(cfg, predictor)
