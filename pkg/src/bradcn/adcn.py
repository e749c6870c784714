"""Adaptive depth calibration: error-map targets and the U-Net that predicts them."""
from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import ModelConfig, ShapeError, validate_depth, validate_image
from .depth_net import AdaptiveNet, UNet, adapt_map
from .render_net import MultiScaleFeatures


def build_error_target(d_o: torch.Tensor, d_gt: torch.Tensor) -> torch.Tensor:
    if d_o.shape != d_gt.shape:
        raise ShapeError(f"depth shapes differ: {tuple(d_o.shape)} vs {tuple(d_gt.shape)}")
    validate_depth(d_o)
    validate_depth(d_gt)
    return (d_o - d_gt).abs()


class AdcnNet(nn.Module):
    """U-Net over RGB + predicted depth, softplus output."""

    in_channels = 4

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.unet = UNet(self.in_channels, 1, base=cfg.adcn_base_channels, depth=cfg.adcn_depth)

    def forward(self, img, d_o):
        return F.softplus(self.unet(torch.cat([img, d_o], dim=1)))


def adcn_forward(net: AdcnNet, img: torch.Tensor, d_o: torch.Tensor) -> torch.Tensor:
    validate_image(img)
    validate_depth(d_o, like=img)
    if d_o.shape[0] != img.shape[0]:
        raise ShapeError("image and depth batch sizes differ")
    return net(img, d_o)


def adapt_error(a: AdaptiveNet, e: torch.Tensor, cfg: ModelConfig) -> MultiScaleFeatures:
    return adapt_map(a, e, cfg)
