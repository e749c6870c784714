"""Shared types, errors, config schema and validation helpers.

Images are plain ``torch.Tensor`` rasters laid out as (batch, channels, H, W)
with values in [0, 1]. Depth and error maps use a single channel.
"""
from __future__ import annotations

import dataclasses
import json
import random
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np
import torch
import torch.nn.functional as F


BACKBONE_STRIDE = 16


class BradcnError(Exception):
    pass


class ShapeError(BradcnError, ValueError):
    pass


class RangeError(BradcnError, ValueError):
    pass


class NonFiniteError(BradcnError, ValueError):
    pass


class TooSmallError(ShapeError):
    pass


class ConfigError(BradcnError, ValueError):
    pass


class PredictorError(BradcnError, RuntimeError):
    pass


class ProviderError(BradcnError, RuntimeError):
    pass


class DataError(BradcnError, ValueError):
    pass


class LayoutError(DataError):
    pass


class DecodeError(DataError):
    pass


class CountError(DataError):
    pass


class CheckpointError(BradcnError, RuntimeError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    patch_size: int = 1
    embed_dim: int = 128
    num_transformer_blocks: int = 4
    num_heads: int = 4
    reassemble_strides: tuple[int, ...] = (4, 8, 16, 32)
    fusion_channels: int = 64
    adcn_base_channels: int = 16
    adcn_depth: int = 3
    backbone_channels: tuple[int, ...] = (16, 32, 64, 96)
    depth_base_channels: int = 16
    seed: int = 0

    def __post_init__(self):
        # tuples keep the config hashable even when built from JSON lists
        object.__setattr__(self, "reassemble_strides", tuple(self.reassemble_strides))
        object.__setattr__(self, "backbone_channels", tuple(self.backbone_channels))
        ints = [self.patch_size, self.embed_dim, self.num_transformer_blocks, self.num_heads,
                self.fusion_channels, self.adcn_base_channels, self.adcn_depth,
                self.depth_base_channels, *self.reassemble_strides, *self.backbone_channels]
        if any(int(v) != v or v <= 0 for v in ints):
            raise ConfigError("all architecture sizes must be positive integers")
        if self.embed_dim % self.num_heads:
            raise ConfigError(f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}")
        s = self.reassemble_strides
        if not s or any(b <= a for a, b in zip(s, s[1:])):
            raise ConfigError(f"reassemble_strides must be strictly increasing, got {s}")
        if any(v & (v - 1) for v in (*s, self.patch_size)):
            raise ConfigError("reassemble_strides and patch_size must be powers of two")
        if len(self.backbone_channels) != 4:
            raise ConfigError("backbone_channels needs exactly 4 stages (stride 16 contract)")

    @property
    def token_stride(self) -> int:
        return BACKBONE_STRIDE * self.patch_size

    @property
    def input_multiple(self) -> int:
        """Every input side must be a multiple of this after padding."""
        return int(np.lcm(max(self.reassemble_strides), self.token_stride))

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["reassemble_strides"] = list(self.reassemble_strides)
        d["backbone_channels"] = list(self.backbone_channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**d)

    def with_overrides(self, overrides: list[str]) -> "ModelConfig":
        d = self.to_dict()
        for item in overrides:
            key, sep, raw = item.partition("=")
            if not sep:
                raise ConfigError(f"override must look like key=value, got {item!r}")
            if key not in d:
                raise ConfigError(f"unknown config key: {key}")
            try:
                d[key] = json.loads(raw)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"bad value for {key}: {raw!r}") from exc
        return self.from_dict(d)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "ModelConfig":
        try:
            d = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(d, dict) or any(isinstance(v, dict) for v in d.values()):
            raise ConfigError("config file must be a flat key-value object")
        return cls.from_dict(d)



def _check_finite_range(t: torch.Tensor, what: str) -> None:
    if not torch.isfinite(t).all():
        raise NonFiniteError(f"{what} contains NaN or inf")


def validate_image(t: torch.Tensor) -> torch.Tensor:
    if t.ndim != 4 or t.shape[1] != 3:
        raise ShapeError(f"expected image of shape (B,3,H,W), got {tuple(t.shape)}")
    _check_finite_range(t, "image")
    if t.numel() and (t.min() < 0 or t.max() > 1):
        raise RangeError(f"image values outside [0,1]: [{t.min().item():.4g}, {t.max().item():.4g}]")
    return t


def validate_depth(d: torch.Tensor, like: torch.Tensor | None = None) -> torch.Tensor:
    """Check a depth or error map; ``like`` pins the spatial size."""
    if d.ndim != 4 or d.shape[1] != 1:
        raise ShapeError(f"expected map of shape (B,1,H,W), got {tuple(d.shape)}")
    if like is not None and d.shape[-2:] != like.shape[-2:]:
        raise ShapeError(f"map size {tuple(d.shape[-2:])} != image size {tuple(like.shape[-2:])}")
    _check_finite_range(d, "map")
    if d.numel() and d.min() < 0:
        raise RangeError("map contains negative values")
    return d


class PadRecord(NamedTuple):
    pad_h: int
    pad_w: int


def pad_to_stride(t: torch.Tensor, stride: int) -> tuple[torch.Tensor, PadRecord]:
    """Reflect-pad bottom/right so H and W become multiples of ``stride``."""
    if stride < 1:
        raise ValueError("stride must be >= 1")
    h, w = t.shape[-2:]
    if h < stride or w < stride:
        raise ShapeError(f"input {h}x{w} smaller than one stride ({stride})")
    ph, pw = -h % stride, -w % stride
    if ph == 0 and pw == 0:
        return t, PadRecord(0, 0)
    if ph >= h or pw >= w:
        # reflect padding cannot exceed the source extent
        raise ShapeError(f"input {h}x{w} too small to reflect-pad to stride {stride}")
    return F.pad(t, (0, pw, 0, ph), mode="reflect"), PadRecord(ph, pw)


def crop_padding(t: torch.Tensor, pad: PadRecord) -> torch.Tensor:
    h, w = t.shape[-2:]
    return t[..., : h - pad.pad_h, : w - pad.pad_w]


def seed_all(seed: int) -> None:
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)
