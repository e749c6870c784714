"""Transformer render network: residual CNN backbone, patch tokens,
pre-norm transformer blocks, multi-stride reassembly and a fusion decoder."""
from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import BACKBONE_STRIDE, ModelConfig, ShapeError

# MultiScaleFeatures is a plain list of rasters, finest stride first.
MultiScaleFeatures = list


INPUT_MEAN, INPUT_STD = 0.5, 0.25


def normalize_input(img):
    return (img - INPUT_MEAN) / INPUT_STD


def _norm(c: int) -> nn.GroupNorm:
    return nn.GroupNorm(min(8, c), c)


class ResBlock(nn.Module):
    def __init__(self, cin, cout, stride=1):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride, 1, bias=False)
        self.norm1 = _norm(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, 1, 1, bias=False)
        self.norm2 = _norm(cout)
        self.skip = None
        if stride != 1 or cin != cout:
            self.skip = nn.Sequential(nn.Conv2d(cin, cout, 1, stride, bias=False), _norm(cout))

    def forward(self, x):
        out = F.relu(self.norm1(self.conv1(x)))
        out = self.norm2(self.conv2(out))
        identity = x if self.skip is None else self.skip(x)
        return F.relu(out + identity)


class Backbone(nn.Module):
    """Shallow stand-in for ResNet-50 with the same stride-16 output."""

    def __init__(self, channels=(16, 32, 64, 96)):
        super().__init__()
        c0, c1, c2, c3 = channels
        self.stem = nn.Sequential(nn.Conv2d(3, c0, 3, 2, 1, bias=False), _norm(c0), nn.ReLU(inplace=True))
        self.stages = nn.Sequential(
            ResBlock(c0, c0, 1),
            ResBlock(c0, c1, 2),
            ResBlock(c1, c2, 2),
            ResBlock(c2, c3, 2),
        )
        self.out_channels = c3
        # stride of each stage output
        self.stage_strides = (2, 4, 8, 16)
        self.stage_channels = (c0, c1, c2, c3)

    def forward(self, img, return_stages=False):
        h, w = img.shape[-2:]
        if h % BACKBONE_STRIDE or w % BACKBONE_STRIDE:
            raise ShapeError(f"backbone input {h}x{w} not divisible by {BACKBONE_STRIDE}")
        x = self.stem(img)
        stages = []
        for stage in self.stages:
            x = stage(x)
            stages.append(x)
        return (x, stages) if return_stages else x


class Tokenizer(nn.Module):
    """Non-overlapping patch embedding with a class token and learned positions.

    Positional embeddings live on a fixed base grid and are bilinearly
    resized to the actual token grid, so any stride-divisible input works.
    """

    base_grid = (16, 16)

    def __init__(self, in_channels, embed_dim, patch_size):
        super().__init__()
        self.patch_size = patch_size
        self.proj = nn.Conv2d(in_channels, embed_dim, patch_size, patch_size)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, embed_dim))
        self.cls_pos = nn.Parameter(torch.zeros(1, 1, embed_dim))
        self.pos = nn.Parameter(torch.zeros(1, embed_dim, *self.base_grid))
        nn.init.trunc_normal_(self.cls_token, std=0.02)
        nn.init.trunc_normal_(self.cls_pos, std=0.02)
        nn.init.trunc_normal_(self.pos, std=0.02)

    def positions(self, grid):
        pos = F.interpolate(self.pos, size=grid, mode="bilinear", align_corners=False)
        return torch.cat([self.cls_pos, pos.flatten(2).transpose(1, 2)], dim=1)

    def forward(self, f, add_positions=True):
        h, w = f.shape[-2:]
        if h == 0 or w == 0 or f.numel() == 0:
            raise ShapeError("cannot tokenize an empty raster")
        if h % self.patch_size or w % self.patch_size:
            raise ShapeError(f"feature raster {h}x{w} not divisible by patch size {self.patch_size}")
        x = self.proj(f)
        grid = tuple(x.shape[-2:])
        tokens = x.flatten(2).transpose(1, 2)  # row-major patch order
        tokens = torch.cat([self.cls_token.expand(x.shape[0], -1, -1), tokens], dim=1)
        if add_positions:
            tokens = tokens + self.positions(grid)
        return tokens, grid


class SelfAttention(nn.Module):
    def __init__(self, dim, heads):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)

    def probs(self, x):
        q, k, _ = self._split(x)
        return self._attention(q, k)

    def _split(self, x):
        b, n, d = x.shape
        qkv = self.qkv(x).reshape(b, n, 3, self.heads, d // self.heads).permute(2, 0, 3, 1, 4)
        return qkv[0], qkv[1], qkv[2]

    def _attention(self, q, k):
        scores = q @ k.transpose(-2, -1) / math.sqrt(q.shape[-1])
        return scores.softmax(dim=-1)

    def forward(self, x):
        b, n, d = x.shape
        q, k, v = self._split(x)
        out = self._attention(q, k) @ v
        return self.proj(out.transpose(1, 2).reshape(b, n, d))


class TransformerBlock(nn.Module):
    def __init__(self, dim, heads, mlp_ratio=4):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = SelfAttention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, dim * mlp_ratio), nn.GELU(), nn.Linear(dim * mlp_ratio, dim))

    def attention_probs(self, x):
        return self.attn.probs(self.norm1(x))

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


def _resampler(channels, factor):
    # factor > 1 upsamples the token grid, factor < 1 downsamples it
    if factor > 1:
        f = int(factor)
        return nn.ConvTranspose2d(channels, channels, f, f)
    if factor == 1:
        return nn.Identity()
    return nn.Conv2d(channels, channels, 3, int(round(1 / factor)), 1)


class Reassemble(nn.Module):
    """Token sequence -> one raster per configured stride.

    The class token enters only through a zero-initialized readout projection.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        e, c = cfg.embed_dim, cfg.fusion_channels
        self.strides = cfg.reassemble_strides
        self.readout = nn.Linear(e, e, bias=False)
        nn.init.zeros_(self.readout.weight)
        self.project = nn.ModuleList(nn.Conv2d(e, c, 1) for _ in self.strides)
        self.resample = nn.ModuleList(_resampler(c, cfg.token_stride / s) for s in self.strides)

    def forward(self, tokens, grid):
        gh, gw = grid
        if tokens.shape[1] != gh * gw + 1:
            raise ShapeError(f"{tokens.shape[1]} tokens do not match grid {gh}x{gw} plus class token")
        patches = tokens[:, 1:] + self.readout(tokens[:, :1])
        raster = patches.transpose(1, 2).reshape(tokens.shape[0], -1, gh, gw)
        return [rs(proj(raster)) for proj, rs in zip(self.project, self.resample)]


class ResidualConvUnit(nn.Module):
    def __init__(self, c):
        super().__init__()
        self.conv1 = nn.Conv2d(c, c, 3, 1, 1, bias=False)
        self.conv2 = nn.Conv2d(c, c, 3, 1, 1, bias=False)

    def forward(self, x):
        return x + self.conv2(F.relu(self.conv1(F.relu(x))))


class FusionDecoder(nn.Module):
    """Coarse-to-fine fusion: upsample the running path, add the next finer
    level through a residual unit, refine."""

    def __init__(self, channels, levels):
        super().__init__()
        self.lateral = nn.ModuleList(ResidualConvUnit(channels) for _ in range(levels))
        self.refine = nn.ModuleList(ResidualConvUnit(channels) for _ in range(levels))

    def forward(self, levels: MultiScaleFeatures):
        if len(levels) != len(self.lateral):
            raise ShapeError(f"expected {len(self.lateral)} levels, got {len(levels)}")
        for fine, coarse in zip(levels, levels[1:]):
            if fine.shape[1] != coarse.shape[1] or any(a != 2 * b for a, b in zip(fine.shape[-2:], coarse.shape[-2:])):
                raise ShapeError(f"level shapes {tuple(fine.shape)} and {tuple(coarse.shape)} are not a x2 pyramid")
        k = len(levels) - 1
        path = self.refine[k](self.lateral[k](levels[k]))
        for k in range(len(levels) - 2, -1, -1):
            path = F.interpolate(path, size=levels[k].shape[-2:], mode="bilinear", align_corners=False)
            path = self.refine[k](path + self.lateral[k](levels[k]))
        return path


LOGIT_EPS = 0.01


class RenderHead(nn.Module):
    """Bilinear upsample to the output size, 3x3 conv to RGB, sigmoid.

    The input image in logit space is concatenated to the upsampled features
    before the conv, so unit weight on it passes the scene through the
    sigmoid unchanged and the features only have to model the blur.
    """

    def __init__(self, channels):
        super().__init__()
        self.conv = nn.Conv2d(channels + 3, 3, 3, 1, 1)

    def forward(self, f, target_hw, image):
        f = F.interpolate(f, size=tuple(target_hw), mode="bilinear", align_corners=False)
        return torch.sigmoid(self.conv(torch.cat([f, torch.logit(image, LOGIT_EPS)], dim=1)))


class RenderNet(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.backbone = Backbone(cfg.backbone_channels)
        self.tokenizer = Tokenizer(self.backbone.out_channels, cfg.embed_dim, cfg.patch_size)
        self.blocks = nn.ModuleList(TransformerBlock(cfg.embed_dim, cfg.num_heads)
                                    for _ in range(cfg.num_transformer_blocks))
        self.norm = nn.LayerNorm(cfg.embed_dim)
        self.reassemble = Reassemble(cfg)
        # finer-than-token levels also receive the backbone stage of the same stride
        bb = self.backbone
        self.skip_stride = {s: i for i, s in enumerate(bb.stage_strides) if s < cfg.token_stride}
        self.skips = nn.ModuleDict({
            str(s): nn.Conv2d(bb.stage_channels[i], cfg.fusion_channels, 1)
            for s, i in self.skip_stride.items() if s in cfg.reassemble_strides})
        self.decoder = FusionDecoder(cfg.fusion_channels, len(cfg.reassemble_strides))
        self.head = RenderHead(cfg.fusion_channels)

    def check_input(self, img):
        m = self.cfg.input_multiple
        h, w = img.shape[-2:]
        if h % m or w % m:
            raise ShapeError(f"input {h}x{w} not divisible by {m}; pad it first")

    def encode(self, img) -> MultiScaleFeatures:
        """Image -> encoder output levels (one per reassemble stride)."""
        self.check_input(img)
        feat, stages = self.backbone(normalize_input(img), return_stages=True)
        tokens, grid = self.tokenizer(feat)
        for blk in self.blocks:
            tokens = blk(tokens)
        levels = self.reassemble(self.norm(tokens), grid)
        for k, s in enumerate(self.cfg.reassemble_strides):
            if str(s) in self.skips:
                levels[k] = levels[k] + self.skips[str(s)](stages[self.skip_stride[s]])
        return levels

    def decode(self, levels: MultiScaleFeatures, target_hw, image):
        return self.head(self.decoder(levels), target_hw, image)

    def forward(self, img):
        return self.decode(self.encode(img), img.shape[-2:], img)


def level_shapes(cfg: ModelConfig, hw) -> list[tuple[int, int]]:
    return [(hw[0] // s, hw[1] // s) for s in cfg.reassemble_strides]
