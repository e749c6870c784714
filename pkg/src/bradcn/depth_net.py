"""Monocular depth predictors and the adaptive bridge into encoder space."""
from __future__ import annotations

import hashlib
import subprocess
import tempfile
from pathlib import Path
from typing import Protocol, runtime_checkable

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from PIL import Image

from .core import ModelConfig, PredictorError, ShapeError, validate_depth, validate_image
from .render_net import MultiScaleFeatures, level_shapes


@runtime_checkable
class DepthPredictor(Protocol):
    trainable: bool

    def predict(self, img: torch.Tensor) -> torch.Tensor: ...


def normalize_depth(d: torch.Tensor) -> torch.Tensor:
    """Per-image min-max to [0, 1]; constant maps become all zeros."""
    flat = d.flatten(1)
    lo = flat.min(dim=1).values.view(-1, 1, 1, 1)
    hi = flat.max(dim=1).values.view(-1, 1, 1, 1)
    return (d - lo) / (hi - lo).clamp_min(1e-12)


def _conv_block(cin, cout):
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, 1, 1), nn.GroupNorm(min(8, cout), cout), nn.ReLU(inplace=True),
        nn.Conv2d(cout, cout, 3, 1, 1), nn.GroupNorm(min(8, cout), cout), nn.ReLU(inplace=True),
    )


class UNet(nn.Module):
    """Plain U-Net: ``depth`` stride-2 stages with channel doubling and
    concatenating skips at every resolution."""

    def __init__(self, in_channels, out_channels, base=16, depth=3):
        super().__init__()
        chans = [base * 2 ** i for i in range(depth + 1)]
        self.inc = _conv_block(in_channels, chans[0])
        self.down = nn.ModuleList(_conv_block(chans[i], chans[i + 1]) for i in range(depth))
        self.up = nn.ModuleList(nn.ConvTranspose2d(chans[i + 1], chans[i], 2, 2) for i in reversed(range(depth)))
        self.dec = nn.ModuleList(_conv_block(chans[i] * 2, chans[i]) for i in reversed(range(depth)))
        self.out = nn.Conv2d(chans[0], out_channels, 1)
        self.depth = depth

    def forward(self, x):
        h, w = x.shape[-2:]
        m = 2 ** self.depth
        if h % m or w % m:
            raise ShapeError(f"U-Net input {h}x{w} not divisible by {m}")
        skips = [self.inc(x)]
        for block in self.down:
            skips.append(block(F.max_pool2d(skips[-1], 2)))
        y = skips.pop()
        for up, dec in zip(self.up, self.dec):
            y = dec(torch.cat([up(y), skips.pop()], dim=1))
        return self.out(y)


class FallbackDepthNet(nn.Module):
    """Small trainable monocular depth regressor (3-level U-Net)."""

    trainable = True

    def __init__(self, base=16):
        super().__init__()
        self.unet = UNet(3, 1, base=base, depth=3)

    def forward(self, img):
        return self.unet(img)

    def predict(self, img):
        return self(img)


def image_key(img: torch.Tensor) -> str:
    return hashlib.sha1(img.detach().cpu().to(torch.float32).contiguous().numpy().tobytes()).hexdigest()


class PrecomputedDepthPredictor:
    """Serves depth maps computed offline (e.g. by a large external model),
    looked up by the exact content of each (3,H,W) image."""

    trainable = False

    def __init__(self):
        self._table: dict[str, torch.Tensor] = {}

    def __len__(self):
        return len(self._table)

    def add(self, img: torch.Tensor, depth: torch.Tensor) -> None:
        for i in range(img.shape[0]):
            if depth[i].shape[-2:] != img[i].shape[-2:]:
                raise ShapeError("precomputed depth must match image size")
            self._table[image_key(img[i])] = depth[i].detach().clone().reshape(1, *img.shape[-2:])

    def predict(self, img):
        try:
            return torch.stack([self._table[image_key(im)] for im in img])
        except KeyError as exc:
            raise PredictorError("no precomputed depth for this image") from exc


class SubprocessDepthPredictor:
    """External model behind a command line.

    The command is invoked as ``command... <input.png> <output.png>`` and must
    write a single-channel 16-bit depth PNG of the same size as the input.
    """

    trainable = False

    def __init__(self, command: list[str], timeout: float = 300.0):
        self.command = list(command)
        self.timeout = timeout

    def predict(self, img):
        outs = []
        with tempfile.TemporaryDirectory() as tmp:
            for i, im in enumerate(img):
                src, dst = Path(tmp) / f"in{i}.png", Path(tmp) / f"out{i}.png"
                arr = (im.detach().cpu().permute(1, 2, 0).numpy() * 255.0).round().astype(np.uint8)
                Image.fromarray(arr).save(src)
                try:
                    subprocess.run([*self.command, str(src), str(dst)], check=True,
                                   capture_output=True, timeout=self.timeout)
                    with Image.open(dst) as out:
                        if out.mode not in ("I;16", "I;16B", "I;16L"):
                            raise PredictorError(f"external depth must be 16-bit grayscale, got mode {out.mode}")
                        depth = np.asarray(out, dtype=np.uint16).astype(np.float32)
                except PredictorError:
                    raise
                except subprocess.CalledProcessError as exc:
                    err = exc.stderr.decode(errors="replace").strip().splitlines()
                    detail = f": {err[-1]}" if err else ""
                    raise PredictorError(f"external depth predictor exited with {exc.returncode}{detail}") from exc
                except (OSError, subprocess.SubprocessError) as exc:
                    raise PredictorError(f"external depth predictor failed: {exc}") from exc
                if depth.shape != tuple(im.shape[-2:]):
                    raise PredictorError(f"external depth has size {depth.shape}, expected {tuple(im.shape[-2:])}")
                outs.append(torch.from_numpy(depth)[None])
        return torch.stack(outs).to(img.dtype)


def predict_depth(p: DepthPredictor, img: torch.Tensor) -> torch.Tensor:
    validate_image(img)
    try:
        raw = p.predict(img)
    except (PredictorError, ShapeError):
        raise
    except Exception as exc:
        raise PredictorError(f"depth predictor {type(p).__name__} failed: {exc}") from exc
    if raw.ndim != 4 or raw.shape[1] != 1 or raw.shape[-2:] != img.shape[-2:]:
        raise PredictorError(f"predictor returned shape {tuple(raw.shape)} for image {tuple(img.shape)}")
    if not torch.isfinite(raw).all():
        raise PredictorError("predictor returned non-finite depth")
    return validate_depth(normalize_depth(raw), like=img)


class AdaptiveNet(nn.Module):
    """1 -> 3 channel 3x3 conv, average-pooled to each stride, then a
    zero-initialized 1x1 projection per stride into fusion channels."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.strides = cfg.reassemble_strides
        self.conv = nn.Conv2d(1, 3, kernel_size=3, stride=1, padding=1)
        self.proj = nn.ModuleList(nn.Conv2d(3, cfg.fusion_channels, 1) for _ in self.strides)
        for p in self.proj:
            nn.init.zeros_(p.weight)
            nn.init.zeros_(p.bias)

    def features(self, m):
        a = self.conv(m)
        return [F.avg_pool2d(a, s) for s in self.strides]

    def forward(self, m) -> MultiScaleFeatures:
        return [proj(f) for proj, f in zip(self.proj, self.features(m))]


def adapt_map(a: AdaptiveNet, m: torch.Tensor, cfg: ModelConfig) -> MultiScaleFeatures:
    validate_depth(m)
    h, w = m.shape[-2:]
    if h % max(cfg.reassemble_strides) or w % max(cfg.reassemble_strides):
        raise ShapeError(f"map {h}x{w} not divisible by the coarsest stride")
    levels = a(m)
    assert [tuple(l.shape[-2:]) for l in levels] == level_shapes(cfg, (h, w))
    return levels


def adapt_depth(a: AdaptiveNet, d: torch.Tensor, cfg: ModelConfig) -> MultiScaleFeatures:
    return adapt_map(a, d, cfg)


def fit_depth_predictor(net: FallbackDepthNet, samples, steps: int, lr: float = 1e-3, seed: int = 0):
    """Supervised L1 fit of a fallback predictor on (rgb, depth_gt) samples.

    Returns the per-step loss trace.
    """
    if not samples:
        raise ValueError("no samples to fit the depth predictor on")
    gen = torch.Generator().manual_seed(seed)
    opt = torch.optim.Adam(net.parameters(), lr=lr)
    net.train()
    trace = []
    for _ in range(steps):
        s = samples[int(torch.randint(len(samples), (1,), generator=gen))]
        pred = normalize_depth(net(s.rgb))
        loss = (pred - s.depth_gt).abs().mean()
        opt.zero_grad()
        loss.backward()
        opt.step()
        trace.append(loss.item())
    return trace
