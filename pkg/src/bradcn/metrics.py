"""Training losses (L1, MS-SSIM, their mix) and image quality metrics.

All functions take (B, C, H, W) tensors in [0, 1] (peak value L = 1).
"""
from __future__ import annotations

import csv
import enum
import json
import math
import warnings
from dataclasses import asdict, dataclass
from typing import Callable, Optional

import torch
import torch.nn.functional as F

from .core import ProviderError, ShapeError, TooSmallError

WINDOW_SIZE = 11
WINDOW_SIGMA = 1.5
C1 = 0.01 ** 2
C2 = 0.03 ** 2
MS_SSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
PSNR_CAP = 99.0


def _same_shape(a, b):
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def l1_loss(pred, gt):
    _same_shape(pred, gt)
    return (pred - gt).abs().mean()


def gaussian_window(size=WINDOW_SIZE, sigma=WINDOW_SIGMA, dtype=torch.float64):
    x = torch.arange(size, dtype=dtype) - (size - 1) / 2
    g = torch.exp(-(x ** 2) / (2 * sigma ** 2))
    g = g / g.sum()
    return torch.outer(g, g)


def _filter(x, win):
    c = x.shape[1]
    k = win.to(x.dtype).expand(c, 1, *win.shape)
    return F.conv2d(x, k, groups=c)


def _ssim_terms(x, y):
    """Per-(batch, channel) means of the SSIM map and the contrast-structure map."""
    win = gaussian_window(dtype=x.dtype)
    mu_x, mu_y = _filter(x, win), _filter(y, win)
    sxx = _filter(x * x, win) - mu_x ** 2
    syy = _filter(y * y, win) - mu_y ** 2
    sxy = _filter(x * y, win) - mu_x * mu_y
    cs = (2 * sxy + C2) / (sxx + syy + C2)
    lum = (2 * mu_x * mu_y + C1) / (mu_x ** 2 + mu_y ** 2 + C1)
    return (lum * cs).mean(dim=(-2, -1)), cs.mean(dim=(-2, -1))


def ssim(pred, gt):
    _same_shape(pred, gt)
    if min(pred.shape[-2:]) < WINDOW_SIZE:
        raise TooSmallError(f"SSIM needs H, W >= {WINDOW_SIZE}, got {tuple(pred.shape[-2:])}")
    return _ssim_terms(pred, gt)[0].mean()


def max_ms_ssim_scales(hw) -> int:
    m = min(hw)
    if m < WINDOW_SIZE:
        return 0
    return int(math.floor(math.log2(m / WINDOW_SIZE))) + 1


def _ms_weights(scales, dtype):
    w = torch.tensor(MS_SSIM_WEIGHTS[:scales], dtype=dtype)
    return w if scales == len(MS_SSIM_WEIGHTS) else w / w.sum()


def ms_ssim(pred, gt, scales: int = 5):
    """Multi-scale SSIM: contrast-structure at every scale, full SSIM at the
    coarsest one, combined with the standard five-scale exponents."""
    _same_shape(pred, gt)
    if not 1 <= scales <= len(MS_SSIM_WEIGHTS):
        raise ValueError(f"scales must be in 1..{len(MS_SSIM_WEIGHTS)}")
    need = WINDOW_SIZE * 2 ** (scales - 1)
    if min(pred.shape[-2:]) < need:
        raise TooSmallError(
            f"MS-SSIM with {scales} scales needs min(H, W) >= {need}, got {tuple(pred.shape[-2:])}; "
            f"maximum admissible scales is {max_ms_ssim_scales(pred.shape[-2:])}")
    ms_ssim.calls += 1
    weights = _ms_weights(scales, pred.dtype)
    terms = []
    x, y = pred, gt
    for j in range(scales):
        s, cs = _ssim_terms(x, y)
        terms.append(s if j == scales - 1 else cs)
        if j < scales - 1:
            x, y = F.avg_pool2d(x, 2), F.avg_pool2d(y, 2)
    # negative cs would make fractional powers undefined; keep a floor so the gradient stays finite
    stacked = torch.stack(terms, dim=0).clamp_min(1e-6)
    val = torch.prod(stacked ** weights.view(-1, 1, 1), dim=0)
    return val.mean()


ms_ssim.calls = 0


class LossKind(enum.Enum):
    L1 = "l1"
    MS_SSIM = "ms_ssim"
    L1_plus_MS_SSIM = "l1_ms_ssim"


@dataclass(frozen=True)
class LossSpec:
    kind: LossKind = LossKind.L1
    mix_alpha: float = 0.16
    scales: int = 5

    def __post_init__(self):
        if not 0.0 <= self.mix_alpha <= 1.0:
            raise ValueError(f"mix_alpha must lie in [0, 1], got {self.mix_alpha}")


def _fit_scales(requested, hw):
    avail = max_ms_ssim_scales(hw)
    if avail < 1:
        raise TooSmallError(f"image {tuple(hw)} too small for MS-SSIM")
    if avail < requested:
        warnings.warn(f"MS-SSIM scales reduced from {requested} to {avail} for {hw[0]}x{hw[1]} images",
                      stacklevel=3)
        return avail
    return requested


def combined_loss(pred, gt, spec: LossSpec = LossSpec()):
    if spec.kind is LossKind.L1:
        return l1_loss(pred, gt)
    scales = _fit_scales(spec.scales, pred.shape[-2:])
    ms_term = 1 - ms_ssim(pred, gt, scales)
    if spec.kind is LossKind.MS_SSIM:
        return ms_term
    a = spec.mix_alpha
    return (1 - a) * l1_loss(pred, gt) + a * ms_term


def psnr(pred, gt) -> float:
    _same_shape(pred, gt)
    mse = ((pred.double() - gt.double()) ** 2).mean().item()
    if mse == 0:
        return PSNR_CAP
    return 10 * math.log10(1.0 / mse)


LpipsProvider = Callable[[torch.Tensor, torch.Tensor], float]


def lpips_plugin(pred, gt, provider: Optional[LpipsProvider] = None) -> Optional[float]:
    """Perceptual distance from an externally supplied network, or None."""
    if provider is None:
        return None
    try:
        return float(provider(pred, gt))
    except Exception as exc:
        raise ProviderError(f"LPIPS provider failed: {exc}") from exc


@dataclass
class MetricReport:
    image_id: str
    psnr_db: float
    ssim: float
    ms_ssim: float
    lpips: Optional[float] = None

    def row(self) -> dict:
        d = asdict(self)
        d["lpips"] = "" if self.lpips is None else self.lpips
        return d


REPORT_FIELDS = ("image_id", "psnr_db", "ssim", "ms_ssim", "lpips")


def measure(pred, gt, image_id: str, provider: Optional[LpipsProvider] = None, scales: int = 5) -> MetricReport:
    pred, gt = pred.double(), gt.double()
    with torch.no_grad():
        return MetricReport(
            image_id=image_id,
            psnr_db=psnr(pred, gt),
            ssim=ssim(pred, gt).item(),
            ms_ssim=ms_ssim(pred, gt, _fit_scales(scales, pred.shape[-2:])).item(),
            lpips=lpips_plugin(pred, gt, provider),
        )


def mean_report(reports: list[MetricReport], image_id: str = "mean") -> MetricReport:
    if not reports:
        raise ValueError("cannot average an empty report list")
    n = len(reports)
    lp = [r.lpips for r in reports]
    return MetricReport(
        image_id=image_id,
        psnr_db=sum(r.psnr_db for r in reports) / n,
        ssim=sum(r.ssim for r in reports) / n,
        ms_ssim=sum(r.ms_ssim for r in reports) / n,
        lpips=None if any(v is None for v in lp) else sum(lp) / n,
    )


def write_csv(reports: list[MetricReport], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=REPORT_FIELDS)
        w.writeheader()
        for r in reports:
            w.writerow(r.row())


def write_json(reports: list[MetricReport], path) -> None:
    with open(path, "w") as fh:
        json.dump([asdict(r) for r in reports], fh, indent=2)
