"""Paired bokeh corpora, RGB-D corpora, split manifests and synthetic scenes.

On-disk layouts::

    paired:  <root>/original/<id>.png   <root>/bokeh/<id>.png
    rgbd:    <root>/rgb/<id>.png        <root>/depth/<id>.png  (16-bit, mm)
"""
from __future__ import annotations

import os
from collections.abc import Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch
from PIL import Image, UnidentifiedImageError

from .core import CountError, DataError, DecodeError, LayoutError, ShapeError
from .depth_net import normalize_depth

IMAGE_EXTS = (".png", ".jpg", ".jpeg")
DEPTH_MODES = ("I;16", "I;16B", "I;16L", "I;16N")

# published protocol sizes (train, test); memberships are ours, seed-pinned
EBB_SPLIT = (4400, 294)
SUNRGBD_SPLIT = (6545, 700)


@dataclass
class PairedSample:
    id: str
    sharp: torch.Tensor
    bokeh: torch.Tensor

    def __post_init__(self):
        if self.sharp.shape != self.bokeh.shape:
            raise ShapeError(f"{self.id}: sharp {tuple(self.sharp.shape)} != bokeh {tuple(self.bokeh.shape)}")


@dataclass
class RgbdSample:
    id: str
    rgb: torch.Tensor
    depth_gt: torch.Tensor

    def __post_init__(self):
        if self.rgb.shape[-2:] != self.depth_gt.shape[-2:]:
            raise ShapeError(f"{self.id}: rgb {tuple(self.rgb.shape[-2:])} != depth {tuple(self.depth_gt.shape[-2:])}")


def num_workers() -> int:
    env = os.environ.get("BRADCN_NUM_WORKERS")
    if env:
        return max(1, int(env))
    return min(4, os.cpu_count() or 1)


class Corpus(Sequence):
    """Ordered, immutable collection of samples, decoded on access."""

    def __init__(self, ids: list[str], loader: Callable[[str], object]):
        self.ids = list(ids)
        self._loader = loader
        self._index = {k: i for i, k in enumerate(self.ids)}

    @classmethod
    def from_samples(cls, samples) -> "Corpus":
        by_id = {s.id: s for s in samples}
        return cls(sorted(by_id), by_id.__getitem__)

    def __len__(self):
        return len(self.ids)

    def __getitem__(self, i):
        if isinstance(i, slice):
            return [self._loader(k) for k in self.ids[i]]
        return self._loader(self.ids[i])

    def get(self, sample_id):
        if sample_id not in self._index:
            raise KeyError(sample_id)
        return self._loader(sample_id)

    def subset(self, ids) -> "Corpus":
        missing = [k for k in ids if k not in self._index]
        if missing:
            raise DataError(f"ids not in corpus: {missing[:5]}")
        return Corpus(list(ids), self._loader)

    def load_all(self) -> list:
        with ThreadPoolExecutor(num_workers()) as pool:
            return list(pool.map(self._loader, self.ids))


def read_image(path) -> torch.Tensor:
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    except (OSError, UnidentifiedImageError) as exc:
        raise DecodeError(f"cannot decode image {path}: {exc}") from exc
    return torch.from_numpy(arr.astype(np.float32) / 255.0).permute(2, 0, 1)[None].contiguous()


def quantize(img: torch.Tensor) -> np.ndarray:
    """(1,3,H,W) in [0,1] -> (H,W,3) uint8."""
    return (img[0].detach().cpu().permute(1, 2, 0).numpy() * 255.0).round().clip(0, 255).astype(np.uint8)


def write_image(path, img: torch.Tensor) -> None:
    Image.fromarray(quantize(img)).save(path)


def read_depth(path) -> torch.Tensor:
    """16-bit depth PNG -> (1,1,H,W) normalized per image to [0, 1]."""
    try:
        with Image.open(path) as im:
            if im.mode not in DEPTH_MODES:
                raise DecodeError(f"{path}: depth must be 16-bit single-channel, got mode {im.mode}")
            arr = np.asarray(im, dtype=np.uint16).astype(np.float64)
    except (OSError, UnidentifiedImageError) as exc:
        raise DecodeError(f"cannot decode depth {path}: {exc}") from exc
    return normalize_depth(torch.from_numpy(arr)[None, None]).float()


def write_depth(path, depth: torch.Tensor, max_mm: float = 10000.0) -> None:
    mm = (depth[0, 0].detach().cpu().double().numpy() * max_mm).round().clip(0, 65535).astype(np.uint16)
    Image.fromarray(mm).save(path)


def _list_images(d: Path) -> dict[str, Path]:
    if not d.is_dir():
        raise LayoutError(f"missing directory {d}")
    out = {}
    for p in sorted(d.iterdir()):
        if p.suffix.lower() in IMAGE_EXTS:
            if p.stem in out:
                raise LayoutError(f"duplicate id {p.stem!r} in {d}")
            out[p.stem] = p
    return out


def _match(a: dict, b: dict, name_a: str, name_b: str) -> list[str]:
    only_a, only_b = sorted(set(a) - set(b)), sorted(set(b) - set(a))
    if only_a or only_b:
        parts = []
        if only_a:
            parts.append(f"in {name_a}/ only: {', '.join(a[k].name for k in only_a)}")
        if only_b:
            parts.append(f"in {name_b}/ only: {', '.join(b[k].name for k in only_b)}")
        raise LayoutError("unmatched files: " + "; ".join(parts))
    return sorted(a)


def _header(path) -> tuple[str, tuple[int, int]]:
    try:
        with Image.open(path) as im:
            return im.mode, (im.height, im.width)
    except (OSError, UnidentifiedImageError) as exc:
        raise DecodeError(f"cannot decode {path}: {exc}") from exc


def _headers(paths):
    with ThreadPoolExecutor(num_workers()) as pool:
        return list(pool.map(_header, paths))


def load_paired_corpus(root) -> Corpus:
    root = Path(root)
    sharp, bokeh = _list_images(root / "original"), _list_images(root / "bokeh")
    ids = _match(sharp, bokeh, "original", "bokeh")
    hs, hb = _headers([sharp[k] for k in ids]), _headers([bokeh[k] for k in ids])
    for k, (_, sa), (_, sb) in zip(ids, hs, hb):
        if sa != sb:
            raise ShapeError(f"{k}: original {sa} and bokeh {sb} sizes differ")

    def load(k):
        return PairedSample(k, read_image(sharp[k]), read_image(bokeh[k]))

    return Corpus(ids, load)


def load_rgbd_corpus(root) -> Corpus:
    root = Path(root)
    rgb, depth = _list_images(root / "rgb"), _list_images(root / "depth")
    ids = _match(rgb, depth, "rgb", "depth")
    hr, hd = _headers([rgb[k] for k in ids]), _headers([depth[k] for k in ids])
    for k, (_, sr), (mode, sd) in zip(ids, hr, hd):
        if mode not in DEPTH_MODES:
            raise DecodeError(f"{depth[k]}: depth must be 16-bit single-channel, got mode {mode}")
        if sr != sd:
            raise ShapeError(f"{k}: rgb {sr[0]}x{sr[1]} and depth {sd[0]}x{sd[1]} sizes differ")

    def load(k):
        return RgbdSample(k, read_image(rgb[k]), read_depth(depth[k]))

    return Corpus(ids, load)


@dataclass(frozen=True)
class SplitManifest:
    train_ids: tuple[str, ...]
    test_ids: tuple[str, ...]
    seed: int

    def __post_init__(self):
        object.__setattr__(self, "train_ids", tuple(self.train_ids))
        object.__setattr__(self, "test_ids", tuple(self.test_ids))
        leak = set(self.train_ids) & set(self.test_ids)
        if leak:
            raise DataError(f"train/test overlap: {sorted(leak)[:5]}")

    def check_against(self, corpus: Corpus) -> None:
        known = set(corpus.ids)
        missing = [k for k in (*self.train_ids, *self.test_ids) if k not in known]
        if missing:
            raise DataError(f"manifest ids missing from corpus: {missing[:5]}")


def make_split(corpus, train_count: int, test_count: int, seed: int) -> SplitManifest:
    ids = list(corpus.ids if isinstance(corpus, Corpus) else corpus)
    if train_count < 0 or test_count < 0 or train_count + test_count > len(ids):
        raise CountError(f"cannot draw {train_count} train + {test_count} test from {len(ids)} samples")
    perm = np.random.default_rng(seed).permutation(len(ids))
    test = sorted(ids[i] for i in perm[:test_count])
    train = sorted(ids[i] for i in perm[test_count:test_count + train_count])
    return SplitManifest(train, test, seed)


def paper_split(corpus, dataset: str, seed: int = 0) -> SplitManifest:
    counts = {"ebb": EBB_SPLIT, "sunrgbd": SUNRGBD_SPLIT}[dataset]
    return make_split(corpus, *counts, seed=seed)


def save_manifest(m: SplitManifest, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name, ids in (("train", m.train_ids), ("test", m.test_ids)):
        (out / f"{name}.txt").write_text(f"seed={m.seed}\n" + "".join(f"{k}\n" for k in ids))


def _read_id_file(path: Path) -> tuple[int, list[str]]:
    try:
        lines = path.read_text().splitlines()
    except OSError as exc:
        raise DataError(f"cannot read manifest {path}: {exc}") from exc
    if not lines or not lines[0].startswith("seed="):
        raise DataError(f"{path}: missing 'seed=<int>' header")
    try:
        seed = int(lines[0][5:])
    except ValueError as exc:
        raise DataError(f"{path}: bad seed header {lines[0]!r}") from exc
    return seed, [ln.strip() for ln in lines[1:] if ln.strip()]


def load_manifest(in_dir, corpus: Corpus | None = None) -> SplitManifest:
    d = Path(in_dir)
    s1, train = _read_id_file(d / "train.txt")
    s2, test = _read_id_file(d / "test.txt")
    if s1 != s2:
        raise DataError(f"train/test manifests disagree on seed ({s1} vs {s2})")
    m = SplitManifest(train, test, s1)
    if corpus is not None:
        m.check_against(corpus)
    return m


def validation_ids(train_ids, seed: int, fraction: float = 0.05) -> tuple[list[str], list[str]]:
    """Seed-pinned (fit, val) partition of training ids.

    Any positive fraction gives at least one val id; zero gives none.
    """
    ids = list(train_ids)
    if len(ids) < 2 or fraction <= 0:
        return ids, []
    n_val = max(1, int(round(fraction * len(ids))))
    perm = np.random.default_rng(seed).permutation(len(ids))
    val = sorted(ids[i] for i in perm[:n_val])
    fit = sorted(ids[i] for i in perm[n_val:])
    return fit, val


# --- synthetic scenes ------------------------------------------------------


def disc_offsets(radius: int) -> list[tuple[int, int]]:
    r = int(radius)
    return [(dy, dx) for dy in range(-r, r + 1) for dx in range(-r, r + 1) if dy * dy + dx * dx <= r * r]


def disc_blur(sharp: np.ndarray, radius: np.ndarray) -> np.ndarray:
    """Gather-style variable disc blur.

    ``sharp`` is (C,H,W); ``radius`` is an integer (H,W) map. Each output
    pixel is the mean of the input over the disc of its own radius, with
    symmetric (edge-repeating) boundary handling.
    """
    out = np.empty_like(sharp, dtype=np.float64)
    rmax = int(radius.max())
    h, w = radius.shape
    padded = np.pad(sharp.astype(np.float64), ((0, 0), (rmax, rmax), (rmax, rmax)), mode="symmetric")
    for r in np.unique(radius):
        offs = disc_offsets(r)
        acc = np.zeros_like(out)
        for dy, dx in offs:
            acc += padded[:, rmax + dy:rmax + dy + h, rmax + dx:rmax + dx + w]
        mask = radius == r
        out[:, mask] = acc[:, mask] / len(offs)
    return out


@dataclass
class Scene:
    sharp: np.ndarray          # (3,H,W)
    depth: np.ndarray          # (H,W), analytic, spans [0,1]
    bokeh: np.ndarray          # (3,H,W)
    focus_depth: float
    shape_masks: list = field(default_factory=list)
    shape_depths: list = field(default_factory=list)


HAZE_COLOR = np.array([0.75, 0.8, 0.85])


def _texture(rng, h, w, kind="stripes"):
    """Two-colour pattern: hard stripes, a sinusoidal grating ("waves"), or a
    smooth linear blend ("flat")."""
    c0, c1 = rng.uniform(0.1, 0.9, 3), rng.uniform(0.1, 0.9, 3)
    theta = rng.uniform(0, np.pi)
    yy, xx = np.mgrid[0:h, 0:w]
    proj = np.cos(theta) * xx + np.sin(theta) * yy
    if kind == "stripes":
        t = np.floor(proj / rng.uniform(6.0, 12.0)) % 2
    elif kind == "waves":
        t = 0.5 + 0.5 * np.sin(2 * np.pi * proj / rng.uniform(12.0, 24.0) + rng.uniform(0, 2 * np.pi))
    elif kind == "flat":
        t = (proj - proj.min()) / max(proj.max() - proj.min(), 1e-9)
    else:
        raise ValueError(f"unknown texture kind {kind!r}")
    t = t[None]
    return c0[:, None, None] * (1 - t) + c1[:, None, None] * t


def _plane(rng, h, w, random_plane):
    yy, xx = np.mgrid[0:h, 0:w]
    if not random_plane:
        # ground plane: far (1) at the top row, near (0) at the bottom row
        return 1.0 - yy / (h - 1)
    theta = rng.uniform(0, 2 * np.pi)
    ramp = np.cos(theta) * xx + np.sin(theta) * yy
    return (ramp - ramp.min()) / (ramp.max() - ramp.min())


def make_scene(hw, rng: np.random.Generator, focus_depth=None, max_radius=5, haze=0.3, n_shapes=3,
               random_plane=False, texture="stripes") -> Scene:
    """One procedural scene. ``random_plane`` tilts the background depth ramp in
    a random direction so depth is not recoverable from pixel position."""
    h, w = hw
    yy, xx = np.mgrid[0:h, 0:w]
    depth = _plane(rng, h, w, random_plane).astype(np.float64)
    color = _texture(rng, h, w, texture)
    shapes = []
    for _ in range(n_shapes):
        d = float(rng.uniform(0.15, 0.85))
        cy, cx = rng.uniform(0.2 * h, 0.8 * h), rng.uniform(0.2 * w, 0.8 * w)
        sy, sx = rng.uniform(0.1, 0.25) * h, rng.uniform(0.1, 0.25) * w
        if rng.random() < 0.5:
            mask = ((yy - cy) / sy) ** 2 + ((xx - cx) / sx) ** 2 <= 1.0
        else:
            mask = (np.abs(yy - cy) <= sy) & (np.abs(xx - cx) <= sx)
        shapes.append((d, mask, _texture(rng, h, w, texture)))
    # painter's order: far shapes first, near shapes occlude them
    masks, depths = [], []
    for d, mask, tex in sorted(shapes, key=lambda s: -s[0]):
        depth[mask] = d
        color[:, mask] = tex[:, mask]
    for d, mask, _ in shapes:
        masks.append(mask & (depth == d))
        depths.append(d)
    sharp = (1 - haze * depth)[None] * color + (haze * depth)[None] * HAZE_COLOR[:, None, None]
    if focus_depth is None:
        focus_depth = depths[0]
    radius = np.rint(max_radius * np.abs(depth - focus_depth)).astype(np.int64)
    bokeh = disc_blur(sharp, radius)
    return Scene(sharp, depth, bokeh, float(focus_depth), masks, depths)


def synth_scenes(n: int, hw, seed: int, focus_depth=None, **kw) -> list[Scene]:
    return [make_scene(hw, np.random.default_rng([seed, i]), focus_depth, **kw) for i in range(n)]


def _t(a: np.ndarray) -> torch.Tensor:
    t = torch.from_numpy(np.ascontiguousarray(a, dtype=np.float32))
    return t[None] if t.ndim == 3 else t[None, None]


def synth_scene(n: int, hw, seed: int, focus_depth=None, **kw):
    """Procedural scenes -> (RGB-D samples, paired sharp/bokeh samples)."""
    rgbd, paired = [], []
    for i, sc in enumerate(synth_scenes(n, hw, seed, focus_depth, **kw)):
        sid = f"synth{seed}_{i:04d}"
        rgbd.append(RgbdSample(sid, _t(sc.sharp), _t(sc.depth)))
        paired.append(PairedSample(sid, _t(sc.sharp), _t(sc.bokeh)))
    return rgbd, paired


def write_synth_corpus(out_dir, n: int, hw, seed: int, **scene_kw) -> list[str]:
    """Write a synthetic corpus in both on-disk layouts (paired and RGB-D)."""
    out = Path(out_dir)
    for sub in ("original", "bokeh", "rgb", "depth"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    rgbd, paired = synth_scene(n, hw, seed, **scene_kw)
    for r, p in zip(rgbd, paired):
        write_image(out / "original" / f"{p.id}.png", p.sharp)
        write_image(out / "bokeh" / f"{p.id}.png", p.bokeh)
        write_image(out / "rgb" / f"{r.id}.png", r.rgb)
        write_depth(out / "depth" / f"{r.id}.png", r.depth_gt)
    return [p.id for p in paired]
