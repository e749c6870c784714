"""Independent reference implementations used as test oracles.

Everything here is written from the textbook definitions with explicit loops
in float64, sharing no code with the package.
"""
import math

import numpy as np
import torch

MS_WEIGHTS = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333]
K1, K2 = 0.01, 0.03


def gauss2d(size=11, sigma=1.5):
    r = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-r ** 2 / (2 * sigma ** 2))
    w = np.outer(g, g)
    return w / w.sum()


def ssim_windows(x, y, size=11):
    """Per-window (luminance * cs, cs) maps of one 2-D channel pair."""
    w = gauss2d(size)
    c1, c2 = K1 ** 2, K2 ** 2
    h, wd = x.shape
    full = np.empty((h - size + 1, wd - size + 1))
    cs = np.empty_like(full)
    for i in range(h - size + 1):
        for j in range(wd - size + 1):
            px, py = x[i:i + size, j:j + size], y[i:i + size, j:j + size]
            mx, my = (w * px).sum(), (w * py).sum()
            vx, vy = (w * (px - mx) ** 2).sum(), (w * (py - my) ** 2).sum()
            cov = (w * (px - mx) * (py - my)).sum()
            cs[i, j] = (2 * cov + c2) / (vx + vy + c2)
            full[i, j] = (2 * mx * my + c1) / (mx ** 2 + my ** 2 + c1) * cs[i, j]
    return full, cs


def _planes(t):
    a = t.detach().double().cpu().numpy()
    return [a[b, c] for b in range(a.shape[0]) for c in range(a.shape[1])]


def ssim_brute(pred, gt):
    return float(np.mean([ssim_windows(x, y)[0].mean() for x, y in zip(_planes(pred), _planes(gt))]))


def halve(x):
    h, w = x.shape[0] // 2 * 2, x.shape[1] // 2 * 2
    x = x[:h, :w]
    return (x[0::2, 0::2] + x[1::2, 0::2] + x[0::2, 1::2] + x[1::2, 1::2]) / 4.0


def ms_ssim_brute(pred, gt, scales):
    weights = np.array(MS_WEIGHTS[:scales])
    weights = weights / weights.sum()
    vals = []
    for x, y in zip(_planes(pred), _planes(gt)):
        prod = 1.0
        for j in range(scales):
            full, cs = ssim_windows(x, y)
            term = full.mean() if j == scales - 1 else cs.mean()
            prod *= max(term, 1e-6) ** weights[j]
            x, y = halve(x), halve(y)
        vals.append(prod)
    return float(np.mean(vals))


def psnr_formula(mse):
    return 10 * math.log10(1.0 / mse)


def disc_blur_brute(sharp, radius):
    """Gather-form disc blur: each output pixel averages the input over a disc
    of its own radius, with mirror-symmetric edge extension."""
    c, h, w = sharp.shape
    out = np.empty_like(sharp, dtype=np.float64)

    def mirror(i, n):
        while i < 0 or i >= n:
            i = -i - 1 if i < 0 else 2 * n - i - 1
        return i

    for y in range(h):
        for x in range(w):
            r = int(radius[y, x])
            acc = np.zeros(c)
            n = 0
            for dy in range(-r, r + 1):
                for dx in range(-r, r + 1):
                    if dy * dy + dx * dx <= r * r:
                        acc += sharp[:, mirror(y + dy, h), mirror(x + dx, w)]
                        n += 1
            out[:, y, x] = acc / n
    return out


def central_difference(f, x, direction, h=1e-6):
    return (f(x + h * direction) - f(x - h * direction)) / (2 * h)


def grad_check(f, x, coords=16, seed=0, h=1e-6):
    """Relative errors of autograd against central differences.

    Returns (directional_rel_err, coordinate_rel_err) where the coordinate
    error is a norm over ``coords`` randomly chosen entries.
    """
    gen = torch.Generator().manual_seed(seed)
    x = x.detach().double().requires_grad_(True)
    g = torch.autograd.grad(f(x), x)[0]
    xd = x.detach()

    def fv(z):
        with torch.no_grad():
            return f(z).item()

    v = torch.randn(x.shape, generator=gen, dtype=torch.float64)
    fd_dir = central_difference(fv, xd, v, h)
    an_dir = (g * v).sum().item()
    dir_err = abs(fd_dir - an_dir) / max(abs(fd_dir), abs(an_dir), 1e-12)
    idx = torch.randperm(x.numel(), generator=gen)[:coords]
    fd, an = [], []
    for i in idx.tolist():
        e = torch.zeros(x.numel(), dtype=torch.float64)
        e[i] = 1
        fd.append(central_difference(fv, xd, e.view(x.shape), h))
        an.append(g.reshape(-1)[i].item())
    fd, an = np.array(fd), np.array(an)
    coord_err = np.linalg.norm(fd - an) / max(np.linalg.norm(fd), 1e-12)
    return dir_err, coord_err
