import csv
import warnings

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from bradcn.core import ProviderError, ShapeError, TooSmallError
from bradcn.metrics import (C1, LossKind, LossSpec, MetricReport, combined_loss, l1_loss, lpips_plugin,
                            max_ms_ssim_scales, mean_report, measure, ms_ssim, psnr, ssim, write_csv, write_json)

from oracles import grad_check, ms_ssim_brute, psnr_formula, ssim_brute


def rand_pair(h, w, seed, b=1):
    g = torch.Generator().manual_seed(seed)
    x = torch.rand(b, 3, h, w, generator=g, dtype=torch.float64)
    # correlated target so SSIM terms are not all near zero
    y = (0.7 * x + 0.3 * torch.rand(b, 3, h, w, generator=g, dtype=torch.float64)).clamp(0, 1)
    return x, y


def test_l1_basics():
    x = torch.rand(1, 3, 8, 8)
    assert l1_loss(x, x).item() == 0.0
    assert l1_loss(torch.zeros(1, 3, 4, 4), torch.full((1, 3, 4, 4), 0.5)).item() == 0.5
    with pytest.raises(ShapeError):
        l1_loss(torch.zeros(1, 3, 4, 4), torch.zeros(1, 3, 4, 5))


def test_ssim_identity():
    x, _ = rand_pair(32, 32, 0)
    assert abs(ssim(x, x).item() - 1) < 1e-6


def test_ssim_constant_closed_form():
    a = torch.zeros(1, 3, 32, 32, dtype=torch.float64)
    b = torch.ones_like(a)
    assert abs(ssim(a, b).item() - C1 / (1 + C1)) < 1e-7


def test_ssim_too_small():
    with pytest.raises(TooSmallError):
        ssim(torch.rand(1, 3, 10, 32), torch.rand(1, 3, 10, 32))


@pytest.mark.parametrize("seed", range(3))
def test_ssim_matches_brute_force(seed):
    x, y = rand_pair(32, 32, seed)
    assert abs(ssim(x, y).item() - ssim_brute(x, y)) < 1e-6


def test_ms_ssim_identity_and_single_scale():
    x, y = rand_pair(48, 48, 1)
    assert abs(ms_ssim(x, x, 3).item() - 1) < 1e-6
    assert abs(ms_ssim(x, y, 1).item() - ssim(x, y).item()) < 1e-6


@pytest.mark.parametrize("seed", range(2))
def test_ms_ssim_matches_brute_force(seed):
    x, y = rand_pair(44, 46, seed)
    s = max_ms_ssim_scales((44, 46))
    assert s == 3
    assert abs(ms_ssim(x, y, s).item() - ms_ssim_brute(x, y, s)) < 1e-6


def test_ms_ssim_too_small_names_limit():
    x = torch.rand(1, 3, 96, 64)
    with pytest.raises(TooSmallError, match="maximum admissible scales is 3"):
        ms_ssim(x, x, 5)


def test_max_scales():
    assert max_ms_ssim_scales((176, 176)) == 5
    assert max_ms_ssim_scales((175, 400)) == 4
    assert max_ms_ssim_scales((10, 10)) == 0


def test_ms_ssim_call_counter():
    before = ms_ssim.calls
    x = torch.rand(1, 3, 32, 32)
    ms_ssim(x, x, 1)
    combined_loss(x, x, LossSpec(LossKind.L1))
    assert ms_ssim.calls == before + 1


def test_combined_loss_cases():
    a = torch.zeros(1, 3, 48, 48, dtype=torch.float64)
    b = torch.full_like(a, 0.5)
    x, y = rand_pair(48, 48, 4)
    assert combined_loss(x, y, LossSpec(LossKind.L1_plus_MS_SSIM, 0.0, 2)).item() == l1_loss(x, y).item()
    assert abs(combined_loss(x, x, LossSpec(LossKind.L1_plus_MS_SSIM, 1.0, 2)).item()) < 1e-12
    # hand-composed oracle on constants: 0.84 * 0.5 + 0.16 * (1 - msssim)
    ms = ms_ssim_brute(a, b, 2)
    expect = 0.84 * 0.5 + 0.16 * (1 - ms)
    assert abs(combined_loss(a, b, LossSpec(LossKind.L1_plus_MS_SSIM, 0.16, 2)).item() - expect) < 1e-9


def test_combined_loss_reduces_scales_with_warning():
    x, y = rand_pair(96, 64, 0)
    with pytest.warns(UserWarning, match="reduced from 5 to 3"):
        v = combined_loss(x, y, LossSpec(LossKind.L1_plus_MS_SSIM))
    assert abs(v.item() - (0.84 * l1_loss(x, y).item() + 0.16 * (1 - ms_ssim(x, y, 3).item()))) < 1e-12


def test_loss_spec_alpha_range():
    with pytest.raises(ValueError):
        LossSpec(LossKind.L1_plus_MS_SSIM, 1.5)


def test_psnr_cases():
    x = torch.rand(1, 3, 16, 16, dtype=torch.float64) * 0.9
    assert psnr(x, x) == 99.0
    assert abs(psnr(x, x + 1 / 255) - 48.1308) < 1e-3
    assert abs(psnr(x, x + 1 / 255) - psnr_formula((1 / 255) ** 2)) < 1e-9


def test_psnr_monotone_in_noise():
    g = torch.Generator().manual_seed(0)
    x = torch.rand(1, 3, 32, 32, generator=g, dtype=torch.float64)
    n = torch.randn(x.shape, generator=g, dtype=torch.float64)
    vals = [psnr(x, x + s * n) for s in (0.01, 0.02, 0.05, 0.1)]
    assert all(a >= b for a, b in zip(vals, vals[1:]))


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_symmetry_and_ranges(seed):
    x, y = rand_pair(48, 48, seed)
    assert abs(ssim(x, y).item() - ssim(y, x).item()) < 1e-9
    assert abs(ms_ssim(x, y, 2).item() - ms_ssim(y, x, 2).item()) < 1e-9
    assert abs(psnr(x, y) - psnr(y, x)) < 1e-9
    assert -1 <= ssim(x, y).item() <= 1
    assert 0 <= ms_ssim(x, y, 2).item() <= 1
    assert psnr(x, y) > 0


def test_l1_gradient_4x4():
    x, y = rand_pair(4, 4, 3)
    d, c = grad_check(lambda p: l1_loss(p, y), x, coords=48)
    assert d < 1e-3 and c < 1e-3


def test_ms_ssim_gradient_48():
    x, y = rand_pair(48, 48, 5)
    d, c = grad_check(lambda p: 1 - ms_ssim(p, y, 2), x, coords=8)
    assert d < 1e-3 and c < 1e-3


def test_ms_ssim_gradient_finite_at_floor():
    # anti-correlated images drive contrast-structure terms negative
    x = torch.rand(1, 3, 48, 48, dtype=torch.float64, requires_grad=True)
    v = ms_ssim(x, 1 - x.detach(), 2)
    v.backward()
    assert torch.isfinite(x.grad).all()


def test_lpips_plugin():
    x, y = rand_pair(16, 16, 0)
    assert lpips_plugin(x, y) is None
    assert lpips_plugin(x, x, lambda a, b: float((a - b).abs().sum())) == 0.0
    proj = torch.randn(3, 5, generator=torch.Generator().manual_seed(1), dtype=torch.float64)

    def stub(a, b):
        fa = torch.einsum("bchw,cd->bdhw", a, proj)
        fb = torch.einsum("bchw,cd->bdhw", b, proj)
        return ((fa - fb) ** 2).mean().item()

    a, b = x[0].numpy(), y[0].numpy()
    p = proj.numpy()
    brute = np.mean([(sum((a[c, i, j] - b[c, i, j]) * p[c, d] for c in range(3))) ** 2
                     for d in range(5) for i in range(16) for j in range(16)])
    assert abs(lpips_plugin(x, y, stub) - brute) < 1e-12

    def broken(a, b):
        raise RuntimeError("no weights")

    with pytest.raises(ProviderError):
        lpips_plugin(x, y, broken)


def test_reports(tmp_path):
    x, y = rand_pair(48, 48, 0)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        r = measure(x, x, "same")
    assert r.psnr_db == 99.0 and abs(r.ssim - 1) < 1e-9 and r.lpips is None
    m = mean_report([MetricReport("a", 10.0, 0.5, 0.5), MetricReport("b", 20.0, 0.7, 0.9)])
    assert m.psnr_db == 15.0 and m.image_id == "mean" and m.lpips is None
    write_csv([r, m], tmp_path / "m.csv")
    rows = list(csv.DictReader(open(tmp_path / "m.csv")))
    assert [row["image_id"] for row in rows] == ["same", "mean"]
    assert rows[0]["lpips"] == ""
    write_json([r], tmp_path / "m.json")
    assert "psnr_db" in (tmp_path / "m.json").read_text()
