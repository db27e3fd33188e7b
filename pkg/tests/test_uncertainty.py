import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dynsplat.errors import EmptyCandidate, EmptyMask, ShapeMismatch, ValidationError
from dynsplat.rasterizer import DTYPE, RenderOutput
from dynsplat.uncertainty import (BETA_FLOOR, FEATURE_DIM, HandcraftedFeatures, OracleSegmentation, UncertaintyField,
                                  gaussian_window, load_beta_grid, load_mask_png, overlap_ratio, reweighted_mask,
                                  sample_prompts, save_beta_grid, save_mask_png, ssim_map, ssim_prime,
                                  threshold_mask, uncertainty_loss, uncertainty_residual)

masks = arrays(bool, (8, 9))


# --------------------------------------------------------------------------
# RUM algebra
# --------------------------------------------------------------------------


@given(masks, st.lists(masks, max_size=4), st.floats(0.0, 1.0))
def test_uncertainty_mask_is_contained_in_reweighted_mask(M_u, cands, delta):
    M_ru = reweighted_mask(M_u, cands, delta)
    assert not np.any(M_u & ~M_ru)


@given(masks, masks, st.lists(masks, max_size=4), st.floats(0.0, 1.0))
def test_reweighted_mask_is_monotone(a, extra, cands, delta):
    bigger = a | extra
    assert not np.any(reweighted_mask(a, cands, delta) & ~reweighted_mask(bigger, cands, delta))


def test_overlap_ratio_matches_pixel_count_oracle():
    rng = np.random.default_rng(0)
    checked = 0
    for _ in range(100):
        H, W = rng.integers(4, 40, 2)
        c = rng.random((H, W)) < rng.uniform(0.05, 0.9)
        m = rng.random((H, W)) < rng.uniform(0.05, 0.9)
        if not c.any():
            c[0, 0] = True
        inside = sum(1 for v in range(H) for u in range(W) if c[v, u] and m[v, u])
        total = sum(1 for v in range(H) for u in range(W) if c[v, u])
        assert overlap_ratio(c, m) == inside / total
        checked += 1
    assert checked == 100


def test_overlap_examples():
    m = np.zeros((4, 4), bool)
    m[:2] = True
    c = np.zeros((4, 4), bool)
    c[1:3, 0:2] = True
    assert overlap_ratio(c, m) == 0.5
    assert overlap_ratio(m[:, :], m) == 1.0
    with pytest.raises(EmptyCandidate):
        overlap_ratio(np.zeros((4, 4), bool), m)
    with pytest.raises(ShapeMismatch):
        overlap_ratio(np.ones((3, 4), bool), m)


def test_reweighted_mask_examples():
    M_u = np.zeros((10, 10), bool)
    M_u[0, 0] = True
    assert np.array_equal(reweighted_mask(M_u, []), M_u)
    low = np.zeros((10, 10), bool)
    low[0, :10] = True  # 1 of 10 pixels inside: rho = 0.1
    assert np.array_equal(reweighted_mask(M_u, [low], 0.2), M_u)
    high = np.zeros((10, 10), bool)
    high[0, :4] = True  # rho = 0.25
    assert np.array_equal(reweighted_mask(M_u, [high, np.zeros((10, 10), bool)], 0.2), M_u | high)


def test_threshold_mask_examples():
    assert not threshold_mask(np.full((20, 20), 0.1), 3.5).any()
    b = np.full((20, 20), 0.1)
    b[5:15, 2:12] = 4.0
    m = threshold_mask(b)
    assert m.sum() == 100 and m[5:15, 2:12].all()
    assert not threshold_mask(np.full((2, 2), 3.5), 3.5).any()


def test_sample_prompts():
    m = np.zeros((10, 12), bool)
    m[4, 7] = True
    assert sample_prompts(m, 8) == [(7, 4)]
    m = np.zeros((10, 20), bool)
    m[1:3, 1:3] = True
    m[6:9, 15:19] = True
    pts = sample_prompts(m, 2, seed=1)
    assert sorted(u > 10 for u, _ in pts) == [False, True]
    assert sample_prompts(m, 2, seed=1) == pts
    assert len(sample_prompts(m, 500)) == m.sum()
    with pytest.raises(EmptyMask):
        sample_prompts(np.zeros((3, 3), bool))


def test_oracle_segmentation_candidates():
    inst = np.zeros((12, 12), int)
    inst[2:8, 3:9] = 1
    seg = OracleSegmentation([inst])
    c = seg.candidates(None, [(4, 4), (5, 5), (0, 0)], frame=0)
    assert np.array_equal(c[0], inst == 1)
    assert any(np.array_equal(x, inst == 0) for x in c)
    assert len(c) == 6  # exact, dilated, eroded, left, right, background
    exact = OracleSegmentation([inst], noisy=False).candidates(None, [(4, 4)], frame=0)
    assert len(exact) == 1


# --------------------------------------------------------------------------
# SSIM'
# --------------------------------------------------------------------------


def ssim_reference(a, b):
    """Direct per-pixel windowed sums over reflect-padded channels."""
    w = gaussian_window()
    p = w.shape[0] // 2
    out = np.zeros(a.shape[:2])
    for ch in range(a.shape[2]):
        x = np.pad(a[..., ch], p, mode="reflect")
        y = np.pad(b[..., ch], p, mode="reflect")
        for v in range(a.shape[0]):
            for u in range(a.shape[1]):
                X, Y = x[v:v + 2 * p + 1, u:u + 2 * p + 1], y[v:v + 2 * p + 1, u:u + 2 * p + 1]
                mx, my = np.sum(w * X), np.sum(w * Y)
                sxx = np.sum(w * X * X) - mx * mx
                syy = np.sum(w * Y * Y) - my * my
                sxy = np.sum(w * X * Y) - mx * my
                c1, c2 = 0.01**2, 0.03**2
                out[v, u] += ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx**2 + my**2 + c1) * (sxx + syy + c2))
    return out / a.shape[2]


def test_ssim_matches_scalar_reference():
    rng = np.random.default_rng(4)
    a = rng.random((14, 13, 3))
    b = np.clip(a + 0.1 * rng.normal(size=a.shape), 0, 1)
    assert np.abs(ssim_map(a, b).numpy() - ssim_reference(a, b)).max() < 1e-6


def test_ssim_prime_examples():
    rng = np.random.default_rng(1)
    a = rng.random((16, 16, 3))
    assert float(ssim_prime(a, a).abs().max()) < 1e-12
    c = np.full((16, 16, 3), 0.8)
    d = np.full((16, 16, 3), -0.8)
    # anti-correlated constants: SSIM = (2 mx my + c1) / (mx^2 + my^2 + c1) ~ -1
    assert abs(float(ssim_prime(c, d).mean()) - 1.0) < 1e-3
    with pytest.raises(ShapeMismatch):
        ssim_map(a, a[:8])


# --------------------------------------------------------------------------
# uncertainty loss and field
# --------------------------------------------------------------------------


def render_of(color, depth):
    return RenderOutput(torch.as_tensor(color, dtype=DTYPE), torch.as_tensor(depth, dtype=DTYPE),
                        torch.ones(depth.shape, dtype=DTYPE))


def test_perfect_render_leaves_only_regulariser():
    rng = np.random.default_rng(2)
    img, depth = rng.random((12, 12, 3)), rng.uniform(1, 2, (12, 12))
    beta2 = torch.full((12, 12), 2.0, dtype=DTYPE)
    loss = uncertainty_loss(render_of(img, depth), img, depth, beta2, lambda1=0.5, lambda_reg=0.5)
    assert abs(float(loss) - 0.5 * math.log(2.0)) < 1e-12


def test_depth_term_uses_observed_pixels_only():
    img = np.full((12, 12, 3), 0.3)
    obs = np.zeros((12, 12))
    obs[:6] = 2.0
    r = uncertainty_residual(render_of(img, np.full((12, 12), 1.5)), img, obs, lambda1=0.5)
    assert torch.allclose(r[:6], torch.full((6, 12), 0.25, dtype=DTYPE), atol=1e-12)
    assert float(r[6:].abs().max()) < 1e-12


def test_doubling_beta_halves_residual_weight():
    r = torch.rand(6, 6, generator=torch.Generator().manual_seed(0), dtype=DTYPE)
    b = torch.rand(6, 6, generator=torch.Generator().manual_seed(1), dtype=DTYPE) + 0.5
    dummy = render_of(np.zeros((6, 6, 3)), np.zeros((6, 6)))
    data = lambda beta: uncertainty_loss(dummy, np.zeros((6, 6, 3)), np.zeros((6, 6)), beta, lambda_reg=0.0,
                                         residual=r)
    assert torch.allclose(data(2 * b), data(b) / 2, atol=1e-15)


def test_beta_converges_to_closed_form_optimum():
    r = torch.tensor([[0.2, 0.5], [1.0, 3.0]], dtype=DTYPE)
    lam = 0.5
    log_b = torch.zeros_like(r, requires_grad=True)
    opt = torch.optim.Adam([log_b], lr=0.05)
    dummy = render_of(np.zeros((2, 2, 3)), np.zeros((2, 2)))
    for _ in range(2000):
        opt.zero_grad()
        uncertainty_loss(dummy, np.zeros((2, 2, 3)), np.zeros((2, 2)), torch.exp(log_b), lambda_reg=lam,
                         residual=r).backward()
        opt.step()
    assert torch.allclose(torch.exp(log_b), r / lam, rtol=1e-4)


def test_loss_gradient_wrt_beta_matches_finite_differences():
    g = torch.Generator().manual_seed(3)
    r = torch.rand(5, 5, generator=g, dtype=DTYPE)
    beta = (torch.rand(5, 5, generator=g, dtype=DTYPE) + 0.3).requires_grad_(True)
    dummy = render_of(np.zeros((5, 5, 3)), np.zeros((5, 5)))
    f = lambda b: uncertainty_loss(dummy, np.zeros((5, 5, 3)), np.zeros((5, 5)), b, residual=r)
    f(beta).backward()
    h = 1e-6
    for idx in [(0, 0), (2, 3), (4, 1)]:
        bp, bm = beta.detach().clone(), beta.detach().clone()
        bp[idx] += h
        bm[idx] -= h
        fd = (float(f(bp)) - float(f(bm))) / (2 * h)
        assert abs(fd - float(beta.grad[idx])) <= 1e-4 * abs(fd)


def test_field_floor_and_feature_width():
    field = UncertaintyField.create(seed=0)
    img = np.random.default_rng(0).random((10, 11, 3))
    feats = HandcraftedFeatures().features(img)
    assert feats.shape == (10, 11, FEATURE_DIM)
    with torch.no_grad():
        for p in field.predictor.parameters():
            p.fill_(-5.0)
    with torch.no_grad():
        beta = field.predict(img)
    assert beta.shape == (10, 11) and float(beta.min()) >= BETA_FLOOR
    assert torch.equal(field.predict(img), field.predict(img))


def test_mask_and_beta_files_round_trip(tmp_path):
    rng = np.random.default_rng(8)
    m = rng.random((7, 9)) < 0.4
    save_mask_png(m, tmp_path / "m.png")
    assert np.array_equal(load_mask_png(tmp_path / "m.png"), m)
    b = rng.uniform(0.1, 5.0, (7, 9)).astype(np.float32)
    save_beta_grid(b, tmp_path / "b.bin")
    data = (tmp_path / "b.bin").read_bytes()
    assert len(data) == 16 + 4 * 63
    assert np.array_equal(load_beta_grid(tmp_path / "b.bin"), b)
    (tmp_path / "bad.bin").write_bytes(b"nope" + data[4:])
    with pytest.raises(ValidationError):
        load_beta_grid(tmp_path / "bad.bin")
