import numpy as np
import pytest
import torch

from conftest import random_batch
from dynsplat.errors import MissingForwardCache
from dynsplat.rasterizer import (DTYPE, GaussianBatch, PinholeCamera, render, render_backward, render_reference)
from dynsplat.se3 import SE3Pose, Twist, se3_exp

POSE = SE3Pose.identity()


def fd_gradients(batch, camera, adj, eps=1e-6, pose=POSE):
    """Central differences of <adj, [color, depth]> for every scalar input."""

    def f(b, twist=None):
        with torch.no_grad():
            out = render(b, camera, pose, twist=twist)
            return float((adj[..., :3] * out.color).sum() + (adj[..., 3] * out.depth).sum())

    grads = {}
    for name, val in batch.fields().items():
        g = torch.zeros_like(val)
        flat = val.detach().reshape(-1)
        for i in range(flat.numel()):
            hi, lo = flat.clone(), flat.clone()
            hi[i] += eps
            lo[i] -= eps
            fields = dict(batch.fields())
            fields[name] = hi.reshape(val.shape)
            fp = f(GaussianBatch(**fields))
            fields[name] = lo.reshape(val.shape)
            fm = f(GaussianBatch(**fields))
            g.view(-1)[i] = (fp - fm) / (2 * eps)
        grads[name] = g
    g = torch.zeros(6, dtype=DTYPE)
    for i in range(6):
        e = torch.zeros(6, dtype=DTYPE)
        e[i] = eps
        g[i] = (f(batch, e) - f(batch, -e)) / (2 * eps)
    grads["pose_twist"] = g
    return grads


def rel_err(a, b):
    return float((a - b).norm() / max(b.norm(), 1e-12))


def test_gradients_match_finite_differences():
    cam = PinholeCamera(40.0, 40.0, 15.5, 15.5, 32, 32)
    batch = random_batch(20, seed=11)
    adj = torch.randn(32, 32, 4, generator=torch.Generator().manual_seed(1), dtype=DTYPE)
    out = render(batch, cam, POSE, keep_cache=True)
    an = render_backward(out, adj)
    fd = fd_gradients(batch, cam, adj)
    for name in ("means", "quats", "log_scales", "opacity", "colors", "pose_twist"):
        assert rel_err(getattr(an, name), fd[name]) < 1e-3, name


def test_tiled_matches_reference(camera):
    batch = random_batch(60, seed=3)
    pose = se3_exp(Twist(np.array([0.02, -0.05, 0.01]), np.array([0.1, 0.0, -0.2])))
    a = render(batch, camera, pose)
    b = render_reference(batch, camera, pose)
    assert torch.equal(a.color, b.color) and torch.equal(a.depth, b.depth) and torch.equal(a.alpha, b.alpha)


def test_empty_scene_renders_background(camera):
    out = render(GaussianBatch.empty(), camera, POSE, background=(0.1, 0.2, 0.3))
    assert torch.allclose(out.color, torch.tensor([0.1, 0.2, 0.3], dtype=DTYPE).expand(32, 32, 3))
    assert float(out.alpha.abs().max()) == 0.0


def test_transparent_gaussians_are_invisible(camera):
    batch = random_batch(10, seed=4)
    batch.opacity = torch.zeros(10, dtype=DTYPE)
    out = render(batch, camera, POSE, background=(0.5, 0.5, 0.5))
    assert torch.allclose(out.color, torch.full((32, 32, 3), 0.5, dtype=DTYPE))


def test_behind_camera_culled(camera):
    batch = random_batch(10, seed=5, depth=(-3.0, -1.0))
    out = render(batch, camera, POSE)
    assert float(out.alpha.max()) == 0.0


def test_single_gaussian_peak_value(camera):
    # isotropic Gaussian on the optical axis: centre pixel alpha = opacity
    g = GaussianBatch(torch.tensor([[0.0, 0.0, 2.0]], dtype=DTYPE), torch.tensor([[1.0, 0, 0, 0]], dtype=DTYPE),
                      torch.log(torch.full((1, 3), 0.1, dtype=DTYPE)), torch.tensor([0.6], dtype=DTYPE),
                      torch.tensor([[1.0, 0.5, 0.25]], dtype=DTYPE))
    cam = PinholeCamera(40.0, 40.0, 16.0, 16.0, 33, 33)
    out = render(g, cam, POSE)
    assert abs(float(out.alpha[16, 16]) - 0.6) < 1e-12
    assert torch.allclose(out.color[16, 16], torch.tensor([0.6, 0.3, 0.15], dtype=DTYPE))
    assert abs(float(out.depth[16, 16]) - 0.6 * 2.0) < 1e-12


def test_front_to_back_order(camera):
    near = GaussianBatch(torch.tensor([[0.0, 0.0, 1.0]], dtype=DTYPE), torch.tensor([[1.0, 0, 0, 0]], dtype=DTYPE),
                         torch.log(torch.full((1, 3), 0.2, dtype=DTYPE)), torch.tensor([0.9], dtype=DTYPE),
                         torch.tensor([[1.0, 0.0, 0.0]], dtype=DTYPE))
    far = GaussianBatch(torch.tensor([[0.0, 0.0, 3.0]], dtype=DTYPE), near.quats, near.log_scales, near.opacity,
                        torch.tensor([[0.0, 0.0, 1.0]], dtype=DTYPE))
    a = render(GaussianBatch.cat([near, far]), camera, POSE)
    b = render(GaussianBatch.cat([far, near]), camera, POSE)
    assert torch.equal(a.color, b.color)
    c = a.color[16, 16]
    assert c[0] > c[2]


def test_backward_requires_cache(camera):
    out = render(random_batch(3), camera, POSE)
    with pytest.raises(MissingForwardCache):
        render_backward(out, torch.zeros(32, 32, 4, dtype=DTYPE))


def test_autograd_is_deterministic(camera):
    batch = random_batch(30, seed=9, requires_grad=True)
    grads = []
    for _ in range(2):
        for v in batch.fields().values():
            v.grad = None
        out = render(batch, camera, POSE)
        (out.color.sum() + out.depth.sum()).backward()
        grads.append(torch.cat([v.grad.reshape(-1) for v in batch.fields().values()]))
    assert torch.equal(grads[0], grads[1])
