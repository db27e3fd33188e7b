import math

import numpy as np
import pytest
import torch

from conftest import random_batch
from dynsplat import batched as B
from dynsplat.exposure import ExposureParams, integrate_and_render, sample_count, sample_poses
from dynsplat.rasterizer import DTYPE, PinholeCamera, render
from dynsplat.scene import GaussianScene, GaussianSet
from dynsplat.se3 import SE3Pose, Twist, se3_exp


def scene_from(batch):
    gs = GaussianSet(batch.means, batch.quats, batch.log_scales, torch.logit(batch.opacity), batch.colors,
                     torch.full((len(batch),), -1, dtype=torch.long), torch.zeros(len(batch), dtype=torch.long))
    return GaussianScene(gs, GaussianSet.empty(), (0.1, 0.1, 0.1))


@pytest.fixture
def scene():
    return scene_from(random_batch(40, seed=21, spread=1.0))


def test_zero_motion_zero_exposure_is_plain_render(scene, camera):
    pose = se3_exp(Twist(np.array([0.01, 0.02, 0.0]), np.array([0.05, 0.0, 0.1])))
    e = ExposureParams.identity(pose)
    ir = integrate_and_render(scene, None, 0, pose, e, camera)
    plain = render(scene.static.to_batch(), camera, pose, scene.background)
    assert torch.equal(ir.color, torch.clamp(plain.color, 0, 1))
    assert torch.equal(ir.depth, plain.depth) and torch.equal(ir.alpha, plain.alpha)


def single_splat_scene():
    t = lambda a: torch.tensor([a], dtype=DTYPE)
    gs = GaussianSet(t([0.0, 0.0, 2.0]), t([1.0, 0.0, 0.0, 0.0]), torch.log(t([0.1, 0.1, 0.1])),
                     torch.logit(t(0.8)), t([0.9, 0.6, 0.3]), torch.full((1,), -1, dtype=torch.long),
                     torch.zeros(1, dtype=torch.long))
    return GaussianScene(gs, GaussianSet.empty(), (0.1, 0.1, 0.1))


def slide_exposure(length, trans_step, max_samples=64):
    e = ExposureParams.identity(SE3Pose.identity(), trans_step=trans_step, max_samples=max_samples)
    e.end_q, e.end_t = B.pose_to_tensors(se3_exp(Twist(np.zeros(3), np.array([length, 0.0, 0.0]))))
    return e


def test_sliding_camera_matches_dense_quadrature(camera):
    # 0.1 m lateral slide past one splat (2 px at this depth); the equal-weight
    # average over |S|+1 samples is first order in 1/|S|, so a 2 mm step is used.
    scene = single_splat_scene()
    e = slide_exposure(0.1, trans_step=0.002)
    assert sample_count(e.T_s, e.T_e, e.rot_step, e.trans_step, e.max_samples) == 50
    with torch.no_grad():
        ir = integrate_and_render(scene, None, 0, SE3Pose.identity(), e, camera)
        ref = integrate_and_render(scene, None, 0, SE3Pose.identity(), e, camera, n_samples=1000)
    assert float((ir.color - ref.color).abs().max()) < 1e-3


def test_doubling_samples_moves_towards_quadrature(camera):
    scene = single_splat_scene()
    e = slide_exposure(0.1, trans_step=0.005)
    with torch.no_grad():
        ref = integrate_and_render(scene, None, 0, SE3Pose.identity(), e, camera, n_samples=1000).color
        errs = [float((integrate_and_render(scene, None, 0, SE3Pose.identity(), e, camera, n_samples=n).color
                       - ref).abs().max()) for n in (6, 12, 24, 48)]
    assert all(b < a for a, b in zip(errs, errs[1:]))
    # first order: halving the step roughly halves the error
    assert all(0.35 < b / a < 0.65 for a, b in zip(errs, errs[1:]))


def test_gain_and_bias(scene, camera):
    e = ExposureParams.identity(SE3Pose.identity())
    base = integrate_and_render(scene, None, 0, SE3Pose.identity(), e, camera, apply_exposure=False).color
    e.gain_log = torch.tensor(math.log(2.0), dtype=DTYPE)
    e.bias = torch.tensor(-0.05, dtype=DTYPE)
    out = integrate_and_render(scene, None, 0, SE3Pose.identity(), e, camera).color
    assert torch.allclose(out, torch.clamp(2.0 * base - 0.05, 0, 1), atol=1e-14)


def test_sample_poses_endpoints():
    pose = se3_exp(Twist(np.array([0.1, 0.0, 0.2]), np.array([0.3, -0.1, 0.0])))
    e = ExposureParams.identity(pose)
    rel = se3_exp(Twist(np.array([0.0, 0.03, 0.0]), np.array([0.01, 0.0, 0.0])))
    T_e = pose @ rel
    e.end_q, e.end_t = B.pose_to_tensors(T_e)
    pq, pt = B.pose_to_tensors(pose)
    poses = sample_poses(e, pq, pt, n=4)
    assert len(poses) == 5
    first = B.tensors_to_pose(*poses[0])
    assert np.allclose(first.as_matrix(), pose.as_matrix(), atol=1e-14)
    last = B.tensors_to_pose(*poses[-1])
    assert np.allclose(last.as_matrix(), (rel @ pose).as_matrix(), atol=1e-12)


def test_sample_count_rules():
    I = SE3Pose.identity()
    assert sample_count(I, I, 0.005, 0.005, 12) == 1
    rot = se3_exp(Twist(np.array([0.0, 0.021, 0.0]), np.zeros(3)))
    assert sample_count(I, rot, 0.005, 0.005, 12) == 5
    far = se3_exp(Twist(np.zeros(3), np.array([1.0, 0, 0])))
    assert sample_count(I, far, 0.005, 0.005, 12) == 12
    with pytest.raises(ValueError):
        sample_count(I, I, 0.0, 0.005, 12)


def test_ir_gradients_reach_exposure_parameters(scene, camera):
    e = ExposureParams.initialise(SE3Pose.identity(), np.random.default_rng(0), 1e-3, 1e-3)
    params = e.params()
    for p in params.values():
        p.requires_grad_(True)
    out = integrate_and_render(scene, None, 0, SE3Pose.identity(), e, camera, n_samples=3)
    (out.color.sum() + out.depth.sum()).backward()
    for k, p in params.items():
        assert p.grad is not None and torch.isfinite(p.grad).all(), k
    assert float(params["gain_log"].grad.abs()) > 0


def test_reversed_control_poses_trace_the_same_path(scene, camera):
    # Delta T starts at the identity, so swapping T_s and T_e mirrors the path;
    # shifting the base pose by the relative motion recovers the original set.
    e = ExposureParams.identity(SE3Pose.identity())
    rel = se3_exp(Twist(np.array([0.0, 0.01, 0.0]), np.array([0.02, 0.0, 0.0])))
    e.end_q, e.end_t = B.pose_to_tensors(rel)
    r = ExposureParams.identity(SE3Pose.identity())
    r.start_q, r.start_t, r.end_q, r.end_t = e.end_q, e.end_t, e.start_q, e.start_t
    with torch.no_grad():
        a = integrate_and_render(scene, None, 0, SE3Pose.identity(), e, camera, n_samples=4).color
        b = integrate_and_render(scene, None, 0, rel, r, camera, n_samples=4).color
    assert torch.allclose(a, b, atol=1e-10)


def test_gain_derivative_closed_form(scene, camera):
    e = ExposureParams.identity(SE3Pose.identity())
    e.gain_log = torch.tensor(-0.3, dtype=DTYPE, requires_grad=True)
    with torch.no_grad():
        avg = integrate_and_render(scene, None, 0, SE3Pose.identity(), e, camera, apply_exposure=False).color
    w = torch.rand(avg.shape, generator=torch.Generator().manual_seed(4), dtype=DTYPE)
    out = integrate_and_render(scene, None, 0, SE3Pose.identity(), e, camera).color
    (out * w).sum().backward()
    inside = (math.exp(-0.3) * avg < 1.0)
    expected = float((math.exp(-0.3) * avg * w)[inside].sum())
    assert abs(float(e.gain_log.grad) - expected) < 1e-10
