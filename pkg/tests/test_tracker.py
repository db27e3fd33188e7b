import numpy as np
import pytest

from conftest import dba_problem
from dynsplat.errors import BehindCamera, ValidationError
from dynsplat.metrics import ate
from dynsplat.rasterizer import PinholeCamera
from dynsplat.se3 import SE3Pose, Twist, se3_exp
from dynsplat.tracker import (DBAConfig, FlowCorrespondence, Keyframe, _assemble, _build, dba_solve, edge_set,
                              save_tum_trajectory, select_keyframe, warp)


def test_warp_identity_and_depth_ratio():
    cam = PinholeCamera(50.0, 50.0, 20.0, 15.0, 40, 30)
    p = np.array([31.0, 7.0])
    assert np.allclose(warp(p, SE3Pose.identity(), 2.0, cam), p, atol=1e-12)
    # moving the camera 1 m towards a point at 2 m halves its distance: offsets from the centre double
    towards = SE3Pose(translation=[0.0, 0.0, 1.0]).inverse()
    q = warp(p, towards, 2.0, cam)
    assert np.allclose(q - [20.0, 15.0], 2.0 * (p - [20.0, 15.0]), atol=1e-12)
    with pytest.raises(BehindCamera):
        warp(p, SE3Pose(translation=[0.0, 0.0, -3.0]), 2.0, cam)
    with pytest.raises(ValueError):
        warp(p, SE3Pose.identity(), 0.0, cam)


def test_edge_set_radius():
    e = edge_set(5, radius=3)
    assert (0, 3) in e and (3, 0) in e and (0, 4) not in e
    assert all((j, i) in e for i, j in e)
    assert len(edge_set(2)) == 2


def test_select_keyframe_rules():
    assert not select_keyframe(0.0, 1.0)
    assert select_keyframe(20.0, 1.0)
    assert select_keyframe(0.0, 0.5)


def test_noise_free_convergence():
    cam, kfs, corrs, gt, _ = dba_problem(perturb=1e-2)
    res = dba_solve(kfs, corrs, None, DBAConfig(), cam)
    assert ate(res.poses, gt) / 100.0 < 1e-4
    assert res.poses[0] is kfs[0].pose or res.poses[0].allclose(kfs[0].pose, 0.0)


def test_uniform_beta_matches_unweighted_solve():
    cam, kfs, corrs, gt, _ = dba_problem(perturb=1e-2, noise_px=0.3, seed=4)
    plain = dba_solve(kfs, corrs, None, DBAConfig(), cam)
    uniform = dba_solve(kfs, corrs, [np.full(k.depth.shape, 3.0) for k in kfs], DBAConfig(), cam)
    for a, b in zip(plain.poses, uniform.poses):
        assert np.abs(a.as_matrix() - b.as_matrix()).max() < 1e-9


def test_uncertainty_weighting_rejects_outliers():
    cam, kfs, corrs, gt, beta2 = dba_problem(perturb=1e-2, outlier_fraction=0.2, noise_px=0.1)
    share = np.mean([(b > 1).mean() for b in beta2])
    assert 0.18 < share < 0.22
    plain = ate(dba_solve(kfs, corrs, None, DBAConfig(), cam).poses, gt)
    weighted = ate(dba_solve(kfs, corrs, beta2, DBAConfig(), cam).poses, gt)
    assert weighted * 5.0 <= plain


def test_cost_never_increases():
    cam, kfs, corrs, gt, beta2 = dba_problem(perturb=2e-2, noise_px=0.2, seed=1)
    res = dba_solve(kfs, corrs, beta2, DBAConfig(), cam)
    assert all(b <= a for a, b in zip(res.history, res.history[1:]))


def test_gauge_invariance():
    cam, kfs, corrs, gt, _ = dba_problem(perturb=1e-2, noise_px=0.2, seed=2)
    G = se3_exp(Twist(np.array([0.2, -0.1, 0.3]), np.array([1.0, 2.0, -0.5])))
    moved = [Keyframe(G @ k.pose, k.image, k.depth, k.time) for k in kfs]
    tight = DBAConfig(tol=1e-12, max_iters=100)
    a = dba_solve(kfs, corrs, None, tight, cam)
    b = dba_solve(moved, corrs, None, tight, cam)
    assert abs(ate(a.poses, gt) - ate(b.poses, [G @ g for g in gt])) < 1e-9 * 100


def _jacobian_fd(cam, kfs, corrs, inv):
    poses = [k.pose for k in kfs]
    prior = np.concatenate([x.ravel() for x in inv])
    sys = _assemble(kfs, corrs, None, cam, poses, inv, prior, 0.0)
    h = 1e-6
    # pose twist of keyframe 1, as source and as target
    for k in range(6):
        d = np.zeros(6)
        d[k] = h
        pp = list(poses)
        pm = list(poses)
        pp[1] = se3_exp(Twist.from_vector(d)) @ poses[1]
        pm[1] = se3_exp(Twist.from_vector(-d)) @ poses[1]
        fd = (_assemble(kfs, corrs, None, cam, pp, inv, prior, 0.0, False)["r"]
              - _assemble(kfs, corrs, None, cam, pm, inv, prior, 0.0, False)["r"]) / (2 * h)
        an = np.where((sys["src"] == 1)[:, None], sys["Ji"][:, :, k], 0.0) + \
            np.where((sys["tgt"] == 1)[:, None], sys["Jj"][:, :, k], 0.0)
        yield fd, an
    # one inverse depth of keyframe 0
    m = int(corrs[0].index[len(corrs[0].index) // 2])
    ip = [x.copy() for x in inv]
    im = [x.copy() for x in inv]
    ip[0].flat[m] += h
    im[0].flat[m] -= h
    fd = (_assemble(kfs, corrs, None, cam, poses, ip, prior, 0.0, False)["r"]
          - _assemble(kfs, corrs, None, cam, poses, im, prior, 0.0, False)["r"]) / (2 * h)
    hit = (sys["didx"] == m)[:, None]
    yield fd, np.where(hit, sys["Jd"], 0.0)


def test_jacobians_match_finite_differences():
    cam, kfs, corrs, gt, _ = dba_problem(n_kf=3, perturb=1e-2)
    inv = [k.inv_depth.copy() for k in kfs]
    for fd, an in _jacobian_fd(cam, kfs, corrs, inv):
        scale = np.abs(fd).max()
        if scale > 0:
            assert np.abs(fd - an).max() <= 1e-4 * scale


def test_raising_beta_lowers_contribution():
    cam, kfs, corrs, gt, _ = dba_problem(n_kf=3, perturb=1e-2, noise_px=0.2)
    poses = [k.pose for k in kfs]
    inv = [k.inv_depth.copy() for k in kfs]
    prior = np.concatenate([x.ravel() for x in inv])
    lo = [np.ones(k.depth.shape) for k in kfs]
    hi = [b.copy() for b in lo]
    hi[0][:, :32] = 10.0
    n_kf, n_depth = 3, prior.size
    Hlo = _build(_assemble(kfs, corrs, lo, cam, poses, inv, prior, 1.0), n_kf, n_depth)
    Hhi = _build(_assemble(kfs, corrs, hi, cam, poses, inv, prior, 1.0), n_kf, n_depth)
    diff = Hlo[0] - Hhi[0]
    ev = np.linalg.eigvalsh(diff)
    assert np.all(ev > -1e-12 * ev.max()) and np.trace(diff) > 0
    assert np.all(Hhi[2] <= Hlo[2] + 1e-12) and np.any(Hhi[2] < Hlo[2])


def test_input_validation():
    cam, kfs, corrs, gt, _ = dba_problem(n_kf=2)
    with pytest.raises(ValidationError):
        dba_solve(kfs[:1], corrs, None, DBAConfig(), cam)
    with pytest.raises(ValidationError):
        dba_solve(kfs, [], None, DBAConfig(), cam)
    with pytest.raises(ValidationError):
        FlowCorrespondence(0, 1, np.array([0]), np.zeros((1, 2)), np.zeros((1, 2)))


def test_tum_trajectory_format(tmp_path):
    p = se3_exp(Twist(np.array([0.1, 0.2, 0.3]), np.array([1.0, 2.0, 3.0])))
    save_tum_trajectory(tmp_path / "t.txt", [1.5], [p])
    vals = (tmp_path / "t.txt").read_text().split()
    assert len(vals) == 8 and float(vals[0]) == 1.5
    w, x, y, z = p.rotation
    assert np.allclose([float(v) for v in vals[4:]], [x, y, z, w], atol=1e-8)
