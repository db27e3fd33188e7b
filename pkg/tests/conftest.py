import textwrap
from pathlib import Path

import numpy as np
import pytest
import torch

from dynsplat.rasterizer import DTYPE, GaussianBatch, PinholeCamera


# one line per acceptance criterion, printed in the terminal summary
ACCEPTANCE: list = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE):
            terminalreporter.write_line(line)


def write_scene(path: Path, body: str, frames: int = 6, width: int = 32, height: int = 24, scene=None,
                exposure=None, camera=None) -> Path:
    """Small scene file; ``body`` holds the primitive sections, the dicts override section keys."""
    sections = {
        "scene": {"seed": 3, "frames": frames, "width": width, "height": height, "fx": 30, "fy": 30,
                  "subframes": 4, "supersample": 1, **(scene or {})},
        "camera": {"velocity": "0.02 0 0", **(camera or {})},
        "exposure": {"blur_min": 0, "blur_max": 0, "gain_amplitude": 0, **(exposure or {})},
    }
    text = "".join(f"[{name}]\n" + "".join(f"{k} = {v}\n" for k, v in kv.items()) + "\n"
                   for name, kv in sections.items())
    path.write_text(text + textwrap.dedent(body))
    return path


WALL = """
[plane:wall]
center = 0 0 3
half_size = 8 8
color0 = 0.2 0.3 0.5
color1 = 0.8 0.7 0.5
frequency = 1.3 0.9
"""

MOVER = """
[box:mover]
center = -0.4 0 1.5
half_size = 0.2 0.2 0.2
color0 = 0.9 0.2 0.1
color1 = 0.3 0.8 0.2
frequency = 2 2
velocity = {v} 0 0
dynamic = true
"""


@pytest.fixture
def camera():
    return PinholeCamera(40.0, 40.0, 15.5, 15.5, 32, 32)


def random_batch(n, seed=0, depth=(2.0, 4.0), spread=0.8, requires_grad=False) -> GaussianBatch:
    g = torch.Generator().manual_seed(seed)
    r = lambda *s: torch.rand(*s, generator=g, dtype=DTYPE)
    means = torch.cat([(r(n, 2) - 0.5) * 2 * spread, depth[0] + (depth[1] - depth[0]) * r(n, 1)], -1)
    quats = torch.nn.functional.normalize(torch.randn(n, 4, generator=g, dtype=DTYPE), dim=-1)
    log_scales = torch.log(0.05 + 0.1 * r(n, 3))
    opacity = 0.3 + 0.5 * r(n)
    colors = r(n, 3)
    b = GaussianBatch(means, quats, log_scales, opacity, colors)
    if requires_grad:
        for v in b.fields().values():
            v.requires_grad_(True)
    return b


@pytest.fixture(scope="session")
def box_dataset(tmp_path_factory):
    """The bundled benchmark scene, generated once per test session."""
    from dynsplat.cli import main

    out = tmp_path_factory.mktemp("box") / "ds"
    assert main(["synth", "box", str(out)]) == 0
    return out


@pytest.fixture(scope="session")
def mover_dataset(tmp_path_factory):
    """Small scene: a textured wall and one box translating along x."""
    d = tmp_path_factory.mktemp("mover")
    spec = write_scene(d / "scene.ini", WALL + MOVER.format(v=0.03), frames=8)
    from dynsplat.synthetic import generate_synthetic

    return generate_synthetic(spec, d / "ds")


def rng(seed=0):
    return np.random.default_rng(seed)


# --------------------------------------------------------------------------
# dense bundle adjustment problems with known geometry
# --------------------------------------------------------------------------


def _plane_depth(camera, pose, normal, offset):
    """Depth map of the world plane ``normal . X = offset`` seen from ``pose``."""
    v, u = np.mgrid[0:camera.height, 0:camera.width]
    rays = camera.backproject(np.stack([u.ravel(), v.ravel()], -1).astype(float), np.ones(u.size))
    n_cam = pose.R.T @ normal
    c = offset - normal @ pose.translation
    return (c / (rays @ n_cam)).reshape(camera.height, camera.width)


def dba_problem(n_kf=6, perturb=1e-2, seed=0, outlier_fraction=0.0, outlier_px=6.0, noise_px=0.0):
    """Keyframes looking at a tilted plane, exact flow between all edges.

    Returns ``(camera, keyframes (perturbed poses), correspondences, gt poses,
    beta2 maps)``. With ``outlier_fraction`` a rectangular block of that share
    of every source grid gets a coherent ``outlier_px`` flow error, as a moving
    object would, and ``beta2`` is 100 on those pixels and 0.1 elsewhere.
    """
    from dynsplat.se3 import SE3Pose, Twist, se3_exp
    from dynsplat.tracker import FlowCorrespondence, Keyframe, edge_set

    rng = np.random.default_rng(seed)
    camera = PinholeCamera(56.0, 56.0, 31.5, 23.5, 64, 48)
    normal = np.array([0.1, -0.05, 1.0])
    normal /= np.linalg.norm(normal)
    gt = [se3_exp(Twist(np.array([0.01 * k, 0.03 * k, 0.0]), np.array([0.06 * k, 0.01 * k, 0.02 * k])))
          for k in range(n_kf)]
    kfs, beta2 = [], []
    for k, p in enumerate(gt):
        depth = _plane_depth(camera, p, normal, 2.5)
        pert = SE3Pose.identity() if k == 0 else se3_exp(Twist(rng.normal(0, perturb, 3), rng.normal(0, perturb, 3)))
        kfs.append(Keyframe(pert @ p, np.zeros(depth.shape + (3,)), depth, k))
        b = np.full(depth.shape, 0.1)
        if outlier_fraction > 0:
            w = int(round(np.sqrt(outlier_fraction) * camera.width))
            h = int(round(np.sqrt(outlier_fraction) * camera.height))
            b[10:10 + h, 20:20 + w] = 100.0
        beta2.append(b)
    corrs = []
    for i, j in edge_set(n_kf):
        kf = kfs[i]
        pix = kf.grid_pixels()
        d = kf.depth[pix[:, 1].astype(int), pix[:, 0].astype(int)]
        q = camera.project((gt[j].inverse() @ gt[i]).act(camera.backproject(pix, d)))
        if noise_px:
            q = q + rng.normal(0, noise_px, q.shape)
        bad = beta2[i][pix[:, 1].astype(int), pix[:, 0].astype(int)] > 1.0
        q[bad] += np.array([outlier_px, 0.5 * outlier_px])
        ok = (q[:, 0] >= 0) & (q[:, 0] <= camera.width - 1) & (q[:, 1] >= 0) & (q[:, 1] <= camera.height - 1)
        corrs.append(FlowCorrespondence(i, j, np.nonzero(ok)[0], q[ok], np.ones((int(ok.sum()), 2))))
    return camera, kfs, corrs, gt, beta2
