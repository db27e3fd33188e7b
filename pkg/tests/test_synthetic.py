import filecmp
from pathlib import Path

import numpy as np
import pytest
from PIL import Image

from conftest import MOVER, WALL, write_scene
from dynsplat.errors import InvalidSpec
from dynsplat.synthetic import DEPTH_SCALE, generate_synthetic, load_scene_spec, render_blurred, render_sharp
from dynsplat.tracker import warp


def _masks(out):
    return [np.array(Image.open(p)) for p in sorted((out / "gt_masks").glob("*.png"))]


def test_static_plane_flow_is_camera_induced(tmp_path):
    # a little rotation keeps the flow from being a pure shift
    spec_path = write_scene(tmp_path / "s.ini", WALL, frames=10, camera={"yaw_rate": 0.01})
    out = generate_synthetic(spec_path, tmp_path / "ds")
    spec = load_scene_spec(spec_path)
    assert all(not m.any() for m in _masks(out))
    flow = np.load(out / "gt_flow.npz")["flow"]
    cam = spec.camera
    for k in (0, 4, 8):
        Ti, Tj = spec.camera_pose(k), spec.camera_pose(k + 1)
        _, depth, _ = render_sharp(spec, k, Ti)
        rel = Tj.inverse() @ Ti
        for v, u in [(3, 4), (12, 16), (20, 29)]:
            q = warp(np.array([u, v], float), rel, depth[v, u], cam)
            assert np.abs(q - ([u, v] + flow[k, v, u])).max() < 1e-6


def test_translating_box_masks_and_tracks(tmp_path):
    frames = 30
    path = write_scene(tmp_path / "s.ini", WALL + MOVER.format(v=1.0 / (frames - 1)), frames=frames)
    out = generate_synthetic(path, tmp_path / "ds")
    spec = load_scene_spec(path)
    # the wall faces the camera at z = 3, so any pixel nearer than that lies on the box
    for k, m in zip(range(0, frames, 7), _masks(out)[::7]):
        name = sorted((out / "depth").glob("*.png"))[k]
        depth = np.array(Image.open(name)).astype(float) / DEPTH_SCALE
        assert m.any()
        assert np.array_equal(m > 0, depth < 3.0 - 1e-3)
    tr = np.load(out / "gt_tracks.npz")
    pos, vis = tr["positions"], tr["visible"]
    cam = spec.camera
    _, depth0, _ = render_sharp(spec, 0, spec.camera_pose(0))
    u, v = pos[:, 0, 0], pos[:, 0, 1]
    d = depth0[np.round(v).astype(int), np.round(u).astype(int)]
    X0 = spec.camera_pose(0).act(np.stack([(u - cam.cx) / cam.fx * d, (v - cam.cy) / cam.fy * d, d], -1))
    Xc = spec.camera_pose(frames - 1).inverse().act(X0 + [1.0, 0.0, 0.0])
    end = np.stack([cam.fx * Xc[:, 0] / Xc[:, 2] + cam.cx, cam.fy * Xc[:, 1] / Xc[:, 2] + cam.cy], -1)
    seen = vis[:, -1]
    assert seen.sum() > 5
    assert np.abs(pos[seen, -1] - end[seen]).max() < 1e-9


def test_gain_doubles_the_integrated_frame(tmp_path):
    path = write_scene(tmp_path / "s.ini", WALL, exposure={"gains": repr(float(np.log(2.0))), "blur_max": 0.02})
    spec = load_scene_spec(path)
    pose = spec.camera_pose(1)
    out, avg = render_blurred(spec, 1, pose, integrated=True)
    assert np.abs(out - np.clip(2.0 * avg, 0.0, 1.0)).max() < 1e-12
    dark = render_blurred(spec, 1, pose, gain=0.0, integrated=True)[1]
    assert np.array_equal(dark, avg)


def test_blur_averages_along_the_exposure_path(tmp_path):
    path = write_scene(tmp_path / "s.ini", WALL, exposure={"blur_max": 0.05, "blur_min": 0.05})
    spec = load_scene_spec(path)
    pose = spec.camera_pose(0)
    sharp = render_sharp(spec, 0, pose)[0]
    blurred = render_blurred(spec, 0, pose)
    assert np.abs(blurred - sharp).max() > 1e-3
    assert np.abs(blurred - render_blurred(spec, 0, pose)).max() == 0


def test_generation_is_deterministic(tmp_path):
    path = write_scene(tmp_path / "s.ini", WALL + MOVER.format(v=0.03), frames=4,
                       exposure={"blur_max": 0.02, "gain_amplitude": 0.1})
    a = generate_synthetic(path, tmp_path / "a")
    b = generate_synthetic(path, tmp_path / "b")
    files = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file())
    assert len(files) > 15
    _, mismatch, errors = filecmp.cmpfiles(a, b, [str(f) for f in files], shallow=False)
    assert not mismatch and not errors
    with pytest.raises(InvalidSpec):
        generate_synthetic(path, a)
    generate_synthetic(path, a, overwrite=True)


@pytest.mark.parametrize("body", [
    "[sphere:x]\ncenter = 0 0 1\n",
    "[box:x]\ncenter = 0 0 1\n",
    "[box:x]\ncenter = 0 0 1\nhalf_size = 1 -1 1\n",
    "[box:x]\ncenter = 0 0\nhalf_size = 1 1 1\n",
    "[box:x]\ncenter = 0 0 one\nhalf_size = 1 1 1\n",
    "[box:x]\ncenter = 0 0 1\nhalf_size = 1 1 1\ndynamic = maybe\n",
    "[plane:x]\ncenter = 0 0 1\nhalf_size = 1 1\nu_axis = 1 0 0\nv_axis = 2 0 0\n",
    "",
])
def test_invalid_specs_are_rejected(tmp_path, body):
    path = write_scene(tmp_path / "s.ini", body)
    with pytest.raises(InvalidSpec):
        load_scene_spec(path)


def test_missing_spec_file(tmp_path):
    with pytest.raises(InvalidSpec):
        generate_synthetic(tmp_path / "nope.ini", tmp_path / "out")
    bad = write_scene(tmp_path / "s.ini", WALL, scene={"width": 2})
    with pytest.raises(InvalidSpec):
        load_scene_spec(bad)
