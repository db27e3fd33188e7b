"""
Procedural RGB-D sequences with full ground truth.

A scene is a handful of textured rectangles and boxes, some of which move
rigidly. Frames are raycast analytically, so every ground-truth channel
(depth, instance ids, flow, tracks) comes from the same geometry. The observed
``rgb/`` frames are integrated over a per-frame intra-exposure camera motion
and scaled by a per-frame gain, using the same conventions as
:func:`dynsplat.exposure.integrate_and_render`:
sub-frame ``m`` is seen from ``exp(m/M * xi) @ T`` and the average is mapped
through ``clamp(exp(a) * avg + b, 0, 1)``.

Scene files are INI text::

    [scene]
    frames = 24
    width = 64
    ...
    [camera]
    position = 0 0 0
    ...
    [box:mover]
    center = 0.3 0.1 1.3
    half_size = 0.15 0.15 0.15
    velocity = -0.03 0 0
    dynamic = true
"""

from __future__ import annotations

import configparser
import logging
import shutil
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import InvalidSpec
from .rasterizer import PinholeCamera
from .se3 import SE3Pose, Twist, se3_exp, so3_exp

log = logging.getLogger(__name__)

DEPTH_SCALE = 5000.0  # 16-bit depth units per metre
DEPTH_OFFSET = 0.004  # depth timestamps lag the rgb ones by this many seconds

_SCENE_KEYS = {"seed": 0, "frames": 24, "fps": 10.0, "width": 64, "height": 48, "fx": 56.0, "fy": 56.0,
               "cx": None, "cy": None, "background": "0 0 0", "subframes": 16, "supersample": 2}
_CAMERA_KEYS = {"position": "0 0 0", "velocity": "0 0 0", "yaw": 0.0, "yaw_rate": 0.0, "pitch": 0.0,
                "pitch_amplitude": 0.0, "pitch_period": 10.0}
_EXPOSURE_KEYS = {"blur_min": 0.0, "blur_max": 0.0, "blur_period": 6.0, "blur_axis": "0 1 0",
                  "blur_translation": "0 0 0", "gain_amplitude": 0.0, "gain_period": 8.0, "gain_offset": 0.0,
                  "gains": "", "bias": 0.0}
_PRIM_KEYS = {"center": None, "half_size": None, "u_axis": "1 0 0", "v_axis": "0 1 0", "color0": "0.2 0.2 0.2",
              "color1": "0.8 0.8 0.8", "frequency": "1 1", "phase": 0.0, "velocity": "0 0 0", "yaw_rate": 0.0,
              "dynamic": "false"}


def _vec(s, n, what):
    try:
        v = np.array([float(x) for x in str(s).replace(",", " ").split()], dtype=float)
    except ValueError as e:
        raise InvalidSpec(f"{what}: not a number list: {s!r}") from e
    if v.size != n:
        raise InvalidSpec(f"{what}: expected {n} values, got {v.size}")
    if not np.all(np.isfinite(v)):
        raise InvalidSpec(f"{what}: non-finite value")
    return v


def _num(s, what, cast=float):
    try:
        v = cast(s)
    except (TypeError, ValueError) as e:
        raise InvalidSpec(f"{what}: bad value {s!r}") from e
    if not np.isfinite(v):
        raise InvalidSpec(f"{what}: non-finite value")
    return v


def _section(cp, name, keys):
    sec = cp[name] if cp.has_section(name) else {}
    unknown = set(sec) - set(keys)
    if unknown:
        raise InvalidSpec(f"[{name}] unknown keys: {sorted(unknown)}")
    out = dict(keys)
    out.update(dict(sec))
    return out


@dataclass
class Primitive:
    kind: str  # "plane" or "box"
    name: str
    center: np.ndarray
    half_size: np.ndarray  # (2,) for planes, (3,) for boxes
    axes: np.ndarray  # (3, 3) columns are the local axes at frame 0
    color0: np.ndarray
    color1: np.ndarray
    frequency: np.ndarray
    phase: float = 0.0
    velocity: np.ndarray = field(default_factory=lambda: np.zeros(3))
    yaw_rate: float = 0.0
    dynamic: bool = False
    instance: int = 0  # 0 for static geometry, 1.. for dynamic objects

    def pose(self, frame: int) -> SE3Pose:
        """Object-to-world transform at ``frame`` (rotation about world y plus drift)."""
        R = so3_exp(np.array([0.0, self.yaw_rate * frame, 0.0])) @ self.axes
        return SE3Pose.from_matrix(np.vstack([np.column_stack([R, self.center + self.velocity * frame]), [0, 0, 0, 1]]))

    def texture(self, s, r, face=0):
        f = self.frequency
        ph = self.phase + 1.7 * face
        t = 0.5 + 0.3 * np.sin(2 * np.pi * f[0] * s + ph) * np.sin(2 * np.pi * f[1] * r + 0.5 * ph) \
            + 0.2 * np.sin(2 * np.pi * 0.37 * (f[0] * s + f[1] * r) + 2.0 * ph)
        t = np.clip(t, 0.0, 1.0)
        return self.color0 + (self.color1 - self.color0) * t[..., None]


@dataclass
class SceneSpec:
    seed: int
    frames: int
    fps: float
    camera: PinholeCamera
    background: np.ndarray
    subframes: int
    supersample: int
    cam_position: np.ndarray
    cam_velocity: np.ndarray
    yaw: float
    yaw_rate: float
    pitch: float
    pitch_amplitude: float
    pitch_period: float
    blur_min: float
    blur_max: float
    blur_period: float
    blur_axis: np.ndarray
    blur_translation: np.ndarray
    gain_amplitude: float
    gain_period: float
    gain_offset: float
    gains: list | None
    bias: float
    primitives: list

    # -- scripted quantities --------------------------------------------------
    def timestamp(self, k: int) -> float:
        return 1.0 + k / self.fps

    def camera_pose(self, k: int) -> SE3Pose:
        yaw = self.yaw + self.yaw_rate * k
        pitch = self.pitch + self.pitch_amplitude * np.sin(2 * np.pi * k / self.pitch_period)
        R = so3_exp(np.array([0.0, yaw, 0.0])) @ so3_exp(np.array([pitch, 0.0, 0.0]))
        t = self.cam_position + self.cam_velocity * k
        return SE3Pose.from_matrix(np.vstack([np.column_stack([R, t]), [0, 0, 0, 1]]))

    def blur_twist(self, k: int) -> Twist:
        """Intra-exposure motion: the exposure path of frame k is exp(tau * xi) @ T_k, tau in [0, 1]."""
        s = 0.5 + 0.5 * np.sin(2 * np.pi * k / self.blur_period)
        mag = self.blur_min + (self.blur_max - self.blur_min) * s
        axis = self.blur_axis / np.linalg.norm(self.blur_axis)
        return Twist(axis * mag, self.blur_translation * (mag / max(self.blur_max, 1e-12)))

    def gain(self, k: int) -> float:
        if self.gains is not None:
            return float(self.gains[k % len(self.gains)])
        return self.gain_offset + self.gain_amplitude * np.sin(2 * np.pi * k / self.gain_period)

    @property
    def dynamic_objects(self) -> list:
        return [p for p in self.primitives if p.dynamic]


def load_scene_spec(path) -> SceneSpec:
    """Parse and validate a scene file; every problem raises :class:`InvalidSpec`."""
    path = Path(path)
    if not path.is_file():
        raise InvalidSpec(f"scene file not found: {path}")
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        cp.read_string(path.read_text())
    except configparser.Error as e:
        raise InvalidSpec(f"unparseable scene file: {e}") from e
    return parse_scene_spec(cp)


def parse_scene_spec(cp: configparser.ConfigParser) -> SceneSpec:
    for name in cp.sections():
        if name not in ("scene", "camera", "exposure") and not name.startswith(("plane:", "box:")):
            raise InvalidSpec(f"unknown section [{name}]")
    sc = _section(cp, "scene", _SCENE_KEYS)
    cam = _section(cp, "camera", _CAMERA_KEYS)
    ex = _section(cp, "exposure", _EXPOSURE_KEYS)
    W, H = _num(sc["width"], "width", int), _num(sc["height"], "height", int)
    frames = _num(sc["frames"], "frames", int)
    if W < 4 or H < 4:
        raise InvalidSpec("image must be at least 4x4")
    if frames < 1:
        raise InvalidSpec("frames must be >= 1")
    fx, fy = _num(sc["fx"], "fx"), _num(sc["fy"], "fy")
    if fx <= 0 or fy <= 0:
        raise InvalidSpec("focal lengths must be positive")
    cx = (W - 1) / 2 if sc["cx"] is None else _num(sc["cx"], "cx")
    cy = (H - 1) / 2 if sc["cy"] is None else _num(sc["cy"], "cy")
    fps = _num(sc["fps"], "fps")
    subframes, ss = _num(sc["subframes"], "subframes", int), _num(sc["supersample"], "supersample", int)
    if fps <= 0 or subframes < 1 or ss < 1:
        raise InvalidSpec("fps, subframes and supersample must be positive")
    prims = []
    n_dyn = 0
    for name in cp.sections():
        if ":" not in name:
            continue
        kind, label = name.split(":", 1)
        p = _section(cp, name, _PRIM_KEYS)
        if p["center"] is None or p["half_size"] is None:
            raise InvalidSpec(f"[{name}] needs center and half_size")
        hs = _vec(p["half_size"], 2 if kind == "plane" else 3, f"{name}.half_size")
        if np.any(hs <= 0):
            raise InvalidSpec(f"[{name}] half_size must be positive")
        u = _vec(p["u_axis"], 3, f"{name}.u_axis")
        v = _vec(p["v_axis"], 3, f"{name}.v_axis")
        if np.linalg.norm(u) == 0 or np.linalg.norm(v) == 0:
            raise InvalidSpec(f"[{name}] zero axis")
        u = u / np.linalg.norm(u)
        v = v - u * (u @ v)
        if np.linalg.norm(v) < 1e-9:
            raise InvalidSpec(f"[{name}] parallel axes")
        v = v / np.linalg.norm(v)
        dyn = p["dynamic"].strip().lower()
        if dyn not in ("true", "false", "yes", "no", "1", "0"):
            raise InvalidSpec(f"[{name}] dynamic must be a boolean")
        dynamic = dyn in ("true", "yes", "1")
        if dynamic:
            n_dyn += 1
        prims.append(Primitive(
            kind, label, _vec(p["center"], 3, f"{name}.center"), hs, np.column_stack([u, v, np.cross(u, v)]),
            _vec(p["color0"], 3, f"{name}.color0"), _vec(p["color1"], 3, f"{name}.color1"),
            _vec(p["frequency"], 2, f"{name}.frequency"), _num(p["phase"], f"{name}.phase"),
            _vec(p["velocity"], 3, f"{name}.velocity"), _num(p["yaw_rate"], f"{name}.yaw_rate"),
            dynamic, n_dyn if dynamic else 0,
        ))
    if not prims:
        raise InvalidSpec("scene has no geometry")
    if n_dyn > 255:
        raise InvalidSpec("at most 255 dynamic objects")
    gains = None
    if str(ex["gains"]).strip():
        gains = [_num(g, "gains") for g in str(ex["gains"]).replace(",", " ").split()]
    axis = _vec(ex["blur_axis"], 3, "blur_axis")
    if np.linalg.norm(axis) == 0:
        raise InvalidSpec("blur_axis must be nonzero")
    return SceneSpec(
        seed=_num(sc["seed"], "seed", int), frames=frames, fps=fps,
        camera=PinholeCamera(fx, fy, cx, cy, W, H), background=_vec(sc["background"], 3, "background"),
        subframes=subframes, supersample=ss,
        cam_position=_vec(cam["position"], 3, "position"), cam_velocity=_vec(cam["velocity"], 3, "velocity"),
        yaw=_num(cam["yaw"], "yaw"), yaw_rate=_num(cam["yaw_rate"], "yaw_rate"), pitch=_num(cam["pitch"], "pitch"),
        pitch_amplitude=_num(cam["pitch_amplitude"], "pitch_amplitude"),
        pitch_period=_num(cam["pitch_period"], "pitch_period"),
        blur_min=_num(ex["blur_min"], "blur_min"), blur_max=_num(ex["blur_max"], "blur_max"),
        blur_period=_num(ex["blur_period"], "blur_period"), blur_axis=axis,
        blur_translation=_vec(ex["blur_translation"], 3, "blur_translation"),
        gain_amplitude=_num(ex["gain_amplitude"], "gain_amplitude"), gain_period=_num(ex["gain_period"], "gain_period"),
        gain_offset=_num(ex["gain_offset"], "gain_offset"), gains=gains, bias=_num(ex["bias"], "bias"),
        primitives=prims,
    )


# -- raycasting ----------------------------------------------------------------

def _hit_plane(p: Primitive, pose: SE3Pose, o, d):
    R = pose.R
    c = pose.translation
    n = R[:, 2]
    denom = d @ n
    safe = np.where(np.abs(denom) < 1e-12, 1e-12, denom)
    t = ((c - o) @ n) / safe
    x = o + t[:, None] * d
    s = (x - c) @ R[:, 0]
    r = (x - c) @ R[:, 1]
    ok = (np.abs(denom) > 1e-12) & (t > 1e-9) & (np.abs(s) <= p.half_size[0]) & (np.abs(r) <= p.half_size[1])
    return np.where(ok, t, np.inf), s, r, np.zeros(len(t), dtype=int)


def _hit_box(p: Primitive, pose: SE3Pose, o, d):
    R, c, h = pose.R, pose.translation, p.half_size
    ol = (o - c) @ R
    dl = d @ R
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / np.where(np.abs(dl) < 1e-15, 1e-15, dl)
        t1 = (-h - ol) * inv
        t2 = (h - ol) * inv
    tn = np.minimum(t1, t2)
    tf = np.maximum(t1, t2)
    axis = np.argmax(tn, axis=1)
    tmin = tn[np.arange(len(tn)), axis]
    tmax = tf.min(axis=1)
    ok = (tmax >= tmin) & (tmin > 1e-9)
    x = ol + tmin[:, None] * dl
    # in-face coordinates: the two axes other than the hit axis
    a0 = np.where(axis == 0, 1, 0)
    a1 = np.where(axis == 2, 1, 2)
    rows = np.arange(len(x))
    s, r = x[rows, a0], x[rows, a1]
    face = axis * 2 + (x[rows, axis] > 0)
    return np.where(ok, tmin, np.inf), s, r, face


def raycast(spec: SceneSpec, frame: int, pose: SE3Pose, uv: np.ndarray):
    """Cast rays through pixel coordinates ``uv`` (N, 2).

    Returns ``(color (N,3), depth (N,), instance (N,), hit_prim (N,))``;
    depth is the camera-frame z of the hit (0 where nothing is hit).
    """
    cam = spec.camera
    rays_c = np.stack([(uv[:, 0] - cam.cx) / cam.fx, (uv[:, 1] - cam.cy) / cam.fy, np.ones(len(uv))], -1)
    d = rays_c @ pose.R.T
    o = np.broadcast_to(pose.translation, d.shape)
    best = np.full(len(uv), np.inf)
    prim = np.full(len(uv), -1)
    S = np.zeros(len(uv))
    Rr = np.zeros(len(uv))
    F = np.zeros(len(uv), dtype=int)
    for k, p in enumerate(spec.primitives):
        ppose = p.pose(frame)
        t, s, r, face = (_hit_plane if p.kind == "plane" else _hit_box)(p, ppose, o, d)
        closer = t < best
        best = np.where(closer, t, best)
        prim = np.where(closer, k, prim)
        S = np.where(closer, s, S)
        Rr = np.where(closer, r, Rr)
        F = np.where(closer, face, F)
    color = np.tile(spec.background, (len(uv), 1))
    inst = np.zeros(len(uv), dtype=int)
    for k, p in enumerate(spec.primitives):
        m = prim == k
        if m.any():
            color[m] = p.texture(S[m], Rr[m], F[m])
            inst[m] = p.instance
    depth = np.where(np.isfinite(best), best, 0.0)  # rays have unit z in camera frame
    return color, depth, inst, prim


def render_sharp(spec: SceneSpec, frame: int, pose: SE3Pose):
    """Supersampled color plus pixel-centre depth and instance ids."""
    cam = spec.camera
    H, W, ss = cam.height, cam.width, spec.supersample
    off = (np.arange(ss) + 0.5) / ss - 0.5
    v, u = np.mgrid[0:H, 0:W].astype(float)
    acc = np.zeros((H * W, 3))
    for dv in off:
        for du in off:
            uv = np.stack([u.ravel() + du, v.ravel() + dv], -1)
            acc += raycast(spec, frame, pose, uv)[0]
    color = (acc / ss**2).reshape(H, W, 3)
    _, depth, inst, _ = raycast(spec, frame, pose, np.stack([u.ravel(), v.ravel()], -1))
    return color, depth.reshape(H, W), inst.reshape(H, W)


def render_blurred(spec: SceneSpec, frame: int, pose: SE3Pose, xi: Twist | None = None, gain: float | None = None,
                   bias: float | None = None, integrated: bool = False):
    """Observed frame: mean of ``subframes + 1`` sharp renders along the exposure path.

    With ``integrated=True`` the pre-gain average is returned as well.
    """
    xi = spec.blur_twist(frame) if xi is None else xi
    gain = spec.gain(frame) if gain is None else gain
    bias = spec.bias if bias is None else bias
    M = spec.subframes
    acc = 0.0
    for m in range(M + 1):
        acc = acc + render_sharp(spec, frame, se3_exp(xi * (m / M)) @ pose)[0]
    avg = acc / (M + 1)
    out = np.clip(np.exp(gain) * avg + bias, 0.0, 1.0)
    return (out, avg) if integrated else out


def backproject_depth(camera: PinholeCamera, depth: np.ndarray, pose: SE3Pose) -> np.ndarray:
    """World points (H, W, 3) of every pixel centre."""
    v, u = np.mgrid[0:camera.height, 0:camera.width].astype(float)
    X = np.stack([(u - camera.cx) / camera.fx * depth, (v - camera.cy) / camera.fy * depth, depth], -1)
    return X @ pose.R.T + pose.translation


def scene_flow(spec: SceneSpec, depth_i, inst_i, frame_i: int, pose_i: SE3Pose, frame_j: int, pose_j: SE3Pose):
    """Pixel locations in frame ``j`` of every pixel of frame ``i`` (H, W, 2).

    Static pixels move with the camera only; pixels on dynamic object ``k``
    also follow the object's rigid motion. Pixels without depth map to NaN.
    """
    cam = spec.camera
    Xw = backproject_depth(cam, depth_i, pose_i)
    for p in spec.dynamic_objects:
        m = inst_i == p.instance
        if m.any():
            rel = p.pose(frame_j) @ p.pose(frame_i).inverse()
            Xw[m] = rel.act(Xw[m])
    Xc = pose_j.inverse().act(Xw.reshape(-1, 3)).reshape(Xw.shape)
    z = Xc[..., 2]
    ok = (depth_i > 0) & (z > cam.near)
    zs = np.where(ok, z, 1.0)
    q = np.stack([cam.fx * Xc[..., 0] / zs + cam.cx, cam.fy * Xc[..., 1] / zs + cam.cy], -1)
    return np.where(ok[..., None], q, np.nan)


def object_tracks(spec: SceneSpec, inst0: np.ndarray, depth0: np.ndarray, stride: int = 2, query_frame: int = 0):
    """2D tracks of dynamic-object surface points seeded on a pixel grid at ``query_frame``.

    Returns ``(positions (P, N, 2), visible (P, N), object_id (P,))``. A track
    is visible when its point is the first surface hit along its pixel ray
    and inside the image.
    """
    cam = spec.camera
    N = spec.frames
    pose0 = spec.camera_pose(query_frame)
    grid = np.zeros_like(inst0, dtype=bool)
    grid[stride // 2::stride, stride // 2::stride] = True
    sel = grid & (inst0 > 0)
    vs, us = np.nonzero(sel)
    if len(us) == 0:
        return np.zeros((0, N, 2)), np.zeros((0, N), dtype=bool), np.zeros(0, dtype=int)
    obj_id = inst0[vs, us]
    d = depth0[vs, us]
    Xc = np.stack([(us - cam.cx) / cam.fx * d, (vs - cam.cy) / cam.fy * d, d], -1)
    Xw0 = pose0.act(Xc)
    local = np.zeros_like(Xw0)
    objs = {p.instance: p for p in spec.dynamic_objects}
    for k, p in objs.items():
        m = obj_id == k
        local[m] = p.pose(query_frame).inverse().act(Xw0[m])
    pos = np.zeros((len(us), N, 2))
    vis = np.zeros((len(us), N), dtype=bool)
    for f in range(N):
        pose = spec.camera_pose(f)
        Xw = np.zeros_like(local)
        for k, p in objs.items():
            m = obj_id == k
            Xw[m] = p.pose(f).act(local[m])
        Xc = pose.inverse().act(Xw)
        z = Xc[:, 2]
        zs = np.where(z > cam.near, z, 1.0)
        q = np.stack([cam.fx * Xc[:, 0] / zs + cam.cx, cam.fy * Xc[:, 1] / zs + cam.cy], -1)
        pos[:, f] = q
        inb = (z > cam.near) & (q[:, 0] >= -0.5) & (q[:, 0] <= cam.width - 0.5) & (q[:, 1] >= -0.5) & (q[:, 1] <= cam.height - 0.5)
        _, hd, hi, _ = raycast(spec, f, pose, q)
        vis[:, f] = inb & (hi == obj_id) & (np.abs(hd - z) < 1e-6 * np.maximum(z, 1.0) + 1e-6)
    return pos, vis, obj_id


def _fmt_pose(p: SE3Pose) -> str:
    w, x, y, z = p.rotation
    return " ".join(f"{v:.17g}" for v in (*p.translation, x, y, z, w))


def generate_synthetic(spec_path, out_dir, overwrite: bool = False) -> Path:
    """Write a TUM-layout dataset for the scene file ``spec_path`` into ``out_dir``.

    Layout: ``rgb/`` (observed, blurred and exposure-scaled), ``rgb_sharp/``,
    ``depth/`` (16-bit, x5000), ``gt_masks/`` (8-bit instance ids, 0 = static),
    ``groundtruth.txt``, ``associations.txt``, ``gt_tracks.npz``,
    ``gt_flow.npz`` (forward flow to the next frame), ``gt_objects.txt``,
    ``exposure.txt``, ``camera.txt`` and a copy of the scene file.
    """
    spec = load_scene_spec(spec_path)
    out = Path(out_dir)
    if out.exists() and any(out.iterdir()):
        if not overwrite:
            raise InvalidSpec(f"output directory not empty: {out}")
        shutil.rmtree(out)
    for sub in ("rgb", "rgb_sharp", "depth", "gt_masks"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    cam = spec.camera
    H, W = cam.height, cam.width
    gt_lines = ["# timestamp tx ty tz qx qy qz qw"]
    assoc, exp_lines, obj_lines = [], ["# timestamp gain_log bias wx wy wz vx vy vz"], ["# frame instance tx ty tz qx qy qz qw"]
    depths, insts, poses = [], [], []
    for k in range(spec.frames):
        ts = spec.timestamp(k)
        pose = spec.camera_pose(k)
        sharp, depth, inst = render_sharp(spec, k, pose)
        blurred = render_blurred(spec, k, pose)
        name = f"{ts:.6f}.png"
        dname = f"{ts + DEPTH_OFFSET:.6f}.png"
        Image.fromarray(np.round(blurred * 255).astype(np.uint8)).save(out / "rgb" / name)
        Image.fromarray(np.round(sharp * 255).astype(np.uint8)).save(out / "rgb_sharp" / name)
        Image.fromarray(np.round(np.clip(depth * DEPTH_SCALE, 0, 65535)).astype(np.uint16)).save(out / "depth" / dname)
        Image.fromarray(inst.astype(np.uint8)).save(out / "gt_masks" / name)
        gt_lines.append(f"{ts:.6f} {_fmt_pose(pose)}")
        assoc.append(f"{ts:.6f} rgb/{name} {ts + DEPTH_OFFSET:.6f} depth/{dname}")
        xi = spec.blur_twist(k)
        exp_lines.append(f"{ts:.6f} {spec.gain(k):.17g} {spec.bias:.17g} " + " ".join(f"{v:.17g}" for v in xi.as_vector()))
        for p in spec.dynamic_objects:
            obj_lines.append(f"{k} {p.instance} {_fmt_pose(p.pose(k))}")
        depths.append(depth)
        insts.append(inst)
        poses.append(pose)
    flow = np.zeros((spec.frames, H, W, 2), dtype=np.float64)
    v, u = np.mgrid[0:H, 0:W].astype(float)
    for k in range(spec.frames - 1):
        q = scene_flow(spec, depths[k], insts[k], k, poses[k], k + 1, poses[k + 1])
        flow[k] = q - np.stack([u, v], -1)
    pos, vis, oid = object_tracks(spec, insts[0], depths[0])
    np.savez(out / "gt_flow.npz", flow=flow)
    np.savez(out / "gt_tracks.npz", positions=pos, visible=vis, object_id=oid, query_frame=np.int64(0))
    (out / "groundtruth.txt").write_text("\n".join(gt_lines) + "\n")
    (out / "associations.txt").write_text("\n".join(assoc) + "\n")
    (out / "exposure.txt").write_text("\n".join(exp_lines) + "\n")
    (out / "gt_objects.txt").write_text("\n".join(obj_lines) + "\n")
    (out / "camera.txt").write_text(f"{cam.fx!r} {cam.fy!r} {cam.cx!r} {cam.cy!r} {cam.width} {cam.height}\n")
    shutil.copyfile(spec_path, out / "scene.ini")
    log.info("wrote %d frames to %s", spec.frames, out)
    return out
