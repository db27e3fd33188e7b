"""
Session directory: everything ``track`` hands to ``map`` and ``map`` hands to
``eval``, stored so that resuming reproduces an uninterrupted run bit for bit.

Layout::

    config.ini            configuration snapshot
    dataset.txt           path of the source dataset
    camera.txt            fx fy cx cy width height
    keyframes.npz         poses, images, depths, inverse-depth grids (float64)
    trajectory.txt        keyframe poses in TUM format (readable copy)
    mapping/scene.ply     Gaussians (static first)
    mapping/scaffold.txt  node trajectories, AOW weights, graph
    mapping/exposure.txt  per-keyframe gain, bias and control poses
    mapping/optimizer.npz Adam moments and step counts
    mapping/mlp.npz       uncertainty predictor weights
    mapping/state.npz     residuals, beta^2 maps, gradient statistics, poses
    mapping/state.json    phase, iteration, loss history, densify log
    mapping/beta2_XX.bin, mapping/rum_XX.png, mapping/mu_XX.png
"""

from __future__ import annotations

import json
import shutil
from pathlib import Path

import numpy as np
import torch

from .config import SessionConfig
from .errors import ValidationError
from .exposure import ExposureParams
from .mapper import MappingOptions, MappingSession
from .rasterizer import DTYPE, PinholeCamera
from .scaffold import load_scaffold, save_scaffold
from .scene import GradStats, load_ply, save_ply
from .se3 import SE3Pose
from .tracker import Keyframe, save_tum_trajectory
from .uncertainty import save_beta_grid, save_mask_png


def write_camera(camera: PinholeCamera, path) -> None:
    Path(path).write_text(f"{camera.fx!r} {camera.fy!r} {camera.cx!r} {camera.cy!r} {camera.width} {camera.height}\n")


def read_camera(path) -> PinholeCamera:
    v = Path(path).read_text().split()
    if len(v) != 6:
        raise ValidationError(f"{path}: expected 'fx fy cx cy width height'")
    return PinholeCamera(float(v[0]), float(v[1]), float(v[2]), float(v[3]), int(v[4]), int(v[5]))


def save_keyframes(keyframes: list, path) -> None:
    np.savez(
        path,
        q=np.array([kf.pose.rotation for kf in keyframes]),
        t=np.array([kf.pose.translation for kf in keyframes]),
        images=np.array([kf.image for kf in keyframes]),
        depths=np.array([kf.depth for kf in keyframes]),
        inv_depths=np.array([kf.inv_depth for kf in keyframes]),
        frame_ids=np.array([kf.frame_id for kf in keyframes]),
        timestamps=np.array([kf.timestamp for kf in keyframes]),
        stride=np.array(keyframes[0].stride if keyframes else 4),
    )


def load_keyframes(path) -> list:
    with np.load(path) as z:
        out = []
        for i in range(len(z["q"])):
            out.append(Keyframe(SE3Pose(z["q"][i], z["t"][i]), z["images"][i], z["depths"][i], i,
                                int(z["frame_ids"][i]), float(z["timestamps"][i]), int(z["stride"]),
                                z["inv_depths"][i].copy()))
    return out


def save_exposures(exposures: list, path) -> None:
    """One line per keyframe: ``a b... | qs ts | qe te``; floats as repr() for exact round trips."""
    lines = [f"# exposure rot_step {exposures[0].rot_step!r} trans_step {exposures[0].trans_step!r} "
             f"max_samples {exposures[0].max_samples}" if exposures else "# exposure"]
    for e in exposures:
        b = e.bias.detach().reshape(-1).numpy()
        vals = [float(e.gain_log)] + list(b)
        for k in ("start_q", "start_t", "end_q", "end_t"):
            vals += list(getattr(e, k).detach().numpy())
        lines.append(f"{len(b)} " + " ".join(repr(float(x)) for x in vals))
    Path(path).write_text("\n".join(lines) + "\n")


def load_exposures(path) -> list:
    lines = Path(path).read_text().splitlines()
    head = lines[0].split()
    kw = {}
    if len(head) > 2:
        kw = {"rot_step": float(head[3]), "trans_step": float(head[5]), "max_samples": int(head[7])}
    out = []
    for ln in lines[1:]:
        if not ln.strip():
            continue
        v = ln.split()
        nb = int(v[0])
        x = [float(s) for s in v[1:]]
        t = lambda a: torch.tensor(a, dtype=DTYPE)
        bias = t(x[1]) if nb == 1 else t(x[1:1 + nb])
        o = 1 + nb
        out.append(ExposureParams(t(x[0]), bias, t(x[o:o + 4]), t(x[o + 4:o + 7]), t(x[o + 7:o + 11]),
                                  t(x[o + 11:o + 14]), **kw))
    return out


class Session:
    """A session directory on disk plus its in-memory state."""

    def __init__(self, root, config: SessionConfig, camera: PinholeCamera, keyframes: list,
                 dataset_root: str | None = None):
        self.root = Path(root)
        self.config = config
        self.camera = camera
        self.keyframes = keyframes
        self.dataset_root = dataset_root
        self.mapping: MappingSession | None = None
        self.timings: dict = {}

    @property
    def mapping_dir(self) -> Path:
        return self.root / "mapping"

    # -- tracking part ---------------------------------------------------------
    def save(self) -> None:
        self.root.mkdir(parents=True, exist_ok=True)
        self.config.save(self.root / "config.ini")
        write_camera(self.camera, self.root / "camera.txt")
        (self.root / "dataset.txt").write_text(f"{self.dataset_root or ''}\n")
        save_keyframes(self.keyframes, self.root / "keyframes.npz")
        save_tum_trajectory(self.root / "trajectory.txt", [kf.timestamp for kf in self.keyframes],
                            [kf.pose for kf in self.keyframes])
        if self.mapping is not None:
            save_mapping(self.mapping, self.mapping_dir)

    @classmethod
    def load(cls, root, config: SessionConfig | None = None) -> "Session":
        root = Path(root)
        if not (root / "keyframes.npz").is_file():
            raise ValidationError(f"{root} is not a session directory (run track first)")
        cfg = config or SessionConfig.load(root / "config.ini")
        ds = (root / "dataset.txt").read_text().strip() if (root / "dataset.txt").is_file() else ""
        return cls(root, cfg, read_camera(root / "camera.txt"), load_keyframes(root / "keyframes.npz"), ds or None)

    def has_mapping(self) -> bool:
        return (self.mapping_dir / "state.json").is_file()


# --------------------------------------------------------------------------
# mapping state
# --------------------------------------------------------------------------


def save_mapping(ms: MappingSession, directory) -> None:
    d = Path(directory)
    if d.exists():
        shutil.rmtree(d)
    d.mkdir(parents=True)
    save_ply(ms.scene, d / "scene.ply")
    if ms.graph is not None:
        save_scaffold(ms.graph, d / "scaffold.txt")
    save_exposures(ms.exposures, d / "exposure.txt")
    np.savez(d / "optimizer.npz", **ms.optim.state_arrays())
    lr = {k: ms.optim.lr[k] for k in sorted(ms.optim.lr)}
    np.savez(d / "mlp.npz", **{k: v.detach().numpy() for k, v in ms.field.predictor.state_dict().items()})
    arrays = {}
    for t in range(len(ms.keyframes)):
        if ms.residuals[t] is not None:
            arrays[f"residual_{t}"] = ms.residuals[t]
        if ms.beta2[t] is not None:
            arrays[f"beta2_{t}"] = ms.beta2[t]
            save_beta_grid(ms.beta2[t], d / f"beta2_{t:02d}.bin")
        if ms.masks_u[t] is not None:
            arrays[f"mask_u_{t}"] = ms.masks_u[t]
            save_mask_png(ms.masks_u[t], d / f"mu_{t:02d}.png")
        if ms.masks_ru[t] is not None:
            arrays[f"mask_ru_{t}"] = ms.masks_ru[t]
            save_mask_png(ms.masks_ru[t], d / f"rum_{t:02d}.png")
        q, tr = ms.poses[t]
        arrays[f"pose_q_{t}"] = q.detach().numpy()
        arrays[f"pose_t_{t}"] = tr.detach().numpy()
    for k, v in ms.field.cached.items():
        arrays[f"cached_{k}"] = v
    stats = getattr(ms, "_stats", None)
    if stats is not None:
        for k in ("static_sum", "static_count", "dynamic_sum", "dynamic_count"):
            arrays[f"stats_{k}"] = getattr(stats, k).numpy()
    np.savez(d / "state.npz", **arrays)
    state = {
        "phase": ms.phase,
        "iteration": ms.iteration,
        "history": [[p, int(i), float(v)] for p, i, v in ms.history],
        "densify_log": [[w, int(i), {k: int(v) for k, v in r.items()}] for w, i, r in ms.densify_log],
        "lr": lr,
        "has_graph": ms.graph is not None,
        "extent": ms.extent,
    }
    (d / "state.json").write_text(json.dumps(state, indent=1) + "\n")


def load_mapping(directory, keyframes, camera: PinholeCamera, options: MappingOptions, segmentation=None,
                 tracks=None) -> MappingSession:
    d = Path(directory)
    state = json.loads((d / "state.json").read_text())
    ms = MappingSession(keyframes, camera, options, segmentation, tracks)
    ms.scene = load_ply(d / "scene.ply")
    ms.graph = load_scaffold(d / "scaffold.txt") if state["has_graph"] else None
    ms.exposures = load_exposures(d / "exposure.txt")
    with np.load(d / "optimizer.npz") as z:
        ms.optim.load_arrays({k: z[k] for k in z.files})
    ms.optim.lr = dict(state["lr"])
    with np.load(d / "mlp.npz") as z:
        ms.field.predictor.load_state_dict({k: torch.tensor(z[k], dtype=DTYPE) for k in z.files})
    with np.load(d / "state.npz") as z:
        for t in range(len(keyframes)):
            get = lambda k: z[k].copy() if k in z.files else None
            ms.residuals[t] = get(f"residual_{t}")
            ms.beta2[t] = get(f"beta2_{t}")
            ms.masks_u[t] = get(f"mask_u_{t}")
            ms.masks_ru[t] = get(f"mask_ru_{t}")
            ms.poses[t] = (torch.tensor(z[f"pose_q_{t}"], dtype=DTYPE), torch.tensor(z[f"pose_t_{t}"], dtype=DTYPE))
        ms.field.cached = {int(k[7:]): z[k].copy() for k in z.files if k.startswith("cached_")}
        if "stats_static_sum" in z.files:
            ms._stats = GradStats(*(torch.tensor(z[f"stats_{k}"], dtype=DTYPE)
                                    for k in ("static_sum", "static_count", "dynamic_sum", "dynamic_count")))
    ms.phase = state["phase"]
    ms.iteration = int(state["iteration"])
    ms.history = [(p, i, v) for p, i, v in state["history"]]
    ms.densify_log = [(w, i, r) for w, i, r in state["densify_log"]]
    ms.extent = float(state["extent"])
    ms.opt.densify.scene_extent = ms.extent
    return ms
