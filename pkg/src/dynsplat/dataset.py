"""
TUM RGB-D layout: parsing, rgb/depth association and ground-truth loading.

Images are 8-bit PNG mapped to linear [0, 1]; depth is 16-bit PNG with
5000 units per metre (0 = invalid).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import MalformedTrajectory, MissingAssociation
from .rasterizer import PinholeCamera
from .se3 import SE3Pose

log = logging.getLogger(__name__)

ASSOC_TOLERANCE = 0.02
DEPTH_SCALE = 5000.0
# freiburg1 intrinsics, used when a dataset ships no camera.txt
DEFAULT_CAMERA = (517.3, 516.5, 318.6, 255.3, 640, 480)


@dataclass
class Frame:
    index: int
    timestamp: float
    rgb_path: Path
    depth_timestamp: float
    depth_path: Path
    gt_pose: SE3Pose | None = None

    def load_rgb(self) -> np.ndarray:
        img = np.asarray(Image.open(self.rgb_path).convert("RGB"), dtype=np.float64)
        return img / 255.0

    def load_depth(self) -> np.ndarray:
        return np.asarray(Image.open(self.depth_path), dtype=np.float64) / DEPTH_SCALE


@dataclass
class TUMDataset:
    root: Path
    frames: list
    camera: PinholeCamera
    groundtruth: list | None  # [(timestamp, SE3Pose)]

    def __len__(self) -> int:
        return len(self.frames)

    def __iter__(self):
        return iter(self.frames)

    @property
    def is_synthetic(self) -> bool:
        return (self.root / "gt_objects.txt").is_file()


def _read_list(path: Path) -> list[tuple[float, str]]:
    out = []
    for line in path.read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) < 2:
            raise MissingAssociation(f"{path.name}: bad line {line!r}")
        try:
            out.append((float(parts[0]), parts[1]))
        except ValueError as e:
            raise MissingAssociation(f"{path.name}: bad timestamp {parts[0]!r}") from e
    return out


def associate(rgb: list, depth: list, tolerance: float = ASSOC_TOLERANCE) -> list:
    """Greedy nearest-timestamp matching; each depth frame is used at most once."""
    if not depth:
        return []
    dts = np.array([d[0] for d in depth])
    used = set()
    pairs = []
    for t, path in rgb:
        order = np.argsort(np.abs(dts - t), kind="stable")
        for j in order:
            if abs(dts[j] - t) > tolerance:
                break
            if j not in used:
                used.add(j)
                pairs.append((t, path, depth[j][0], depth[j][1]))
                break
    return pairs


def read_associations(root: Path, tolerance: float = ASSOC_TOLERANCE) -> list:
    assoc = root / "associations.txt"
    if assoc.is_file():
        pairs = []
        for line in assoc.read_text().splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 4:
                raise MissingAssociation(f"associations.txt: expected 4 columns, got {line!r}")
            try:
                t_rgb, t_d = float(parts[0]), float(parts[2])
            except ValueError as e:
                raise MissingAssociation(f"associations.txt: bad timestamp in {line!r}") from e
            if abs(t_rgb - t_d) > tolerance:
                log.warning("dropping pair %.6f/%.6f: %.3f s apart", t_rgb, t_d, abs(t_rgb - t_d))
                continue
            pairs.append((t_rgb, parts[1], t_d, parts[3]))
        return pairs
    if (root / "rgb.txt").is_file() and (root / "depth.txt").is_file():
        return associate(_read_list(root / "rgb.txt"), _read_list(root / "depth.txt"), tolerance)
    raise MissingAssociation(f"no associations.txt or rgb.txt/depth.txt in {root}")


def read_trajectory(path) -> list[tuple[float, SE3Pose]]:
    """Parse ``timestamp tx ty tz qx qy qz qw`` lines."""
    out = []
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 8:
            raise MalformedTrajectory(f"{path}:{n}: expected 8 columns, got {len(parts)}")
        try:
            vals = [float(x) for x in parts]
        except ValueError as e:
            raise MalformedTrajectory(f"{path}:{n}: not numeric") from e
        if not np.all(np.isfinite(vals)):
            raise MalformedTrajectory(f"{path}:{n}: non-finite value")
        if np.linalg.norm(vals[4:]) < 1e-9:
            raise MalformedTrajectory(f"{path}:{n}: zero quaternion")
        out.append((vals[0], SE3Pose.from_tum(*vals[1:])))
    return out


def read_camera(root: Path) -> PinholeCamera:
    path = root / "camera.txt"
    if not path.is_file():
        return PinholeCamera(*DEFAULT_CAMERA)
    vals = path.read_text().split()
    if len(vals) != 6:
        raise MissingAssociation("camera.txt must hold 'fx fy cx cy width height'")
    fx, fy, cx, cy = (float(v) for v in vals[:4])
    return PinholeCamera(fx, fy, cx, cy, int(vals[4]), int(vals[5]))


def nearest_pose(traj, t: float, tolerance: float = ASSOC_TOLERANCE):
    if not traj:
        return None
    ts = np.array([x[0] for x in traj])
    j = int(np.argmin(np.abs(ts - t)))
    return traj[j][1] if abs(ts[j] - t) <= tolerance else None


def ingest_tum(directory, tolerance: float = ASSOC_TOLERANCE) -> TUMDataset:
    """Load a TUM-layout directory as an ordered frame stream."""
    root = Path(directory)
    if not root.is_dir():
        raise MissingAssociation(f"not a directory: {root}")
    pairs = read_associations(root, tolerance)
    if not pairs:
        raise MissingAssociation(f"no rgb/depth pairs within {tolerance} s in {root}")
    gt = read_trajectory(root / "groundtruth.txt") if (root / "groundtruth.txt").is_file() else None
    frames = []
    for i, (t, rp, td, dp) in enumerate(sorted(pairs)):
        frames.append(Frame(i, t, root / rp, td, root / dp, nearest_pose(gt, t, tolerance) if gt else None))
    return TUMDataset(root, frames, read_camera(root), gt)
