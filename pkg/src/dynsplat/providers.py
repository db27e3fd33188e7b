"""
Ground-truth backed stand-ins for the learned front-ends.

Flow, point tracks and segmentation are read from (or derived from) the
ground truth that :mod:`dynsplat.synthetic` writes next to a dataset.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from .dataset import TUMDataset
from .errors import NoTracks, ValidationError
from .scaffold import TrackSet
from .se3 import SE3Pose
from .tracker import FlowCorrespondence, Keyframe


def read_object_poses(path) -> dict[tuple[int, int], SE3Pose]:
    """``{(frame, instance): object-to-world}`` from ``gt_objects.txt``."""
    out = {}
    p = Path(path)
    if not p.is_file():
        return out
    for line in p.read_text().splitlines():
        if not line.strip() or line.startswith("#"):
            continue
        v = line.split()
        out[(int(v[0]), int(v[1]))] = SE3Pose.from_tum(*(float(x) for x in v[2:9]))
    return out


def load_instance_map(dataset: TUMDataset, frame: int) -> np.ndarray:
    path = dataset.root / "gt_masks" / dataset.frames[frame].rgb_path.name
    if not path.is_file():
        return np.zeros((dataset.camera.height, dataset.camera.width), dtype=np.int64)
    return np.asarray(Image.open(path), dtype=np.int64)


class OracleCorrespondences:
    """Reprojection flow from ground-truth depth, poses and object motion.

    Static pixels follow the camera; pixels on a moving object follow the
    object, which is exactly what a flow network reports and what a static
    bundle adjuster cannot explain. Optional Gaussian noise applies to all
    pixels and ``outlier_fraction`` of the dynamic pixels are displaced by up
    to ``outlier_px``. Every pair gets its own deterministic random stream.
    """

    def __init__(self, dataset: TUMDataset, noise_px: float = 0.0, outlier_fraction: float = 0.0,
                 outlier_px: float = 10.0, seed: int = 0, variance: float = 1.0):
        if any(f.gt_pose is None for f in dataset.frames):
            raise ValidationError("oracle flow needs ground-truth poses for every frame")
        self.ds = dataset
        self.noise_px = noise_px
        self.outlier_fraction = outlier_fraction
        self.outlier_px = outlier_px
        self.seed = seed
        self.variance = variance
        self.objects = read_object_poses(dataset.root / "gt_objects.txt")
        self._inst = {}

    def instance_map(self, frame: int) -> np.ndarray:
        if frame not in self._inst:
            self._inst[frame] = load_instance_map(self.ds, frame)
        return self._inst[frame]

    def target_locations(self, source: Keyframe, target_frame: int):
        """(M, 2) target pixels and (M,) validity for the source grid."""
        cam = self.ds.camera
        pix = source.grid_pixels()
        ui, vi = pix[:, 0].astype(int), pix[:, 1].astype(int)
        d = source.depth[vi, ui]
        inst = self.instance_map(source.frame_id)[vi, ui]
        Pi = self.ds.frames[source.frame_id].gt_pose
        Pj = self.ds.frames[target_frame].gt_pose
        Xc = cam.backproject(pix, np.where(d > 0, d, 1.0))
        Xw = Pi.act(Xc)
        for lab in np.unique(inst[inst > 0]):
            m = inst == lab
            a = self.objects.get((source.frame_id, int(lab)))
            b = self.objects.get((target_frame, int(lab)))
            if a is not None and b is not None:
                Xw[m] = (b @ a.inverse()).act(Xw[m])
        Xj = Pj.inverse().act(Xw)
        z = Xj[:, 2]
        ok = (d > 0) & (z > cam.near)
        zs = np.where(ok, z, 1.0)
        q = np.stack([cam.fx * Xj[:, 0] / zs + cam.cx, cam.fy * Xj[:, 1] / zs + cam.cy], -1)
        return q, ok, inst

    def correspondences(self, source: Keyframe, target: Keyframe) -> FlowCorrespondence:
        cam = self.ds.camera
        q, ok, inst = self.target_locations(source, target.frame_id)
        rng = np.random.default_rng([self.seed, source.frame_id, target.frame_id])
        if self.noise_px > 0:
            q = q + rng.normal(0.0, self.noise_px, q.shape)
        if self.outlier_fraction > 0:
            dyn = np.nonzero(inst > 0)[0]
            n_out = int(round(self.outlier_fraction * len(dyn)))
            if n_out:
                pick = rng.choice(dyn, n_out, replace=False)
                q[pick] += rng.uniform(-self.outlier_px, self.outlier_px, (n_out, 2))
        inb = ok & (q[:, 0] >= 0) & (q[:, 0] <= cam.width - 1) & (q[:, 1] >= 0) & (q[:, 1] <= cam.height - 1)
        idx = np.nonzero(inb)[0]
        return FlowCorrespondence(source.time, target.time, idx, q[idx], np.full((len(idx), 2), self.variance))


class OracleTracks:
    """Dense point tracks seeded on the moving objects (``gt_tracks.npz``)."""

    def __init__(self, dataset: TUMDataset):
        path = dataset.root / "gt_tracks.npz"
        if not path.is_file():
            raise NoTracks(f"no tracks in {dataset.root}")
        with np.load(path) as z:
            self.positions = z["positions"]
            self.visible = z["visible"]
            self.query_frame = int(z["query_frame"])

    def tracks(self, frame_ids) -> TrackSet:
        frame_ids = list(frame_ids)
        if len(self.positions) == 0:
            raise NoTracks("track file is empty")
        if self.query_frame not in frame_ids:
            raise NoTracks("tracks were seeded on a frame that is not a keyframe")
        q = frame_ids.index(self.query_frame)
        return TrackSet(self.positions[:, frame_ids], self.visible[:, frame_ids], np.full(len(self.positions), q))
