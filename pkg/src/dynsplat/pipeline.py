"""
Glue between the dataset, the providers and the optimisers: keyframe
selection plus bundle adjustment over a frame stream, and the session
directory that carries state from ``track`` to ``map`` to ``eval``.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import SessionConfig
from .dataset import TUMDataset
from .se3 import SE3Pose
from .tracker import DBAConfig, Keyframe, dba_solve, edge_set, select_keyframe

log = logging.getLogger(__name__)


def make_keyframe(dataset: TUMDataset, frame_id: int, time: int, pose: SE3Pose, stride: int) -> Keyframe:
    fr = dataset.frames[frame_id]
    return Keyframe(pose, fr.load_rgb(), fr.load_depth(), time, frame_id, fr.timestamp, stride)


def dba_config(cfg: SessionConfig) -> DBAConfig:
    t = cfg.tracker
    return DBAConfig(t.max_iters, t.tol, t.lambda_init, t.depth_prior_weight)


def run_dba(keyframes: list, provider, cfg: SessionConfig, camera, uncertainty=None, cache: dict | None = None):
    """Bundle-adjust ``keyframes`` in place; returns the solver result."""
    cache = {} if cache is None else cache
    corrs = []
    for i, j in edge_set(len(keyframes), cfg.tracker.edge_radius):
        key = (keyframes[i].frame_id, keyframes[j].frame_id)
        if key not in cache:
            cache[key] = provider.correspondences(keyframes[i], keyframes[j])
        c = cache[key]
        if len(c.index):
            corrs.append(type(c)(i, j, c.index, c.predicted, c.confidence))
    res = dba_solve(keyframes, corrs, uncertainty, dba_config(cfg), camera)
    for kf, p, d in zip(keyframes, res.poses, res.inv_depths):
        kf.pose = p
        kf.inv_depth = d
    return res


@dataclass
class TrackingResult:
    keyframes: list
    cost: float
    stats: list = field(default_factory=list)  # (frame, mean_flow, overlap, selected)

    @property
    def frame_ids(self) -> list:
        return [kf.frame_id for kf in self.keyframes]

    @property
    def poses(self) -> list:
        return [kf.pose for kf in self.keyframes]


def track_sequence(dataset: TUMDataset, provider, cfg: SessionConfig) -> TrackingResult:
    """Select keyframes along the stream and bundle-adjust after every insertion.

    The first frame is the gauge anchor (identity pose). Mean flow and
    covisibility are measured from the last keyframe's grid to the candidate.
    """
    t = cfg.tracker
    cam = dataset.camera
    kfs = [make_keyframe(dataset, 0, 0, SE3Pose.identity(), t.stride)]
    cache = {}
    stats = []
    cost = 0.0
    for f in range(1, len(dataset)):
        last = kfs[-1]
        cand = make_keyframe(dataset, f, len(kfs), last.pose, t.stride)
        c = provider.correspondences(last, cand)
        grid = last.grid_pixels()
        n_valid = int((last.inv_depth.ravel() > 0).sum())
        overlap = len(c.index) / max(n_valid, 1)
        flow = float(np.linalg.norm(c.predicted - grid[c.index], axis=1).mean()) if len(c.index) else 0.0
        sel = select_keyframe(flow, overlap, t.flow_thresh, t.overlap_thresh)
        stats.append((f, flow, overlap, sel))
        if not sel:
            continue
        kfs.append(cand)
        res = run_dba(kfs, provider, cfg, cam, cache=cache)
        cost = res.cost
        log.info("keyframe %d at frame %d (flow %.2f px, overlap %.2f), dba cost %.4g", len(kfs) - 1, f, flow, overlap,
                 res.cost)
    return TrackingResult(kfs, cost, stats)


# --------------------------------------------------------------------------
# stages
# --------------------------------------------------------------------------


def correspondence_provider(dataset: TUMDataset, cfg: SessionConfig):
    from .providers import OracleCorrespondences

    t = cfg.tracker
    return OracleCorrespondences(dataset, t.flow_noise, t.outlier_fraction, t.outlier_px, cfg.session.seed)


def track(dataset_root, session_root, cfg: SessionConfig):
    """Keyframe tracking over a dataset; writes and returns a new :class:`Session`."""
    from .dataset import ingest_tum
    from .session import Session

    ds = ingest_tum(dataset_root)
    res = track_sequence(ds, correspondence_provider(ds, cfg), cfg)
    sess = Session(session_root, cfg, ds.camera, res.keyframes, str(Path(dataset_root).resolve()))
    sess.save()
    return sess


def grid_uncertainty(beta2_maps: list) -> list:
    """Per-keyframe beta^2 maps as the tracker expects them (full resolution)."""
    return [np.asarray(b, dtype=float) for b in beta2_maps]


def refine_poses_with_uncertainty(session, ms, dataset: TUMDataset, cfg: SessionConfig):
    """Re-run bundle adjustment with the Phase A uncertainty maps; updates keyframes and mapping poses."""
    from . import batched as B

    kfs = session.keyframes
    before = [kf.pose for kf in kfs]
    res = run_dba(kfs, correspondence_provider(dataset, cfg), cfg, session.camera, grid_uncertainty(ms.beta2))
    ms.poses = [B.pose_to_tensors(kf.pose) for kf in kfs]
    for kf, old, e in zip(kfs, before, ms.exposures):
        # keep the learned intra-exposure motion, re-expressed around the new pose
        delta = kf.pose @ old.inverse()
        e.start_q, e.start_t = B.pose_to_tensors(delta @ e.T_s)
        e.end_q, e.end_t = B.pose_to_tensors(delta @ e.T_e)
    return res


def mapping_session(session, dataset: TUMDataset | None, cfg: SessionConfig):
    """A fresh :class:`MappingSession` for ``session`` wired to the dataset's oracle providers."""
    from .errors import NoTracks
    from .mapper import MappingOptions, MappingSession
    from .providers import OracleTracks, load_instance_map
    from .uncertainty import OracleSegmentation

    seg = tracks = None
    ids = [kf.frame_id for kf in session.keyframes]
    if dataset is not None:
        seg = OracleSegmentation([load_instance_map(dataset, i) for i in ids], noisy=cfg.uncertainty.noisy_segmentation)
        try:
            tracks = OracleTracks(dataset).tracks(ids)
        except NoTracks as e:
            log.warning("no point tracks: %s", e)
    return MappingSession(session.keyframes, session.camera, MappingOptions.from_config(cfg), seg, tracks)


def map_session(session, cfg: SessionConfig | None = None, checkpoint_every: int = 0):
    """Phase A, optional uncertainty-weighted pose refinement, then phase B.

    Progress is checkpointed into the session directory every
    ``checkpoint_every`` iterations (0: only at the end); an interrupted run
    continues from the last checkpoint and ends bit-identical to an
    uninterrupted one. Wall-clock seconds spent in each phase of this call
    are left in ``session.timings`` (not saved: they differ between runs).
    """
    from .dataset import ingest_tum
    from .session import load_mapping, save_mapping

    cfg = cfg or session.config
    dataset = None
    if session.dataset_root and Path(session.dataset_root).is_dir():
        dataset = ingest_tum(session.dataset_root)
    ms = mapping_session(session, dataset, cfg)
    if session.has_mapping():
        ms = load_mapping(session.mapping_dir, session.keyframes, session.camera, ms.opt, ms.segmentation, ms.tracks)
    session.mapping = ms
    session.timings = {"static": 0.0, "refine": 0.0, "dynamic": 0.0}
    clock = time.perf_counter()

    def lap(phase):
        nonlocal clock
        now = time.perf_counter()
        session.timings[phase] += now - clock
        clock = now

    a, b = ms.opt.static_iterations, ms.opt.dynamic_iterations
    chunk = checkpoint_every if checkpoint_every > 0 else max(a, b, 1)

    def save():
        session.save()

    if a > 0 and ms.phase in ("init", "static"):
        while ms.phase == "init" or ms.iteration < a:
            ms.run_static(min(chunk, a - ms.iteration))
            save()
    lap("static")
    if b > 0 and ms.phase in ("init", "static", "static_done"):
        if ms.phase != "static_done":
            ms.finish_static()
        lap("static")
        if cfg.tracker.refine_with_uncertainty and dataset is not None and len(session.keyframes) > 1:
            refine_poses_with_uncertainty(session, ms, dataset, cfg)
        lap("refine")
        ms.start_dynamic()
        save()
    if b > 0 and ms.phase == "dynamic":
        while ms.iteration < b:
            ms.run_dynamic(min(chunk, b - ms.iteration))
            save()
        ms.phase = "done"
        save()
    lap("dynamic")
    return session


def open_mapping(session):
    """Load the saved mapping state of ``session`` (attached as ``session.mapping``)."""
    from .dataset import ingest_tum
    from .errors import ValidationError
    from .session import load_mapping

    if not session.has_mapping():
        raise ValidationError(f"{session.root} has no mapping state (run map first)")
    dataset = None
    if session.dataset_root and Path(session.dataset_root).is_dir():
        dataset = ingest_tum(session.dataset_root)
    ms = mapping_session(session, dataset, session.config)
    session.mapping = load_mapping(session.mapping_dir, session.keyframes, session.camera, ms.opt,
                                   ms.segmentation, ms.tracks)
    return session.mapping
