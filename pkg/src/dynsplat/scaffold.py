"""
Motion scaffold: a sparse graph of node trajectories that deforms the
dynamic Gaussians.

Each node carries one pose per keyframe, a control radius and one opacity
weight per keyframe. A dynamic Gaussian bound to node ``k*`` at reference
time ``t_ref`` moves with the dual-quaternion blend of the relative motions
``Q_i(t) Q_i(t_ref)^-1`` of the nodes adjacent to ``k*``, weighted by a
Gaussian RBF of its distance to those nodes at ``t_ref``. Its opacity is
modulated by ``sigmoid(sum_i w_i * aow_i(t))`` using the same, unnormalised,
edge weights.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import batched as B
from .errors import EmptyScaffold, NoTracks, ValidationError
from .rasterizer import DTYPE, GaussianBatch, PinholeCamera
from .scene import GaussianBinding, GaussianScene, GaussianSet
from .se3 import SE3Pose, dqb


@dataclass
class ScaffoldGraph:
    rotations: torch.Tensor  # (K, T, 4) node orientations Q^k(t)
    translations: torch.Tensor  # (K, T, 3)
    radius: torch.Tensor  # (K,)
    aow: torch.Tensor  # (K, T) opacity weights
    edges: torch.Tensor  # (K, E) long; column 0 is the node itself
    k_nn: int = 8

    def __post_init__(self):
        K = self.translations.shape[0]
        if self.rotations.shape[:2] != self.translations.shape[:2] or self.aow.shape != self.translations.shape[:2]:
            raise ValidationError("trajectory and opacity-weight lengths must match the keyframe count")
        if K and (self.edges.min() < 0 or self.edges.max() >= K):
            raise ValidationError("edge index out of range")
        if K and not torch.all(self.radius > 0):
            raise ValidationError("node radii must be positive")

    @property
    def num_nodes(self) -> int:
        return self.translations.shape[0]

    @property
    def num_times(self) -> int:
        return self.translations.shape[1]

    @classmethod
    def empty(cls, num_times: int = 1, k_nn: int = 8) -> "ScaffoldGraph":
        return cls(torch.zeros(0, num_times, 4, dtype=DTYPE), torch.zeros(0, num_times, 3, dtype=DTYPE),
                   torch.zeros(0, dtype=DTYPE), torch.zeros(0, num_times, dtype=DTYPE),
                   torch.zeros(0, 1, dtype=torch.long), k_nn)

    def node_pose(self, k: int, t: int) -> SE3Pose:
        return SE3Pose(self.rotations[k, t].detach().numpy(), self.translations[k, t].detach().numpy())

    def params(self) -> dict:
        return {"node_rotations": self.rotations, "node_translations": self.translations, "aow": self.aow}

    def clone(self) -> "ScaffoldGraph":
        return ScaffoldGraph(self.rotations.detach().clone(), self.translations.detach().clone(), self.radius.clone(),
                             self.aow.detach().clone(), self.edges.clone(), self.k_nn)


def edge_weight(mu, node_translation, radius):
    """``exp(-|mu - t|^2 / (2 r^2))``; works on numpy scalars/arrays and torch tensors."""
    if torch.is_tensor(mu) or torch.is_tensor(node_translation):
        d2 = ((mu - node_translation) ** 2).sum(-1)
        return torch.exp(-d2 / (2.0 * radius**2))
    if radius <= 0:
        raise ValueError("radius must be positive")
    d2 = np.sum((np.asarray(mu, dtype=float) - np.asarray(node_translation, dtype=float)) ** 2, axis=-1)
    return np.exp(-d2 / (2.0 * radius**2))


def deform_transform(mu, binding: GaussianBinding, graph: ScaffoldGraph, t: int) -> SE3Pose:
    """Blended rigid transform carrying a Gaussian from its reference time to ``t``."""
    t_ref = binding.reference_time
    weights, ops = [], []
    for i in graph.edges[binding.node_index].tolist():
        ref = graph.node_pose(i, t_ref)
        weights.append(edge_weight(mu, ref.translation, float(graph.radius[i])))
        ops.append((graph.node_pose(i, t) @ ref.inverse()).to_dualquat())
    return dqb(weights, ops)


def aow_opacity(base_opacity, mu, binding: GaussianBinding, graph: ScaffoldGraph, t: int) -> float:
    """Time-weighted opacity ``sigmoid(sum_i w_i aow_i(t)) * o``."""
    t_ref = binding.reference_time
    s = 0.0
    for i in graph.edges[binding.node_index].tolist():
        w = edge_weight(mu, graph.translations[i, t_ref].detach().numpy(), float(graph.radius[i]))
        s += w * float(graph.aow[i, t])
    return float(1.0 / (1.0 + np.exp(-s)) * base_opacity)


def _neighbour_terms(gs: GaussianSet, graph: ScaffoldGraph):
    nbr = graph.edges[gs.node_index]  # (N, E)
    t_ref = gs.ref_time
    ref_t = graph.translations[nbr, t_ref[:, None]]  # (N, E, 3)
    d2 = ((gs.means[:, None, :] - ref_t) ** 2).sum(-1)
    logw = -d2 / (2.0 * graph.radius[nbr] ** 2)
    return nbr, logw


def deform_gaussians(gs: GaussianSet, graph: ScaffoldGraph, t: int, use_aow: bool = True):
    """Batched deformation of a dynamic set to time ``t``; returns a :class:`GaussianBatch`."""
    if len(gs) == 0:
        return GaussianBatch.empty()
    if graph.num_nodes == 0:
        raise EmptyScaffold("dynamic Gaussians need a scaffold")
    nbr, logw = _neighbour_terms(gs, graph)
    t_ref = gs.ref_time[:, None].expand_as(nbr)
    q_now, t_now = graph.rotations[nbr, t], graph.translations[nbr, t]
    q_ref, t_ref_ = graph.rotations[nbr, t_ref], graph.translations[nbr, t_ref]
    q_now = B.quat_normalize(q_now)
    qi, ti = B.inverse(B.quat_normalize(q_ref), t_ref_)
    dq, dt = B.compose(q_now, t_now, qi, ti)
    # normalised weights computed in the log domain so far Gaussians never underflow to an empty blend
    w = torch.softmax(logw, dim=-1)
    bq, bt = B.dqb(w, dq, dt)
    means = B.quat_rotate(bq, gs.means) + bt
    quats = B.quat_mul(bq, B.quat_normalize(gs.quats))
    opacity = gs.opacity
    if use_aow:
        w_o = (torch.exp(logw) * graph.aow[nbr, t]).sum(-1)
        opacity = torch.sigmoid(w_o) * opacity
    return GaussianBatch(means, quats, gs.log_scales, opacity, gs.colors)


def deform_scene(scene: GaussianScene, graph: ScaffoldGraph | None, t: int, use_aow: bool = True,
                 static_only: bool = False) -> GaussianBatch:
    """All Gaussians posed at keyframe ``t``: static pass through, dynamic are deformed."""
    parts = [scene.static.to_batch()]
    if not static_only and len(scene.dynamic):
        parts.append(deform_gaussians(scene.dynamic, graph, t, use_aow))
    return GaussianBatch.cat(parts) if len(parts) > 1 else parts[0]


# --------------------------------------------------------------------------
# initialisation from 2D tracks
# --------------------------------------------------------------------------


@dataclass
class TrackSet:
    """2D tracks over keyframes: positions (P, T, 2) pixels, visibility (P, T)."""

    positions: np.ndarray
    visible: np.ndarray
    query_time: np.ndarray  # (P,) keyframe where each track was seeded

    def __len__(self) -> int:
        return self.positions.shape[0]


def _bilinear(img: np.ndarray, u: float, v: float) -> float:
    H, W = img.shape
    u = min(max(u, 0.0), W - 1.0)
    v = min(max(v, 0.0), H - 1.0)
    u0, v0 = int(np.floor(u)), int(np.floor(v))
    u1, v1 = min(u0 + 1, W - 1), min(v0 + 1, H - 1)
    a, b = u - u0, v - v0
    return ((1 - a) * (1 - b) * img[v0, u0] + a * (1 - b) * img[v0, u1]
            + (1 - a) * b * img[v1, u0] + a * b * img[v1, u1])


def lift_tracks(tracks: TrackSet, depths, poses, camera: PinholeCamera) -> np.ndarray:
    """World-space trajectories (P, T, 3) from 2D tracks and per-keyframe depth.

    Depth is read at the track position in every keyframe, visible or not;
    an occluded track therefore lands on whatever surface hides it.
    """
    P, T = tracks.positions.shape[:2]
    out = np.zeros((P, T, 3))
    for t in range(T):
        R, tr = poses[t].R, poses[t].translation
        for p in range(P):
            u, v = tracks.positions[p, t]
            z = _bilinear(depths[t], u, v)
            pc = camera.backproject(np.array([u, v]), np.array(z))
            out[p, t] = R @ pc + tr
    return out


def trajectory_distance(traj: np.ndarray) -> np.ndarray:
    """Mean per-keyframe Euclidean distance between every pair of trajectories (K, K)."""
    diff = traj[:, None, :, :] - traj[None, :, :, :]
    return np.linalg.norm(diff, axis=-1).mean(-1)


def _farthest_point(points: np.ndarray, count: int) -> np.ndarray:
    n = len(points)
    if count >= n:
        return np.arange(n)
    chosen = [0]
    d = np.linalg.norm(points - points[0], axis=-1)
    for _ in range(count - 1):
        nxt = int(np.argmax(d))
        chosen.append(nxt)
        d = np.minimum(d, np.linalg.norm(points - points[nxt], axis=-1))
    return np.sort(np.array(chosen))


def build_graph(trajectories: np.ndarray, k_nn: int = 8, default_radius: float = 0.05,
                radius_scale: float = 1.0) -> ScaffoldGraph:
    """Scaffold from node translation trajectories (K, T, 3) with identity rotations."""
    K, T = trajectories.shape[:2]
    if K == 0:
        raise NoTracks("no node trajectories")
    D = trajectory_distance(trajectories)
    width = min(K, k_nn + 1)
    order = np.argsort(D + np.diag(np.full(K, -1.0)), axis=1, kind="stable")  # self first
    edges = order[:, :width]
    if K > 1:
        nn_d = np.take_along_axis(D, order[:, 1:width], axis=1)
        radius = np.median(nn_d, axis=1) * radius_scale
        radius = np.where(radius > 1e-9, radius, default_radius)
    else:
        radius = np.full(K, default_radius)
    rot = np.zeros((K, T, 4))
    rot[..., 0] = 1.0
    return ScaffoldGraph(
        torch.tensor(rot, dtype=DTYPE), torch.tensor(trajectories, dtype=DTYPE), torch.tensor(radius, dtype=DTYPE),
        torch.zeros(K, T, dtype=DTYPE), torch.tensor(edges, dtype=torch.long), k_nn,
    )


def init_nodes_from_tracks(tracks: TrackSet, depths, poses, mask_sequence, camera: PinholeCamera,
                           k_nn: int = 8, max_nodes: int = 64, default_radius: float = 0.05,
                           radius_scale: float = 1.0) -> ScaffoldGraph:
    """Sample nodes from tracks seeded inside the dynamic masks and lift them to 3D."""
    keep = []
    for p in range(len(tracks)):
        t0 = int(tracks.query_time[p])
        u, v = np.round(tracks.positions[p, t0]).astype(int)
        m = mask_sequence[t0]
        if 0 <= v < m.shape[0] and 0 <= u < m.shape[1] and m[v, u]:
            keep.append(p)
    if not keep:
        raise NoTracks("no tracks inside the dynamic regions")
    sub = TrackSet(tracks.positions[keep], tracks.visible[keep], tracks.query_time[keep])
    traj = lift_tracks(sub, depths, poses, camera)
    q_times = sub.query_time.astype(int)
    anchor = traj[np.arange(len(sub)), q_times]
    pick = _farthest_point(anchor, max_nodes)
    return build_graph(traj[pick], k_nn=k_nn, default_radius=default_radius, radius_scale=radius_scale)


# --------------------------------------------------------------------------
# sidecar text format
# --------------------------------------------------------------------------


def save_scaffold(graph: ScaffoldGraph, path) -> None:
    """Plain-text sidecar; floats written with repr() so they round-trip exactly."""
    K, T = graph.num_nodes, graph.num_times
    lines = [f"scaffold nodes {K} keyframes {T} k_nn {graph.k_nn}"]
    rot = graph.rotations.detach().numpy()
    tr = graph.translations.detach().numpy()
    aow = graph.aow.detach().numpy()
    for k in range(K):
        lines.append(f"node {k}")
        for t in range(T):
            vals = list(tr[k, t]) + list(rot[k, t])
            lines.append("pose " + " ".join(repr(float(x)) for x in vals))
        lines.append("aow " + " ".join(repr(float(x)) for x in aow[k]))
        lines.append(f"radius {float(graph.radius[k])!r}")
        lines.append("neighbors " + " ".join(str(int(i)) for i in graph.edges[k]))
    Path(path).write_text("\n".join(lines) + "\n")


def load_scaffold(path) -> ScaffoldGraph:
    lines = Path(path).read_text().splitlines()
    head = lines[0].split()
    if head[0] != "scaffold":
        raise ValidationError(f"{path}: not a scaffold sidecar")
    K, T, k_nn = int(head[2]), int(head[4]), int(head[6])
    if K == 0:
        return ScaffoldGraph.empty(T, k_nn)
    rot = np.zeros((K, T, 4))
    tr = np.zeros((K, T, 3))
    aow = np.zeros((K, T))
    radius = np.zeros(K)
    edges = []
    i = 1
    for k in range(K):
        assert lines[i] == f"node {k}", lines[i]
        i += 1
        for t in range(T):
            v = [float(x) for x in lines[i].split()[1:]]
            tr[k, t], rot[k, t] = v[:3], v[3:]
            i += 1
        aow[k] = [float(x) for x in lines[i].split()[1:]]
        radius[k] = float(lines[i + 1].split()[1])
        edges.append([int(x) for x in lines[i + 2].split()[1:]])
        i += 3
    return ScaffoldGraph(torch.tensor(rot, dtype=DTYPE), torch.tensor(tr, dtype=DTYPE), torch.tensor(radius, dtype=DTYPE),
                         torch.tensor(aow, dtype=DTYPE), torch.tensor(edges, dtype=torch.long), k_nn)
