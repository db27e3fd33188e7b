"""
Integrate-and-render: synthesise a motion-blurred, exposure-adjusted frame.

The camera path during the exposure is the geodesic between two learnable
control poses; sample ``k`` is rendered at ``exp(k/|S| log(T_s^-1 T_e)) @ T``
and the ``|S| + 1`` samples are averaged, scaled by ``exp(a)`` and offset by
``b``. The scene itself is frozen at keyframe time ``t`` for all samples.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from . import batched as B
from .rasterizer import DTYPE, PinholeCamera, RenderOutput, render
from .scaffold import ScaffoldGraph, deform_scene
from .scene import GaussianScene
from .se3 import SE3Pose, Twist, se3_exp, se3_log


@dataclass
class ExposureParams:
    """Per-keyframe exposure model. All tensors are optimisable leaves."""

    gain_log: torch.Tensor  # scalar a
    bias: torch.Tensor  # scalar b (or (3,) when per-channel)
    start_q: torch.Tensor
    start_t: torch.Tensor
    end_q: torch.Tensor
    end_t: torch.Tensor
    rot_step: float = 0.005
    trans_step: float = 0.005
    max_samples: int = 12

    def __post_init__(self):
        if self.max_samples < 1:
            raise ValueError("max_samples must be >= 1")

    @classmethod
    def identity(cls, pose: SE3Pose | None = None, **kw) -> "ExposureParams":
        """Zero exposure change with ``T_s = T_e`` (no motion)."""
        pose = pose or SE3Pose.identity()
        q, t = B.pose_to_tensors(pose)
        return cls(torch.zeros((), dtype=DTYPE), torch.zeros((), dtype=DTYPE), q.clone(), t.clone(), q.clone(), t.clone(), **kw)

    @classmethod
    def initialise(cls, pose: SE3Pose, rng: np.random.Generator, sigma_rot: float = 1e-3, sigma_trans: float = 1e-3,
                   per_channel: bool = False, **kw) -> "ExposureParams":
        """Control poses = ``pose`` perturbed by small zero-mean Gaussian twists."""
        ends = []
        for _ in range(2):
            xi = Twist(rng.normal(0.0, sigma_rot, 3), rng.normal(0.0, sigma_trans, 3))
            ends.append(B.pose_to_tensors(se3_exp(xi) @ pose))
        bias = torch.zeros(3 if per_channel else (), dtype=DTYPE)
        return cls(torch.zeros((), dtype=DTYPE), bias, ends[0][0], ends[0][1], ends[1][0], ends[1][1], **kw)

    @property
    def T_s(self) -> SE3Pose:
        return B.tensors_to_pose(self.start_q, self.start_t)

    @property
    def T_e(self) -> SE3Pose:
        return B.tensors_to_pose(self.end_q, self.end_t)

    def params(self) -> dict:
        return {"gain_log": self.gain_log, "bias": self.bias, "start_q": self.start_q, "start_t": self.start_t,
                "end_q": self.end_q, "end_t": self.end_t}

    def clone(self) -> "ExposureParams":
        p = {k: v.detach().clone() for k, v in self.params().items()}
        return ExposureParams(**p, rot_step=self.rot_step, trans_step=self.trans_step, max_samples=self.max_samples)

    def relative(self):
        """``T_s^-1 T_e`` as differentiable tensors."""
        qi, ti = B.inverse(B.quat_normalize(self.start_q), self.start_t)
        return B.compose(qi, ti, B.quat_normalize(self.end_q), self.end_t)


def sample_count(T_s: SE3Pose, T_e: SE3Pose, rot_step: float, trans_step: float, max_samples: int) -> int:
    """Number of exposure sub-intervals |S| from the relative motion magnitude."""
    if rot_step <= 0 or trans_step <= 0:
        raise ValueError("step sizes must be positive")
    rel = T_s.inverse() @ T_e
    angle = np.linalg.norm(se3_log(rel).rotational)
    dist = float(np.linalg.norm(rel.translation))
    n = max(math.ceil(angle / rot_step - 1e-12), math.ceil(dist / trans_step - 1e-12))
    return int(min(max(n, 1), max_samples))


def sample_poses(exposure: ExposureParams, pose_q, pose_t, n: int | None = None):
    """Differentiable camera poses ``Delta T(k) @ T`` for k = 0..|S|."""
    if n is None:
        n = sample_count(exposure.T_s, exposure.T_e, exposure.rot_step, exposure.trans_step, exposure.max_samples)
    rq, rt = exposure.relative()
    omega, v = B.se3_log(rq, rt)
    out = []
    for k in range(n + 1):
        dq, dt = B.se3_exp(omega * (k / n), v * (k / n))
        out.append(B.compose(dq, dt, pose_q, pose_t))
    return out


def integrate_and_render(scene: GaussianScene, graph: ScaffoldGraph | None, t: int, T, exposure: ExposureParams,
                         camera: PinholeCamera, static_only: bool = False, use_aow: bool = True,
                         n_samples: int | None = None, apply_exposure: bool = True) -> RenderOutput:
    """Blurred, exposure-adjusted render of the scene at keyframe ``t`` and pose ``T``.

    ``T`` is an :class:`SE3Pose` or a differentiable ``(q, t)`` pair. Color is
    ``clamp(exp(a) * mean_k I_k + b, 0, 1)``; depth and alpha are plain sample
    means. Setting ``n_samples=1`` with ``T_s == T_e`` reproduces a single render.
    """
    pq, pt = T if isinstance(T, tuple) else B.pose_to_tensors(T)
    gaussians = deform_scene(scene, graph, t, use_aow=use_aow, static_only=static_only)
    poses = sample_poses(exposure, pq, pt, n_samples)
    color = depth = alpha = None
    for q, tr in poses:
        out = render(gaussians, camera, (q, tr), scene.background)
        color = out.color if color is None else color + out.color
        depth = out.depth if depth is None else depth + out.depth
        alpha = out.alpha if alpha is None else alpha + out.alpha
    m = float(len(poses))
    color, depth, alpha = color / m, depth / m, alpha / m
    if apply_exposure:
        color = torch.exp(exposure.gain_log) * color + exposure.bias
        color = torch.clamp(color, 0.0, 1.0)
    return RenderOutput(color, depth, alpha)
