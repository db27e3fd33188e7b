"""Batched, differentiable torch counterparts of :mod:`dynsplat.se3`.

Poses are carried as a pair ``(q, t)`` of tensors with shapes ``(..., 4)`` and
``(..., 3)``. Every function has finite gradients at the identity, which is
where the optimisers start most pose perturbations.
"""

from __future__ import annotations

import numpy as np
import torch

from .se3 import SE3Pose

_SMALL2 = 1e-12  # squared small-angle threshold (angle 1e-6)


def quat_mul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    aw, ax, ay, az = a.unbind(-1)
    bw, bx, by, bz = b.unbind(-1)
    return torch.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        dim=-1,
    )


def quat_conj(q: torch.Tensor) -> torch.Tensor:
    return q * q.new_tensor([1.0, -1.0, -1.0, -1.0])


def quat_normalize(q: torch.Tensor) -> torch.Tensor:
    return q / q.norm(dim=-1, keepdim=True)


def quat_to_rotmat(q: torch.Tensor) -> torch.Tensor:
    w, x, y, z = quat_normalize(q).unbind(-1)
    return torch.stack(
        [
            1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w),
            2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w),
            2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y),
        ],
        dim=-1,
    ).reshape(q.shape[:-1] + (3, 3))


def quat_rotate(q: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    return (quat_to_rotmat(q) @ v.unsqueeze(-1)).squeeze(-1)


def compose(qa, ta, qb, tb):
    """``A @ B`` for batched poses."""
    return quat_mul(qa, qb), quat_rotate(qa, tb) + ta


def inverse(q, t):
    qi = quat_conj(q)
    return qi, -quat_rotate(qi, t)


def _cross_mat_apply(omega: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    return torch.cross(omega, v, dim=-1)


def se3_exp(omega: torch.Tensor, v: torch.Tensor):
    th2 = (omega * omega).sum(-1, keepdim=True)
    small = th2 < _SMALL2
    th2s = torch.where(small, torch.ones_like(th2), th2)
    th = th2s.sqrt()
    half_cos = torch.where(small, 1.0 - th2 / 8.0, torch.cos(0.5 * th))
    half_sinc = torch.where(small, 0.5 - th2 / 48.0, torch.sin(0.5 * th) / th)
    B = torch.where(small, 0.5 - th2 / 24.0, (1.0 - torch.cos(th)) / th2s)
    C = torch.where(small, 1.0 / 6.0 - th2 / 120.0, (th - torch.sin(th)) / (th2s * th))
    q = torch.cat([half_cos, half_sinc * omega], dim=-1)
    wxv = _cross_mat_apply(omega, v)
    t = v + B * wxv + C * _cross_mat_apply(omega, wxv)
    return q, t


def se3_log(q: torch.Tensor, t: torch.Tensor):
    sign = torch.where(q[..., :1] < 0, -torch.ones_like(q[..., :1]), torch.ones_like(q[..., :1]))
    q = q * sign
    w = q[..., :1]
    qv = q[..., 1:]
    vn2 = (qv * qv).sum(-1, keepdim=True)
    x2 = vn2 / (w * w)
    small = x2 < 1e-8
    vn = torch.where(small, torch.ones_like(vn2), vn2).sqrt()
    # 2 * atan2(|qv|, w) / |qv|, smooth at |qv| = 0
    ratio = torch.where(small, 2.0 / w * (1.0 - x2 / 3.0 + x2 * x2 / 5.0), 2.0 * torch.atan2(vn, w) / vn)
    omega = ratio * qv
    th2 = (omega * omega).sum(-1, keepdim=True)
    small_t = th2 < 1e-8
    th2s = torch.where(small_t, torch.ones_like(th2), th2)
    th = th2s.sqrt()
    A = torch.sin(th) / th
    B = (1.0 - torch.cos(th)) / th2s
    coef = torch.where(small_t, 1.0 / 12.0 + th2 / 720.0, (1.0 - A / (2.0 * B)) / th2s)
    wxt = _cross_mat_apply(omega, t)
    v = t - 0.5 * wxt + coef * _cross_mat_apply(omega, wxt)
    return omega, v


def dq_from_pose(q: torch.Tensor, t: torch.Tensor):
    tq = torch.cat([torch.zeros_like(t[..., :1]), t], dim=-1)
    return q, 0.5 * quat_mul(tq, q)


def dq_to_pose(real: torch.Tensor, dual: torch.Tensor):
    t = 2.0 * quat_mul(dual, quat_conj(real))
    return real, t[..., 1:]


def dqb(weights: torch.Tensor, q: torch.Tensor, t: torch.Tensor):
    """Dual-quaternion blend over the second-to-last axis.

    weights ``(..., K)``, q ``(..., K, 4)``, t ``(..., K, 3)``. Weights are
    normalised here; operands are flipped onto the hemisphere of operand 0.
    """
    w = weights / weights.sum(-1, keepdim=True)
    real, dual = dq_from_pose(q, t)
    dots = (real * real[..., :1, :]).sum(-1, keepdim=True)
    s = torch.where(dots < 0, -torch.ones_like(dots), torch.ones_like(dots))
    w = w.unsqueeze(-1) * s
    br = (w * real).sum(-2)
    bd = (w * dual).sum(-2)
    n = br.norm(dim=-1, keepdim=True)
    br, bd = br / n, bd / n
    bd = bd - (br * bd).sum(-1, keepdim=True) * br
    return dq_to_pose(br, bd)


def pose_to_tensors(pose: SE3Pose, dtype=torch.float64):
    return torch.tensor(pose.rotation, dtype=dtype), torch.tensor(pose.translation, dtype=dtype)


def tensors_to_pose(q: torch.Tensor, t: torch.Tensor) -> SE3Pose:
    return SE3Pose(q.detach().cpu().numpy().astype(float), t.detach().cpu().numpy().astype(float))


def poses_to_arrays(poses) -> tuple[np.ndarray, np.ndarray]:
    return np.stack([p.rotation for p in poses]), np.stack([p.translation for p in poses])
