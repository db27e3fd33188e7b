"""Rendering and trajectory metrics: PSNR, SSIM, ATE."""

from __future__ import annotations

import numpy as np
import torch

from .errors import InsufficientPoses, ShapeMismatch
from .uncertainty import ssim_map

PSNR_CAP = 99.0


def _np(x) -> np.ndarray:
    return x.detach().cpu().numpy() if torch.is_tensor(x) else np.asarray(x, dtype=float)


def _check(a, b, mask):
    if a.shape != b.shape:
        raise ShapeMismatch(f"{a.shape} vs {b.shape}")
    if mask is not None and mask.shape != a.shape[:2]:
        raise ShapeMismatch(f"mask {mask.shape} vs image {a.shape[:2]}")


def psnr(rendered, reference, mask=None) -> float:
    """``10 log10(1 / MSE)`` on [0, 1] images, capped at 99 dB."""
    a, b = _np(rendered), _np(reference)
    m = None if mask is None else np.asarray(mask, dtype=bool)
    _check(a, b, m)
    err = (a - b) ** 2
    if m is not None:
        if not m.any():
            raise ShapeMismatch("empty evaluation mask")
        err = err[m]
    mse = float(err.mean())
    if mse <= 10 ** (-PSNR_CAP / 10):
        return PSNR_CAP
    return float(10.0 * np.log10(1.0 / mse))


def ssim(rendered, reference, mask=None) -> float:
    """Mean of the per-pixel SSIM map (11x11 Gaussian window), optionally masked."""
    a, b = _np(rendered), _np(reference)
    m = None if mask is None else np.asarray(mask, dtype=bool)
    _check(a, b, m)
    s = ssim_map(a, b).numpy()
    if m is not None:
        if not m.any():
            raise ShapeMismatch("empty evaluation mask")
        return float(s[m].mean())
    return float(s.mean())


def align_trajectory(est: np.ndarray, gt: np.ndarray, sim3: bool = False):
    """Least-squares ``gt ~ s R est + t`` over positions (Umeyama); ``s = 1`` unless ``sim3``."""
    mu_e, mu_g = est.mean(0), gt.mean(0)
    E, G = est - mu_e, gt - mu_g
    U, S, Vt = np.linalg.svd(G.T @ E / len(est))
    D = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        D[2, 2] = -1
    R = U @ D @ Vt
    s = float(np.trace(np.diag(S) @ D) / (E**2).sum(1).mean()) if sim3 else 1.0
    t = mu_g - s * R @ mu_e
    return s, R, t


def ate(estimated, groundtruth, sim3: bool = False) -> float:
    """RMSE of aligned translations in centimetres.

    Inputs are sequences of :class:`SE3Pose` or (N, 3) position arrays,
    already associated one-to-one.
    """
    est = np.array([p.translation for p in estimated]) if not isinstance(estimated, np.ndarray) else estimated
    gt = np.array([p.translation for p in groundtruth]) if not isinstance(groundtruth, np.ndarray) else groundtruth
    if est.shape != gt.shape:
        raise ShapeMismatch(f"{est.shape} vs {gt.shape}")
    if len(est) < 3:
        raise InsufficientPoses(f"need at least 3 poses, got {len(est)}")
    s, R, t = align_trajectory(est, gt, sim3)
    res = gt - (s * est @ R.T + t)
    return float(np.sqrt((res**2).sum(1).mean()) * 100.0)
