"""
Uncertainty-aware dense bundle adjustment.

Keyframe poses (camera-to-world) and inverse depths on a strided pixel grid
are refined jointly against flow correspondences. Each reprojection residual
component is weighted by ``1 / (Sigma * beta^2)``, so pixels with a large
predicted uncertainty ``beta^2`` lose influence. The depth prior on each grid
pixel is down-weighted by the same ``beta^2``, which keeps the whole cost
homogeneous in ``beta^2`` (uniform ``beta^2`` leaves the minimiser unchanged).

The solver is Levenberg-Marquardt with multiplicative (``diag(H)``) damping;
inverse depths are eliminated with the Schur complement since every depth
only couples to poses.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol

import numpy as np

from .errors import BehindCamera, SingularSystem, ValidationError
from .rasterizer import PinholeCamera
from .se3 import SE3Pose, Twist, se3_exp

log = logging.getLogger(__name__)


@dataclass
class Keyframe:
    pose: SE3Pose
    image: np.ndarray  # (H, W, 3)
    depth: np.ndarray  # (H, W), 0 where invalid
    time: int  # keyframe index
    frame_id: int = 0
    timestamp: float = 0.0
    stride: int = 4
    inv_depth: np.ndarray | None = None  # grid of inverse depths

    def __post_init__(self):
        if self.inv_depth is None:
            d = self.depth[self.grid_v[:, None], self.grid_u[None, :]]
            self.inv_depth = np.where(d > 0, 1.0 / np.where(d > 0, d, 1.0), 0.0)

    @property
    def grid_u(self) -> np.ndarray:
        return np.arange(self.stride // 2, self.depth.shape[1], self.stride)

    @property
    def grid_v(self) -> np.ndarray:
        return np.arange(self.stride // 2, self.depth.shape[0], self.stride)

    def grid_pixels(self) -> np.ndarray:
        """(M, 2) pixel coordinates (u, v) of the inverse-depth grid, row-major."""
        v, u = np.meshgrid(self.grid_v, self.grid_u, indexing="ij")
        return np.stack([u.ravel(), v.ravel()], -1).astype(float)


@dataclass
class FlowCorrespondence:
    source: int
    target: int
    index: np.ndarray  # (M,) indices into the source grid
    predicted: np.ndarray  # (M, 2) predicted target pixel locations
    confidence: np.ndarray  # (M, 2) positive variances (pixels^2)

    def __post_init__(self):
        if np.any(self.confidence <= 0):
            raise ValidationError("flow variances must be positive")


class CorrespondenceProvider(Protocol):
    def correspondences(self, source: Keyframe, target: Keyframe) -> FlowCorrespondence:
        """Flow for the grid pixels of ``source`` that land inside ``target``."""


def warp(p_i, relative_pose: SE3Pose, depth: float, camera: PinholeCamera) -> np.ndarray:
    """Pixel in keyframe ``i`` at ``depth`` mapped through ``T_j^-1 T_i`` into keyframe ``j``."""
    if depth <= 0:
        raise ValueError("depth must be positive")
    X = camera.backproject(np.asarray(p_i, dtype=float), np.asarray(depth, dtype=float))
    Xj = relative_pose.act(X)
    if Xj[2] <= camera.near:
        raise BehindCamera(f"warped depth {Xj[2]:.4f} behind the near plane")
    return camera.project(Xj)


def edge_set(n: int, radius: int = 3) -> list[tuple[int, int]]:
    """Both directions of every keyframe pair at most ``radius`` apart."""
    out = []
    for i in range(n):
        for j in range(n):
            if i != j and abs(i - j) <= radius:
                out.append((i, j))
    return out


@dataclass
class DBAConfig:
    max_iters: int = 50
    tol: float = 1e-6
    lambda_init: float = 1e-4
    depth_prior_weight: float = 1e3
    min_inv_depth: float = 1e-3
    anchor: int = 0


@dataclass
class DBAResult:
    poses: list
    inv_depths: list
    cost: float
    iterations: int
    history: list = field(default_factory=list)


def _assemble(keyframes, corrs, beta2, camera, poses, inv, prior, prior_w, compute_jac=True):
    """Residuals, weights and Jacobians for every correspondence; returns a dict of flat arrays."""
    fx, fy, cx, cy = camera.fx, camera.fy, camera.cx, camera.cy
    res, wts, Ji, Jj, Jd, src, tgt, didx = [], [], [], [], [], [], [], []
    offsets = np.cumsum([0] + [kf.inv_depth.size for kf in keyframes])
    for c in corrs:
        i, j = c.source, c.target
        kf = keyframes[i]
        pix = kf.grid_pixels()[c.index]
        rho = inv[i].ravel()[c.index]
        ray = np.stack([(pix[:, 0] - cx) / fx, (pix[:, 1] - cy) / fy, np.ones(len(pix))], -1)
        Xi = ray / rho[:, None]
        Ri, ti = poses[i].R, poses[i].translation
        Rj, tj = poses[j].R, poses[j].translation
        Xw = Xi @ Ri.T + ti
        Xj = (Xw - tj) @ Rj
        Z = Xj[:, 2]
        ok = Z > camera.near
        Zs = np.where(ok, Z, 1.0)
        proj = np.stack([fx * Xj[:, 0] / Zs + cx, fy * Xj[:, 1] / Zs + cy], -1)
        r = c.predicted - proj
        b2 = np.ones(len(pix)) if beta2 is None else beta2[i][pix[:, 1].astype(int), pix[:, 0].astype(int)]
        w = ok[:, None] / (c.confidence * b2[:, None])
        res.append(np.where(ok[:, None], r, 0.0))
        wts.append(w)
        src.append(np.full(len(pix), i))
        tgt.append(np.full(len(pix), j))
        didx.append(offsets[i] + c.index)
        if compute_jac:
            Jp = np.zeros((len(pix), 2, 3))
            Jp[:, 0, 0] = fx / Zs
            Jp[:, 0, 2] = -fx * Xj[:, 0] / Zs**2
            Jp[:, 1, 1] = fy / Zs
            Jp[:, 1, 2] = -fy * Xj[:, 1] / Zs**2
            # d Xw / d(omega, v) for a left perturbation: [-[Xw]x | I]
            dXw = np.zeros((len(pix), 3, 6))
            dXw[:, 0, 1], dXw[:, 0, 2] = Xw[:, 2], -Xw[:, 1]  # -[Xw]x
            dXw[:, 1, 0], dXw[:, 1, 2] = -Xw[:, 2], Xw[:, 0]
            dXw[:, 2, 0], dXw[:, 2, 1] = Xw[:, 1], -Xw[:, 0]
            dXw[:, :, 3:] = np.eye(3)
            dXj_i = np.einsum("ab,nbc->nac", Rj.T, dXw)
            # residual = predicted - proj, hence the sign flip
            Ji.append(-np.einsum("nab,nbc->nac", Jp, dXj_i))
            Jj.append(np.einsum("nab,nbc->nac", Jp, dXj_i))
            dXi = -ray / rho[:, None] ** 2
            dXj_d = dXi @ (Rj.T @ Ri).T
            Jd.append(-np.einsum("nab,nb->na", Jp, dXj_d))
    out = {
        "r": np.concatenate(res) if res else np.zeros((0, 2)),
        "w": np.concatenate(wts) if wts else np.zeros((0, 2)),
        "src": np.concatenate(src).astype(int) if src else np.zeros(0, int),
        "tgt": np.concatenate(tgt).astype(int) if tgt else np.zeros(0, int),
        "didx": np.concatenate(didx).astype(int) if didx else np.zeros(0, int),
    }
    if compute_jac:
        out["Ji"] = np.concatenate(Ji) if Ji else np.zeros((0, 2, 6))
        out["Jj"] = np.concatenate(Jj) if Jj else np.zeros((0, 2, 6))
        out["Jd"] = np.concatenate(Jd) if Jd else np.zeros((0, 2))
    # depth prior: rho - 1/D~, weighted like the pixel it belongs to
    rho_all = np.concatenate([x.ravel() for x in inv])
    pr_valid = prior > 0
    pw = np.zeros_like(rho_all)
    for i, kf in enumerate(keyframes):
        b2 = np.ones(kf.inv_depth.size) if beta2 is None else beta2[i][np.ix_(kf.grid_v, kf.grid_u)].ravel()
        pw[offsets[i]:offsets[i + 1]] = prior_w / b2
    out["prior_r"] = np.where(pr_valid, prior - rho_all, 0.0)
    out["prior_w"] = np.where(pr_valid, pw, 0.0)
    return out


def weighted_cost(sys: dict) -> float:
    return float(np.sum(sys["w"] * sys["r"] ** 2) + np.sum(sys["prior_w"] * sys["prior_r"] ** 2))


def _build(sys: dict, n_kf: int, n_depth: int):
    P = 6 * n_kf
    Hpd = np.zeros((P, n_depth))
    w, r = sys["w"], sys["r"]
    Ji, Jj, Jd = sys["Ji"], sys["Jj"], sys["Jd"]
    src, tgt, didx = sys["src"], sys["tgt"], sys["didx"]
    n = len(r)
    # stacked pose Jacobian per residual row-pair: columns of source and target blocks
    Jfull = np.zeros((n, 2, P))
    rows = np.arange(n)
    for k in range(6):
        Jfull[rows, :, 6 * src + k] += Ji[:, :, k]
        Jfull[rows, :, 6 * tgt + k] += Jj[:, :, k]
    WJ = Jfull * w[:, :, None]
    Hpp = np.einsum("nki,nkj->ij", WJ, Jfull)
    gp = -np.einsum("nki,nk->i", WJ, r)
    cross = np.einsum("nki,nk->ni", WJ, Jd)  # (n, P)
    np.add.at(Hpd.T, didx, cross)
    hdd = np.zeros(n_depth)
    np.add.at(hdd, didx, np.sum(w * Jd * Jd, -1))
    gd = np.zeros(n_depth)
    np.add.at(gd, didx, -np.sum(w * Jd * r, -1))
    # depth prior residual prior - rho has Jacobian -1
    hdd += sys["prior_w"]
    gd += sys["prior_w"] * sys["prior_r"]
    return Hpp, Hpd, hdd, gp, gd


def solve_step(Hpp, Hpd, hdd, gp, gd, lam: float, anchor: int):
    """Damped Schur-complement solve; returns (pose update (n_kf, 6), depth update)."""
    P = Hpp.shape[0]
    keep = np.ones(P, dtype=bool)
    keep[6 * anchor:6 * anchor + 6] = False
    A = Hpp[np.ix_(keep, keep)].copy()
    A[np.diag_indices_from(A)] *= 1.0 + lam
    C = Hpd[keep]
    dd = hdd * (1.0 + lam)
    active = dd > 0
    dinv = np.where(active, 1.0 / np.where(active, dd, 1.0), 0.0)
    S = A - (C * dinv) @ C.T
    rhs = gp[keep] - C @ (dinv * gd)
    # tiny diagonal floor for parameters no residual touches
    diag = np.diag(S).copy()
    S[np.diag_indices_from(S)] += np.where(diag <= 0, 1e-12, 0.0)
    try:
        L = np.linalg.cholesky(S)
    except np.linalg.LinAlgError as e:
        raise SingularSystem("reduced camera system is not positive definite") from e
    dp = np.linalg.solve(L.T, np.linalg.solve(L, rhs))
    dd_upd = dinv * (gd - C.T @ dp)
    full = np.zeros(P)
    full[keep] = dp
    return full.reshape(-1, 6), dd_upd


def dba_solve(keyframes: list[Keyframe], correspondences: list[FlowCorrespondence], uncertainty=None,
              config: DBAConfig | None = None, camera: PinholeCamera | None = None) -> DBAResult:
    """Jointly refine keyframe poses and grid inverse depths.

    ``uncertainty`` is ``None`` (no weighting) or a list of (H, W) ``beta^2``
    maps, one per keyframe. Keyframe ``config.anchor`` is held fixed.
    """
    cfg = config or DBAConfig()
    if len(keyframes) < 2:
        raise ValidationError("need at least two keyframes")
    if not correspondences:
        raise ValidationError("empty edge set")
    if camera is None:
        raise ValidationError("camera required")
    poses = [kf.pose for kf in keyframes]
    inv = [kf.inv_depth.copy() for kf in keyframes]
    prior = np.concatenate([
        np.where(kf.depth[np.ix_(kf.grid_v, kf.grid_u)] > 0, 1.0 / np.maximum(kf.depth[np.ix_(kf.grid_v, kf.grid_u)], 1e-9), 0.0).ravel()
        for kf in keyframes
    ])
    n_depth = sum(x.size for x in inv)
    n_kf = len(keyframes)
    lam = cfg.lambda_init
    sys = _assemble(keyframes, correspondences, uncertainty, camera, poses, inv, prior, cfg.depth_prior_weight)
    cost = weighted_cost(sys)
    history = [cost]
    it = 0
    for it in range(1, cfg.max_iters + 1):
        Hpp, Hpd, hdd, gp, gd = _build(sys, n_kf, n_depth)
        accepted = False
        while not accepted:
            try:
                dxi, drho = solve_step(Hpp, Hpd, hdd, gp, gd, lam, cfg.anchor)
            except SingularSystem:
                lam *= 10.0
                if lam > 1e12:
                    raise
                continue
            new_poses = [se3_exp(Twist.from_vector(dxi[k])) @ poses[k] for k in range(n_kf)]
            flat = np.concatenate([x.ravel() for x in inv]) + drho
            flat = np.maximum(flat, cfg.min_inv_depth)
            new_inv, o = [], 0
            for x in inv:
                new_inv.append(flat[o:o + x.size].reshape(x.shape))
                o += x.size
            new_sys = _assemble(keyframes, correspondences, uncertainty, camera, new_poses, new_inv, prior,
                                cfg.depth_prior_weight)
            new_cost = weighted_cost(new_sys)
            if new_cost <= cost:
                accepted = True
                poses, inv, sys, cost = new_poses, new_inv, new_sys, new_cost
                lam = max(lam / 10.0, 1e-12)
            else:
                lam *= 10.0
                if lam > 1e12:
                    break
        history.append(cost)
        step = float(np.max(np.abs(dxi))) if accepted else 0.0
        if not accepted or step < cfg.tol:
            break
    log.debug("dba: %d iterations, cost %.6g", it, cost)
    return DBAResult(poses, inv, cost, it, history)


def select_keyframe(mean_flow: float, overlap: float, flow_thresh: float = 8.0, overlap_thresh: float = 0.85) -> bool:
    return mean_flow > flow_thresh or overlap < overlap_thresh


def save_tum_trajectory(path, timestamps, poses) -> None:
    """``timestamp tx ty tz qx qy qz qw`` per line with 9 significant digits."""
    lines = []
    for ts, p in zip(timestamps, poses):
        w, x, y, z = p.rotation
        vals = [ts, *p.translation, x, y, z, w]
        lines.append(" ".join(f"{v:.9g}" for v in vals))
    Path(path).write_text("\n".join(lines) + "\n")
