"""
CPU Gaussian splatting renderer.

Rendering is split in two stages:

1. projection (torch, autograd): world-space Gaussians and the camera pose
   are turned into screen-space means, conics (inverse 2D covariances) and
   camera depths using the EWA linearisation of the perspective projection;
2. compositing (numba kernels): depth-sorted front-to-back alpha blending of
   color and depth, with a hand-written backward pass. The kernel is exposed
   to torch as an autograd ``Function`` so gradients flow through both stages.

The compositing stage runs over 16x16 pixel tiles. Each tile only visits the
Gaussians whose cutoff bounding box touches it; a Gaussian contributes to a
pixel only inside its cutoff ellipse, so the tiled path is an exact
restriction of the untiled reference path and reproduces it bit for bit.
The cutoff sits at 6 sigma, where the truncated alpha is ~1.5e-8 of the
peak, so the truncation is invisible to finite-difference gradient checks.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numba

numba.config.THREADING_LAYER = "workqueue"
import numpy as np
import torch

from . import batched as B
from .errors import MissingForwardCache
from .se3 import SE3Pose

DTYPE = torch.float64
TILE = 16
ALPHA_MAX = 0.99
T_MIN = 1e-4
CUTOFF = 36.0  # squared Mahalanobis radius (6 sigma)
DET_MIN = 1e-12


@dataclass(frozen=True)
class PinholeCamera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    near: float = 0.05
    far: float = 100.0

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 < self.near < self.far):
            raise ValueError("need 0 < near < far")

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def project(self, p_cam: np.ndarray) -> np.ndarray:
        p_cam = np.asarray(p_cam, dtype=float)
        z = p_cam[..., 2]
        return np.stack([self.fx * p_cam[..., 0] / z + self.cx, self.fy * p_cam[..., 1] / z + self.cy], -1)

    def backproject(self, uv: np.ndarray, depth: np.ndarray) -> np.ndarray:
        uv = np.asarray(uv, dtype=float)
        depth = np.asarray(depth, dtype=float)
        x = (uv[..., 0] - self.cx) / self.fx * depth
        y = (uv[..., 1] - self.cy) / self.fy * depth
        return np.stack([x, y, depth], -1)

    def pixel_grid(self) -> np.ndarray:
        """(H, W, 2) array of pixel-centre coordinates (u, v)."""
        v, u = np.meshgrid(np.arange(self.height, dtype=float), np.arange(self.width, dtype=float), indexing="ij")
        return np.stack([u, v], -1)


@dataclass
class GaussianBatch:
    """Posed Gaussians ready for rendering; opacity is a probability in (0, 1)."""

    means: torch.Tensor  # (N, 3)
    quats: torch.Tensor  # (N, 4) w, x, y, z (normalised on use)
    log_scales: torch.Tensor  # (N, 3)
    opacity: torch.Tensor  # (N,)
    colors: torch.Tensor  # (N, 3)

    def __len__(self) -> int:
        return self.means.shape[0]

    @classmethod
    def empty(cls) -> "GaussianBatch":
        z = torch.zeros
        return cls(z(0, 3, dtype=DTYPE), z(0, 4, dtype=DTYPE), z(0, 3, dtype=DTYPE), z(0, dtype=DTYPE), z(0, 3, dtype=DTYPE))

    @classmethod
    def cat(cls, batches) -> "GaussianBatch":
        batches = list(batches)
        return cls(*(torch.cat([getattr(b, f) for b in batches], 0) for f in ("means", "quats", "log_scales", "opacity", "colors")))

    def fields(self):
        return {f: getattr(self, f) for f in ("means", "quats", "log_scales", "opacity", "colors")}


@dataclass
class RenderOutput:
    color: torch.Tensor  # (H, W, 3)
    depth: torch.Tensor  # (H, W)
    alpha: torch.Tensor  # (H, W)
    cache: Optional[dict] = field(default=None, repr=False)


# --------------------------------------------------------------------------
# compositing kernels
# --------------------------------------------------------------------------


@numba.njit(cache=True)
def _composite_pixel(px, py, ids, start, stop, mean2d, conic, opac, col, dep, bg, out_c, out_d, out_a, out_t, out_n, pix):
    T = 1.0
    c0 = 0.0
    c1 = 0.0
    c2 = 0.0
    d = 0.0
    last = start
    for e in range(start, stop):
        g = ids[e]
        dx = px - mean2d[g, 0]
        dy = py - mean2d[g, 1]
        power = conic[g, 0] * dx * dx + 2.0 * conic[g, 1] * dx * dy + conic[g, 2] * dy * dy
        if power > CUTOFF:
            continue
        alpha = opac[g] * np.exp(-0.5 * power)
        if alpha > ALPHA_MAX:
            alpha = ALPHA_MAX
        test_t = T * (1.0 - alpha)
        if test_t < T_MIN:
            break
        w = alpha * T
        c0 += col[g, 0] * w
        c1 += col[g, 1] * w
        c2 += col[g, 2] * w
        d += dep[g] * w
        T = test_t
        last = e + 1
    out_c[pix, 0] = c0 + T * bg[0]
    out_c[pix, 1] = c1 + T * bg[1]
    out_c[pix, 2] = c2 + T * bg[2]
    out_d[pix] = d
    out_a[pix] = 1.0 - T
    out_t[pix] = T
    out_n[pix] = last


@numba.njit(cache=True, parallel=True)
def _forward_tiles(width, height, tile_ptr, ids, n_tx, mean2d, conic, opac, col, dep, bg):
    npix = width * height
    out_c = np.zeros((npix, 3))
    out_d = np.zeros(npix)
    out_a = np.zeros(npix)
    out_t = np.ones(npix)
    out_n = np.zeros(npix, dtype=np.int64)
    n_tiles = tile_ptr.shape[0] - 1
    for tile in numba.prange(n_tiles):
        ty = tile // n_tx
        tx = tile - ty * n_tx
        for y in range(ty * TILE, min((ty + 1) * TILE, height)):
            for x in range(tx * TILE, min((tx + 1) * TILE, width)):
                pix = y * width + x
                _composite_pixel(float(x), float(y), ids, tile_ptr[tile], tile_ptr[tile + 1], mean2d, conic, opac, col, dep, bg,
                                 out_c, out_d, out_a, out_t, out_n, pix)
    return out_c, out_d, out_a, out_t, out_n


@numba.njit(cache=True)
def _forward_reference(width, height, ids, mean2d, conic, opac, col, dep, bg):
    npix = width * height
    out_c = np.zeros((npix, 3))
    out_d = np.zeros(npix)
    out_a = np.zeros(npix)
    out_t = np.ones(npix)
    out_n = np.zeros(npix, dtype=np.int64)
    for y in range(height):
        for x in range(width):
            _composite_pixel(float(x), float(y), ids, 0, ids.shape[0], mean2d, conic, opac, col, dep, bg,
                             out_c, out_d, out_a, out_t, out_n, y * width + x)
    return out_c, out_d, out_a, out_t, out_n


@numba.njit(cache=True)
def _backward_pixel(px, py, ids, start, last, mean2d, conic, opac, col, dep, bg, t_final, gc0, gc1, gc2, gd, ga, entry_grad):
    # entry_grad columns: mean x, mean y, conic a, b, c, opacity, color r, g, b, depth
    T = t_final
    acc0 = t_final * bg[0]
    acc1 = t_final * bg[1]
    acc2 = t_final * bg[2]
    accd = 0.0
    for e in range(last - 1, start - 1, -1):
        g = ids[e]
        dx = px - mean2d[g, 0]
        dy = py - mean2d[g, 1]
        power = conic[g, 0] * dx * dx + 2.0 * conic[g, 1] * dx * dy + conic[g, 2] * dy * dy
        if power > CUTOFF:
            continue
        gauss = np.exp(-0.5 * power)
        raw = opac[g] * gauss
        alpha = raw if raw <= ALPHA_MAX else ALPHA_MAX
        one_m = 1.0 - alpha
        T = T / one_m
        w = alpha * T
        entry_grad[e, 6] += w * gc0
        entry_grad[e, 7] += w * gc1
        entry_grad[e, 8] += w * gc2
        entry_grad[e, 9] += w * gd
        g_alpha = (gc0 * (col[g, 0] * T - acc0 / one_m) + gc1 * (col[g, 1] * T - acc1 / one_m)
                   + gc2 * (col[g, 2] * T - acc2 / one_m) + gd * (dep[g] * T - accd / one_m) + ga * t_final / one_m)
        acc0 += col[g, 0] * w
        acc1 += col[g, 1] * w
        acc2 += col[g, 2] * w
        accd += dep[g] * w
        if raw > ALPHA_MAX:
            continue
        entry_grad[e, 5] += g_alpha * gauss
        g_power = -0.5 * alpha * g_alpha
        entry_grad[e, 0] += -g_power * (2.0 * conic[g, 0] * dx + 2.0 * conic[g, 1] * dy)
        entry_grad[e, 1] += -g_power * (2.0 * conic[g, 1] * dx + 2.0 * conic[g, 2] * dy)
        entry_grad[e, 2] += g_power * dx * dx
        entry_grad[e, 3] += g_power * 2.0 * dx * dy
        entry_grad[e, 4] += g_power * dy * dy


@numba.njit(cache=True, parallel=True)
def _backward_tiles(width, height, tile_ptr, ids, n_tx, mean2d, conic, opac, col, dep, bg, out_t, out_n, grad_c, grad_d, grad_a):
    entry_grad = np.zeros((ids.shape[0], 10))
    n_tiles = tile_ptr.shape[0] - 1
    for tile in numba.prange(n_tiles):
        ty = tile // n_tx
        tx = tile - ty * n_tx
        for y in range(ty * TILE, min((ty + 1) * TILE, height)):
            for x in range(tx * TILE, min((tx + 1) * TILE, width)):
                pix = y * width + x
                _backward_pixel(float(x), float(y), ids, tile_ptr[tile], out_n[pix], mean2d, conic, opac, col, dep, bg,
                                out_t[pix], grad_c[pix, 0], grad_c[pix, 1], grad_c[pix, 2], grad_d[pix], grad_a[pix], entry_grad)
    return entry_grad


@numba.njit(cache=True)
def _reduce_entries(ids, entry_grad, n):
    out = np.zeros((n, 10))
    for e in range(ids.shape[0]):
        g = ids[e]
        for k in range(10):
            out[g, k] += entry_grad[e, k]
    return out


def _tile_plan(mean2d: np.ndarray, radius: np.ndarray, order: np.ndarray, width: int, height: int):
    """CSR lists of depth-sorted Gaussian ids per tile."""
    n_tx = (width + TILE - 1) // TILE
    n_ty = (height + TILE - 1) // TILE
    if len(order) == 0:
        return np.zeros(n_tx * n_ty + 1, dtype=np.int64), np.zeros(0, dtype=np.int64), n_tx
    m = mean2d[order]
    r = np.ceil(radius[order]) + 1.0
    x0 = np.clip(np.floor((m[:, 0] - r) / TILE), 0, n_tx).astype(np.int64)
    x1 = np.clip(np.floor((m[:, 0] + r) / TILE) + 1, 0, n_tx).astype(np.int64)
    y0 = np.clip(np.floor((m[:, 1] - r) / TILE), 0, n_ty).astype(np.int64)
    y1 = np.clip(np.floor((m[:, 1] + r) / TILE) + 1, 0, n_ty).astype(np.int64)
    nx = np.maximum(x1 - x0, 0)
    ny = np.maximum(y1 - y0, 0)
    counts = nx * ny
    total = int(counts.sum())
    if total == 0:
        return np.zeros(n_tx * n_ty + 1, dtype=np.int64), np.zeros(0, dtype=np.int64), n_tx
    ranks = np.repeat(np.arange(len(order), dtype=np.int64), counts)
    starts = np.cumsum(counts) - counts
    off = np.arange(total, dtype=np.int64) - starts[ranks]
    tiles = (y0[ranks] + off // nx[ranks]) * n_tx + x0[ranks] + off % nx[ranks]
    key = np.lexsort((ranks, tiles))
    tiles, ranks = tiles[key], ranks[key]
    counts = np.bincount(tiles, minlength=n_tx * n_ty)
    ptr = np.zeros(n_tx * n_ty + 1, dtype=np.int64)
    ptr[1:] = np.cumsum(counts)
    return ptr, order[ranks].astype(np.int64), n_tx


class _Composite(torch.autograd.Function):
    @staticmethod
    def forward(ctx, mean2d, conic, opac, col, dep, bg, plan):
        arrays = [x.detach().cpu().numpy().astype(np.float64) for x in (mean2d, conic, opac, col, dep, bg)]
        ptr, ids, n_tx, width, height = plan
        oc, od, oa, ot, on = _forward_tiles(width, height, ptr, ids, n_tx, *arrays)
        ctx.plan = plan
        ctx.arrays = arrays
        ctx.t_final = ot
        ctx.n_contrib = on
        ctx.n = mean2d.shape[0]
        mk = lambda a, shape: torch.from_numpy(a.reshape(shape)).to(DTYPE)
        return mk(oc, (height, width, 3)), mk(od, (height, width)), mk(oa, (height, width))

    @staticmethod
    def backward(ctx, g_color, g_depth, g_alpha):
        ptr, ids, n_tx, width, height = ctx.plan
        gc = np.ascontiguousarray(g_color.detach().cpu().numpy().reshape(-1, 3), dtype=np.float64)
        gd = np.ascontiguousarray(g_depth.detach().cpu().numpy().reshape(-1), dtype=np.float64)
        ga = np.ascontiguousarray(g_alpha.detach().cpu().numpy().reshape(-1), dtype=np.float64)
        entry = _backward_tiles(width, height, ptr, ids, n_tx, *ctx.arrays, ctx.t_final, ctx.n_contrib, gc, gd, ga)
        per_g = torch.from_numpy(_reduce_entries(ids, entry, ctx.n)).to(DTYPE)
        # background gradient: d color / d bg = T_final
        g_bg = torch.from_numpy((gc * ctx.t_final[:, None]).sum(0)).to(DTYPE)
        return per_g[:, 0:2], per_g[:, 2:5], per_g[:, 5], per_g[:, 6:9], per_g[:, 9], g_bg, None


# --------------------------------------------------------------------------
# projection
# --------------------------------------------------------------------------


def _world_to_camera(pose_q, pose_t, twist):
    if twist is not None:
        dq, dt = B.se3_exp(twist[:3], twist[3:])
        pose_q, pose_t = B.compose(dq, dt, pose_q, pose_t)
    Rwc = B.quat_to_rotmat(pose_q)
    return Rwc, pose_t


def project(gaussians: GaussianBatch, camera: PinholeCamera, pose_q, pose_t, twist=None):
    """Screen-space quantities for the visible subset.

    Returns (keep_index, mean2d, conic, depth, radius) where keep_index selects
    the Gaussians in front of the near plane with a nondegenerate footprint.
    """
    Rwc, twc = _world_to_camera(pose_q, pose_t, twist)
    p = (gaussians.means - twc) @ Rwc  # (N, 3) camera frame
    z = p[:, 2]
    Rg = B.quat_to_rotmat(gaussians.quats)
    S2 = torch.exp(2.0 * gaussians.log_scales)
    cov_w = (Rg * S2.unsqueeze(-2)) @ Rg.transpose(-1, -2)
    Rcw = Rwc.transpose(0, 1)
    cov_c = Rcw @ cov_w @ Rwc
    zs = torch.where(z > camera.near, z, torch.ones_like(z))
    zero = torch.zeros_like(z)
    J = torch.stack(
        [
            torch.stack([camera.fx / zs, zero, -camera.fx * p[:, 0] / zs**2], -1),
            torch.stack([zero, camera.fy / zs, -camera.fy * p[:, 1] / zs**2], -1),
        ],
        -2,
    )
    cov2 = J @ cov_c @ J.transpose(-1, -2)
    a, b, c = cov2[:, 0, 0], cov2[:, 0, 1], cov2[:, 1, 1]
    det = a * c - b * b
    keep = (z > camera.near) & (z < camera.far) & (det > DET_MIN)
    idx = torch.nonzero(keep).squeeze(-1)
    a, b, c, det, zk = a[idx], b[idx], c[idx], det[idx], zs[idx]
    conic = torch.stack([c / det, -b / det, a / det], -1)
    mean2d = torch.stack([camera.fx * p[idx, 0] / zk + camera.cx, camera.fy * p[idx, 1] / zk + camera.cy], -1)
    with torch.no_grad():
        mid = 0.5 * (a + c)
        lam = mid + torch.sqrt(torch.clamp(mid * mid - det, min=0.0))
        radius = 6.0 * torch.sqrt(lam)
    return idx, mean2d, conic, zk, radius


def _sorted_order(depth: np.ndarray) -> np.ndarray:
    # increasing depth; ties broken by (visible) index, which follows input index
    return np.lexsort((np.arange(len(depth)), depth)).astype(np.int64)


def _prepare(gaussians, camera, pose, background, twist):
    pose_q, pose_t = pose if isinstance(pose, tuple) else B.pose_to_tensors(pose)
    bg = torch.as_tensor(np.asarray(background, dtype=float) if not torch.is_tensor(background) else background, dtype=DTYPE)
    idx, mean2d, conic, depth, radius = project(gaussians, camera, pose_q, pose_t, twist)
    return idx, mean2d, conic, depth, radius, bg


def render(gaussians: GaussianBatch, camera: PinholeCamera, pose, background=(0.0, 0.0, 0.0), twist=None,
           keep_cache: bool = False) -> RenderOutput:
    """Render ``gaussians`` seen from camera-to-world ``pose``.

    ``pose`` is an :class:`SE3Pose` or a differentiable ``(q, t)`` tensor pair.
    ``twist`` (6,) optionally left-perturbs the pose, ``exp(twist) @ pose``,
    which is how pose gradients are obtained. With ``keep_cache=True`` the
    inputs are re-rooted as leaves so :func:`render_backward` can be called.
    """
    cache = None
    if keep_cache:
        leaves = {k: v.detach().clone().requires_grad_(True) for k, v in gaussians.fields().items()}
        twist = torch.zeros(6, dtype=DTYPE, requires_grad=True) if twist is None else twist.detach().clone().requires_grad_(True)
        gaussians = GaussianBatch(**leaves)
        cache = {"leaves": leaves, "twist": twist}
    if len(gaussians) == 0:
        bg = torch.as_tensor(np.asarray(background, dtype=float), dtype=DTYPE)
        H, W = camera.height, camera.width
        color = bg.expand(H, W, 3).clone()
        depth = torch.zeros(H, W, dtype=DTYPE)
        alpha = torch.zeros(H, W, dtype=DTYPE)
        if cache is not None:
            color = color + 0.0 * twist.sum()
        return RenderOutput(color, depth, alpha, cache)
    idx, mean2d, conic, depth, radius, bg = _prepare(gaussians, camera, pose, background, twist)
    opac = gaussians.opacity[idx]
    col = gaussians.colors[idx]
    order = _sorted_order(depth.detach().numpy())
    ptr, ids, n_tx = _tile_plan(mean2d.detach().numpy(), radius.numpy(), order, camera.width, camera.height)
    plan = (ptr, ids, n_tx, camera.width, camera.height)
    color, dmap, alpha = _Composite.apply(mean2d, conic, opac, col, depth, bg, plan)
    return RenderOutput(color, dmap, alpha, cache)


def render_reference(gaussians: GaussianBatch, camera: PinholeCamera, pose, background=(0.0, 0.0, 0.0)) -> RenderOutput:
    """Untiled forward pass: every pixel walks the full depth-sorted list."""
    with torch.no_grad():
        if len(gaussians) == 0:
            return render(gaussians, camera, pose, background)
        idx, mean2d, conic, depth, radius, bg = _prepare(gaussians, camera, pose, background, None)
        arrays = [x.numpy().astype(np.float64) for x in (mean2d, conic, gaussians.opacity[idx], gaussians.colors[idx], depth, bg)]
        order = _sorted_order(arrays[4])
        oc, od, oa, _, _ = _forward_reference(camera.width, camera.height, order, *arrays)
    H, W = camera.height, camera.width
    return RenderOutput(torch.from_numpy(oc.reshape(H, W, 3)), torch.from_numpy(od.reshape(H, W)), torch.from_numpy(oa.reshape(H, W)))


@dataclass
class RenderGradients:
    means: torch.Tensor
    quats: torch.Tensor
    log_scales: torch.Tensor
    opacity: torch.Tensor
    colors: torch.Tensor
    pose_twist: torch.Tensor


def render_backward(output: RenderOutput, loss_gradient) -> RenderGradients:
    """Gradients of ``<loss_gradient, [color, depth]>`` w.r.t. every render input.

    ``loss_gradient`` is the (H, W, 4) adjoint of the color channels and depth.
    The pose gradient is w.r.t. the left twist ``exp(twist) @ pose`` at zero.
    """
    if output.cache is None or not output.color.requires_grad:
        raise MissingForwardCache("render(..., keep_cache=True) must precede render_backward")
    adj = torch.as_tensor(loss_gradient, dtype=DTYPE)
    leaves = output.cache["leaves"]
    names = list(leaves)
    inputs = [leaves[n] for n in names] + [output.cache["twist"]]
    grads = torch.autograd.grad(
        [output.color, output.depth],
        inputs,
        grad_outputs=[adj[..., :3], adj[..., 3]],
        retain_graph=True,
        allow_unused=True,
    )
    grads = [torch.zeros_like(x) if g is None else g for g, x in zip(grads, inputs)]
    return RenderGradients(**dict(zip(names, grads[:-1])), pose_twist=grads[-1])
