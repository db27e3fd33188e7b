"""
4D mapping: static-then-dynamic optimisation of the Gaussian scene.

Phase A fits the static Gaussians, the uncertainty MLP and the per-keyframe
exposure models on static-only integrate-and-render frames. The trained
uncertainty gives a motion mask per keyframe, which segmentation candidates
grow into the reweighted mask. Phase B removes static Gaussians inside that
mask, seeds dynamic Gaussians there, builds the motion scaffold from point
tracks and optimises everything (except the MLP) on full renders.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import torch
from scipy import ndimage

from . import batched as B
from .exposure import ExposureParams, integrate_and_render, sample_count
from .errors import NoTracks
from .rasterizer import DTYPE, PinholeCamera, RenderOutput, render
from .scaffold import ScaffoldGraph, TrackSet, deform_gaussians, deform_scene, init_nodes_from_tracks
from .scene import DensifyConfig, GaussianScene, GaussianSet, GradStats, bind_all, densify_and_prune, seed_from_depth
from .se3 import SE3Pose
from .uncertainty import (UncertaintyField, reweighted_mask, sample_prompts, ssim_map, threshold_mask,
                          uncertainty_loss, uncertainty_residual)

log = logging.getLogger(__name__)

ALPHA_COVERED = 0.5
FREE_SPACE_TOL = 0.05  # relative depth margin for the free-space vote
FREE_SPACE_MAX = 0.3  # largest fraction of violating views for a static seed


@dataclass
class LossConfig:
    lambda1: float = 0.2
    lambda2: float = 0.5
    lambda1_u: float = 0.5
    lambda_reg: float = 0.5
    w_velocity: float = 1.0
    w_acceleration: float = 1.0
    w_arap: float = 1.0
    w_aow: float = 0.1

    def __post_init__(self):
        for k, v in self.__dict__.items():
            if v < 0:
                raise ValueError(f"{k} must be >= 0")


# --------------------------------------------------------------------------
# optimiser
# --------------------------------------------------------------------------


@dataclass
class OptimState:
    """Adam moments keyed by parameter name, so sets can be resized in between."""

    lr: dict = field(default_factory=dict)
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    steps: dict = field(default_factory=dict)
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-15

    def step(self, params: dict) -> None:
        b1, b2 = self.betas
        with torch.no_grad():
            for name, p in params.items():
                if p.grad is None or name not in self.lr:
                    continue
                g = p.grad
                if name not in self.m or self.m[name].shape != p.shape:
                    self.m[name] = torch.zeros_like(p)
                    self.v[name] = torch.zeros_like(p)
                    self.steps[name] = 0
                self.steps[name] += 1
                k = self.steps[name]
                self.m[name].mul_(b1).add_(g, alpha=1 - b1)
                self.v[name].mul_(b2).addcmul_(g, g, value=1 - b2)
                mhat = self.m[name] / (1 - b1**k)
                vhat = self.v[name] / (1 - b2**k)
                p.sub_(self.lr[name] * mhat / (vhat.sqrt() + self.eps))

    def remap(self, prefix: str, origin: torch.Tensor) -> None:
        """Carry moments across densification; ``origin[i] = -1`` starts fresh."""
        valid = origin >= 0
        src = origin.clamp(min=0)
        for name in list(self.m):
            if not name.startswith(prefix + "."):
                continue
            for store in (self.m, self.v):
                old = store[name]
                new = old[src].clone()
                new[~valid] = 0.0
                store[name] = new

    def drop(self, prefix: str) -> None:
        for store in (self.m, self.v, self.steps):
            for name in [n for n in store if n.startswith(prefix + ".")]:
                del store[name]

    def state_arrays(self) -> dict:
        out = {}
        for name in sorted(self.m):
            out[f"m::{name}"] = self.m[name].numpy()
            out[f"v::{name}"] = self.v[name].numpy()
            out[f"s::{name}"] = np.array(self.steps[name])
        return out

    def load_arrays(self, arrays: dict) -> None:
        for key, val in arrays.items():
            kind, name = key.split("::", 1)
            if kind == "m":
                self.m[name] = torch.tensor(val, dtype=DTYPE)
            elif kind == "v":
                self.v[name] = torch.tensor(val, dtype=DTYPE)
            else:
                self.steps[name] = int(val)


# --------------------------------------------------------------------------
# losses
# --------------------------------------------------------------------------


def _depth_l1(rendered, observed):
    valid = observed > 0
    if not bool(valid.any()):
        return rendered.sum() * 0.0
    return torch.abs(rendered - observed)[valid].mean()


def photometric_loss(out: RenderOutput, image, depth, lambda1: float, lambda2: float) -> torch.Tensor:
    """``(1 - l1) |I - I~| + l1 (1 - SSIM) + l2 |D - D~|``, each a mean over pixels."""
    image = torch.as_tensor(image, dtype=DTYPE)
    depth = torch.as_tensor(depth, dtype=DTYPE)
    loss = (1.0 - lambda1) * torch.abs(out.color - image).mean()
    if lambda1 > 0:
        loss = loss + lambda1 * (1.0 - ssim_map(out.color, image).mean())
    if lambda2 > 0:
        loss = loss + lambda2 * _depth_l1(out.depth, depth)
    return loss


def pixel_map_loss(out: RenderOutput, image, depth, lambda1: float, lambda2: float) -> torch.Tensor:
    """Per-pixel version of :func:`photometric_loss` (H, W)."""
    image = torch.as_tensor(image, dtype=DTYPE)
    depth = torch.as_tensor(depth, dtype=DTYPE)
    px = (1.0 - lambda1) * torch.abs(out.color - image).mean(-1)
    if lambda1 > 0:
        px = px + lambda1 * (1.0 - ssim_map(out.color, image))
    if lambda2 > 0:
        px = px + lambda2 * torch.where(depth > 0, torch.abs(out.depth - depth), torch.zeros_like(depth))
    return px


def scaffold_regularizers(graph: ScaffoldGraph | None, config: LossConfig | None = None) -> dict:
    """Velocity, acceleration, distance-preservation and opacity-weight smoothness terms."""
    cfg = config or LossConfig()
    zero = torch.zeros((), dtype=DTYPE)
    if graph is None or graph.num_nodes == 0:
        return {"velocity": zero, "acceleration": zero, "arap": zero, "aow": zero, "total": zero}
    tr = graph.translations
    T = graph.num_times
    vel = ((tr[:, 1:] - tr[:, :-1]) ** 2).sum(-1).mean() if T >= 2 else zero
    acc = ((tr[:, 2:] - 2 * tr[:, 1:-1] + tr[:, :-2]) ** 2).sum(-1).mean() if T >= 3 else zero
    arap = zero
    if T >= 2 and graph.edges.shape[1] > 1:
        nb = graph.edges[:, 1:]
        dist = torch.sqrt(((tr[:, None, :, :] - tr[nb]) ** 2).sum(-1) + 1e-18)  # (K, E, T)
        arap = ((dist[..., 1:] - dist[..., :-1]) ** 2).mean()
    aow = ((graph.aow[:, 1:] - graph.aow[:, :-1]) ** 2).mean() if T >= 2 else zero
    total = cfg.w_velocity * vel + cfg.w_acceleration * acc + cfg.w_arap * arap + cfg.w_aow * aow
    return {"velocity": vel, "acceleration": acc, "arap": arap, "aow": aow, "total": total}


def render_keyframe(scene: GaussianScene, graph, t: int, pose, exposure: ExposureParams | None, camera: PinholeCamera,
                    static_only: bool = False, use_aow: bool = True, use_ir: bool = True) -> RenderOutput:
    """IR render of keyframe ``t``; without IR this is a single plain render."""
    if use_ir and exposure is not None:
        return integrate_and_render(scene, graph, t, pose, exposure, camera, static_only=static_only, use_aow=use_aow)
    g = deform_scene(scene, graph, t, use_aow=use_aow, static_only=static_only)
    return render(g, camera, pose, scene.background)


def mapping_loss(scene: GaussianScene, graph, keyframes, exposures, config: LossConfig, camera: PinholeCamera,
                 times=None, use_aow: bool = True, use_ir: bool = True, poses=None) -> torch.Tensor:
    """Mean over keyframes of the photometric loss on full IR renders, plus scaffold regularisers."""
    times = range(len(keyframes)) if times is None else times
    total = torch.zeros((), dtype=DTYPE)
    n = 0
    for t in times:
        kf = keyframes[t]
        pose = poses[t] if poses is not None else kf.pose
        out = render_keyframe(scene, graph, t, pose, exposures[t] if exposures else None, camera,
                              use_aow=use_aow, use_ir=use_ir)
        total = total + photometric_loss(out, kf.image, kf.depth, config.lambda1, config.lambda2)
        n += 1
    total = total / max(n, 1)
    if graph is not None:
        total = total + scaffold_regularizers(graph, config)["total"]
    return total


# --------------------------------------------------------------------------
# seeding helpers
# --------------------------------------------------------------------------


def free_space_votes(points: np.ndarray, keyframes, camera: PinholeCamera, skip: int) -> np.ndarray:
    """Fraction of the other keyframes that see *through* each world point.

    A view votes against a point when the point projects inside the image
    and the observed depth there is clearly farther than the point: the ray
    passes through empty space where the point should be.
    """
    against = np.zeros(len(points))
    seen = np.zeros(len(points))
    for j, kf in enumerate(keyframes):
        if j == skip:
            continue
        Xc = kf.pose.inverse().act(points)
        z = Xc[:, 2]
        front = z > camera.near
        zs = np.where(front, z, 1.0)
        u = np.round(camera.fx * Xc[:, 0] / zs + camera.cx).astype(int)
        v = np.round(camera.fy * Xc[:, 1] / zs + camera.cy).astype(int)
        inb = front & (u >= 0) & (u < camera.width) & (v >= 0) & (v < camera.height)
        d = np.zeros(len(points))
        d[inb] = kf.depth[v[inb], u[inb]]
        ok = inb & (d > 0)
        seen += ok
        against += ok & (d > z * (1.0 + FREE_SPACE_TOL))
    return np.where(seen > 0, against / np.maximum(seen, 1), 0.0)


def _project_pixels(points: np.ndarray, pose: SE3Pose, camera: PinholeCamera):
    Xc = pose.inverse().act(points)
    z = Xc[:, 2]
    zs = np.where(z > camera.near, z, 1.0)
    u = np.round(camera.fx * Xc[:, 0] / zs + camera.cx).astype(int)
    v = np.round(camera.fy * Xc[:, 1] / zs + camera.cy).astype(int)
    inb = (z > camera.near) & (u >= 0) & (u < camera.width) & (v >= 0) & (v < camera.height)
    return u, v, inb


# --------------------------------------------------------------------------
# session
# --------------------------------------------------------------------------


@dataclass
class MappingOptions:
    static_iterations: int = 300
    dynamic_iterations: int = 500
    loss: LossConfig = field(default_factory=LossConfig)
    lr: dict = field(default_factory=dict)
    densify: DensifyConfig = field(default_factory=DensifyConfig)
    seed_stride: int = 2
    dynamic_stride: int = 2
    static_opacity: float = 0.7
    k_nn: int = 8
    max_nodes: int = 64
    delta_u: float = 3.5
    delta_ru: float = 0.2
    prompts: int = 8
    use_aow: bool = True
    use_ir: bool = True
    use_rum: bool = True
    refine_poses: bool = False
    seed: int = 0
    rot_step: float = 0.005
    trans_step: float = 0.005
    max_samples: int = 12
    sigma_rot: float = 1e-3
    sigma_trans: float = 1e-3
    per_channel: bool = False

    @classmethod
    def from_config(cls, cfg) -> "MappingOptions":
        m, u, e = cfg.mapper, cfg.uncertainty, cfg.exposure
        lr = {"means": m.lr_means, "colors": m.lr_colors, "opacity_logit": m.lr_opacity, "log_scales": m.lr_scales,
              "quats": m.lr_rotations, "node_translations": m.lr_scaffold, "node_rotations": m.lr_scaffold,
              "aow": m.lr_aow, "exposure": m.lr_exposure, "exposure_pose": m.lr_exposure_pose, "mlp": m.lr_mlp,
              "pose": m.lr_exposure_pose}
        dens = DensifyConfig(grad_threshold=m.grad_threshold, prune_opacity=m.prune_opacity,
                             interval=m.densify_interval, max_gaussians=m.max_gaussians)
        loss = LossConfig(m.lambda1, m.lambda2, u.lambda1_u, u.lambda_reg, m.w_velocity, m.w_acceleration,
                          m.w_arap, m.w_aow)
        return cls(m.static_iterations, m.dynamic_iterations, loss, lr, dens, m.seed_stride, m.dynamic_stride,
                   k_nn=m.k_nn, max_nodes=m.max_nodes, delta_u=u.delta_u, delta_ru=u.delta_ru, prompts=u.prompts,
                   use_aow=m.use_aow, use_ir=m.use_ir, use_rum=m.use_rum, refine_poses=m.refine_poses,
                   seed=cfg.session.seed, rot_step=e.rot_step, trans_step=e.trans_step, max_samples=e.max_samples,
                   sigma_rot=e.sigma_rot, sigma_trans=e.sigma_trans, per_channel=e.per_channel)


class MappingSession:
    """All mutable mapping state for one sequence of keyframes."""

    def __init__(self, keyframes, camera: PinholeCamera, options: MappingOptions, segmentation=None, tracks=None,
                 background=(0.0, 0.0, 0.0)):
        self.keyframes = keyframes
        self.camera = camera
        self.opt = options
        self.segmentation = segmentation
        self.tracks: TrackSet | None = tracks
        self.scene = GaussianScene(background=tuple(background))
        self.graph: ScaffoldGraph | None = None
        self.field = UncertaintyField.create(seed=options.seed)
        rng = np.random.default_rng([options.seed, 17])
        self.exposures = [
            ExposureParams.initialise(kf.pose, rng, options.sigma_rot, options.sigma_trans, options.per_channel,
                                      rot_step=options.rot_step, trans_step=options.trans_step,
                                      max_samples=options.max_samples)
            for kf in keyframes
        ]
        self.poses = [B.pose_to_tensors(kf.pose) for kf in keyframes]
        self.residuals = [None] * len(keyframes)
        self.beta2 = [None] * len(keyframes)
        self.masks_u = [None] * len(keyframes)
        self.masks_ru = [None] * len(keyframes)
        self.optim = OptimState()
        self.phase = "init"  # init -> static -> dynamic -> done
        self.iteration = 0
        self.history: list = []
        self.densify_log: list = []
        cams = np.array([kf.pose.translation for kf in keyframes])
        self._stats: GradStats | None = None
        self.extent = float(max(1.1 * np.linalg.norm(cams - cams.mean(0), axis=1).max(), 0.1))
        self.opt.densify.scene_extent = self.extent

    # -- parameter bookkeeping ----------------------------------------------
    def _lr(self, name: str) -> float:
        key = name.split(".")[-1]
        lr = self.opt.lr
        if name.startswith("mlp."):
            return lr.get("mlp", 5e-4)
        if name.startswith("exposure."):
            if key in ("gain_log", "bias"):
                return lr.get("exposure", 1e-3)
            return lr.get("exposure_pose", 1e-3)
        if name.startswith("pose."):
            return lr.get("pose", 1e-3)
        if key == "means":
            return lr.get("means", 2.5e-3) * self.extent
        defaults = {"colors": 1e-2, "opacity_logit": 1e-2, "log_scales": 5e-3, "quats": 1e-3,
                    "node_translations": 1e-3, "node_rotations": 1e-3, "aow": 1e-3}
        return lr.get(key, defaults.get(key, 1e-3))

    def trainable(self, phase: str, t: int) -> dict:
        """Named leaves that receive gradients in ``phase`` for keyframe ``t``."""
        out = {f"static.{k}": v for k, v in self.scene.static.params().items()}
        if self.opt.use_ir:
            out.update({f"exposure.{t}.{k}": v for k, v in self.exposures[t].params().items()})
        if self.opt.refine_poses:
            out[f"pose.{t}.q"], out[f"pose.{t}.t"] = self.poses[t]
        if phase == "static":
            out.update({f"mlp.{k}": v for k, v in self.field.predictor.named_parameters()})
        else:
            out.update({f"dynamic.{k}": v for k, v in self.scene.dynamic.params().items()})
            if self.graph is not None:
                g = {"node_translations": self.graph.translations, "node_rotations": self.graph.rotations}
                if self.opt.use_aow:
                    g["aow"] = self.graph.aow
                out.update({f"graph.{k}": v for k, v in g.items()})
        for name in out:
            if name not in self.optim.lr:
                self.optim.lr[name] = self._lr(name)
        return out

    @staticmethod
    def _attach(params: dict) -> None:
        for p in params.values():
            p.requires_grad_(True)
            p.grad = None

    @staticmethod
    def _detach_all(params: dict) -> None:
        for p in params.values():
            p.grad = None
            p.requires_grad_(False)

    def _post_step(self) -> None:
        with torch.no_grad():
            self.scene.static.colors.clamp_(0.0, 1.0)
            self.scene.dynamic.colors.clamp_(0.0, 1.0)

    def _order(self, phase: int, it: int) -> int:
        T = len(self.keyframes)
        epoch, k = divmod(it, T)
        perm = np.random.default_rng([self.opt.seed, phase, epoch]).permutation(T)
        return int(perm[k])

    # -- initial static map -------------------------------------------------
    def seed_static(self) -> None:
        """One Gaussian per stride pixel not yet covered, if multi-view depth agrees it is static."""
        cam = self.camera
        for t, kf in enumerate(self.keyframes):
            mask = np.ones(kf.depth.shape, dtype=bool)
            if len(self.scene.static):
                with torch.no_grad():
                    out = render(self.scene.static.to_batch(), cam, kf.pose, self.scene.background)
                mask = out.alpha.numpy() < ALPHA_COVERED
            new = seed_from_depth(kf.image, kf.depth, kf.pose, cam, self.opt.seed_stride, mask, ref_time=t,
                                  opacity=self.opt.static_opacity)
            if len(new) and len(self.keyframes) > 1:
                votes = free_space_votes(new.means.numpy(), self.keyframes, cam, t)
                new = new.subset(torch.as_tensor(votes <= FREE_SPACE_MAX))
            self.scene.static = self.scene.static.cat(new)
        log.info("seeded %d static Gaussians", len(self.scene.static))

    # -- phase A -------------------------------------------------------------
    def _static_step(self, it: int) -> float:
        t = self._order(0, it)
        kf = self.keyframes[t]
        params = self.trainable("static", t)
        self._attach(params)
        pose = self.poses[t]
        out = render_keyframe(self.scene, None, t, pose, self.exposures[t], self.camera, static_only=True,
                              use_ir=self.opt.use_ir)
        beta2 = self.field.predict(kf.image, self.residuals[t])
        L = self.opt.loss
        image = torch.as_tensor(kf.image, dtype=DTYPE)
        depth = torch.as_tensor(kf.depth, dtype=DTYPE)
        s = ssim_map(out.color, image)
        ddep = torch.where(depth > 0, torch.abs(out.depth - depth), torch.zeros_like(depth))
        r = torch.clamp((1.0 - s) / 2.0, 0.0, 1.0) + L.lambda1_u * ddep
        loss_u = uncertainty_loss(out, kf.image, kf.depth, beta2, L.lambda1_u, L.lambda_reg, residual=r)
        px = (1.0 - L.lambda1) * torch.abs(out.color - image).mean(-1) + L.lambda1 * (1.0 - s) + L.lambda2 * ddep
        loss_m = (px / beta2.detach()).mean()
        loss = loss_u + loss_m
        loss.backward()
        self._stats.accumulate(self.scene.static.means.grad, None)
        self.optim.step(params)
        self._detach_all(params)
        self._post_step()
        self._update_residual(t, out)
        return float(loss.detach())

    def _update_residual(self, t: int, out: RenderOutput) -> None:
        kf = self.keyframes[t]
        with torch.no_grad():
            dI = torch.abs(out.color - torch.as_tensor(kf.image, dtype=DTYPE)).numpy()
            dep = torch.as_tensor(kf.depth, dtype=DTYPE)
            dD = torch.where(dep > 0, torch.abs(out.depth - dep), torch.zeros_like(dep)).numpy()
        self.residuals[t] = np.concatenate([dI, dD[..., None]], -1)

    def _maybe_densify(self, it: int, which: str) -> None:
        interval = self.opt.densify.interval
        if interval <= 0 or it == 0 or it % interval:
            return
        self.scene, origins, report = densify_and_prune(
            self.scene, self._stats, self.opt.densify, torch.Generator().manual_seed(self.opt.seed * 100003 + it))
        self.optim.remap("static", origins["static"])
        self.optim.remap("dynamic", origins["dynamic"])
        self.densify_log.append((which, it, report))
        self._stats = GradStats.zeros(self.scene)

    def run_static(self, iterations: int) -> None:
        if self.phase == "init":
            self.seed_static()
            self.phase = "static"
            self.iteration = 0
        if getattr(self, "_stats", None) is None or self._stats.static_sum.shape[0] != len(self.scene.static):
            self._stats = GradStats.zeros(self.scene)
        for _ in range(iterations):
            loss = self._static_step(self.iteration)
            self.history.append(("static", self.iteration, loss))
            self.iteration += 1
            self._maybe_densify(self.iteration, "static")

    def finish_static(self) -> None:
        """Final residuals, cached uncertainty maps and reweighted masks for every keyframe."""
        L = self.opt.loss
        for t, kf in enumerate(self.keyframes):
            with torch.no_grad():
                out = render_keyframe(self.scene, None, t, self.poses[t], self.exposures[t], self.camera,
                                      static_only=True, use_ir=self.opt.use_ir)
            self._update_residual(t, out)
            self.beta2[t] = self.field.refresh(t, kf.image, self.residuals[t])
            M_u = threshold_mask(self.beta2[t], self.opt.delta_u)
            self.masks_u[t] = M_u
            cands = []
            if self.opt.use_rum and self.segmentation is not None and M_u.any():
                prompts = sample_prompts(M_u, self.opt.prompts, seed=self.opt.seed + t)
                cands = self.segmentation.candidates(kf.image, prompts, frame=t)
            self.masks_ru[t] = reweighted_mask(M_u, cands, self.opt.delta_ru)
        self.phase = "static_done"

    # -- phase B -------------------------------------------------------------
    def prune_static_in_masks(self) -> int:
        gs = self.scene.static
        if len(gs) == 0:
            return 0
        means = gs.means.detach().numpy()
        ref = gs.ref_time.numpy()
        drop = np.zeros(len(gs), dtype=bool)
        for t, kf in enumerate(self.keyframes):
            sel = np.nonzero(ref == t)[0]
            if len(sel) == 0 or self.masks_ru[t] is None:
                continue
            m = ndimage.binary_dilation(self.masks_ru[t], iterations=1)
            u, v, inb = _project_pixels(means[sel], kf.pose, self.camera)
            hit = np.zeros(len(sel), dtype=bool)
            hit[inb] = m[v[inb], u[inb]]
            drop[sel] = hit
        self.scene.static = gs.subset(torch.as_tensor(~drop))
        self.optim.drop("static")
        return int(drop.sum())

    def build_scaffold(self) -> None:
        if self.tracks is None:
            self.graph = None
            return
        depths = [kf.depth for kf in self.keyframes]
        poses = [kf.pose for kf in self.keyframes]
        try:
            self.graph = init_nodes_from_tracks(self.tracks, depths, poses, self.masks_ru, self.camera,
                                                k_nn=self.opt.k_nn, max_nodes=self.opt.max_nodes)
        except NoTracks as e:
            log.warning("no dynamic scaffold: %s", e)
            self.graph = None
            return
        if not self.opt.use_aow:
            with torch.no_grad():
                self.graph.aow.fill_(20.0)

    def seed_dynamic(self) -> None:
        if self.graph is None:
            return
        cam = self.camera
        nodes = self.graph.translations.detach().numpy()
        for t, kf in enumerate(self.keyframes):
            mask = self.masks_ru[t].copy()
            if not mask.any():
                continue
            if len(self.scene.dynamic):
                with torch.no_grad():
                    g = deform_gaussians(self.scene.dynamic, self.graph, t, use_aow=False)
                    out = render(g, cam, kf.pose, self.scene.background)
                mask &= out.alpha.numpy() < ALPHA_COVERED
            new = seed_from_depth(kf.image, kf.depth, kf.pose, cam, self.opt.dynamic_stride, mask, ref_time=t,
                                  opacity=self.opt.static_opacity)
            if len(new) == 0:
                continue
            new.node_index = torch.as_tensor(bind_all(new.means.numpy(), nodes, np.full(len(new), t)))
            self.scene.dynamic = self.scene.dynamic.cat(new)
        log.info("seeded %d dynamic Gaussians on %d nodes", len(self.scene.dynamic), self.graph.num_nodes)

    def start_dynamic(self) -> None:
        if self.phase == "static":
            self.finish_static()
        pruned = self.prune_static_in_masks()
        self.build_scaffold()
        self.seed_dynamic()
        log.info("pruned %d static Gaussians inside the reweighted masks", pruned)
        self.phase = "dynamic"
        self.iteration = 0
        self._stats = GradStats.zeros(self.scene)

    def _dynamic_step(self, it: int) -> float:
        t = self._order(1, it)
        kf = self.keyframes[t]
        params = self.trainable("dynamic", t)
        self._attach(params)
        out = render_keyframe(self.scene, self.graph, t, self.poses[t], self.exposures[t], self.camera,
                              use_aow=True, use_ir=self.opt.use_ir)
        L = self.opt.loss
        loss = photometric_loss(out, kf.image, kf.depth, L.lambda1, L.lambda2)
        if self.graph is not None:
            loss = loss + scaffold_regularizers(self.graph, L)["total"]
        loss.backward()
        self._stats.accumulate(self.scene.static.means.grad, self.scene.dynamic.means.grad)
        self.optim.step(params)
        self._detach_all(params)
        self._post_step()
        return float(loss.detach())

    def run_dynamic(self, iterations: int) -> None:
        if self.phase != "dynamic":
            self.start_dynamic()
        if getattr(self, "_stats", None) is None or self._stats.static_sum.shape[0] != len(self.scene.static):
            self._stats = GradStats.zeros(self.scene)
        for _ in range(iterations):
            loss = self._dynamic_step(self.iteration)
            self.history.append(("dynamic", self.iteration, loss))
            self.iteration += 1
            self._maybe_densify(self.iteration, "dynamic")

    # -- evaluation helpers ----------------------------------------------------
    def render(self, t: int, pose=None, static_only: bool = False, ir: bool | None = None) -> RenderOutput:
        ir = self.opt.use_ir if ir is None else ir
        pose = self.poses[t] if pose is None else pose
        with torch.no_grad():
            return render_keyframe(self.scene, self.graph, t, pose, self.exposures[t], self.camera,
                                   static_only=static_only, use_ir=ir)

    def sample_counts(self) -> list:
        return [sample_count(e.T_s, e.T_e, e.rot_step, e.trans_step, e.max_samples) for e in self.exposures]


def run_mapping(session: MappingSession, static_iterations: int | None = None,
                dynamic_iterations: int | None = None) -> MappingSession:
    """Phase A then phase B; zero iterations leave the session untouched."""
    a = session.opt.static_iterations if static_iterations is None else static_iterations
    b = session.opt.dynamic_iterations if dynamic_iterations is None else dynamic_iterations
    if a == 0 and b == 0:
        return session
    if a > 0 or session.phase == "init":
        session.run_static(a)
    if b > 0:
        session.run_dynamic(b)
    session.phase = "done" if b > 0 else session.phase
    return session
