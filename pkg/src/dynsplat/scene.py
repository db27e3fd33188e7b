"""
Static and dynamic Gaussian sets.

Parameters are stored unconstrained: scales as logs, opacity as a logit,
orientation as an (un-normalised) quaternion. Colors are plain RGB and are
clamped to [0, 1] by the optimiser after every step.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from .errors import EmptyScaffold, ValidationError
from .rasterizer import DTYPE, GaussianBatch, PinholeCamera
from .se3 import SE3Pose

log = logging.getLogger(__name__)

PARAM_FIELDS = ("means", "quats", "log_scales", "opacity_logit", "colors")


def _logit(p):
    p = np.clip(np.asarray(p, dtype=float), 1e-12, 1 - 1e-12)
    return np.log(p) - np.log1p(-p)


@dataclass
class GaussianSet:
    means: torch.Tensor
    quats: torch.Tensor
    log_scales: torch.Tensor
    opacity_logit: torch.Tensor
    colors: torch.Tensor
    node_index: torch.Tensor  # long, -1 for static Gaussians
    ref_time: torch.Tensor  # long, keyframe index at creation

    def __len__(self) -> int:
        return self.means.shape[0]

    @classmethod
    def empty(cls) -> "GaussianSet":
        z = lambda *s: torch.zeros(*s, dtype=DTYPE)
        return cls(z(0, 3), z(0, 4), z(0, 3), z(0), z(0, 3), torch.zeros(0, dtype=torch.long), torch.zeros(0, dtype=torch.long))

    @classmethod
    def from_arrays(cls, means, colors, scales, opacity=0.5, node_index=None, ref_time=0, quats=None) -> "GaussianSet":
        means = np.asarray(means, dtype=float).reshape(-1, 3)
        n = len(means)
        scales = np.broadcast_to(np.asarray(scales, dtype=float).reshape(-1, 1) if np.ndim(scales) <= 1 else scales, (n, 3))
        if quats is None:
            quats = np.tile([1.0, 0.0, 0.0, 0.0], (n, 1))
        op = np.broadcast_to(np.asarray(opacity, dtype=float), (n,))
        ni = np.full(n, -1) if node_index is None else np.broadcast_to(np.asarray(node_index), (n,))
        rt = np.broadcast_to(np.asarray(ref_time), (n,))
        t = lambda a: torch.tensor(np.ascontiguousarray(a), dtype=DTYPE)
        return cls(
            t(means), t(quats), t(np.log(scales)), t(_logit(op)), t(np.clip(colors, 0.0, 1.0).reshape(n, 3)),
            torch.tensor(np.ascontiguousarray(ni), dtype=torch.long), torch.tensor(np.ascontiguousarray(rt), dtype=torch.long),
        )

    def params(self) -> dict:
        return {k: getattr(self, k) for k in PARAM_FIELDS}

    def subset(self, keep) -> "GaussianSet":
        keep = torch.as_tensor(keep)
        return GaussianSet(*(getattr(self, f)[keep].detach().clone() for f in PARAM_FIELDS + ("node_index", "ref_time")))

    def cat(self, other: "GaussianSet") -> "GaussianSet":
        return GaussianSet(*(torch.cat([getattr(self, f).detach(), getattr(other, f).detach()], 0)
                             for f in PARAM_FIELDS + ("node_index", "ref_time")))

    @property
    def opacity(self) -> torch.Tensor:
        return torch.sigmoid(self.opacity_logit)

    def to_batch(self, opacity=None) -> GaussianBatch:
        return GaussianBatch(self.means, self.quats, self.log_scales, self.opacity if opacity is None else opacity, self.colors)

    def clone(self) -> "GaussianSet":
        return GaussianSet(*(getattr(self, f).detach().clone() for f in PARAM_FIELDS + ("node_index", "ref_time")))


@dataclass
class GaussianScene:
    static: GaussianSet = field(default_factory=GaussianSet.empty)
    dynamic: GaussianSet = field(default_factory=GaussianSet.empty)
    background: tuple = (0.0, 0.0, 0.0)

    def counts(self) -> dict:
        return {"static": len(self.static), "dynamic": len(self.dynamic), "total": len(self.static) + len(self.dynamic)}

    def clone(self) -> "GaussianScene":
        return GaussianScene(self.static.clone(), self.dynamic.clone(), tuple(self.background))


@dataclass(frozen=True)
class GaussianBinding:
    node_index: int
    reference_time: int


def bind_to_nearest_node(mu, node_translations, t_hat: int) -> GaussianBinding:
    """Bind a Gaussian centre to the closest node at time ``t_hat``.

    ``node_translations`` is a (K, T, 3) array (or a ScaffoldGraph); ties go
    to the lowest node index.
    """
    nt = getattr(node_translations, "translations", node_translations)
    nt = nt.detach().numpy() if torch.is_tensor(nt) else np.asarray(nt, dtype=float)
    if nt.shape[0] == 0:
        raise EmptyScaffold("scaffold has no nodes")
    d2 = np.sum((nt[:, t_hat, :] - np.asarray(mu, dtype=float)) ** 2, axis=-1)
    return GaussianBinding(int(np.argmin(d2)), int(t_hat))


def bind_all(means: np.ndarray, node_translations: np.ndarray, t_hat: np.ndarray) -> np.ndarray:
    """Vectorised :func:`bind_to_nearest_node` for many Gaussians."""
    if node_translations.shape[0] == 0:
        raise EmptyScaffold("scaffold has no nodes")
    pos = node_translations[:, t_hat, :].transpose(1, 0, 2)  # (N, K, 3)
    d2 = np.sum((pos - means[:, None, :]) ** 2, axis=-1)
    return np.argmin(d2, axis=1)


def seed_from_depth(image, depth, pose: SE3Pose, camera: PinholeCamera, stride: int = 2, mask=None,
                    ref_time: int = 0, opacity: float = 0.5, scale_factor: float = 1.0) -> GaussianSet:
    """One isotropic Gaussian per (masked) pixel on a stride grid, back-projected through ``depth``."""
    image = np.asarray(image, dtype=float)
    depth = np.asarray(depth, dtype=float)
    H, W = depth.shape
    vs, us = np.meshgrid(np.arange(0, H, stride), np.arange(0, W, stride), indexing="ij")
    sel = depth[vs, us] > 0
    if mask is not None:
        sel &= np.asarray(mask, dtype=bool)[vs, us]
    us, vs = us[sel], vs[sel]
    if len(us) == 0:
        return GaussianSet.empty()
    z = depth[vs, us]
    pc = camera.backproject(np.stack([us, vs], -1).astype(float), z)
    pw = pose.act(pc)
    scales = scale_factor * 0.5 * stride * z / camera.fx
    return GaussianSet.from_arrays(pw, image[vs, us], scales, opacity=opacity, ref_time=ref_time)


@dataclass
class DensifyConfig:
    grad_threshold: float = 2e-4
    prune_opacity: float = 0.005
    interval: int = 100
    percent_dense: float = 0.01
    scene_extent: float = 1.0
    split_factor: float = 1.6
    max_gaussians: int = 20000


@dataclass
class GradStats:
    """Per-Gaussian accumulators of centre-gradient norms."""

    static_sum: torch.Tensor
    static_count: torch.Tensor
    dynamic_sum: torch.Tensor
    dynamic_count: torch.Tensor

    @classmethod
    def zeros(cls, scene: GaussianScene) -> "GradStats":
        z = lambda n: torch.zeros(n, dtype=DTYPE)
        return cls(z(len(scene.static)), z(len(scene.static)), z(len(scene.dynamic)), z(len(scene.dynamic)))

    def accumulate(self, static_grad, dynamic_grad):
        if static_grad is not None and len(static_grad):
            n = static_grad.norm(dim=-1)
            self.static_sum += n
            self.static_count += (n > 0).to(DTYPE)
        if dynamic_grad is not None and len(dynamic_grad):
            n = dynamic_grad.norm(dim=-1)
            self.dynamic_sum += n
            self.dynamic_count += (n > 0).to(DTYPE)

    def mean(self, which: str) -> torch.Tensor:
        s, c = getattr(self, f"{which}_sum"), getattr(self, f"{which}_count")
        return torch.where(c > 0, s / c.clamp(min=1), torch.zeros_like(s))


def _densify_set(gs: GaussianSet, grad_mean: torch.Tensor, cfg: DensifyConfig, gen: torch.Generator, budget: int):
    """Returns (new set, origin index per output Gaussian (-1 for new), report)."""
    n = len(gs)
    report = {"cloned": 0, "split": 0, "pruned": 0}
    if n == 0:
        return gs, torch.zeros(0, dtype=torch.long), report
    big = torch.exp(gs.log_scales).max(-1).values > cfg.percent_dense * cfg.scene_extent
    hot = grad_mean >= cfg.grad_threshold
    clone_idx = torch.nonzero(hot & ~big).squeeze(-1)
    split_idx = torch.nonzero(hot & big).squeeze(-1)
    room = max(budget, 0)
    clone_idx = clone_idx[:room]
    split_idx = split_idx[: max(room - len(clone_idx), 0)]
    # split: replace by two samples drawn from the Gaussian, scales shrunk
    from .batched import quat_to_rotmat

    parts = [gs]
    origin = [torch.arange(n)]
    if len(clone_idx):
        parts.append(gs.subset(clone_idx))
        origin.append(torch.full((len(clone_idx),), -1, dtype=torch.long))
    if len(split_idx):
        src = gs.subset(split_idx)
        R = quat_to_rotmat(src.quats.detach())
        std = torch.exp(src.log_scales.detach())
        children = []
        for _ in range(2):
            eps = torch.randn(len(src), 3, generator=gen, dtype=DTYPE) * std
            child = src.clone()
            child.means = src.means.detach() + (R @ eps.unsqueeze(-1)).squeeze(-1)
            child.log_scales = src.log_scales.detach() - np.log(cfg.split_factor)
            children.append(child)
        parts.append(children[0])
        parts.append(children[1])
        origin += [torch.full((len(src),), -1, dtype=torch.long)] * 2
    out = parts[0]
    for p in parts[1:]:
        out = out.cat(p)
    origin = torch.cat(origin)
    keep = torch.ones(len(out), dtype=torch.bool)
    if len(split_idx):
        keep[split_idx] = False  # parents replaced by their two children
    keep &= torch.sigmoid(out.opacity_logit.detach()) >= cfg.prune_opacity
    report["cloned"] = int(len(clone_idx))
    report["split"] = int(len(split_idx))
    report["pruned"] = int((~keep).sum()) - int(len(split_idx))
    return out.subset(keep), origin[keep], report


def densify_and_prune(scene: GaussianScene, stats: GradStats | None, config: DensifyConfig,
                      generator: torch.Generator | None = None):
    """Clone small / split large Gaussians with high centre gradients, prune transparent ones.

    Returns ``(scene, origins, report)``; ``origins[name]`` maps every output
    Gaussian to its source index in the input set (or -1 when newly created),
    which callers use to carry optimiser state across.
    """
    gen = generator if generator is not None else torch.Generator().manual_seed(0)
    if stats is None:
        ident = {"static": torch.arange(len(scene.static)), "dynamic": torch.arange(len(scene.dynamic))}
        return scene, ident, {"static": len(scene.static), "dynamic": len(scene.dynamic)}
    total = len(scene.static) + len(scene.dynamic)
    budget = config.max_gaussians - total
    new_static, o_s, r_s = _densify_set(scene.static, stats.mean("static"), config, gen, budget)
    budget -= (len(new_static) - len(scene.static))
    new_dynamic, o_d, r_d = _densify_set(scene.dynamic, stats.mean("dynamic"), config, gen, budget)
    report = {"static": len(new_static), "dynamic": len(new_dynamic)}
    for k, v in r_s.items():
        report[f"static_{k}"] = v
    for k, v in r_d.items():
        report[f"dynamic_{k}"] = v
    log.debug("densify: %s", report)
    return GaussianScene(new_static, new_dynamic, scene.background), {"static": o_s, "dynamic": o_d}, report


# --------------------------------------------------------------------------
# PLY
# --------------------------------------------------------------------------

_PLY_PROPS = [
    ("x", "f8"), ("y", "f8"), ("z", "f8"),
    ("rot_w", "f8"), ("rot_x", "f8"), ("rot_y", "f8"), ("rot_z", "f8"),
    ("log_scale_0", "f8"), ("log_scale_1", "f8"), ("log_scale_2", "f8"),
    ("opacity_logit", "f8"),
    ("r", "f8"), ("g", "f8"), ("b", "f8"),
    ("node_index", "i4"), ("ref_time", "i4"),
]
_PLY_TYPES = {"f8": "double", "i4": "int"}


def _set_to_records(gs: GaussianSet) -> np.ndarray:
    rec = np.zeros(len(gs), dtype=[(n, "<" + t) for n, t in _PLY_PROPS])
    m, q, s = gs.means.detach().numpy(), gs.quats.detach().numpy(), gs.log_scales.detach().numpy()
    c = gs.colors.detach().numpy()
    for i, n in enumerate("xyz"):
        rec[n] = m[:, i]
    for i, n in enumerate(("rot_w", "rot_x", "rot_y", "rot_z")):
        rec[n] = q[:, i]
    for i in range(3):
        rec[f"log_scale_{i}"] = s[:, i]
    rec["opacity_logit"] = gs.opacity_logit.detach().numpy()
    for i, n in enumerate("rgb"):
        rec[n] = c[:, i]
    rec["node_index"] = gs.node_index.numpy()
    rec["ref_time"] = gs.ref_time.numpy()
    return rec


def _records_to_set(rec: np.ndarray) -> GaussianSet:
    t = lambda a: torch.tensor(np.ascontiguousarray(a), dtype=DTYPE)
    return GaussianSet(
        t(np.stack([rec["x"], rec["y"], rec["z"]], -1)),
        t(np.stack([rec["rot_w"], rec["rot_x"], rec["rot_y"], rec["rot_z"]], -1)),
        t(np.stack([rec[f"log_scale_{i}"] for i in range(3)], -1)),
        t(rec["opacity_logit"]),
        t(np.stack([rec["r"], rec["g"], rec["b"]], -1)),
        torch.tensor(rec["node_index"].astype(np.int64)),
        torch.tensor(rec["ref_time"].astype(np.int64)),
    )


def save_ply(scene: GaussianScene, path) -> None:
    """Binary little-endian PLY; static Gaussians first (node_index -1)."""
    rec = np.concatenate([_set_to_records(scene.static), _set_to_records(scene.dynamic)])
    header = ["ply", "format binary_little_endian 1.0", f"comment background {' '.join(repr(float(x)) for x in scene.background)}",
              f"comment static_count {len(scene.static)}", f"element vertex {len(rec)}"]
    header += [f"property {_PLY_TYPES[t]} {n}" for n, t in _PLY_PROPS]
    header.append("end_header")
    with open(path, "wb") as f:
        f.write(("\n".join(header) + "\n").encode("ascii"))
        f.write(rec.tobytes())


def load_ply(path) -> GaussianScene:
    data = Path(path).read_bytes()
    end = data.index(b"end_header\n") + len(b"end_header\n")
    lines = data[:end].decode("ascii").splitlines()
    if lines[0] != "ply" or "binary_little_endian" not in lines[1]:
        raise ValidationError(f"{path}: not a binary little-endian PLY")
    n = 0
    background = (0.0, 0.0, 0.0)
    static_count = None
    props = []
    for ln in lines:
        parts = ln.split()
        if parts[:2] == ["element", "vertex"]:
            n = int(parts[2])
        elif parts[:2] == ["comment", "background"]:
            background = tuple(float(x) for x in parts[2:5])
        elif parts[:2] == ["comment", "static_count"]:
            static_count = int(parts[2])
        elif parts[0] == "property":
            props.append(parts[2])
    if props != [p for p, _ in _PLY_PROPS]:
        raise ValidationError(f"{path}: unexpected vertex properties {props}")
    rec = np.frombuffer(data[end:], dtype=[(nm, "<" + t) for nm, t in _PLY_PROPS], count=n)
    is_static = rec["node_index"] < 0
    if static_count is None:
        static_count = int(is_static.sum())
    return GaussianScene(_records_to_set(rec[:static_count]), _records_to_set(rec[static_count:]), background)
