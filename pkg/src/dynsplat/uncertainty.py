"""
Per-pixel uncertainty and the reweighted uncertainty mask.

A small MLP maps per-pixel features to ``beta^2 >= 0.1``. It is trained on
static-only renders with ``mean(r / beta^2) + lambda_reg * mean(log beta^2)``,
whose per-pixel optimum is ``beta^2 = r / lambda_reg``. Thresholding ``beta^2``
gives a coarse motion mask which is then grown with segmentation candidates
that overlap it enough.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image
from scipy import ndimage

from .errors import EmptyCandidate, EmptyMask, ShapeMismatch, ValidationError
from .rasterizer import DTYPE, RenderOutput

BETA_FLOOR = 0.1
FEATURE_DIM = 15
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2


# --------------------------------------------------------------------------
# SSIM
# --------------------------------------------------------------------------


def gaussian_kernel(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x**2) / (2 * sigma**2))
    return g / g.sum()


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    g = gaussian_kernel(size, sigma)
    return np.outer(g, g)


def _filter(x: torch.Tensor, g: torch.Tensor) -> torch.Tensor:
    # x: (C, H, W); separable Gaussian, reflect padding keeps border statistics defined
    pad = g.shape[0] // 2
    C = x.shape[0]
    xp = F.pad(x.unsqueeze(0), (pad, pad, pad, pad), mode="reflect")
    y = F.conv2d(xp, g.view(1, 1, 1, -1).expand(C, 1, 1, -1), groups=C)
    return F.conv2d(y, g.view(1, 1, -1, 1).expand(C, 1, -1, 1), groups=C).squeeze(0)


def ssim_map(a, b, size: int = 11, sigma: float = 1.5) -> torch.Tensor:
    """Per-pixel SSIM averaged over channels, for (H, W, 3) images."""
    a = torch.as_tensor(a, dtype=DTYPE)
    b = torch.as_tensor(b, dtype=DTYPE)
    if a.shape != b.shape:
        raise ShapeMismatch(f"{tuple(a.shape)} vs {tuple(b.shape)}")
    if a.dim() == 2:
        a, b = a[..., None], b[..., None]
    win = torch.tensor(gaussian_kernel(size, sigma), dtype=DTYPE)
    x, y = a.permute(2, 0, 1), b.permute(2, 0, 1)
    C = x.shape[0]
    f = _filter(torch.cat([x, y, x * x, y * y, x * y], 0), win)
    mx, my = f[:C], f[C:2 * C]
    sxx = f[2 * C:3 * C] - mx * mx
    syy = f[3 * C:4 * C] - my * my
    sxy = f[4 * C:] - mx * my
    s = ((2 * mx * my + SSIM_C1) * (2 * sxy + SSIM_C2)) / ((mx * mx + my * my + SSIM_C1) * (sxx + syy + SSIM_C2))
    return s.mean(0)


def ssim_prime(rendered, observed) -> torch.Tensor:
    """Per-pixel dissimilarity ``(1 - SSIM) / 2`` clamped to [0, 1]."""
    return torch.clamp((1.0 - ssim_map(rendered, observed)) / 2.0, 0.0, 1.0)


# --------------------------------------------------------------------------
# providers
# --------------------------------------------------------------------------


class FeatureProvider(Protocol):
    dim: int

    def features(self, image: np.ndarray, residual: np.ndarray | None = None) -> torch.Tensor:
        """(H, W, dim) features for an (H, W, 3) image."""


class HandcraftedFeatures:
    """RGB, 5x5 local mean and std per channel, normalised pixel coordinates,
    and the previous iteration's residual (|dI| per channel, |dD|): 15 values."""

    dim = FEATURE_DIM

    def features(self, image, residual=None) -> torch.Tensor:
        img = np.asarray(image, dtype=float)
        H, W = img.shape[:2]
        mean = ndimage.uniform_filter(img, size=(5, 5, 1), mode="reflect")
        sq = ndimage.uniform_filter(img * img, size=(5, 5, 1), mode="reflect")
        std = np.sqrt(np.clip(sq - mean * mean, 0.0, None))
        v, u = np.meshgrid(np.linspace(-1, 1, H), np.linspace(-1, 1, W), indexing="ij")
        res = np.zeros((H, W, 4)) if residual is None else np.asarray(residual, dtype=float).reshape(H, W, 4)
        feat = np.concatenate([img, mean, std, u[..., None], v[..., None], res], -1)
        return torch.tensor(feat, dtype=DTYPE)


class SegmentationProvider(Protocol):
    def candidates(self, image: np.ndarray, prompts: Sequence[tuple], frame: int | None = None) -> list[np.ndarray]:
        """Binary candidate masks for the prompted image."""


class OracleSegmentation:
    """Candidates from ground-truth instance maps (0 = background).

    For every instance hit by a prompt the exact mask is returned; with
    ``noisy=True`` a dilated, an eroded and left/right split versions are
    added. Prompts on background yield the background region as a candidate.
    """

    def __init__(self, instance_maps: dict[int, np.ndarray] | Sequence[np.ndarray], noisy: bool = True):
        self.maps = dict(enumerate(instance_maps)) if not isinstance(instance_maps, dict) else instance_maps
        self.noisy = noisy

    def candidates(self, image, prompts, frame=None) -> list[np.ndarray]:
        inst = self.maps[frame]
        out = []
        seen = set()
        for (u, v) in prompts:
            label = int(inst[int(v), int(u)])
            if label in seen:
                continue
            seen.add(label)
            m = inst == label
            out.append(m)
            if self.noisy and label != 0:
                out.append(ndimage.binary_dilation(m, iterations=1))
                er = ndimage.binary_erosion(m, iterations=1)
                if er.any():
                    out.append(er)
                cols = np.nonzero(m.any(0))[0]
                mid = (cols.min() + cols.max() + 1) // 2
                left = m.copy()
                left[:, mid:] = False
                right = m & ~left
                out += [x for x in (left, right) if x.any()]
        return out


# --------------------------------------------------------------------------
# uncertainty field
# --------------------------------------------------------------------------


class UncertaintyMLP(torch.nn.Module):
    def __init__(self, in_dim: int = FEATURE_DIM, hidden: int = 32, seed: int = 0):
        super().__init__()
        g = torch.Generator().manual_seed(seed)
        self.l1 = torch.nn.Linear(in_dim, hidden).to(DTYPE)
        self.l2 = torch.nn.Linear(hidden, hidden).to(DTYPE)
        self.l3 = torch.nn.Linear(hidden, 1).to(DTYPE)
        with torch.no_grad():
            for lin in (self.l1, self.l2, self.l3):
                bound = 1.0 / np.sqrt(lin.in_features)
                lin.weight.copy_(torch.rand(lin.weight.shape, generator=g, dtype=DTYPE) * 2 * bound - bound)
                lin.bias.zero_()
            # start near beta^2 = 1
            self.l3.bias.fill_(float(np.log(np.expm1(1.0 - BETA_FLOOR))))

    def forward(self, feats: torch.Tensor) -> torch.Tensor:
        h = torch.relu(self.l1(feats))
        h = torch.relu(self.l2(h))
        return F.softplus(self.l3(h)).squeeze(-1) + BETA_FLOOR


@dataclass
class UncertaintyField:
    predictor: UncertaintyMLP
    features: FeatureProvider
    cached: dict  # keyframe index -> (H, W) numpy beta^2

    @classmethod
    def create(cls, seed: int = 0, features: FeatureProvider | None = None) -> "UncertaintyField":
        features = features or HandcraftedFeatures()
        return cls(UncertaintyMLP(features.dim, seed=seed), features, {})

    def predict(self, image, residual=None) -> torch.Tensor:
        return self.predictor(self.features.features(image, residual))

    def refresh(self, key: int, image, residual=None) -> np.ndarray:
        with torch.no_grad():
            beta2 = self.predict(image, residual).numpy()
        self.cached[key] = beta2
        return beta2

    def map(self, key: int) -> np.ndarray:
        if key not in self.cached:
            raise KeyError(f"no cached uncertainty map for keyframe {key}")
        return self.cached[key]


def uncertainty_residual(static_render: RenderOutput, image, depth, lambda1: float) -> torch.Tensor:
    """``SSIM'_i + lambda1 |D_i - D~_i|`` per pixel (depth only where observed)."""
    image = torch.as_tensor(image, dtype=DTYPE)
    depth = torch.as_tensor(depth, dtype=DTYPE)
    if static_render.color.shape != image.shape or static_render.depth.shape != depth.shape:
        raise ShapeMismatch("render and observation shapes differ")
    dterm = torch.where(depth > 0, torch.abs(static_render.depth - depth), torch.zeros_like(depth))
    return ssim_prime(static_render.color, image) + lambda1 * dterm


def uncertainty_loss(static_render: RenderOutput, image, depth, beta2: torch.Tensor, lambda1: float = 0.5,
                     lambda_reg: float = 0.5, residual: torch.Tensor | None = None) -> torch.Tensor:
    """``mean(r / beta^2) + lambda_reg * mean(log beta^2)``; differentiable in render and beta^2."""
    r = uncertainty_residual(static_render, image, depth, lambda1) if residual is None else residual
    if r.shape != beta2.shape:
        raise ShapeMismatch(f"residual {tuple(r.shape)} vs beta^2 {tuple(beta2.shape)}")
    return (r / beta2).mean() + lambda_reg * torch.log(beta2).mean()


# --------------------------------------------------------------------------
# masks
# --------------------------------------------------------------------------


def threshold_mask(beta2, delta_u: float = 3.5) -> np.ndarray:
    beta2 = beta2.detach().numpy() if torch.is_tensor(beta2) else np.asarray(beta2)
    return beta2 > delta_u


def overlap_ratio(candidate, uncertainty_mask) -> float:
    candidate = np.asarray(candidate, dtype=bool)
    uncertainty_mask = np.asarray(uncertainty_mask, dtype=bool)
    if candidate.shape != uncertainty_mask.shape:
        raise ShapeMismatch(f"{candidate.shape} vs {uncertainty_mask.shape}")
    n = int(candidate.sum())
    if n == 0:
        raise EmptyCandidate("empty candidate mask")
    return int((candidate & uncertainty_mask).sum()) / n


def reweighted_mask(M_u, candidates, delta_ru: float = 0.2) -> np.ndarray:
    """``M_u`` merged with every candidate whose overlap ratio exceeds ``delta_ru``."""
    M_u = np.asarray(M_u, dtype=bool)
    out = M_u.copy()
    for c in candidates:
        c = np.asarray(c, dtype=bool)
        if c.shape != M_u.shape:
            raise ShapeMismatch(f"{c.shape} vs {M_u.shape}")
        try:
            rho = overlap_ratio(c, M_u)
        except EmptyCandidate:
            continue
        if rho > delta_ru:
            out |= c
    return out


def sample_prompts(M_u, count: int = 8, seed: int = 0) -> list[tuple[int, int]]:
    """Farthest-point sample of ``count`` masked pixels as (u, v); first pick drawn from ``seed``."""
    M_u = np.asarray(M_u, dtype=bool)
    vs, us = np.nonzero(M_u)
    if len(us) == 0:
        raise EmptyMask("cannot prompt from an empty mask")
    pts = np.stack([us, vs], -1).astype(float)
    if count >= len(pts):
        return [(int(u), int(v)) for u, v in pts]
    rng = np.random.default_rng(seed)
    chosen = [int(rng.integers(len(pts)))]
    d = np.linalg.norm(pts - pts[chosen[0]], axis=-1)
    for _ in range(count - 1):
        nxt = int(np.argmax(d))
        chosen.append(nxt)
        d = np.minimum(d, np.linalg.norm(pts - pts[nxt], axis=-1))
    return [(int(pts[i, 0]), int(pts[i, 1])) for i in chosen]


# --------------------------------------------------------------------------
# file formats
# --------------------------------------------------------------------------

BETA_MAGIC = b"DSBETA2\x00"


def save_mask_png(mask, path) -> None:
    Image.fromarray(np.asarray(mask, dtype=bool).astype(np.uint8) * 255).save(path)


def load_mask_png(path) -> np.ndarray:
    return np.asarray(Image.open(path)) > 127


def save_beta_grid(beta2, path) -> None:
    """16-byte header (8-byte magic, uint32 width, uint32 height) + float32 row-major."""
    b = np.asarray(beta2, dtype="<f4")
    H, W = b.shape
    with open(path, "wb") as f:
        f.write(BETA_MAGIC + struct.pack("<II", W, H))
        f.write(b.tobytes())


def load_beta_grid(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:8] != BETA_MAGIC:
        raise ValidationError(f"{path}: bad magic")
    W, H = struct.unpack("<II", data[8:16])
    return np.frombuffer(data[16:], dtype="<f4", count=W * H).reshape(H, W).copy()
