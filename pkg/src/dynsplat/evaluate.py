"""
Session evaluation: rendering and tracking metrics as ``key=value`` text plus
a few diagnostic figures.

Train-view metrics compare the full (integrate-and-render) output at every
keyframe against the observed, blurred frame. Held-out metrics render the
static map, without the exposure model, at ground-truth poses of frames that
were not keyframes and compare against the sharp reference images on static
pixels only.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from .dataset import TUMDataset, ingest_tum
from .metrics import align_trajectory, ate, psnr, ssim
from .providers import load_instance_map
from .se3 import SE3Pose

METRIC_FORMAT = "{:.6f}"


def _aligned_pose(gt_pose: SE3Pose, R: np.ndarray, t: np.ndarray) -> SE3Pose:
    """Ground-truth pose expressed in the estimate's frame (``est ~ A^-1 gt``)."""
    A = SE3Pose.from_matrix(np.block([[R, t[:, None]], [np.zeros((1, 3)), np.ones((1, 1))]]))
    return A.inverse() @ gt_pose


def heldout_frames(dataset: TUMDataset, keyframe_ids, every: int = 1) -> list[int]:
    kf = set(keyframe_ids)
    return [i for i in range(0, len(dataset), every) if i not in kf and dataset.frames[i].gt_pose is not None]


def evaluate(session, dataset: TUMDataset | str, sim3: bool = False) -> dict:
    """Metrics for a mapped session against the ground truth in ``dataset``."""
    ds = ingest_tum(dataset) if not isinstance(dataset, TUMDataset) else dataset
    ms = session.mapping
    kfs = session.keyframes
    ids = [kf.frame_id for kf in kfs]
    out = {"keyframes": len(kfs)}

    gt = [ds.frames[i].gt_pose for i in ids]
    have_gt = all(p is not None for p in gt)
    if have_gt and len(kfs) >= 3:
        out["ate_cm"] = ate([kf.pose for kf in kfs], gt, sim3=sim3)
    if ms is None:
        return out

    counts = ms.scene.counts()
    out["gaussians"] = counts["total"]
    out["gaussians_static"] = counts["static"]
    out["gaussians_dynamic"] = counts["dynamic"]

    ps, ss = [], []
    for t, kf in enumerate(kfs):
        r = ms.render(t).color.numpy()
        ps.append(psnr(r, kf.image))
        ss.append(ssim(r, kf.image))
    out["train_psnr"] = float(np.mean(ps))
    out["train_ssim"] = float(np.mean(ss))

    sharp_dir = ds.root / "rgb_sharp"
    if have_gt and sharp_dir.is_dir() and len(kfs) >= 3:
        est = np.array([kf.pose.translation for kf in kfs])
        _, R, tr = align_trajectory(est, np.array([p.translation for p in gt]))
        hp, hs = [], []
        for i in heldout_frames(ds, ids):
            fr = ds.frames[i]
            ref = np.asarray(Image.open(sharp_dir / fr.rgb_path.name), dtype=float) / 255.0
            static = load_instance_map(ds, i) == 0
            if not static.any():
                continue
            pose = _aligned_pose(fr.gt_pose, R, tr)
            t_near = int(np.argmin([abs(k - i) for k in ids]))
            r = ms.render(t_near, pose=pose, static_only=True, ir=False).color.numpy()
            hp.append(psnr(r, ref, static))
            hs.append(ssim(r, ref, static))
        if hp:
            out["heldout_static_psnr"] = float(np.mean(hp))
            out["heldout_static_ssim"] = float(np.mean(hs))
    return out


def write_metrics(metrics: dict, path) -> None:
    lines = []
    for k in sorted(metrics):
        v = metrics[k]
        lines.append(f"{k}={v}" if isinstance(v, (int, np.integer)) else f"{k}={METRIC_FORMAT.format(v)}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_metrics(path) -> dict:
    out = {}
    for ln in Path(path).read_text().splitlines():
        if "=" in ln:
            k, v = ln.split("=", 1)
            try:
                out[k.strip()] = int(v)
            except ValueError:
                out[k.strip()] = float(v)
    return out


def write_figures(session, dataset: TUMDataset | str, directory) -> list[Path]:
    """Keyframe panel (observed, render, beta^2, mask), trajectory and loss curves."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    ds = ingest_tum(dataset) if not isinstance(dataset, TUMDataset) else dataset
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    ms = session.mapping
    kfs = session.keyframes
    paths = []

    if ms is not None:
        n = len(kfs)
        fig, axes = plt.subplots(4, n, figsize=(1.6 * n, 5.2), squeeze=False)
        for t, kf in enumerate(kfs):
            r = ms.render(t).color.numpy()
            panels = [kf.image, np.clip(r, 0, 1), ms.beta2[t], ms.masks_ru[t]]
            for row, img in enumerate(panels):
                ax = axes[row, t]
                ax.axis("off")
                if img is None:
                    continue
                ax.imshow(img, cmap=None if np.ndim(img) == 3 else "viridis", interpolation="nearest")
            axes[0, t].set_title(f"kf {t}", fontsize=7)
        for row, name in enumerate(["observed", "render", "beta^2", "RUM"]):
            axes[row, 0].text(-0.1, 0.5, name, transform=axes[row, 0].transAxes, rotation=90, va="center",
                              ha="right", fontsize=7)
        fig.tight_layout()
        p = d / "keyframes.png"
        fig.savefig(p, dpi=120)
        plt.close(fig)
        paths.append(p)

        if ms.history:
            fig, ax = plt.subplots(figsize=(5, 3))
            for phase in ("static", "dynamic"):
                h = [(i, v) for ph, i, v in ms.history if ph == phase]
                if h:
                    x = np.arange(len(h)) if phase == "static" else np.arange(len(h)) + sum(
                        1 for ph, _, _ in ms.history if ph == "static")
                    ax.plot(x, [v for _, v in h], lw=0.8, label=phase)
            ax.set_xlabel("iteration")
            ax.set_ylabel("loss")
            ax.set_yscale("log")
            ax.legend(fontsize=7)
            fig.tight_layout()
            p = d / "loss.png"
            fig.savefig(p, dpi=120)
            plt.close(fig)
            paths.append(p)

    gt = [ds.frames[kf.frame_id].gt_pose for kf in kfs]
    if len(kfs) >= 3 and all(g is not None for g in gt):
        est = np.array([kf.pose.translation for kf in kfs])
        g = np.array([x.translation for x in gt])
        s, R, tr = align_trajectory(est, g)
        al = s * est @ R.T + tr
        fig, ax = plt.subplots(figsize=(4, 4))
        ax.plot(g[:, 0], g[:, 2], "k.-", lw=0.8, label="ground truth")
        ax.plot(al[:, 0], al[:, 2], "r.--", lw=0.8, label="estimate")
        ax.set_xlabel("x [m]")
        ax.set_ylabel("z [m]")
        ax.set_aspect("equal", adjustable="datalim")
        ax.legend(fontsize=7)
        fig.tight_layout()
        p = d / "trajectory.png"
        fig.savefig(p, dpi=120)
        plt.close(fig)
        paths.append(p)
    return paths
