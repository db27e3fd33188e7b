"""
Command line: ``dynsplat synth|track|map|render|eval|ablate``.

Exit status is 0 on success, 2 for invalid input (bad flags, configuration
or scene files) and 1 for any other failure.
"""

from __future__ import annotations

import argparse
import logging
import shutil
import sys
from importlib import resources
from pathlib import Path

import numpy as np

from .config import SessionConfig
from .errors import DynSplatError, ValidationError

log = logging.getLogger("dynsplat")

BUNDLED_SCENES = {"box": "box_scene.ini"}
BUNDLED_SESSIONS = {"box": "box_session.ini"}
ABLATIONS = {"ir": "mapper.use_ir", "aow": "mapper.use_aow", "rum": "mapper.use_rum"}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(2)


def bundled_path(name: str) -> Path:
    return Path(str(resources.files("dynsplat") / "data" / name))


def resolve_scene(spec: str) -> Path:
    """A scene file path, or the name of a bundled scene."""
    if spec in BUNDLED_SCENES and not Path(spec).exists():
        return bundled_path(BUNDLED_SCENES[spec])
    return Path(spec)


def load_config(path: str | None, overrides, fallback: Path | None = None) -> SessionConfig:
    if path:
        cfg = SessionConfig.load(path)
    elif fallback is not None and fallback.is_file():
        cfg = SessionConfig.load(fallback)
    else:
        cfg = SessionConfig()
    for item in overrides or []:
        if "=" not in item:
            raise ValidationError(f"--set expects section.key=value, got {item!r}")
        k, v = item.split("=", 1)
        cfg.set(k.strip(), v.strip())
    return cfg


def _pose_arg(text: str):
    from .se3 import SE3Pose

    vals = [float(x) for x in text.replace(",", " ").split()]
    if len(vals) != 7:
        raise ValidationError("--pose expects 'tx ty tz qx qy qz qw'")
    return SE3Pose.from_tum(*vals)


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------


def cmd_synth(args) -> int:
    from .synthetic import generate_synthetic

    spec = resolve_scene(args.spec)
    out = generate_synthetic(spec, args.out, overwrite=args.overwrite)
    if args.spec in BUNDLED_SESSIONS and not Path(args.spec).exists():
        shutil.copyfile(bundled_path(BUNDLED_SESSIONS[args.spec]), Path(args.out) / "session.ini")
    print(out)
    return 0


def cmd_track(args) -> int:
    from .pipeline import track

    cfg = load_config(args.config, args.set, Path(args.dataset) / "session.ini")
    sess = track(args.dataset, args.session, cfg)
    print(f"{len(sess.keyframes)} keyframes: {[kf.frame_id for kf in sess.keyframes]}")
    return 0


def _load_session(root, overrides, config_path=None):
    from .session import Session

    sess = Session.load(root)
    if config_path or overrides:
        base = config_path or (Path(root) / "config.ini")
        sess.config = load_config(str(base), overrides)
    return sess


def cmd_map(args) -> int:
    from .pipeline import map_session

    sess = _load_session(args.session, args.set, args.config)
    map_session(sess, sess.config, checkpoint_every=args.checkpoint_every)
    counts = sess.mapping.scene.counts()
    print(f"mapped: {counts['static']} static, {counts['dynamic']} dynamic Gaussians")
    return 0


def cmd_render(args) -> int:
    from PIL import Image

    from .pipeline import open_mapping

    sess = _load_session(args.session, args.set)
    ms = open_mapping(sess)
    n = len(sess.keyframes)
    if not 0 <= args.time < n:
        raise ValidationError(f"--time must be a keyframe index in [0, {n - 1}]")
    pose = _pose_arg(args.pose) if args.pose else None
    out = ms.render(args.time, pose=pose, ir=args.blur)
    img = (np.clip(out.color.numpy(), 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    path = Path(args.out) if args.out else sess.root / "renders" / f"render_{args.time:03d}.png"
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(img).save(path)
    print(path)
    return 0


def cmd_eval(args) -> int:
    from .evaluate import evaluate, write_figures, write_metrics
    from .pipeline import open_mapping

    sess = _load_session(args.session, None)
    if sess.has_mapping():
        open_mapping(sess)
    metrics = evaluate(sess, args.gt, sim3=args.sim3)
    out = Path(args.out) if args.out else sess.root / "metrics.txt"
    write_metrics(metrics, out)
    if not args.no_figures:
        write_figures(sess, args.gt, Path(args.figures) if args.figures else sess.root / "figures")
    print(out.read_text(), end="")
    return 0


def cmd_ablate(args) -> int:
    from .pipeline import map_session
    from .session import Session

    src = Session.load(args.session)
    dst = Path(args.out) if args.out else Path(f"{str(Path(args.session)).rstrip('/')}_no{args.disable}")
    if dst.exists() and any(dst.iterdir()):
        if not args.overwrite:
            raise ValidationError(f"{dst} exists and is not empty (use --overwrite)")
        shutil.rmtree(dst)
    cfg = load_config(str(src.root / "config.ini"), list(args.set or []) + [f"{ABLATIONS[args.disable]}=false"])
    sess = Session(dst, cfg, src.camera, src.keyframes, src.dataset_root)
    sess.save()
    map_session(sess, cfg)
    if args.gt:
        from .evaluate import evaluate, write_metrics

        write_metrics(evaluate(sess, args.gt), dst / "metrics.txt")
        print((dst / "metrics.txt").read_text(), end="")
    print(dst)
    return 0


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="dynsplat", description="Desk-scale 4D Gaussian splatting SLAM.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def overrides(sp):
        sp.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override a config key")

    s = sub.add_parser("synth", help="generate a synthetic dataset")
    s.add_argument("spec", help="scene file, or a bundled scene name (box)")
    s.add_argument("out")
    s.add_argument("--overwrite", action="store_true")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("track", help="select keyframes and bundle-adjust")
    s.add_argument("dataset")
    s.add_argument("session")
    s.add_argument("--config", help="session config (default: <dataset>/session.ini if present)")
    overrides(s)
    s.set_defaults(func=cmd_track)

    s = sub.add_parser("map", help="run (or resume) 4D mapping")
    s.add_argument("session")
    s.add_argument("--config")
    s.add_argument("--checkpoint-every", type=int, default=0, metavar="N")
    overrides(s)
    s.set_defaults(func=cmd_map)

    s = sub.add_parser("render", help="render a keyframe time from a pose")
    s.add_argument("session")
    s.add_argument("--time", type=int, default=0, help="keyframe index for the dynamic part")
    s.add_argument("--pose", help="camera-to-world 'tx ty tz qx qy qz qw' (default: keyframe pose)")
    s.add_argument("--blur", action="store_true", help="apply the learned exposure model")
    s.add_argument("--out")
    overrides(s)
    s.set_defaults(func=cmd_render)

    s = sub.add_parser("eval", help="metrics against ground truth")
    s.add_argument("session")
    s.add_argument("--gt", required=True, help="dataset directory with ground truth")
    s.add_argument("--out", help="metrics file (default: <session>/metrics.txt)")
    s.add_argument("--figures", help="figure directory (default: <session>/figures)")
    s.add_argument("--no-figures", action="store_true")
    s.add_argument("--sim3", action="store_true", help="scaled trajectory alignment")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("ablate", help="re-map a tracked session with one component disabled")
    s.add_argument("session")
    s.add_argument("--disable", required=True, choices=sorted(ABLATIONS))
    s.add_argument("--out", help="new session directory (default: <session>_no<component>)")
    s.add_argument("--gt", help="also evaluate against this dataset")
    s.add_argument("--overwrite", action="store_true")
    overrides(s)
    s.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        return args.func(args)
    except ValidationError as e:
        print(f"dynsplat: error: {e}", file=sys.stderr)
        return 2
    except (DynSplatError, OSError, RuntimeError, ValueError) as e:
        print(f"dynsplat: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
