"""
Session configuration: one INI section per module, ``key = value`` lines.

Every key has a typed default; loading rejects unknown sections and keys and
values that do not parse or fall outside their range.
"""

from __future__ import annotations

import configparser
import io
from dataclasses import dataclass, field, fields
from pathlib import Path

from .errors import ValidationError


@dataclass
class SessionSection:
    seed: int = 0


@dataclass
class TrackerSection:
    stride: int = 4
    flow_thresh: float = 8.0
    overlap_thresh: float = 0.85
    edge_radius: int = 3
    max_iters: int = 50
    tol: float = 1e-6
    lambda_init: float = 1e-4
    depth_prior_weight: float = 1e3
    flow_noise: float = 0.0
    outlier_fraction: float = 0.0
    outlier_px: float = 10.0
    refine_with_uncertainty: bool = True


@dataclass
class UncertaintySection:
    delta_u: float = 3.5
    delta_ru: float = 0.2
    lambda1_u: float = 0.5
    lambda_reg: float = 0.5
    prompts: int = 8
    noisy_segmentation: bool = True


@dataclass
class ExposureSection:
    rot_step: float = 0.005
    trans_step: float = 0.005
    max_samples: int = 12
    sigma_rot: float = 1e-3
    sigma_trans: float = 1e-3
    per_channel: bool = False


@dataclass
class MapperSection:
    static_iterations: int = 300
    dynamic_iterations: int = 500
    lambda1: float = 0.2
    lambda2: float = 0.5
    w_velocity: float = 1.0
    w_acceleration: float = 1.0
    w_arap: float = 1.0
    w_aow: float = 0.1
    lr_means: float = 2.5e-3
    lr_colors: float = 1e-2
    lr_opacity: float = 1e-2
    lr_scales: float = 5e-3
    lr_rotations: float = 1e-3
    lr_scaffold: float = 1e-3
    lr_aow: float = 1e-3
    lr_exposure: float = 1e-3
    lr_exposure_pose: float = 1e-3
    lr_mlp: float = 5e-4
    densify_interval: int = 100
    grad_threshold: float = 2e-4
    prune_opacity: float = 0.005
    max_gaussians: int = 20000
    seed_stride: int = 2
    dynamic_stride: int = 2
    k_nn: int = 8
    max_nodes: int = 64
    refine_poses: bool = False
    use_aow: bool = True
    use_ir: bool = True
    use_rum: bool = True


SECTIONS = {
    "session": SessionSection,
    "tracker": TrackerSection,
    "uncertainty": UncertaintySection,
    "exposure": ExposureSection,
    "mapper": MapperSection,
}

# keys that must be strictly positive; everything numeric must be >= 0
_POSITIVE = {"stride", "flow_thresh", "max_iters", "tol", "lambda_init", "rot_step", "trans_step", "max_samples",
             "densify_interval", "seed_stride", "dynamic_stride", "k_nn", "max_nodes", "max_gaussians", "outlier_px"}
_FRACTIONS = {"overlap_thresh", "outlier_fraction", "delta_ru"}


def _parse_bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _convert(kind, raw: str):
    if kind is bool or kind == "bool":
        return _parse_bool(raw)
    if kind is int or kind == "int":
        return int(raw)
    return float(raw)


@dataclass
class SessionConfig:
    session: SessionSection = field(default_factory=SessionSection)
    tracker: TrackerSection = field(default_factory=TrackerSection)
    uncertainty: UncertaintySection = field(default_factory=UncertaintySection)
    exposure: ExposureSection = field(default_factory=ExposureSection)
    mapper: MapperSection = field(default_factory=MapperSection)

    def set(self, dotted: str, raw: str) -> None:
        """Override ``section.key`` from its string form (validated)."""
        if "." not in dotted:
            raise ValidationError(f"expected section.key, got {dotted!r}")
        sec, key = dotted.split(".", 1)
        if sec not in SECTIONS:
            raise ValidationError(f"unknown section {sec!r}")
        obj = getattr(self, sec)
        types = {f.name: f.type for f in fields(obj)}
        if key not in types:
            raise ValidationError(f"unknown key {sec}.{key}")
        try:
            val = _convert(types[key], str(raw))
        except ValueError as e:
            raise ValidationError(f"{sec}.{key}: {e}") from e
        setattr(obj, key, val)
        self.validate()

    def validate(self) -> None:
        for sec in SECTIONS:
            obj = getattr(self, sec)
            for f in fields(obj):
                v = getattr(obj, f.name)
                if isinstance(v, bool) or f.name == "seed":
                    continue
                if v != v or v in (float("inf"), float("-inf")):
                    raise ValidationError(f"{sec}.{f.name} must be finite")
                if f.name in _POSITIVE and v <= 0:
                    raise ValidationError(f"{sec}.{f.name} must be positive")
                if v < 0:
                    raise ValidationError(f"{sec}.{f.name} must be non-negative")
                if f.name in _FRACTIONS and v > 1:
                    raise ValidationError(f"{sec}.{f.name} must be in [0, 1]")

    def to_ini(self) -> str:
        cp = configparser.ConfigParser()
        for sec in SECTIONS:
            obj = getattr(self, sec)
            cp[sec] = {f.name: repr(getattr(obj, f.name)).lower() if isinstance(getattr(obj, f.name), bool)
                       else repr(getattr(obj, f.name)) for f in fields(obj)}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    def save(self, path) -> None:
        Path(path).write_text(self.to_ini())

    @classmethod
    def from_string(cls, text: str) -> "SessionConfig":
        cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
        try:
            cp.read_string(text)
        except configparser.Error as e:
            raise ValidationError(f"unparseable config: {e}") from e
        cfg = cls()
        for sec in cp.sections():
            if sec not in SECTIONS:
                raise ValidationError(f"unknown section [{sec}]")
            for key, raw in cp[sec].items():
                cfg.set(f"{sec}.{key}", raw)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "SessionConfig":
        p = Path(path)
        if not p.is_file():
            raise ValidationError(f"config not found: {p}")
        return cls.from_string(p.read_text())


def default_config() -> SessionConfig:
    return SessionConfig()
