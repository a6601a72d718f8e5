"""Experiment configuration: dataclasses, named profiles with inheritance, YAML loading."""
from __future__ import annotations

import copy
import os
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Any

import yaml

from ..adversarial import PatchConfig, PsadConfig
from ..dataset import pose_channels
from ..geometry import WarpNetConfig
from ..parsing import ParseNetConfig
from ..synthesis import TryOnConfig

HOME_ENV = "VTRYON_HOME"


class ConfigError(ValueError):
    pass


def default_home() -> Path:
    return Path(os.environ.get(HOME_ENV, Path.home() / ".cache" / "vtryon"))


@dataclass
class ResolutionProfile:
    height: int = 256
    width: int = 192
    hd: bool = False


@dataclass
class TrainSchedule:
    warp_iters: int = 100_000
    parse_iters: int = 50_000
    tryon_iters: int = 150_000
    lr: float = 1e-4
    stage_lr: dict[str, float] = field(default_factory=dict)  # per-stage overrides of lr
    betas: tuple[float, float] = (0.9, 0.999)
    batch_size: int = 32
    lambda_const: float = 0.01
    lambda_adv: float = 0.1
    log_every: int = 100
    checkpoint_every: int = 0
    seed: int = 0
    num_workers: int = 0

    def iters(self, stage: str) -> int:
        return {"warp": self.warp_iters, "parse": self.parse_iters, "tryon": self.tryon_iters}[stage]

    def lr_for(self, stage: str) -> float:
        return self.stage_lr.get(stage, self.lr)


@dataclass
class ExperimentConfig:
    name: str = "base"
    profile: ResolutionProfile = field(default_factory=ResolutionProfile)
    pose_mode: str = "keypoints"
    dilation_radius: int | None = None
    schedule: TrainSchedule = field(default_factory=TrainSchedule)
    warp: WarpNetConfig = field(default_factory=WarpNetConfig)
    parse: ParseNetConfig = field(default_factory=ParseNetConfig)
    tryon: TryOnConfig = field(default_factory=TryOnConfig)
    psad: PsadConfig = field(default_factory=PsadConfig)
    patch: PatchConfig = field(default_factory=PatchConfig)
    perceptual_seed: int = 0

    @property
    def resolution(self) -> tuple[int, int]:
        return self.profile.height, self.profile.width

    @property
    def pose_channels(self) -> int:
        return pose_channels(self.pose_mode)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        return _build(cls, d)

    def validate(self) -> "ExperimentConfig":
        h, w = self.resolution
        if h * 3 != w * 4:
            raise ConfigError(f"resolution {h}x{w} is not 4:3")
        if self.pose_mode not in ("keypoints", "densepose"):
            raise ConfigError(f"pose_mode must be keypoints or densepose, got {self.pose_mode!r}")
        flags = {"warp.hd_extra_downsample": self.warp.hd_extra_downsample,
                 "parse.hd_extra_block": self.parse.hd_extra_block,
                 "tryon.hd_extra_block": self.tryon.hd_extra_block}
        if h >= 512 and not self.profile.hd:
            raise ConfigError(f"{h}x{w} is a high-resolution profile but profile.hd is off")
        bad = [k for k, v in flags.items() if v != self.profile.hd]
        if bad:
            raise ConfigError(f"profile.hd={self.profile.hd} but {', '.join(bad)} disagree")
        factor = 2 ** (5 if self.profile.hd else 4)
        if h % factor or w % factor:
            raise ConfigError(f"resolution {h}x{w} must be divisible by {factor}")
        s = self.schedule
        if min(s.warp_iters, s.parse_iters, s.tryon_iters) < 0 or s.batch_size < 1 or s.lr <= 0:
            raise ConfigError("schedule values must be positive")
        unknown = set(s.stage_lr) - {"warp", "parse", "tryon"}
        if unknown or any(v <= 0 for v in s.stage_lr.values()):
            raise ConfigError(f"stage_lr must map warp/parse/tryon to positive rates, got {s.stage_lr}")
        return self


def _build(cls, d: dict):
    if not isinstance(d, dict):
        raise ConfigError(f"expected a mapping for {cls.__name__}, got {d!r}")
    known = {f.name: f for f in fields(cls)}
    unknown = set(d) - set(known)
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    kwargs = {}
    for name, value in d.items():
        default = getattr(cls(), name) if name in known else None
        if is_dataclass(default):
            kwargs[name] = _build(type(default), value)
        elif isinstance(default, tuple):
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    return cls(**kwargs)


def _merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


_HD = {"profile": {"hd": True}, "warp": {"hd_extra_downsample": True},
       "parse": {"hd_extra_block": True}, "tryon": {"hd_extra_block": True}}

PROFILES: dict[str, dict[str, Any]] = {
    "base": {},
    "hd512": _merge(_HD, {"inherit": "base", "profile": {"height": 512, "width": 384},
                          "schedule": {"batch_size": 16}}),
    "hd1024": {"inherit": "hd512", "profile": {"height": 1024, "width": 768}},
    # desk scale: tiny synthetic corpus on one CPU
    "desk": {
        "inherit": "base",
        "profile": {"height": 64, "width": 48},
        "schedule": {"warp_iters": 500, "parse_iters": 500, "tryon_iters": 500, "batch_size": 4,
                     "lr": 1e-3, "stage_lr": {"warp": 3e-4}, "log_every": 50},
        "warp": {"ngf": 16}, "parse": {"ngf": 16}, "tryon": {"ngf": 16},
        "psad": {"ndf": 16}, "patch": {"ndf": 16},
    },
}


def _resolve(spec: dict, seen: tuple = ()) -> dict:
    parent = spec.get("inherit")
    body = {k: v for k, v in spec.items() if k != "inherit"}
    if parent is None:
        return body
    if parent in seen:
        raise ConfigError(f"profile inheritance cycle at {parent!r}")
    if parent in PROFILES:
        parent_spec = PROFILES[parent]
    elif Path(parent).exists():
        parent_spec = yaml.safe_load(Path(parent).read_text()) or {}
    else:
        raise ConfigError(f"unknown profile {parent!r}")
    return _merge(_resolve(parent_spec, seen + (parent,)), body)


def load_config(source: str | Path | dict | None = "base", overrides: dict | None = None) -> ExperimentConfig:
    """Resolve a profile name, YAML file path or mapping (with ``inherit`` chains) into a config."""
    if source is None:
        source = "base"
    if isinstance(source, dict):
        spec, name = source, source.get("name", "custom")
    elif str(source) in PROFILES:
        spec, name = {"inherit": str(source)}, str(source)
    else:
        path = Path(source)
        if not path.exists():
            raise ConfigError(f"config {source!r} is neither a profile nor a file")
        try:
            spec = yaml.safe_load(path.read_text()) or {}
        except yaml.YAMLError as err:
            raise ConfigError(f"cannot parse {path}: {err}") from err
        name = spec.get("name", path.stem)
    resolved = _resolve(spec)
    if overrides:
        resolved = _merge(resolved, overrides)
    resolved["name"] = resolved.get("name", name) if isinstance(source, dict) else name
    return ExperimentConfig.from_dict(resolved).validate()
