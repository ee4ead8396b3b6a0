"""Experiment configuration: flat dotted key-value files over typed defaults.

Resolution is layered: built-in defaults, then the config file, then CLI
overrides; every key's provenance is tracked and echoed into the run
directory.  Unknown keys, type mismatches, and out-of-range values are
rejected with the offending key named, never silently ignored.

File format: one `section.key = value` per line, `#` comments, blank lines
allowed.  Example:

    schedule.T = 200
    train.alpha = 0.1
    denoiser.widths = 16,32,64,64
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path

from .training import MODES

__all__ = [
    "AudioCfg", "ScheduleCfg", "VaeCfg", "DenoiserCfg", "ConditioningCfg",
    "TrainCfg", "EvalCfg", "ExperimentConfig", "load_config", "resolve_config",
    "echo_config",
]


@dataclass
class AudioCfg:
    griffin_lim_iters: int = 64
    log_max: float = 14.0


@dataclass
class ScheduleCfg:
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02


@dataclass
class VaeCfg:
    latent_channels: int = 1
    base_channels: int = 8
    epochs: int = 30
    batch_size: int = 8
    lr: float = 2e-3
    kl_weight: float = 1e-6
    target_mse: float = 0.0
    adversarial: bool = False  # reserved hook, not implemented at desk scale


@dataclass
class DenoiserCfg:
    widths: tuple = (16, 32, 64, 64)
    res_units: int = 2
    time_dim: int = 64
    cross_attention: bool = False


@dataclass
class ConditioningCfg:
    d_v: int = 64
    joints: int = 8
    fps: float = 30.0
    d_p: int = 64
    d_q: int = 32
    visual_frozen: bool = False


@dataclass
class TrainCfg:
    alpha: float = 0.1
    mode: str = "PN"
    batch_size: int = 32
    lr: float = 1e-4
    epochs: int = 100
    max_steps: int = 0
    grad_clip: float = 1.0
    ema_decay: float = 0.0


@dataclass
class EvalCfg:
    window: float = 0.1
    sensitivity: float = 1.0
    embed_dim: int = 32
    steps: int = 1000


@dataclass
class ExperimentConfig:
    audio: AudioCfg = field(default_factory=AudioCfg)
    schedule: ScheduleCfg = field(default_factory=ScheduleCfg)
    vae: VaeCfg = field(default_factory=VaeCfg)
    denoiser: DenoiserCfg = field(default_factory=DenoiserCfg)
    conditioning: ConditioningCfg = field(default_factory=ConditioningCfg)
    train: TrainCfg = field(default_factory=TrainCfg)
    eval: EvalCfg = field(default_factory=EvalCfg)
    seed: int = 0
    out_dir: str = "runs"


_SECTIONS = ("audio", "schedule", "vae", "denoiser", "conditioning", "train", "eval")


def _known_keys(cfg: ExperimentConfig) -> dict[str, object]:
    keys = {}
    for section in _SECTIONS:
        sub = getattr(cfg, section)
        for f in fields(sub):
            keys[f"{section}.{f.name}"] = getattr(sub, f.name)
    keys["seed"] = cfg.seed
    keys["out_dir"] = cfg.out_dir
    return keys


def _parse_value(key: str, raw: str, default):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("true", "yes", "on", "1"):
                return True
            if low in ("false", "no", "off", "0"):
                return False
            raise ValueError
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(int(p) for p in raw.split(",") if p.strip())
        return raw
    except ValueError:
        raise ValueError(
            f"{key}: cannot parse {raw!r} as {type(default).__name__}") from None


def _set_key(cfg: ExperimentConfig, key: str, value) -> None:
    if key in ("seed", "out_dir"):
        setattr(cfg, key, value)
        return
    section, _, name = key.partition(".")
    if section not in _SECTIONS or not name:
        raise ValueError(f"unknown config key {key!r}")
    sub = getattr(cfg, section)
    if not hasattr(sub, name):
        raise ValueError(f"unknown config key {key!r}")
    setattr(sub, name, value)


def _check(cond: bool, key: str, message: str) -> None:
    if not cond:
        raise ValueError(f"{key} {message}")


def validate_config(cfg: ExperimentConfig) -> None:
    _check(cfg.audio.griffin_lim_iters >= 0, "audio.griffin_lim_iters", "must be >= 0")
    _check(cfg.audio.log_max > 0, "audio.log_max", "must be positive")
    _check(cfg.schedule.T >= 1, "schedule.T", "must be a positive step count")
    _check(0 < cfg.schedule.beta_start < 1, "schedule.beta_start", "must lie in (0, 1)")
    _check(0 < cfg.schedule.beta_end < 1, "schedule.beta_end", "must lie in (0, 1)")
    _check(cfg.schedule.beta_start <= cfg.schedule.beta_end,
           "schedule.beta_start", "must not exceed schedule.beta_end")
    _check(cfg.vae.latent_channels >= 1, "vae.latent_channels", "must be >= 1")
    _check(cfg.vae.base_channels >= 1, "vae.base_channels", "must be >= 1")
    _check(cfg.vae.epochs >= 1, "vae.epochs", "must be >= 1")
    _check(cfg.vae.batch_size >= 1, "vae.batch_size", "must be >= 1")
    _check(cfg.vae.lr > 0, "vae.lr", "must be positive")
    _check(cfg.vae.kl_weight >= 0, "vae.kl_weight", "must be >= 0")
    _check(cfg.vae.target_mse >= 0, "vae.target_mse", "must be >= 0")
    _check(not cfg.vae.adversarial, "vae.adversarial",
           "is a reserved hook; adversarial training is not implemented")
    _check(len(cfg.denoiser.widths) == 4 and all(w >= 1 for w in cfg.denoiser.widths),
           "denoiser.widths", "must be 4 positive channel counts")
    _check(cfg.denoiser.res_units >= 1, "denoiser.res_units", "must be >= 1")
    _check(cfg.denoiser.time_dim >= 2 and cfg.denoiser.time_dim % 2 == 0,
           "denoiser.time_dim", "must be even and >= 2")
    _check(cfg.conditioning.d_v >= 1, "conditioning.d_v", "must be >= 1")
    _check(cfg.conditioning.joints >= 2, "conditioning.joints", "must be >= 2")
    _check(cfg.conditioning.fps > 0, "conditioning.fps", "must be positive")
    _check(cfg.conditioning.d_p >= 1, "conditioning.d_p", "must be >= 1")
    _check(cfg.conditioning.d_q >= 1, "conditioning.d_q", "must be >= 1")
    _check(0.0 <= cfg.train.alpha <= 1.0, "train.alpha", "must lie in [0, 1]")
    _check(cfg.train.mode in MODES, "train.mode",
           f"must be one of {sorted(MODES)}, got {cfg.train.mode!r}")
    _check(cfg.train.batch_size >= 1, "train.batch_size", "must be >= 1")
    _check(cfg.train.lr > 0, "train.lr", "must be positive")
    _check(cfg.train.epochs >= 1, "train.epochs", "must be >= 1")
    _check(cfg.train.max_steps >= 0, "train.max_steps", "must be >= 0")
    _check(cfg.train.grad_clip >= 0, "train.grad_clip", "must be >= 0")
    _check(0.0 <= cfg.train.ema_decay < 1.0, "train.ema_decay", "must lie in [0, 1)")
    _check(cfg.eval.window >= 0, "eval.window", "must be >= 0")
    _check(cfg.eval.sensitivity > 0, "eval.sensitivity", "must be positive")
    _check(cfg.eval.embed_dim >= 4 and cfg.eval.embed_dim % 4 == 0,
           "eval.embed_dim", "must be a positive multiple of 4")
    _check(cfg.eval.steps >= 1, "eval.steps", "must be >= 1")


def _parse_file(path) -> dict[str, str]:
    entries = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ValueError(f"{path}:{lineno}: expected 'key = value', got {stripped!r}")
        key, _, raw = stripped.partition("=")
        entries[key.strip()] = raw.split("#", 1)[0].strip()
    return entries


def resolve_config(file_path=None, overrides: dict[str, str] | None = None
                   ) -> tuple[ExperimentConfig, dict[str, str]]:
    """Layer defaults <- file <- overrides; returns (config, provenance)."""
    cfg = ExperimentConfig()
    defaults = _known_keys(cfg)
    provenance = {k: "default" for k in defaults}
    for source, entries in (("file", _parse_file(file_path) if file_path else {}),
                            ("cli", dict(overrides or {}))):
        for key, raw in entries.items():
            if key not in defaults:
                raise ValueError(f"unknown config key {key!r}")
            _set_key(cfg, key, _parse_value(key, raw, defaults[key]))
            provenance[key] = source
    validate_config(cfg)
    return cfg, provenance


def load_config(path) -> ExperimentConfig:
    """Parse and validate one config file over the built-in defaults."""
    if not Path(path).exists():
        raise FileNotFoundError(f"config file not found: {path}")
    return resolve_config(file_path=path)[0]


def echo_config(cfg: ExperimentConfig, provenance: dict[str, str], path) -> None:
    """Write the resolved configuration with per-key provenance comments."""
    lines = ["# resolved configuration (key = value  # source)"]
    for key, value in _known_keys(cfg).items():
        if isinstance(value, tuple):
            value = ",".join(str(v) for v in value)
        lines.append(f"{key} = {value}  # {provenance.get(key, 'default')}")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text("\n".join(lines) + "\n")
