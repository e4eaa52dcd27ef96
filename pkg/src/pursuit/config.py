"""Run configuration: INI-style file with one section per subsystem, flag overrides.

Unknown sections or keys are rejected by name. Every knob has a default, so an
empty (or absent) config file yields the desk-scale profile.
"""

from __future__ import annotations

import configparser
import hashlib
import io
from dataclasses import dataclass, fields, replace
from pathlib import Path

from .environment import ConfigError, EnvParams
from .imagery import GrayImage, load_pgm, normalize_texture, synth_texture

__all__ = [
    "Config",
    "TrainerCfg",
    "ImageryCfg",
    "SparseCfg",
    "FeaturesCfg",
    "PolicyCfg",
    "AnalysisCfg",
    "default_config",
    "smoke_config",
    "load_config",
    "parse_overrides",
    "config_text",
    "config_hash",
    "build_corpora",
]

# synthetic corpora use fixed seed bases so every trial sees the same textures
# while the holdout set stays disjoint from the training set
_TRAIN_TEXTURE_SEED = 100_000
_HOLDOUT_TEXTURE_SEED = 900_000


@dataclass(frozen=True)
class TrainerCfg:
    seed: int = 1
    total_frames: int = 200_000
    policy_head: str = "gaussian"  # or "softmax"
    checkpoint_cadence: int = 100_000
    log_cadence: int = 100

    def __post_init__(self):
        if self.total_frames < 0:
            raise ConfigError("trainer.total_frames must be >= 0")
        if self.checkpoint_cadence < 1 or self.log_cadence < 1:
            raise ConfigError("trainer cadences must be >= 1")
        if self.policy_head not in ("gaussian", "softmax"):
            raise ConfigError(f"trainer.policy_head must be gaussian|softmax, got {self.policy_head!r}")


@dataclass(frozen=True)
class ImageryCfg:
    train_corpus: str = ""  # directory of .pgm files; empty selects synthetic
    holdout_corpus: str = ""
    synthetic_train_count: int = 20
    synthetic_holdout_count: int = 10
    texture_px: int = 256

    def __post_init__(self):
        if self.texture_px < 55:
            raise ConfigError("imagery.texture_px must be >= 55")
        if self.synthetic_train_count < 1 or self.synthetic_holdout_count < 1:
            raise ConfigError("imagery synthetic counts must be >= 1")


@dataclass(frozen=True)
class SparseCfg:
    atom_count: int = 300
    kmax: int = 10
    tol: float = 0.0
    lr: float = 0.05
    lr_tau: float = 100_000.0

    def __post_init__(self):
        if self.atom_count < 1 or self.kmax < 1:
            raise ConfigError("sparsecode.atom_count and kmax must be >= 1")
        if self.lr < 0 or self.lr_tau <= 0:
            raise ConfigError("sparsecode.lr must be >= 0 and lr_tau > 0")

    def lr_at(self, frame: int) -> float:
        return self.lr / (1.0 + frame / self.lr_tau)


@dataclass(frozen=True)
class FeaturesCfg:
    divisive_normalization: bool = False


@dataclass(frozen=True)
class PolicyCfg:
    temperature: float = 1.0
    temperature_decay: float = 1.0  # per-frame multiplier; 1.0 disables decay
    temperature_min: float = 0.05
    sigma: float = 1.0
    hidden_units: int = 5
    n_actions: int = 11
    init_scale: float = 0.01
    alpha_v: float = 1e-2
    alpha_w: float = 5e-3
    alpha_theta: float = 1e-3
    trace_lambda: float = 0.0
    gamma: float = 0.3
    natural_gradient: bool = True

    def __post_init__(self):
        if not 0 < self.temperature or not 0 < self.sigma:
            raise ConfigError("policy.temperature and sigma must be positive")
        if not 0 <= self.gamma < 1:
            raise ConfigError("policy.gamma must be in [0, 1)")

    def temperature_at(self, frame: int) -> float:
        if self.temperature_decay == 1.0:
            return self.temperature
        return max(self.temperature_min, self.temperature * self.temperature_decay**frame)


@dataclass(frozen=True)
class AnalysisCfg:
    pairs_per_condition: int = 50
    eval_seed: int = 2024
    gabor_fit_threshold: float = 0.3
    trials: int = 3


@dataclass(frozen=True)
class Config:
    trainer: TrainerCfg
    imagery: ImageryCfg
    environment: EnvParams
    sparsecode: SparseCfg
    features: FeaturesCfg
    policy: PolicyCfg
    analysis: AnalysisCfg


_SECTIONS = {
    "trainer": TrainerCfg,
    "imagery": ImageryCfg,
    "environment": EnvParams,
    "sparsecode": SparseCfg,
    "features": FeaturesCfg,
    "policy": PolicyCfg,
    "analysis": AnalysisCfg,
}


def default_config() -> Config:
    return Config(**{name: cls() for name, cls in _SECTIONS.items()})


def smoke_config(seed: int = 1, frames: int = 10_000) -> Config:
    """The small CI profile: 64 atoms, a 5x5 patch grid, short run."""
    cfg = default_config()
    return replace(
        cfg,
        trainer=replace(cfg.trainer, seed=seed, total_frames=frames,
                        checkpoint_cadence=max(1, frames), log_cadence=50),
        imagery=replace(cfg.imagery, synthetic_train_count=6,
                        synthetic_holdout_count=3, texture_px=128),
        environment=replace(cfg.environment, fovea_px=30),
        sparsecode=replace(cfg.sparsecode, atom_count=64, lr_tau=float(max(1, frames))),
    )


def _coerce(raw: str, target_type: type, where: str):
    try:
        if target_type is bool:
            lowered = raw.strip().lower()
            if lowered in ("1", "true", "yes", "on"):
                return True
            if lowered in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        return target_type(raw)
    except ValueError:
        raise ConfigError(f"cannot parse {where} = {raw!r} as {target_type.__name__}") from None


def _apply(cfg: Config, section: str, key: str, raw: str) -> Config:
    cls = _SECTIONS.get(section)
    if cls is None:
        raise ConfigError(f"unknown config section [{section}]")
    field_types = {f.name: f.type for f in fields(cls)}
    if key not in field_types:
        raise ConfigError(f"unknown config key {section}.{key}")
    current = getattr(cfg, section)
    target_type = type(getattr(current, key))
    value = _coerce(raw, target_type, f"{section}.{key}")
    return replace(cfg, **{section: replace(current, **{key: value})})


def load_config(path: str | Path | None, overrides: list[tuple[str, str, str]] = ()) -> Config:
    """Build a Config from an optional INI file plus (section, key, value) overrides."""
    cfg = default_config()
    if path is not None:
        parser = configparser.ConfigParser(interpolation=None)
        try:
            with open(path, "r") as fh:
                parser.read_file(fh)
        except OSError as e:
            raise ConfigError(f"cannot read config file {path}: {e}") from e
        except configparser.Error as e:
            raise ConfigError(f"malformed config file {path}: {e}") from e
        for section in parser.sections():
            for key, raw in parser.items(section):
                cfg = _apply(cfg, section, key, raw)
    for section, key, raw in overrides:
        cfg = _apply(cfg, section, key, raw)
    return cfg


def parse_overrides(pairs: list[str]) -> list[tuple[str, str, str]]:
    """Parse `--set section.key=value` strings."""
    out = []
    for pair in pairs:
        if "=" not in pair or "." not in pair.split("=", 1)[0]:
            raise ConfigError(f"override {pair!r} must look like section.key=value")
        dotted, value = pair.split("=", 1)
        section, key = dotted.split(".", 1)
        out.append((section.strip(), key.strip(), value.strip()))
    return out


def config_text(cfg: Config) -> str:
    """Canonical INI rendering; the basis of the config hash."""
    buf = io.StringIO()
    for section in sorted(_SECTIONS):
        buf.write(f"[{section}]\n")
        sub = getattr(cfg, section)
        for f in sorted(fields(type(sub)), key=lambda f: f.name):
            buf.write(f"{f.name} = {getattr(sub, f.name)!r}\n")
        buf.write("\n")
    return buf.getvalue()


def config_hash(cfg: Config) -> str:
    return hashlib.sha256(config_text(cfg).encode()).hexdigest()


# ---------------------------------------------------------------------------
# Corpus resolution
# ---------------------------------------------------------------------------


def _load_dir(path: str) -> tuple[GrayImage, ...]:
    files = sorted(Path(path).glob("*.pgm"))
    if not files:
        raise ConfigError(f"no .pgm textures found in {path}")
    return tuple(normalize_texture(load_pgm(f.read_bytes())) for f in files)


def _synthetic(count: int, base_seed: int, size: int) -> tuple[GrayImage, ...]:
    return tuple(
        normalize_texture(synth_texture(base_seed + i, size, size)) for i in range(count)
    )


def build_corpora(cfg: Config) -> tuple[tuple[GrayImage, ...], tuple[GrayImage, ...]]:
    """Resolve (train, holdout) texture sets; they must be disjoint."""
    im = cfg.imagery
    train = _load_dir(im.train_corpus) if im.train_corpus else _synthetic(
        im.synthetic_train_count, _TRAIN_TEXTURE_SEED, im.texture_px
    )
    holdout = _load_dir(im.holdout_corpus) if im.holdout_corpus else _synthetic(
        im.synthetic_holdout_count, _HOLDOUT_TEXTURE_SEED, im.texture_px
    )
    digests = {tex.pixels.tobytes() for tex in train}
    for i, tex in enumerate(holdout):
        if tex.pixels.tobytes() in digests:
            raise ConfigError(f"holdout texture {i} also appears in the training corpus")
    return train, holdout
