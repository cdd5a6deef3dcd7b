"""
Centralized configuration management
Loads the JSON run config plus environment overrides, with validation
"""

import json
import logging
import os
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Any, Dict, Optional, Tuple, Type, TypeVar

import numpy as np
from dotenv import load_dotenv

# Load environment variables from .env file
load_dotenv()

logger = logging.getLogger(__name__)

T_Section = TypeVar("T_Section")


def _get_optional_env(key: str, default: Optional[str] = None) -> Optional[str]:
    """
    Get an optional environment variable with a default fallback.

    Args:
        key: Environment variable name
        default: Default value if not set

    Returns:
        Environment variable value or default
    """
    return os.getenv(key, default)


# =====================================
# ENVIRONMENT
# =====================================
LOG_LEVEL = _get_optional_env("LOG_LEVEL", "INFO")

DTYPES = {"float32": np.float32, "float64": np.float64}


# =====================================
# CONFIG SECTIONS
# =====================================
@dataclass(frozen=True)
class BackboneConfig:
    kind: str = "tiny_cnn"
    widths: Tuple[int, ...] = (16, 32, 64)
    input_side: int = 125
    pyramid_channels: int = 64
    smooth_merge: bool = False
    mean: Tuple[float, ...] = (0.485, 0.456, 0.406)

    @property
    def stage_sides(self) -> Tuple[int, ...]:
        """Spatial side of each backbone stage, shallow to deep (125 -> 62, 31, 15)."""
        sides, side = [], self.input_side
        for _ in self.widths:
            side //= 2
            sides.append(side)
        return tuple(sides)


@dataclass(frozen=True)
class AlignConfig:
    kernel_side: int = 3
    hidden: int = 64
    dilation: int = 1
    layers: Tuple[int, ...] = (2, 3, 3)


@dataclass(frozen=True)
class AggregateConfig:
    include_current: bool = True
    # 0 = P^l (deepest), 1 = P^{l-1}, 2 = P^{l-2}
    levels: Tuple[int, ...] = (0, 1, 2)
    shared_embedding: bool = True
    widths: Tuple[int, ...] = (32, 32, 64)


@dataclass(frozen=True)
class CfConfig:
    lam: float = 1e-4
    bandwidth: float = 0.1


@dataclass(frozen=True)
class TrackerConfig:
    T: int = 3
    S: int = 3
    alpha: float = 1.03
    scale_penalty: float = 0.993
    update_rate: float = 0.01
    padding: float = 2.0
    patch_side: int = 125
    hann: bool = True


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-5
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 4
    epochs: int = 5
    steps_per_epoch: int = 40
    T: int = 3
    template_window: int = 10
    history_window: int = 20
    freeze_backbone: bool = False
    seed: int = 0


@dataclass(frozen=True)
class BenchConfig:
    workers: int = 1
    cache_path: Optional[str] = None
    cache_ttl_hours: int = 24 * 7
    report_dir: Optional[str] = None


@dataclass(frozen=True)
class RuntimeConfig:
    dtype: str = "float32"
    seed: int = 0

    @property
    def np_dtype(self) -> type:
        return DTYPES[self.dtype]


@dataclass(frozen=True)
class AppConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    align: AlignConfig = field(default_factory=AlignConfig)
    aggregate: AggregateConfig = field(default_factory=AggregateConfig)
    cf: CfConfig = field(default_factory=CfConfig)
    tracker: TrackerConfig = field(default_factory=TrackerConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    bench: BenchConfig = field(default_factory=BenchConfig)
    runtime: RuntimeConfig = field(default_factory=RuntimeConfig)


# =====================================
# LOADING
# =====================================
def _section_from_dict(cls: Type[T_Section], data: Dict[str, Any], section: str) -> T_Section:
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ValueError(f"❌ Unknown config key(s) in section '{section}': {', '.join(unknown)}")
    values = {}
    for key, value in data.items():
        if isinstance(value, list):
            value = tuple(value)
        values[key] = value
    return cls(**values)


def config_from_dict(data: Dict[str, Any]) -> AppConfig:
    sections = {f.name: f for f in fields(AppConfig)}
    unknown = sorted(set(data) - set(sections))
    if unknown:
        raise ValueError(f"❌ Unknown config section(s): {', '.join(unknown)}")
    built = {}
    for name, f in sections.items():
        section_cls = type(f.default_factory())
        built[name] = _section_from_dict(section_cls, data.get(name) or {}, name)
    return AppConfig(**built)


def config_to_dict(cfg: AppConfig) -> Dict[str, Any]:
    return json.loads(json.dumps(asdict(cfg)))


def apply_env_overrides(cfg: AppConfig) -> AppConfig:
    """SATA_DTYPE and SATA_CACHE_PATH win over the file."""
    dtype = _get_optional_env("SATA_DTYPE")
    if dtype:
        cfg = replace(cfg, runtime=replace(cfg.runtime, dtype=dtype))
    cache_path = _get_optional_env("SATA_CACHE_PATH")
    if cache_path:
        cfg = replace(cfg, bench=replace(cfg.bench, cache_path=cache_path))
    return cfg


def load_config(path: Optional[str] = None) -> AppConfig:
    """
    Load a JSON config file. Every field is optional.

    Args:
        path: Config file path; falls back to SATA_CONFIG, then to defaults

    Returns:
        Validated AppConfig

    Raises:
        ValueError: Unknown keys, unreadable JSON or failed validation
    """
    path = path or _get_optional_env("SATA_CONFIG")
    data: Dict[str, Any] = {}
    if path:
        try:
            with open(path, "r", encoding="utf-8") as fh:
                data = json.load(fh)
        except (OSError, json.JSONDecodeError) as e:
            raise ValueError(f"❌ Could not read config file {path}: {e}") from e
        if not isinstance(data, dict):
            raise ValueError(f"❌ Config file {path} must hold a JSON object")
    cfg = apply_env_overrides(config_from_dict(data))
    validate_config(cfg)
    return cfg


# =====================================
# VALIDATION
# =====================================
def validate_config(cfg: AppConfig) -> bool:
    """
    Validate cross-field invariants.

    Returns:
        True if the config is usable

    Raises:
        ValueError: Listing every violated invariant
    """
    problems = []
    bb, al, ag, tr, trn = cfg.backbone, cfg.align, cfg.aggregate, cfg.tracker, cfg.train

    if bb.kind not in ("tiny_cnn", "handcrafted"):
        problems.append(f"backbone.kind must be tiny_cnn or handcrafted, got {bb.kind!r}")
    if len(bb.widths) != 3:
        problems.append("backbone.widths must list exactly three stage widths")
    if min(bb.stage_sides or (0,)) < 1:
        problems.append(f"backbone.input_side {bb.input_side} too small for three stages")
    if bb.input_side != tr.patch_side:
        problems.append(f"backbone.input_side ({bb.input_side}) must equal tracker.patch_side ({tr.patch_side})")
    if len(bb.mean) != 3:
        problems.append("backbone.mean needs one value per colour channel")
    if al.kernel_side < 1 or al.kernel_side % 2 == 0:
        problems.append("align.kernel_side must be a positive odd integer")
    if tuple(al.layers) != (2, 3, 3):
        problems.append(f"align.layers must be (2, 3, 3), got {tuple(al.layers)}")
    if al.dilation < 1:
        problems.append("align.dilation must be >= 1")
    if any(level not in (0, 1, 2) for level in ag.levels):
        problems.append(f"aggregate.levels entries must be 0, 1 or 2, got {ag.levels}")
    if len(ag.widths) != 3:
        problems.append("aggregate.widths must list three embedding widths")
    if cfg.cf.lam <= 0 or cfg.cf.bandwidth <= 0:
        problems.append("cf.lam and cf.bandwidth must be positive")
    if tr.S < 1 or tr.S % 2 == 0:
        problems.append(f"tracker.S must be odd, got {tr.S}")
    if tr.alpha <= 1:
        problems.append(f"tracker.alpha must exceed 1, got {tr.alpha}")
    if not 0 < tr.update_rate <= 1:
        problems.append(f"tracker.update_rate must be in (0, 1], got {tr.update_rate}")
    if tr.T < 0:
        problems.append("tracker.T must be >= 0")
    if tr.padding < 0 or not 0 < tr.scale_penalty <= 1:
        problems.append("tracker.padding must be >= 0 and tracker.scale_penalty in (0, 1]")
    if min(trn.lr, trn.momentum, trn.weight_decay) < 0 or min(trn.batch_size, trn.epochs, trn.steps_per_epoch) < 1:
        problems.append("train rates must be non-negative; batch_size, epochs and steps_per_epoch positive")
    if trn.template_window < trn.T or trn.history_window < trn.T:
        problems.append("train windows must be >= train.T")
    if cfg.bench.workers < 1:
        problems.append("bench.workers must be >= 1")
    if cfg.runtime.dtype not in DTYPES:
        problems.append(f"runtime.dtype must be one of {sorted(DTYPES)}, got {cfg.runtime.dtype!r}")

    if problems:
        raise ValueError("❌ Invalid configuration:\n   - " + "\n   - ".join(problems))
    return True


# =====================================
# LOGGING CONFIG INFO
# =====================================
def log_config(cfg: AppConfig) -> None:
    """Log the effective configuration for debugging."""
    logger.info("=" * 50)
    logger.info("📋 TRACKER CONFIGURATION")
    logger.info("=" * 50)
    for section, values in config_to_dict(cfg).items():
        logger.info(f"{section}: {values}")
    logger.info("=" * 50)
