"""
Configuration settings for the attribution toolkit.

Module-level constants hold the defaults; ``RunConfig`` is the per-run
configuration loaded from a JSON file with command-line overrides.
"""

import json
import logging
import os
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

from errors import ConfigError

logger = logging.getLogger(__name__)

# Attribution settings
DEFAULT_STEPS = 50  # interpolation steps for every path method
DEFAULT_QUADRATURE = "trapezoid"
QUADRATURE_RULES = ("trapezoid", "left", "right", "midpoint", "simpson")
CIG_VARIANTS = ("interpolated", "endpoint")
DEFAULT_EG_SAMPLES = 50

# Baseline settings
DEFAULT_POOL_SLIDES = 30  # opposite-class reference slides per pool
BASELINE_STRATEGIES = ("opposite", "zero", "mean")

# Evaluation settings
TOP_K_BINS: Tuple[int, ...] = (
    tuple(range(1, 11))
    + tuple(range(15, 51, 5))
    + tuple(range(60, 101, 10))
    + (150, 200, 300, 400, 500)
)
# Percent cutoffs, kept as integers so ceil(t * n) is exact.
THRESHOLD_PERCENTILES: Tuple[int, ...] = (20, 40, 60, 80, 85, 90, 95, 99)
RANDOM_MODES = ("uniform", "constant")

# Method names accepted in run configs
METHOD_NAMES = ("gradient", "ig", "eg", "idg", "cig", "random", "oracle")
DEFAULT_METHODS = ("gradient", "ig", "eg", "idg", "cig", "random")

# Reproducibility
DEFAULT_SEED = 11
THREADS_ENV = "MILCIG_THREADS"

# File names inside a dataset directory
MANIFEST_FILE = "manifest.json"
BAGS_DIR = "bags"

# Logging
LOG_LEVEL = "INFO"
LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"
LOG_LEVEL_ENV = "MILCIG_LOG_LEVEL"


def get_thread_count(configured: Optional[int] = None) -> int:
    """Get worker thread count: environment first, then config, then CPU count."""
    env_value = os.getenv(THREADS_ENV)
    if env_value:
        try:
            threads = int(env_value)
        except ValueError:
            raise ConfigError(THREADS_ENV, f"expected an integer, got {env_value!r}")
        if threads < 1:
            raise ConfigError(THREADS_ENV, "must be >= 1")
        return threads
    if configured:
        return configured
    return os.cpu_count() or 1


def get_log_level() -> str:
    """Get log level from environment or use default."""
    return os.getenv(LOG_LEVEL_ENV, LOG_LEVEL).upper()


@dataclass(frozen=True)
class HeatmapSpec:
    """How saliency is painted onto the patch grid."""
    colormap: str = "grayscale"  # grayscale | diverging
    cell_size: int = 1
    normalization: str = "minmax"  # per slide
    background: int = 0

    def validate(self):
        if self.colormap not in ("grayscale", "diverging"):
            raise ConfigError("heatmap.colormap", f"unknown colormap {self.colormap!r}")
        if not isinstance(self.cell_size, int) or self.cell_size < 1:
            raise ConfigError("heatmap.cell_size", "must be an integer >= 1")
        if self.normalization != "minmax":
            raise ConfigError("heatmap.normalization", "only 'minmax' is supported")
        if not 0 <= self.background <= 255:
            raise ConfigError("heatmap.background", "must be within 0..255")


@dataclass
class RunConfig:
    """Settings shared by every CLI subcommand."""
    dataset_dir: str = "data"
    checkpoint: str = "model.milckpt"
    output_dir: str = "out"
    methods: List[str] = field(default_factory=lambda: list(DEFAULT_METHODS))
    steps: int = DEFAULT_STEPS
    quadrature: str = DEFAULT_QUADRATURE
    cig_variant: str = "interpolated"
    baseline_strategy: str = "opposite"
    pool_slides: int = DEFAULT_POOL_SLIDES
    pool_per_slide: Optional[int] = None
    eg_samples: int = DEFAULT_EG_SAMPLES
    top_k_bins: List[int] = field(default_factory=lambda: list(TOP_K_BINS))
    bin_percentiles: List[int] = field(default_factory=lambda: list(THRESHOLD_PERCENTILES))
    random_mode: str = "uniform"
    eval_classes: Optional[List[int]] = None
    eval_split: str = "test"
    seeds: List[int] = field(default_factory=lambda: [DEFAULT_SEED])
    threads: Optional[int] = None
    split_ratios: List[float] = field(default_factory=lambda: [0.5, 0.0, 0.5])
    emit_steps: bool = False
    synthetic: Dict[str, Any] = field(default_factory=dict)
    train: Dict[str, Any] = field(default_factory=dict)
    heatmap: Dict[str, Any] = field(default_factory=dict)

    def validate(self) -> "RunConfig":
        """Check every field; raises ConfigError naming the first bad one."""
        if not isinstance(self.methods, list) or not self.methods:
            raise ConfigError("methods", "must be a non-empty list")
        for name in self.methods:
            if name not in METHOD_NAMES:
                raise ConfigError("methods", f"unknown method {name!r} (expected one of {', '.join(METHOD_NAMES)})")
        if not isinstance(self.steps, int) or self.steps < 1:
            raise ConfigError("steps", "must be an integer >= 1")
        if self.quadrature not in QUADRATURE_RULES:
            raise ConfigError("quadrature", f"unknown rule {self.quadrature!r}")
        if self.cig_variant not in CIG_VARIANTS:
            raise ConfigError("cig_variant", f"unknown variant {self.cig_variant!r}")
        if self.baseline_strategy not in BASELINE_STRATEGIES:
            raise ConfigError("baseline_strategy", f"unknown strategy {self.baseline_strategy!r}")
        if not isinstance(self.pool_slides, int) or self.pool_slides < 1:
            raise ConfigError("pool_slides", "must be an integer >= 1")
        if self.pool_per_slide is not None and (not isinstance(self.pool_per_slide, int) or self.pool_per_slide < 1):
            raise ConfigError("pool_per_slide", "must be null or an integer >= 1")
        if not isinstance(self.eg_samples, int) or self.eg_samples < 1:
            raise ConfigError("eg_samples", "must be an integer >= 1")
        if any(not isinstance(k, int) or k < 1 for k in self.top_k_bins):
            raise ConfigError("top_k_bins", "entries must be integers >= 1")
        if any(not isinstance(p, int) or not 0 < p <= 100 for p in self.bin_percentiles):
            raise ConfigError("bin_percentiles", "entries must be integer percents in 1..100")
        if self.random_mode not in RANDOM_MODES:
            raise ConfigError("random_mode", f"unknown mode {self.random_mode!r}")
        if self.eval_split not in ("train", "val", "test"):
            raise ConfigError("eval_split", f"unknown split {self.eval_split!r}")
        if not isinstance(self.seeds, list) or not self.seeds or any(not isinstance(s, int) for s in self.seeds):
            raise ConfigError("seeds", "must be a non-empty list of integers")
        if self.threads is not None and (not isinstance(self.threads, int) or self.threads < 1):
            raise ConfigError("threads", "must be null or an integer >= 1")
        if len(self.split_ratios) != 3 or any(r < 0 for r in self.split_ratios):
            raise ConfigError("split_ratios", "must be three non-negative ratios")
        if abs(sum(self.split_ratios) - 1.0) > 1e-9:
            raise ConfigError("split_ratios", "must sum to 1")
        self.heatmap_spec()
        self.synthetic_config()
        self.train_config()
        return self

    def heatmap_spec(self) -> HeatmapSpec:
        spec = _build_section("heatmap", HeatmapSpec, self.heatmap)
        spec.validate()
        return spec

    def synthetic_config(self):
        from data_io import SyntheticConfig
        values = dict(self.synthetic)
        values.setdefault("seed", self.seeds[0])
        values.setdefault("split_ratios", tuple(self.split_ratios))
        return _build_section("synthetic", SyntheticConfig, values, validate=True)

    def train_config(self):
        from trainer import TrainConfig
        values = dict(self.train)
        values.setdefault("seed", self.seeds[0])
        return _build_section("train", TrainConfig, values, validate=True)


def _build_section(name: str, cls, values: Dict[str, Any], validate: bool = False):
    """Instantiate a nested config dataclass, mapping failures to ConfigError."""
    known = {f.name for f in fields(cls)}
    for key in values:
        if key not in known:
            raise ConfigError(f"{name}.{key}", "unknown setting")
    coerced = {k: tuple(v) if isinstance(v, list) else v for k, v in values.items()}
    try:
        section = cls(**coerced)
        if validate:
            section.validate()
    except ConfigError:
        raise
    except (TypeError, ValueError) as e:
        raise ConfigError(name, str(e))
    return section


def load_run_config(path: Optional[str] = None, overrides: Optional[Dict[str, Any]] = None) -> RunConfig:
    """
    Load a run configuration.

    Args:
        path: JSON file with RunConfig fields (optional)
        overrides: Values from command-line flags; ``None`` values are ignored

    Returns:
        Validated RunConfig

    Raises:
        ConfigError: If the file is unreadable or any field is invalid
    """
    values: Dict[str, Any] = {}
    if path:
        try:
            values = json.loads(Path(path).read_text(encoding="utf-8"))
        except OSError as e:
            raise ConfigError("config", f"cannot read {path}: {e}")
        except json.JSONDecodeError as e:
            raise ConfigError("config", f"invalid JSON in {path}: {e}")
        if not isinstance(values, dict):
            raise ConfigError("config", "top level must be a JSON object")

    known = {f.name for f in fields(RunConfig)}
    for key in values:
        if key not in known:
            raise ConfigError(key, "unknown setting")

    cfg = RunConfig(**values)
    if overrides:
        cfg = replace(cfg, **{k: v for k, v in overrides.items() if v is not None})
    logger.debug(f"Loaded run config from {path or '<defaults>'}")
    return cfg.validate()
