"""Configuration management for the cell-level GAN pipeline."""

import json
import os
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple


def is_debug() -> bool:
    """Whether debug output (and op-level finite checks) is enabled."""
    return os.environ.get('DEBUG', 'false').lower() == 'true'


def debug_log(message: str) -> None:
    """Log debug messages to stderr."""
    if is_debug():
        print(f"[DEBUG] {message}", file=sys.stderr)


class PipelineError(Exception):
    """Base error for pipeline failures that map to an exit code."""
    exit_code = 2


class ConfigError(PipelineError):
    """Invalid configuration or usage."""
    exit_code = 1


class DataError(PipelineError):
    """Input data is missing, unreadable or inconsistent."""
    exit_code = 2


class NumericError(PipelineError):
    """A NaN/Inf or a violated numeric invariant was detected."""
    exit_code = 3


class Config:
    """Reference constants used as configuration defaults."""

    # Noise sources
    NUM_CATEGORIES = 5
    NOISE_DIM = 32

    # Loss weights and schedule
    LAMBDA_GP = 10.0
    LAMBDA_INFO = 1.0
    BATCH_SIZE = 64
    D_STEPS = 5
    EPOCHS = 10
    NORM_ORDER = 2.0

    # Adam; ADAM_ALPHA is the smaller step size some runs use, lr is the default
    ADAM_LR = 2e-4
    ADAM_ALPHA = 1e-4
    ADAM_BETA1 = 0.5
    ADAM_BETA2 = 0.9
    ADAM_EPSILON = 1e-8

    # Segmentation
    THRESHOLD = 120
    MIN_AREA = 200
    OPENING_KERNEL = 7
    REINHARD_TARGET_MEAN = (8.98, 0.08, 0.02)
    REINHARD_TARGET_STD = (0.64, 0.11, 0.03)
    MACENKO_ANGLE_LO = 1.0
    MACENKO_ANGLE_HI = 99.0
    MACENKO_MIN_MAGNITUDE = 16.0 / 255.0
    CELL_SIZE = 32

    # Image-level analysis
    SVM_C = 1.0
    SVM_EPOCHS = 2000
    PCA_DIMS = 2
    CV_FOLDS = 4
    MONTAGE_PER_CLUSTER = 60


def validate_positive_int(value: Any, name: str, minimum: int = 1) -> int:
    """
    Validate an integer setting.

    Args:
        value: Raw value from the config file
        name: Dotted key name used in error messages
        minimum: Smallest accepted value

    Returns:
        int: Validated value

    Raises:
        ConfigError: If the value is not an integer or is below the minimum
    """
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigError(f"{name}: expected an integer, got {value!r}")
    if value < minimum:
        raise ConfigError(f"{name}: must be >= {minimum}, got {value}")
    return value


def validate_real(value: Any, name: str, low: Optional[float] = None,
                  high: Optional[float] = None, strict_low: bool = False,
                  strict_high: bool = False) -> float:
    """
    Validate a real-valued setting against an optional range.

    Raises:
        ConfigError: If the value is not a finite number or out of range
    """
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"{name}: expected a number, got {value!r}")
    value = float(value)
    if value != value or value in (float('inf'), float('-inf')):
        raise ConfigError(f"{name}: must be finite")
    if low is not None and (value < low or (strict_low and value == low)):
        bound = ">" if strict_low else ">="
        raise ConfigError(f"{name}: must be {bound} {low}, got {value}")
    if high is not None and (value > high or (strict_high and value == high)):
        bound = "<" if strict_high else "<="
        raise ConfigError(f"{name}: must be {bound} {high}, got {value}")
    return value


def validate_triplet(value: Any, name: str, positive: bool = False) -> Tuple[float, float, float]:
    """Validate a 3-vector of reals (LAB statistics)."""
    if not isinstance(value, (list, tuple)) or len(value) != 3:
        raise ConfigError(f"{name}: expected a list of 3 numbers, got {value!r}")
    items = tuple(
        validate_real(v, f"{name}[{i}]", low=0.0 if positive else None, strict_low=positive)
        for i, v in enumerate(value)
    )
    return items  # type: ignore[return-value]


def validate_probability_vector(value: Any, name: str) -> Tuple[float, ...]:
    """Validate a non-negative vector summing to 1."""
    if not isinstance(value, (list, tuple)) or not value:
        raise ConfigError(f"{name}: expected a non-empty list of probabilities")
    probs = tuple(validate_real(v, f"{name}[{i}]", low=0.0) for i, v in enumerate(value))
    if abs(sum(probs) - 1.0) > 1e-6:
        raise ConfigError(f"{name}: probabilities must sum to 1, got {sum(probs):.6f}")
    return probs


@dataclass
class SegmentationConfig:
    """Nuclei segmentation parameters."""
    threshold: int = Config.THRESHOLD
    min_area: int = Config.MIN_AREA
    opening_kernel: int = Config.OPENING_KERNEL
    protrusion_pass: bool = True
    color_space: str = "ruderman"
    target_mean: Tuple[float, float, float] = Config.REINHARD_TARGET_MEAN
    target_std: Tuple[float, float, float] = Config.REINHARD_TARGET_STD
    angle_lo: float = Config.MACENKO_ANGLE_LO
    angle_hi: float = Config.MACENKO_ANGLE_HI
    min_magnitude: float = Config.MACENKO_MIN_MAGNITUDE
    cell_size: int = Config.CELL_SIZE

    def validate(self) -> "SegmentationConfig":
        validate_positive_int(self.threshold, "segmentation.threshold", minimum=0)
        if self.threshold > 255:
            raise ConfigError("segmentation.threshold: must be in [0, 255]")
        validate_positive_int(self.min_area, "segmentation.min_area", minimum=0)
        validate_positive_int(self.opening_kernel, "segmentation.opening_kernel")
        if self.opening_kernel % 2 == 0:
            raise ConfigError("segmentation.opening_kernel: must be odd")
        if self.color_space not in ("ruderman", "cielab"):
            raise ConfigError(
                f"segmentation.color_space: expected 'ruderman' or 'cielab', got {self.color_space!r}"
            )
        self.target_mean = validate_triplet(self.target_mean, "segmentation.target_mean")
        self.target_std = validate_triplet(self.target_std, "segmentation.target_std", positive=True)
        validate_real(self.angle_lo, "segmentation.angle_lo", 0.0, 100.0)
        validate_real(self.angle_hi, "segmentation.angle_hi", 0.0, 100.0)
        validate_real(self.min_magnitude, "segmentation.min_magnitude", low=0.0)
        validate_positive_int(self.cell_size, "segmentation.cell_size", minimum=4)
        return self


@dataclass
class AdamConfig:
    """Adam optimizer settings."""
    lr: float = Config.ADAM_LR
    beta1: float = Config.ADAM_BETA1
    beta2: float = Config.ADAM_BETA2
    epsilon: float = Config.ADAM_EPSILON

    def validate(self) -> "AdamConfig":
        validate_real(self.lr, "training.adam.lr", low=0.0, strict_low=True)
        validate_real(self.beta1, "training.adam.beta1", 0.0, 1.0, strict_high=True)
        validate_real(self.beta2, "training.adam.beta2", 0.0, 1.0, strict_high=True)
        validate_real(self.epsilon, "training.adam.epsilon", low=0.0, strict_low=True)
        return self


@dataclass
class ModelConfig:
    """Network widths for G, D and Q."""
    gen_seed_channels: int = 128
    gen_seed_size: int = 8
    gen_widths: Tuple[int, ...] = (64, 32)
    disc_widths: Tuple[int, ...] = (32, 64, 128)
    share_trunk: bool = True

    def validate(self) -> "ModelConfig":
        validate_positive_int(self.gen_seed_channels, "training.model.gen_seed_channels")
        validate_positive_int(self.gen_seed_size, "training.model.gen_seed_size")
        self.gen_widths = tuple(
            validate_positive_int(w, f"training.model.gen_widths[{i}]")
            for i, w in enumerate(self.gen_widths)
        )
        self.disc_widths = tuple(
            validate_positive_int(w, f"training.model.disc_widths[{i}]")
            for i, w in enumerate(self.disc_widths)
        )
        if not self.disc_widths:
            raise ConfigError("training.model.disc_widths: at least one block required")
        return self


@dataclass
class TrainingConfig:
    """GAN training hyperparameters."""
    batch_size: int = Config.BATCH_SIZE
    lambda1: float = Config.LAMBDA_GP
    lambda2: float = Config.LAMBDA_INFO
    d_steps: int = Config.D_STEPS
    epochs: int = Config.EPOCHS
    K: int = Config.NUM_CATEGORIES
    dim_z: int = Config.NOISE_DIM
    seed: int = 0
    p: float = Config.NORM_ORDER
    precision: str = "float32"
    adam: AdamConfig = field(default_factory=AdamConfig)
    model: ModelConfig = field(default_factory=ModelConfig)

    def validate(self) -> "TrainingConfig":
        validate_positive_int(self.batch_size, "training.batch_size", minimum=2)
        validate_real(self.lambda1, "training.lambda1", low=0.0)
        validate_real(self.lambda2, "training.lambda2", low=0.0)
        validate_positive_int(self.d_steps, "training.d_steps")
        validate_positive_int(self.epochs, "training.epochs")
        validate_positive_int(self.K, "training.K", minimum=2)
        validate_positive_int(self.dim_z, "training.dim_z")
        validate_positive_int(self.seed, "training.seed", minimum=0)
        validate_real(self.p, "training.p", low=0.0, strict_low=True)
        if self.precision not in ("float32", "float64"):
            raise ConfigError(f"training.precision: expected float32 or float64, got {self.precision!r}")
        self.adam.validate()
        self.model.validate()
        return self


@dataclass
class AnalysisConfig:
    """Image-level classification and reporting parameters."""
    K: int = Config.NUM_CATEGORIES
    svm_C: float = Config.SVM_C
    svm_epochs: int = Config.SVM_EPOCHS
    pca_dims: int = Config.PCA_DIMS
    folds: int = Config.CV_FOLDS
    repeats: int = 1
    kmeans_max_iters: int = 100
    montage_per_cluster: int = Config.MONTAGE_PER_CLUSTER

    def validate(self) -> "AnalysisConfig":
        validate_positive_int(self.K, "analysis.K", minimum=2)
        validate_real(self.svm_C, "analysis.svm_C", low=0.0, strict_low=True)
        validate_positive_int(self.svm_epochs, "analysis.svm_epochs")
        validate_positive_int(self.pca_dims, "analysis.pca_dims")
        validate_positive_int(self.folds, "analysis.folds", minimum=2)
        validate_positive_int(self.repeats, "analysis.repeats")
        validate_positive_int(self.kmeans_max_iters, "analysis.kmeans_max_iters")
        validate_positive_int(self.montage_per_cluster, "analysis.montage_per_cluster")
        return self


@dataclass
class CellClassSpec:
    """Parametric description of one synthetic nucleus class."""
    name: str
    radius: Tuple[float, float]
    texture: float
    darkness: float
    lobes: int = 1

    def validate(self, name: str) -> "CellClassSpec":
        if not isinstance(self.radius, (list, tuple)) or len(self.radius) != 2:
            raise ConfigError(f"{name}.radius: expected [min, max]")
        lo = validate_real(self.radius[0], f"{name}.radius[0]", low=0.0, strict_low=True)
        hi = validate_real(self.radius[1], f"{name}.radius[1]", low=lo)
        self.radius = (lo, hi)
        validate_real(self.texture, f"{name}.texture", 0.0, 1.0, strict_high=True)
        validate_real(self.darkness, f"{name}.darkness", low=0.0, strict_low=True)
        validate_positive_int(self.lobes, f"{name}.lobes")
        return self


@dataclass
class CohortSpec:
    """A group of slides sharing an image-level label and a class mixture."""
    label: str
    mixture: Tuple[float, ...]


def _default_cell_classes() -> List[CellClassSpec]:
    return [
        CellClassSpec("lymphocyte", (9.0, 10.5), texture=0.04, darkness=2.5, lobes=1),
        CellClassSpec("myeloblast", (12.0, 13.5), texture=0.18, darkness=1.8, lobes=1),
        CellClassSpec("monocyte", (11.0, 12.5), texture=0.10, darkness=2.0, lobes=2),
        CellClassSpec("granulocyte", (10.5, 12.0), texture=0.08, darkness=2.3, lobes=3),
        CellClassSpec("megakaryocyte", (14.5, 16.0), texture=0.12, darkness=2.2, lobes=4),
    ]


def _default_cohorts() -> List[CohortSpec]:
    return [
        CohortSpec("normal", (0.1, 0.3, 0.2, 0.3, 0.1)),
        CohortSpec("abnormal", (0.1, 0.6, 0.1, 0.15, 0.05)),
    ]


@dataclass
class SyntheticSpec:
    """Synthetic cohort description standing in for real bone-marrow slides."""
    classes: List[CellClassSpec] = field(default_factory=_default_cell_classes)
    cohorts: List[CohortSpec] = field(default_factory=_default_cohorts)
    cells_per_slide: int = 40
    slides_per_cohort: int = 20
    width: int = 400
    height: int = 400
    hematoxylin: Tuple[float, float, float] = (0.65, 0.70, 0.29)
    eosin: Tuple[float, float, float] = (0.07, 0.99, 0.11)
    background_eosin: float = 0.25
    placement_retries: int = 2000
    seed: int = 0

    def validate(self) -> "SyntheticSpec":
        if len(self.classes) < 2:
            raise ConfigError("synthetic.classes: at least two classes required")
        for i, cls in enumerate(self.classes):
            cls.validate(f"synthetic.classes[{i}]")
        if not self.cohorts:
            raise ConfigError("synthetic.cohorts: at least one cohort required")
        for i, cohort in enumerate(self.cohorts):
            cohort.mixture = validate_probability_vector(cohort.mixture, f"synthetic.cohorts[{i}].mixture")
            if len(cohort.mixture) != len(self.classes):
                raise ConfigError(
                    f"synthetic.cohorts[{i}].mixture: expected {len(self.classes)} entries, "
                    f"got {len(cohort.mixture)}"
                )
        validate_positive_int(self.cells_per_slide, "synthetic.cells_per_slide")
        validate_positive_int(self.slides_per_cohort, "synthetic.slides_per_cohort")
        validate_positive_int(self.width, "synthetic.width", minimum=32)
        validate_positive_int(self.height, "synthetic.height", minimum=32)
        self.hematoxylin = validate_triplet(self.hematoxylin, "synthetic.hematoxylin")
        self.eosin = validate_triplet(self.eosin, "synthetic.eosin")
        validate_real(self.background_eosin, "synthetic.background_eosin", low=0.0)
        validate_positive_int(self.placement_retries, "synthetic.placement_retries")
        validate_positive_int(self.seed, "synthetic.seed", minimum=0)
        return self


@dataclass
class PipelineConfig:
    """Aggregate configuration for every subcommand."""
    segmentation: SegmentationConfig = field(default_factory=SegmentationConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    analysis: AnalysisConfig = field(default_factory=AnalysisConfig)
    synthetic: SyntheticSpec = field(default_factory=SyntheticSpec)
    seed: int = 0
    threads: int = 1

    def validate(self) -> "PipelineConfig":
        self.segmentation.validate()
        self.training.validate()
        self.analysis.validate()
        self.synthetic.validate()
        validate_positive_int(self.seed, "seed", minimum=0)
        validate_positive_int(self.threads, "threads")
        if self.analysis.K != self.training.K:
            raise ConfigError(
                f"analysis.K ({self.analysis.K}) must equal training.K ({self.training.K})"
            )
        return self

    def with_seed(self, seed: int) -> "PipelineConfig":
        """Override every seed in the configuration."""
        self.seed = seed
        self.training.seed = seed
        self.synthetic.seed = seed
        return self


def _build(cls, data: Dict[str, Any], section: str):
    """Build a dataclass from a JSON object, rejecting unknown keys."""
    if not isinstance(data, dict):
        raise ConfigError(f"{section}: expected an object")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(f"{section}: unknown keys {', '.join(unknown)}")
    kwargs: Dict[str, Any] = {}
    for key, value in data.items():
        if cls is TrainingConfig and key == "adam":
            value = _build(AdamConfig, value, f"{section}.adam")
        elif cls is TrainingConfig and key == "model":
            value = _build(ModelConfig, value, f"{section}.model")
        elif cls is SyntheticSpec and key == "classes":
            value = [_build(CellClassSpec, v, f"{section}.classes[{i}]") for i, v in enumerate(value)]
        elif cls is SyntheticSpec and key == "cohorts":
            value = [_build(CohortSpec, v, f"{section}.cohorts[{i}]") for i, v in enumerate(value)]
        elif isinstance(value, list):
            value = tuple(value)
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except TypeError as e:
        raise ConfigError(f"{section}: {e}")


def config_from_dict(data: Dict[str, Any]) -> PipelineConfig:
    """Build and validate a PipelineConfig from parsed JSON."""
    sections = {
        "segmentation": SegmentationConfig,
        "training": TrainingConfig,
        "analysis": AnalysisConfig,
        "synthetic": SyntheticSpec,
    }
    if not isinstance(data, dict):
        raise ConfigError("config: expected a JSON object")
    unknown = sorted(set(data) - set(sections) - {"seed", "threads"})
    if unknown:
        raise ConfigError(f"config: unknown keys {', '.join(unknown)}")
    kwargs: Dict[str, Any] = {name: _build(cls, data.get(name, {}), name) for name, cls in sections.items()}
    config = PipelineConfig(**kwargs, threads=data.get("threads", 1))
    if "seed" in data:
        config.with_seed(validate_positive_int(data["seed"], "seed", minimum=0))
    return config.validate()


def load_config(path: Optional[Path] = None) -> PipelineConfig:
    """
    Load the pipeline configuration from a JSON file.

    Args:
        path: Config file path; None gives the reference defaults

    Returns:
        PipelineConfig: Validated configuration

    Raises:
        ConfigError: If the file is missing, is not valid JSON or has invalid values
    """
    if path is None:
        debug_log("No config file given, using defaults")
        return PipelineConfig().validate()

    path = Path(path)
    if not path.exists():
        raise ConfigError(f"Config file not found: {path}")

    try:
        with open(path) as f:
            data = json.load(f)
    except json.JSONDecodeError as e:
        raise ConfigError(f"Invalid JSON in {path}: {e}")

    config = config_from_dict(data)
    debug_log(f"Loaded config from {path}")
    return config


def config_to_dict(config: PipelineConfig) -> Dict[str, Any]:
    """Convert a config to plain JSON-compatible data."""
    return json.loads(json.dumps(asdict(config)))


def save_config(config: PipelineConfig, path: Path) -> None:
    """Write the effective configuration as JSON."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w') as f:
        json.dump(config_to_dict(config), f, indent=2)
        f.write('\n')
    debug_log(f"Saved config to {path}")


def training_config_from_dict(data: Dict[str, Any]) -> TrainingConfig:
    """Rebuild a TrainingConfig (e.g. from a checkpoint header)."""
    return _build(TrainingConfig, data, "training").validate()


def parse_int_list(text: str, name: str) -> Sequence[int]:
    """Parse a comma-separated integer list from a CLI flag."""
    try:
        return [int(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise ConfigError(f"{name}: expected comma-separated integers, got {text!r}")
