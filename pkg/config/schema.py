"""
Run Configuration Schema

Frozen dataclasses for every run-level setting (dataset, model, attacks,
training, evaluation) plus the YAML reader/writer. Every default is listed in
docs/CONFIG-SCHEMA.md.

Attack budgets are stored normalized to [0, 1]. Attack-like sections accept
``units: pixel`` (the default) in which case epsilon/step sizes are 8-bit pixel
values divided by 255 on read; the original values are kept in
``RunConfig.units_metadata`` and written back unchanged.
"""

import dataclasses
import hashlib
import json
import logging
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional, Tuple, Union

import yaml

from config.exceptions import ConfigurationError

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
PIXEL_SCALE = 255.0

ATTACK_KINDS = ("fgsm", "pgd", "spsa")
INNER_LOSSES = ("cross_entropy", "cw_margin", "dlr")
NORMS = ("inf", "l2")
DATASET_SOURCES = ("cifar10_binary", "image_folder", "synthetic")
NORMALIZATIONS = ("none", "per_channel_mean_std")
PARAMETER_GROUPS = ("theta", "omega_r", "omega_nr", "omega_ds", "phi", "psi", "theta_rec")
BRANCHES = ("r", "nr", "ds")


def _require(condition: bool, message: str) -> None:
    if not condition:
        raise ConfigurationError(message)


# ============================================================
# ATTACKS
# ============================================================

@dataclass(frozen=True)
class SPSAParams:
    """Gradient-free estimator settings (perturbation in normalized pixel units)."""
    perturbation_scale: float = 0.01
    samples_per_step: int = 128

    def __post_init__(self):
        _require(self.samples_per_step >= 1, f"spsa.samples_per_step must be >= 1, got {self.samples_per_step}")
        _require(self.perturbation_scale > 0, f"spsa.perturbation_scale must be > 0, got {self.perturbation_scale}")


@dataclass(frozen=True)
class AttackSpec:
    """Fully determines one attack: budget, step size, step count, inner loss, seed."""
    kind: str = "pgd"
    inner_loss: str = "cross_entropy"
    epsilon: float = 8 / 255
    step_size: float = 2 / 255
    num_steps: int = 10
    random_start: bool = True
    norm: str = "inf"
    seed: int = 0
    kappa: float = 0.0
    spsa: SPSAParams = field(default_factory=SPSAParams)

    def __post_init__(self):
        _require(self.kind in ATTACK_KINDS, f"attack.kind must be one of {ATTACK_KINDS}, got {self.kind!r}")
        _require(self.inner_loss in INNER_LOSSES,
                 f"attack.inner_loss must be one of {INNER_LOSSES}, got {self.inner_loss!r}")
        _require(self.norm in NORMS, f"attack.norm must be one of {NORMS}, got {self.norm!r}")
        _require(self.epsilon >= 0, f"attack.epsilon must be >= 0, got {self.epsilon}")
        _require(self.num_steps >= 1, f"attack.num_steps must be >= 1, got {self.num_steps}")
        _require(self.kappa >= 0, f"attack.kappa must be >= 0, got {self.kappa}")
        if self.kind == "fgsm":
            _require(self.num_steps == 1, f"fgsm requires num_steps = 1, got {self.num_steps}")
        else:
            _require(self.step_size > 0, f"attack.step_size must be > 0 for {self.kind}, got {self.step_size}")

    @property
    def label(self) -> str:
        """Short report label: pgd, fgsm, spsa, cw, dlr (with an l2 suffix for L2 attacks)."""
        if self.kind == "pgd" and self.inner_loss == "cw_margin":
            name = "cw"
        elif self.kind == "pgd" and self.inner_loss == "dlr":
            name = "dlr"
        else:
            name = self.kind
        return f"{name}_l2" if self.norm == "l2" else name

    def describe(self) -> str:
        eps_px = self.epsilon * PIXEL_SCALE
        return (f"{self.label}(eps={eps_px:g}/255, alpha={self.step_size * PIXEL_SCALE:g}/255, "
                f"T={self.num_steps}, loss={self.inner_loss}, random_start={self.random_start}, seed={self.seed})")


@dataclass(frozen=True)
class DiversifySpec:
    """Ranges the training attack is sampled from for every minibatch."""
    epsilon_range: Tuple[float, float] = (8 / 255, 12 / 255)
    steps_choices: Tuple[int, ...] = (8, 16, 24, 32)
    step_size_range: Tuple[float, float] = (2 / 255, 4 / 255)

    def __post_init__(self):
        for name in ("epsilon_range", "step_size_range"):
            lo, hi = getattr(self, name)
            _require(0 < lo <= hi, f"diversify.{name} must satisfy 0 < low <= high, got ({lo}, {hi})")
        _require(len(self.steps_choices) > 0, "diversify.steps_choices must not be empty")
        _require(all(int(s) >= 1 for s in self.steps_choices),
                 f"diversify.steps_choices must be positive, got {self.steps_choices}")


# ============================================================
# DATA
# ============================================================

@dataclass(frozen=True)
class SplitFractions:
    train: float = 0.9
    val: float = 0.1
    test: float = 0.0

    def __post_init__(self):
        _require(all(v >= 0 for v in (self.train, self.val, self.test)), "dataset.split fractions must be >= 0")
        total = self.train + self.val + self.test
        _require(abs(total - 1.0) < 1e-9, f"dataset.split fractions must sum to 1, got {total}")
        _require(self.train > 0, "dataset.split.train must be > 0")


@dataclass(frozen=True)
class SyntheticSpec:
    """Class-conditional pattern corpus for fast tests."""
    num_classes: int = 2
    samples_per_class: int = 100
    image_shape: Tuple[int, int, int] = (3, 32, 32)
    noise_std: float = 0.1
    test_samples_per_class: int = 50

    def __post_init__(self):
        _require(self.num_classes >= 2, f"synthetic.num_classes must be >= 2, got {self.num_classes}")
        _require(self.samples_per_class >= 1, "synthetic.samples_per_class must be >= 1")
        _require(self.test_samples_per_class >= 0, "synthetic.test_samples_per_class must be >= 0")
        _require(self.noise_std >= 0, "synthetic.noise_std must be >= 0")


@dataclass(frozen=True)
class DatasetSpec:
    source: str = "cifar10_binary"
    root: Optional[str] = None
    class_filter: Optional[Tuple[Union[int, str], ...]] = (0, 1)
    per_class_limit: Optional[int] = 500
    test_per_class_limit: Optional[int] = 200
    split: SplitFractions = field(default_factory=SplitFractions)
    normalization: str = "none"
    image_size: Optional[Tuple[int, int]] = None
    synthetic: SyntheticSpec = field(default_factory=SyntheticSpec)
    seed: int = 0

    def __post_init__(self):
        _require(self.source in DATASET_SOURCES, f"dataset.source must be one of {DATASET_SOURCES}, got {self.source!r}")
        _require(self.normalization in NORMALIZATIONS,
                 f"dataset.normalization must be one of {NORMALIZATIONS}, got {self.normalization!r}")
        for name in ("per_class_limit", "test_per_class_limit"):
            value = getattr(self, name)
            _require(value is None or value >= 1, f"dataset.{name} must be >= 1 when present, got {value}")
        if self.class_filter is not None:
            _require(len(self.class_filter) >= 2, "dataset.class_filter must name at least two classes")
            _require(len(set(self.class_filter)) == len(self.class_filter), "dataset.class_filter has duplicates")


# ============================================================
# MODEL
# ============================================================

@dataclass(frozen=True)
class BackboneConfig:
    """
    Architecture of the disentanglement network.

    The extractor is a stem convolution followed by ``extractor_blocks`` residual
    stages (each ``blocks_per_stage`` basic blocks, channels doubling per stage,
    stride 2 from the second stage on). Each encoder is one residual block with
    ``encoder_stride`` mapping to ``latent_dim`` channels.
    """
    input_shape: Tuple[int, int, int] = (3, 32, 32)
    extractor_blocks: int = 2
    blocks_per_stage: int = 2
    stem_channels: int = 16
    stage_width: int = 20
    latent_dim: int = 80
    encoder_stride: int = 2
    num_classes: int = 2
    classifier_hidden: int = 0
    discriminator_hidden: int = 256
    grl_lambda: float = 1.0
    normalize_mean: Optional[Tuple[float, ...]] = None
    normalize_std: Optional[Tuple[float, ...]] = None

    def __post_init__(self):
        _require(len(self.input_shape) == 3, f"model.input_shape must be (C, H, W), got {self.input_shape}")
        _require(all(d >= 1 for d in self.input_shape), f"model.input_shape must be positive, got {self.input_shape}")
        _require(self.extractor_blocks >= 1, "model.extractor_blocks must be >= 1")
        _require(self.blocks_per_stage >= 1, "model.blocks_per_stage must be >= 1")
        _require(self.latent_dim > 0, f"model.latent_dim must be > 0, got {self.latent_dim}")
        _require(self.num_classes >= 2, f"model.num_classes must be >= 2, got {self.num_classes}")
        _require(self.grl_lambda > 0, f"model.grl_lambda must be > 0, got {self.grl_lambda}")
        _require(self.encoder_stride in (1, 2), f"model.encoder_stride must be 1 or 2, got {self.encoder_stride}")
        _require(self.classifier_hidden >= 0, "model.classifier_hidden must be >= 0")
        _require(self.discriminator_hidden >= 1, "model.discriminator_hidden must be >= 1")
        if self.encoder_stride == 2:
            h, w = self.feature_spatial
            _require(h % 2 == 0 and w % 2 == 0,
                     f"feature map {h}x{w} must have even sides for encoder_stride=2; use encoder_stride=1")
        for name in ("normalize_mean", "normalize_std"):
            stats = getattr(self, name)
            if stats is not None:
                _require(len(stats) == self.input_shape[0], f"model.{name} needs one value per input channel")
        if self.normalize_std is not None:
            _require(all(s > 0 for s in self.normalize_std), "model.normalize_std must be positive")

    @property
    def feature_channels(self) -> int:
        return self.stage_width * 2 ** (self.extractor_blocks - 1)

    @property
    def feature_spatial(self) -> Tuple[int, int]:
        _, h, w = self.input_shape
        for _ in range(self.extractor_blocks - 1):
            h, w = (h + 1) // 2, (w + 1) // 2
        return h, w


# ============================================================
# LOSSES AND TRAINING
# ============================================================

@dataclass(frozen=True)
class LossWeights:
    w_dist: float = 1.0
    w_ce: float = 1.0
    w_bce: float = 1.0
    w_adv: float = 1.0
    w_res: float = 1.0
    w_kl: float = 1.0

    def __post_init__(self):
        for name, value in dataclasses.asdict(self).items():
            _require(value == value and value not in (float("inf"), float("-inf")),
                     f"losses.{name} must be finite, got {value}")
            _require(value >= 0, f"losses.{name} must be >= 0, got {value}")

    def as_component_map(self) -> Dict[str, float]:
        """Weights keyed by loss component name (L_dist, L_ce, ...)."""
        return {
            "L_dist": self.w_dist,
            "L_ce": self.w_ce,
            "L_bce": self.w_bce,
            "L_adv": self.w_adv,
            "L_res": self.w_res,
            "L_kl": self.w_kl,
        }


def _default_component_lr_scale() -> Dict[str, float]:
    return {"theta": 1.0, "omega_r": 1.0, "phi": 1.0,
            "omega_nr": 0.1, "omega_ds": 0.1, "psi": 0.1, "theta_rec": 0.1}


def _default_eval_attack() -> AttackSpec:
    return AttackSpec(kind="pgd", epsilon=8 / 255, step_size=2 / 255, num_steps=10, random_start=True)


@dataclass(frozen=True)
class EarlyStoppingConfig:
    enabled: bool = True
    metric: str = "pgd_robust_accuracy"
    eval_attack: AttackSpec = field(default_factory=_default_eval_attack)
    patience: int = 10
    max_eval_samples: Optional[int] = None

    def __post_init__(self):
        _require(self.metric in ("pgd_robust_accuracy", "clean_accuracy"),
                 f"early_stopping.metric must be pgd_robust_accuracy or clean_accuracy, got {self.metric!r}")
        _require(self.patience >= 1, f"early_stopping.patience must be >= 1, got {self.patience}")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 120
    batch_size: int = 128
    learning_rate: float = 0.1
    lr_decay_epochs: Tuple[int, ...] = (100, 105, 110)
    lr_decay_factor: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    component_lr_scale: Dict[str, float] = field(default_factory=_default_component_lr_scale)
    diversify: DiversifySpec = field(default_factory=DiversifySpec)
    loss_weights: LossWeights = field(default_factory=LossWeights)
    early_stopping: EarlyStoppingConfig = field(default_factory=EarlyStoppingConfig)
    inner_loss: str = "cross_entropy"
    ce_updates_extractor: bool = True
    update_mode: str = "sequential"
    kl_mode: str = "surrogate"
    checkpoint_every: int = 10
    seed: int = 0

    def __post_init__(self):
        _require(self.epochs >= 1, f"train.epochs must be >= 1, got {self.epochs}")
        _require(self.batch_size >= 1, f"train.batch_size must be >= 1, got {self.batch_size}")
        _require(self.learning_rate > 0, f"train.learning_rate must be > 0, got {self.learning_rate}")
        _require(all(b > a for a, b in zip(self.lr_decay_epochs, self.lr_decay_epochs[1:])),
                 f"train.lr_decay_epochs must be strictly increasing, got {self.lr_decay_epochs}")
        _require(0 < self.lr_decay_factor <= 1, f"train.lr_decay_factor must be in (0, 1], got {self.lr_decay_factor}")
        _require(self.momentum >= 0, "train.momentum must be >= 0")
        _require(self.weight_decay >= 0, "train.weight_decay must be >= 0")
        unknown = set(self.component_lr_scale) - set(PARAMETER_GROUPS)
        _require(not unknown, f"train.component_lr_scale has unknown groups: {sorted(unknown)}")
        _require(all(v >= 0 for v in self.component_lr_scale.values()), "train.component_lr_scale must be >= 0")
        _require(self.inner_loss in INNER_LOSSES, f"train.inner_loss must be one of {INNER_LOSSES}")
        _require(self.update_mode in ("sequential", "accumulated"),
                 f"train.update_mode must be sequential or accumulated, got {self.update_mode!r}")
        _require(self.kl_mode in ("surrogate", "minimize"),
                 f"train.kl_mode must be surrogate or minimize, got {self.kl_mode!r}")
        _require(self.checkpoint_every >= 1, "train.checkpoint_every must be >= 1")

    def lr_scale(self, group: str) -> float:
        return self.component_lr_scale.get(group, 1.0)


# ============================================================
# EVALUATION
# ============================================================

def _default_eval_attacks() -> Tuple[AttackSpec, ...]:
    pgd20 = AttackSpec(kind="pgd", num_steps=20)
    return (
        AttackSpec(kind="fgsm", num_steps=1, random_start=False),
        pgd20,
        dataclasses.replace(pgd20, inner_loss="cw_margin"),
        dataclasses.replace(pgd20, inner_loss="dlr"),
        AttackSpec(kind="spsa", num_steps=20, random_start=False, step_size=1 / 255),
    )


@dataclass(frozen=True)
class EvaluationConfig:
    attacks: Tuple[AttackSpec, ...] = field(default_factory=_default_eval_attacks)
    batch_size: int = 256
    max_samples: Optional[int] = None
    knn_k: int = 50
    detection_threshold: float = 0.5
    iterations: Tuple[int, ...] = (10, 20, 50, 100)
    embedding_branches: Tuple[str, ...] = BRANCHES
    surrogate_ckpt: Optional[str] = None
    natural_ckpt: Optional[str] = None

    def __post_init__(self):
        _require(self.batch_size >= 1, "evaluation.batch_size must be >= 1")
        _require(self.knn_k >= 1, f"evaluation.knn_k must be >= 1, got {self.knn_k}")
        _require(0 <= self.detection_threshold <= 1, "evaluation.detection_threshold must be in [0, 1]")
        _require(all(t >= 1 for t in self.iterations), "evaluation.iterations must be positive")
        _require(set(self.embedding_branches) <= set(BRANCHES),
                 f"evaluation.embedding_branches must be a subset of {BRANCHES}")


@dataclass(frozen=True)
class RunConfig:
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    model: BackboneConfig = field(default_factory=BackboneConfig)
    attack: AttackSpec = field(default_factory=_default_eval_attack)
    train: TrainConfig = field(default_factory=TrainConfig)
    evaluation: EvaluationConfig = field(default_factory=EvaluationConfig)
    schema_version: int = SCHEMA_VERSION
    units_metadata: Dict[str, Dict[str, Any]] = field(default_factory=dict, compare=False)

    def __post_init__(self):
        _require(self.schema_version == SCHEMA_VERSION,
                 f"schema_version {self.schema_version} is not supported (expected {SCHEMA_VERSION})")

    @property
    def loss_weights(self) -> LossWeights:
        return self.train.loss_weights

    def to_dict(self) -> Dict[str, Any]:
        """
        Plain, JSON-compatible dict with normalized budgets (used for hashing,
        manifests and checkpoint metadata). Budget sections carry
        ``units: normalized`` so config_from_dict reads them back unchanged.
        """
        data = _to_plain(self, units_metadata={})
        data.pop("units_metadata", None)
        return data


# ============================================================
# READ / WRITE
# ============================================================

# Sections whose epsilon/step-size values may be written in pixel units
_BUDGET_FIELDS = {
    AttackSpec: ("epsilon", "step_size"),
    DiversifySpec: ("epsilon_range", "step_size_range"),
}


def read_config(path: Union[str, Path]) -> RunConfig:
    """
    Read a YAML run config.

    Args:
        path: Path to the YAML file

    Returns:
        Validated RunConfig

    Raises:
        ConfigurationError: On unknown keys (message names the key path) or invalid values
    """
    path = Path(path)
    try:
        with open(path, "r", encoding="utf-8") as f:
            raw = yaml.safe_load(f) or {}
    except FileNotFoundError as e:
        raise ConfigurationError(f"Config file not found: {path}") from e
    except yaml.YAMLError as e:
        raise ConfigurationError(f"Config file {path} is not valid YAML: {e}") from e
    return config_from_dict(raw)


def config_from_dict(raw: Dict[str, Any]) -> RunConfig:
    """Build a RunConfig from an already-parsed mapping."""
    if not isinstance(raw, dict):
        raise ConfigurationError("Config root must be a mapping")
    units_metadata: Dict[str, Dict[str, Any]] = {}
    raw = dict(raw)
    raw.pop("units_metadata", None)
    cfg = _build(RunConfig, raw, "", units_metadata)
    return dataclasses.replace(cfg, units_metadata=units_metadata)


def write_config(cfg: RunConfig, path: Union[str, Path]) -> Path:
    """
    Write a RunConfig as YAML. Sections read in pixel units are written back in
    pixel units with their original values.

    Returns:
        The written path
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = _to_plain(cfg, units_metadata=cfg.units_metadata)
    data.pop("units_metadata", None)
    with open(path, "w", encoding="utf-8") as f:
        yaml.safe_dump(data, f, sort_keys=False, default_flow_style=None)
    return path


def config_hash(cfg: RunConfig) -> str:
    """SHA1 of the canonical JSON form of the config."""
    canonical = json.dumps(cfg.to_dict(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha1(canonical.encode()).hexdigest()


# Report label -> (kind, inner_loss) accepted by the --attack flag
ATTACK_FLAG_LABELS = {
    "pgd": ("pgd", "cross_entropy"),
    "fgsm": ("fgsm", "cross_entropy"),
    "spsa": ("spsa", "cross_entropy"),
    "cw": ("pgd", "cw_margin"),
    "dlr": ("pgd", "dlr"),
}


def override_attack(base: AttackSpec, label: Optional[str] = None, epsilon: Optional[float] = None,
                    num_steps: Optional[int] = None, step_size: Optional[float] = None) -> AttackSpec:
    """
    Apply command-line attack flags on top of ``base``.

    ``epsilon`` and ``step_size`` are 8-bit pixel values and go through the same
    conversion as a ``units: pixel`` config section. Selecting fgsm without a
    step count forces a single step.
    """
    changes: Dict[str, Any] = {"units": "pixel"}
    if epsilon is not None:
        changes["epsilon"] = epsilon
    if step_size is not None:
        changes["step_size"] = step_size
    changes = _normalize_budget_units(AttackSpec, changes, "cli", {})

    if label is not None:
        if label not in ATTACK_FLAG_LABELS:
            raise ConfigurationError(f"--attack must be one of {tuple(ATTACK_FLAG_LABELS)}, got {label!r}")
        changes["kind"], changes["inner_loss"] = ATTACK_FLAG_LABELS[label]
        if label == "fgsm" and num_steps is None:
            num_steps = 1
    if num_steps is not None:
        changes["num_steps"] = int(num_steps)
    return dataclasses.replace(base, **changes)


def _build(cls, data: Any, path: str, units_metadata: Dict[str, Dict[str, Any]]):
    if isinstance(data, cls):
        return data
    if not isinstance(data, dict):
        raise ConfigurationError(f"{path or '<root>'} must be a mapping, got {type(data).__name__}")

    data = dict(data)
    if cls in _BUDGET_FIELDS:
        data = _normalize_budget_units(cls, data, path, units_metadata)

    hints = typing.get_type_hints(cls)
    known = {f.name for f in dataclasses.fields(cls) if f.init and f.name != "units_metadata"}
    for key in data:
        if key not in known:
            raise ConfigurationError(f"Unknown config key: {_join(path, key)}")

    kwargs = {}
    for name, value in data.items():
        kwargs[name] = _coerce(value, hints[name], _join(path, name), units_metadata)
    try:
        return cls(**kwargs)
    except TypeError as e:
        raise ConfigurationError(f"Invalid section {path or '<root>'}: {e}") from e


def _normalize_budget_units(cls, data: Dict[str, Any], path: str,
                            units_metadata: Dict[str, Dict[str, Any]]) -> Dict[str, Any]:
    units = data.pop("units", "pixel")
    if units not in ("pixel", "normalized"):
        raise ConfigurationError(f"{_join(path, 'units')} must be pixel or normalized, got {units!r}")
    if units == "normalized":
        return data

    original = {}
    for name in _BUDGET_FIELDS[cls]:
        if name not in data:
            continue
        value = data[name]
        original[name] = value
        try:
            if isinstance(value, (list, tuple)):
                data[name] = [float(v) / PIXEL_SCALE for v in value]
            else:
                data[name] = float(value) / PIXEL_SCALE
        except (TypeError, ValueError) as e:
            raise ConfigurationError(f"{_join(path, name)} must be numeric, got {value!r}") from e
    if original:
        units_metadata[path] = original
    return data


def _coerce(value: Any, annotation: Any, path: str, units_metadata: Dict[str, Dict[str, Any]]):
    origin = typing.get_origin(annotation)
    args = typing.get_args(annotation)

    if origin is Union:
        if value is None and type(None) in args:
            return None
        non_none = [a for a in args if a is not type(None)]
        if len(non_none) == 1:
            return _coerce(value, non_none[0], path, units_metadata)
        if isinstance(value, (int, str)) and not isinstance(value, bool):
            return value
        raise ConfigurationError(f"{path} has unsupported value {value!r}")

    if dataclasses.is_dataclass(annotation):
        return _build(annotation, value, path, units_metadata)

    if origin in (tuple, list):
        if not isinstance(value, (list, tuple)):
            raise ConfigurationError(f"{path} must be a list, got {value!r}")
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_coerce(v, args[0], f"{path}[{i}]", units_metadata) for i, v in enumerate(value))
        if args and len(args) != len(value):
            raise ConfigurationError(f"{path} must have {len(args)} entries, got {len(value)}")
        return tuple(_coerce(v, a, f"{path}[{i}]", units_metadata) for i, (v, a) in enumerate(zip(value, args)))

    if origin is dict:
        if not isinstance(value, dict):
            raise ConfigurationError(f"{path} must be a mapping, got {value!r}")
        return {str(k): _coerce(v, args[1], _join(path, str(k)), units_metadata) for k, v in value.items()}

    if annotation is bool:
        if not isinstance(value, bool):
            raise ConfigurationError(f"{path} must be true or false, got {value!r}")
        return value
    if annotation in (int, float, str):
        if annotation is not str and isinstance(value, bool):
            raise ConfigurationError(f"{path} must be {annotation.__name__}, got {value!r}")
        try:
            coerced = annotation(value)
        except (TypeError, ValueError) as e:
            raise ConfigurationError(f"{path} must be {annotation.__name__}, got {value!r}") from e
        if annotation is int and isinstance(value, float) and coerced != value:
            raise ConfigurationError(f"{path} must be an integer, got {value!r}")
        return coerced
    return value


def _to_plain(obj: Any, path: str = "", units_metadata: Optional[Dict[str, Dict[str, Any]]] = None):
    if dataclasses.is_dataclass(obj):
        out = {}
        for f in dataclasses.fields(obj):
            out[f.name] = _to_plain(getattr(obj, f.name), _join(path, f.name), units_metadata)
        if units_metadata is not None and type(obj) in _BUDGET_FIELDS:
            out = _restore_budget_units(type(obj), out, units_metadata.get(path))
        return out
    if isinstance(obj, (list, tuple)):
        return [_to_plain(v, f"{path}[{i}]", units_metadata) for i, v in enumerate(obj)]
    if isinstance(obj, dict):
        return {k: _to_plain(v, _join(path, k), units_metadata) for k, v in obj.items()}
    return obj


def _restore_budget_units(cls, out: Dict[str, Any], original: Optional[Dict[str, Any]]) -> Dict[str, Any]:
    # Pixel units are only written back when every budget field was given in pixels and still matches
    if (original and set(original) == set(_BUDGET_FIELDS[cls])
            and all(_matches_pixel(original[k], out[k]) for k in original)):
        for k, v in original.items():
            out[k] = list(v) if isinstance(v, (list, tuple)) else v
        out["units"] = "pixel"
    else:
        out["units"] = "normalized"
    return out


def _matches_pixel(pixel_value: Any, normalized: Any) -> bool:
    if isinstance(pixel_value, (list, tuple)):
        return len(pixel_value) == len(normalized) and all(
            _matches_pixel(p, n) for p, n in zip(pixel_value, normalized))
    return abs(float(pixel_value) / PIXEL_SCALE - float(normalized)) < 1e-12


def _join(path: str, key: str) -> str:
    return f"{path}.{key}" if path else key
