"""
Artifact Contract Definitions
TypedDict definitions for every JSON record the toolkit writes, so loss logs,
manifests and evaluation reports keep a stable shape across versions.
"""

from typing import TypedDict, List, Optional, Dict, Any

from config.exceptions import ValidationError

FORMAT_TAG = "DISRO1"


class LossRecord(TypedDict):
    """One line of losses.jsonl (one optimization step)"""
    format: str
    epoch: int
    batch: int
    variant: str
    attack: Dict[str, Any]
    losses: Dict[str, float]
    total: float
    learning_rate: float
    flags: List[str]


class ManifestRecord(TypedDict):
    """One line of manifests.jsonl (one training or evaluation run)"""
    format: str
    run_id: str
    command: str
    config: Dict[str, Any]
    config_hash: str
    code_hash: Optional[str]
    seed: int
    started_at: str
    finished_at: Optional[str]
    status: str
    artifacts: Dict[str, str]
    environment: Dict[str, Any]


class DetectionDict(TypedDict):
    """Adversarial-example detection rates at one threshold"""
    threshold: float
    tpr: float
    tnr: float
    auc: float
    num_clean: int
    num_adversarial: int


class EvalReportDict(TypedDict):
    """Contract for report.json written by the eval command"""
    format: str
    model_hash: str
    model_name: str
    seed: int
    clean_accuracy: float
    attacks: Dict[str, Dict[str, Any]]
    black_box: Dict[str, Dict[str, Any]]
    detection: Optional[DetectionDict]
    two_path: Optional[Dict[str, float]]
    knn: Optional[Dict[str, float]]
    iteration_sweep: List[Dict[str, float]]
    obfuscation_checks: Dict[str, Optional[bool]]
    metadata: Dict[str, Any]


def validate_eval_report(data: dict) -> EvalReportDict:
    """
    Validate and normalize an evaluation report before it is written.

    Missing optional sections are filled with defaults; accuracies must lie in
    [0, 100] and detection rates in [0, 1].

    Raises:
        ValidationError: If a value is out of range or a required field is missing
    """
    for required in ("model_hash", "clean_accuracy"):
        if required not in data:
            raise ValidationError(f"Evaluation report is missing required field '{required}'")

    defaults = {
        'format': FORMAT_TAG,
        'model_name': '',
        'seed': 0,
        'attacks': {},
        'black_box': {},
        'detection': None,
        'two_path': None,
        'knn': None,
        'iteration_sweep': [],
        'obfuscation_checks': {},
        'metadata': {},
    }
    for field, default in defaults.items():
        if field not in data:
            data[field] = default

    _check_accuracy("clean_accuracy", data["clean_accuracy"])
    for label, entry in data["attacks"].items():
        _check_accuracy(f"attacks.{label}.accuracy", entry.get("accuracy"))
    for label, entry in data["black_box"].items():
        _check_accuracy(f"black_box.{label}.accuracy", entry.get("accuracy"))
    for name, value in (data["two_path"] or {}).items():
        _check_accuracy(f"two_path.{name}", value)
    for name, value in (data["knn"] or {}).items():
        _check_accuracy(f"knn.{name}", value)
    for point in data["iteration_sweep"]:
        _check_accuracy(f"iteration_sweep[{point.get('num_steps')}]", point.get("accuracy"))

    detection = data["detection"]
    if detection is not None:
        for rate in ("tpr", "tnr", "auc"):
            value = detection.get(rate)
            if value is None or not 0.0 <= float(value) <= 1.0:
                raise ValidationError(f"detection.{rate} must be in [0, 1], got {value}")

    return data


def _check_accuracy(name: str, value) -> None:
    if value is None or not 0.0 <= float(value) <= 100.0:
        raise ValidationError(f"{name} must be a percentage in [0, 100], got {value}")
