"""
Evaluation
Clean / white-box / black-box accuracy, k-NN on penultimate features,
discriminator-based detection, two-path inference, iteration sweeps,
embedding export and the report writer.

Every function treats the bundle as read-only and switches it to eval mode.
"""

import dataclasses
import hashlib
import json
import logging
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Union

import numpy as np
import pandas as pd
import torch
from sklearn.metrics import roc_auc_score
from tqdm import tqdm

from config.contracts import FORMAT_TAG, DetectionDict, EvalReportDict, validate_eval_report
from config.exceptions import ConfigurationError, ValidationError
from config.schema import BRANCHES, AttackSpec, EvaluationConfig
from services import losses
from services.attacks import check_constraints, make_loss_fn, run_attack
from services.datasets import ImageBatch
from services.model.bundle import ModelBundle

logger = logging.getLogger(__name__)

EMBEDDING_FLOAT_FORMAT = "%.8g"

# Detector: images (B, C, H, W) -> bool tensor, True = flagged adversarial
Detector = Callable[[torch.Tensor], torch.Tensor]


# ============================================================
# ACCURACY
# ============================================================

def clean_accuracy(bundle: ModelBundle, data: ImageBatch, batch_size: int = 256) -> float:
    """Percentage of samples whose robust-branch prediction equals the label."""
    _require_samples(data, "clean_accuracy")
    return _accuracy(predict(bundle, data, batch_size), data.labels)


def robust_accuracy(bundle: ModelBundle, data: ImageBatch, spec: AttackSpec, batch_size: int = 256,
                    progress: bool = False) -> float:
    """White-box accuracy: attacks target the bundle's own robust head."""
    _require_samples(data, "robust_accuracy")
    adversarial = attack_dataset(bundle, data, spec, batch_size, progress=progress)
    return _accuracy(predict(bundle, adversarial, batch_size), data.labels)


def black_box_accuracy(target: ModelBundle, surrogate: ModelBundle, data: ImageBatch, spec: AttackSpec,
                       batch_size: int = 256) -> float:
    """Transfer accuracy: attacks crafted on the surrogate, scored on the target."""
    _require_samples(data, "black_box_accuracy")
    adversarial = attack_dataset(surrogate, data, spec, batch_size)
    return _accuracy(predict(target, adversarial, batch_size), data.labels)


@torch.no_grad()
def predict(bundle: ModelBundle, data: ImageBatch, batch_size: int = 256) -> torch.Tensor:
    bundle.eval()
    device = _device_of(bundle)
    preds = [bundle.robust_logits(b.pixels.to(device)).argmax(dim=1).cpu() for b in data.batches(batch_size)]
    return torch.cat(preds) if preds else torch.zeros(0, dtype=torch.long)


def attack_dataset(bundle: ModelBundle, data: ImageBatch, spec: AttackSpec, batch_size: int = 256,
                   progress: bool = False) -> ImageBatch:
    """
    Attack every sample against ``bundle``'s robust branch.

    Batch i uses seed ``spec.seed + i``, so results depend only on the AttackSpec
    and the batch size. Budget and range constraints are checked on all outputs.
    """
    bundle.eval()
    device = _device_of(bundle)
    loss_fn = make_loss_fn(bundle.robust_logits, spec)
    pieces = []
    batches = data.batches(batch_size)
    if progress:
        batches = tqdm(batches, total=-(-len(data) // batch_size), desc=spec.label, leave=False)
    for i, batch in enumerate(batches):
        batch = batch.to(device)
        batch_spec = dataclasses.replace(spec, seed=spec.seed + i)
        adversarial = run_attack(batch_spec, loss_fn, batch)
        check_constraints(batch.pixels, adversarial.pixels, spec)
        pieces.append(adversarial.pixels.cpu())
    pixels = torch.cat(pieces) if pieces else data.pixels.clone()
    return data.with_pixels(pixels)


# ============================================================
# K-NN ON PENULTIMATE FEATURES
# ============================================================

@torch.no_grad()
def penultimate_features(bundle: ModelBundle, data: ImageBatch, batch_size: int = 256) -> torch.Tensor:
    """Last hidden representation of the classifier on the robust branch."""
    bundle.eval()
    device = _device_of(bundle)
    feats = []
    for batch in data.batches(batch_size):
        f = bundle.extract(batch.pixels.to(device))
        z_r = bundle.encode(f).z_r
        feats.append(bundle.penultimate(z_r).cpu())
    return torch.cat(feats) if feats else torch.zeros(0, bundle.config.latent_dim)


def knn_predict(train_features: torch.Tensor, train_labels: torch.Tensor, query_features: torch.Tensor,
                k: int) -> torch.Tensor:
    """
    Majority vote among the k nearest training features (Euclidean).
    Ties between classes go to the class with the smallest mean distance
    among its voting neighbours.
    """
    if k < 1:
        raise ValidationError(f"k must be >= 1, got {k}")
    if k > train_features.shape[0]:
        raise ValidationError(f"k = {k} exceeds the {train_features.shape[0]} reference points")
    distances = torch.cdist(query_features.double(), train_features.double())
    order = torch.sort(distances, dim=1, stable=True).indices[:, :k]
    neighbour_labels = train_labels[order]
    neighbour_dist = torch.gather(distances, 1, order)

    num_classes = int(train_labels.max()) + 1
    votes = torch.zeros(query_features.shape[0], num_classes, dtype=torch.float64)
    votes.scatter_add_(1, neighbour_labels, torch.ones_like(neighbour_dist))
    dist_sum = torch.zeros_like(votes).scatter_add_(1, neighbour_labels, neighbour_dist)
    mean_dist = torch.where(votes > 0, dist_sum / votes.clamp_min(1), torch.full_like(votes, float("inf")))

    top = votes.max(dim=1, keepdim=True).values
    tied_mean = torch.where(votes == top, mean_dist, torch.full_like(mean_dist, float("inf")))
    return tied_mean.argmin(dim=1)


def knn_accuracy(bundle: ModelBundle, train_subset: ImageBatch, test_set: ImageBatch, k: int,
                 attacked: bool = False, spec: Optional[AttackSpec] = None, batch_size: int = 256) -> float:
    """k-NN accuracy of (optionally white-box attacked) test images against clean training features."""
    _require_samples(test_set, "knn_accuracy")
    if attacked:
        if spec is None:
            raise ConfigurationError("knn_accuracy(attacked=True) needs an attack spec")
        test_set = attack_dataset(bundle, test_set, spec, batch_size)
    reference = penultimate_features(bundle, train_subset, batch_size)
    queries = penultimate_features(bundle, test_set, batch_size)
    preds = knn_predict(reference, train_subset.labels, queries, k)
    return _accuracy(preds, test_set.labels)


# ============================================================
# DETECTION AND TWO-PATH INFERENCE
# ============================================================

@torch.no_grad()
def detection_scores(bundle: ModelBundle, images: torch.Tensor, batch_size: int = 256) -> torch.Tensor:
    """D_psi(z_ds) per image: the probability that the image is natural."""
    bundle.eval()
    device = _device_of(bundle)
    scores = []
    for start in range(0, images.shape[0], batch_size):
        f = bundle.extract(images[start:start + batch_size].to(device))
        scores.append(bundle.discriminate(bundle.encode(f).z_ds).cpu())
    return torch.cat(scores) if scores else torch.zeros(0)


def detect(bundle: ModelBundle, images: torch.Tensor, threshold: float = 0.5,
           batch_size: int = 256) -> List[Dict[str, Union[bool, float]]]:
    """Flag each image as adversarial iff D_psi(z_ds) < threshold."""
    scores = detection_scores(bundle, images, batch_size)
    return [{"is_adversarial": bool(s < threshold), "score": float(s)} for s in scores]


def detection_metrics(bundle: ModelBundle, clean: ImageBatch, adversarial: ImageBatch,
                      threshold: float = 0.5, batch_size: int = 256) -> DetectionDict:
    """
    TPR (adversarial flagged) and TNR (clean passed) at ``threshold`` plus the
    threshold-free AUC with adversarial as the positive class.
    """
    _require_samples(clean, "detection_metrics")
    _require_samples(adversarial, "detection_metrics")
    clean_scores = detection_scores(bundle, clean.pixels, batch_size)
    adv_scores = detection_scores(bundle, adversarial.pixels, batch_size)
    truth = np.concatenate([np.zeros(len(clean_scores)), np.ones(len(adv_scores))])
    suspicion = np.concatenate([1.0 - clean_scores.double().numpy(), 1.0 - adv_scores.double().numpy()])
    return DetectionDict(
        threshold=float(threshold),
        tpr=float((adv_scores < threshold).double().mean()),
        tnr=float((clean_scores >= threshold).double().mean()),
        auc=float(roc_auc_score(truth, suspicion)),
        num_clean=len(clean_scores),
        num_adversarial=len(adv_scores),
    )


@torch.no_grad()
def two_path_classify(robust_bundle: ModelBundle, natural_bundle: ModelBundle, images: torch.Tensor,
                      threshold: float = 0.5, detector: Optional[Detector] = None,
                      batch_size: int = 256) -> torch.Tensor:
    """
    Route detected-natural images to the natural model and detected-adversarial
    images to the robust branch.
    """
    if detector is None:
        detector = lambda x: detection_scores(robust_bundle, x, batch_size) < threshold  # noqa: E731
    robust_bundle.eval()
    natural_bundle.eval()
    flagged = detector(images).cpu().bool()
    labels = torch.empty(images.shape[0], dtype=torch.long)
    for start in range(0, images.shape[0], batch_size):
        chunk = images[start:start + batch_size]
        flags = flagged[start:start + batch_size]
        robust = robust_bundle.robust_logits(chunk.to(_device_of(robust_bundle))).argmax(dim=1).cpu()
        natural = natural_bundle.robust_logits(chunk.to(_device_of(natural_bundle))).argmax(dim=1).cpu()
        labels[start:start + batch_size] = torch.where(flags, robust, natural)
    return labels


def two_path_accuracy(robust_bundle: ModelBundle, natural_bundle: ModelBundle, data: ImageBatch,
                      spec: AttackSpec, threshold: float = 0.5, detector: Optional[Detector] = None,
                      batch_size: int = 256) -> Dict[str, float]:
    """Clean and attacked accuracy of two-path inference; attacks target the robust branch."""
    _require_samples(data, "two_path_accuracy")
    adversarial = attack_dataset(robust_bundle, data, spec, batch_size)
    clean_pred = two_path_classify(robust_bundle, natural_bundle, data.pixels, threshold, detector, batch_size)
    adv_pred = two_path_classify(robust_bundle, natural_bundle, adversarial.pixels, threshold, detector, batch_size)
    return {"clean": _accuracy(clean_pred, data.labels), "robust": _accuracy(adv_pred, data.labels)}


# ============================================================
# SWEEPS AND EXPORTS
# ============================================================

def iteration_sweep(bundle: ModelBundle, data: ImageBatch, iterations: Sequence[int], base_spec: AttackSpec,
                    batch_size: int = 256) -> List[Dict[str, float]]:
    """Robust accuracy per attack iteration count, everything else fixed."""
    curve = []
    for steps in iterations:
        spec = dataclasses.replace(base_spec, num_steps=int(steps))
        accuracy = robust_accuracy(bundle, data, spec, batch_size)
        logger.info(f"[Sweep] T={steps}: {accuracy:.2f}%")
        curve.append({"num_steps": int(steps), "accuracy": accuracy})
    return curve


@torch.no_grad()
def _latents(bundle: ModelBundle, data: ImageBatch, batch_size: int) -> Dict[str, torch.Tensor]:
    bundle.eval()
    device = _device_of(bundle)
    collected: Dict[str, List[torch.Tensor]] = {b: [] for b in BRANCHES}
    for batch in data.batches(batch_size):
        triple = bundle.encode(bundle.extract(batch.pixels.to(device)))
        for branch in BRANCHES:
            collected[branch].append(triple.branch(branch).cpu())
    return {b: torch.cat(v) if v else torch.zeros(0, bundle.config.latent_dim) for b, v in collected.items()}


def export_embeddings(bundle: ModelBundle, data: ImageBatch, branches: Sequence[str] = BRANCHES,
                      attacked: bool = False, spec: Optional[AttackSpec] = None,
                      path: Optional[Union[str, Path]] = None, batch_size: int = 256) -> pd.DataFrame:
    """
    One row per (domain, branch, sample) with columns
    id, label, domain, branch, dim_0 .. dim_{latent-1}.
    """
    unknown = set(branches) - set(BRANCHES)
    if unknown:
        raise ConfigurationError(f"Unknown embedding branches: {sorted(unknown)}")
    domains = [("nat", data)]
    if attacked:
        if spec is None:
            raise ConfigurationError("export_embeddings(attacked=True) needs an attack spec")
        domains.append(("adv", attack_dataset(bundle, data, spec, batch_size)))

    dim_columns = [f"dim_{i}" for i in range(bundle.config.latent_dim)]
    frames = []
    for domain, images in domains:
        latents = _latents(bundle, images, batch_size)
        for branch in branches:
            frame = pd.DataFrame(latents[branch].double().numpy(), columns=dim_columns)
            frame.insert(0, "branch", branch)
            frame.insert(0, "domain", domain)
            frame.insert(0, "label", images.labels.numpy())
            frame.insert(0, "id", images.ids.numpy())
            frames.append(frame)
    table = pd.concat(frames, ignore_index=True)
    if path is not None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        table.to_csv(path, index=False, float_format=EMBEDDING_FLOAT_FORMAT)
        logger.info(f"[Export] {len(table)} embedding rows -> {path}")
    return table


def feature_histogram(bundle: ModelBundle, images: torch.Tensor, batch_size: int = 256) -> np.ndarray:
    """DS latent vector per image, shape (N, latent_dim), for intensity histograms."""
    bundle.eval()
    device = _device_of(bundle)
    rows = []
    with torch.no_grad():
        for start in range(0, images.shape[0], batch_size):
            f = bundle.extract(images[start:start + batch_size].to(device))
            rows.append(bundle.encode(f).z_ds.cpu().double().numpy())
    return np.concatenate(rows) if rows else np.zeros((0, bundle.config.latent_dim))


HISTOGRAM_COLUMNS = ["image", "domain", "feature", "value"]


def histogram_frame(histograms: Dict[str, np.ndarray]) -> pd.DataFrame:
    """Long-format table of DS latents: one row per (domain, image, feature)."""
    parts = []
    for domain, values in histograms.items():
        values = np.asarray(values)
        n, dim = values.shape
        parts.append(pd.DataFrame({
            "image": np.repeat(np.arange(n), dim),
            "domain": domain,
            "feature": np.tile(np.arange(dim), n),
            "value": values.ravel(),
        }))
    if not parts:
        return pd.DataFrame(columns=HISTOGRAM_COLUMNS)
    return pd.concat(parts, ignore_index=True)[HISTOGRAM_COLUMNS]


def disentanglement_losses(bundle: ModelBundle, data: ImageBatch, spec: AttackSpec, kl_mode: str = "surrogate",
                           batch_size: int = 256) -> Dict[str, float]:
    """
    Held-out L_dist, L_res and L_kl of natural images and their white-box
    counterparts under ``spec``, averaged over samples.
    """
    _require_samples(data, "disentanglement_losses")
    bundle.eval()
    adversarial = attack_dataset(bundle, data, spec, batch_size)
    device = _device_of(bundle)
    totals = {"L_dist": 0.0, "L_res": 0.0, "L_kl": 0.0}
    with torch.no_grad():
        for start in range(0, len(data), batch_size):
            x = data.pixels[start:start + batch_size].to(device)
            x_adv = adversarial.pixels[start:start + batch_size].to(device)
            f, f_adv = bundle.extract(x), bundle.extract(x_adv)
            nat, adv = bundle.encode(f), bundle.encode(f_adv)
            n = x.shape[0]
            totals["L_dist"] += n * float(losses.angular_distance(nat.z_r, adv.z_r))
            totals["L_res"] += n * 0.5 * float(losses.reconstruction_l1(bundle.reconstruct(nat), f)
                                               + losses.reconstruction_l1(bundle.reconstruct(adv), f_adv))
            totals["L_kl"] += n * 0.5 * float(losses.pairwise_kl(nat, kl_mode) + losses.pairwise_kl(adv, kl_mode))
    return {name: value / len(data) for name, value in totals.items()}


# ============================================================
# REPORTS
# ============================================================

def model_hash(bundle: ModelBundle) -> str:
    """SHA1 over every state-dict tensor, in key order."""
    digest = hashlib.sha1()
    for name, tensor in sorted(bundle.state_dict().items()):
        digest.update(name.encode())
        digest.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return digest.hexdigest()


def obfuscation_checks(report: Dict) -> Dict[str, Optional[bool]]:
    """
    Gradient-masking diagnostics. Each check is None when its inputs are absent:
    - black_box_not_stronger: black-box PGD accuracy >= white-box PGD accuracy
    - gradient_free_not_stronger: SPSA accuracy >= PGD accuracy
    - single_step_not_stronger: FGSM accuracy >= PGD accuracy
    - more_iterations_not_weaker: sweep is non-increasing within 1 point
    """
    attacks = {k: v["accuracy"] for k, v in report.get("attacks", {}).items()}
    black_box = {k: v["accuracy"] for k, v in report.get("black_box", {}).items()}
    pgd = attacks.get("pgd")

    def at_least(a, b):
        return None if a is None or b is None else bool(a >= b)

    sweep = [p["accuracy"] for p in report.get("iteration_sweep", [])]
    monotone = None
    if len(sweep) >= 2:
        monotone = all(later <= earlier + 1.0 for earlier, later in zip(sweep, sweep[1:]))
    return {
        "black_box_not_stronger": at_least(black_box.get("pgd"), pgd),
        "gradient_free_not_stronger": at_least(attacks.get("spsa"), pgd),
        "single_step_not_stronger": at_least(attacks.get("fgsm"), pgd),
        "more_iterations_not_weaker": monotone,
    }


def evaluate(bundle: ModelBundle, data: ImageBatch, config: EvaluationConfig, *,
             surrogate: Optional[ModelBundle] = None, natural: Optional[ModelBundle] = None,
             train_subset: Optional[ImageBatch] = None, model_name: str = "", seed: int = 0,
             attack_labels: Optional[Sequence[str]] = None, sweep: bool = True,
             progress: bool = True) -> EvalReportDict:
    """
    Full evaluation of one bundle.

    Args:
        surrogate: Clean-trained model for black-box transfer (skipped when None)
        natural: Natural model for two-path inference (skipped when None)
        train_subset: Clean reference points for k-NN (skipped when None)
        attack_labels: Restrict config.attacks to these labels
    """
    data = data.head(config.max_samples)
    _require_samples(data, "evaluate")
    num_classes = bundle.config.num_classes
    bs = config.batch_size

    specs: Dict[str, AttackSpec] = {}
    for spec in config.attacks:
        if attack_labels is not None and spec.label not in attack_labels:
            continue
        if spec.inner_loss == "dlr" and num_classes < 3:
            logger.warning(f"Skipping {spec.label}: DLR needs at least 3 classes, model has {num_classes}")
            continue
        label = spec.label
        suffix = 2
        while label in specs:
            label = f"{spec.label}_{suffix}"
            suffix += 1
        specs[label] = dataclasses.replace(spec, seed=seed + spec.seed)

    report: Dict = {
        "format": FORMAT_TAG,
        "model_hash": model_hash(bundle),
        "model_name": model_name,
        "seed": seed,
        "clean_accuracy": clean_accuracy(bundle, data, bs),
        "attacks": {},
        "black_box": {},
        "detection": None,
        "two_path": None,
        "knn": None,
        "iteration_sweep": [],
        "metadata": {"num_samples": len(data), "attack_specs": {}},
    }
    logger.info(f"[Eval] clean accuracy {report['clean_accuracy']:.2f}% on {len(data)} samples")

    for label, spec in specs.items():
        accuracy = robust_accuracy(bundle, data, spec, bs, progress=progress)
        report["attacks"][label] = {"accuracy": accuracy, "spec": spec.describe()}
        report["metadata"]["attack_specs"][label] = dataclasses.asdict(spec)
        logger.info(f"[Eval] {spec.describe()}: {accuracy:.2f}%")
        if surrogate is not None and spec.kind != "spsa":
            transfer = black_box_accuracy(bundle, surrogate, data, spec, bs)
            report["black_box"][label] = {"accuracy": transfer, "spec": spec.describe()}
            logger.info(f"[Eval] black-box {label}: {transfer:.2f}%")

    reference_label = "pgd" if "pgd" in specs else next(iter(specs), None)
    if reference_label is not None:
        reference_spec = specs[reference_label]
        adversarial = attack_dataset(bundle, data, reference_spec, bs)
        report["detection"] = detection_metrics(bundle, data, adversarial, config.detection_threshold, bs)
        if natural is not None:
            report["two_path"] = two_path_accuracy(bundle, natural, data, reference_spec,
                                                   config.detection_threshold, batch_size=bs)
        if train_subset is not None and len(train_subset) >= config.knn_k:
            report["knn"] = {
                "clean": knn_accuracy(bundle, train_subset, data, config.knn_k, batch_size=bs),
                "robust": knn_accuracy(bundle, train_subset, data, config.knn_k, attacked=True,
                                       spec=reference_spec, batch_size=bs),
                "softmax_clean": report["clean_accuracy"],
                "softmax_robust": report["attacks"][reference_label]["accuracy"],
            }
        elif train_subset is not None:
            logger.warning(f"Skipping k-NN: {len(train_subset)} reference points < k = {config.knn_k}")
        if sweep and config.iterations:
            report["iteration_sweep"] = iteration_sweep(bundle, data, config.iterations, reference_spec, bs)

    report["obfuscation_checks"] = obfuscation_checks(report)
    return validate_eval_report(report)


def write_report(report: EvalReportDict, path: Union[str, Path]) -> Dict[str, Path]:
    """
    Write report.json and a CSV summary with one row per (model, attack).

    Returns:
        {"report": json path, "summary": csv path}
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(report, f, indent=2, sort_keys=True)
    summary_path = path.with_suffix(".csv")
    summary_frame(report).to_csv(summary_path, index=False)
    logger.info(f"[Eval] report -> {path}, summary -> {summary_path}")
    return {"report": path, "summary": summary_path}


def read_report(path: Union[str, Path]) -> EvalReportDict:
    with open(path, "r", encoding="utf-8") as f:
        return validate_eval_report(json.load(f))


def summary_frame(report: EvalReportDict) -> pd.DataFrame:
    rows = [{"model": report["model_name"] or report["model_hash"][:12], "attack": "clean",
             "setting": "white_box", "accuracy": report["clean_accuracy"]}]
    for setting, section in (("white_box", report["attacks"]), ("black_box", report["black_box"])):
        for label, entry in section.items():
            rows.append({"model": rows[0]["model"], "attack": label, "setting": setting,
                         "accuracy": entry["accuracy"]})
    return pd.DataFrame(rows, columns=["model", "attack", "setting", "accuracy"])


def aggregate_reports(reports: Sequence[EvalReportDict]) -> pd.DataFrame:
    """Mean and standard deviation of every accuracy across reports (e.g. seeds)."""
    if not reports:
        raise ValidationError("aggregate_reports needs at least one report")
    frame = pd.concat([summary_frame(r) for r in reports], ignore_index=True)
    grouped = frame.groupby(["attack", "setting"], sort=False)["accuracy"]
    out = grouped.agg(["mean", "std", "count"]).reset_index()
    out["std"] = out["std"].fillna(0.0)
    return out


# ============================================================
# HELPERS
# ============================================================

def _accuracy(preds: torch.Tensor, labels: torch.Tensor) -> float:
    return 100.0 * float((preds.cpu() == labels.cpu()).double().mean())


def _require_samples(data: ImageBatch, where: str) -> None:
    if len(data) == 0:
        raise ValidationError(f"{where}: dataset is empty")


def _device_of(bundle: ModelBundle) -> torch.device:
    return next(bundle.parameters()).device
