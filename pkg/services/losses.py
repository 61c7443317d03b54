"""
Training Objectives
Angular distance, branch cross-entropy, discriminator / encoder adversarial
terms, feature reconstruction, pairwise KL, and their weighted composition.

All functions are pure and dtype-agnostic so they can be gradient-checked in
double precision.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Any, Dict, List, Mapping, Optional, Sequence, Union

import torch
import torch.nn.functional as F

from config.contracts import FORMAT_TAG, LossRecord
from config.exceptions import ConfigurationError, NumericalError, ValidationError
from config.schema import LossWeights

logger = logging.getLogger(__name__)

NORM_FLOOR = 1e-12
PROB_FLOOR = 1e-12
CE_BRANCHES = ("r", "nr", "r_adv", "nr_adv")
KL_MODES = ("surrogate", "minimize")
COMPONENTS = ("L_dist", "L_ce", "L_bce", "L_adv", "L_res", "L_kl")


def angular_distance(z: torch.Tensor, z_prime: torch.Tensor, flags: Optional[List[str]] = None) -> torch.Tensor:
    """
    1 - |z . z'| / (||z|| ||z'||), averaged over the batch for (B, D) inputs.

    Anti-parallel vectors score 0 like parallel ones. A norm product below
    1e-12 is floored and, when ``flags`` is given, "L_dist:zero_norm" is added.
    """
    if z.shape != z_prime.shape:
        raise ValidationError(f"angular_distance: shapes differ {tuple(z.shape)} vs {tuple(z_prime.shape)}")
    norms = z.norm(dim=-1) * z_prime.norm(dim=-1)
    if flags is not None and bool((norms < NORM_FLOOR).any()):
        flags.append("L_dist:zero_norm")
    cosine = (z * z_prime).sum(dim=-1).abs() / norms.clamp_min(NORM_FLOOR)
    return (1.0 - cosine).mean()


def branch_cross_entropy(logits_by_branch: Mapping[str, torch.Tensor], labels: torch.Tensor) -> torch.Tensor:
    """
    Mean cross-entropy over the four branches r, nr, r_adv, nr_adv.

    Reversal of the nr_adv gradient towards omega_nr happens upstream, in the
    latent fed to the classifier (ModelBundle.reversed_nr_latent).
    """
    missing = [b for b in CE_BRANCHES if b not in logits_by_branch]
    if missing:
        raise ValidationError(f"branch_cross_entropy: missing branch logits {missing}")
    num_classes = logits_by_branch["r"].shape[-1]
    if labels.numel() and (int(labels.min()) < 0 or int(labels.max()) >= num_classes):
        raise ValidationError(f"branch_cross_entropy: label out of range for {num_classes} classes")
    terms = [F.cross_entropy(logits_by_branch[b], labels) for b in CE_BRANCHES]
    return torch.stack(terms).mean()


def discriminator_bce(nat_probs: Sequence[torch.Tensor], adv_probs: Sequence[torch.Tensor]) -> torch.Tensor:
    """
    -E[log D(z)] over the natural families - E[log(1 - D(z'))] over the
    adversarial ones; each expectation pools features and batch.
    """
    nat = _pool_probs(nat_probs, "discriminator_bce")
    adv = _pool_probs(adv_probs, "discriminator_bce")
    return -_log(nat).mean() - _log_complement(adv).mean()


def encoder_adversarial_losses(nat_probs: Mapping[str, torch.Tensor],
                               adv_probs: Mapping[str, torch.Tensor]) -> Dict[str, torch.Tensor]:
    """
    Encoder objectives against a fixed discriminator.

    loss_r_nr = E[log D(z)] over {r, nr} + E[log(1 - D(z'))] over {r', nr'}
    loss_ds   = -E[log D(z_ds)] - E[log(1 - D(z'_ds))]
    """
    nat_rnr = _pool_probs([nat_probs["r"], nat_probs["nr"]], "encoder_adversarial_losses")
    adv_rnr = _pool_probs([adv_probs["r"], adv_probs["nr"]], "encoder_adversarial_losses")
    nat_ds = _pool_probs([nat_probs["ds"]], "encoder_adversarial_losses")
    adv_ds = _pool_probs([adv_probs["ds"]], "encoder_adversarial_losses")
    return {
        "loss_r_nr": _log(nat_rnr).mean() + _log_complement(adv_rnr).mean(),
        "loss_ds": -_log(nat_ds).mean() - _log_complement(adv_ds).mean(),
    }


def reconstruction_l1(reconstructed: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    if reconstructed.shape != target.shape:
        raise ValidationError(
            f"reconstruction_l1: shape {tuple(reconstructed.shape)} != target {tuple(target.shape)}")
    return (reconstructed - target).abs().mean()


def symmetric_kl(z_p: torch.Tensor, z_q: torch.Tensor) -> torch.Tensor:
    """KL(p||q) + KL(q||p) of the softmax distributions, per row."""
    log_p = F.log_softmax(z_p, dim=-1).clamp_min(math.log(PROB_FLOOR))
    log_q = F.log_softmax(z_q, dim=-1).clamp_min(math.log(PROB_FLOOR))
    return ((log_p.exp() - log_q.exp()) * (log_p - log_q)).sum(dim=-1)


def pairwise_kl(triple: Any, mode: str = "surrogate") -> torch.Tensor:
    """
    Dependence penalty between the three latents.

    ``surrogate``: mean over the pairs (r, nr), (r, ds), (nr, ds) and the batch
    of exp(-symmetric KL); lies in (0, 1] and falls as the latents diverge.
    ``minimize``: mean symmetric KL itself (ablation; pulls latents together).
    """
    if mode not in KL_MODES:
        raise ConfigurationError(f"Unknown kl_mode: {mode}")
    z_r, z_nr, z_ds = triple.as_tuple() if hasattr(triple, "as_tuple") else tuple(triple)
    divergences = torch.stack([symmetric_kl(z_r, z_nr), symmetric_kl(z_r, z_ds), symmetric_kl(z_nr, z_ds)])
    if mode == "surrogate":
        return torch.exp(-divergences).mean()
    return divergences.mean()


# ============================================================
# COMPOSITION
# ============================================================

@dataclass
class LossReport:
    """Unweighted component values plus their weighted total."""
    values: Dict[str, float]
    total: float
    flags: List[str] = field(default_factory=list)

    def as_record(self, *, epoch: int, batch: int, variant: str, attack: Dict, learning_rate: float) -> LossRecord:
        return LossRecord(
            format=FORMAT_TAG,
            epoch=epoch,
            batch=batch,
            variant=variant,
            attack=attack,
            losses=dict(self.values),
            total=self.total,
            learning_rate=learning_rate,
            flags=list(self.flags),
        )


def compose(components: Mapping[str, Union[float, torch.Tensor]], weights: LossWeights,
            flags: Optional[Sequence[str]] = None) -> LossReport:
    """
    Weighted sum of named components (keys L_dist, L_ce, L_bce, L_adv, L_res, L_kl).

    Raises:
        NumericalError: If a component is non-finite; the message names it
        ValidationError: If a component name is unknown
    """
    weight_map = weights.as_component_map()
    values: Dict[str, float] = {}
    total = 0.0
    for name, value in components.items():
        if name not in weight_map:
            raise ValidationError(f"compose: unknown loss component '{name}'")
        value = float(value.detach()) if isinstance(value, torch.Tensor) else float(value)
        if not math.isfinite(value):
            raise NumericalError(f"Loss component {name} is non-finite ({value})")
        values[name] = value
        total += weight_map[name] * value
    return LossReport(values=values, total=total, flags=list(flags or []))


def _pool_probs(probs: Sequence[torch.Tensor], where: str) -> torch.Tensor:
    """Accepts the closed range [0, 1]: saturated outputs of 0 or 1 are valid and _log clamps them."""
    pooled = torch.cat([p.reshape(-1) for p in probs])
    if pooled.numel() and not bool(((pooled >= 0) & (pooled <= 1)).all()):
        raise ValidationError(f"{where}: probabilities must lie in [0, 1]")
    return pooled


def _log(p: torch.Tensor) -> torch.Tensor:
    return torch.log(p.clamp_min(PROB_FLOOR))


def _log_complement(p: torch.Tensor) -> torch.Tensor:
    return torch.log((1.0 - p).clamp_min(PROB_FLOOR))
