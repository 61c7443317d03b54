"""
Adversarial Attacks
FGSM, PGD and SPSA under L-inf (and L2) budgets, the CW-margin and DLR inner
losses, and the diversified attack sampler used during training.

Every attack is a pure function of (loss function, batch, spec): randomness is
drawn from a generator seeded with ``spec.seed`` and nothing else.
"""

import logging
from typing import Callable, Optional

import numpy as np
import torch
import torch.nn.functional as F

from config.exceptions import ConfigurationError, NumericalError, ValidationError
from config.schema import AttackSpec, DiversifySpec, SPSAParams
from services.datasets import ImageBatch

logger = logging.getLogger(__name__)

# (inputs, labels) -> per-sample losses of shape (B,) or a scalar
LossFn = Callable[[torch.Tensor, torch.Tensor], torch.Tensor]

DLR_DENOMINATOR_FLOOR = 1e-12
SPSA_CHUNK = 32


# ============================================================
# INNER LOSSES
# ============================================================

def cw_margin_loss(logits: torch.Tensor, labels, kappa: float = 0.0) -> torch.Tensor:
    """
    Carlini-Wagner margin loss, oriented for ascent:

        loss = -max(z_y - max_{k != y} z_k, -kappa)

    Maximizing it pushes the true-class margin down until it reaches -kappa.

    Args:
        logits: (C,) or (B, C)
        labels: class index or (B,) tensor
        kappa: confidence clamp, >= 0

    Returns:
        Scalar for a single logit vector, (B,) otherwise
    """
    logits, labels, squeeze = _as_batch(logits, labels, min_classes=2, name="cw_margin_loss")
    if kappa < 0:
        raise ConfigurationError(f"kappa must be >= 0, got {kappa}")
    true_logit = logits.gather(1, labels[:, None]).squeeze(1)
    margin = true_logit - _best_other(logits, labels)
    loss = -torch.clamp(margin, min=-kappa)
    return loss[0] if squeeze else loss


def dlr_loss(logits: torch.Tensor, labels) -> torch.Tensor:
    """
    Difference-of-logits-ratio loss:

        loss = -(z_y - max_{k != y} z_k) / (z_(1) - z_(3))

    where z_(i) is the i-th largest logit. The denominator is floored at 1e-12,
    so all-equal logits give 0.
    """
    logits, labels, squeeze = _as_batch(logits, labels, min_classes=3, name="dlr_loss")
    true_logit = logits.gather(1, labels[:, None]).squeeze(1)
    ordered = logits.sort(dim=1, descending=True).values
    denominator = torch.clamp(ordered[:, 0] - ordered[:, 2], min=DLR_DENOMINATOR_FLOOR)
    loss = -(true_logit - _best_other(logits, labels)) / denominator
    return loss[0] if squeeze else loss


def inner_loss(name: str, kappa: float = 0.0) -> Callable[[torch.Tensor, torch.Tensor], torch.Tensor]:
    """Per-sample inner-maximization loss over logits by name."""
    if name == "cross_entropy":
        return lambda logits, labels: F.cross_entropy(logits, labels, reduction="none")
    if name == "cw_margin":
        return lambda logits, labels: cw_margin_loss(logits, labels, kappa)
    if name == "dlr":
        return dlr_loss
    raise ConfigurationError(f"Unknown inner loss: {name}")


def make_loss_fn(forward: Callable[[torch.Tensor], torch.Tensor], spec: AttackSpec) -> LossFn:
    """Compose a logits function with the attack's inner loss."""
    loss = inner_loss(spec.inner_loss, spec.kappa)
    return lambda x, labels: loss(forward(x), labels)


# ============================================================
# ATTACKS
# ============================================================

def fgsm(model_loss_fn: LossFn, batch: ImageBatch, spec: AttackSpec) -> ImageBatch:
    """
    One signed-gradient step: clip(x + eps * sign(grad), 0, 1).
    For ``norm = l2`` the step is eps * grad / ||grad||_2.
    """
    if spec.kind != "fgsm":
        raise ConfigurationError(f"fgsm called with attack kind {spec.kind!r}")
    x = batch.pixels.detach()
    if spec.epsilon == 0:
        return batch.with_pixels(x.clone())

    grad = _input_gradient(model_loss_fn, x, batch.labels, "fgsm")
    if spec.norm == "inf":
        x_adv = torch.clamp(x + spec.epsilon * grad.sign(), 0.0, 1.0)
    else:
        x_adv = torch.clamp(x + spec.epsilon * _unit_l2(grad), 0.0, 1.0)
    return batch.with_pixels(x_adv.detach())


def pgd(model_loss_fn: LossFn, batch: ImageBatch, spec: AttackSpec) -> ImageBatch:
    """
    Projected gradient ascent: T steps of x <- x + alpha * sign(grad), each
    followed by projection onto the eps-ball around the clean input intersected
    with [0, 1]. Optional uniform random start inside the ball.
    """
    if spec.kind != "pgd":
        raise ConfigurationError(f"pgd called with attack kind {spec.kind!r}")
    x = batch.pixels.detach()
    if spec.epsilon == 0:
        return batch.with_pixels(x.clone())

    generator = _generator(spec.seed, x.device)
    x_adv = _random_start(x, spec, generator) if spec.random_start else x.clone()
    for step in range(spec.num_steps):
        grad = _input_gradient(model_loss_fn, x_adv, batch.labels, f"pgd step {step + 1}")
        x_adv = _ascend_and_project(x, x_adv, grad, spec)
    return batch.with_pixels(x_adv.detach())


def spsa(model_forward: LossFn, batch: ImageBatch, spec: AttackSpec,
         spsa_params: Optional[SPSAParams] = None) -> ImageBatch:
    """
    Gradient-free projected ascent. Each step estimates the input gradient from
    ``samples_per_step`` Rademacher perturbations (two forward evaluations each)
    and then takes the same signed step and projection as pgd.

    Args:
        model_forward: black-box loss evaluator returning per-sample losses (B,)
        spsa_params: estimator settings (defaults to spec.spsa)
    """
    if spec.kind != "spsa":
        raise ConfigurationError(f"spsa called with attack kind {spec.kind!r}")
    params = spsa_params or spec.spsa
    if params.samples_per_step < 1:
        raise ConfigurationError(f"samples_per_step must be >= 1, got {params.samples_per_step}")
    x = batch.pixels.detach()
    if spec.epsilon == 0:
        return batch.with_pixels(x.clone())

    generator = _generator(spec.seed, x.device)
    x_adv = _random_start(x, spec, generator) if spec.random_start else x.clone()
    for step in range(spec.num_steps):
        grad = spsa_gradient(model_forward, x_adv, batch.labels, params, generator)
        if not torch.isfinite(grad).all():
            raise NumericalError(f"spsa step {step + 1}: non-finite gradient estimate")
        x_adv = _ascend_and_project(x, x_adv, grad, spec)
    return batch.with_pixels(x_adv.detach())


@torch.no_grad()
def spsa_gradient(model_forward: LossFn, x: torch.Tensor, labels: torch.Tensor,
                  params: SPSAParams, generator: torch.Generator) -> torch.Tensor:
    """Simultaneous-perturbation estimate of d loss / d x, averaged over samples."""
    batch_size = x.shape[0]
    total = torch.zeros_like(x)
    remaining = params.samples_per_step
    delta = params.perturbation_scale
    while remaining > 0:
        n = min(SPSA_CHUNK, remaining)
        remaining -= n
        v = torch.randint(0, 2, (n,) + tuple(x.shape), generator=generator, device=x.device).to(x.dtype) * 2 - 1
        x_rep = x.unsqueeze(0).expand_as(v)
        y_rep = labels.unsqueeze(0).expand(n, batch_size).reshape(-1)
        plus = model_forward((x_rep + delta * v).reshape((-1,) + tuple(x.shape[1:])), y_rep)
        minus = model_forward((x_rep - delta * v).reshape((-1,) + tuple(x.shape[1:])), y_rep)
        if plus.dim() == 0 and n * batch_size > 1:
            raise ValidationError("spsa requires a per-sample loss evaluator")
        diff = (plus - minus).reshape(n, batch_size, *([1] * (x.dim() - 1)))
        # Rademacher entries are +-1, so 1/v == v
        total += (diff / (2 * delta) * v).sum(dim=0)
    return total / params.samples_per_step


def run_attack(spec: AttackSpec, loss_fn: LossFn, batch: ImageBatch) -> ImageBatch:
    """Dispatch on spec.kind."""
    if spec.kind == "fgsm":
        return fgsm(loss_fn, batch, spec)
    if spec.kind == "pgd":
        return pgd(loss_fn, batch, spec)
    return spsa(loss_fn, batch, spec)


def sample_attack(diversify: DiversifySpec, rng: np.random.Generator) -> AttackSpec:
    """
    Draw a training attack: epsilon and step size uniform over their ranges,
    step count uniform over the choices; PGD with cross-entropy and random start.
    """
    epsilon = float(rng.uniform(*diversify.epsilon_range))
    num_steps = int(diversify.steps_choices[int(rng.integers(len(diversify.steps_choices)))])
    step_size = float(rng.uniform(*diversify.step_size_range))
    seed = int(rng.integers(0, 2 ** 31 - 1))
    return AttackSpec(kind="pgd", inner_loss="cross_entropy", epsilon=epsilon, step_size=step_size,
                      num_steps=num_steps, random_start=True, norm="inf", seed=seed)


def check_constraints(x: torch.Tensor, x_adv: torch.Tensor, spec: AttackSpec) -> None:
    """
    Assert the budget and range constraints on every sample.

    Tolerance is 1e-8 in double precision and one machine epsilon of the tensor
    dtype otherwise (rounding of x + eps in float32 alone exceeds 1e-8).

    Raises:
        ValidationError: If any sample leaves the eps-ball or [0, 1]
    """
    tolerance = 1e-8 if x_adv.dtype == torch.float64 else float(torch.finfo(x_adv.dtype).eps)
    delta = (x_adv.double() - x.double()).flatten(1)
    if spec.norm == "inf":
        distance = delta.abs().max(dim=1).values if delta.shape[1] else torch.zeros(delta.shape[0])
    else:
        distance = delta.norm(dim=1)
    worst = float(distance.max()) if distance.numel() else 0.0
    if worst > spec.epsilon + tolerance:
        raise ValidationError(f"{spec.label}: perturbation {worst:.3e} exceeds budget {spec.epsilon:.3e}")
    if x_adv.numel() and (float(x_adv.min()) < 0.0 or float(x_adv.max()) > 1.0):
        raise ValidationError(f"{spec.label}: adversarial pixels leave [0, 1]")


# ============================================================
# HELPERS
# ============================================================

def _input_gradient(loss_fn: LossFn, x: torch.Tensor, labels: torch.Tensor, where: str) -> torch.Tensor:
    x = x.detach().requires_grad_(True)
    with torch.enable_grad():
        loss = loss_fn(x, labels)
        grad, = torch.autograd.grad(loss.sum(), x)
    if not torch.isfinite(grad).all():
        raise NumericalError(f"{where}: non-finite input gradient, batch rejected")
    return grad.detach()


def _ascend_and_project(x: torch.Tensor, x_adv: torch.Tensor, grad: torch.Tensor, spec: AttackSpec) -> torch.Tensor:
    if spec.norm == "inf":
        # Ball and box intersect coordinate-wise, so one clamp is the exact projection
        lower = torch.clamp(x - spec.epsilon, min=0.0)
        upper = torch.clamp(x + spec.epsilon, max=1.0)
        stepped = x_adv + spec.step_size * grad.sign()
        return torch.min(torch.max(stepped, lower), upper)
    stepped = x_adv + spec.step_size * _unit_l2(grad)
    return torch.clamp(x + _project_l2(stepped - x, spec.epsilon), 0.0, 1.0)


def _random_start(x: torch.Tensor, spec: AttackSpec, generator: torch.Generator) -> torch.Tensor:
    if spec.norm == "inf":
        noise = torch.rand(x.shape, generator=generator, device=x.device, dtype=x.dtype) * 2 - 1
        return torch.clamp(x + spec.epsilon * noise, 0.0, 1.0)
    direction = _unit_l2(torch.randn(x.shape, generator=generator, device=x.device, dtype=x.dtype))
    radius = torch.rand((x.shape[0],) + (1,) * (x.dim() - 1), generator=generator, device=x.device, dtype=x.dtype)
    return torch.clamp(x + spec.epsilon * radius * direction, 0.0, 1.0)


def _unit_l2(t: torch.Tensor) -> torch.Tensor:
    norms = t.flatten(1).norm(dim=1).clamp_min(1e-12)
    return t / norms.view((-1,) + (1,) * (t.dim() - 1))


def _project_l2(delta: torch.Tensor, epsilon: float) -> torch.Tensor:
    norms = delta.flatten(1).norm(dim=1)
    factor = torch.clamp(epsilon / norms.clamp_min(1e-12), max=1.0)
    return delta * factor.view((-1,) + (1,) * (delta.dim() - 1))


def _generator(seed: int, device) -> torch.Generator:
    return torch.Generator(device=device).manual_seed(int(seed))


def _as_batch(logits: torch.Tensor, labels, min_classes: int, name: str):
    squeeze = logits.dim() == 1
    if squeeze:
        logits = logits.unsqueeze(0)
    if logits.dim() != 2:
        raise ValidationError(f"{name}: logits must be (C,) or (B, C), got shape {tuple(logits.shape)}")
    if logits.shape[1] < min_classes:
        raise ValidationError(f"{name} requires at least {min_classes} classes, got {logits.shape[1]}")
    labels = torch.as_tensor(labels, device=logits.device, dtype=torch.long).reshape(-1)
    if labels.shape[0] != logits.shape[0]:
        raise ValidationError(f"{name}: {labels.shape[0]} labels for {logits.shape[0]} logit rows")
    if int(labels.min()) < 0 or int(labels.max()) >= logits.shape[1]:
        raise ValidationError(f"{name}: label out of range for {logits.shape[1]} classes")
    return logits, labels, squeeze


def _best_other(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    mask = F.one_hot(labels, logits.shape[1]).bool()
    return logits.masked_fill(mask, float("-inf")).max(dim=1).values
