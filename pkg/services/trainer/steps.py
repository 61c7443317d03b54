"""
Per-minibatch update schedules.

DisentangleSteps runs the disentanglement sub-steps on one minibatch:

    (a) adversarial batch from a diversified PGD attack
    (b) forward pass of x and x_adv through extractor and encoders
    (c) pairwise KL            -> omega_r, omega_nr, omega_ds
    (d) branch cross-entropy   -> omega_r, omega_nr, phi (+ theta)
    (e) angular distance       -> theta, omega_r
    (f) discriminator BCE      -> psi
        encoder adversarial    -> theta, omega_r, omega_nr, omega_ds
    (g) feature reconstruction -> omega_r, omega_nr, omega_ds, theta_rec

Each sub-step computes gradients only for its recipient groups and steps only
their optimizers, so every other group is left bit-identical.
"""

import logging
from contextlib import contextmanager
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn
from torch.optim import SGD

from config.exceptions import ConfigurationError, NumericalError
from config.schema import AttackSpec, TrainConfig
from services import losses
from services.attacks import make_loss_fn, pgd
from services.datasets import ImageBatch
from services.model.bundle import DisentangledTriple, ModelBundle

logger = logging.getLogger(__name__)

ENCODERS = ("omega_r", "omega_nr", "omega_ds")


def build_optimizers(bundle: ModelBundle, config: TrainConfig, learning_rate: Optional[float] = None
                     ) -> Dict[str, SGD]:
    """One SGD optimizer per parameter group, scaled by component_lr_scale."""
    base = config.learning_rate if learning_rate is None else learning_rate
    return {
        group: SGD(params, lr=base * config.lr_scale(group), momentum=config.momentum,
                   weight_decay=config.weight_decay)
        for group, params in bundle.parameter_groups().items()
    }


def set_learning_rate(optimizers: Mapping[str, SGD], config: TrainConfig, learning_rate: float) -> None:
    for group, optimizer in optimizers.items():
        for param_group in optimizer.param_groups:
            param_group["lr"] = learning_rate * config.lr_scale(group)


@contextmanager
def running_stats_frozen(module: nn.Module):
    """Batch-norm layers still normalize with batch statistics but leave their running estimates unchanged."""
    norms = [m for m in module.modules()
             if isinstance(m, nn.modules.batchnorm._BatchNorm) and m.track_running_stats]
    saved = [(m.momentum, m.num_batches_tracked.clone()) for m in norms]
    for m in norms:
        m.momentum = 0.0
    try:
        yield
    finally:
        with torch.no_grad():
            for m, (momentum, count) in zip(norms, saved):
                m.momentum = momentum
                m.num_batches_tracked.copy_(count)


def _check_inner_loss(bundle: ModelBundle, inner_loss: Optional[str]) -> None:
    if inner_loss == "dlr" and bundle.config.num_classes < 3:
        raise ConfigurationError("train.inner_loss = dlr needs at least 3 classes")


def batch_seed(seed: int, epoch: int, batch_index: int) -> int:
    """Independent 31-bit seed for one (epoch, batch) cell."""
    return int(np.random.SeedSequence([seed, epoch, batch_index]).generate_state(1)[0] & 0x7FFFFFFF)


def epoch_seed(seed: int, epoch: int) -> int:
    """Shuffle seed of one epoch (distinct from every batch_seed)."""
    return int(np.random.SeedSequence([seed, epoch]).generate_state(1)[0] & 0x7FFFFFFF)


class GroupUpdater:
    """Routes a scalar loss to a chosen set of parameter groups."""

    def __init__(self, bundle: ModelBundle, optimizers: Mapping[str, SGD]):
        self.bundle = bundle
        self.optimizers = optimizers
        self.groups = bundle.parameter_groups()
        self._pending: Dict[str, List[Optional[torch.Tensor]]] = {}

    def gradients(self, label: str, loss: torch.Tensor, recipients: Sequence[str]
                  ) -> Dict[str, List[Optional[torch.Tensor]]]:
        if not torch.isfinite(loss).all():
            raise NumericalError(f"Non-finite loss at step ({label}): {float(loss.detach())}")
        params = [p for g in recipients for p in self.groups[g]]
        grads = torch.autograd.grad(loss, params, allow_unused=True, retain_graph=True)
        out: Dict[str, List[Optional[torch.Tensor]]] = {}
        offset = 0
        for g in recipients:
            n = len(self.groups[g])
            out[g] = list(grads[offset:offset + n])
            offset += n
        for g, group_grads in out.items():
            for grad in group_grads:
                if grad is not None and not torch.isfinite(grad).all():
                    raise NumericalError(f"Non-finite gradient at step ({label}) for group {g}")
        return out

    def apply(self, label: str, loss: torch.Tensor, recipients: Sequence[str]) -> None:
        """Compute and immediately apply one sub-step."""
        self.step(self.gradients(label, loss, recipients))

    def accumulate(self, label: str, loss: torch.Tensor, recipients: Sequence[str]) -> None:
        for g, group_grads in self.gradients(label, loss, recipients).items():
            pending = self._pending.setdefault(g, [None] * len(group_grads))
            for i, grad in enumerate(group_grads):
                if grad is not None:
                    pending[i] = grad if pending[i] is None else pending[i] + grad

    def flush(self) -> None:
        pending, self._pending = self._pending, {}
        self.step(pending)

    def step(self, grads_by_group: Mapping[str, List[Optional[torch.Tensor]]]) -> None:
        for g, group_grads in grads_by_group.items():
            for p, grad in zip(self.groups[g], group_grads):
                p.grad = None if grad is None else grad.detach()
            self.optimizers[g].step()
            for p in self.groups[g]:
                p.grad = None


class DisentangleSteps:
    """Sub-steps (a)-(g) over one bundle and its per-group optimizers."""

    def __init__(self, bundle: ModelBundle, optimizers: Mapping[str, SGD], config: TrainConfig):
        _check_inner_loss(bundle, config.inner_loss)
        self.bundle = bundle
        self.config = config
        self.weights = config.loss_weights
        self.updater = GroupUpdater(bundle, optimizers)
        self.ce_recipients: Tuple[str, ...] = ("omega_r", "omega_nr", "phi")
        if config.ce_updates_extractor:
            self.ce_recipients = ("theta",) + self.ce_recipients

    # (a)
    def generate_adversarial(self, batch: ImageBatch, spec: AttackSpec) -> ImageBatch:
        """PGD against the robust branch, run with the model in eval mode."""
        was_training = self.bundle.training
        self.bundle.eval()
        try:
            return pgd(make_loss_fn(self.bundle.robust_logits, spec), batch, spec)
        finally:
            self.bundle.train(was_training)

    # (b)
    def forward(self, x: torch.Tensor, x_adv: torch.Tensor):
        f = self.bundle.extract(x)
        f_adv = self.bundle.extract(x_adv)
        return f, f_adv, self.bundle.encode(f), self.bundle.encode(f_adv)

    # (c)
    def kl_loss(self, nat: DisentangledTriple, adv: DisentangledTriple) -> torch.Tensor:
        mode = self.config.kl_mode
        return 0.5 * (losses.pairwise_kl(nat, mode) + losses.pairwise_kl(adv, mode))

    # (d)
    def ce_loss(self, f_adv: torch.Tensor, nat: DisentangledTriple, adv: DisentangledTriple,
                labels: torch.Tensor) -> torch.Tensor:
        logits = {
            "r": self.bundle.classify(nat.z_r),
            "nr": self.bundle.classify(nat.z_nr),
            "r_adv": self.bundle.classify(adv.z_r),
            "nr_adv": self.bundle.classify(self.bundle.reversed_nr_latent(f_adv)),
        }
        return losses.branch_cross_entropy(logits, labels)

    # (e)
    def dist_loss(self, nat: DisentangledTriple, adv: DisentangledTriple, flags: List[str]) -> torch.Tensor:
        return losses.angular_distance(nat.z_r, adv.z_r, flags)

    # (f), discriminator half: encoders detached
    def discriminator_loss(self, nat: DisentangledTriple, adv: DisentangledTriple) -> torch.Tensor:
        d = self.bundle.discriminate
        return losses.discriminator_bce(
            [d(z.detach()) for z in nat.as_tuple()],
            [d(z.detach()) for z in adv.as_tuple()],
        )

    # (f), encoder half: psi receives no update
    def encoder_adversarial_loss(self, nat: DisentangledTriple, adv: DisentangledTriple) -> Dict[str, torch.Tensor]:
        d = self.bundle.discriminate
        return losses.encoder_adversarial_losses(
            {"r": d(nat.z_r), "nr": d(nat.z_nr), "ds": d(nat.z_ds)},
            {"r": d(adv.z_r), "nr": d(adv.z_nr), "ds": d(adv.z_ds)},
        )

    # (g)
    def reconstruction_loss(self, f: torch.Tensor, f_adv: torch.Tensor,
                            nat: DisentangledTriple, adv: DisentangledTriple) -> torch.Tensor:
        return 0.5 * (losses.reconstruction_l1(self.bundle.reconstruct(nat), f.detach())
                      + losses.reconstruction_l1(self.bundle.reconstruct(adv), f_adv.detach()))

    # ------------------------------------------------------------

    def sub_steps(self):
        """(label, component, weight, recipients, loss builder) in execution order."""
        w = self.weights
        return (
            ("c", "L_kl", w.w_kl, ENCODERS,
             lambda ctx: self.kl_loss(ctx["nat"], ctx["adv"])),
            ("d", "L_ce", w.w_ce, self.ce_recipients,
             lambda ctx: self.ce_loss(ctx["f_adv"], ctx["nat"], ctx["adv"], ctx["labels"])),
            ("e", "L_dist", w.w_dist, ("theta", "omega_r"),
             lambda ctx: self.dist_loss(ctx["nat"], ctx["adv"], ctx["flags"])),
            ("f", "L_bce", w.w_bce, ("psi",),
             lambda ctx: self.discriminator_loss(ctx["nat"], ctx["adv"])),
            ("f", "L_adv", w.w_adv, ("theta",) + ENCODERS,
             lambda ctx: sum(self.encoder_adversarial_loss(ctx["nat"], ctx["adv"]).values())),
            ("g", "L_res", w.w_res, ENCODERS + ("theta_rec",),
             lambda ctx: self.reconstruction_loss(ctx["f"], ctx["f_adv"], ctx["nat"], ctx["adv"])),
        )

    def run(self, batch: ImageBatch, x_adv: ImageBatch, mode: str = "sequential"
            ) -> Tuple[Dict[str, torch.Tensor], List[str]]:
        """
        Execute (b)-(g) on one minibatch.

        ``sequential`` recomputes the forward pass before every sub-step so each
        one sees the parameters left by the previous; ``accumulated`` takes one
        forward pass and applies all sub-step gradients in a single update.

        Batch-norm running statistics advance once per minibatch in both modes:
        only the first forward of x and x_adv updates them. Every sequential
        sub-step is a full SGD step of its recipient groups, so weight decay on
        theta and the encoders is applied once per sub-step that updates them.

        Returns:
            (unweighted component values, flags)
        """
        flags: List[str] = []
        components: Dict[str, torch.Tensor] = {}

        def context():
            f, f_adv, nat, adv = self.forward(batch.pixels, x_adv.pixels)
            return {"f": f, "f_adv": f_adv, "nat": nat, "adv": adv, "labels": batch.labels, "flags": flags}

        ctx = context()
        for position, (label, component, weight, recipients, build) in enumerate(self.sub_steps()):
            with running_stats_frozen(self.bundle):
                if mode == "sequential" and position > 0:
                    ctx = context()
                loss = build(ctx)
            components[component] = loss.detach()
            if weight == 0:
                continue
            if mode == "sequential":
                self.updater.apply(label, weight * loss, recipients)
            else:
                self.updater.accumulate(label, weight * loss, recipients)
        if mode == "accumulated":
            self.updater.flush()
        return components, sorted(set(flags))

    def step_only(self, label: str, component: str, batch: ImageBatch, x_adv: ImageBatch) -> torch.Tensor:
        """Run a single sub-step on a fixed minibatch (used to inspect isolation)."""
        for step_label, name, weight, recipients, build in self.sub_steps():
            if (step_label, name) == (label, component):
                f, f_adv, nat, adv = self.forward(batch.pixels, x_adv.pixels)
                ctx = {"f": f, "f_adv": f_adv, "nat": nat, "adv": adv, "labels": batch.labels, "flags": []}
                loss = build(ctx)
                self.updater.apply(label, weight * loss, recipients)
                return loss.detach()
        raise ConfigurationError(f"No sub-step ({label}) with component {component}")


class CrossEntropySteps:
    """Single cross-entropy update of theta, omega_r and phi on (possibly attacked) inputs."""

    recipients = ("theta", "omega_r", "phi")

    def __init__(self, bundle: ModelBundle, optimizers: Mapping[str, SGD], inner_loss: Optional[str] = None):
        _check_inner_loss(bundle, inner_loss)
        self.bundle = bundle
        self.updater = GroupUpdater(bundle, optimizers)

    def generate_adversarial(self, batch: ImageBatch, spec: AttackSpec) -> ImageBatch:
        was_training = self.bundle.training
        self.bundle.eval()
        try:
            return pgd(make_loss_fn(self.bundle.robust_logits, spec), batch, spec)
        finally:
            self.bundle.train(was_training)

    def run(self, batch: ImageBatch) -> Dict[str, torch.Tensor]:
        loss = F.cross_entropy(self.bundle.robust_logits(batch.pixels), batch.labels)
        self.updater.apply("ce", loss, self.recipients)
        return {"L_ce": loss.detach()}
