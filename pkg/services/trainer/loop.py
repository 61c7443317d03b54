"""
Training Loop
Epoch driver shared by the disentanglement, natural and standard adversarial
trainers: learning-rate schedule, per-step loss log, early stopping on a
validation metric, periodic / best / last checkpoints and exact resume.
"""

import dataclasses
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

import numpy as np
import torch
from tqdm import tqdm

from config import Config
from config.exceptions import CheckpointError, ConfigurationError
from config.schema import RunConfig, config_hash
from services import losses
from services.attacks import sample_attack
from services.datasets import ImageBatch, SplitDataset
from services.evaluator import clean_accuracy, robust_accuracy
from services.model.bundle import ModelBundle
from services.model.checkpoint import load_checkpoint, save_checkpoint
from services.run_records import LossLogWriter, code_hash
from services.trainer.schedule import EarlyStopping, early_stop_update, step_lr
from services.trainer.steps import (
    CrossEntropySteps, DisentangleSteps, batch_seed, build_optimizers, epoch_seed, set_learning_rate,
)

logger = logging.getLogger(__name__)

VARIANTS = ("disentangle", "natural", "at")


@dataclass
class TrainState:
    """Everything beyond the bundle parameters needed to continue a run exactly."""
    epoch: int
    optimizers: Dict[str, Dict[str, Any]]
    early_stopping: Dict[str, Any]
    rng_state: torch.Tensor
    history: List[Dict[str, float]] = field(default_factory=list)

    def to_dict(self) -> Dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "TrainState":
        return cls(**data)


@dataclass
class TrainResult:
    bundle: ModelBundle
    best_epoch: Optional[int]
    best_metric: Optional[float]
    history: List[Dict[str, float]]
    checkpoints: Dict[str, Path]
    stopped_early: bool = False


class TrainingLoop:
    """
    Drives one training variant over a SplitDataset.

    Epochs are numbered from 1. With ``out_dir`` set, losses.jsonl and
    checkpoints/{epoch_NNNN,best,last}.ckpt are written there.
    """

    def __init__(self, config: RunConfig, dataset: SplitDataset, variant: str = "disentangle",
                 out_dir: Optional[Union[str, Path]] = None, device: Optional[str] = None,
                 resume: Optional[Union[str, Path]] = None, progress: bool = True):
        if variant not in VARIANTS:
            raise ConfigurationError(f"Unknown training variant: {variant} (expected one of {VARIANTS})")
        if len(dataset.train) == 0:
            raise ConfigurationError("Training split is empty")
        if dataset.num_classes != config.model.num_classes:
            raise ConfigurationError(
                f"model.num_classes = {config.model.num_classes} but the dataset has {dataset.num_classes} classes")

        self.config = _with_dataset_normalization(config, dataset)
        self.train_cfg = self.config.train
        self.dataset = dataset
        self.variant = variant
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.device = device or Config.resolve_device()
        self.progress = progress
        self.code_hash = code_hash()

        torch.manual_seed(self.train_cfg.seed)
        self.bundle = ModelBundle(self.config.model).to(self.device)
        self.optimizers = build_optimizers(self.bundle, self.train_cfg)
        self.early_stopping = EarlyStopping(patience=self.train_cfg.early_stopping.patience)
        self.history: List[Dict[str, float]] = []
        self.start_epoch = 1
        self.checkpoints: Dict[str, Path] = {}

        if resume is not None:
            self._resume(resume)

        if variant == "disentangle":
            self.steps = DisentangleSteps(self.bundle, self.optimizers, self.train_cfg)
        elif variant == "at":
            self.steps = CrossEntropySteps(self.bundle, self.optimizers, inner_loss=self.train_cfg.inner_loss)
        else:
            self.steps = CrossEntropySteps(self.bundle, self.optimizers)

    # ------------------------------------------------------------

    def run(self) -> TrainResult:
        cfg = self.train_cfg
        es_cfg = cfg.early_stopping
        val = self._validation_split()
        log_writer = None
        if self.out_dir is not None:
            log_writer = LossLogWriter(self.out_dir / Config.LOSS_LOG_NAME, append=self.start_epoch > 1)

        logger.info(f"[Train] variant={self.variant} epochs={cfg.epochs} batch={cfg.batch_size} "
                    f"train={len(self.dataset.train)} val={len(val)} device={self.device}")
        try:
            for epoch in range(self.start_epoch, cfg.epochs + 1):
                lr = step_lr(epoch, cfg)
                set_learning_rate(self.optimizers, cfg, lr)
                epoch_losses = self._train_epoch(epoch, lr, log_writer)

                metric = self._validation_metric(val)
                entry = {"epoch": epoch, "learning_rate": lr, "metric": metric, **epoch_losses}
                self.history.append(entry)
                logger.info(f"[Train] epoch {epoch}/{cfg.epochs} lr={lr:.2e} {self._metric_name()}={metric:.2f} "
                            + " ".join(f"{k}={v:.4f}" for k, v in epoch_losses.items()))

                decision = early_stop_update(self.early_stopping, metric, epoch, self.bundle.state_dict())
                improved = decision.best_epoch == epoch
                self._checkpoint(epoch, metric, improved)
                if es_cfg.enabled and decision.should_stop:
                    logger.info(f"[Train] early stop at epoch {epoch}; best epoch {decision.best_epoch} "
                                f"({self._metric_name()}={self.early_stopping.best_metric:.2f})")
                    break
        finally:
            if log_writer is not None:
                log_writer.close()

        if es_cfg.enabled and self.early_stopping.best_snapshot is not None:
            self.bundle.load_state_dict(self.early_stopping.best_snapshot)
        self.bundle.eval()
        return TrainResult(
            bundle=self.bundle,
            best_epoch=self.early_stopping.best_epoch,
            best_metric=None if self.early_stopping.best_epoch is None else self.early_stopping.best_metric,
            history=self.history,
            checkpoints=dict(self.checkpoints),
            stopped_early=self.early_stopping.stopped and es_cfg.enabled,
        )

    # ------------------------------------------------------------

    def _train_epoch(self, epoch: int, lr: float, log_writer: Optional[LossLogWriter]) -> Dict[str, float]:
        cfg = self.train_cfg
        self.bundle.train()
        train = self.dataset.train
        drop_last = len(train) >= cfg.batch_size
        batches = train.batches(cfg.batch_size, shuffle=True, seed=epoch_seed(cfg.seed, epoch),
                                drop_last=drop_last)
        num_batches = len(train) // cfg.batch_size if drop_last else 1
        if self.progress:
            batches = tqdm(batches, total=num_batches, desc=f"epoch {epoch}", leave=False)

        totals: Dict[str, float] = {}
        count = 0
        for index, batch in enumerate(batches):
            batch = batch.to(self.device)
            report, attack = self._train_step(batch, epoch, index)
            if log_writer is not None:
                log_writer.write(report.as_record(epoch=epoch, batch=index, variant=self.variant,
                                                  attack=attack, learning_rate=lr))
            for name, value in report.values.items():
                totals[name] = totals.get(name, 0.0) + value
            count += 1
        return {name: value / max(count, 1) for name, value in totals.items()}

    def _train_step(self, batch: ImageBatch, epoch: int, index: int):
        cfg = self.train_cfg
        seed = batch_seed(cfg.seed, epoch, index)
        if self.variant == "disentangle":
            spec = sample_attack(cfg.diversify, np.random.default_rng(seed))
            spec = dataclasses.replace(spec, inner_loss=cfg.inner_loss)
            x_adv = self.steps.generate_adversarial(batch, spec)
            components, flags = self.steps.run(batch, x_adv, cfg.update_mode)
        elif self.variant == "at":
            spec = dataclasses.replace(self.config.attack, seed=seed, inner_loss=cfg.inner_loss)
            x_adv = self.steps.generate_adversarial(batch, spec)
            components, flags = self.steps.run(x_adv), []
        else:
            spec = None
            components, flags = self.steps.run(batch), []
        report = losses.compose(components, cfg.loss_weights, flags)
        attack = {} if spec is None else {"label": spec.label, "epsilon": spec.epsilon,
                                           "step_size": spec.step_size, "num_steps": spec.num_steps,
                                           "inner_loss": spec.inner_loss, "seed": spec.seed}
        return report, attack

    def _metric_name(self) -> str:
        # Natural training selects on clean accuracy whatever the config says
        return "clean_accuracy" if self.variant == "natural" else self.train_cfg.early_stopping.metric

    def _validation_split(self) -> ImageBatch:
        es_cfg = self.train_cfg.early_stopping
        val = self.dataset.val
        if len(val) == 0:
            logger.warning("Validation split is empty; early stopping monitors the training split")
            val = self.dataset.train
        return val.head(es_cfg.max_eval_samples)

    def _validation_metric(self, val: ImageBatch) -> float:
        if self._metric_name() == "clean_accuracy":
            return clean_accuracy(self.bundle, val)
        return robust_accuracy(self.bundle, val, self.train_cfg.early_stopping.eval_attack)

    # ------------------------------------------------------------

    def train_state(self, epoch: int) -> TrainState:
        return TrainState(
            epoch=epoch,
            optimizers={g: opt.state_dict() for g, opt in self.optimizers.items()},
            early_stopping=self.early_stopping.state_dict(),
            rng_state=torch.get_rng_state(),
            history=list(self.history),
        )

    def _checkpoint(self, epoch: int, metric: float, improved: bool) -> None:
        if self.out_dir is None:
            return
        ckpt_dir = self.out_dir / Config.CHECKPOINT_SUBDIR
        common = dict(epoch=epoch, variant=self.variant, code_hash=self.code_hash,
                      metrics={self._metric_name(): metric})
        state = self.train_state(epoch).to_dict()
        self.checkpoints["last"] = save_checkpoint(ckpt_dir / "last.ckpt", self.bundle, self.config,
                                                   tag="last", train_state=state, **common)
        if improved:
            self.checkpoints["best"] = save_checkpoint(ckpt_dir / "best.ckpt", self.bundle, self.config,
                                                       tag="best", **common)
        if epoch % self.train_cfg.checkpoint_every == 0:
            name = f"epoch_{epoch:04d}"
            self.checkpoints[name] = save_checkpoint(ckpt_dir / f"{name}.ckpt", self.bundle, self.config,
                                                     tag=name, train_state=state, **common)

    def _resume(self, path: Union[str, Path]) -> None:
        bundle, metadata, state = load_checkpoint(path, map_location=self.device)
        if state is None:
            raise CheckpointError(f"{path} carries no trainer state; resume from last.ckpt or an epoch checkpoint")
        if metadata.get("variant") != self.variant:
            raise CheckpointError(f"{path} was written by variant {metadata.get('variant')!r}, not {self.variant!r}")
        if metadata.get("config_hash") != config_hash(self.config):
            logger.warning(f"Resuming from {path} with a config that differs from the one it was trained with")
        state = TrainState.from_dict(state)
        self.bundle.load_state_dict(bundle.state_dict())
        for group, opt in self.optimizers.items():
            opt.load_state_dict(state.optimizers[group])
        self.early_stopping = EarlyStopping.from_state_dict(state.early_stopping)
        torch.set_rng_state(state.rng_state)
        self.history = list(state.history)
        self.start_epoch = state.epoch + 1
        logger.info(f"[Train] resumed from {path} at epoch {self.start_epoch}")


def _with_dataset_normalization(config: RunConfig, dataset: SplitDataset) -> RunConfig:
    """Copy dataset channel statistics into the model's input-normalization layer."""
    if dataset.channel_mean is None or config.model.normalize_mean is not None:
        return config
    model = dataclasses.replace(config.model, normalize_mean=tuple(dataset.channel_mean),
                                normalize_std=tuple(dataset.channel_std))
    return dataclasses.replace(config, model=model)


def run_training(variant: str, config: RunConfig, dataset: SplitDataset, **kwargs) -> TrainResult:
    return TrainingLoop(config, dataset, variant=variant, **kwargs).run()


def train_disentangle(config: RunConfig, dataset: SplitDataset, **kwargs) -> ModelBundle:
    """Disentanglement training; returns the early-stopping-selected bundle."""
    return run_training("disentangle", config, dataset, **kwargs).bundle


def train_natural(config: RunConfig, dataset: SplitDataset, **kwargs) -> ModelBundle:
    """Cross-entropy on clean images (extractor, robust encoder, classifier)."""
    return run_training("natural", config, dataset, **kwargs).bundle


def train_standard_at(config: RunConfig, dataset: SplitDataset, **kwargs) -> ModelBundle:
    """Min-max training: config.attack with train.inner_loss as the inner maximization, cross-entropy outer step."""
    return run_training("at", config, dataset, **kwargs).bundle
