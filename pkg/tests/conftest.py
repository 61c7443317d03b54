"""
Shared fixtures: a tiny backbone, a synthetic dataset, a seeded bundle and
session-scoped trained experiments.

Long training runs are marked ``slow`` and only run with DISRO_RUN_SLOW=1.
"""

import os
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional

import pytest
import torch

sys.path.insert(0, str(Path(__file__).resolve().parent.parent))

from config import Config  # noqa: E402
from config.schema import (  # noqa: E402
    AttackSpec, BackboneConfig, DatasetSpec, DiversifySpec, EarlyStoppingConfig, EvaluationConfig, RunConfig,
    SplitFractions, SyntheticSpec, TrainConfig, read_config,
)
from services.datasets import CIFAR10_TEST_FILE, CIFAR10_TRAIN_FILES, SplitDataset, load_dataset  # noqa: E402
from services.evaluator import evaluate  # noqa: E402
from services.model.bundle import ModelBundle  # noqa: E402
from services.trainer import TrainingLoop, run_training  # noqa: E402

IMAGE_SHAPE = (3, 8, 8)


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: multi-epoch training runs (set DISRO_RUN_SLOW=1)")


def pytest_collection_modifyitems(config, items):
    if os.getenv("DISRO_RUN_SLOW") == "1":
        return
    skip_slow = pytest.mark.skip(reason="set DISRO_RUN_SLOW=1 to run")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def tiny_backbone() -> BackboneConfig:
    return BackboneConfig(
        input_shape=IMAGE_SHAPE,
        extractor_blocks=2,
        blocks_per_stage=1,
        stem_channels=4,
        stage_width=4,
        latent_dim=8,
        encoder_stride=2,
        num_classes=2,
        discriminator_hidden=16,
    )


@pytest.fixture
def bundle(tiny_backbone) -> ModelBundle:
    torch.manual_seed(0)
    model = ModelBundle(tiny_backbone)
    model.eval()
    return model


@pytest.fixture
def synthetic_spec() -> DatasetSpec:
    return DatasetSpec(
        source="synthetic",
        class_filter=None,
        per_class_limit=None,
        test_per_class_limit=None,
        split=SplitFractions(train=0.75, val=0.25, test=0.0),
        synthetic=SyntheticSpec(num_classes=2, samples_per_class=16, image_shape=IMAGE_SHAPE,
                                noise_std=0.05, test_samples_per_class=8),
        seed=3,
    )


@pytest.fixture
def synthetic_dataset(synthetic_spec):
    return load_dataset(synthetic_spec)


@pytest.fixture
def small_attack() -> AttackSpec:
    return AttackSpec(kind="pgd", epsilon=8 / 255, step_size=2 / 255, num_steps=3, random_start=True, seed=5)


@pytest.fixture
def run_config(tiny_backbone, synthetic_spec, small_attack) -> RunConfig:
    train = TrainConfig(
        epochs=2,
        batch_size=8,
        learning_rate=0.05,
        lr_decay_epochs=(2,),
        diversify=DiversifySpec(steps_choices=(1, 2)),
        early_stopping=EarlyStoppingConfig(patience=5, eval_attack=small_attack),
        checkpoint_every=1,
        seed=11,
    )
    evaluation = EvaluationConfig(attacks=(small_attack,), batch_size=16, knn_k=3, iterations=(1, 2))
    return RunConfig(dataset=synthetic_spec, model=tiny_backbone, attack=small_attack, train=train,
                     evaluation=evaluation)


# ============================================================
# TRAINED EXPERIMENTS (slow)
# ============================================================

@dataclass
class Experiment:
    """Natural, standard-AT and disentangled bundles trained on one dataset."""
    config: RunConfig
    dataset: SplitDataset
    initial: ModelBundle
    natural: ModelBundle
    at: ModelBundle
    disentangled: ModelBundle
    _report: Optional[Dict] = field(default=None, repr=False)

    @property
    def report(self) -> Dict:
        """Full evaluation of the disentangled bundle; the natural model is the surrogate."""
        if self._report is None:
            self._report = evaluate(
                self.disentangled, self.dataset.test, self.config.evaluation,
                surrogate=self.natural, natural=self.natural, train_subset=self.dataset.train,
                model_name="disentangle", seed=self.config.train.seed, progress=False,
            )
        return self._report


def train_experiment(config: RunConfig) -> Experiment:
    dataset = load_dataset(config.dataset)
    initial = TrainingLoop(config, dataset, variant="disentangle", progress=False).bundle
    trained = {variant: run_training(variant, config, dataset, progress=False).bundle
               for variant in ("natural", "at", "disentangle")}
    for model in (initial, *trained.values()):
        model.eval()
    return Experiment(config=config, dataset=dataset, initial=initial, natural=trained["natural"],
                      at=trained["at"], disentangled=trained["disentangle"])


@pytest.fixture(scope="session")
def synthetic_experiment() -> Experiment:
    shape = (3, 16, 16)
    spec = DatasetSpec(
        source="synthetic",
        class_filter=None,
        per_class_limit=None,
        test_per_class_limit=None,
        split=SplitFractions(train=0.8, val=0.2, test=0.0),
        synthetic=SyntheticSpec(num_classes=2, samples_per_class=160, image_shape=shape,
                                noise_std=0.1, test_samples_per_class=50),
        seed=7,
    )
    model = BackboneConfig(input_shape=shape, extractor_blocks=2, blocks_per_stage=1, stem_channels=8,
                           stage_width=8, latent_dim=16, encoder_stride=2, num_classes=2,
                           discriminator_hidden=32)
    pgd = AttackSpec(kind="pgd", epsilon=8 / 255, step_size=2 / 255, num_steps=20, random_start=True)
    train = TrainConfig(
        epochs=12,
        batch_size=32,
        learning_rate=0.05,
        lr_decay_epochs=(10,),
        diversify=DiversifySpec(steps_choices=(3, 5)),
        early_stopping=EarlyStoppingConfig(patience=12, eval_attack=AttackSpec(
            kind="pgd", epsilon=8 / 255, step_size=2 / 255, num_steps=5, random_start=True)),
        checkpoint_every=12,
        seed=0,
    )
    evaluation = EvaluationConfig(
        attacks=(
            AttackSpec(kind="fgsm", epsilon=8 / 255, step_size=8 / 255, num_steps=1, random_start=False),
            pgd,
            AttackSpec(kind="spsa", epsilon=8 / 255, step_size=1 / 255, num_steps=20, random_start=False),
        ),
        batch_size=64,
        knn_k=10,
        iterations=(10, 20, 50),
    )
    config = RunConfig(dataset=spec, model=model, attack=pgd, train=train, evaluation=evaluation)
    return train_experiment(config)


@pytest.fixture(scope="session")
def cifar_experiment() -> Experiment:
    """The shipped desk-scale configuration; skipped without the CIFAR-10 binary batches."""
    missing = [name for name in CIFAR10_TRAIN_FILES + (CIFAR10_TEST_FILE,)
               if not (Config.CIFAR10_DIR / name).is_file()]
    if missing:
        pytest.skip(f"CIFAR-10 batches missing under {Config.CIFAR10_DIR}: {missing}")
    return train_experiment(read_config(Config.DEFAULT_CONFIG_PATH))
