"""
Evaluator tests: degenerate attacks, self-transfer, k-NN, detection
thresholds, two-path routing, exports and report handling, plus slow
acceptance checks on trained synthetic and CIFAR-10 experiments.
"""

import dataclasses

import numpy as np
import pandas as pd
import pytest
import torch

from config.contracts import validate_eval_report
from config.exceptions import ValidationError
from config.schema import AttackSpec, EvaluationConfig
from services.datasets import ImageBatch
from services.evaluator import (
    aggregate_reports, attack_dataset, black_box_accuracy, clean_accuracy, detect, detection_metrics,
    detection_scores, disentanglement_losses, evaluate, export_embeddings, feature_histogram, histogram_frame,
    iteration_sweep, knn_accuracy, knn_predict, obfuscation_checks, predict, read_report, robust_accuracy,
    two_path_accuracy, two_path_classify, write_report,
)
from services.model.bundle import ModelBundle
from services.plotting import histograms_from_csv


@pytest.fixture
def eval_data(synthetic_dataset):
    return synthetic_dataset.test


@pytest.fixture
def other_bundle(tiny_backbone):
    torch.manual_seed(99)
    return ModelBundle(tiny_backbone).eval()


# ============================================================
# ACCURACY
# ============================================================

class TestAccuracy:

    def test_zero_budget_equals_clean(self, bundle, eval_data):
        spec = AttackSpec(kind="pgd", epsilon=0.0, step_size=2 / 255, num_steps=5)
        assert robust_accuracy(bundle, eval_data, spec) == clean_accuracy(bundle, eval_data)

    def test_self_transfer_equals_white_box(self, bundle, eval_data, small_attack):
        white = robust_accuracy(bundle, eval_data, small_attack, batch_size=8)
        black = black_box_accuracy(bundle, bundle, eval_data, small_attack, batch_size=8)
        assert black == white

    def test_black_box_zero_budget_is_clean(self, bundle, other_bundle, eval_data):
        spec = AttackSpec(kind="fgsm", epsilon=0.0, num_steps=1, random_start=False)
        assert black_box_accuracy(bundle, other_bundle, eval_data, spec) == clean_accuracy(bundle, eval_data)

    def test_accuracy_is_a_percentage(self, bundle, eval_data, small_attack):
        value = robust_accuracy(bundle, eval_data, small_attack)
        assert 0.0 <= value <= 100.0

    def test_empty_dataset_rejected(self, bundle, eval_data):
        with pytest.raises(ValidationError):
            clean_accuracy(bundle, eval_data.head(0))

    def test_attack_dataset_respects_budget(self, bundle, eval_data, small_attack):
        adversarial = attack_dataset(bundle, eval_data, small_attack, batch_size=5)
        delta = (adversarial.pixels - eval_data.pixels).abs().flatten(1).max(dim=1).values
        assert bool((delta <= small_attack.epsilon + 1e-6).all())
        assert torch.equal(adversarial.labels, eval_data.labels)

    def test_attacks_are_repeatable(self, bundle, eval_data, small_attack):
        a = attack_dataset(bundle, eval_data, small_attack, batch_size=8)
        b = attack_dataset(bundle, eval_data, small_attack, batch_size=8)
        assert torch.equal(a.pixels, b.pixels)


# ============================================================
# K-NN
# ============================================================

class TestKNN:

    def test_hand_placed_one_nearest_neighbour(self):
        reference = torch.tensor([[0.0, 0.0], [5.0, 0.0], [0.0, 5.0]])
        labels = torch.tensor([0, 1, 2])
        queries = torch.tensor([[0.4, 0.3], [4.0, 1.0], [1.0, 4.5], [2.4, 2.6]])
        brute = torch.tensor([int(labels[torch.argmin(((reference - q) ** 2).sum(dim=1))]) for q in queries])
        assert torch.equal(knn_predict(reference, labels, queries, k=1), brute)

    def test_tie_goes_to_closest_class(self):
        reference = torch.tensor([[1.0], [-3.0], [10.0]])
        labels = torch.tensor([0, 1, 1])
        # k = 2: one vote each for classes 0 and 1; class 0 is nearer
        assert int(knn_predict(reference, labels, torch.tensor([[0.0]]), k=2)[0]) == 0

    def test_invalid_k(self):
        reference = torch.zeros(3, 2)
        with pytest.raises(ValidationError):
            knn_predict(reference, torch.zeros(3, dtype=torch.long), reference, k=0)
        with pytest.raises(ValidationError):
            knn_predict(reference, torch.zeros(3, dtype=torch.long), reference, k=4)

    def test_duplicated_training_point_gets_its_own_label(self, bundle, synthetic_dataset):
        train = synthetic_dataset.train.head(10)
        query = train.subset([3])
        accuracy = knn_accuracy(bundle, train, query, k=1)
        assert accuracy == 100.0


# ============================================================
# DETECTION AND TWO-PATH
# ============================================================

class TestDetection:

    def test_threshold_zero_flags_nothing(self, bundle, eval_data):
        assert not any(r["is_adversarial"] for r in detect(bundle, eval_data.pixels, threshold=0.0))

    def test_threshold_one_flags_everything(self, bundle, eval_data):
        assert all(r["is_adversarial"] for r in detect(bundle, eval_data.pixels, threshold=1.0))

    def test_scores_in_unit_interval(self, bundle, eval_data):
        scores = [r["score"] for r in detect(bundle, eval_data.pixels)]
        assert all(0.0 < s < 1.0 for s in scores)

    def test_metrics_ranges(self, bundle, eval_data, small_attack):
        adversarial = attack_dataset(bundle, eval_data, small_attack)
        metrics = detection_metrics(bundle, eval_data, adversarial, threshold=0.5)
        for rate in ("tpr", "tnr", "auc"):
            assert 0.0 <= metrics[rate] <= 1.0
        assert metrics["num_clean"] == metrics["num_adversarial"] == len(eval_data)


class TestTwoPath:

    def test_never_flagged_routes_to_natural_model(self, bundle, other_bundle, eval_data):
        never = lambda x: torch.zeros(x.shape[0], dtype=torch.bool)  # noqa: E731
        labels = two_path_classify(bundle, other_bundle, eval_data.pixels, detector=never)
        assert torch.equal(labels, predict(other_bundle, eval_data))

    def test_always_flagged_routes_to_robust_branch(self, bundle, other_bundle, eval_data, small_attack):
        always = lambda x: torch.ones(x.shape[0], dtype=torch.bool)  # noqa: E731
        accuracies = two_path_accuracy(bundle, other_bundle, eval_data, small_attack, detector=always)
        assert accuracies["clean"] == clean_accuracy(bundle, eval_data)
        assert accuracies["robust"] == robust_accuracy(bundle, eval_data, small_attack)

    def test_perfect_detector_matches_natural_clean_accuracy(self, bundle, other_bundle, eval_data, small_attack):
        clean_ids = set(eval_data.pixels.flatten(1).sum(dim=1).tolist())
        oracle = lambda x: torch.tensor([float(s) not in clean_ids for s in x.flatten(1).sum(dim=1)])  # noqa: E731
        accuracies = two_path_accuracy(bundle, other_bundle, eval_data, small_attack, detector=oracle)
        assert accuracies["clean"] == clean_accuracy(other_bundle, eval_data)


# ============================================================
# SWEEPS AND EXPORTS
# ============================================================

def test_single_iteration_sweep_equals_robust_accuracy(bundle, eval_data, small_attack):
    curve = iteration_sweep(bundle, eval_data, [small_attack.num_steps], small_attack)
    assert len(curve) == 1
    assert curve[0]["accuracy"] == robust_accuracy(bundle, eval_data, small_attack)


@pytest.mark.parametrize("branches, attacked", [(("r",), False), (("r", "nr", "ds"), True)])
def test_export_row_count(bundle, eval_data, small_attack, branches, attacked, tmp_path):
    table = export_embeddings(bundle, eval_data, branches, attacked=attacked, spec=small_attack,
                              path=tmp_path / "emb.csv")
    assert len(table) == len(eval_data) * len(branches) * (2 if attacked else 1)
    written = pd.read_csv(tmp_path / "emb.csv")
    expected = ["id", "label", "domain", "branch"] + [f"dim_{i}" for i in range(bundle.config.latent_dim)]
    assert list(written.columns) == expected


def test_reexport_is_byte_identical(bundle, eval_data, small_attack, tmp_path):
    export_embeddings(bundle, eval_data, attacked=True, spec=small_attack, path=tmp_path / "a.csv")
    export_embeddings(bundle, eval_data, attacked=True, spec=small_attack, path=tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


def test_feature_histogram_rows(bundle, eval_data):
    rows = feature_histogram(bundle, eval_data.pixels[:3])
    assert rows.shape == (3, bundle.config.latent_dim)
    assert np.array_equal(rows, feature_histogram(bundle, eval_data.pixels[:3]))


def test_histogram_table_reads_back(bundle, eval_data, tmp_path):
    histograms = {"nat": feature_histogram(bundle, eval_data.pixels[:3]),
                  "adv": feature_histogram(bundle, eval_data.pixels[3:5])}
    frame = histogram_frame(histograms)
    assert len(frame) == 5 * bundle.config.latent_dim
    path = tmp_path / "ds_histograms.csv"
    frame.to_csv(path, index=False)
    restored = histograms_from_csv(path)
    assert list(restored) == ["nat", "adv"]
    for domain, values in histograms.items():
        assert np.allclose(restored[domain], values)


# ============================================================
# REPORTS
# ============================================================

class TestReports:

    def _report(self, bundle, synthetic_dataset, small_attack, **kwargs):
        config = EvaluationConfig(attacks=(small_attack, dataclasses.replace(small_attack, kind="fgsm", num_steps=1,
                                                                            random_start=False)),
                                  batch_size=16, knn_k=3, iterations=(1, 2))
        return evaluate(bundle, synthetic_dataset.test, config, train_subset=synthetic_dataset.train,
                        progress=False, **kwargs)

    def test_full_report(self, bundle, other_bundle, synthetic_dataset, small_attack, tmp_path):
        report = self._report(bundle, synthetic_dataset, small_attack, surrogate=other_bundle, natural=other_bundle)
        assert report["format"] == "DISRO1"
        assert set(report["attacks"]) == {"pgd", "fgsm"}
        assert set(report["black_box"]) == {"pgd", "fgsm"}
        assert len(report["iteration_sweep"]) == 2
        assert report["detection"] is not None and report["two_path"] is not None
        assert report["knn"]["softmax_clean"] == report["clean_accuracy"]

        paths = write_report(report, tmp_path / "report.json")
        assert read_report(paths["report"])["model_hash"] == report["model_hash"]
        summary = pd.read_csv(paths["summary"])
        assert len(summary) == 1 + 2 + 2

    def test_dlr_skipped_for_two_classes(self, bundle, synthetic_dataset, small_attack):
        dlr = dataclasses.replace(small_attack, inner_loss="dlr")
        config = EvaluationConfig(attacks=(dlr,), batch_size=16, iterations=())
        report = evaluate(bundle, synthetic_dataset.test, config, progress=False)
        assert report["attacks"] == {}

    def test_obfuscation_checks(self):
        report = {
            "attacks": {"pgd": {"accuracy": 40.0}, "fgsm": {"accuracy": 55.0}, "spsa": {"accuracy": 38.0}},
            "black_box": {"pgd": {"accuracy": 70.0}},
            "iteration_sweep": [{"num_steps": 10, "accuracy": 41.0}, {"num_steps": 20, "accuracy": 41.5},
                                {"num_steps": 50, "accuracy": 39.0}],
        }
        checks = obfuscation_checks(report)
        assert checks == {
            "black_box_not_stronger": True,
            "gradient_free_not_stronger": False,
            "single_step_not_stronger": True,
            "more_iterations_not_weaker": True,
        }
        assert obfuscation_checks({})["black_box_not_stronger"] is None

    def test_aggregate_across_seeds(self):
        base = {"model_hash": "abc", "model_name": "m", "black_box": {}}
        reports = [
            {**base, "clean_accuracy": 90.0, "attacks": {"pgd": {"accuracy": 40.0}}},
            {**base, "clean_accuracy": 94.0, "attacks": {"pgd": {"accuracy": 44.0}}},
        ]
        table = aggregate_reports(reports).set_index("attack")
        assert table.loc["clean", "mean"] == pytest.approx(92.0)
        assert table.loc["pgd", "count"] == 2
        assert table.loc["pgd", "std"] == pytest.approx(np.std([40.0, 44.0], ddof=1))

    def test_out_of_range_accuracy_rejected(self):
        with pytest.raises(ValidationError):
            validate_eval_report({"model_hash": "x", "clean_accuracy": 101.0})


def test_predict_matches_forward(bundle, eval_data):
    with torch.no_grad():
        expected = bundle(eval_data.pixels).argmax(dim=1)
    assert torch.equal(predict(bundle, eval_data, batch_size=5), expected)
    assert isinstance(eval_data, ImageBatch)


# ============================================================
# TRAINED EXPERIMENTS (slow)
# ============================================================

def _reference_pgd(exp) -> AttackSpec:
    spec = next(s for s in exp.config.evaluation.attacks if s.label == "pgd")
    return dataclasses.replace(spec, seed=exp.config.train.seed + spec.seed)


def _latent_shift(bundle, clean, adversarial, branch):
    device = next(bundle.parameters()).device
    with torch.no_grad():
        nat = bundle.encode(bundle.extract(clean.pixels.to(device))).branch(branch)
        adv = bundle.encode(bundle.extract(adversarial.pixels.to(device))).branch(branch)
    return float((nat - adv).norm(dim=1).mean())


@pytest.mark.slow
class TestSyntheticExperiment:
    def test_no_gradient_masking(self, synthetic_experiment):
        checks = synthetic_experiment.report["obfuscation_checks"]
        assert checks == {name: True for name in checks}

    def test_discriminator_scores_natural_higher(self, synthetic_experiment):
        exp = synthetic_experiment
        adversarial = attack_dataset(exp.disentangled, exp.dataset.val, exp.config.attack)
        with torch.no_grad():
            natural = detection_scores(exp.disentangled, exp.dataset.val.pixels)
            attacked = detection_scores(exp.disentangled, adversarial.pixels)
        assert float(natural.mean()) > float(attacked.mean())

    def test_ds_histograms_differ(self, synthetic_experiment):
        exp = synthetic_experiment
        adversarial = attack_dataset(exp.disentangled, exp.dataset.test, exp.config.attack)
        nat = feature_histogram(exp.disentangled, exp.dataset.test.pixels).mean(axis=0)
        adv = feature_histogram(exp.disentangled, adversarial.pixels).mean(axis=0)
        assert np.abs(nat - adv).sum() > 0


@pytest.mark.slow
class TestDeskScaleAcceptance:
    def test_natural_model_is_accurate_and_fragile(self, cifar_experiment):
        exp = cifar_experiment
        test = exp.dataset.test
        assert clean_accuracy(exp.natural, test) >= 90.0
        assert robust_accuracy(exp.natural, test, _reference_pgd(exp)) <= 10.0

    def test_robustness_ordering(self, cifar_experiment):
        exp = cifar_experiment
        spec = _reference_pgd(exp)
        natural = robust_accuracy(exp.natural, exp.dataset.test, spec)
        standard = robust_accuracy(exp.at, exp.dataset.test, spec)
        disentangled = exp.report["attacks"]["pgd"]["accuracy"]
        assert disentangled >= standard - 3.0
        assert standard >= natural
        assert disentangled - natural >= 30.0

    def test_black_box_is_weaker_than_white_box(self, cifar_experiment):
        report = cifar_experiment.report
        assert report["black_box"]["pgd"]["accuracy"] >= report["attacks"]["pgd"]["accuracy"] + 5.0

    def test_no_gradient_masking(self, cifar_experiment):
        checks = cifar_experiment.report["obfuscation_checks"]
        assert checks["gradient_free_not_stronger"] is True
        assert checks["single_step_not_stronger"] is True
        assert checks["more_iterations_not_weaker"] is True

    def test_detector_separates_domains(self, cifar_experiment):
        detection = cifar_experiment.report["detection"]
        assert detection["auc"] >= 0.95
        assert detection["tpr"] >= 0.9
        assert detection["tnr"] >= 0.9

    def test_two_path_keeps_both_accuracies(self, cifar_experiment):
        exp = cifar_experiment
        report = exp.report
        assert report["two_path"]["clean"] == pytest.approx(clean_accuracy(exp.natural, exp.dataset.test), abs=1.0)
        assert report["two_path"]["robust"] == pytest.approx(report["attacks"]["pgd"]["accuracy"], abs=1.0)

    def test_knn_matches_softmax(self, cifar_experiment):
        knn = cifar_experiment.report["knn"]
        assert knn["clean"] == pytest.approx(knn["softmax_clean"], abs=3.0)
        assert knn["robust"] == pytest.approx(knn["softmax_robust"], abs=3.0)

    def test_held_out_losses_fall_below_initialization(self, cifar_experiment):
        exp = cifar_experiment
        spec = _reference_pgd(exp)
        kl_mode = exp.config.train.kl_mode
        before = disentanglement_losses(exp.initial, exp.dataset.val, spec, kl_mode=kl_mode)
        after = disentanglement_losses(exp.disentangled, exp.dataset.val, spec, kl_mode=kl_mode)
        for name in ("L_dist", "L_res", "L_kl"):
            assert after[name] < before[name], name

    def test_ds_latent_moves_more_than_robust_latent(self, cifar_experiment):
        exp = cifar_experiment
        clean = exp.dataset.test
        adversarial = attack_dataset(exp.disentangled, clean, _reference_pgd(exp))
        assert _latent_shift(exp.disentangled, clean, adversarial, "ds") > \
            _latent_shift(exp.disentangled, clean, adversarial, "r")
