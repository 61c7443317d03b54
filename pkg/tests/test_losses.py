"""
Loss tests: landmark values, invariances and double-precision gradient checks.
"""

import math

import pytest
import torch

from config.exceptions import NumericalError, ValidationError
from config.schema import LossWeights
from services.losses import (
    angular_distance, branch_cross_entropy, compose, discriminator_bce, encoder_adversarial_losses,
    pairwise_kl, reconstruction_l1, symmetric_kl,
)

LN2 = math.log(2.0)


def _vec(*values):
    return torch.tensor([values], dtype=torch.float64)


# ============================================================
# ANGULAR DISTANCE
# ============================================================

class TestAngularDistance:

    @pytest.mark.parametrize("z, z_prime, expected", [
        ((3.0, 4.0), (3.0, 4.0), 0.0),
        ((1.0, 0.0), (0.0, 1.0), 1.0),
        ((1.0, 0.0), (-2.0, 0.0), 0.0),
        ((1.0, 0.0), (1.0, 1.0), 1.0 - 1.0 / math.sqrt(2.0)),
    ])
    def test_landmarks(self, z, z_prime, expected):
        value = float(angular_distance(_vec(*z), _vec(*z_prime)))
        assert value == pytest.approx(expected, abs=1e-9)

    def test_range_and_scale_invariance(self):
        torch.manual_seed(0)
        z, z_prime = torch.randn(32, 8, dtype=torch.float64), torch.randn(32, 8, dtype=torch.float64)
        value = angular_distance(z, z_prime)
        assert 0.0 <= float(value) <= 1.0
        rescaled = angular_distance(3.5 * z, 0.2 * z_prime)
        assert float(rescaled) == pytest.approx(float(value), abs=1e-12)

    def test_zero_norm_is_flagged_not_nan(self):
        flags = []
        value = angular_distance(_vec(0.0, 0.0), _vec(1.0, 0.0), flags)
        assert math.isfinite(float(value))
        assert flags == ["L_dist:zero_norm"]

    def test_shape_mismatch(self):
        with pytest.raises(ValidationError):
            angular_distance(torch.zeros(2, 3), torch.zeros(2, 4))


# ============================================================
# CROSS-ENTROPY
# ============================================================

class TestBranchCrossEntropy:

    def _branches(self, logits):
        return {b: logits for b in ("r", "nr", "r_adv", "nr_adv")}

    def test_uniform_logits_give_log_c(self):
        logits = torch.zeros(5, 10, dtype=torch.float64)
        labels = torch.arange(5)
        assert float(branch_cross_entropy(self._branches(logits), labels)) == pytest.approx(math.log(10), abs=1e-9)

    def test_two_class_hand_value(self):
        logits = torch.tensor([[1.0, 0.0]], dtype=torch.float64)
        value = branch_cross_entropy(self._branches(logits), torch.tensor([0]))
        assert float(value) == pytest.approx(math.log(1 + math.exp(-1)), abs=1e-9)
        assert float(value) == pytest.approx(0.31326, abs=1e-5)

    def test_confident_correct_logit_tends_to_zero(self):
        logits = torch.tensor([[50.0, 0.0]], dtype=torch.float64)
        assert float(branch_cross_entropy(self._branches(logits), torch.tensor([0]))) < 1e-20

    def test_missing_branch(self):
        with pytest.raises(ValidationError):
            branch_cross_entropy({"r": torch.zeros(1, 2)}, torch.tensor([0]))

    def test_label_out_of_range(self):
        with pytest.raises(ValidationError):
            branch_cross_entropy(self._branches(torch.zeros(1, 2)), torch.tensor([2]))


# ============================================================
# DISCRIMINATOR TERMS
# ============================================================

class TestDiscriminatorTerms:

    def _half(self, n=4):
        return torch.full((n,), 0.5, dtype=torch.float64)

    def test_bce_at_one_half(self):
        value = discriminator_bce([self._half()] * 3, [self._half()] * 3)
        assert float(value) == pytest.approx(2 * LN2, abs=1e-9)

    def test_bce_perfect_discriminator(self):
        ones, zeros = torch.ones(4, dtype=torch.float64), torch.zeros(4, dtype=torch.float64)
        assert float(discriminator_bce([ones] * 3, [zeros] * 3)) == pytest.approx(0.0, abs=1e-12)

    def test_bce_symmetric_at_one_half(self):
        nat = [self._half(3)] * 3
        adv = [self._half(5)] * 3
        assert float(discriminator_bce(nat, adv)) == pytest.approx(float(discriminator_bce(adv, nat)), abs=1e-12)

    def test_bce_non_negative(self):
        torch.manual_seed(0)
        nat = [torch.rand(6, dtype=torch.float64) for _ in range(3)]
        adv = [torch.rand(6, dtype=torch.float64) for _ in range(3)]
        assert float(discriminator_bce(nat, adv)) >= 0.0

    def test_probability_outside_unit_interval(self):
        with pytest.raises(ValidationError):
            discriminator_bce([torch.tensor([1.2])], [torch.tensor([0.5])])
        with pytest.raises(ValidationError):
            encoder_adversarial_losses({b: torch.tensor([-0.1]) for b in ("r", "nr", "ds")},
                                       {b: torch.tensor([0.5]) for b in ("r", "nr", "ds")})

    def test_saturated_probabilities_are_finite(self):
        ones = torch.ones(3, dtype=torch.float64)
        zeros = torch.zeros(3, dtype=torch.float64)
        value = discriminator_bce([zeros] * 3, [ones] * 3)
        assert math.isfinite(float(value)) and float(value) > 0
        out = encoder_adversarial_losses({b: ones for b in ("r", "nr", "ds")},
                                         {b: zeros for b in ("r", "nr", "ds")})
        assert all(math.isfinite(float(v)) for v in out.values())

    def test_encoder_losses_at_one_half(self):
        probs = {b: self._half() for b in ("r", "nr", "ds")}
        out = encoder_adversarial_losses(probs, probs)
        assert float(out["loss_r_nr"]) == pytest.approx(2 * math.log(0.5), abs=1e-9)
        assert float(out["loss_ds"]) == pytest.approx(2 * LN2, abs=1e-9)

    def test_loss_r_nr_is_stationary_at_one_half(self):
        nat = {b: self._half().requires_grad_(True) for b in ("r", "nr", "ds")}
        adv = {b: self._half().requires_grad_(True) for b in ("r", "nr", "ds")}
        loss = encoder_adversarial_losses(nat, adv)["loss_r_nr"]
        grads = torch.autograd.grad(loss, [nat["r"], adv["r"]])
        # natural and adversarial gradients cancel at p = 1/2
        assert float(grads[0].sum() + grads[1].sum()) == pytest.approx(0.0, abs=1e-12)


# ============================================================
# RECONSTRUCTION
# ============================================================

class TestReconstruction:

    def test_identical_is_zero(self):
        t = torch.randn(2, 4, 3, 3, dtype=torch.float64)
        assert float(reconstruction_l1(t, t)) == 0.0

    def test_constant_offset(self):
        t = torch.randn(2, 4, 3, 3, dtype=torch.float64)
        assert float(reconstruction_l1(t + 0.75, t)) == pytest.approx(0.75, abs=1e-12)

    def test_homogeneous(self):
        torch.manual_seed(0)
        a, b = torch.randn(3, 5, dtype=torch.float64), torch.randn(3, 5, dtype=torch.float64)
        assert float(reconstruction_l1(-2 * a, -2 * b)) == pytest.approx(2 * float(reconstruction_l1(a, b)))

    def test_shape_mismatch(self):
        with pytest.raises(ValidationError):
            reconstruction_l1(torch.zeros(1, 2), torch.zeros(2, 1))


# ============================================================
# PAIRWISE KL
# ============================================================

class TestPairwiseKL:

    def test_identical_latents_give_one(self):
        z = torch.randn(4, 6, dtype=torch.float64)
        assert float(pairwise_kl((z, z, z))) == pytest.approx(1.0, abs=1e-12)

    def test_two_dimensional_oracle(self):
        p, q = (0.5, 0.5), (0.75, 0.25)
        s = sum(pi * math.log(pi / qi) for pi, qi in zip(p, q)) + sum(qi * math.log(qi / pi) for pi, qi in zip(p, q))
        z_a, z_b = _vec(0.0, 0.0), _vec(math.log(3.0), 0.0)
        assert float(symmetric_kl(z_a, z_b)) == pytest.approx(s, abs=1e-9)
        # pairs (a, b), (a, a), (b, a)
        assert float(pairwise_kl((z_a, z_b, z_a))) == pytest.approx((2 * math.exp(-s) + 1) / 3, abs=1e-9)

    def test_distant_pair_contribution_vanishes(self):
        z = _vec(0.0, 0.0, 0.0)
        far = _vec(60.0, 0.0, 0.0)
        assert float(pairwise_kl((z, z, far))) == pytest.approx(1 / 3, abs=1e-6)

    def test_range(self):
        torch.manual_seed(1)
        triple = tuple(torch.randn(8, 5, dtype=torch.float64) for _ in range(3))
        value = float(pairwise_kl(triple))
        assert 0.0 < value <= 1.0

    def test_minimize_mode_is_mean_divergence(self):
        z_a, z_b = _vec(0.0, 0.0), _vec(math.log(3.0), 0.0)
        s = float(symmetric_kl(z_a, z_b))
        assert float(pairwise_kl((z_a, z_b, z_a), mode="minimize")) == pytest.approx(2 * s / 3, abs=1e-12)


# ============================================================
# COMPOSITION
# ============================================================

class TestCompose:

    def test_all_zero_weights(self):
        weights = LossWeights(0, 0, 0, 0, 0, 0)
        report = compose({"L_dist": 0.3, "L_ce": 0.7}, weights)
        assert report.total == 0.0
        assert report.values == {"L_dist": 0.3, "L_ce": 0.7}

    def test_single_weight(self):
        weights = LossWeights(w_dist=0, w_ce=0, w_bce=0, w_adv=0, w_res=1, w_kl=0)
        report = compose({"L_res": 0.42, "L_ce": 3.0}, weights)
        assert report.total == pytest.approx(0.42)

    def test_weighted_sum(self):
        weights = LossWeights(1, 2, 0, 0, 0, 0)
        report = compose({"L_dist": 0.5, "L_ce": 0.25, "L_bce": 9.0}, weights)
        assert report.total == pytest.approx(1.0, rel=1e-6)

    def test_non_finite_component_named(self):
        with pytest.raises(NumericalError, match="L_kl"):
            compose({"L_kl": float("nan")}, LossWeights())

    def test_unknown_component(self):
        with pytest.raises(ValidationError):
            compose({"L_extra": 1.0}, LossWeights())

    def test_record_shape(self):
        report = compose({"L_ce": torch.tensor(0.5)}, LossWeights(), flags=["L_dist:zero_norm"])
        record = report.as_record(epoch=1, batch=0, variant="disentangle", attack={}, learning_rate=0.1)
        assert record["format"] == "DISRO1"
        assert record["losses"] == {"L_ce": 0.5}
        assert record["flags"] == ["L_dist:zero_norm"]


# ============================================================
# GRADIENT CHECKS
# ============================================================

def _inputs(seed, *shape):
    generator = torch.Generator().manual_seed(seed)
    return torch.randn(*shape, generator=generator, dtype=torch.float64).requires_grad_(True)


@pytest.mark.parametrize("seed", range(10))
def test_gradients_match_finite_differences(seed):
    a, b = _inputs(seed, 3, 6), _inputs(seed + 100, 3, 6)
    assert torch.autograd.gradcheck(lambda x, y: angular_distance(x, y), (a, b))

    logits = [_inputs(seed + i, 4, 5) for i in range(4)]
    labels = torch.arange(4) % 5
    assert torch.autograd.gradcheck(
        lambda *ls: branch_cross_entropy(dict(zip(("r", "nr", "r_adv", "nr_adv"), ls)), labels), tuple(logits))

    raw = [_inputs(seed + 10 + i, 5) for i in range(6)]
    assert torch.autograd.gradcheck(
        lambda *r: discriminator_bce([torch.sigmoid(t) for t in r[:3]], [torch.sigmoid(t) for t in r[3:]]),
        tuple(raw))
    assert torch.autograd.gradcheck(
        lambda *r: sum(encoder_adversarial_losses(
            dict(zip(("r", "nr", "ds"), [torch.sigmoid(t) for t in r[:3]])),
            dict(zip(("r", "nr", "ds"), [torch.sigmoid(t) for t in r[3:]]))).values()),
        tuple(raw))

    rec, target = _inputs(seed + 20, 2, 3, 2), _inputs(seed + 21, 2, 3, 2)
    assert torch.autograd.gradcheck(reconstruction_l1, (rec, target))

    triple = tuple(_inputs(seed + 30 + i, 2, 8) for i in range(3))
    assert torch.autograd.gradcheck(lambda *t: pairwise_kl(t), triple)
