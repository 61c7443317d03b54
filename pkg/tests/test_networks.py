"""
Network tests: gradient reversal, shape contracts, discriminator range,
parameter isolation and the reversed non-robust branch.
"""

import pytest
import torch
import torch.nn.functional as F

from config.exceptions import ValidationError
from config.schema import PARAMETER_GROUPS
from services.losses import encoder_adversarial_losses
from services.model.bundle import ModelBundle
from services.model.networks import Discriminator, grad_reverse, grl_backward


# ============================================================
# GRADIENT REVERSAL
# ============================================================

class TestGradientReversal:

    def test_forward_is_identity(self):
        v = torch.randn(5, 3)
        assert torch.equal(grad_reverse(v, 0.7), v)

    def test_sign_flip(self):
        assert torch.equal(grl_backward(torch.tensor([1.0, -2.0]), 1.0), torch.tensor([-1.0, 2.0]))

    def test_scaled(self):
        assert torch.equal(grl_backward(torch.tensor([4.0]), 0.5), torch.tensor([-2.0]))

    @pytest.mark.parametrize("lambd", [0.1, 0.5, 1.0, 2.0])
    def test_backward_through_autograd(self, lambd):
        x = torch.randn(6, requires_grad=True)
        upstream = torch.randn(6)
        grad_reverse(x, lambd).backward(upstream)
        assert torch.equal(x.grad, -(lambd * upstream))

    def test_matches_finite_differences_of_unreversed_graph(self):
        lambd = 0.5
        x = torch.randn(4, dtype=torch.float64, requires_grad=True)
        w = torch.randn(4, dtype=torch.float64)
        torch.sin(grad_reverse(x, lambd) * w).sum().backward()

        h = 1e-6
        numeric = torch.zeros(4, dtype=torch.float64)
        base = x.detach()
        for i in range(4):
            step = torch.zeros(4, dtype=torch.float64)
            step[i] = h
            numeric[i] = (torch.sin((base + step) * w).sum() - torch.sin((base - step) * w).sum()) / (2 * h)
        assert torch.allclose(x.grad, -lambd * numeric, rtol=1e-6, atol=1e-9)

    def test_rejects_non_positive_lambda(self):
        with pytest.raises(ValueError):
            grl_backward(torch.ones(1), 0.0)


# ============================================================
# SHAPES AND DETERMINISM
# ============================================================

class TestForwardContracts:

    def test_extract_keeps_batch_dimension(self, bundle, tiny_backbone):
        x = torch.rand(5, *tiny_backbone.input_shape)
        f = bundle.extract(x)
        assert f.shape == (5, tiny_backbone.feature_channels) + tuple(tiny_backbone.feature_spatial)

    def test_extract_rejects_wrong_shape(self, bundle):
        with pytest.raises(ValidationError):
            bundle.extract(torch.rand(2, 1, 8, 8))

    def test_encode_latent_lengths(self, bundle, tiny_backbone):
        triple = bundle.encode(bundle.extract(torch.rand(3, *tiny_backbone.input_shape)))
        for z in triple.as_tuple():
            assert z.shape == (3, tiny_backbone.latent_dim)

    def test_classify_logits_and_softmax(self, bundle, tiny_backbone):
        z = torch.randn(4, tiny_backbone.latent_dim)
        logits = bundle.classify(z)
        assert logits.shape == (4, tiny_backbone.num_classes)
        assert torch.allclose(F.softmax(logits, dim=1).sum(dim=1), torch.ones(4), atol=1e-6)
        assert torch.equal(bundle.classify(z), logits)

    def test_classify_rejects_wrong_length(self, bundle):
        with pytest.raises(ValidationError):
            bundle.classify(torch.randn(2, 3))

    def test_eval_mode_is_deterministic(self, bundle, tiny_backbone):
        x = torch.rand(3, *tiny_backbone.input_shape)
        assert torch.equal(bundle.extract(x), bundle.extract(x))
        assert torch.equal(bundle(x), bundle(x))

    def test_reconstruct_matches_feature_shape(self, bundle, tiny_backbone):
        f = bundle.extract(torch.rand(2, *tiny_backbone.input_shape))
        assert bundle.reconstruct(bundle.encode(f)).shape == f.shape

    def test_zeroed_encoders_map_zero_features_to_zero(self, bundle, tiny_backbone):
        with torch.no_grad():
            for encoder in bundle.encoders.values():
                for p in encoder.parameters():
                    p.zero_()
        f = torch.zeros((1, tiny_backbone.feature_channels) + tuple(tiny_backbone.feature_spatial))
        for z in bundle.encode(f).as_tuple():
            assert torch.equal(z, torch.zeros_like(z))


class TestDiscriminator:

    def test_zero_final_layer_gives_one_half(self):
        disc = Discriminator(latent_dim=8, hidden=256)
        with torch.no_grad():
            disc.out.weight.zero_()
            disc.out.bias.zero_()
        out = disc(torch.randn(10, 8))
        assert torch.allclose(out, torch.full((10,), 0.5), atol=1e-7)

    def test_outputs_strictly_inside_unit_interval(self, bundle, tiny_backbone):
        z = 1e4 * torch.randn(64, tiny_backbone.latent_dim)
        probs = bundle.discriminate(z)
        assert bool((probs > 0).all()) and bool((probs < 1).all())


# ============================================================
# PARAMETER ISOLATION
# ============================================================

class TestParameterIsolation:

    def test_groups_are_disjoint_and_complete(self, bundle):
        groups = bundle.parameter_groups()
        assert tuple(groups) == PARAMETER_GROUPS
        ids = [id(p) for params in groups.values() for p in params]
        assert len(ids) == len(set(ids))
        assert len(ids) == len(list(bundle.parameters()))

    def test_perturbing_robust_encoder_only_moves_robust_latent(self, bundle, tiny_backbone):
        f = bundle.extract(torch.rand(3, *tiny_backbone.input_shape))
        before = bundle.encode(f)
        with torch.no_grad():
            for p in bundle.encoders["r"].parameters():
                p.add_(0.1)
        after = bundle.encode(f)
        assert not torch.equal(before.z_r, after.z_r)
        assert torch.equal(before.z_nr, after.z_nr)
        assert torch.equal(before.z_ds, after.z_ds)

    def test_domain_loss_has_no_gradient_on_robust_encoder(self, bundle, tiny_backbone):
        nat = bundle.encode(bundle.extract(torch.rand(4, *tiny_backbone.input_shape)))
        adv = bundle.encode(bundle.extract(torch.rand(4, *tiny_backbone.input_shape)))
        d = bundle.discriminate
        loss_ds = encoder_adversarial_losses(
            {"r": d(nat.z_r), "nr": d(nat.z_nr), "ds": d(nat.z_ds)},
            {"r": d(adv.z_r), "nr": d(adv.z_nr), "ds": d(adv.z_ds)},
        )["loss_ds"]
        omega_r = bundle.parameter_groups()["omega_r"]
        grads = torch.autograd.grad(loss_ds, omega_r, allow_unused=True)
        assert all(g is None or bool((g == 0).all()) for g in grads)

    def test_group_checksums_change_only_for_touched_group(self, bundle):
        before = bundle.group_checksums()
        with torch.no_grad():
            bundle.discriminator.out.bias.add_(1.0)
        after = bundle.group_checksums()
        changed = {g for g in PARAMETER_GROUPS if before[g] != after[g]}
        assert changed == {"psi"}


class TestReversedNonRobustLatent:

    def _grads(self, bundle, latent_fn, x, labels):
        groups = bundle.parameter_groups()
        params = groups["omega_nr"] + groups["theta"]
        f = bundle.extract(x)
        loss = F.cross_entropy(bundle.classify(latent_fn(f)), labels)
        grads = torch.autograd.grad(loss, params)
        n = len(groups["omega_nr"])
        return grads[:n], grads[n:]

    def test_value_and_gradient_identity(self, tiny_backbone):
        torch.manual_seed(3)
        model = ModelBundle(tiny_backbone).double().eval()
        x = torch.rand(4, *tiny_backbone.input_shape, dtype=torch.float64)
        labels = torch.tensor([0, 1, 1, 0])

        f = model.extract(x)
        assert torch.equal(model.reversed_nr_latent(f), model.encode(f).z_nr)

        plain_nr, plain_theta = self._grads(model, lambda f: model.encode(f).z_nr, x, labels)
        rev_nr, rev_theta = self._grads(model, model.reversed_nr_latent, x, labels)
        lambd = tiny_backbone.grl_lambda
        for plain, rev in zip(plain_nr, rev_nr):
            assert torch.allclose(rev, -lambd * plain, rtol=1e-10, atol=1e-14)
        for plain, rev in zip(plain_theta, rev_theta):
            assert torch.allclose(rev, plain, rtol=1e-10, atol=1e-14)
