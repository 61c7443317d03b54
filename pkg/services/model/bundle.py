"""
Model Bundle
The seven parameter groups of the disentanglement network behind one object,
with shape-checked entry points for every forward contract.
"""

import copy
import hashlib
import logging
from dataclasses import dataclass
from typing import Dict, List, Optional

import torch
import torch.nn as nn
from torch.func import functional_call

from config.contracts import FORMAT_TAG
from config.exceptions import ValidationError
from config.schema import BRANCHES, BackboneConfig
from services.model.networks import (
    Classifier, Discriminator, Encoder, FeatureExtractor, Reconstructor, grad_reverse,
)

logger = logging.getLogger(__name__)


@dataclass
class DisentangledTriple:
    """Pooled latents (B, latent_dim) plus the pre-pooled encoder maps they came from."""
    z_r: torch.Tensor
    z_nr: torch.Tensor
    z_ds: torch.Tensor
    maps: Optional[Dict[str, torch.Tensor]] = None

    def branch(self, name: str) -> torch.Tensor:
        return {"r": self.z_r, "nr": self.z_nr, "ds": self.z_ds}[name]

    def as_tuple(self):
        return self.z_r, self.z_nr, self.z_ds


class ModelBundle(nn.Module):
    """
    theta (extractor), omega_r / omega_nr / omega_ds (encoders), phi (classifier),
    psi (discriminator) and theta_rec (reconstructor) for one BackboneConfig.

    ``forward(x)`` is the deployed path: robust-branch logits of the image batch.
    """

    version = FORMAT_TAG

    def __init__(self, config: BackboneConfig):
        super().__init__()
        self.config = config
        self.extractor = FeatureExtractor(config)
        self.encoders = nn.ModuleDict({branch: Encoder(config) for branch in BRANCHES})
        self.classifier = Classifier(config.latent_dim, config.num_classes, config.classifier_hidden)
        self.discriminator = Discriminator(config.latent_dim, config.discriminator_hidden)
        self.reconstructor = Reconstructor(config)

    # ------------------------------------------------------------
    # Forward contracts
    # ------------------------------------------------------------

    def extract(self, x: torch.Tensor) -> torch.Tensor:
        """f = G_theta(x) for a (B, C, H, W) batch in [0, 1]."""
        if x.dim() != 4 or tuple(x.shape[1:]) != tuple(self.config.input_shape):
            raise ValidationError(
                f"extract: expected batch of shape (B, {', '.join(map(str, self.config.input_shape))}), "
                f"got {tuple(x.shape)}")
        return self.extractor(x)

    def encode_maps(self, f: torch.Tensor) -> Dict[str, torch.Tensor]:
        self._check_feature_map(f, "encode")
        return {branch: self.encoders[branch](f) for branch in BRANCHES}

    def encode(self, f: torch.Tensor) -> DisentangledTriple:
        """z_i = avgpool(E_omega_i(f)) for i in (r, nr, ds)."""
        maps = self.encode_maps(f)
        return DisentangledTriple(
            z_r=Encoder.pool(maps["r"]), z_nr=Encoder.pool(maps["nr"]), z_ds=Encoder.pool(maps["ds"]), maps=maps,
        )

    def classify(self, z: torch.Tensor) -> torch.Tensor:
        self._check_latent(z, "classify")
        return self.classifier(z)

    def penultimate(self, z: torch.Tensor) -> torch.Tensor:
        self._check_latent(z, "penultimate")
        return self.classifier.penultimate(z)

    def discriminate(self, z: torch.Tensor) -> torch.Tensor:
        """Probability in (0, 1) that each latent comes from the natural domain."""
        self._check_latent(z, "discriminate")
        return self.discriminator(z)

    def reconstruct(self, triple: DisentangledTriple) -> torch.Tensor:
        """R_theta_rec over the pre-pooled maps concatenated as [r, nr, ds]."""
        if triple.maps is None:
            raise ValidationError("reconstruct: triple carries no pre-pooled encoder maps")
        maps = torch.cat([triple.maps[branch] for branch in BRANCHES], dim=1)
        return self.reconstructor(maps)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.robust_logits(x)

    def robust_logits(self, x: torch.Tensor) -> torch.Tensor:
        f = self.extract(x)
        return self.classify(Encoder.pool(self.encoders["r"](f)))

    def reversed_nr_latent(self, f: torch.Tensor) -> torch.Tensor:
        """
        z_nr with gradient reversal on omega_nr only.

        The value equals ``encode(f).z_nr``. Gradients reaching f (and so theta)
        are plain, while gradients reaching omega_nr are multiplied by -lambda.
        Running statistics of the encoder are updated once.
        """
        encoder = self.encoders["nr"]
        frozen_params = {name: p.detach() for name, p in encoder.named_parameters()}
        scratch_buffers = {name: b.clone() for name, b in encoder.named_buffers()}
        through_f = functional_call(encoder, {**frozen_params, **scratch_buffers}, (f,))
        own = encoder(f.detach())
        reversed_own = grad_reverse(own, self.config.grl_lambda) - own.detach()
        return Encoder.pool(through_f + reversed_own)

    # ------------------------------------------------------------
    # Parameter groups
    # ------------------------------------------------------------

    def parameter_groups(self) -> Dict[str, List[nn.Parameter]]:
        return {
            "theta": list(self.extractor.parameters()),
            "omega_r": list(self.encoders["r"].parameters()),
            "omega_nr": list(self.encoders["nr"].parameters()),
            "omega_ds": list(self.encoders["ds"].parameters()),
            "phi": list(self.classifier.parameters()),
            "psi": list(self.discriminator.parameters()),
            "theta_rec": list(self.reconstructor.parameters()),
        }

    def group_checksums(self) -> Dict[str, str]:
        """SHA1 over the raw bytes of each group's parameters, in registration order."""
        checksums = {}
        for group, params in self.parameter_groups().items():
            digest = hashlib.sha1()
            for p in params:
                digest.update(p.detach().cpu().contiguous().numpy().tobytes())
            checksums[group] = digest.hexdigest()
        return checksums

    def snapshot(self) -> "ModelBundle":
        """Independent frozen copy in eval mode."""
        frozen = copy.deepcopy(self)
        frozen.eval()
        for p in frozen.parameters():
            p.requires_grad_(False)
        return frozen

    # ------------------------------------------------------------
    # Helpers
    # ------------------------------------------------------------

    def _check_feature_map(self, f: torch.Tensor, where: str) -> None:
        expected = (self.config.feature_channels,) + tuple(self.config.feature_spatial)
        if f.dim() != 4 or tuple(f.shape[1:]) != expected:
            raise ValidationError(f"{where}: expected feature map (B, {expected}), got {tuple(f.shape)}")

    def _check_latent(self, z: torch.Tensor, where: str) -> None:
        if z.dim() != 2 or z.shape[1] != self.config.latent_dim:
            raise ValidationError(f"{where}: expected latents (B, {self.config.latent_dim}), got {tuple(z.shape)}")
