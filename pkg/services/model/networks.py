"""
Network Components
Residual feature extractor, latent encoders, shared classifier, domain
discriminator, feature-map reconstructor and the gradient reversal layer.
"""

from typing import List, Optional, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.autograd import Function

from config.schema import BackboneConfig

# Discriminator link keeps outputs strictly inside (0, 1)
LINK_EPS = 1e-6


# ============================================================
# GRADIENT REVERSAL
# ============================================================

class GradientReversal(Function):
    """Identity forward; backward multiplies the upstream gradient by -lambda."""

    @staticmethod
    def forward(ctx, x, lambd):
        ctx.lambd = lambd
        return x.view_as(x)

    @staticmethod
    def backward(ctx, grad_output):
        return grl_backward(grad_output, ctx.lambd), None


def grl_backward(upstream: torch.Tensor, lambd: float) -> torch.Tensor:
    """Gradient passed through the reversal layer: -lambda * upstream."""
    if lambd <= 0:
        raise ValueError(f"GRL lambda must be > 0, got {lambd}")
    return upstream.neg() * lambd


def grad_reverse(x: torch.Tensor, lambd: float = 1.0) -> torch.Tensor:
    return GradientReversal.apply(x, lambd)


# ============================================================
# BUILDING BLOCKS
# ============================================================

class ResidualBlock(nn.Module):
    """
    Two 3x3 convolutions with a skip connection; the first convolution carries
    the stride, and a 1x1 projection matches the shortcut when shape changes.
    """

    def __init__(self, in_channels: int, out_channels: int, stride: int = 1):
        super().__init__()
        self.first_conv = nn.Conv2d(in_channels, out_channels, kernel_size=3, stride=stride, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(out_channels)
        self.second_conv = nn.Conv2d(out_channels, out_channels, kernel_size=3, stride=1, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(out_channels)

        self.shortcut = nn.Sequential()
        if stride != 1 or in_channels != out_channels:
            self.shortcut = nn.Sequential(
                nn.Conv2d(in_channels, out_channels, kernel_size=1, stride=stride, bias=False),
                nn.BatchNorm2d(out_channels),
            )

    def forward(self, x):
        out = F.relu(self.bn1(self.first_conv(x)))
        out = self.bn2(self.second_conv(out))
        out = out + self.shortcut(x)
        return F.relu(out)


class InputNormalization(nn.Module):
    """Per-channel (x - mean) / std as the first model layer; identity when unset."""

    def __init__(self, mean: Optional[Sequence[float]], std: Optional[Sequence[float]], channels: int):
        super().__init__()
        mean = torch.tensor(mean if mean is not None else [0.0] * channels).view(1, -1, 1, 1)
        std = torch.tensor(std if std is not None else [1.0] * channels).view(1, -1, 1, 1)
        self.register_buffer("mean", mean)
        self.register_buffer("std", std)

    def forward(self, x):
        return (x - self.mean.to(x.dtype)) / self.std.to(x.dtype)


# ============================================================
# COMPONENTS
# ============================================================

class FeatureExtractor(nn.Module):
    """
    G_theta: stem convolution followed by residual stages.

    Stage i has ``stage_width * 2**i`` channels; the first stage keeps the
    spatial size and every later stage halves it.
    """

    def __init__(self, config: BackboneConfig):
        super().__init__()
        channels = config.input_shape[0]
        self.normalize = InputNormalization(config.normalize_mean, config.normalize_std, channels)
        self.stem = nn.Sequential(
            nn.Conv2d(channels, config.stem_channels, kernel_size=3, stride=1, padding=1, bias=False),
            nn.BatchNorm2d(config.stem_channels),
            nn.ReLU(inplace=True),
        )

        stages: List[nn.Module] = []
        in_channels = config.stem_channels
        for stage in range(config.extractor_blocks):
            out_channels = config.stage_width * 2 ** stage
            stride = 1 if stage == 0 else 2
            blocks = [ResidualBlock(in_channels, out_channels, stride)]
            blocks += [ResidualBlock(out_channels, out_channels) for _ in range(config.blocks_per_stage - 1)]
            stages.append(nn.Sequential(*blocks))
            in_channels = out_channels
        self.stages = nn.Sequential(*stages)

    def forward(self, x):
        return self.stages(self.stem(self.normalize(x)))


class Encoder(nn.Module):
    """E_omega: one residual block to ``latent_dim`` channels; pooling is separate."""

    def __init__(self, config: BackboneConfig):
        super().__init__()
        self.block = ResidualBlock(config.feature_channels, config.latent_dim, config.encoder_stride)

    def forward(self, f):
        return self.block(f)

    @staticmethod
    def pool(feature_map: torch.Tensor) -> torch.Tensor:
        return F.adaptive_avg_pool2d(feature_map, 1).flatten(1)


class Classifier(nn.Module):
    """
    C_phi shared by every branch. With ``hidden = 0`` it is a single linear
    layer and the penultimate representation is the latent itself.
    """

    def __init__(self, latent_dim: int, num_classes: int, hidden: int = 0):
        super().__init__()
        if hidden > 0:
            self.body = nn.Sequential(nn.Linear(latent_dim, hidden), nn.ReLU(inplace=True))
            self.head = nn.Linear(hidden, num_classes)
        else:
            self.body = nn.Identity()
            self.head = nn.Linear(latent_dim, num_classes)

    def penultimate(self, z):
        return self.body(z)

    def forward(self, z):
        return self.head(self.body(z))


class Discriminator(nn.Module):
    """D_psi: two-layer MLP; output is the probability of the natural domain."""

    def __init__(self, latent_dim: int, hidden: int = 256):
        super().__init__()
        self.hidden = nn.Linear(latent_dim, hidden)
        self.out = nn.Linear(hidden, 1)

    def logit(self, z):
        return self.out(F.relu(self.hidden(z))).squeeze(-1)

    def forward(self, z):
        return LINK_EPS + (1.0 - 2.0 * LINK_EPS) * torch.sigmoid(self.logit(z))


class Reconstructor(nn.Module):
    """
    R_theta_rec: transposed convolutions from the concatenated pre-pooled
    encoder maps [r, nr, ds] back to the extractor feature-map shape.
    """

    def __init__(self, config: BackboneConfig):
        super().__init__()
        in_channels = 3 * config.latent_dim
        out_channels = config.feature_channels
        if config.encoder_stride == 2:
            upsample = nn.ConvTranspose2d(in_channels, out_channels, kernel_size=4, stride=2, padding=1, bias=False)
        else:
            upsample = nn.ConvTranspose2d(in_channels, out_channels, kernel_size=3, stride=1, padding=1, bias=False)
        self.layers = nn.Sequential(
            upsample,
            nn.BatchNorm2d(out_channels),
            nn.ReLU(inplace=True),
            nn.ConvTranspose2d(out_channels, out_channels, kernel_size=3, stride=1, padding=1),
        )

    def forward(self, maps):
        return self.layers(maps)
