"""
WGAN-GP networks and loss terms.

The generator maps B x z_dim noise (viewed as B x z_dim x 1 x 1) through a
stack of transpose convolutions to B x C x S x S images bounded by tanh.
The critic mirrors it with strided convolutions and leaky ReLU and emits
one unbounded score per image. The critic has no normalization layers so
the gradient penalty stays a per-sample quantity.
"""

import logging
from typing import Optional, Union

import torch
from torch import nn

from cxr_augment.config import FIRST_STAGE_SIZE, CriticConfig, GeneratorConfig, stages_for_size
from cxr_augment.exceptions import ShapeError, TrainingInstabilityError
from cxr_augment.models.labels import ClassLabel

logger = logging.getLogger("cxr-wgan")

INIT_STD = 0.02


def noise(
    n: int, z_dim: int, generator: Optional[torch.Generator] = None
) -> torch.Tensor:
    """Draw ``n`` i.i.d. standard normal noise vectors of length ``z_dim``."""
    return torch.randn(n, z_dim, generator=generator)


class Generator(nn.Module):
    """Transpose-convolution generator with batch norm + ReLU between stages."""

    def __init__(self, cfg: GeneratorConfig, label: Optional[ClassLabel] = None) -> None:
        super().__init__()
        self.cfg = cfg
        self.label = label
        stages = stages_for_size(cfg.out_size, cfg.num_stages)

        widths = [cfg.hidden_dim * 2 ** (stages - 1 - i) for i in range(stages - 1)]
        layers = []
        in_ch = cfg.z_dim
        for i, width in enumerate(widths):
            if i == 0:
                conv = nn.ConvTranspose2d(in_ch, width, FIRST_STAGE_SIZE, 1, 0, bias=False)
            else:
                conv = nn.ConvTranspose2d(in_ch, width, 4, 2, 1, bias=False)
            layers += [conv, nn.BatchNorm2d(width), nn.ReLU(inplace=True)]
            in_ch = width
        if stages == 1:
            layers.append(nn.ConvTranspose2d(in_ch, cfg.out_channels, FIRST_STAGE_SIZE, 1, 0))
        else:
            layers.append(nn.ConvTranspose2d(in_ch, cfg.out_channels, 4, 2, 1))
        layers.append(nn.Tanh())
        self.gen = nn.Sequential(*layers)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        if z.dim() == 2:
            z = z.view(z.shape[0], z.shape[1], 1, 1)
        if z.shape[1] != self.cfg.z_dim:
            raise ShapeError(
                f"Expected noise of length {self.cfg.z_dim}, got {z.shape[1]}"
            )
        return self.gen(z)


class Critic(nn.Module):
    """Strided-convolution critic; one unbounded score per image."""

    def __init__(self, cfg: CriticConfig) -> None:
        super().__init__()
        self.cfg = cfg
        stages = stages_for_size(cfg.in_size, cfg.num_stages)

        layers = []
        in_ch = cfg.in_channels
        for i in range(stages - 1):
            width = cfg.hidden_dim * 2**i
            layers += [nn.Conv2d(in_ch, width, 4, 2, 1), nn.LeakyReLU(0.2, inplace=True)]
            in_ch = width
        layers.append(nn.Conv2d(in_ch, 1, FIRST_STAGE_SIZE, 1, 0))
        self.crit = nn.Sequential(*layers)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        expected = (self.cfg.in_channels, self.cfg.in_size, self.cfg.in_size)
        if x.dim() != 4 or tuple(x.shape[1:]) != expected:
            raise ShapeError(
                f"Critic expects B x {expected[0]} x {expected[1]} x {expected[2]}, "
                f"got {tuple(x.shape)}",
                {"expected": list(expected), "found": list(x.shape)},
            )
        return self.crit(x).view(x.shape[0])


def build_generator(cfg: GeneratorConfig, label: Optional[ClassLabel] = None) -> Generator:
    """Build a generator for ``cfg``; raises ConfigurationError on unreachable sizes."""
    return Generator(cfg, label)


def build_critic(cfg: CriticConfig) -> Critic:
    """Build a critic for ``cfg``; raises ConfigurationError on unreachable sizes."""
    return Critic(cfg)


def init_weights(
    model: nn.Module, generator: Optional[torch.Generator] = None
) -> nn.Module:
    """Draw conv and transpose-conv weights from N(0, 0.02^2), batch-norm scales from N(1, 0.02^2).

    Every bias is zeroed, so nothing left over from layer construction
    survives. With the same ``generator`` state the result is identical.
    """
    with torch.no_grad():
        for module in model.modules():
            if isinstance(module, (nn.Conv2d, nn.ConvTranspose2d)):
                module.weight.copy_(
                    torch.randn(module.weight.shape, generator=generator) * INIT_STD
                )
            elif isinstance(module, nn.BatchNorm2d):
                module.weight.copy_(
                    1.0 + torch.randn(module.weight.shape, generator=generator) * INIT_STD
                )
            if isinstance(module, (nn.Conv2d, nn.ConvTranspose2d, nn.BatchNorm2d)):
                if module.bias is not None:
                    module.bias.zero_()
    return model


def interpolate(
    real: torch.Tensor, fake: torch.Tensor, epsilon: torch.Tensor
) -> torch.Tensor:
    """Per-sample mix eps_i * real_i + (1 - eps_i) * fake_i.

    Raises:
        ShapeError: if real and fake differ in shape or epsilon is not one scalar per sample
    """
    if real.shape != fake.shape:
        raise ShapeError(
            f"Real batch {tuple(real.shape)} and fake batch {tuple(fake.shape)} differ"
        )
    if epsilon.numel() != real.shape[0]:
        raise ShapeError(
            f"Expected {real.shape[0]} epsilon values, got {epsilon.numel()}"
        )
    eps = epsilon.reshape(-1, *([1] * (real.dim() - 1))).to(real.dtype)
    return eps * real + (1 - eps) * fake


def gradient_penalty(
    critic: nn.Module, mixed: torch.Tensor, step: Optional[int] = None
) -> torch.Tensor:
    """Mean over the batch of (||grad_x critic(x)||_2 - 1)^2, unweighted.

    The norm runs over each sample's flattened pixels. The returned tensor
    keeps its graph so the penalty can be backpropagated into the critic.

    Raises:
        TrainingInstabilityError: if the input gradient is non-finite
    """
    if not mixed.requires_grad:
        mixed = mixed.detach().requires_grad_(True)
    scores = critic(mixed)
    gradient = torch.autograd.grad(
        outputs=scores,
        inputs=mixed,
        grad_outputs=torch.ones_like(scores),
        create_graph=True,
        retain_graph=True,
        allow_unused=True,
    )[0]
    if gradient is None:
        # Critic output does not depend on its input.
        gradient = torch.zeros_like(mixed)
    if not torch.isfinite(gradient).all():
        raise TrainingInstabilityError(
            f"Non-finite critic input gradient at step {step}", step=step or 0
        )
    norm = gradient.reshape(gradient.shape[0], -1).norm(2, dim=1)
    return ((norm - 1) ** 2).mean()


def critic_loss(
    real_scores: torch.Tensor,
    fake_scores: torch.Tensor,
    gp: Union[torch.Tensor, float],
    gp_weight: float,
) -> torch.Tensor:
    """mean(fake) - mean(real) + gp_weight * gp, minimized by the critic."""
    if real_scores.shape != fake_scores.shape:
        raise ShapeError("Real and fake score vectors differ in length")
    return fake_scores.mean() - real_scores.mean() + gp_weight * gp


def generator_loss(fake_scores: torch.Tensor) -> torch.Tensor:
    """-mean(fake), minimized by the generator."""
    if fake_scores.numel() == 0:
        raise ShapeError("Generator loss needs at least one score")
    return -fake_scores.mean()


def wasserstein_estimate(real_scores: torch.Tensor, fake_scores: torch.Tensor) -> float:
    """Mean real score minus mean fake score."""
    return float(real_scores.mean() - fake_scores.mean())
