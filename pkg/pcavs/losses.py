"""Training objective: multi-scale adversarial loss, discriminator feature matching,
frozen-network perceptual loss, identity cross-entropy, and their weighted total.

A pyramid is any callable mapping an NCHW batch to a list of
``(features, logits)`` pairs, one per scale.
"""

import logging
import math
from dataclasses import dataclass
from pathlib import Path

import torch
import torch.nn.functional as F
from torch import nn

from pcavs.config import LossConfig
from pcavs.errors import InvalidArgumentError

logger = logging.getLogger("pcavs.losses")

COMPONENTS = ("L_GAN", "L_L1", "L_vgg", "L_c", "L_i")


class PatchDiscriminator(nn.Module):
    def __init__(self, in_channels: int, channels: int, layers: int):
        super().__init__()
        blocks = []
        c_in = in_channels
        for i in range(layers):
            c_out = min(channels * 2 ** i, 256)
            blocks.append(nn.Sequential(nn.Conv2d(c_in, c_out, 4, stride=2, padding=1), nn.LeakyReLU(0.2)))
            c_in = c_out
        self.blocks = nn.ModuleList(blocks)
        self.head = nn.Conv2d(c_in, 1, 3, padding=1)

    def forward(self, x: torch.Tensor) -> tuple[list[torch.Tensor], torch.Tensor]:
        feats = []
        for block in self.blocks:
            x = block(x)
            feats.append(x)
        return feats, self.head(x)


class DiscriminatorPyramid(nn.Module):
    """N_D patch discriminators; scale n sees the input downsampled n times by 2."""

    def __init__(self, cfg: LossConfig, in_channels: int = 3, seed: int = 0):
        super().__init__()
        if cfg.num_scales < 1:
            raise InvalidArgumentError(f"num_scales must be >= 1, got {cfg.num_scales}")
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed + 2)
            self.scales = nn.ModuleList(
                PatchDiscriminator(in_channels, cfg.disc_channels, cfg.disc_layers) for _ in range(cfg.num_scales)
            )

    def forward(self, x: torch.Tensor) -> list[tuple[list[torch.Tensor], torch.Tensor]]:
        outputs = []
        for i, disc in enumerate(self.scales):
            if i:
                x = F.avg_pool2d(x, 3, stride=2, padding=1, count_include_pad=False)
            outputs.append(disc(x))
        return outputs


class PerceptualNet(nn.Module):
    """Frozen conv feature extractor with N_P tapped stages; randomly initialised from a fixed seed
    unless a state dict is supplied."""

    def __init__(self, layers: int = 4, seed: int = 1234, weights: str = ""):
        super().__init__()
        if layers < 1:
            raise InvalidArgumentError(f"perceptual layers must be >= 1, got {layers}")
        widths = [min(32 * 2 ** i, 256) for i in range(layers)]
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            stages, c_in = [], 3
            for i, w in enumerate(widths):
                stride = 1 if i == 0 else 2
                conv = nn.Conv2d(c_in, w, 3, stride=stride, padding=1)
                nn.init.kaiming_normal_(conv.weight, nonlinearity="relu")
                nn.init.zeros_(conv.bias)
                stages.append(nn.Sequential(conv, nn.ReLU()))
                c_in = w
            self.stages = nn.ModuleList(stages)
        if weights:
            path = Path(weights)
            if path.is_file():
                self.load_state_dict(torch.load(path, map_location="cpu", weights_only=True))
                logger.info(f"perceptual weights loaded path={path}")
            else:
                logger.warning(f"perceptual weights not found path={path}; using seeded random features")
        self.requires_grad_(False)
        self.eval()

    def train(self, mode: bool = True):
        # stays in eval mode for the whole run
        return super().train(False)

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        taps = []
        for stage in self.stages:
            x = stage(x)
            taps.append(x)
        return taps


@dataclass(frozen=True)
class LossWeights:
    lambda_1: float = 1.0
    lambda_v: float = 1.0
    lambda_c: float = 1.0
    lambda_i: float = 1.0

    def __post_init__(self):
        for name in ("lambda_1", "lambda_v", "lambda_c", "lambda_i"):
            if getattr(self, name) < 0:
                raise InvalidArgumentError(f"{name} must be >= 0, got {getattr(self, name)}")

    @classmethod
    def from_config(cls, cfg: LossConfig) -> "LossWeights":
        return cls(cfg.lambda_l1, cfg.lambda_vgg, cfg.lambda_c, cfg.lambda_i)


def _check_pair(real: torch.Tensor, fake: torch.Tensor) -> None:
    if real.shape != fake.shape:
        raise InvalidArgumentError(f"image shapes differ: {tuple(real.shape)} vs {tuple(fake.shape)}")


def adversarial_from_logits(real_logits, fake_logits, side: str) -> torch.Tensor:
    """Sum over scales of the vanilla GAN objective written with softplus on logits."""
    if side == "discriminator":
        return sum(F.softplus(-r).mean() + F.softplus(f).mean() for r, f in zip(real_logits, fake_logits))
    if side == "generator":
        return sum(F.softplus(-f).mean() for f in fake_logits)
    raise InvalidArgumentError(f"side must be 'generator' or 'discriminator', got {side!r}")


def feature_matching_from_outputs(real_out, fake_out) -> torch.Tensor:
    total = 0.0
    for (real_feats, _), (fake_feats, _) in zip(real_out, fake_out):
        for r, f in zip(real_feats, fake_feats):
            total = total + (r.detach() - f).abs().mean()
    return total


def gan_loss(real: torch.Tensor, fake: torch.Tensor, pyramid, side: str) -> torch.Tensor:
    """Discriminator side: sum_n -[log D_n(real) + log(1 - D_n(fake))]; generator side: sum_n -log D_n(fake)."""
    _check_pair(real, fake)
    fake_out = pyramid(fake)
    real_logits = [logits for _, logits in pyramid(real)] if side == "discriminator" else []
    return adversarial_from_logits(real_logits, [logits for _, logits in fake_out], side)


def feature_matching_l1(real: torch.Tensor, fake: torch.Tensor, pyramid) -> torch.Tensor:
    """Mean absolute difference of discriminator features, summed over scales and layers."""
    _check_pair(real, fake)
    with torch.no_grad():
        real_out = pyramid(real)
    return feature_matching_from_outputs(real_out, pyramid(fake))


def perceptual_loss(real: torch.Tensor, fake: torch.Tensor, net: PerceptualNet) -> torch.Tensor:
    _check_pair(real, fake)
    with torch.no_grad():
        real_taps = net(real)
    return sum((r - f).abs().mean() for r, f in zip(real_taps, net(fake)))


def identity_ce(logits: torch.Tensor, label) -> torch.Tensor:
    """Softmax cross-entropy, averaged over the batch."""
    logits = torch.as_tensor(logits)
    if logits.ndim == 1:
        logits = logits.unsqueeze(0)
    labels = torch.as_tensor(label, dtype=torch.long, device=logits.device).reshape(-1)
    if labels.shape[0] != logits.shape[0]:
        raise InvalidArgumentError(f"{labels.shape[0]} labels for {logits.shape[0]} rows of logits")
    num_classes = logits.shape[-1]
    if bool((labels < 0).any()) or bool((labels >= num_classes).any()):
        raise InvalidArgumentError(f"identity label out of range [0, {num_classes}): {labels.tolist()}")
    return F.cross_entropy(logits, labels)


def _value(x) -> float:
    return float(x.detach()) if torch.is_tensor(x) else float(x)


def total_loss(components: dict, weights: LossWeights):
    """L_GAN + λ1 L_L1 + λv L_vgg + λc L_c + λi L_i; a component may be a float or a tensor."""
    missing = [name for name in COMPONENTS if name not in components]
    if missing:
        raise InvalidArgumentError(f"missing loss components: {missing}")
    for name in COMPONENTS:
        if not math.isfinite(_value(components[name])):
            raise InvalidArgumentError(f"loss component {name} is not finite: {_value(components[name])}")
    return (
        components["L_GAN"]
        + weights.lambda_1 * components["L_L1"]
        + weights.lambda_v * components["L_vgg"]
        + weights.lambda_c * components["L_c"]
        + weights.lambda_i * components["L_i"]
    )
