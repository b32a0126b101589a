"""Modulated-convolution generator driven by the concatenated latent f_cat.

A learned constant stem is upsampled by a stack of blocks, each a nearest 2x
upsample, a 3x3 convolution whose kernel is modulated by a per-block vector
from the mapping MLP and then demodulated, and a leaky ReLU. A modulated (not
demodulated) 1x1 convolution projects to RGB. There are no skip connections
from any encoder.
"""

import logging
import math

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from pcavs.config import ModelConfig
from pcavs.errors import InvalidArgumentError
from pcavs.utils import tensor_to_images

logger = logging.getLogger("pcavs.generator")


def demodulate(w: torch.Tensor, m: torch.Tensor, epsilon: float = 1e-8) -> torch.Tensor:
    """Modulate kernel w (out, in, *spatial) by m (in,) or (B, in), then renormalise every output channel.

    w^m[y, x, z] = m[x] w[y, x, z] / sqrt(sum_{x, z} (m[x] w[y, x, z])^2 + epsilon).
    Batched m gives a (B, out, in, *spatial) result.
    """
    if epsilon <= 0:
        raise InvalidArgumentError(f"epsilon must be > 0, got {epsilon}")
    if w.ndim < 2 or m.shape[-1] != w.shape[1]:
        raise InvalidArgumentError(
            f"modulation length {m.shape[-1]} does not match kernel input channels {w.shape[1] if w.ndim > 1 else '?'}"
        )
    spatial = w.ndim - 2
    wm = w * m.reshape(*m.shape[:-1], 1, m.shape[-1], *([1] * spatial))
    reduce_dims = tuple(range(-(spatial + 1), 0))
    return wm * torch.rsqrt(wm.pow(2).sum(dim=reduce_dims, keepdim=True) + epsilon)


class ModulatedConv2d(nn.Module):
    def __init__(self, in_channels: int, out_channels: int, kernel_size: int, demod: bool = True, epsilon: float = 1e-8):
        super().__init__()
        self.in_channels, self.out_channels, self.kernel_size = in_channels, out_channels, kernel_size
        self.weight = nn.Parameter(torch.randn(out_channels, in_channels, kernel_size, kernel_size))
        self.bias = nn.Parameter(torch.zeros(out_channels))
        self.scale = 1.0 / math.sqrt(in_channels * kernel_size ** 2)
        self.demod = demod
        self.epsilon = epsilon

    def forward(self, x: torch.Tensor, style: torch.Tensor) -> torch.Tensor:
        batch, _, height, width = x.shape
        w = self.weight * self.scale
        if self.demod:
            w = demodulate(w, style, self.epsilon)
        else:
            w = w.unsqueeze(0) * style.reshape(batch, 1, self.in_channels, 1, 1)
        # one group per sample
        w = w.reshape(batch * self.out_channels, self.in_channels, self.kernel_size, self.kernel_size)
        out = F.conv2d(x.reshape(1, batch * self.in_channels, height, width), w,
                       padding=self.kernel_size // 2, groups=batch)
        return out.reshape(batch, self.out_channels, height, width) + self.bias.view(1, -1, 1, 1)


class ModulationMLP(nn.Module):
    """Shared two-layer trunk over f_cat plus one affine head per modulated layer, head bias starting at 1."""

    def __init__(self, latent_dim: int, hidden: int, head_dims):
        super().__init__()
        self.latent_dim = latent_dim
        self.trunk = nn.Sequential(
            nn.Linear(latent_dim, hidden), nn.LeakyReLU(0.2),
            nn.Linear(hidden, hidden), nn.LeakyReLU(0.2),
        )
        self.heads = nn.ModuleList(nn.Linear(hidden, d) for d in head_dims)
        for head in self.heads:
            nn.init.ones_(head.bias)

    def forward(self, f_cat: torch.Tensor) -> list[torch.Tensor]:
        h = self.trunk(f_cat)
        return [head(h) for head in self.heads]

    def block(self, f_cat: torch.Tensor, index: int) -> torch.Tensor:
        if not 0 <= index < len(self.heads):
            raise InvalidArgumentError(f"block index {index} out of range [0, {len(self.heads)})")
        return self.heads[index](self.trunk(f_cat))


def _check_latent(f_cat: torch.Tensor, latent_dim: int) -> torch.Tensor:
    if f_cat.ndim == 1:
        f_cat = f_cat.unsqueeze(0)
    if f_cat.ndim != 2 or f_cat.shape[1] != latent_dim:
        raise InvalidArgumentError(f"f_cat must have length {latent_dim}, got shape {tuple(f_cat.shape)}")
    if torch.isnan(f_cat).any():
        raise InvalidArgumentError("f_cat contains NaN")
    return f_cat


class _GeneratorBase(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.latent_dim = cfg.latent_dim
        self.channels = list(cfg.generator_channels)
        self.const = nn.Parameter(torch.randn(1, self.channels[0], cfg.stem_size, cfg.stem_size))

    def _crop(self, x: torch.Tensor) -> torch.Tensor:
        size = self.cfg.crop_to
        if not size or size == x.shape[-1]:
            return x
        top = (x.shape[-2] - size) // 2
        left = (x.shape[-1] - size) // 2
        return x[..., top:top + size, left:left + size]


class ModulatedGenerator(_GeneratorBase):
    def __init__(self, cfg: ModelConfig):
        super().__init__(cfg)
        ch = self.channels
        self.convs = nn.ModuleList(
            ModulatedConv2d(ch[i], ch[i + 1], 3, demod=True, epsilon=cfg.epsilon) for i in range(cfg.generator_blocks)
        )
        self.to_rgb = ModulatedConv2d(ch[-1], 3, 1, demod=False, epsilon=cfg.epsilon)
        self.mlp = ModulationMLP(cfg.latent_dim, cfg.mlp_hidden, ch)

    def forward(self, f_cat: torch.Tensor) -> torch.Tensor:
        f_cat = _check_latent(f_cat, self.latent_dim)
        styles = self.mlp(f_cat)
        x = self.const.expand(f_cat.shape[0], -1, -1, -1)
        for conv, style in zip(self.convs, styles):
            x = F.interpolate(x, scale_factor=2, mode="nearest")
            x = F.leaky_relu(conv(x, style), 0.2)
        return self._crop(torch.tanh(self.to_rgb(x, styles[-1])))


class AdaINGenerator(_GeneratorBase):
    """Ablation variant: plain convolutions with adaptive instance normalisation instead of weight modulation."""

    def __init__(self, cfg: ModelConfig):
        super().__init__(cfg)
        ch = self.channels
        self.convs = nn.ModuleList(nn.Conv2d(ch[i], ch[i + 1], 3, padding=1) for i in range(cfg.generator_blocks))
        self.to_rgb = nn.Conv2d(ch[-1], 3, 1)
        self.mlp = ModulationMLP(cfg.latent_dim, cfg.mlp_hidden, [2 * c for c in ch[1:]])
        for head, c in zip(self.mlp.heads, ch[1:]):
            nn.init.zeros_(head.bias[c:])

    def forward(self, f_cat: torch.Tensor) -> torch.Tensor:
        f_cat = _check_latent(f_cat, self.latent_dim)
        styles = self.mlp(f_cat)
        x = self.const.expand(f_cat.shape[0], -1, -1, -1)
        for conv, style in zip(self.convs, styles):
            x = F.interpolate(x, scale_factor=2, mode="nearest")
            x = F.instance_norm(conv(x))
            gamma, beta = style.chunk(2, dim=1)
            x = F.leaky_relu(x * gamma[..., None, None] + beta[..., None, None], 0.2)
        return self._crop(torch.tanh(self.to_rgb(x)))


def build_generator(cfg: ModelConfig) -> _GeneratorBase:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.init_seed + 1)
        if cfg.generator_style == "adain":
            return AdaINGenerator(cfg)
        return ModulatedGenerator(cfg)


def modulation_vector(f_cat: torch.Tensor, block_index: int, generator: _GeneratorBase) -> torch.Tensor:
    """The modulation vector M for one block; its length is that block's input channel count."""
    f_cat = _check_latent(torch.as_tensor(f_cat, dtype=torch.float32), generator.latent_dim)
    return generator.mlp.block(f_cat, block_index)


def generate(f_cat, generator: _GeneratorBase) -> np.ndarray:
    """f_cat (latent_dim,) or (N, latent_dim) -> N x H x W x 3 float32 images in [0, 1]."""
    x = torch.as_tensor(f_cat, dtype=torch.float32)
    with torch.no_grad():
        out = generator(x.to(next(generator.parameters()).device))
    return tensor_to_images(out)
