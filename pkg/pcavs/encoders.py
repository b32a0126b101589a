"""Encoders and mappings of the three latent spaces.

E_n (non-identity) feeds two mappings: mp_c into the speech-content space
shared with the audio encoder, and mp_p into the pose code. E_i produces the
identity feature plus classification logits.
"""

import logging

import numpy as np
import torch
from torch import nn

from pcavs.audio import normalize_bands
from pcavs.config import N_MELS, WINDOW_HOPS, ModelConfig
from pcavs.errors import InvalidArgumentError
from pcavs.models import AudioWindow, LatentBundle
from pcavs.utils import images_to_tensor

logger = logging.getLogger("pcavs.encoders")


def _conv_stack(in_channels: int, widths, kernel: int) -> nn.Sequential:
    layers: list[nn.Module] = []
    for w in widths:
        layers += [nn.Conv2d(in_channels, w, kernel, stride=2, padding=1), nn.LeakyReLU(0.2)]
        in_channels = w
    return nn.Sequential(*layers)


def _out_len(n: int, kernel: int, stages: int) -> int:
    for _ in range(stages):
        n = (n + 2 - kernel) // 2 + 1
    return n


class ConvEncoder(nn.Module):
    """Strided conv trunk then one affine projection. No normalisation layers."""

    def __init__(self, in_channels: int, height: int, width: int, widths, out_dim: int, kernel: int = 4):
        super().__init__()
        self.in_shape = (in_channels, height, width)
        self.trunk = _conv_stack(in_channels, widths, kernel)
        h, w = _out_len(height, kernel, len(widths)), _out_len(width, kernel, len(widths))
        if h < 1 or w < 1:
            raise InvalidArgumentError(f"input {height}x{width} too small for {len(widths)} stride-2 stages")
        self.proj = nn.Linear(widths[-1] * h * w, out_dim)
        self.out_dim = out_dim

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if tuple(x.shape[1:]) != self.in_shape:
            raise InvalidArgumentError(f"expected input N x {self.in_shape}, got {tuple(x.shape)}")
        return self.proj(self.trunk(x).flatten(1))


class ContentMapping(nn.Module):
    """mp_c: stacked affine layers with leaky-ReLU between them; `linear=True` drops the activations."""

    def __init__(self, d_n: int, l_c: int, layers: int = 2):
        super().__init__()
        dims = [d_n] + [l_c] * max(1, layers)
        self.layers = nn.ModuleList(nn.Linear(a, b) for a, b in zip(dims[:-1], dims[1:]))
        self.act = nn.LeakyReLU(0.2)
        self.linear = False
        self.in_dim = d_n

    def forward(self, f_n: torch.Tensor) -> torch.Tensor:
        if f_n.shape[-1] != self.in_dim:
            raise InvalidArgumentError(f"map_content expects length {self.in_dim}, got {f_n.shape[-1]}")
        x = f_n
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1 and not self.linear:
                x = self.act(x)
        return x


class PoseMapping(nn.Module):
    """mp_p: a single affine map onto the pose code."""

    def __init__(self, d_n: int, pose_dim: int):
        super().__init__()
        self.fc = nn.Linear(d_n, pose_dim)
        self.in_dim = d_n

    def forward(self, f_n: torch.Tensor) -> torch.Tensor:
        if f_n.shape[-1] != self.in_dim:
            raise InvalidArgumentError(f"map_pose expects length {self.in_dim}, got {f_n.shape[-1]}")
        return self.fc(f_n)


class IdentityEncoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.features = ConvEncoder(3, cfg.image_size, cfg.image_size, cfg.encoder_widths, cfg.d_i)
        self.head = nn.Linear(cfg.d_i, cfg.num_identities)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        f_i = self.features(x)
        return f_i, self.head(f_i)


class AVSEncoders(nn.Module):
    """All encoders and mappings, one module so they share a state dict and an optimizer."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(cfg.init_seed)
            self.non_identity = ConvEncoder(3, cfg.image_size, cfg.image_size, cfg.encoder_widths, cfg.d_n)
            self.content = ContentMapping(cfg.d_n, cfg.l_c, cfg.content_layers)
            self.pose = PoseMapping(cfg.d_n, cfg.pose_dim)
            self.identity = IdentityEncoder(cfg)
            self.audio = ConvEncoder(1, N_MELS, WINDOW_HOPS, cfg.audio_widths, cfg.l_c, kernel=3)

    def visual_content(self, images: torch.Tensor) -> torch.Tensor:
        return self.content(self.non_identity(images))

    def pose_code(self, images: torch.Tensor) -> torch.Tensor:
        return self.pose(self.non_identity(images))

    def audio_content(self, windows: torch.Tensor) -> torch.Tensor:
        """windows: N x 80 x 20 raw log-mel bands."""
        return self.audio(normalize_bands(windows).unsqueeze(1))

    def latents(self, reference: torch.Tensor, target: torch.Tensor, windows: torch.Tensor) -> LatentBundle:
        """f_i from the reference frame, f_c from audio, f_p from the (augmented) target frame."""
        f_i, _ = self.identity(reference)
        return LatentBundle(f_i=f_i, f_c=self.audio_content(windows), f_p=self.pose_code(target))


def _image_batch(images, size: int) -> torch.Tensor:
    x = images_to_tensor(images) if isinstance(images, np.ndarray) else images
    if x.ndim != 4 or tuple(x.shape[1:]) != (3, size, size):
        raise InvalidArgumentError(f"expected {size}x{size} RGB images, got shape {tuple(x.shape)}")
    return x


def _param_device(module: nn.Module) -> torch.device:
    return next(module.parameters()).device


def encode_non_identity(images, encoders: AVSEncoders) -> torch.Tensor:
    """HxWx3 / NxHxWx3 arrays in [0, 1] or NCHW tensors in [-1, 1] -> N x d_n."""
    x = _image_batch(images, encoders.cfg.image_size).to(_param_device(encoders))
    return encoders.non_identity(x)


def map_content(f_n: torch.Tensor, encoders: AVSEncoders) -> torch.Tensor:
    return encoders.content(f_n)


def map_pose(f_n: torch.Tensor, encoders: AVSEncoders) -> torch.Tensor:
    return encoders.pose(f_n)


def encode_identity(images, encoders: AVSEncoders) -> tuple[torch.Tensor, torch.Tensor]:
    x = _image_batch(images, encoders.cfg.image_size).to(_param_device(encoders))
    return encoders.identity(x)


def encode_audio(windows, encoders: AVSEncoders) -> torch.Tensor:
    """AudioWindow, 80x20 array, or N x 80 x 20 stack -> N x l_c."""
    if isinstance(windows, AudioWindow):
        windows = windows.bands
    w = torch.as_tensor(np.asarray(windows) if not torch.is_tensor(windows) else windows, dtype=torch.float32)
    if w.ndim == 2:
        w = w.unsqueeze(0)
    if w.ndim != 3 or tuple(w.shape[1:]) != (N_MELS, WINDOW_HOPS):
        raise InvalidArgumentError(f"audio windows must be {N_MELS} x {WINDOW_HOPS}, got {tuple(w.shape)}")
    return encoders.audio_content(w.to(_param_device(encoders)))
