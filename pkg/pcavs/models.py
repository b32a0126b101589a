"""Domain records passed between modules.

Plain dataclasses holding numpy arrays or torch tensors; validation lives in
``__post_init__`` so a malformed record never leaves its constructor.
"""

from dataclasses import dataclass

import numpy as np
import torch

from pcavs.config import FPS, N_MELS, SAMPLE_RATE, WINDOW_HOPS
from pcavs.errors import InvalidArgumentError


@dataclass(frozen=True)
class PointQuad:
    """Four (x, y) points ordered top-left, top-right, bottom-left, bottom-right."""

    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.shape != (4, 2):
            raise InvalidArgumentError(f"a quad needs exactly 4 (x, y) points, got shape {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise InvalidArgumentError("quad coordinates must be finite")
        object.__setattr__(self, "points", pts)

    def homogeneous(self) -> np.ndarray:
        """Rows [x, y, 1]; the 4x3 matrix [P, e]."""
        return np.hstack([self.points, np.ones((4, 1))])


@dataclass(frozen=True)
class Homography:
    m: np.ndarray
    source: PointQuad
    target: PointQuad
    residual: float


@dataclass(frozen=True)
class AugmentParams:
    r_s: float = 0.0
    r_t: float = 0.0
    color_gains: tuple[float, float, float] = (1.0, 1.0, 1.0)
    color_shifts: tuple[float, float, float] = (0.0, 0.0, 0.0)
    crop_fraction: float = 1.0
    rng_seed: int = 0
    warp_mode: str = "symmetric"

    def __post_init__(self):
        if self.r_s < 0:
            raise InvalidArgumentError(f"r_s must be >= 0, got {self.r_s}")
        if not 0.0 < self.crop_fraction <= 1.0:
            raise InvalidArgumentError(f"crop_fraction must be in (0, 1], got {self.crop_fraction}")
        if len(self.color_gains) != 3 or len(self.color_shifts) != 3:
            raise InvalidArgumentError("color_gains and color_shifts need one value per channel")
        if any(g <= 0 for g in self.color_gains):
            raise InvalidArgumentError(f"color_gains must be > 0, got {self.color_gains}")

    @property
    def is_neutral(self) -> bool:
        return (
            self.r_t == 0
            and self.crop_fraction == 1.0
            and tuple(self.color_gains) == (1.0, 1.0, 1.0)
            and tuple(self.color_shifts) == (0.0, 0.0, 0.0)
        )


@dataclass(frozen=True)
class Waveform:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        s = np.asarray(self.samples, dtype=np.float64)
        if s.ndim != 1:
            raise InvalidArgumentError(f"waveform must be 1-D, got shape {s.shape}")
        if self.sample_rate <= 0:
            raise InvalidArgumentError(f"sample_rate must be > 0, got {self.sample_rate}")
        if not np.all(np.isfinite(s)):
            raise InvalidArgumentError("waveform samples must be finite")
        object.__setattr__(self, "samples", s)

    @property
    def seconds(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass(frozen=True)
class MelSpectrogram:
    bands: np.ndarray  # N_MELS x T
    hop: int
    fft_window: int
    sample_rate: int

    def __post_init__(self):
        if self.bands.ndim != 2 or self.bands.shape[0] != N_MELS or self.bands.shape[1] < 1:
            raise InvalidArgumentError(f"mel must be {N_MELS} x T with T >= 1, got {self.bands.shape}")

    @property
    def frames(self) -> int:
        return self.bands.shape[1]


@dataclass(frozen=True)
class AudioWindow:
    bands: np.ndarray  # N_MELS x WINDOW_HOPS
    center_time: float

    def __post_init__(self):
        if self.bands.shape != (N_MELS, WINDOW_HOPS):
            raise InvalidArgumentError(
                f"audio window must be {N_MELS} x {WINDOW_HOPS}, got {self.bands.shape}"
            )


@dataclass(frozen=True)
class SceneParams:
    identity_id: int
    yaw: float = 0.0
    translation: tuple[float, float] = (0.0, 0.0)
    scale: float = 1.0
    mouth_open: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.mouth_open <= 1.0:
            raise InvalidArgumentError(f"mouth_open must be in [0, 1], got {self.mouth_open}")
        if not 0.7 <= self.scale <= 1.3:
            raise InvalidArgumentError(f"scale must be in [0.7, 1.3], got {self.scale}")
        if not -0.6 <= self.yaw <= 0.6:
            raise InvalidArgumentError(f"yaw must be in [-0.6, 0.6], got {self.yaw}")
        if self.identity_id < 0:
            raise InvalidArgumentError(f"identity_id must be >= 0, got {self.identity_id}")


@dataclass
class SyntheticClip:
    """K frames plus audio. Tracks are None for clips loaded from real footage."""

    frames: np.ndarray  # K x H x W x 3, float32 in [0, 1]
    waveform: Waveform
    identity_id: int
    pose_track: np.ndarray | None = None  # K x (yaw, tx, ty, scale)
    mouth_track: np.ndarray | None = None  # K
    fps: int = FPS
    name: str = ""

    def __post_init__(self):
        k = len(self.frames)
        if self.pose_track is not None and len(self.pose_track) != k:
            raise InvalidArgumentError(f"pose_track has {len(self.pose_track)} rows for {k} frames")
        if self.mouth_track is not None and len(self.mouth_track) != k:
            raise InvalidArgumentError(f"mouth_track has {len(self.mouth_track)} entries for {k} frames")

    @property
    def num_frames(self) -> int:
        return len(self.frames)

    @property
    def has_tracks(self) -> bool:
        return self.pose_track is not None and self.mouth_track is not None


@dataclass
class LatentBundle:
    f_i: torch.Tensor
    f_c: torch.Tensor
    f_p: torch.Tensor

    def __post_init__(self):
        for name in ("f_i", "f_c", "f_p"):
            if not torch.isfinite(getattr(self, name)).all():
                raise InvalidArgumentError(f"latent {name} contains non-finite values")

    @property
    def f_cat(self) -> torch.Tensor:
        return torch.cat([self.f_i, self.f_c, self.f_p], dim=-1)


@dataclass
class ContrastiveBatch:
    """Rows of content features. Batched form: positives B x l_c, negatives B x N x l_c."""

    positive_visual: torch.Tensor
    positive_audio: torch.Tensor
    negative_audios: torch.Tensor
    negative_visuals: torch.Tensor

    def __post_init__(self):
        if self.positive_visual.shape != self.positive_audio.shape:
            raise InvalidArgumentError(
                f"positive features differ in shape: {tuple(self.positive_visual.shape)} "
                f"vs {tuple(self.positive_audio.shape)}"
            )
        dim = self.positive_visual.shape[-1]
        for name in ("negative_audios", "negative_visuals"):
            neg = getattr(self, name)
            if neg.ndim < 2 or neg.shape[-2] < 1:
                raise InvalidArgumentError(f"{name} needs at least one negative row")
            if neg.shape[-1] != dim:
                raise InvalidArgumentError(f"{name} rows have length {neg.shape[-1]}, expected {dim}")


POSE_MODES = ("source", "fix", "zero")


@dataclass
class DriveRequest:
    identity_ref: np.ndarray  # H x W x 3
    audio: Waveform
    pose_mode: str = "fix"
    pose_clip: np.ndarray | None = None  # K x H x W x 3, source mode only
    output_fps: int = FPS

    def __post_init__(self):
        if self.pose_mode not in POSE_MODES:
            raise InvalidArgumentError(f"pose_mode must be one of {POSE_MODES}, got {self.pose_mode!r}")
        if self.pose_mode == "source" and (self.pose_clip is None or len(self.pose_clip) == 0):
            raise InvalidArgumentError("source pose mode needs a non-empty pose_clip")
        if self.output_fps != FPS:
            raise InvalidArgumentError(f"output_fps is fixed at {FPS}")
        if self.audio.sample_rate != SAMPLE_RATE:
            raise InvalidArgumentError(f"drive audio must be {SAMPLE_RATE} Hz, got {self.audio.sample_rate}")
        if self.num_frames < 1:
            raise InvalidArgumentError("audio must cover at least one video frame")

    @property
    def num_frames(self) -> int:
        return len(self.audio.samples) * self.output_fps // self.audio.sample_rate

