"""Procedural talking heads with known pose and mouth tracks.

Every frame is a supersampled raster of a parametric face; the paired audio is
an identity-pitched tone whose amplitude follows the mouth opening, so the
audio-visual correspondence is exact by construction.
"""

import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter1d, uniform_filter1d

from pcavs.config import FPS, SAMPLE_RATE, SAMPLES_PER_FRAME
from pcavs.errors import InvalidArgumentError
from pcavs.models import SceneParams, SyntheticClip, Waveform

logger = logging.getLogger("pcavs.synth")

SUPERSAMPLE = 3
MOUTH_INTERIOR = np.array([0.35, 0.02, 0.05], dtype=np.float64)
LIP_COLOR = np.array([0.72, 0.30, 0.32], dtype=np.float64)
_MOUTH_TOL = 0.15

# track ranges
YAW_RANGE = 0.55
SHIFT_FRACTION = 0.06
SCALE_SPREAD = 0.2
POSE_SIGMA = 3.0
MOUTH_SIGMA = 1.0
ENVELOPE_SMOOTH = 64  # samples
HARMONIC_GAIN = 0.3


@dataclass(frozen=True)
class Appearance:
    face_color: tuple[float, float, float]
    eye_color: tuple[float, float, float]
    eye_radius: float
    face_aspect: float
    background: tuple[float, float, float]
    pitch_fraction: float


def identity_appearance(identity_id: int) -> Appearance:
    """Left/right symmetric appearance fixed by the identity id."""
    rng = np.random.default_rng([0x5EED, identity_id])
    face = rng.uniform([0.62, 0.45, 0.35], [0.95, 0.80, 0.70])
    eye = rng.uniform([0.05, 0.05, 0.10], [0.20, 0.30, 0.45])
    bg = rng.uniform([0.20, 0.40, 0.55], [0.55, 0.75, 0.95])
    return Appearance(
        face_color=tuple(float(c) for c in face),
        eye_color=tuple(float(c) for c in eye),
        eye_radius=float(rng.uniform(0.055, 0.095)),
        face_aspect=float(rng.uniform(0.78, 1.05)),
        background=tuple(float(c) for c in bg),
        pitch_fraction=float(rng.uniform(0.0, 1.0)),
    )


def _ellipse(u, v, cx, cy, rx, ry) -> np.ndarray:
    if rx <= 0 or ry <= 0:
        return np.zeros(u.shape, dtype=bool)
    return ((u - cx) / rx) ** 2 + ((v - cy) / ry) ** 2 <= 1.0


def render_frame(scene: SceneParams, size: int) -> np.ndarray:
    """Rasterise one face; H x W x 3 float32 in [0, 1]."""
    if size < 4:
        raise InvalidArgumentError(f"frame size must be >= 4, got {size}")
    look = identity_appearance(scene.identity_id)
    n = size * SUPERSAMPLE
    coords = (np.arange(n) + 0.5) / n * 2.0 - 1.0
    u, v = np.meshgrid(coords, coords)

    s = scene.scale
    cx = 2.0 * scene.translation[0] / size
    cy = 2.0 * scene.translation[1] / size
    squash = 1.0 - 0.35 * abs(scene.yaw)
    a = 0.50 * s * look.face_aspect * squash
    b = 0.66 * s
    turn = math.sin(scene.yaw)
    fx = cx + 0.45 * a * turn  # features slide toward the turned side

    img = np.empty((n, n, 3), dtype=np.float64)
    img[:] = look.background
    img[_ellipse(u, v, cx, cy, a, b)] = look.face_color

    for side in (-1.0, 1.0):
        ex = fx + side * 0.38 * a * (1.0 - 0.3 * side * turn)
        r = look.eye_radius * s * (1.0 + 0.25 * side * turn)
        img[_ellipse(u, v, ex, cy - 0.18 * b, r, r * 0.8)] = look.eye_color

    nose = np.array(look.face_color) * 0.78
    img[_ellipse(u, v, cx + 0.62 * a * turn, cy + 0.08 * b, 0.06 * s, 0.11 * s)] = nose

    mx, my, mw = fx, cy + 0.42 * b, 0.30 * a
    img[_ellipse(u, v, mx, my, mw, 0.035 * s)] = LIP_COLOR
    if scene.mouth_open > 0:
        img[_ellipse(u, v, mx, my, mw * 0.9, 0.20 * b * scene.mouth_open)] = MOUTH_INTERIOR

    frame = img.reshape(size, SUPERSAMPLE, size, SUPERSAMPLE, 3).mean(axis=(1, 3))
    return frame.astype(np.float32)


def mouth_area(frame: np.ndarray) -> float:
    """Fraction of pixels showing the mouth interior."""
    f = np.asarray(frame, dtype=np.float64)
    if f.ndim != 3 or f.shape[2] != 3:
        raise InvalidArgumentError(f"expected an HxWx3 frame, got shape {f.shape}")
    return float((np.abs(f - MOUTH_INTERIOR).max(axis=2) < _MOUTH_TOL).mean())


def _smooth_noise(rng: np.random.Generator, k: int, sigma: float) -> np.ndarray:
    """Low-pass Gaussian noise with roughly unit variance."""
    z = gaussian_filter1d(rng.standard_normal(k), sigma, mode="reflect")
    return z * math.sqrt(2.0 * math.sqrt(math.pi) * sigma)


def sample_tracks(rng: np.random.Generator, k: int, size: int) -> tuple[np.ndarray, np.ndarray]:
    """pose_track (k x [yaw, tx, ty, scale]) and mouth_track (k), all inside SceneParams ranges."""
    yaw = YAW_RANGE * np.tanh(_smooth_noise(rng, k, POSE_SIGMA))
    tx = SHIFT_FRACTION * size * np.tanh(_smooth_noise(rng, k, POSE_SIGMA))
    ty = SHIFT_FRACTION * size * np.tanh(_smooth_noise(rng, k, POSE_SIGMA))
    scale = 1.0 + SCALE_SPREAD * np.tanh(_smooth_noise(rng, k, POSE_SIGMA))
    mouth = np.clip(0.5 * (1.0 + np.tanh(1.5 * _smooth_noise(rng, k, MOUTH_SIGMA))), 0.0, 1.0)
    return np.stack([yaw, tx, ty, scale], axis=1), mouth


def identity_pitch(identity_id: int, pitch_min: float = 200.0, pitch_max: float = 400.0) -> float:
    return pitch_min + (pitch_max - pitch_min) * identity_appearance(identity_id).pitch_fraction


def synthesize_audio(mouth_track: np.ndarray, pitch: float, phase: float = 0.0) -> Waveform:
    """Tone plus second harmonic, amplitude-modulated by the per-frame mouth opening."""
    envelope = np.repeat(np.asarray(mouth_track, dtype=np.float64), SAMPLES_PER_FRAME)
    envelope = uniform_filter1d(envelope, ENVELOPE_SMOOTH, mode="nearest")
    t = np.arange(len(envelope)) / SAMPLE_RATE
    carrier = np.sin(2 * np.pi * pitch * t + phase) + HARMONIC_GAIN * np.sin(4 * np.pi * pitch * t + phase)
    return Waveform(samples=0.6 * envelope * carrier / (1.0 + HARMONIC_GAIN), sample_rate=SAMPLE_RATE)


def make_clip(
    identity_id: int,
    rng_seed: int,
    k: int,
    size: int = 64,
    pitch_min: float = 200.0,
    pitch_max: float = 400.0,
) -> SyntheticClip:
    """K frames with smooth random pose, a random mouth sequence, and the matching audio."""
    if k < 2:
        raise InvalidArgumentError(f"a clip needs at least 2 frames, got {k}")
    rng = np.random.default_rng([rng_seed, identity_id])
    pose, mouth = sample_tracks(rng, k, size)
    frames = np.stack([
        render_frame(
            SceneParams(
                identity_id=identity_id,
                yaw=float(p[0]),
                translation=(float(p[1]), float(p[2])),
                scale=float(p[3]),
                mouth_open=float(m),
            ),
            size,
        )
        for p, m in zip(pose, mouth)
    ])
    wave = synthesize_audio(mouth, identity_pitch(identity_id, pitch_min, pitch_max), float(rng.uniform(0, 2 * np.pi)))
    return SyntheticClip(
        frames=frames, waveform=wave, identity_id=identity_id, pose_track=pose, mouth_track=mouth, fps=FPS
    )
