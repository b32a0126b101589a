"""Waveform -> log-mel spectrogram -> 0.2 s conditioning windows."""

import logging
import math
from functools import lru_cache
from pathlib import Path

import numpy as np
import torch
import torchaudio.functional as AF
from scipy.io import wavfile
from torchaudio.transforms import MelSpectrogram as TorchMelSpectrogram

from pcavs.config import (
    F_MAX, HOP_LENGTH, HOPS_PER_FRAME, LOG_FLOOR, N_FFT, N_MELS, SAMPLE_RATE, WINDOW_CENTER, WINDOW_HOPS,
)
from pcavs.errors import InvalidArgumentError
from pcavs.models import AudioWindow, MelSpectrogram, Waveform

logger = logging.getLogger("pcavs.audio")

LOG_FLOOR_VALUE = math.log(LOG_FLOOR)
HOPS_PER_SECOND = SAMPLE_RATE / HOP_LENGTH  # 100


class LogMel(TorchMelSpectrogram):
    """Magnitude mel spectrogram (HTK scale, Hann window, centred constant padding), then log(x + floor)."""

    def __init__(self):
        super().__init__(
            sample_rate=SAMPLE_RATE,
            n_fft=N_FFT,
            win_length=N_FFT,
            hop_length=HOP_LENGTH,
            f_min=0.0,
            f_max=F_MAX,
            n_mels=N_MELS,
            window_fn=torch.hann_window,
            power=1.0,
            center=True,
            pad_mode="constant",
            norm=None,
            mel_scale="htk",
        )

    def forward(self, waveform: torch.Tensor) -> torch.Tensor:
        return torch.log(super().forward(waveform) + LOG_FLOOR)


@lru_cache(maxsize=1)
def _log_mel() -> LogMel:
    return LogMel().to(torch.float64).eval()


def _check_wave(wave: Waveform) -> None:
    if wave.sample_rate != SAMPLE_RATE:
        raise InvalidArgumentError(
            f"mel_spectrogram needs {SAMPLE_RATE} Hz audio, got {wave.sample_rate} Hz (resample first)"
        )
    if len(wave.samples) == 0:
        raise InvalidArgumentError("cannot compute a spectrogram of an empty waveform")


def mel_spectrogram(wave: Waveform) -> MelSpectrogram:
    """80 x T log-mel with T = floor(N / 160) + 1."""
    _check_wave(wave)
    with torch.no_grad():
        bands = _log_mel()(torch.from_numpy(wave.samples)).numpy()
    return MelSpectrogram(bands=bands, hop=HOP_LENGTH, fft_window=N_FFT, sample_rate=SAMPLE_RATE)


def center_hop(center_time: float) -> int:
    """Hop index of a time in seconds, rounding halves up."""
    return int(math.floor(center_time * HOPS_PER_SECOND + 0.5))


def extract_window(mel: MelSpectrogram, center_time: float) -> AudioWindow:
    """The 20-hop slice [c - 10, c + 10) around hop c; out-of-range hops read as the log floor."""
    if center_time < 0:
        raise InvalidArgumentError(f"center_time must be >= 0, got {center_time}")
    c = center_hop(center_time)
    lo, hi = c - WINDOW_CENTER, c - WINDOW_CENTER + WINDOW_HOPS
    out = np.full((N_MELS, WINDOW_HOPS), LOG_FLOOR_VALUE, dtype=mel.bands.dtype)
    src_lo, src_hi = max(lo, 0), min(hi, mel.frames)
    if src_hi > src_lo:
        out[:, src_lo - lo:src_hi - lo] = mel.bands[:, src_lo:src_hi]
    return AudioWindow(bands=out, center_time=float(center_time))


def frame_windows(mel: MelSpectrogram, frame_indices) -> np.ndarray:
    """Windows centred on video frames (frame k at k / 25 s), stacked as n x 80 x 20 float32."""
    idx = np.asarray(frame_indices, dtype=np.int64)
    if idx.size and idx.min() < 0:
        raise InvalidArgumentError("frame indices must be >= 0")
    centers = idx * HOPS_PER_FRAME
    right = int(centers.max()) + WINDOW_HOPS if idx.size else WINDOW_HOPS
    padded = np.full((N_MELS, WINDOW_CENTER + max(mel.frames, right)), LOG_FLOOR_VALUE, dtype=np.float64)
    padded[:, WINDOW_CENTER:WINDOW_CENTER + mel.frames] = mel.bands
    out = np.stack([padded[:, c:c + WINDOW_HOPS] for c in centers]) if idx.size else np.empty((0, N_MELS, WINDOW_HOPS))
    return out.astype(np.float32)


def normalize_bands(bands: np.ndarray | torch.Tensor):
    """Scale log-mel values so the floor maps to -1 and log(1) to 0."""
    return bands / -LOG_FLOOR_VALUE


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_center_frequencies(n_mels: int = N_MELS, f_min: float = 0.0, f_max: float = F_MAX) -> np.ndarray:
    """Centre frequency in Hz of every triangular HTK filter."""
    points = np.linspace(hz_to_mel(f_min), hz_to_mel(f_max), n_mels + 2)
    return mel_to_hz(points[1:-1])


def resample(wave: Waveform, target_rate: int = SAMPLE_RATE) -> Waveform:
    """Windowed-sinc resampling."""
    if target_rate <= 0:
        raise InvalidArgumentError(f"target_rate must be > 0, got {target_rate}")
    if wave.sample_rate == target_rate:
        return wave
    out = AF.resample(torch.from_numpy(wave.samples), wave.sample_rate, target_rate)
    logger.debug(f"resampled {wave.sample_rate} -> {target_rate} Hz samples={len(out)}")
    return Waveform(samples=out.numpy(), sample_rate=target_rate)


def read_wav(path: str | Path) -> Waveform:
    """Mono 16-bit PCM WAV -> float waveform in [-1, 1]."""
    p = Path(path)
    if not p.is_file():
        raise InvalidArgumentError(f"audio file not found: {p}")
    rate, data = wavfile.read(p)
    if data.ndim != 1:
        raise InvalidArgumentError(f"{p}: expected mono audio, got {data.shape[1]} channels")
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif np.issubdtype(data.dtype, np.floating):
        samples = data.astype(np.float64)
    else:
        raise InvalidArgumentError(f"{p}: unsupported sample type {data.dtype}")
    return Waveform(samples=samples, sample_rate=int(rate))


def write_wav(path: str | Path, wave: Waveform) -> None:
    pcm = np.clip(np.rint(wave.samples * 32767.0), -32768, 32767).astype(np.int16)
    wavfile.write(Path(path), wave.sample_rate, pcm)
