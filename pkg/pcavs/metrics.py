"""Desk-scale evaluation: image similarity, a lip-sync confidence proxy, linear pose probes,
and the JSON/CSV evaluation report.

The sync-confidence proxy scans audio offsets in the model's own content space;
its values are only comparable between checkpoints of this project.
"""

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from scipy.stats import pearsonr
from skimage.color import rgb2gray
from skimage.metrics import peak_signal_noise_ratio, structural_similarity
from sklearn.linear_model import Ridge
from sklearn.metrics import r2_score

from pcavs.audio import frame_windows, mel_spectrogram
from pcavs.config import RunConfig
from pcavs.corpus import Corpus, render_eval_clips
from pcavs.encoders import encode_audio, encode_non_identity, map_content
from pcavs.errors import ConfigurationError, InvalidArgumentError
from pcavs.inference import CHUNK, drive, pose_codes
from pcavs.models import DriveRequest, SyntheticClip, Waveform
from pcavs.sync import cosine_similarity
from pcavs.synth import mouth_area
from pcavs.trainer import DriveModels, evaluate_retrieval
from pcavs.utils import write_json

logger = logging.getLogger("pcavs.metrics")

SSIM_SIGMA = 1.5
REPORT_FILE = "eval_report.json"
CLIPS_FILE = "eval_clips.csv"
CLIP_COLUMNS = ("clip", "identity_id", "frames", "ssim", "ssim_fix_pose", "psnr", "mouth_corr", "pose_r")


# --- image similarity ---

def _pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise InvalidArgumentError(f"image shapes differ: {a.shape} vs {b.shape}")
    if a.ndim not in (2, 3) or (a.ndim == 3 and a.shape[2] != 3):
        raise InvalidArgumentError(f"expected HxW or HxWx3 images, got shape {a.shape}")
    return a, b


def _gray(img: np.ndarray) -> np.ndarray:
    return rgb2gray(img) if img.ndim == 3 else img


def ssim(a, b) -> float:
    """Grayscale SSIM with an 11x11 Gaussian window (sigma 1.5) and data range 1."""
    a, b = _pair(a, b)
    return float(structural_similarity(
        _gray(a), _gray(b),
        gaussian_weights=True, sigma=SSIM_SIGMA, use_sample_covariance=False, data_range=1.0,
    ))


def psnr(a, b) -> float:
    a, b = _pair(a, b)
    if np.array_equal(a, b):
        return math.inf
    return float(peak_signal_noise_ratio(a, b, data_range=1.0))


def _pearson(x, y) -> float:
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    if len(x) < 2 or np.std(x) == 0 or np.std(y) == 0:
        return math.nan
    return float(pearsonr(x, y).statistic)


def r2(y_true, y_pred) -> float:
    return float(r2_score(np.asarray(y_true, dtype=np.float64), np.asarray(y_pred, dtype=np.float64)))


# --- sync confidence ---

def _content_features(frames: np.ndarray, audio: Waveform, models: DriveModels) -> tuple[torch.Tensor, torch.Tensor]:
    enc = models.encoders
    t = len(frames)
    windows = frame_windows(mel_spectrogram(audio), range(t))
    with torch.no_grad():
        visual = torch.cat([
            map_content(encode_non_identity(frames[i:i + CHUNK], enc), enc) for i in range(0, t, CHUNK)
        ])
        aural = torch.cat([encode_audio(windows[i:i + CHUNK], enc) for i in range(0, t, CHUNK)])
    return visual, aural


def sync_offset_scores(frames, audio: Waveform, models: DriveModels, max_offset: int = 15) -> tuple[np.ndarray, np.ndarray]:
    """Mean cos(f_c^v(k), f_c^a(k + o)) for every offset o in [-max_offset, max_offset]."""
    frames = np.asarray(frames)
    if len(frames) < 2 * max_offset + 1:
        raise InvalidArgumentError(
            f"sync confidence needs at least {2 * max_offset + 1} frames, got {len(frames)}"
        )
    visual, aural = _content_features(frames, audio, models)
    t = len(frames)
    offsets = np.arange(-max_offset, max_offset + 1)
    scores = []
    for o in offsets:
        lo, hi = max(0, -o), min(t, t - o)
        scores.append(float(cosine_similarity(visual[lo:hi], aural[lo + o:hi + o]).mean()))
    return offsets, np.asarray(scores)


def sync_confidence(frames, audio: Waveform, models: DriveModels, max_offset: int = 15) -> float:
    """Aligned score minus the median score over all offsets."""
    offsets, scores = sync_offset_scores(frames, audio, models, max_offset)
    return float(scores[offsets == 0][0] - np.median(scores))


def best_sync_offset(frames, audio: Waveform, models: DriveModels, max_offset: int = 15) -> int:
    offsets, scores = sync_offset_scores(frames, audio, models, max_offset)
    return int(offsets[int(np.argmax(scores))])


# --- linear probes ---

@dataclass
class PoseProbe:
    """Ridge regression from a feature vector to yaw."""

    alpha: float = 1e-3
    coef: list[float] = field(default_factory=list)
    intercept: float = 0.0

    @property
    def fitted(self) -> bool:
        return bool(self.coef)

    def fit(self, features, yaw) -> "PoseProbe":
        x = np.asarray(features, dtype=np.float64)
        y = np.asarray(yaw, dtype=np.float64)
        if x.ndim != 2 or len(x) != len(y) or len(x) < 2:
            raise InvalidArgumentError(f"probe fit needs N x D features and N targets, got {x.shape} and {y.shape}")
        model = Ridge(alpha=self.alpha).fit(x, y)
        self.coef = [float(c) for c in model.coef_]
        self.intercept = float(model.intercept_)
        return self

    def predict(self, features) -> np.ndarray:
        if not self.fitted:
            raise ConfigurationError("pose probe has not been fitted")
        x = np.asarray(features, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != len(self.coef):
            raise InvalidArgumentError(f"probe expects N x {len(self.coef)} features, got {x.shape}")
        return x @ np.asarray(self.coef) + self.intercept

    def to_dict(self) -> dict:
        return {"alpha": self.alpha, "coef": self.coef, "intercept": self.intercept}

    @classmethod
    def from_dict(cls, data: dict) -> "PoseProbe":
        return cls(alpha=float(data["alpha"]), coef=[float(c) for c in data["coef"]], intercept=float(data["intercept"]))


def _tracked(clips: list[SyntheticClip]) -> list[SyntheticClip]:
    return [c for c in clips if c.has_tracks]


def content_features(frames, models: DriveModels) -> np.ndarray:
    enc = models.encoders
    with torch.no_grad():
        return torch.cat([
            map_content(encode_non_identity(frames[i:i + CHUNK], enc), enc) for i in range(0, len(frames), CHUNK)
        ]).cpu().numpy()


def _probe_data(clips: list[SyntheticClip], models: DriveModels, content: bool = False) -> tuple[np.ndarray, np.ndarray]:
    clips = _tracked(clips)
    if not clips:
        raise ConfigurationError("no clips with ground-truth pose tracks to probe")
    feats = [content_features(c.frames, models) if content else pose_codes(c.frames, models).cpu().numpy()
             for c in clips]
    return np.concatenate(feats), np.concatenate([c.pose_track[:, 0] for c in clips])


def fit_pose_probe(clips: list[SyntheticClip], models: DriveModels, alpha: float = 1e-3,
                   content: bool = False) -> PoseProbe:
    """Fit yaw from pose codes (or, with content=True, from visual content features)."""
    x, y = _probe_data(clips, models, content)
    return PoseProbe(alpha=alpha).fit(x, y)


def pose_probe(frames, models: DriveModels, probe: PoseProbe) -> np.ndarray:
    """Per-frame yaw estimates: probe(map_pose(E_n(frame)))."""
    if not probe.fitted:
        raise ConfigurationError("pose probe has not been fitted")
    return probe.predict(pose_codes(np.asarray(frames), models).cpu().numpy())


def probe_r2(clips: list[SyntheticClip], models: DriveModels, probe: PoseProbe, content: bool = False) -> float:
    x, y = _probe_data(clips, models, content)
    return r2(y, probe.predict(x))


def retrieval_top1(models: DriveModels, corpus: Corpus, cfg: RunConfig | None = None) -> float:
    return evaluate_retrieval(models.encoders, corpus, cfg or models.cfg)["retrieval_top1"]


# --- report ---

def _mean(values) -> float | None:
    finite = [v for v in values if v is not None and math.isfinite(v)]
    return float(np.mean(finite)) if finite else None


def _self_driven(clip: SyntheticClip, models: DriveModels, mode: str) -> np.ndarray:
    request = DriveRequest(
        identity_ref=clip.frames[0],
        audio=clip.waveform,
        pose_mode=mode,
        pose_clip=clip.frames if mode == "source" else None,
    )
    return drive(request, models)


def evaluate(models: DriveModels, corpus: Corpus, cfg: RunConfig | None = None,
             out_dir: str | Path | None = None) -> dict:
    """Fit probes on calibration clips, measure on test clips, and write the report files."""
    cfg = cfg or models.cfg
    ec = cfg.eval
    calibration = _tracked([corpus.clips[i] for i in corpus.calibration])
    test = _tracked([corpus.clips[i] for i in corpus.test]) or calibration
    if not calibration:
        raise ConfigurationError("evaluation needs held-out clips with pose tracks (data.holdout_clips_per_id > 0)")

    probe = fit_pose_probe(calibration, models, ec.probe_alpha)
    content_probe = fit_pose_probe(calibration, models, ec.probe_alpha, content=True)
    report: dict = {
        "pose_probe_r2": probe_r2(test, models, probe),
        "content_probe_r2": probe_r2(test, models, content_probe, content=True),
        "retrieval_top1": retrieval_top1(models, corpus, cfg),
    }

    rows, cross_r, frontal = [], [], []
    for n, clip in enumerate(test[:ec.max_clips]):
        fake = _self_driven(clip, models, "source")
        fixed = _self_driven(clip, models, "fix")
        real = clip.frames[:len(fake)]
        rows.append({
            "clip": clip.name or f"clip_{n:03d}",
            "identity_id": clip.identity_id,
            "frames": len(fake),
            "ssim": _mean([ssim(r, f) for r, f in zip(real, fake)]),
            "ssim_fix_pose": _mean([ssim(r, f) for r, f in zip(real, fixed)]),
            "psnr": _mean([psnr(r, f) for r, f in zip(real, fake)]),
            "mouth_corr": _pearson([mouth_area(f) for f in fake], clip.mouth_track[:len(fake)]),
            "pose_r": _pearson(pose_probe(fake, models, probe), clip.pose_track[:len(fake), 0]),
        })
        others = [c for c in test if c.identity_id != clip.identity_id]
        if others:
            source = others[n % len(others)]
            crossed = drive(DriveRequest(clip.frames[0], clip.waveform, "source", source.frames), models)
            k = min(len(crossed), source.num_frames)
            cross_r.append(_pearson(pose_probe(crossed[:k], models, probe), source.pose_track[:k, 0]))

    # held-out identities only; None when the split has none
    unseen = set(corpus.heldout_identities)
    frontal_refs = [c for c in test if c.identity_id in unseen]
    for clip in frontal_refs[:ec.max_clips]:
        zero = _self_driven(clip, models, "zero")
        frontal.extend(np.abs(pose_probe(zero, models, probe)) < ec.frontal_band)

    sync_ids = corpus.heldout_identities or sorted({c.identity_id for c in test})
    sync_clips = render_eval_clips(cfg.data, ec.sync_clips, ec.sync_clip_frames, ec.seed, sync_ids)
    report.update({
        "ssim_mean": _mean([r["ssim"] for r in rows]),
        "ssim_fix_pose": _mean([r["ssim_fix_pose"] for r in rows]),
        "psnr_mean": _mean([r["psnr"] for r in rows]),
        "mouth_corr": _mean([r["mouth_corr"] for r in rows]),
        "cross_pose_r": _mean(cross_r),
        "frontal_fraction": float(np.mean(frontal)) if frontal else None,
        "sync_confidence": _mean([
            sync_confidence(_self_driven(c, models, "source"), c.waveform, models, ec.max_offset) for c in sync_clips
        ]),
        "sync_confidence_gt": _mean([
            sync_confidence(c.frames, c.waveform, models, ec.max_offset) for c in sync_clips
        ]),
    })
    logger.info("eval done " + " ".join(f"{k}={v}" for k, v in sorted(report.items())))

    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_json(out / REPORT_FILE, report)
        with open(out / CLIPS_FILE, "w", newline="", encoding="utf-8") as fh:
            writer = csv.DictWriter(fh, fieldnames=CLIP_COLUMNS)
            writer.writeheader()
            for row in rows:
                writer.writerow({k: ("" if v is None else v) for k, v in row.items()})
    return report
