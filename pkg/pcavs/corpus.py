"""Clip corpus: on-disk container, parallel generation, splits, negative sampling and batches.

Layout::

    <root>/index.json
    <root>/clip_<id:03d>_<idx:03d>/frame_<k:03d>.png
                                  /audio.wav
                                  /meta.json

Every training batch is a pure function of (corpus, config, stage, step), so
batches can be built ahead of time by DataLoader workers without changing results.
"""

import asyncio
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import cv2
import numpy as np
import torch
from PIL import Image
from torch.utils.data import DataLoader, Dataset

from pcavs.audio import frame_windows, mel_spectrogram, read_wav, resample, write_wav
from pcavs.augment import apply_augmentation, sample_augment_params
from pcavs.config import FPS, SAMPLE_RATE, DataConfig, RunConfig, settings
from pcavs.errors import ConfigurationError, InvalidArgumentError
from pcavs.models import AugmentParams, SyntheticClip
from pcavs.synth import make_clip
from pcavs.utils import derive_seed, prepare_run_dir, read_json, step_rng, to_uint8, write_json

logger = logging.getLogger("pcavs.corpus")

INDEX_FILE = "index.json"
META_FILE = "meta.json"
AUDIO_FILE = "audio.wav"
INDEX_FORMAT = 1


def clip_name(identity_id: int, index: int) -> str:
    return f"clip_{identity_id:03d}_{index:03d}"


def clip_seed(master_seed: int, identity_id: int, index: int) -> int:
    return derive_seed(master_seed, identity_id, index)


# --- container ---

def write_clip(clip: SyntheticClip, directory: str | Path, seed: int | None = None) -> Path:
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    for k, frame in enumerate(clip.frames):
        Image.fromarray(to_uint8(frame)).save(out / f"frame_{k:03d}.png", format="PNG")
    write_wav(out / AUDIO_FILE, clip.waveform)
    meta = {"identity_id": int(clip.identity_id), "fps": clip.fps, "frames": clip.num_frames}
    if clip.has_tracks:
        meta["pose_track"] = [[round(float(v), 6) for v in row] for row in clip.pose_track]
        meta["mouth_track"] = [round(float(v), 6) for v in clip.mouth_track]
    if seed is not None:
        meta["seed"] = int(seed)
    write_json(out / META_FILE, meta)
    return out


def read_clip(directory: str | Path) -> SyntheticClip:
    """Load one clip directory; pose/mouth tracks are optional (real footage has none)."""
    d = Path(directory)
    meta_path = d / META_FILE
    if not meta_path.is_file():
        raise ConfigurationError(f"clip directory {d} has no {META_FILE}")
    meta = read_json(meta_path)
    if "identity_id" not in meta:
        raise ConfigurationError(f"{meta_path} is missing identity_id")
    fps = int(meta.get("fps", FPS))
    if fps != FPS:
        raise InvalidArgumentError(f"{d}: clips must be {FPS} fps, got {fps}")
    frame_paths = sorted(d.glob("frame_*.png"))
    if len(frame_paths) < 2:
        raise InvalidArgumentError(f"{d}: a clip needs at least 2 frames, found {len(frame_paths)}")
    frames = np.stack([
        np.asarray(Image.open(p).convert("RGB"), dtype=np.float32) / 255.0 for p in frame_paths
    ])
    wave = read_wav(d / AUDIO_FILE)
    if wave.sample_rate != SAMPLE_RATE:
        wave = resample(wave, SAMPLE_RATE)
    pose = np.asarray(meta["pose_track"], dtype=np.float64) if "pose_track" in meta else None
    mouth = np.asarray(meta["mouth_track"], dtype=np.float64) if "mouth_track" in meta else None
    return SyntheticClip(
        frames=frames, waveform=wave, identity_id=int(meta["identity_id"]),
        pose_track=pose, mouth_track=mouth, fps=fps, name=d.name,
    )


# --- generation ---

def _generate_one(cfg: DataConfig, identity_id: int, index: int, root: Path | None) -> SyntheticClip:
    seed = clip_seed(cfg.seed, identity_id, index)
    clip = make_clip(identity_id, seed, cfg.frames, cfg.size, cfg.pitch_min, cfg.pitch_max)
    clip.name = clip_name(identity_id, index)
    if root is not None:
        write_clip(clip, root / clip.name, seed=seed)
    return clip


async def generate_corpus(cfg: DataConfig, out_dir: str | Path, force: bool = False) -> Path:
    """Render and write the whole corpus; at most PCAVS_NUM_WORKERS clips in flight."""
    root = prepare_run_dir(out_dir, force=force)
    semaphore = asyncio.Semaphore(settings.num_workers)
    jobs = [(i, j) for i in range(cfg.identities) for j in range(cfg.clips_per_id)]
    done = 0

    async def _one(identity_id: int, index: int) -> str:
        nonlocal done
        async with semaphore:
            clip = await asyncio.to_thread(_generate_one, cfg, identity_id, index, root)
        done += 1
        if done % 100 == 0 or done == len(jobs):
            logger.info(f"corpus progress clips={done}/{len(jobs)}")
        return clip.name

    names = await asyncio.gather(*(_one(i, j) for i, j in jobs))
    index = {
        "format": INDEX_FORMAT,
        "data": _data_dict(cfg),
        "clips": [
            {"name": name, "identity_id": i, "index": j}
            for name, (i, j) in sorted(zip(names, jobs))
        ],
    }
    write_json(root / INDEX_FILE, index)
    logger.info(f"corpus written path={root} clips={len(jobs)} identities={cfg.identities}")
    return root


def _data_dict(cfg: DataConfig) -> dict:
    return {k: getattr(cfg, k) for k in type(cfg).model_fields}


def build_corpus(cfg: DataConfig) -> "Corpus":
    """In-memory corpus with the same clips generate_corpus would write (before PNG quantisation)."""
    clips = [_generate_one(cfg, i, j, None) for i in range(cfg.identities) for j in range(cfg.clips_per_id)]
    return Corpus(clips, holdout_clips_per_id=cfg.holdout_clips_per_id, holdout_identities=cfg.holdout_identities)


def render_eval_clips(cfg: DataConfig, count: int, frames: int, seed: int, identities=None) -> list[SyntheticClip]:
    """Fresh long clips for evaluation, never part of the training corpus."""
    ids = list(identities) if identities is not None else list(range(cfg.identities))
    if not ids:
        raise InvalidArgumentError("no identities to render evaluation clips for")
    clips = []
    for n in range(count):
        identity_id = ids[n % len(ids)]
        clip = make_clip(identity_id, derive_seed(seed, 0xE7A1, n), frames, cfg.size, cfg.pitch_min, cfg.pitch_max)
        clip.name = f"eval_{identity_id:03d}_{n:03d}"
        clips.append(clip)
    return clips


# --- corpus ---

@dataclass
class Negatives:
    windows: np.ndarray  # N x 80 x 20
    frames: np.ndarray  # N x H x W x 3
    audio_sources: list[tuple[int, int]]
    visual_sources: list[tuple[int, int]]


class Corpus:
    def __init__(self, clips: list[SyntheticClip], holdout_clips_per_id: int = 0, holdout_identities: int = 0):
        if not clips:
            raise InvalidArgumentError("a corpus needs at least one clip")
        self.clips = clips
        self.windows = [frame_windows(mel_spectrogram(c.waveform), range(c.num_frames)) for c in clips]
        self.identity_ids = sorted({c.identity_id for c in clips})
        self.num_identities = max(self.identity_ids) + 1
        self.image_size = clips[0].frames.shape[1]
        self._split(holdout_clips_per_id, holdout_identities)

    @classmethod
    def load(cls, root: str | Path, holdout_clips_per_id: int | None = None, holdout_identities: int | None = None) -> "Corpus":
        base = Path(root)
        index_path = base / INDEX_FILE
        if not index_path.is_file():
            raise ConfigurationError(f"corpus index not found: {index_path}")
        index = read_json(index_path)
        data = index.get("data", {})
        clips = [read_clip(base / entry["name"]) for entry in index["clips"]]
        logger.info(f"corpus loaded path={base} clips={len(clips)}")
        return cls(
            clips,
            holdout_clips_per_id=data.get("holdout_clips_per_id", 0) if holdout_clips_per_id is None else holdout_clips_per_id,
            holdout_identities=data.get("holdout_identities", 0) if holdout_identities is None else holdout_identities,
        )

    def _split(self, per_id: int, whole_ids: int) -> None:
        held_ids = set(self.identity_ids[len(self.identity_ids) - whole_ids:]) if whole_ids > 0 else set()
        self.heldout_identities = sorted(held_ids)
        self.train, self.calibration, self.test = [], [], []
        for identity_id in self.identity_ids:
            members = [i for i, c in enumerate(self.clips) if c.identity_id == identity_id]
            if identity_id in held_ids:
                held = members
            else:
                cut = max(len(members) - per_id, 0) if per_id > 0 else len(members)
                self.train += members[:cut]
                held = members[cut:]
            half = (len(held) + 1) // 2
            self.calibration += held[:half]
            self.test += held[half:]
        if not self.train:
            raise ConfigurationError("split leaves no training clips; lower data.holdout_clips_per_id")

    def __len__(self) -> int:
        return len(self.clips)

    def window(self, clip_index: int, frame: int) -> np.ndarray:
        return self.windows[clip_index][frame]

    def sample_negatives(self, clip_index: int, k_frame: int, n: int, rng: np.random.Generator,
                         pool: list[int] | None = None, min_shift: int = 5) -> Negatives:
        """ceil(n/2) negatives from other clips, the rest from this clip shifted by >= min_shift frames.

        Audio and visual negatives are drawn independently. A single-clip pool yields only shifted ones.
        """
        if n < 1:
            raise InvalidArgumentError(f"need at least one negative, got {n}")
        pool = list(range(len(self.clips))) if pool is None else list(pool)
        others = [i for i in pool if i != clip_index]
        k_len = self.clips[clip_index].num_frames
        shifted = [f for f in range(k_len) if abs(f - k_frame) >= min_shift]
        n_other = math.ceil(n / 2) if others else 0
        n_shift = n - n_other
        if n_shift and not shifted:
            raise InvalidArgumentError(
                f"clip of {k_len} frames cannot supply a {min_shift}-frame shift around frame {k_frame}"
            )

        def _draw() -> list[tuple[int, int]]:
            picks = []
            for _ in range(n_other):
                j = others[int(rng.integers(len(others)))]
                picks.append((j, int(rng.integers(self.clips[j].num_frames))))
            for _ in range(n_shift):
                picks.append((clip_index, shifted[int(rng.integers(len(shifted)))]))
            return picks

        audio_src, visual_src = _draw(), _draw()
        return Negatives(
            windows=np.stack([self.windows[j][f] for j, f in audio_src]),
            frames=np.stack([self.clips[j].frames[f] for j, f in visual_src]),
            audio_sources=audio_src,
            visual_sources=visual_src,
        )


# --- batches ---

@dataclass
class Batch:
    step: int
    labels: np.ndarray
    reference: np.ndarray | None = None  # B x H x W x 3
    target: np.ndarray | None = None
    target_aug: np.ndarray | None = None
    windows: np.ndarray | None = None  # B x 80 x 20
    neg_windows: np.ndarray | None = None  # B x N x 80 x 20
    neg_frames: np.ndarray | None = None  # B x N x H x W x 3
    clip_index: np.ndarray | None = None
    frame_index: np.ndarray | None = None


def build_batch(corpus: Corpus, cfg: RunConfig, stage: str, step: int, pool: list[int] | None = None) -> Batch:
    """Assemble the batch for one step of one stage.

    With augment.per_clip every frame drawn from the same clip in this batch,
    targets and shifted visual negatives alike, shares one parameter set.
    """
    rng = step_rng(cfg.train.seed, stage, step)
    pool = corpus.train if pool is None else pool
    b = cfg.train.batch_size
    clip_idx = np.array([pool[int(i)] for i in rng.integers(len(pool), size=b)])
    frames = np.array([int(rng.integers(corpus.clips[c].num_frames)) for c in clip_idx])
    labels = np.array([corpus.clips[c].identity_id for c in clip_idx], dtype=np.int64)
    batch = Batch(step=step, labels=labels, clip_index=clip_idx, frame_index=frames)

    if stage == "identity":
        batch.reference = np.stack([corpus.clips[c].frames[k] for c, k in zip(clip_idx, frames)])
        return batch

    clip_params: dict[int, AugmentParams] = {}

    def _augment(frame: np.ndarray, clip_index: int) -> np.ndarray:
        ac = cfg.augment
        if not ac.enabled:
            return frame
        if not ac.per_clip:
            return apply_augmentation(frame, sample_augment_params(ac, frame.shape[1], rng))
        if clip_index not in clip_params:
            clip_params[clip_index] = sample_augment_params(ac, frame.shape[1], rng)
        return apply_augmentation(frame, clip_params[clip_index])

    targets, refs, augs, negs = [], [], [], []
    for c, k in zip(clip_idx, frames):
        clip = corpus.clips[c]
        targets.append(clip.frames[k])
        augs.append(_augment(clip.frames[k], int(c)))
        if stage == "joint":
            ref = int(rng.integers(clip.num_frames - 1))
            refs.append(clip.frames[ref + (ref >= k)])
        negs.append(corpus.sample_negatives(int(c), int(k), cfg.sync.negatives, rng, pool=pool,
                                            min_shift=cfg.sync.min_shift))
    batch.target = np.stack(targets)
    batch.target_aug = np.stack(augs)
    batch.windows = np.stack([corpus.window(int(c), int(k)) for c, k in zip(clip_idx, frames)])
    batch.neg_windows = np.stack([n.windows for n in negs])
    batch.neg_frames = np.stack([
        np.stack([_augment(f, j) for f, (j, _) in zip(n.frames, n.visual_sources)]) for n in negs
    ])
    if stage == "joint":
        batch.reference = np.stack(refs)
    return batch


class StepBatches(Dataset):
    """The batches of steps [start, stop) of one stage; item i is the batch of step start + i."""

    def __init__(self, corpus: Corpus, cfg: RunConfig, stage: str, start: int, stop: int,
                 pool: list[int] | None = None):
        self.corpus, self.cfg, self.stage = corpus, cfg, stage
        self.start, self.stop = start, stop
        self.pool = pool

    def __len__(self) -> int:
        return max(0, self.stop - self.start)

    def __getitem__(self, index: int) -> Batch:
        if not 0 <= index < len(self):
            raise IndexError(f"step offset {index} outside [0, {len(self)})")
        return build_batch(self.corpus, self.cfg, self.stage, self.start + index, self.pool)


def _as_is(batch: Batch) -> Batch:
    return batch


def _quiet_worker(worker_id: int) -> None:
    # workers are forked; keep OpenCV and torch off their own thread pools
    cv2.setNumThreads(0)
    torch.set_num_threads(1)


def step_loader(batches: StepBatches, prefetch: int = 4, num_workers: int | None = None) -> DataLoader:
    """Iterate batches in step order while worker processes build up to `prefetch` each ahead."""
    workers = settings.num_workers if num_workers is None else num_workers
    ahead = {"prefetch_factor": max(1, prefetch), "worker_init_fn": _quiet_worker} if workers > 0 else {}
    return DataLoader(batches, batch_size=None, shuffle=False, num_workers=workers, collate_fn=_as_is, **ahead)
