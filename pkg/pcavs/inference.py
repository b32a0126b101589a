"""Audio-driven generation from a joint-stage checkpoint.

Frame k of the output uses the identity code of the reference photo, the
content code of the 0.2 s audio window centred at k / 25 s, and a pose code
chosen by the pose mode: taken frame by frame from a pose-source clip, held
at the reference's own pose, or zero (frontal).
"""

import logging

import numpy as np
import torch

from pcavs.audio import frame_windows, mel_spectrogram
from pcavs.checkpoint import Checkpoint
from pcavs.encoders import encode_audio, encode_identity, encode_non_identity, map_pose
from pcavs.errors import InvalidArgumentError
from pcavs.generator import generate
from pcavs.models import DriveRequest, LatentBundle
from pcavs.trainer import DriveModels, models_from_checkpoint
from pcavs.utils import ping_pong_index

logger = logging.getLogger("pcavs.inference")

CHUNK = 32  # frames per generator call


def _models(models: DriveModels | Checkpoint) -> DriveModels:
    return models_from_checkpoint(models) if isinstance(models, Checkpoint) else models


def pose_codes(frames: np.ndarray, models: DriveModels | Checkpoint) -> torch.Tensor:
    """map_pose(E_n(frame)) for a stack of frames."""
    m = _models(models)
    with torch.no_grad():
        return torch.cat([
            map_pose(encode_non_identity(frames[i:i + CHUNK], m.encoders), m.encoders)
            for i in range(0, len(frames), CHUNK)
        ])


def drive_latents(request: DriveRequest, models: DriveModels | Checkpoint) -> LatentBundle:
    """Per-frame (f_i, f_c, f_p) for a drive request; T = floor(audio seconds * 25) rows."""
    m = _models(models)
    t = request.num_frames
    with torch.no_grad():
        f_i, _ = encode_identity(request.identity_ref, m.encoders)
        windows = frame_windows(mel_spectrogram(request.audio), range(t))
        f_c = torch.cat([encode_audio(windows[i:i + CHUNK], m.encoders) for i in range(0, t, CHUNK)])
        if request.pose_mode == "source":
            clip = np.asarray(request.pose_clip)
            if len(clip) < t:
                logger.info(f"pose clip has {len(clip)} frames for {t} output frames; looping ping-pong")
            codes = pose_codes(clip, m)
            f_p = codes[[ping_pong_index(k, len(clip)) for k in range(t)]]
        elif request.pose_mode == "fix":
            f_p = pose_codes(request.identity_ref[None], m).expand(t, -1)
        else:
            f_p = torch.zeros((t, m.cfg.model.pose_dim), device=f_c.device)
    return LatentBundle(f_i=f_i.expand(t, -1), f_c=f_c, f_p=f_p)


def drive(request: DriveRequest, models: DriveModels | Checkpoint) -> np.ndarray:
    """T x H x W x 3 float32 frames in [0, 1]."""
    m = _models(models)
    f_cat = drive_latents(request, m).f_cat
    frames = np.concatenate([generate(f_cat[i:i + CHUNK], m.generator) for i in range(0, len(f_cat), CHUNK)])
    logger.info(f"drive done mode={request.pose_mode} frames={len(frames)}")
    return frames


def select_pose_source(models: DriveModels | Checkpoint, identity_ref: np.ndarray, candidates) -> int:
    """Index of the candidate clip whose first-frame pose code is nearest (L2) to the reference's."""
    if len(candidates) == 0:
        raise InvalidArgumentError("select_pose_source needs at least one candidate clip")
    m = _models(models)
    ref = pose_codes(np.asarray(identity_ref)[None], m)
    firsts = pose_codes(np.stack([np.asarray(c)[0] for c in candidates]), m)
    return int(torch.linalg.vector_norm(firsts - ref, dim=-1).argmin())
