import hashlib
import json
import logging
import os
import random
from pathlib import Path

import numpy as np
import torch

from pcavs.config import settings
from pcavs.errors import ConfigurationError, InvalidArgumentError

logger = logging.getLogger("pcavs.utils")


def derive_seed(*parts: int) -> int:
    """Mix integer parts into one 63-bit seed, stable across platforms and runs."""
    return int(np.random.SeedSequence([int(p) & 0xFFFFFFFF for p in parts]).generate_state(2, np.uint64)[0] >> 1)


def step_rng(seed: int, stage: str, step: int) -> np.random.Generator:
    """Generator for one training step; a pure function of (seed, stage, step)."""
    stage_id = int.from_bytes(hashlib.sha256(stage.encode()).digest()[:4], "little")
    return np.random.default_rng([seed, stage_id, step])


def seed_everything(seed: int) -> None:
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)
    if settings.DETERMINISTIC:
        # cuBLAS needs this before the first matmul when deterministic kernels are forced
        os.environ.setdefault("CUBLAS_WORKSPACE_CONFIG", ":4096:8")
        torch.use_deterministic_algorithms(True, warn_only=True)
        torch.backends.cudnn.benchmark = False
    else:
        logger.warning("PCAVS_DETERMINISTIC is off; runs are not bit-reproducible")


def device() -> torch.device:
    return torch.device(settings.DEVICE)


def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_json(path: str | Path, payload) -> None:
    """Write JSON with stable key order so equal payloads give equal bytes."""
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def read_json(path: str | Path):
    return json.loads(Path(path).read_text(encoding="utf-8"))


def prepare_run_dir(path: str | Path, force: bool = False) -> Path:
    """Create an output directory; refuse to write into a non-empty one unless forced."""
    out = Path(path)
    if out.exists() and not out.is_dir():
        raise ConfigurationError(f"output path exists and is not a directory: {out}")
    if out.exists() and any(out.iterdir()) and not force:
        raise ConfigurationError(f"output directory {out} is not empty (pass --force to write into it)")
    out.mkdir(parents=True, exist_ok=True)
    return out


def images_to_tensor(images: np.ndarray) -> torch.Tensor:
    """HxWx3 or NxHxWx3 images in [0, 1] (float or uint8) -> NCHW float tensor in [-1, 1]."""
    arr = np.asarray(images)
    if arr.dtype == np.uint8:
        arr = arr.astype(np.float32) / 255.0
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4 or arr.shape[-1] != 3:
        raise InvalidArgumentError(f"expected HxWx3 or NxHxWx3 images, got shape {arr.shape}")
    t = torch.from_numpy(np.ascontiguousarray(arr, dtype=np.float32)).permute(0, 3, 1, 2)
    return t * 2.0 - 1.0


def tensor_to_images(t: torch.Tensor) -> np.ndarray:
    """NCHW tensor in [-1, 1] -> NxHxWx3 float32 array in [0, 1]."""
    arr = ((t.detach().cpu().float().clamp(-1.0, 1.0) + 1.0) * 0.5).permute(0, 2, 3, 1)
    return arr.numpy().astype(np.float32)


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(image, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def ping_pong_index(k: int, length: int) -> int:
    """Index into a sequence of `length` items played forward then backward, repeatedly."""
    if length <= 1:
        return 0
    period = 2 * (length - 1)
    r = k % period
    return r if r < length else period - r
