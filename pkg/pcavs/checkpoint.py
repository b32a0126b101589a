"""Single-file checkpoint container.

    b"PCAV" | u32 format_version | u32 header_len | header JSON | tensor blobs | sha256

The header carries the stage, step, config snapshot, metrics, rng states and
packed optimizer states; tensors are raw little-endian blobs referenced from
the header by offset. The trailing digest covers every preceding byte.
"""

import hashlib
import json
import logging
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from pcavs.config import CHECKPOINT_FORMAT_VERSION, CHECKPOINT_MAGIC
from pcavs.errors import ConfigurationError, IntegrityError, VersionMismatchError

logger = logging.getLogger("pcavs.checkpoint")

_PREFIX = struct.Struct("<4sII")
_DIGEST_LEN = 32


@dataclass
class Checkpoint:
    stage: str
    step: int
    modules: dict[str, dict[str, torch.Tensor]] = field(default_factory=dict)
    optimizers: dict[str, dict] = field(default_factory=dict)
    rng: dict[str, torch.Tensor] = field(default_factory=dict)
    config: dict = field(default_factory=dict)
    metrics: dict = field(default_factory=dict)
    format_version: int = CHECKPOINT_FORMAT_VERSION

    def require(self, *modules: str) -> None:
        missing = [m for m in modules if m not in self.modules]
        if missing:
            raise ConfigurationError(f"incomplete checkpoint (stage={self.stage}): missing modules {missing}")


class _BlobWriter:
    def __init__(self):
        self.chunks: list[bytes] = []
        self.offset = 0

    def add(self, t: torch.Tensor) -> dict:
        arr = t.detach().cpu().contiguous().numpy()
        data = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
        ref = {"dtype": arr.dtype.str.lstrip("<>|="), "shape": list(arr.shape), "offset": self.offset, "nbytes": len(data)}
        self.chunks.append(data)
        self.offset += len(data)
        return ref


def _read_blob(blob: memoryview, ref: dict) -> torch.Tensor:
    start, nbytes = ref["offset"], ref["nbytes"]
    if start < 0 or start + nbytes > len(blob):
        raise IntegrityError(f"blob reference out of range: offset={start} nbytes={nbytes}")
    arr = np.frombuffer(blob[start:start + nbytes], dtype=np.dtype(ref["dtype"]).newbyteorder("<"))
    return torch.from_numpy(arr.reshape(ref["shape"]).copy())


def pack_state(value, blobs: _BlobWriter):
    """Make an optimizer state JSON-safe: tensors become blob refs, non-str dict keys are kept as pairs."""
    if torch.is_tensor(value):
        return {"__tensor__": blobs.add(value)}
    if isinstance(value, dict):
        if all(isinstance(k, str) for k in value):
            return {k: pack_state(value[k], blobs) for k in sorted(value)}
        return {"__dict__": [[k, pack_state(v, blobs)] for k, v in value.items()]}
    if isinstance(value, (list, tuple)):
        return [pack_state(v, blobs) for v in value]
    return value


def unpack_state(value, blob: memoryview):
    if isinstance(value, dict):
        if "__tensor__" in value:
            return _read_blob(blob, value["__tensor__"])
        if "__dict__" in value:
            return {k: unpack_state(v, blob) for k, v in value["__dict__"]}
        return {k: unpack_state(v, blob) for k, v in value.items()}
    if isinstance(value, list):
        return [unpack_state(v, blob) for v in value]
    return value


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    blobs = _BlobWriter()
    header = {
        "stage": ckpt.stage,
        "step": int(ckpt.step),
        "config": ckpt.config,
        "metrics": ckpt.metrics,
        "modules": {
            name: {key: blobs.add(ckpt.modules[name][key]) for key in sorted(ckpt.modules[name])}
            for name in sorted(ckpt.modules)
        },
        "rng": {name: blobs.add(ckpt.rng[name]) for name in sorted(ckpt.rng)},
        "optimizers": {name: pack_state(ckpt.optimizers[name], blobs) for name in sorted(ckpt.optimizers)},
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = _PREFIX.pack(CHECKPOINT_MAGIC, ckpt.format_version, len(head)) + head + b"".join(blobs.chunks)
    return body + hashlib.sha256(body).digest()


def decode_checkpoint(data: bytes) -> Checkpoint:
    if len(data) < _PREFIX.size + _DIGEST_LEN:
        raise IntegrityError(f"checkpoint truncated: {len(data)} bytes")
    magic, version, head_len = _PREFIX.unpack_from(data)
    if magic != CHECKPOINT_MAGIC:
        raise IntegrityError(f"not a checkpoint: magic {magic!r}")
    if version > CHECKPOINT_FORMAT_VERSION:
        raise VersionMismatchError(version, CHECKPOINT_FORMAT_VERSION)
    body, digest = data[:-_DIGEST_LEN], data[-_DIGEST_LEN:]
    if hashlib.sha256(body).digest() != digest:
        raise IntegrityError("checkpoint checksum mismatch")
    head_end = _PREFIX.size + head_len
    if head_end > len(body):
        raise IntegrityError("checkpoint header length exceeds file size")
    try:
        header = json.loads(body[_PREFIX.size:head_end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise IntegrityError(f"checkpoint header unreadable: {exc}") from exc
    blob = memoryview(body)[head_end:]
    return Checkpoint(
        stage=header["stage"],
        step=header["step"],
        modules={
            name: {key: _read_blob(blob, ref) for key, ref in tensors.items()}
            for name, tensors in header["modules"].items()
        },
        optimizers={name: unpack_state(state, blob) for name, state in header["optimizers"].items()},
        rng={name: _read_blob(blob, ref) for name, ref in header["rng"].items()},
        config=header["config"],
        metrics=header["metrics"],
        format_version=version,
    )


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> Path:
    """Write atomically (temp file then rename)."""
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    tmp = out.with_suffix(out.suffix + ".tmp")
    tmp.write_bytes(encode_checkpoint(ckpt))
    os.replace(tmp, out)
    logger.info(f"checkpoint saved path={out} stage={ckpt.stage} step={ckpt.step}")
    return out


def load_checkpoint(path: str | Path) -> Checkpoint:
    p = Path(path)
    if not p.is_file():
        raise ConfigurationError(f"checkpoint not found: {p}")
    ckpt = decode_checkpoint(p.read_bytes())
    logger.info(f"checkpoint loaded path={p} stage={ckpt.stage} step={ckpt.step}")
    return ckpt


def checkpoint_roundtrip(path: str | Path) -> Checkpoint:
    """Load a checkpoint and confirm that re-encoding it reproduces the file byte for byte."""
    p = Path(path)
    ckpt = load_checkpoint(p)
    if encode_checkpoint(ckpt) != p.read_bytes():
        raise IntegrityError(f"checkpoint {p} does not re-encode to identical bytes")
    return ckpt
