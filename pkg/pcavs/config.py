import json
import os
import typing
from pathlib import Path
from typing import Annotated, Literal

import yaml
from dotenv import load_dotenv
from pydantic import BaseModel, BeforeValidator, ConfigDict, Field, ValidationError, model_validator

from pcavs.errors import ConfigurationError

load_dotenv()


def _env_flag(name: str, default: str) -> bool:
    return os.getenv(name, default).strip().lower() in ("1", "true", "yes", "on")


class Settings:
    NUM_WORKERS: int = int(os.getenv("PCAVS_NUM_WORKERS", "4"))
    LOG_DIR: str = os.getenv("PCAVS_LOG_DIR", "logs")
    DEVICE: str = os.getenv("PCAVS_DEVICE", "cpu")
    DETERMINISTIC: bool = _env_flag("PCAVS_DETERMINISTIC", "1")
    RUN_SLOW: bool = _env_flag("PCAVS_RUN_SLOW", "0")

    @property
    def num_workers(self) -> int:
        """Worker cap, never below one."""
        return max(1, self.NUM_WORKERS)


settings = Settings()


# Audio conventions. Change values here, not in individual modules.
SAMPLE_RATE = 16_000
N_FFT = 1280
HOP_LENGTH = 160
N_MELS = 80
F_MAX = 8000.0
LOG_FLOOR = 1e-6
FPS = 25
SAMPLES_PER_FRAME = SAMPLE_RATE // FPS          # 640
HOPS_PER_FRAME = SAMPLES_PER_FRAME // HOP_LENGTH  # 4
WINDOW_HOPS = 20                                # 0.2 s
WINDOW_CENTER = WINDOW_HOPS // 2

# Latent conventions
POSE_DIM = 12
MIN_NEGATIVE_SHIFT = 5  # frames

# Checkpoint container
CHECKPOINT_MAGIC = b"PCAV"
CHECKPOINT_FORMAT_VERSION = 1

# Literal-typed choices; the tuples are what the CLI offers.
Stage = Literal["identity", "sync", "joint"]
Ablation = Literal["none", "no-sync-loss", "pose-dim-36", "adain", "no-augment"]
GeneratorStyle = Literal["modulated", "adain"]
WarpMode = Literal["symmetric", "projective"]

STAGES = typing.get_args(Stage)
ABLATIONS = typing.get_args(Ablation)
GENERATOR_STYLES = typing.get_args(GeneratorStyle)
WARP_MODES = typing.get_args(WarpMode)


def _split_csv(value):
    """Accept "32,16,8" from the command line as well as YAML lists."""
    if isinstance(value, str):
        return [v.strip() for v in value.split(",") if v.strip()]
    return value


def _none_as_empty(value):
    return "" if value is None else value


IntTuple = Annotated[tuple[int, ...], BeforeValidator(_split_csv)]
FloatPair = Annotated[tuple[float, float], BeforeValidator(_split_csv)]
PathText = Annotated[str, BeforeValidator(_none_as_empty)]


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class DataConfig(_Section):
    identities: int = Field(default=16, ge=1)
    clips_per_id: int = Field(default=64, ge=1)
    frames: int = Field(default=25, ge=1)
    size: int = Field(default=64, ge=8)
    seed: int = 0
    holdout_clips_per_id: int = Field(default=8, ge=0)
    holdout_identities: int = Field(default=0, ge=0)
    pitch_min: float = Field(default=200.0, gt=0)
    pitch_max: float = Field(default=400.0, gt=0)


class AugmentConfig(_Section):
    enabled: bool = True
    gain_min: float = Field(default=0.6, gt=0)
    gain_max: float = Field(default=1.4, gt=0)
    shift_min: float = -0.1
    shift_max: float = 0.1
    crop_min: float = Field(default=0.85, gt=0, le=1)
    crop_max: float = Field(default=1.0, gt=0, le=1)
    rs_fraction: float = Field(default=0.15, ge=0, lt=0.5)
    warp_mode: WarpMode = "symmetric"
    per_clip: bool = True


class ModelConfig(_Section):
    image_size: int = Field(default=64, ge=8)
    d_n: int = Field(default=256, ge=1)
    l_c: int = Field(default=128, ge=1)
    d_i: int = Field(default=128, ge=1)
    pose_dim: int = Field(default=POSE_DIM, ge=1)
    encoder_widths: IntTuple = (32, 64, 128, 256)
    audio_widths: IntTuple = (32, 64, 128)
    content_layers: int = Field(default=2, ge=1)
    num_identities: int = Field(default=16, ge=1)
    generator_style: GeneratorStyle = "modulated"
    generator_blocks: int = Field(default=4, ge=1)
    generator_channels: IntTuple = (256, 256, 128, 64, 32)
    stem_size: int = Field(default=4, ge=1)
    mlp_hidden: int = Field(default=256, ge=1)
    epsilon: float = Field(default=1e-8, gt=0)
    crop_to: int = Field(default=0, ge=0)
    init_seed: int = 0

    @property
    def latent_dim(self) -> int:
        return self.d_i + self.l_c + self.pose_dim

    @property
    def output_size(self) -> int:
        return self.stem_size * 2 ** self.generator_blocks


class LossConfig(_Section):
    lambda_l1: float = Field(default=1.0, ge=0)
    lambda_vgg: float = Field(default=1.0, ge=0)
    lambda_c: float = Field(default=1.0, ge=0)
    lambda_i: float = Field(default=1.0, ge=0)
    num_scales: int = Field(default=2, ge=1)
    disc_layers: int = Field(default=3, ge=1)
    disc_channels: int = Field(default=64, ge=1)
    perceptual_layers: int = Field(default=4, ge=1)
    perceptual_seed: int = 1234
    perceptual_weights: PathText = ""


class SyncConfig(_Section):
    negatives: int = Field(default=8, ge=1)
    temperature: float = Field(default=1.0, gt=0)
    min_shift: int = Field(default=MIN_NEGATIVE_SHIFT, ge=1)


class TrainConfig(_Section):
    stage: Stage = "joint"
    steps: int = Field(default=1000, ge=1)
    batch_size: int = Field(default=16, ge=1)
    lr_encoders: float = Field(default=1e-4, gt=0)
    lr_gan: float = Field(default=2e-4, gt=0)
    betas_gan: FloatPair = (0.0, 0.99)
    seed: int = 0
    ablation: Ablation = "none"
    identity_ckpt: PathText = ""
    sync_ckpt: PathText = ""
    resume: PathText = ""
    require_identity: bool = False
    freeze_identity: bool = False
    freeze_audio: bool = False
    log_every: int = Field(default=50, ge=0)
    flush_every: int = Field(default=50, ge=1)
    checkpoint_every: int = Field(default=0, ge=0)
    prefetch: int = Field(default=4, ge=1)
    eval_batches: int = Field(default=8, ge=1)

class EvalConfig(_Section):
    sync_clip_frames: int = Field(default=75, ge=1)
    sync_clips: int = Field(default=4, ge=1)
    max_offset: int = Field(default=15, ge=0)
    probe_alpha: float = Field(default=1e-3, ge=0)
    frontal_band: float = Field(default=0.1, gt=0)
    max_clips: int = Field(default=16, ge=1)
    seed: int = 99


def _describe(exc: ValidationError) -> str:
    return "; ".join(
        f"{'.'.join(str(part) for part in err['loc']) or 'config'}: {err['msg']}" for err in exc.errors()
    )


class RunConfig(_Section):
    data: DataConfig = Field(default_factory=DataConfig)
    augment: AugmentConfig = Field(default_factory=AugmentConfig)
    model: ModelConfig = Field(default_factory=ModelConfig)
    loss: LossConfig = Field(default_factory=LossConfig)
    sync: SyncConfig = Field(default_factory=SyncConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    eval: EvalConfig = Field(default_factory=EvalConfig)

    @model_validator(mode="after")
    def check_generator_shape(self):
        m = self.model
        if len(m.generator_channels) != m.generator_blocks + 1:
            raise ValueError(
                f"model.generator_channels needs {m.generator_blocks + 1} entries, "
                f"got {len(m.generator_channels)}"
            )
        if m.crop_to and m.crop_to > m.output_size:
            raise ValueError(f"model.crop_to={m.crop_to} exceeds generator output {m.output_size}")
        expected = m.crop_to or m.output_size
        if expected != m.image_size:
            raise ValueError(f"generator produces {expected}px frames but model.image_size={m.image_size}")
        return self

    @model_validator(mode="after")
    def check_ranges(self):
        a = self.augment
        if a.gain_min > a.gain_max or a.shift_min > a.shift_max or a.crop_min > a.crop_max:
            raise ValueError("augment ranges need min <= max")
        if self.data.pitch_min > self.data.pitch_max:
            raise ValueError("data.pitch_min exceeds data.pitch_max")
        return self

    def to_dict(self) -> dict:
        return self.model_dump(mode="json")

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def validate(self) -> "RunConfig":
        """Re-check every field and cross-field invariant of the current state; returns self."""
        try:
            type(self).model_validate(self.model_dump())
        except ValidationError as exc:
            raise ConfigurationError(_describe(exc)) from exc
        return self


def apply_ablation(cfg: RunConfig) -> RunConfig:
    """Return a copy of cfg with the train.ablation switch folded into the other sections."""
    cfg = cfg.model_copy(deep=True)
    ablation = cfg.train.ablation
    if ablation == "no-sync-loss":
        cfg.loss.lambda_c = 0.0
    elif ablation == "pose-dim-36":
        cfg.model.pose_dim = 36
    elif ablation == "adain":
        cfg.model.generator_style = "adain"
    elif ablation == "no-augment":
        cfg.augment.enabled = False
    return cfg


def config_from_dict(data: dict | None) -> RunConfig:
    """Build and validate a RunConfig; empty sections keep their defaults."""
    sections = {name: values for name, values in (data or {}).items() if values is not None}
    try:
        return RunConfig.model_validate(sections)
    except ValidationError as exc:
        raise ConfigurationError(_describe(exc)) from exc


def parse_overrides(items: list[str] | None) -> dict[str, dict[str, str]]:
    """Turn ["train.steps=10", ...] into {"train": {"steps": "10"}}."""
    out: dict[str, dict[str, str]] = {}
    for item in items or []:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigurationError(f"override {item!r} must look like section.key=value")
        dotted, value = item.split("=", 1)
        section, key = dotted.split(".", 1)
        out.setdefault(section.strip(), {})[key.strip()] = value
    return out


def load_run_config(path: str | Path | None = None, overrides: dict | None = None) -> RunConfig:
    """Load a YAML run config, then layer overrides on top.

    Later layers win: defaults < file < overrides.
    """
    data: dict = {}
    if path:
        p = Path(path)
        if not p.is_file():
            raise ConfigurationError(f"config file not found: {p}")
        loaded = yaml.safe_load(p.read_text(encoding="utf-8"))
        if loaded is not None and not isinstance(loaded, dict):
            raise ConfigurationError(f"config file {p} must hold a mapping of sections")
        data = loaded or {}
    for section, values in (overrides or {}).items():
        current = data.get(section)
        data[section] = {**current, **values} if isinstance(current, dict) else dict(values)
    return config_from_dict(data)
