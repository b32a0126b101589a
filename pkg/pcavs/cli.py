"""pcavs command line.

    pcavs gen-data         render the synthetic corpus
    pcavs train            run one training stage
    pcavs infer            drive a reference photo with audio
    pcavs eval             write the evaluation report for a checkpoint
    pcavs augment-preview  show the augmentation pipeline on one image
    pcavs version

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
"""

import argparse
import asyncio
import logging
import sys
from logging.handlers import RotatingFileHandler
from pathlib import Path

import matplotlib
import numpy as np
from PIL import Image

from pcavs import __version__
from pcavs.audio import read_wav, resample
from pcavs.augment import preview_panels, sample_augment_params
from pcavs.checkpoint import load_checkpoint
from pcavs.config import ABLATIONS, SAMPLE_RATE, STAGES, RunConfig, config_from_dict, load_run_config, parse_overrides, settings
from pcavs.corpus import Corpus, build_corpus, generate_corpus, read_clip
from pcavs.errors import ConfigurationError, PcavsError
from pcavs.inference import drive, select_pose_source
from pcavs.metrics import evaluate
from pcavs.models import POSE_MODES, DriveRequest
from pcavs.synth import make_clip
from pcavs.trainer import models_from_checkpoint, run_stage
from pcavs.utils import prepare_run_dir, to_uint8, write_json

logger = logging.getLogger("pcavs.cli")

RESOLVED_CONFIG = "config.resolved.json"
LOG_FILE = "pcavs.log"


class UsageError(Exception):
    def __init__(self, message: str, usage: str = ""):
        super().__init__(message)
        self.usage = usage


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message, self.format_usage())


def setup_logging() -> None:
    """Attach the rotating file handler and a stderr handler to the pcavs logger, once."""
    root = logging.getLogger("pcavs")
    if getattr(root, "_pcavs_configured", False):
        return
    fmt = logging.Formatter("%(asctime)s %(levelname)s %(name)s %(message)s", datefmt="%Y-%m-%d %H:%M:%S")
    log_dir = Path(settings.LOG_DIR)
    try:
        log_dir.mkdir(parents=True, exist_ok=True)
        file_handler = RotatingFileHandler(log_dir / LOG_FILE, maxBytes=10 * 1024 * 1024, backupCount=5)
        file_handler.setFormatter(fmt)
        file_handler.setLevel(logging.INFO)
        root.addHandler(file_handler)
    except OSError as exc:
        print(f"warning: file logging disabled ({exc})", file=sys.stderr)
    stream = logging.StreamHandler(sys.stderr)
    stream.setFormatter(fmt)
    stream.setLevel(logging.INFO)
    root.addHandler(stream)
    root.setLevel(logging.INFO)
    root._pcavs_configured = True


def _config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML run config (sections data/augment/model/loss/sync/train/eval)")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override one config value; repeatable")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="pcavs", description="Pose-controllable audio-driven talking faces at desk scale.")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)

    p = sub.add_parser("gen-data", help="render the synthetic corpus")
    _config_args(p)
    p.add_argument("--identities", type=int, help="data.identities")
    p.add_argument("--clips-per-id", type=int, help="data.clips_per_id")
    p.add_argument("--frames", type=int, help="frames per clip (data.frames)")
    p.add_argument("--size", type=int, help="frame size in pixels (data.size)")
    p.add_argument("--seed", type=int, help="master corpus seed (data.seed)")
    p.add_argument("--out", required=True, help="corpus directory")
    p.add_argument("--force", action="store_true", help="write into a non-empty directory")

    p = sub.add_parser("train", help="run one training stage")
    _config_args(p)
    p.add_argument("--data", help="corpus directory; rendered in memory from the data section when omitted")
    p.add_argument("--stage", choices=STAGES, help="training stage (train.stage)")
    p.add_argument("--ablation", choices=ABLATIONS, help="ablation switch (train.ablation)")
    p.add_argument("--require-identity", action="store_true", help="sync stage: fail without an identity checkpoint")
    p.add_argument("--identity-ckpt", help="identity-stage checkpoint")
    p.add_argument("--sync-ckpt", help="sync-stage checkpoint")
    p.add_argument("--resume", help="checkpoint of this stage to continue from")
    p.add_argument("--steps", type=int, help="train until this step (train.steps)")
    p.add_argument("--seed", type=int, help="training seed (train.seed)")
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--force", action="store_true", help="write into a non-empty directory")

    p = sub.add_parser("infer", help="drive a reference photo with audio")
    p.add_argument("--ckpt", required=True, help="joint-stage checkpoint")
    p.add_argument("--ref", required=True, help="identity reference PNG")
    p.add_argument("--audio", required=True, help="driving WAV")
    p.add_argument("--pose-mode", choices=POSE_MODES, default="fix",
                   help="fix: reference pose, zero: frontal, source: pose of --pose-clip")
    p.add_argument("--pose-clip", action="append", default=[], metavar="DIR",
                   help="pose-source clip directory; repeat to let the nearest first-frame pose be chosen")
    p.add_argument("--grid", action="store_true", help="also write a reference/pose/generated comparison grid")
    p.add_argument("--out", required=True, help="output directory for PNG frames")
    p.add_argument("--force", action="store_true", help="write into a non-empty directory")

    p = sub.add_parser("eval", help="evaluate a joint-stage checkpoint")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override a value of the checkpoint's config (e.g. eval.max_clips=4)")
    p.add_argument("--ckpt", required=True, help="joint-stage checkpoint")
    p.add_argument("--data", help="corpus directory; rendered in memory from the checkpoint config when omitted")
    p.add_argument("--out", required=True, help="report directory")
    p.add_argument("--force", action="store_true", help="write into a non-empty directory")

    p = sub.add_parser("augment-preview", help="show each augmentation stage on one image")
    _config_args(p)
    p.add_argument("--image", help="input PNG; a synthetic face is rendered when omitted")
    p.add_argument("--seed", type=int, default=0, help="seed for the image and the sampled parameters")
    p.add_argument("--out", required=True, help="preview directory")
    p.add_argument("--force", action="store_true", help="write into a non-empty directory")

    sub.add_parser("version", help="print the version")
    return parser


# --- helpers ---

def _load_image(path: str) -> np.ndarray:
    p = Path(path)
    if not p.is_file():
        raise ConfigurationError(f"image not found: {p}")
    return np.asarray(Image.open(p).convert("RGB"), dtype=np.float32) / 255.0


def _save_png(image: np.ndarray, path: Path) -> None:
    Image.fromarray(to_uint8(image)).save(path, format="PNG")


def _resolved_config(args) -> RunConfig:
    return load_run_config(args.config, parse_overrides(args.overrides))


def _write_resolved(cfg: RunConfig, out: Path) -> None:
    write_json(out / RESOLVED_CONFIG, cfg.to_dict())


def _load_corpus(path: str | None, cfg: RunConfig) -> Corpus:
    if path is None:
        logger.info("no --data given; rendering the corpus in memory")
        return build_corpus(cfg.data)
    if not Path(path).is_dir():
        raise ConfigurationError(f"corpus directory not found: {path}")
    return Corpus.load(path, cfg.data.holdout_clips_per_id, cfg.data.holdout_identities)


def _save_grid(rows: list[list[tuple[str, np.ndarray]]], path: Path) -> None:
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    ncols = max(len(r) for r in rows)
    fig, axes = plt.subplots(len(rows), ncols, figsize=(2.2 * ncols, 2.2 * len(rows)), squeeze=False)
    for i, row in enumerate(rows):
        for j in range(ncols):
            ax = axes[i][j]
            ax.axis("off")
            if j < len(row):
                title, img = row[j]
                ax.imshow(np.clip(img, 0.0, 1.0))
                if i == 0:
                    ax.set_title(title, fontsize=9)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


# --- commands ---

async def cmd_gen_data(args) -> int:
    cfg = _resolved_config(args)
    for attr in ("identities", "clips_per_id", "frames", "size", "seed"):
        if getattr(args, attr) is not None:
            setattr(cfg.data, attr, getattr(args, attr))
    root = await generate_corpus(cfg.data, args.out, force=args.force)
    _write_resolved(cfg, root)
    print(f"corpus written to {root}")
    return 0


async def cmd_train(args) -> int:
    cfg = _resolved_config(args)
    tc = cfg.train
    if args.stage:
        tc.stage = args.stage
    if args.ablation:
        tc.ablation = args.ablation
    if args.require_identity:
        tc.require_identity = True
    for attr in ("identity_ckpt", "sync_ckpt", "resume"):
        if getattr(args, attr):
            setattr(tc, attr, getattr(args, attr))
    if args.steps is not None:
        tc.steps = args.steps
    if args.seed is not None:
        tc.seed = args.seed
    cfg.validate()
    out = prepare_run_dir(args.out, force=args.force or bool(tc.resume))
    _write_resolved(cfg, out)
    corpus = await asyncio.to_thread(_load_corpus, args.data, cfg)
    ckpt = await asyncio.to_thread(run_stage, cfg, corpus, out)
    write_json(out / "stage_metrics.json", ckpt.metrics)
    print(f"{ckpt.stage} stage finished at step {ckpt.step}: {out}")
    return 0


async def cmd_infer(args) -> int:
    models = models_from_checkpoint(load_checkpoint(args.ckpt))
    ref = _load_image(args.ref)
    if not Path(args.audio).is_file():
        raise ConfigurationError(f"audio file not found: {args.audio}")
    audio = read_wav(args.audio)
    if audio.sample_rate != SAMPLE_RATE:
        audio = resample(audio, SAMPLE_RATE)
    pose_clip = None
    if args.pose_mode == "source":
        if not args.pose_clip:
            raise UsageError("--pose-mode source needs --pose-clip DIR")
        clips = [read_clip(d) for d in args.pose_clip]
        chosen = select_pose_source(models, ref, [c.frames for c in clips]) if len(clips) > 1 else 0
        pose_clip = clips[chosen].frames
        logger.info(f"pose source clip={args.pose_clip[chosen]}")
    out = prepare_run_dir(args.out, force=args.force)
    frames = await asyncio.to_thread(
        drive, DriveRequest(identity_ref=ref, audio=audio, pose_mode=args.pose_mode, pose_clip=pose_clip), models
    )
    for k, frame in enumerate(frames):
        _save_png(frame, out / f"frame_{k:04d}.png")
    _write_resolved(models.cfg, out)
    if args.grid:
        picks = np.linspace(0, len(frames) - 1, num=min(6, len(frames))).round().astype(int)
        rows = []
        for k in picks:
            row = [("reference", ref)]
            if pose_clip is not None:
                row.append(("pose source", pose_clip[min(k, len(pose_clip) - 1)]))
            row.append((f"generated {k}", frames[k]))
            rows.append(row)
        _save_grid(rows, out / "grid.png")
    print(f"wrote {len(frames)} frames to {out}")
    return 0


async def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    models = models_from_checkpoint(ckpt)
    merged = {k: dict(v) for k, v in ckpt.config.items()}
    for section, values in parse_overrides(args.overrides).items():
        merged.setdefault(section, {}).update(values)
    cfg = config_from_dict(merged)
    out = prepare_run_dir(args.out, force=args.force)
    _write_resolved(cfg, out)
    corpus = await asyncio.to_thread(_load_corpus, args.data, cfg)
    report = await asyncio.to_thread(evaluate, models, corpus, cfg, out)
    print(" ".join(f"{k}={v}" for k, v in sorted(report.items())))
    return 0


async def cmd_augment_preview(args) -> int:
    cfg = _resolved_config(args)
    cfg.validate()
    if args.image:
        image = _load_image(args.image)
    else:
        image = make_clip(0, args.seed, 2, cfg.data.size).frames[0]
    params = sample_augment_params(cfg.augment, image.shape[1], np.random.default_rng(args.seed))
    out = prepare_run_dir(args.out, force=args.force)
    panels = preview_panels(image, params)
    for name, panel in panels:
        _save_png(panel, out / f"{name}.png")
    _save_grid([panels], out / "preview.png")
    write_json(out / "params.json", {
        "r_s": params.r_s, "r_t": params.r_t, "color_gains": list(params.color_gains),
        "color_shifts": list(params.color_shifts), "crop_fraction": params.crop_fraction,
        "warp_mode": params.warp_mode, "rng_seed": params.rng_seed,
    })
    _write_resolved(cfg, out)
    print(f"preview written to {out}")
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "infer": cmd_infer,
    "eval": cmd_eval,
    "augment-preview": cmd_augment_preview,
}


async def run_command(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("a command is required", parser.format_usage())
        if args.command == "version":
            print(f"pcavs {__version__}")
            return 0
        setup_logging()
        return await COMMANDS[args.command](args)
    except SystemExit as exc:
        # --help
        return exc.code if isinstance(exc.code, int) else 0
    except UsageError as exc:
        if exc.usage:
            print(exc.usage, file=sys.stderr, end="")
        print(f"pcavs: error: {exc}", file=sys.stderr)
        return 1
    except ConfigurationError as exc:
        logger.error(f"configuration error: {exc}")
        print(f"pcavs: error: {exc}", file=sys.stderr)
        return 1
    except PcavsError as exc:
        logger.exception(f"command failed: {exc}")
        print(f"pcavs: failed: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:
        logger.exception(f"unexpected failure: {exc}")
        print(f"pcavs: failed: {exc}", file=sys.stderr)
        return 2


async def main() -> int:
    return await run_command(sys.argv[1:])


def main_sync():
    sys.exit(asyncio.run(main()))


if __name__ == "__main__":
    main_sync()
