"""Staged training: identity pretraining, sync pretraining, then joint reconstruction.

Each stage runs a fixed number of steps over batches that are pure functions of
(seed, stage, step), writes per-step losses to ``metrics.csv`` and ends with a
checkpoint. Encoder sub-networks are stored in checkpoints under their own
names so later stages can pick up exactly the parts an earlier stage trained.
"""

import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from pcavs.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from pcavs.config import N_MELS, WINDOW_HOPS, RunConfig, apply_ablation, config_from_dict
from pcavs.corpus import Batch, Corpus, StepBatches, build_batch, step_loader
from pcavs.encoders import AVSEncoders
from pcavs.errors import ConfigurationError, TrainingDivergedError
from pcavs.generator import build_generator
from pcavs.losses import (
    DiscriminatorPyramid,
    LossWeights,
    PerceptualNet,
    adversarial_from_logits,
    feature_matching_from_outputs,
    identity_ce,
    perceptual_loss,
    total_loss,
)
from pcavs.metrics_log import MetricsLog
from pcavs.models import ContrastiveBatch
from pcavs.sync import retrieval_hits, sync_loss
from pcavs.utils import device, images_to_tensor, seed_everything, write_json

logger = logging.getLogger("pcavs.trainer")

ENCODER_PARTS = ("non_identity", "content", "pose", "identity", "audio")
SYNC_PARTS = ("non_identity", "content", "audio")
DRIVE_PARTS = ("identity", "non_identity", "content", "pose", "audio", "generator")
METRICS_FILE = "metrics.csv"
DIVERGED_FILE = "diverged_step.json"


@dataclass
class StepResult:
    losses: dict[str, float]
    grad_norms: dict[str, float] = field(default_factory=dict)


def _grad_norm(module: torch.nn.Module) -> float:
    total = 0.0
    for p in module.parameters():
        if p.grad is not None:
            total += float(p.grad.detach().pow(2).sum())
    return math.sqrt(total)


def _stage_checkpoint_name(stage: str, step: int | None = None) -> str:
    return f"{stage}.pcav" if step is None else f"{stage}_step{step:06d}.pcav"


def _eval_config(cfg: RunConfig) -> RunConfig:
    """Copy of cfg for measurement batches: no augmentation, the eval seed."""
    out = cfg.model_copy(deep=True)
    out.augment.enabled = False
    out.train.seed = cfg.eval.seed
    return out


def contrastive_batch(encoders: AVSEncoders, batch: Batch, dev: torch.device,
                      positive_visual: torch.Tensor | None = None,
                      audio_grad: bool = True) -> ContrastiveBatch:
    """Content features for a batch's positives and negatives."""
    b, n = batch.neg_windows.shape[:2]
    if positive_visual is None:
        positive_visual = encoders.visual_content(images_to_tensor(batch.target_aug).to(dev))
    with torch.set_grad_enabled(audio_grad and torch.is_grad_enabled()):
        pa = encoders.audio_content(torch.from_numpy(batch.windows).to(dev))
        na = encoders.audio_content(
            torch.from_numpy(batch.neg_windows.reshape(b * n, N_MELS, WINDOW_HOPS)).to(dev)
        ).reshape(b, n, -1)
    neg_frames = batch.neg_frames.reshape(b * n, *batch.neg_frames.shape[2:])
    nv = encoders.visual_content(images_to_tensor(neg_frames).to(dev)).reshape(b, n, -1)
    return ContrastiveBatch(positive_visual=positive_visual, positive_audio=pa, negative_audios=na, negative_visuals=nv)


def heldout_pool(corpus: Corpus) -> list[int]:
    pool = corpus.calibration + corpus.test
    if not pool:
        logger.warning("corpus has no held-out clips; measuring on training clips")
        return list(corpus.train)
    return pool


def evaluate_retrieval(encoders: AVSEncoders, corpus: Corpus, cfg: RunConfig,
                       pool: list[int] | None = None, batches: int | None = None) -> dict[str, float]:
    """In-batch top-1 retrieval among (1 + negatives) candidates, both directions, augmentation off."""
    eval_cfg = _eval_config(cfg)
    pool = heldout_pool(corpus) if pool is None else pool
    dev = next(encoders.parameters()).device
    was_training = encoders.training
    encoders.eval()
    v2a, a2v = [], []
    try:
        with torch.no_grad():
            for i in range(batches or cfg.train.eval_batches):
                batch = build_batch(corpus, eval_cfg, "sync", i, pool=pool)
                hv, ha = retrieval_hits(contrastive_batch(encoders, batch, dev))
                v2a.append(hv.cpu().numpy())
                a2v.append(ha.cpu().numpy())
    finally:
        encoders.train(was_training)
    v2a_rate = float(np.concatenate(v2a).mean())
    a2v_rate = float(np.concatenate(a2v).mean())
    return {"retrieval_v2a": v2a_rate, "retrieval_a2v": a2v_rate, "retrieval_top1": 0.5 * (v2a_rate + a2v_rate)}


def evaluate_identity(encoders: AVSEncoders, corpus: Corpus, cfg: RunConfig, batches: int | None = None) -> float:
    """Identity classification accuracy on training-corpus frames."""
    eval_cfg = _eval_config(cfg)
    dev = next(encoders.parameters()).device
    was_training = encoders.training
    encoders.eval()
    hits = []
    try:
        with torch.no_grad():
            for i in range(batches or cfg.train.eval_batches):
                batch = build_batch(corpus, eval_cfg, "identity", i)
                _, logits = encoders.identity(images_to_tensor(batch.reference).to(dev))
                hits.append(logits.argmax(-1).cpu().numpy() == batch.labels)
    finally:
        encoders.train(was_training)
    return float(np.concatenate(hits).mean())


def _load_parts(encoders: AVSEncoders, ckpt: Checkpoint, parts) -> None:
    ckpt.require(*parts)
    for part in parts:
        try:
            getattr(encoders, part).load_state_dict(ckpt.modules[part])
        except RuntimeError as exc:
            raise ConfigurationError(
                f"{ckpt.stage} checkpoint module {part!r} does not fit the model config: {exc}"
            ) from exc


@dataclass
class DriveModels:
    """The trained networks inference needs, rebuilt from a checkpoint."""

    cfg: RunConfig
    encoders: AVSEncoders
    generator: torch.nn.Module


def models_from_checkpoint(ckpt: Checkpoint) -> DriveModels:
    if ckpt.stage != "joint":
        raise ConfigurationError(f"driving needs a joint-stage checkpoint, got stage={ckpt.stage}")
    ckpt.require(*DRIVE_PARTS)
    cfg = config_from_dict(ckpt.config)
    dev = device()
    encoders = AVSEncoders(cfg.model)
    _load_parts(encoders, ckpt, ENCODER_PARTS)
    generator = build_generator(cfg.model)
    try:
        generator.load_state_dict(ckpt.modules["generator"])
    except RuntimeError as exc:
        raise ConfigurationError(f"generator weights do not fit the model config: {exc}") from exc
    encoders.to(dev).eval()
    generator.to(dev).eval()
    return DriveModels(cfg=cfg, encoders=encoders, generator=generator)


class Trainer:
    """Models, optimizers and per-step updates for one stage."""

    def __init__(self, cfg: RunConfig, corpus: Corpus):
        self.cfg = apply_ablation(cfg).validate()
        self.corpus = corpus
        self.stage = self.cfg.train.stage
        self.step = 0
        self.device = device()
        self.weights = LossWeights.from_config(self.cfg.loss)
        self._check_corpus()
        seed_everything(self.cfg.train.seed)

        m = self.cfg.model
        self.encoders = AVSEncoders(m).to(self.device)
        self.generator = None
        self.discriminator = None
        self.perceptual = None
        self.loaded: set[str] = set()
        self._load_prerequisites()

        tc = self.cfg.train
        if self.stage == "identity":
            enc_params = list(self.encoders.identity.parameters())
        elif self.stage == "sync":
            parts = [p for p in SYNC_PARTS if not (p == "audio" and tc.freeze_audio)]
            enc_params = [q for p in parts for q in getattr(self.encoders, p).parameters()]
        else:
            self.generator = build_generator(m).to(self.device)
            self.discriminator = DiscriminatorPyramid(self.cfg.loss, seed=m.init_seed).to(self.device)
            self.perceptual = PerceptualNet(
                self.cfg.loss.perceptual_layers, self.cfg.loss.perceptual_seed, self.cfg.loss.perceptual_weights
            ).to(self.device)
            frozen = {p for p, flag in (("identity", tc.freeze_identity), ("audio", tc.freeze_audio)) if flag}
            for part in frozen:
                getattr(self.encoders, part).requires_grad_(False)
            enc_params = [q for p in ENCODER_PARTS if p not in frozen for q in getattr(self.encoders, p).parameters()]

        self.optimizers: dict[str, torch.optim.Optimizer] = {
            "encoders": torch.optim.Adam(enc_params, lr=tc.lr_encoders),
        }
        if self.stage == "joint":
            betas = tuple(tc.betas_gan)
            self.optimizers["generator"] = torch.optim.Adam(self.generator.parameters(), lr=tc.lr_gan, betas=betas)
            self.optimizers["discriminator"] = torch.optim.Adam(
                self.discriminator.parameters(), lr=tc.lr_gan, betas=betas
            )
        if tc.resume:
            self._resume(tc.resume)

    # --- setup ---

    def _check_corpus(self) -> None:
        m = self.cfg.model
        if self.corpus.image_size != m.image_size:
            raise ConfigurationError(
                f"corpus frames are {self.corpus.image_size}px but model.image_size={m.image_size}"
            )
        if self.corpus.num_identities > m.num_identities:
            raise ConfigurationError(
                f"corpus has identity ids up to {self.corpus.num_identities - 1} "
                f"but model.num_identities={m.num_identities}"
            )

    def _load_prerequisites(self) -> None:
        tc = self.cfg.train
        if self.stage == "sync":
            if tc.identity_ckpt:
                _load_parts(self.encoders, load_checkpoint(tc.identity_ckpt), ("identity",))
                self.loaded.add("identity")
            elif tc.require_identity:
                raise ConfigurationError("sync stage requires an identity checkpoint; set train.identity_ckpt")
        elif self.stage == "joint":
            if not tc.identity_ckpt:
                raise ConfigurationError("joint stage requires an identity checkpoint; set train.identity_ckpt")
            _load_parts(self.encoders, load_checkpoint(tc.identity_ckpt), ("identity",))
            self.loaded.add("identity")
            if self.weights.lambda_c == 0 and not tc.sync_ckpt:
                logger.info("lambda_c is 0; joint stage starts without a sync checkpoint")
            elif not tc.sync_ckpt:
                raise ConfigurationError("joint stage requires a sync checkpoint; set train.sync_ckpt")
            else:
                _load_parts(self.encoders, load_checkpoint(tc.sync_ckpt), SYNC_PARTS)
                self.loaded.update(SYNC_PARTS)

    def _networks(self) -> dict[str, torch.nn.Module]:
        nets = {p: getattr(self.encoders, p) for p in ENCODER_PARTS}
        if self.generator is not None:
            nets["generator"] = self.generator
            nets["discriminator"] = self.discriminator
        return nets

    def _saved_parts(self) -> list[str]:
        if self.stage == "identity":
            return ["identity"]
        if self.stage == "sync":
            return sorted(set(SYNC_PARTS) | self.loaded)
        return list(self._networks())

    def _resume(self, path: str) -> None:
        ckpt = load_checkpoint(path)
        if ckpt.stage != self.stage:
            raise ConfigurationError(f"cannot resume {self.stage} stage from a {ckpt.stage} checkpoint ({path})")
        nets = self._networks()
        ckpt.require(*self._saved_parts())
        for name, state in ckpt.modules.items():
            if name in nets:
                try:
                    nets[name].load_state_dict(state)
                except RuntimeError as exc:
                    raise ConfigurationError(f"resume checkpoint module {name!r} does not fit: {exc}") from exc
        for name, opt in self.optimizers.items():
            if name not in ckpt.optimizers:
                raise ConfigurationError(f"resume checkpoint has no optimizer state for {name!r}")
            opt.load_state_dict(ckpt.optimizers[name])
        if "torch" in ckpt.rng:
            torch.set_rng_state(ckpt.rng["torch"])
        self.step = ckpt.step
        logger.info(f"resumed stage={self.stage} step={self.step} path={path}")

    # --- steps ---

    def make_batch(self, step: int) -> Batch:
        return build_batch(self.corpus, self.cfg, self.stage, step)

    def _diverged(self, step: int, components: dict[str, float], run_dir: Path | None) -> None:
        bad = {k: v for k, v in components.items() if not math.isfinite(v)}
        if not bad:
            return
        if run_dir is not None:
            write_json(run_dir / DIVERGED_FILE, {
                "stage": self.stage,
                "step": step,
                "components": {k: (v if math.isfinite(v) else str(v)) for k, v in components.items()},
            })
        logger.error(f"training diverged stage={self.stage} step={step} bad={sorted(bad)}")
        raise TrainingDivergedError(step, components)

    def identity_step(self, batch: Batch, run_dir: Path | None = None) -> StepResult:
        opt = self.optimizers["encoders"]
        _, logits = self.encoders.identity(images_to_tensor(batch.reference).to(self.device))
        loss = identity_ce(logits, torch.from_numpy(batch.labels))
        self._diverged(batch.step, {"L_i": float(loss.detach())}, run_dir)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        value = float(loss.detach())
        return StepResult({"L_i": value, "L_total": value}, {"identity": _grad_norm(self.encoders.identity)})

    def sync_step(self, batch: Batch, run_dir: Path | None = None) -> StepResult:
        opt = self.optimizers["encoders"]
        cb = contrastive_batch(self.encoders, batch, self.device, audio_grad=not self.cfg.train.freeze_audio)
        loss, _, _ = sync_loss(cb, self.cfg.sync.temperature)
        self._diverged(batch.step, {"L_c": float(loss.detach())}, run_dir)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        value = float(loss.detach())
        return StepResult({"L_c": value, "L_total": value}, {"non_identity": _grad_norm(self.encoders.non_identity)})

    def joint_step(self, batch: Batch, run_dir: Path | None = None) -> StepResult:
        """One generator update followed by one discriminator update.

        f_cat = (f_i of the reference frame, audio content of the target's window,
        pose code of the augmented target). The reported components are the ones
        summed into the generator-side update.
        """
        enc, gen, disc = self.encoders, self.generator, self.discriminator
        tc, w = self.cfg.train, self.weights
        dev = self.device
        reference = images_to_tensor(batch.reference).to(dev)
        target = images_to_tensor(batch.target).to(dev)
        target_aug = images_to_tensor(batch.target_aug).to(dev)

        with torch.set_grad_enabled(not tc.freeze_identity):
            f_i, logits = enc.identity(reference)
        f_n = enc.non_identity(target_aug)
        f_p = enc.pose(f_n)

        with torch.set_grad_enabled(w.lambda_c > 0):
            cb = contrastive_batch(enc, batch, dev, positive_visual=enc.content(f_n),
                                   audio_grad=not tc.freeze_audio)
            l_c, _, _ = sync_loss(cb, self.cfg.sync.temperature)
        if w.lambda_c > 0:
            f_c = cb.positive_audio
        else:
            with torch.set_grad_enabled(not tc.freeze_audio):
                f_c = enc.audio_content(torch.from_numpy(batch.windows).to(dev))

        fake = gen(torch.cat([f_i, f_c, f_p], dim=-1))
        fake_out = disc(fake)
        with torch.no_grad():
            real_out = disc(target)
        components = {
            "L_GAN": adversarial_from_logits([], [lg for _, lg in fake_out], "generator"),
            "L_L1": feature_matching_from_outputs(real_out, fake_out),
            "L_vgg": perceptual_loss(target, fake, self.perceptual),
            "L_c": l_c,
            "L_i": identity_ce(logits, torch.from_numpy(batch.labels)),
        }
        values = {k: float(v.detach()) for k, v in components.items()}
        self._diverged(batch.step, values, run_dir)
        total = total_loss(components, w)

        self.optimizers["encoders"].zero_grad(set_to_none=True)
        self.optimizers["generator"].zero_grad(set_to_none=True)
        total.backward()
        grad_norms = {"pose": _grad_norm(enc.pose), "generator": _grad_norm(gen)}
        self.optimizers["encoders"].step()
        self.optimizers["generator"].step()

        opt_d = self.optimizers["discriminator"]
        opt_d.zero_grad(set_to_none=True)
        real_logits = [lg for _, lg in disc(target)]
        fake_logits = [lg for _, lg in disc(fake.detach())]
        d_loss = adversarial_from_logits(real_logits, fake_logits, "discriminator")
        self._diverged(batch.step, {"L_GAN_d": float(d_loss.detach())}, run_dir)
        d_loss.backward()
        opt_d.step()

        losses = {
            "L_GAN_g": values["L_GAN"],
            "L_GAN_d": float(d_loss.detach()),
            "L_L1": values["L_L1"],
            "L_vgg": values["L_vgg"],
            "L_c": values["L_c"],
            "L_i": values["L_i"],
            "L_total": float(total.detach()),
        }
        return StepResult(losses, grad_norms)

    def train_step(self, batch: Batch, run_dir: Path | None = None) -> StepResult:
        if self.stage == "identity":
            return self.identity_step(batch, run_dir)
        if self.stage == "sync":
            return self.sync_step(batch, run_dir)
        return self.joint_step(batch, run_dir)

    # --- bookkeeping ---

    def evaluate(self) -> dict[str, float]:
        metrics = {"identity_accuracy": evaluate_identity(self.encoders, self.corpus, self.cfg)}
        if self.stage != "identity":
            metrics.update(evaluate_retrieval(self.encoders, self.corpus, self.cfg))
        return metrics

    def checkpoint(self, metrics: dict | None = None) -> Checkpoint:
        nets = self._networks()
        return Checkpoint(
            stage=self.stage,
            step=self.step,
            modules={name: nets[name].state_dict() for name in self._saved_parts()},
            optimizers={name: opt.state_dict() for name, opt in self.optimizers.items()},
            rng={"torch": torch.get_rng_state()},
            config=self.cfg.to_dict(),
            metrics=dict(metrics or {}),
        )


def run_stage(cfg: RunConfig, corpus: Corpus, out_dir: str | Path | None = None) -> Checkpoint:
    """Train one stage to cfg.train.steps and return its final checkpoint.

    With out_dir set, per-step losses go to metrics.csv and checkpoints are saved
    there (periodic ones every train.checkpoint_every steps, the final one as
    ``<stage>.pcav``).
    """
    trainer = Trainer(cfg, corpus)
    tc = trainer.cfg.train
    run_dir = Path(out_dir) if out_dir is not None else None
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
    log = MetricsLog(run_dir / METRICS_FILE, tc.flush_every) if run_dir is not None else None
    start = trainer.step
    if start >= tc.steps:
        logger.warning(f"resume step {start} is already at train.steps={tc.steps}; nothing to train")
    logger.info(f"stage start stage={trainer.stage} steps={start + 1}..{tc.steps} ablation={tc.ablation}")

    trainer.encoders.train()
    try:
        batches = StepBatches(corpus, trainer.cfg, trainer.stage, start + 1, tc.steps + 1)
        for batch in step_loader(batches, tc.prefetch):
            t0 = time.perf_counter()
            result = trainer.train_step(batch, run_dir)
            trainer.step = batch.step
            wall_ms = (time.perf_counter() - t0) * 1000.0
            if log is not None:
                log.record(batch.step, trainer.stage, wall_ms=round(wall_ms, 3), **result.losses)
            if tc.log_every and batch.step % tc.log_every == 0:
                fields = " ".join(f"{k}={v:.4f}" for k, v in result.losses.items())
                logger.info(f"stage={trainer.stage} step={batch.step} {fields}")
            if run_dir is not None and tc.checkpoint_every and batch.step % tc.checkpoint_every == 0:
                save_checkpoint(trainer.checkpoint(), run_dir / _stage_checkpoint_name(trainer.stage, batch.step))
    finally:
        if log is not None:
            log.close()

    metrics = trainer.evaluate()
    logger.info(
        f"stage done stage={trainer.stage} step={trainer.step} "
        + " ".join(f"{k}={v:.4f}" for k, v in metrics.items())
    )
    ckpt = trainer.checkpoint(metrics)
    if run_dir is not None:
        save_checkpoint(ckpt, run_dir / _stage_checkpoint_name(trainer.stage))
    return ckpt
