"""Desk-scale runs on the default synthetic corpus. Enable with PCAVS_RUN_SLOW=1."""

import time

import numpy as np
import pytest
import torch

from pcavs.config import DataConfig, RunConfig, config_from_dict
from pcavs.corpus import build_corpus
from pcavs.encoders import AVSEncoders
from pcavs.metrics import evaluate
from pcavs.metrics_log import read_metrics
from pcavs.trainer import METRICS_FILE, models_from_checkpoint, run_stage
from pcavs.utils import images_to_tensor

pytestmark = pytest.mark.slow

IDENTITY_STEPS = 500
SYNC_STEPS = 2000
JOINT_STEPS = 5000
HELD_OUT_IDENTITIES = 2
SMOOTHING = 50


def _cfg(**train) -> RunConfig:
    return config_from_dict({"data": {"holdout_identities": HELD_OUT_IDENTITIES}, "train": train}).validate()


@pytest.fixture(scope="module")
def corpus():
    return build_corpus(DataConfig(holdout_identities=HELD_OUT_IDENTITIES))


@pytest.fixture(scope="module")
def pretrained(corpus, tmp_path_factory):
    root = tmp_path_factory.mktemp("pretrain")
    identity_ckpt = run_stage(_cfg(stage="identity", steps=IDENTITY_STEPS), corpus, root / "identity")
    identity = root / "identity" / "identity.pcav"
    started = time.monotonic()
    sync = run_stage(_cfg(stage="sync", steps=SYNC_STEPS, identity_ckpt=str(identity)), corpus, root / "sync")
    return {"identity": identity, "identity_ckpt": identity_ckpt, "sync": root / "sync" / "sync.pcav",
            "sync_ckpt": sync, "sync_seconds": time.monotonic() - started}


def _joint(corpus, pretrained, out, **train):
    values = {"stage": "joint", "steps": JOINT_STEPS, "identity_ckpt": str(pretrained["identity"]),
              "sync_ckpt": str(pretrained["sync"])}
    values.update(train)
    ckpt = run_stage(_cfg(**values), corpus, out)
    models = models_from_checkpoint(ckpt)
    return ckpt, evaluate(models, corpus, out_dir=out / "eval"), out


@pytest.fixture(scope="module")
def full_run(corpus, pretrained, tmp_path_factory):
    return _joint(corpus, pretrained, tmp_path_factory.mktemp("full"))


class TestIdentityStage:
    def test_training_accuracy(self, pretrained):
        assert pretrained["identity_ckpt"].metrics["identity_accuracy"] > 0.95

    def test_identities_get_distinct_classes(self, corpus, pretrained):
        ckpt = pretrained["identity_ckpt"]
        encoders = AVSEncoders(config_from_dict(ckpt.config).model).eval()
        encoders.identity.load_state_dict(ckpt.modules["identity"])
        seen = sorted({corpus.clips[i].identity_id for i in corpus.train})
        refs = [next(corpus.clips[i].frames[0] for i in corpus.train if corpus.clips[i].identity_id == n) for n in seen]
        with torch.no_grad():
            _, logits = encoders.identity(images_to_tensor(np.stack(refs)))
        assert len(set(logits.argmax(-1).tolist())) == len(seen)


class TestSyncLearning:
    def test_retrieval_top1(self, pretrained):
        assert pretrained["sync_ckpt"].metrics["retrieval_top1"] >= 0.8

    def test_runtime(self, pretrained):
        assert pretrained["sync_seconds"] <= 15 * 60

    def test_joint_keeps_sync(self, pretrained, full_run):
        ckpt, _, _ = full_run
        assert ckpt.metrics["retrieval_top1"] >= pretrained["sync_ckpt"].metrics["retrieval_top1"] - 0.10


class TestJointTraining:
    def test_total_loss_trends_down(self, full_run):
        _, _, out = full_run
        totals = np.array([float(r["L_total"]) for r in read_metrics(out / METRICS_FILE)])
        smoothed = np.convolve(totals, np.ones(SMOOTHING) / SMOOTHING, mode="valid")
        assert smoothed[-1] < smoothed[0]


class TestModularization:
    def test_pose_lives_in_pose_code(self, full_run):
        _, report, _ = full_run
        assert report["pose_probe_r2"] >= 0.8
        assert report["content_probe_r2"] <= 0.3

    def test_zero_pose_frontalizes_unseen_faces(self, corpus, full_run):
        _, report, _ = full_run
        assert corpus.heldout_identities == [14, 15]
        assert report["frontal_fraction"] >= 0.9


class TestAblationDirection:
    def test_without_sync_loss(self, corpus, pretrained, full_run, tmp_path):
        ckpt, report, _ = _joint(corpus, pretrained, tmp_path, ablation="no-sync-loss", sync_ckpt="")
        full_ckpt, full_report, _ = full_run
        assert ckpt.metrics["retrieval_top1"] < full_ckpt.metrics["retrieval_top1"]
        assert report["pose_probe_r2"] < full_report["pose_probe_r2"]

    def test_wider_pose_code(self, corpus, pretrained, full_run, tmp_path):
        _, report, _ = _joint(corpus, pretrained, tmp_path, ablation="pose-dim-36")
        assert report["pose_probe_r2"] <= full_run[1]["pose_probe_r2"]
