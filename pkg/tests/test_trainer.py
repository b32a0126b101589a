import math
from unittest.mock import patch

import pytest
import torch

from pcavs.checkpoint import load_checkpoint
from pcavs.corpus import build_batch
from pcavs.errors import ConfigurationError, TrainingDivergedError
from pcavs.losses import identity_ce as real_identity_ce
from pcavs.metrics_log import read_metrics
from pcavs.trainer import (
    DIVERGED_FILE,
    METRICS_FILE,
    Trainer,
    contrastive_batch,
    evaluate_retrieval,
    models_from_checkpoint,
    run_stage,
)
from pcavs.utils import read_json
from tests.conftest import tiny_config


def _joint_cfg(paths, **train):
    values = {"stage": "joint", "identity_ckpt": str(paths["identity"]), "sync_ckpt": str(paths["sync"])}
    values.update(train)
    return tiny_config(train=values)


def _assert_same_modules(a, b):
    assert a.modules.keys() == b.modules.keys()
    for name in a.modules:
        for key, value in a.modules[name].items():
            assert torch.equal(value, b.modules[name][key]), f"{name}.{key}"


# --- prerequisites ---

class TestPrerequisites:
    def test_joint_needs_identity(self, tiny_corpus):
        with pytest.raises(ConfigurationError, match="identity"):
            Trainer(tiny_config(train={"stage": "joint"}), tiny_corpus)

    def test_joint_needs_sync(self, tiny_corpus, staged_checkpoints):
        cfg = tiny_config(train={"stage": "joint", "identity_ckpt": str(staged_checkpoints["identity"])})
        with pytest.raises(ConfigurationError, match="sync"):
            Trainer(cfg, tiny_corpus)

    def test_joint_without_sync_when_sync_loss_off(self, tiny_corpus, staged_checkpoints):
        cfg = tiny_config(train={"stage": "joint", "ablation": "no-sync-loss",
                                 "identity_ckpt": str(staged_checkpoints["identity"])})
        trainer = Trainer(cfg, tiny_corpus)
        assert trainer.weights.lambda_c == 0.0

    def test_sync_require_identity(self, tiny_corpus):
        with pytest.raises(ConfigurationError):
            Trainer(tiny_config(train={"stage": "sync", "require_identity": True}), tiny_corpus)

    def test_sync_without_identity_allowed(self, tiny_corpus):
        assert Trainer(tiny_config(train={"stage": "sync"}), tiny_corpus).loaded == set()

    def test_identity_weights_loaded(self, tiny_corpus, staged_checkpoints):
        trainer = Trainer(_joint_cfg(staged_checkpoints), tiny_corpus)
        saved = load_checkpoint(staged_checkpoints["identity"]).modules["identity"]
        for key, value in trainer.encoders.identity.state_dict().items():
            assert torch.equal(value, saved[key])

    def test_mismatched_model_rejected(self, tiny_corpus, staged_checkpoints):
        cfg = _joint_cfg(staged_checkpoints)
        cfg.model.d_i = 8
        with pytest.raises(ConfigurationError, match="does not fit"):
            Trainer(cfg, tiny_corpus)

    def test_corpus_size_checked(self, tiny_corpus):
        cfg = tiny_config(train={"stage": "identity"})
        cfg.model.image_size = 32
        cfg.model.stem_size = 8
        with pytest.raises(ConfigurationError, match="corpus frames"):
            Trainer(cfg, tiny_corpus)

    def test_too_few_identity_classes(self, tiny_corpus):
        cfg = tiny_config(train={"stage": "identity"})
        cfg.model.num_identities = 2
        with pytest.raises(ConfigurationError, match="num_identities"):
            Trainer(cfg, tiny_corpus)


# --- steps ---

class TestSteps:
    def test_joint_step_updates_pose_mapping(self, tiny_corpus, staged_checkpoints):
        trainer = Trainer(_joint_cfg(staged_checkpoints), tiny_corpus)
        before = trainer.encoders.pose.fc.weight.detach().clone()
        result = trainer.train_step(trainer.make_batch(1))
        assert result.grad_norms["pose"] > 0
        assert result.grad_norms["generator"] > 0
        assert not torch.equal(before, trainer.encoders.pose.fc.weight)
        assert set(result.losses) == {"L_GAN_g", "L_GAN_d", "L_L1", "L_vgg", "L_c", "L_i", "L_total"}
        assert all(math.isfinite(v) for v in result.losses.values())

    def test_sync_loss_still_reported_when_off(self, tiny_corpus, staged_checkpoints, tmp_path):
        cfg = tiny_config(train={"stage": "joint", "ablation": "no-sync-loss", "steps": 2,
                                 "identity_ckpt": str(staged_checkpoints["identity"])})
        run_stage(cfg, tiny_corpus, tmp_path)
        rows = read_metrics(tmp_path / METRICS_FILE)
        assert len(rows) == 2
        assert all(float(r["L_c"]) > 0 for r in rows)

    @pytest.mark.parametrize("ablation,content_grads", [("no-sync-loss", False), ("none", True)])
    def test_content_head_gradient_follows_lambda_c(self, tiny_corpus, staged_checkpoints, ablation, content_grads):
        trainer = Trainer(_joint_cfg(staged_checkpoints, ablation=ablation), tiny_corpus)
        trainer.train_step(trainer.make_batch(1))
        grads = [p.grad for p in trainer.encoders.content.parameters()]
        if content_grads:
            assert any(g is not None and g.abs().sum() > 0 for g in grads)
        else:
            assert all(g is None for g in grads)

    def test_sync_step_trains_content_space(self, tiny_corpus):
        trainer = Trainer(tiny_config(train={"stage": "sync"}), tiny_corpus)
        before = trainer.encoders.audio.proj.weight.detach().clone()
        result = trainer.train_step(trainer.make_batch(1))
        assert result.losses["L_c"] > 0
        assert not torch.equal(before, trainer.encoders.audio.proj.weight)

    def test_identity_step_touches_only_identity(self, tiny_corpus):
        trainer = Trainer(tiny_config(train={"stage": "identity"}), tiny_corpus)
        before = trainer.encoders.non_identity.proj.weight.detach().clone()
        trainer.train_step(trainer.make_batch(1))
        assert torch.equal(before, trainer.encoders.non_identity.proj.weight)

    def test_contrastive_batch_shapes(self, tiny_corpus, tiny_cfg, tiny_encoders):
        batch = build_batch(tiny_corpus, tiny_cfg, "sync", 1)
        with torch.no_grad():
            cb = contrastive_batch(tiny_encoders, batch, torch.device("cpu"))
        assert cb.positive_visual.shape == (4, 16)
        assert cb.negative_audios.shape == (4, 4, 16)
        assert cb.negative_visuals.shape == (4, 4, 16)

    def test_retrieval_rates_in_range(self, tiny_corpus, tiny_cfg, tiny_encoders):
        rates = evaluate_retrieval(tiny_encoders, tiny_corpus, tiny_cfg)
        for key in ("retrieval_v2a", "retrieval_a2v", "retrieval_top1"):
            assert 0.0 <= rates[key] <= 1.0
        assert rates["retrieval_top1"] == pytest.approx(0.5 * (rates["retrieval_v2a"] + rates["retrieval_a2v"]))


# --- divergence ---

class TestDivergence:
    def test_nan_loss_stops_run(self, tiny_corpus, tmp_path):
        with patch("pcavs.trainer.identity_ce", return_value=torch.tensor(float("nan"), requires_grad=True)):
            with pytest.raises(TrainingDivergedError) as excinfo:
                run_stage(tiny_config(train={"stage": "identity"}), tiny_corpus, tmp_path)
        assert excinfo.value.step == 1
        record = read_json(tmp_path / DIVERGED_FILE)
        assert record["step"] == 1
        assert record["components"]["L_i"] == "nan"
        assert not (tmp_path / "identity.pcav").exists()

    def test_metrics_flushed_before_failure(self, tiny_corpus, tmp_path):
        calls = {"n": 0}

        def flaky(logits, labels):
            calls["n"] += 1
            if calls["n"] == 3:
                return torch.tensor(float("inf"), requires_grad=True)
            return real_identity_ce(logits, labels)

        with patch("pcavs.trainer.identity_ce", side_effect=flaky):
            with pytest.raises(TrainingDivergedError):
                run_stage(tiny_config(train={"stage": "identity", "flush_every": 100}), tiny_corpus, tmp_path)
        assert [r["step"] for r in read_metrics(tmp_path / METRICS_FILE)] == ["1", "2"]


# --- runs ---

class TestRunStage:
    def test_outputs(self, staged_checkpoints):
        for stage in ("identity", "sync", "joint"):
            run_dir = staged_checkpoints["root"] / stage
            rows = read_metrics(run_dir / METRICS_FILE)
            assert [r["step"] for r in rows] == ["1", "2", "3"]
            assert all(r["stage"] == stage for r in rows)
            ckpt = load_checkpoint(run_dir / f"{stage}.pcav")
            assert ckpt.step == 3

    def test_stage_metrics(self, staged_checkpoints):
        sync = load_checkpoint(staged_checkpoints["sync"])
        assert 0.0 <= sync.metrics["retrieval_top1"] <= 1.0
        identity = load_checkpoint(staged_checkpoints["identity"])
        assert "identity_accuracy" in identity.metrics
        assert "retrieval_top1" not in identity.metrics

    def test_sync_checkpoint_carries_identity(self, staged_checkpoints):
        sync = load_checkpoint(staged_checkpoints["sync"])
        sync.require("identity", "non_identity", "content", "audio")

    def test_deterministic(self, tiny_corpus):
        cfg = tiny_config(train={"stage": "identity"})
        _assert_same_modules(run_stage(cfg, tiny_corpus), run_stage(cfg, tiny_corpus))

    def test_resume_matches_uninterrupted(self, tiny_corpus, staged_checkpoints, tmp_path):
        full = run_stage(_joint_cfg(staged_checkpoints, steps=4), tiny_corpus)
        run_stage(_joint_cfg(staged_checkpoints, steps=2, checkpoint_every=2), tiny_corpus, tmp_path / "a")
        resumed = run_stage(
            _joint_cfg(staged_checkpoints, steps=4, resume=str(tmp_path / "a" / "joint_step000002.pcav")),
            tiny_corpus, tmp_path / "b",
        )
        assert resumed.step == 4
        _assert_same_modules(full, resumed)
        assert [r["step"] for r in read_metrics(tmp_path / "b" / METRICS_FILE)] == ["3", "4"]

    def test_resume_from_other_stage_rejected(self, tiny_corpus, staged_checkpoints):
        cfg = tiny_config(train={"stage": "sync", "resume": str(staged_checkpoints["identity"])})
        with pytest.raises(ConfigurationError, match="resume"):
            Trainer(cfg, tiny_corpus)

    def test_periodic_checkpoints(self, tiny_corpus, tmp_path):
        run_stage(tiny_config(train={"stage": "identity", "steps": 4, "checkpoint_every": 2}), tiny_corpus, tmp_path)
        assert (tmp_path / "identity_step000002.pcav").is_file()
        assert (tmp_path / "identity_step000004.pcav").is_file()
        assert (tmp_path / "identity.pcav").is_file()


# --- drive models ---

class TestDriveModels:
    def test_from_joint(self, staged_checkpoints):
        models = models_from_checkpoint(load_checkpoint(staged_checkpoints["joint"]))
        assert not models.encoders.training
        assert models.cfg.model.image_size == 16

    def test_sync_checkpoint_rejected(self, staged_checkpoints):
        with pytest.raises(ConfigurationError, match="joint"):
            models_from_checkpoint(load_checkpoint(staged_checkpoints["sync"]))

    def test_incomplete_checkpoint_rejected(self, staged_checkpoints):
        ckpt = load_checkpoint(staged_checkpoints["joint"])
        del ckpt.modules["generator"]
        with pytest.raises(ConfigurationError, match="generator"):
            models_from_checkpoint(ckpt)
