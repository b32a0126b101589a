import copy

import pytest

from pcavs.config import RunConfig, config_from_dict, settings
from pcavs.corpus import build_corpus
from pcavs.encoders import AVSEncoders
from pcavs.trainer import run_stage

# 16 px frames, a handful of channels; every stage finishes in seconds on CPU.
TINY = {
    "data": {"identities": 3, "clips_per_id": 4, "frames": 12, "size": 16, "seed": 3, "holdout_clips_per_id": 2},
    "model": {
        "image_size": 16, "d_n": 32, "l_c": 16, "d_i": 16, "num_identities": 3,
        "encoder_widths": "8,16", "audio_widths": "8,16",
        "generator_blocks": 2, "generator_channels": "32,16,8", "stem_size": 4, "mlp_hidden": 32,
    },
    "loss": {"num_scales": 2, "disc_layers": 2, "disc_channels": 8, "perceptual_layers": 2},
    "sync": {"negatives": 4},
    "train": {"steps": 3, "batch_size": 4, "log_every": 1, "flush_every": 2, "prefetch": 2, "eval_batches": 2},
    "eval": {"sync_clip_frames": 31, "sync_clips": 1, "max_clips": 2},
}


def tiny_config(**sections) -> RunConfig:
    """TINY with per-section overrides, e.g. tiny_config(train={"stage": "sync"})."""
    data = copy.deepcopy(TINY)
    for name, values in sections.items():
        data.setdefault(name, {}).update(values)
    return config_from_dict(data).validate()


def pytest_collection_modifyitems(config, items):
    if settings.RUN_SLOW:
        return
    skip = pytest.mark.skip(reason="acceptance-scale run; set PCAVS_RUN_SLOW=1")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


@pytest.fixture
def tiny_cfg() -> RunConfig:
    return tiny_config()


@pytest.fixture(scope="session")
def tiny_corpus():
    return build_corpus(tiny_config().data)


@pytest.fixture
def tiny_encoders(tiny_cfg):
    return AVSEncoders(tiny_cfg.model).eval()


@pytest.fixture(scope="session")
def staged_checkpoints(tmp_path_factory, tiny_corpus):
    """Paths of tiny identity, sync and joint checkpoints, each stage loading the previous."""
    root = tmp_path_factory.mktemp("stages")
    run_stage(tiny_config(train={"stage": "identity"}), tiny_corpus, root / "identity")
    identity = root / "identity" / "identity.pcav"
    run_stage(tiny_config(train={"stage": "sync", "identity_ckpt": str(identity)}), tiny_corpus, root / "sync")
    sync = root / "sync" / "sync.pcav"
    run_stage(
        tiny_config(train={"stage": "joint", "identity_ckpt": str(identity), "sync_ckpt": str(sync)}),
        tiny_corpus, root / "joint",
    )
    return {"identity": identity, "sync": sync, "joint": root / "joint" / "joint.pcav", "root": root}
