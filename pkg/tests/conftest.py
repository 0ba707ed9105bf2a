"""Shared fixtures: a tiny configuration that trains in seconds"""

import pytest

from adaptrack.config import (
    DataConfig,
    EncoderConfig,
    HeadConfig,
    SceneConfig,
    Settings,
    TCAConfig,
    TrainConfig,
)


def make_tiny_settings(**train_overrides) -> Settings:
    train = dict(
        epochs_stage1=2,
        epochs_stage2=1,
        steps_per_epoch=2,
        batch_size=4,
        lr_drop_epoch=None,
        tau=0.3,
    )
    train.update(train_overrides)
    return Settings(
        scene=SceneConfig(
            frame_size=48, length=10, target_min_size=8.0, target_max_size=12.0, distractors=1
        ),
        data=DataConfig(
            template_size=16,
            search_size=32,
            source_pools=2,
            sequences_per_pool=1,
            pairs_per_sequence=4,
            target_sequences_per_domain=1,
            target_sequence_length=8,
            target_pairs_per_sequence=4,
            eval_sequences_per_domain=1,
            eval_sequence_length=6,
        ),
        encoder=EncoderConfig(
            patch_size=8,
            embed_dim=16,
            depth=1,
            heads=2,
            template_size=16,
            search_size=32,
            bank_tokens=2,
        ),
        head=HeadConfig(channels=8),
        tca=TCAConfig(max_iter=200),
        train=TrainConfig(**train),
    )


@pytest.fixture
def tiny_settings() -> Settings:
    return make_tiny_settings()


TINY_CONFIG = """\
# tiny run for command-line tests
scene.frame_size=48
scene.length=10
scene.target_min_size=8
scene.target_max_size=12
scene.distractors=1
data.template_size=16
data.search_size=32
data.source_pools=2
data.sequences_per_pool=1
data.pairs_per_sequence=4
data.target_sequences_per_domain=1
data.target_sequence_length=8
data.target_pairs_per_sequence=4
data.eval_sequences_per_domain=1
data.eval_sequence_length=6
encoder.patch_size=8
encoder.embed_dim=16
encoder.depth=1
encoder.heads=2
encoder.template_size=16
encoder.search_size=32
encoder.bank_tokens=2
head.channels=8
tca.max_iter=200
train.epochs_stage1=2
train.warmup_epochs=1
train.epochs_stage2=1
train.steps_per_epoch=2
train.batch_size=4
train.tau=0.3
"""


@pytest.fixture
def tiny_config_file(tmp_path):
    path = tmp_path / "tiny.env"
    path.write_text(TINY_CONFIG)
    return path
