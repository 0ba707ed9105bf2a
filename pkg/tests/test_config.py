"""Tests for configuration loading and validation"""

from pathlib import Path

import pytest

from adaptrack.config import (
    EmaFrequency,
    RunConfig,
    Settings,
    TrainConfig,
    load_settings,
    parse_overrides,
)
from adaptrack.errors import ConfigurationError


class TestDefaults:
    def test_documented_defaults(self):
        s = Settings()
        assert s.train.alpha == 0.99
        assert s.train.ema_frequency == EmaFrequency.PER_EPOCH
        assert s.train.warmup_epochs == 0
        assert s.tca.epsilon == 0.05
        assert s.train.loss.lambda_ == 10.0
        assert s.data.target_ratio == 4.0

    def test_ratios(self):
        ratios = Settings().data.ratios()
        assert list(ratios) == [
            "source_0", "source_1", "source_2", "source_3", "fog", "dark", "rain"
        ]
        assert ratios["fog"] == 4.0 and ratios["source_0"] == 1.0

    def test_unknown_field_rejected(self):
        with pytest.raises(ValueError):
            TrainConfig(alpha_typo=0.5)

    def test_crop_sizes_must_agree(self):
        with pytest.raises(ValueError, match="crop sizes must agree"):
            Settings.model_validate({"data": {"search_size": 48}})


class TestLoadSettings:
    def test_file_and_overrides(self, tiny_config_file):
        s = load_settings(tiny_config_file, {"train.alpha": "0.9"})
        assert s.scene.frame_size == 48
        assert s.encoder.embed_dim == 16
        assert s.train.alpha == 0.9

    def test_override_wins_over_file(self, tiny_config_file):
        s = load_settings(tiny_config_file, {"train.tau": "0.7"})
        assert s.train.tau == 0.7

    def test_lambda_alias(self):
        s = load_settings(overrides={"train.loss.lambda": "2.5"})
        assert s.train.loss.lambda_ == 2.5

    def test_enum_value(self):
        s = load_settings(overrides={"train.ema_frequency": "per_batch"})
        assert s.train.ema_frequency == EmaFrequency.PER_BATCH

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigurationError, match="not found"):
            load_settings(tmp_path / "missing.env")

    def test_invalid_value(self):
        with pytest.raises(ConfigurationError, match="train.alpha"):
            load_settings(overrides={"train.alpha": "1.5"})

    def test_unknown_key(self):
        with pytest.raises(ConfigurationError, match="Invalid config value"):
            load_settings(overrides={"train.nonsense": "1"})

    def test_key_without_section(self):
        with pytest.raises(ConfigurationError, match="section.field"):
            load_settings(overrides={"alpha": "0.5"})

    def test_key_through_scalar(self):
        with pytest.raises(ConfigurationError, match="addresses a scalar"):
            load_settings(overrides={"train.alpha": "0.5", "train.alpha.x": "1"})

    def test_key_without_value(self, tmp_path):
        path = tmp_path / "bad.env"
        path.write_text("train.alpha\n")
        with pytest.raises(ConfigurationError, match="has no value"):
            load_settings(path)


class TestOverrides:
    def test_parse(self):
        assert parse_overrides(["a.b=1", " c.d = x=y "]) == {"a.b": "1", "c.d": "x=y"}
        assert parse_overrides(None) == {}

    def test_malformed(self):
        with pytest.raises(ConfigurationError, match="key=value"):
            parse_overrides(["train.alpha"])

    def test_with_overrides_copies(self):
        base = Settings()
        changed = base.with_overrides({"train.alpha": 0.5})
        assert changed.train.alpha == 0.5
        assert base.train.alpha == 0.99


class TestFingerprint:
    def test_stable(self):
        assert Settings().fingerprint() == Settings().fingerprint()
        assert len(Settings().fingerprint()) == 64

    def test_changes_with_values(self):
        changed = Settings().with_overrides({"train.alpha": 0.5})
        assert Settings().fingerprint() != changed.fingerprint()


class TestRunConfig:
    def test_defaults(self):
        run = RunConfig()
        assert run.out_dir == Path("runs/default")
        assert run.seed == 0 and run.threads == 1 and run.deterministic

    def test_string_path(self):
        assert RunConfig(out_dir="x/y").out_dir == Path("x/y")

    def test_negative_seed(self):
        with pytest.raises(ConfigurationError, match="seed"):
            RunConfig(seed=-1)

    def test_threads(self):
        with pytest.raises(ConfigurationError, match="threads"):
            RunConfig(threads=0)
