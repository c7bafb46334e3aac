"""
Unit tests for config loading/merging and the shared utilities.
"""

import logging

import pytest

from src.config import CliConfig, ConfigError, EvalOptions, build_config, load_config
from src.utils import config_hash, configure_logging, format_auc, suggest_name


class TestLoadConfig:
    """Test reading config files."""

    def test_none(self):
        """Test that no file means no sections."""
        assert load_config(None) == {}

    def test_toml(self, tmp_path):
        """Test a TOML file with two sections."""
        path = tmp_path / "run.toml"
        path.write_text('[corpus]\nseed = 4\n\n[train]\nepochs = 2\nlr = 0.01\n')
        assert load_config(str(path)) == {"corpus": {"seed": 4}, "train": {"epochs": 2, "lr": 0.01}}

    def test_json(self, tmp_path):
        """Test the JSON form."""
        path = tmp_path / "run.json"
        path.write_text('{"eval": {"split": "val"}}')
        assert load_config(str(path)) == {"eval": {"split": "val"}}

    def test_unknown_section(self, tmp_path):
        """Test a misspelled section name gets a suggestion."""
        path = tmp_path / "run.toml"
        path.write_text("[trian]\nepochs = 2\n")
        with pytest.raises(ConfigError, match="did you mean 'train'"):
            load_config(str(path))

    def test_parse_error(self, tmp_path):
        """Test that malformed TOML raises ConfigError."""
        path = tmp_path / "run.toml"
        path.write_text("[train\n")
        with pytest.raises(ConfigError, match="Cannot parse"):
            load_config(str(path))

    def test_bad_extension(self, tmp_path):
        """Test that only .toml and .json are read."""
        path = tmp_path / "run.yaml"
        path.write_text("train: {}")
        with pytest.raises(ConfigError, match="toml or .json"):
            load_config(str(path))

    def test_missing_file(self, tmp_path):
        """Test that a missing file is an OSError."""
        with pytest.raises(OSError):
            load_config(str(tmp_path / "absent.toml"))


class TestBuildConfig:
    """Test merging sections and overrides."""

    def test_defaults(self):
        """Test that an empty config validates."""
        cfg = build_config({})
        assert isinstance(cfg, CliConfig)
        assert cfg.train.model.image_size == cfg.corpus.image_size

    def test_override_beats_file(self):
        """Test flag overrides take precedence; None overrides are ignored."""
        cfg = build_config({"train": {"epochs": 3}}, {"train.epochs": 5, "train.lr": None})
        assert cfg.train.epochs == 5
        assert cfg.train.lr == 5e-4

    def test_hold_out_derives_train_methods(self):
        """Test that the held-out method is removed from training."""
        cfg = build_config({}, {"eval.hold_out": "splice_hue"})
        assert cfg.train.train_methods == ["splice_noise", "splice_block"]

    def test_hold_out_unknown(self):
        """Test a misspelled held-out method."""
        with pytest.raises(ConfigError, match="did you mean 'splice_hue'"):
            build_config({}, {"eval.hold_out": "splice_hew"})

    def test_hold_out_also_trained(self):
        """Test that a method cannot be trained on and held out."""
        with pytest.raises(ConfigError, match="both"):
            build_config({"train": {"train_methods": ["splice_hue"]}}, {"eval.hold_out": "splice_hue"})

    def test_hold_out_only_method(self):
        """Test holding out the sole method."""
        with pytest.raises(ConfigError, match="nothing to train"):
            build_config({"corpus": {"methods": ["splice_hue"]}}, {"eval.hold_out": "splice_hue"})

    def test_deferred_method_check(self):
        """Test that an imported method name passes once checked against its corpus."""
        cfg = build_config({}, {"eval.hold_out": "splice_x"}, check_methods=False)
        cfg.check_methods(["splice_x", "splice_y"])
        assert cfg.train.train_methods == ["splice_y"]

    def test_deferred_check_unknown(self):
        """Test that the deferred check still rejects a method absent from the corpus."""
        cfg = build_config({}, {"eval.hold_out": "splice_z"}, check_methods=False)
        with pytest.raises(ConfigError, match="hold-out method"):
            cfg.check_methods(["splice_x", "splice_y"])

    def test_unknown_key(self):
        """Test a misspelled key names the closest one."""
        with pytest.raises(ConfigError, match="did you mean 'epochs'"):
            build_config({"train": {"epoch": 3}})

    def test_bad_override(self):
        """Test that overrides need a section prefix."""
        with pytest.raises(ConfigError, match="Bad override"):
            build_config({}, {"epochs": 3})

    def test_sigma_shared(self):
        """Test that one sigma drives both the Xh filter and the MHFE kernels."""
        cfg = build_config({"model": {"sigma": 0.7}})
        assert cfg.train.sigma == 0.7 and cfg.train.model.sigma == 0.7
        cfg = build_config({"model": {"sigma": 0.7}, "train": {"sigma": 1.5}})
        assert cfg.train.model.sigma == 1.5

    def test_model_follows_corpus_size(self):
        """Test the model image size defaults to the corpus one."""
        cfg = build_config({"corpus": {"image_size": 16}})
        assert cfg.train.model.image_size == 16

    def test_size_conflict(self):
        """Test that explicit model and corpus sizes must agree."""
        with pytest.raises(ConfigError, match="image_size"):
            build_config({"corpus": {"image_size": 16}, "model": {"image_size": 32}})

    def test_invalid_value(self):
        """Test that section validation errors become ConfigError."""
        with pytest.raises(ConfigError, match="batch size"):
            build_config({"train": {"batch_size": 3}})

    def test_wrong_type(self):
        """Test that a value of the wrong type is reported."""
        with pytest.raises(ConfigError):
            build_config({"train": {"epochs": "many"}})

    def test_eval_split(self):
        """Test the eval split check."""
        with pytest.raises(ConfigError, match="split"):
            EvalOptions(split="held").validate()

    def test_hash_stable(self):
        """Test equal configs hash equally and a change alters the hash."""
        assert build_config({}).hash == build_config({}).hash
        assert build_config({}).hash != build_config({"train": {"seed": 1}}).hash


class TestUtils:
    """Test shared helpers."""

    def test_suggest_name(self):
        """Test close and distant names."""
        assert suggest_name("splice_hew", ["splice_noise", "splice_hue"]) == "splice_hue"
        assert suggest_name("zzz", ["splice_noise"]) is None

    def test_config_hash_key_order(self):
        """Test that key order does not change the hash."""
        assert config_hash({"a": 1, "b": [1, 2]}) == config_hash({"b": [1, 2], "a": 1})

    def test_format_auc(self):
        """Test AUC display."""
        assert format_auc(0.93125) == "0.9313"
        assert format_auc(None) == "N/A"

    def test_configure_logging_env(self, monkeypatch):
        """Test the level comes from FORGESEM_LOG when no flag is given."""
        monkeypatch.setenv("FORGESEM_LOG", "debug")
        assert configure_logging() == logging.DEBUG
        assert configure_logging("error") == logging.ERROR

    def test_configure_logging_unknown(self, monkeypatch):
        """Test that an unknown level falls back to warning."""
        monkeypatch.delenv("FORGESEM_LOG", raising=False)
        assert configure_logging("loud") == logging.WARNING
