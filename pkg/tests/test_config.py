from pathlib import Path

import pytest

from forgeryloc.config import Config, ConfigError, TrainConfig, dump_config, load_config

DEFAULT_YAML = Path(__file__).resolve().parents[1] / "configs" / "default.yaml"


def test_default_yaml_matches_defaults():
    assert load_config(DEFAULT_YAML) == Config()


def test_missing_file_means_defaults():
    assert load_config(None) == Config()


def test_dump_and_reload(tmp_path):
    cfg = Config.from_dict({"model": {"use_bafe": False}, "train_fdn": {"lambda_c": 0.0}})
    dump_config(cfg, tmp_path / "c.yaml")
    assert load_config(tmp_path / "c.yaml") == cfg


@pytest.mark.parametrize("text, key", [
    ("model:\n  use_bafee: false\n", "model.use_bafee"),
    ("train_fdn:\n  lamda_c: 0.1\n", "train_fdn.lamda_c"),
    ("modle:\n  use_bafe: false\n", "modle"),
])
def test_unknown_keys_are_named(tmp_path, text, key):
    (tmp_path / "c.yaml").write_text(text)
    with pytest.raises(ConfigError, match=key):
        load_config(tmp_path / "c.yaml")


def test_bad_values_rejected():
    with pytest.raises(ConfigError):
        Config.from_dict({"inference": {"theta_f": 1.5}})
    with pytest.raises(ConfigError):
        Config.from_dict({"train_fdn": {"batch_size": 0}})
    with pytest.raises(ConfigError, match="preset"):
        Config.from_dict({"train_fdn": {"preset": "huge"}})


def test_pretrained_presets():
    fdn = TrainConfig.pretrained_fdn()
    assert (fdn.epochs, fdn.lr, fdn.weight_decay) == (30, 1e-7, 1e-4)
    prn = TrainConfig.pretrained_prn()
    assert (prn.epochs, prn.lr, prn.weight_decay) == (50, 1e-3, 1e-3)
    cfg = Config.from_dict({"train_fdn": {"preset": "pretrained"}})
    assert cfg.train_fdn.lr == 1e-7 and cfg.train_fdn.stage == "fdn"


def test_loss_weight_defaults():
    cfg = Config()
    assert (cfg.train_fdn.lambda_c, cfg.train_fdn.lambda_b) == (0.15, 0.1)
    assert (cfg.train_prn.lambda_r, cfg.train_fdn.alpha) == (0.15, 0.3)
    assert (cfg.inference.theta_f, cfg.inference.theta_p) == (0.5, 0.5)
