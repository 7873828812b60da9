import json
import pytest
from fitmask.config import TrainConfig, EncoderConfig, LossWeights
from fitmask.errors import ConfigurationError


def test_defaults():
    cfg = TrainConfig()
    assert (cfg.batch_size, cfg.lr, cfg.momentum, cfg.weight_decay, cfg.epochs) == (128, 0.03, 0.9, 1e-4, 100)
    assert (cfg.K, cfg.tau, cfg.loss.lam, cfg.loss.nu) == (32, 0.4, 1.0, 0.01)
    assert cfg.encoder.grid == 4


def test_presets():
    paper = TrainConfig.paper_scale()
    assert paper.encoder.channels == 2048
    assert paper.encoder.projector_dims == (2048, 2048, 256)
    assert paper.augment.size == 224 and paper.augment.test_resize == 256
    assert paper.queue_size == 65536 and paper.m == 0.999

    desk = TrainConfig.desk_scale(K=8)
    assert desk.K == 8
    assert desk.batch_size == 32 and desk.epochs == 40
    assert desk.augment.test_resize == 72
    assert desk.bn_splits == 4 and paper.bn_splits == 1
    assert not desk.encoder.projector_bn and paper.encoder.projector_bn
    assert desk.augment.crop_scale == (0.6, 1.0) and desk.augment.blur_p == 0.0


def test_json_roundtrip(tmp_path):
    cfg = TrainConfig.desk_scale().override({'loss.nu': 0.1, 'encoder.projector_dims': [32, 64]})
    path = cfg.to_json(tmp_path / "c.json")
    back = TrainConfig.from_json(path)
    assert back == cfg
    assert back.encoder.projector_dims == (32, 64)
    assert back.config_hash == cfg.config_hash


def test_hash_tracks_values():
    cfg = TrainConfig.desk_scale()
    assert cfg.override({'seed': 1}).config_hash != cfg.config_hash
    assert cfg.override({'seed': None}).config_hash == cfg.config_hash


def test_unknown_keys(tmp_path):
    with pytest.raises(ConfigurationError):
        TrainConfig.from_dict({'learning_rate': 0.1})
    with pytest.raises(ConfigurationError):
        TrainConfig().override({'encoder.depth': 3})
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(ConfigurationError):
        TrainConfig.from_json(bad)
    with pytest.raises(FileNotFoundError):
        TrainConfig.from_json(tmp_path / "missing.json")


@pytest.mark.parametrize("overrides", [
    {'batch_size': 1},
    {'tau': 0.0},
    {'m': 1.5},
    {'variant': 'ours', 'schedule': 'step'},
    {'gradcam_source': 'supervised-ce'},
    {'augment.size': 32},
    {'bn_splits': 0},
])
def test_invalid(overrides):
    with pytest.raises(ConfigurationError):
        TrainConfig.desk_scale().override(overrides)


def test_encoder_contracts():
    with pytest.raises(ConfigurationError):
        EncoderConfig(backbone='resnet50-like', channels=64)
    with pytest.raises(ConfigurationError):
        EncoderConfig(in_size=32)
    assert EncoderConfig(in_size=112).grid == 7


def test_loss_weights():
    with pytest.raises(ConfigurationError):
        LossWeights(lam=0, nu=0)
    with pytest.raises(ConfigurationError):
        LossWeights(nu=-1)
