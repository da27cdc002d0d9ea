import json

import pytest

from radar_distill.config import RunConfig
from radar_distill.learnable_sp import InitScheme


def test_defaults_round_trip(tmp_path):
    cfg = RunConfig()
    cfg.write(tmp_path / "c.json")
    again = RunConfig.load(tmp_path / "c.json")
    assert again == cfg
    assert again.digest() == cfg.digest()


def test_digest_ignores_key_order_and_defaults(tmp_path):
    a = RunConfig.from_dict({"radar": {"noise_std": 0.1}, "init": {"gamma": 0.1}})
    b = RunConfig.from_dict({"init": {"gamma": 0.1, "variant": "perturbed"},
                             "radar": {"noise_std": 0.1}})
    assert a.digest() == b.digest()
    assert a.digest() != RunConfig().digest()
    assert len(a.digest()) == 64


def test_partial_sections_take_defaults():
    cfg = RunConfig.from_dict({"train": {"max_steps": 7}})
    assert cfg.train.max_steps == 7
    assert cfg.train.batch_size == RunConfig().train.batch_size
    assert cfg.init == InitScheme()


@pytest.mark.parametrize("raw", [
    {"colour": {}},
    {"radar": {"colour": 1}},
    {"head": {"loss": {}}},
    {"train": "fast"},
    [],
])
def test_unknown_or_malformed_rejected(raw):
    with pytest.raises(ValueError):
        RunConfig.from_dict(raw)


def test_invalid_values_rejected():
    with pytest.raises(ValueError):
        RunConfig.from_dict({"teacher": {"aoa": "esprit"}})
    with pytest.raises(ValueError):
        RunConfig.from_dict({"dataset": {"target_count_min": 3, "target_count_max": 1}})


def test_invalid_json(tmp_path):
    (tmp_path / "c.json").write_text("{not json")
    with pytest.raises(ValueError, match="invalid JSON"):
        RunConfig.load(tmp_path / "c.json")


def test_head_config_carries_loss_weights():
    cfg = RunConfig.from_dict({"loss": {"beta": 0.0}, "head": {"steps": 5}})
    hc = cfg.head_config()
    assert hc.steps == 5 and hc.loss == cfg.loss


def test_shipped_desk_config():
    import os
    path = os.path.join(os.path.dirname(__file__), "..", "configs", "desk.json")
    cfg = RunConfig.load(path)
    raw = json.load(open(path))
    assert cfg.train.learning_rate == raw["train"]["learning_rate"]
    assert cfg.init.variant == "perturbed" and cfg.init.gamma == 0.1
