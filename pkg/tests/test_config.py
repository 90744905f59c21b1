import json

import pytest

from relaff.config import ExperimentConfig, apply_overrides, from_dict, load_config
from relaff.encoder import ConfigError

from .conftest import tiny_raw


def test_defaults_materialised():
    cfg = from_dict({})
    assert cfg.training.lam == 2.0 and cfg.training.lr == 1e-4 and cfg.training.weight_decay == 5e-3
    assert cfg.encoder.D == 2048 and cfg.head.P == 4 * 2 * 32
    assert cfg.synth.drift_period == (2 * cfg.sampling.K + 1) * cfg.sampling.T


@pytest.mark.parametrize("raw, field", [
    ({"training": {"bogus": 1}}, "training.bogus"),
    ({"nonsense": {}}, "nonsense"),
    ({"head": {"C": 0}}, "head.C"),
    ({"training": {"lam": "two"}}, "training.lam"),
    ({"training": {"B": 2.5}}, "training.B"),
    ({"training": {"augment": 1}}, "training.augment"),
    ({"training": {"loss_kind": "mae"}}, "training.loss_kind"),
    ({"training": {"K": 1}, "sampling": {"K": 2}}, "sampling.K"),
    ({"head": {"C": 3}}, "head.C"),
    ({"synth": {"scale": "affect"}, "head": {"total_score_enabled": True}}, "head.total_score_enabled"),
])
def test_invalid_configs_name_the_field(raw, field):
    with pytest.raises(ConfigError) as info:
        from_dict(raw)
    assert info.value.field == field


def test_shared_fields_are_mirrored():
    cfg = from_dict({"training": {"K": 2}, "encoder": {"T": 8, "H": 8, "W": 8, "D": 8, "D_f": 8,
                                                        "attention_heads": 2, "patch_grid": 2}})
    assert cfg.sampling.K == 2 and cfg.sampling.T == 8
    assert (cfg.synth.H, cfg.synth.W) == (8, 8)
    assert cfg.synth.drift_period == 40


def test_scale_sets_head_defaults():
    cfg = from_dict({"synth": {"scale": "panss"}})
    assert cfg.head.C == 4 and cfg.synth.C == 4
    assert cfg.head.supervised_mask == [True, True, True, False]
    assert cfg.head.total_score_enabled


def test_round_trip_through_dict(tmp_path):
    cfg = from_dict(tiny_raw())
    again = from_dict(json.loads(cfg.dumps()))
    assert again == cfg
    path = tmp_path / "c.json"
    path.write_text(cfg.dumps())
    assert load_config(path) == cfg
    assert load_config(None) == from_dict({})


def test_overrides():
    raw = apply_overrides({}, ["init=3", "training.lam=0", "synth.scale=panss"])
    assert raw == {"seeds": {"init": 3}, "training": {"lam": 0}, "synth": {"scale": "panss"}}
    with pytest.raises(ConfigError):
        apply_overrides({}, ["nokey"])


def test_replace():
    cfg = from_dict(tiny_raw())
    other = cfg.replace(training={"lam": 0.0})
    assert other.training.lam == 0.0 and cfg.training.lam == 2.0
    assert isinstance(other, ExperimentConfig)


def test_ness_style_values_accepted():
    cfg = from_dict({"encoder": {"T": 32, "D": 16, "D_f": 16, "attention_heads": 2},
                     "synth": {"scale": "panss"},
                     "training": {"K": 2, "B": 4, "lam": 2.0, "loss_kind": "rmse"}})
    assert cfg.sampling.T == 32 and cfg.sampling.K == 2
