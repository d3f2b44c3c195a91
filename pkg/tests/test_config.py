import json

import pytest

from bubbleattack.config import (DEFAULTS, ConfigError, config_hash, dataset_counts, get, load_config,
                                 parse_config)


def test_defaults_round_trip():
    cfg = parse_config()
    assert cfg == DEFAULTS and cfg is not DEFAULTS


def test_unknown_key_names_its_pointer():
    with pytest.raises(ConfigError) as e:
        parse_config('{"attack": {"stepz": 3}}')
    assert e.value.pointer == "/attack/stepz"


def test_pointer_escapes_slash():
    with pytest.raises(ConfigError) as e:
        parse_config('{"data": {"a/b~c": 1}}')
    assert e.value.pointer == "/data/a~1b~0c"


@pytest.mark.parametrize("doc,ptr", [
    ('{"seed": "7"}', "/seed"),
    ('{"seed": true}', "/seed"),
    ('{"train": {"epochs": 1.5}}', "/train/epochs"),
    ('{"train": {"flush_to_zero": 1}}', "/train/flush_to_zero"),
    ('{"data": 3}', "/data"),
    ('{"train": {"epochs": null}}', "/train/epochs"),
    ('{"model": {"arch": "resnet"}}', "/model/arch"),
    ('{"attack": {"losses": ["ce", "l2"]}}', "/attack/losses/1"),
])
def test_type_and_choice_errors(doc, ptr):
    with pytest.raises(ConfigError) as e:
        parse_config(doc)
    assert e.value.pointer == ptr


def test_ints_are_accepted_for_floats():
    assert parse_config('{"channel": {"dot_gain": 0}}')["channel"]["dot_gain"] == 0


@pytest.mark.parametrize("doc", ['{"seed": 1, "seed": 2}', '{"channel": {"dot_gain": NaN}}', '{"seed": ', "[]"])
def test_bad_json(doc):
    with pytest.raises(ConfigError):
        parse_config(doc)


@pytest.mark.parametrize("over,ptr", [
    ({"train": {"learning_rate": 0.0}}, "/train/learning_rate"),
    ({"data": {"train_fraction": 1.0}}, "/data/train_fraction"),
    ({"impact": {"recast": 1.2}}, "/impact/recast"),
    ({"attack": {"epsilons": [0.1, 2.0]}}, "/attack/epsilons/1"),
    ({"channel": {"noise_sigma": -0.1}}, "/channel/noise_sigma"),
    ({"train": {"betas": [0.9]}}, "/train/betas"),
])
def test_range_checks(over, ptr):
    with pytest.raises(ConfigError) as e:
        parse_config(overrides=over)
    assert e.value.pointer == ptr


def test_nullable_keys():
    cfg = parse_config('{"attack": {"step_size": null}, "channel": {"dither": null}}')
    assert cfg["attack"]["step_size"] is None and cfg["channel"]["dither"] is None


def test_overrides_apply_after_file(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"seed": 3, "train": {"epochs": 2}}))
    cfg = load_config(p, {"seed": 9})
    assert (cfg["seed"], cfg["train"]["epochs"]) == (9, 2)
    assert get(cfg, "/train/epochs") == 2


def test_hash_ignores_output_and_key_order():
    a = parse_config('{"seed": 1, "train": {"epochs": 2}}')
    b = parse_config('{"train": {"epochs": 2}, "seed": 1, "output": {"dir": "elsewhere"}}')
    assert config_hash(a) == config_hash(b)
    assert config_hash(a) != config_hash(parse_config('{"seed": 2, "train": {"epochs": 2}}'))
    assert len(config_hash(a)) == 64


def test_dataset_counts():
    full = dataset_counts(parse_config('{"data": {"scale": "full"}}'))
    assert full == {"bubbles": 42_679, "swatches": 423_703}
    assert sum(full.values()) == 466_382
    assert dataset_counts(parse_config('{"data": {"bubbles": 10}}'))["bubbles"] == 10
