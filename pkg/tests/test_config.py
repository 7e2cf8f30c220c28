import json

import pytest

from moon.config import ConfigKeyError, RunConfig, from_dict, load_config, parse_override


def test_defaults_and_dump_roundtrip():
    cfg = load_config()
    assert cfg.train.lr == 1e-5 and cfg.loss.ordinal_weight == 0.8 and cfg.train.epochs == 100
    doc = json.loads(cfg.dumps())
    assert "augment" in doc["train"] and "intensity_scale" in doc["model"]
    assert from_dict(doc).to_json() == cfg.to_json()


def test_presets_and_overrides():
    cfg = load_config("desk", ["train.epochs=3", "model.fusion=PredSum", "model.use_ori=false"])
    assert cfg.train.epochs == 3 and cfg.model.fusion == "PredSum" and cfg.model.use_ori is False
    assert cfg.train.lr == 1e-3
    assert parse_override("a.b=[1, 2]") == ("a.b", [1, 2])
    assert parse_override("a=text") == ("a", "text")


def test_unknown_keys_name_the_full_path(tmp_path):
    with pytest.raises(ConfigKeyError) as exc:
        load_config("default", ["train.epochz=3"])
    assert exc.value.key == "train.epochz"
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"train": {"augment": {"flip": 1}}}))
    with pytest.raises(ConfigKeyError) as exc:
        load_config(str(path))
    assert exc.value.key == "train.augment.flip"
    with pytest.raises(ConfigKeyError):
        load_config("default", ["model.input_dims.pancreas=[1,2,3]"])
    with pytest.raises(ConfigKeyError):
        load_config("default", ["noequals"])


def test_bad_values_and_missing_file(tmp_path):
    with pytest.raises(ConfigKeyError):
        load_config("default", ["loss.ordinal_weight=1.5"])
    with pytest.raises(FileNotFoundError):
        load_config(str(tmp_path / "missing.json"))


def test_replace_keeps_original():
    cfg = RunConfig()
    other = cfg.replace({"train.seed": 4, "model.input_dims": {"esophagus": [8, 8, 12]}})
    assert other.train.seed == 4 and cfg.train.seed == 0
    assert other.model.input_dims["esophagus"] == (8, 8, 12)
    assert other.model.input_dims["liver"] == cfg.model.input_dims["liver"]
