import pytest
import yaml

from ganomaly.config import DEFAULTS, load_config, merge, validate
from ganomaly.errors import ConfigError


def test_defaults_validate():
    cfg = validate({})
    assert cfg.raw == DEFAULTS
    assert cfg.train_config().learning_rate == 2e-4
    assert cfg.arch().input_size == 64


def test_unknown_keys_and_all_errors_reported():
    doc = {"trian": {}, "train": {"epohcs": 3, "batch_size": "big"}, "scoring": {"variant": "v9"}}
    with pytest.raises(ConfigError) as exc:
        validate(doc)
    msg = str(exc.value)
    for needle in ("trian: unknown key", "train.epohcs: unknown key", "train.batch_size", "scoring.variant"):
        assert needle in msg


def test_semantic_errors_collected():
    doc = {"train": {"epochs": 0}, "arch": {"input_size": 48}, "eval": {"threshold_range": [0.6, 0.4], "step": -1}}
    with pytest.raises(ConfigError) as exc:
        validate(doc)
    msg = str(exc.value)
    assert "epochs" in msg and "input_size" in msg and "threshold_range" in msg and "eval.step" in msg


def test_idx_paths_required(tmp_path):
    with pytest.raises(ConfigError, match="dataset.train_images: required"):
        validate({"dataset": {"kind": "idx"}})
    with pytest.raises(ConfigError, match="file not found"):
        validate({"dataset": {"kind": "idx", "train_images": "a", "train_labels": "b", "test_images": "c", "test_labels": "d"}})


def test_synthetic_shape_must_match_arch():
    with pytest.raises(ConfigError, match="must match"):
        validate({"arch": {"input_size": 32}})


def test_precedence_overrides_file_defaults(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text(yaml.safe_dump({"seed": 3, "train": {"epochs": 7, "batch_size": 16}}))
    cfg = load_config(p, {"train.epochs": 2})
    assert cfg.seed == 3
    assert cfg.raw["train"]["epochs"] == 2
    assert cfg.raw["train"]["batch_size"] == 16
    assert cfg.raw["train"]["beta1"] == 0.5


def test_relative_paths_resolve_against_config(tmp_path):
    p = tmp_path / "sub" / "c.yaml"
    p.parent.mkdir()
    p.write_text("output_dir: out\n")
    assert load_config(p).output_dir == tmp_path / "sub" / "out"


def test_file_errors(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_config(tmp_path / "missing.yaml")
    bad = tmp_path / "bad.yaml"
    bad.write_text("train: [unclosed\n")
    with pytest.raises(ConfigError, match="YAML"):
        load_config(bad)


def test_digest_tracks_content():
    a, b = validate({"seed": 1}), validate({"seed": 2})
    assert a.digest() != b.digest() and a.digest() == validate({"seed": 1}).digest()


def test_merge_is_deep_and_pure():
    base = {"a": {"b": 1, "c": 2}}
    out = merge(base, {"a": {"b": 5}})
    assert out == {"a": {"b": 5, "c": 2}} and base == {"a": {"b": 1, "c": 2}}


def test_int_accepted_for_float_and_bool_rejected_for_int():
    validate({"train": {"learning_rate": 1}})
    with pytest.raises(ConfigError):
        validate({"train": {"epochs": True}})
