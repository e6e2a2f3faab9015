import dataclasses

import numpy as np
import pytest

from microau.core import (
    AUTaskSpec,
    Config,
    ConfigError,
    Sample,
    TaskSpecError,
    UnknownDatasetError,
    config_from_kv,
    default_config_text,
    default_task_spec,
    parse_kv,
    task_spec_from_kv,
    task_spec_text,
    validate_task_spec,
)


def test_casme2_defaults():
    spec = default_task_spec("casme2")
    assert spec.au_ids == (1, 2, 4, 7, 12, 14, 15, 17)
    assert spec.n_aus == 8
    assert spec.landmark_indices[spec.index_of(17)] == (7, 8, 9, 57)
    assert spec.landmark_indices[spec.index_of(7)] == (38, 41, 44, 47)
    assert spec.landmark_indices[spec.index_of(12)] == (48, 54)
    assert spec.landmark_indices[spec.index_of(14)] == (55, 59, 60, 64)
    for au in (1, 2, 4):
        assert spec.landmark_indices[spec.index_of(au)] == (19, 20, 21, 22, 23, 24)


def test_samm_defaults():
    spec = default_task_spec("samm")
    assert spec.au_ids == (2, 4, 7, 12)
    assert spec.n_aus == 4
    # same per-AU landmark sets as casme2
    casme2 = default_task_spec("casme2")
    for au in spec.au_ids:
        assert spec.landmark_indices[spec.index_of(au)] == casme2.landmark_indices[casme2.index_of(au)]


def test_unknown_dataset():
    with pytest.raises(UnknownDatasetError):
        default_task_spec("mmew")


def _spec(au_ids, landmarks, prompts):
    return AUTaskSpec(au_ids=tuple(au_ids), landmark_indices=tuple(landmarks), prompts=tuple(prompts))


def test_duplicate_au_rejected():
    spec = _spec([1, 1], [(19,), (20,)], [("a", "b"), ("c", "d")])
    with pytest.raises(TaskSpecError) as err:
        validate_task_spec(spec)
    assert any(v.kind == "DuplicateAU" for v in err.value.violations)


def test_landmark_out_of_range():
    spec = _spec([1], [(68,)], [("a", "b")])
    with pytest.raises(TaskSpecError) as err:
        validate_task_spec(spec)
    assert any(v.kind == "LandmarkOutOfRange" for v in err.value.violations)


def test_missing_and_identical_prompts():
    with pytest.raises(TaskSpecError) as err:
        validate_task_spec(_spec([1], [(19,)], [("", "b")]))
    assert any(v.kind == "MissingPrompt" for v in err.value.violations)
    with pytest.raises(TaskSpecError) as err:
        validate_task_spec(_spec([1], [(19,)], [("same", "same")]))
    assert any(v.kind == "MissingPrompt" for v in err.value.violations)


def test_empty_landmark_set():
    with pytest.raises(TaskSpecError) as err:
        validate_task_spec(_spec([1], [()], [("a", "b")]))
    assert any(v.kind == "EmptyLandmarkSet" for v in err.value.violations)


def test_validate_reports_every_violation():
    spec = _spec([1, 1, 2], [(19,), (70,), ()], [("a", "b"), ("c", "d"), ("e", "")])
    with pytest.raises(TaskSpecError) as err:
        validate_task_spec(spec)
    kinds = {v.kind for v in err.value.violations}
    assert {"DuplicateAU", "LandmarkOutOfRange", "EmptyLandmarkSet", "MissingPrompt"} <= kinds


def test_validate_idempotent():
    spec = default_task_spec("casme2")
    assert validate_task_spec(spec) is spec
    assert validate_task_spec(validate_task_spec(spec)) is spec


def test_config_defaults_match_protocol():
    cfg = Config()
    assert cfg.epochs == 80
    assert cfg.batch_size == 8
    assert cfg.lr_encoders == 0.001
    assert cfg.lr_heads == 0.01
    assert cfg.lr_decay_epoch == 40
    assert cfg.magnification == 3
    assert cfg.input_size == 224
    assert cfg.seed == 1
    assert cfg.finetune_last_k_layers == 3
    assert cfg.momentum == 0.9


def test_parse_kv():
    kv = parse_kv("# comment\n a = 1 \n\nb=two words\n")
    assert kv == {"a": "1", "b": "two words"}
    with pytest.raises(ConfigError):
        parse_kv("a = 1\na = 2\n")
    with pytest.raises(ConfigError):
        parse_kv("not a pair\n")


def test_config_missing_key_named():
    kv = parse_kv(default_config_text())
    del kv["alpha"]
    with pytest.raises(ConfigError) as err:
        config_from_kv(kv)
    assert "alpha" in str(err.value)


def test_config_unknown_key_is_hard_error():
    kv = parse_kv(default_config_text())
    kv["aplha"] = "0.5"
    with pytest.raises(ConfigError) as err:
        config_from_kv(kv)
    assert "aplha" in str(err.value)


def test_config_bad_values():
    kv = parse_kv(default_config_text())
    kv["alpha"] = "-1"
    with pytest.raises(ConfigError):
        config_from_kv(kv)
    kv["alpha"] = "zero point five"
    with pytest.raises(ConfigError):
        config_from_kv(kv)
    kv["alpha"] = "0.5"
    kv["pooling"] = "avgpool"
    with pytest.raises(ConfigError):
        config_from_kv(kv)


def test_default_config_round_trips():
    cfg = config_from_kv(parse_kv(default_config_text()))
    assert cfg == Config()


def test_config_is_immutable():
    cfg = Config()
    with pytest.raises(dataclasses.FrozenInstanceError):
        cfg.alpha = 0.9


def test_task_spec_file_round_trip():
    spec = default_task_spec("samm")
    parsed = task_spec_from_kv(parse_kv(task_spec_text(spec)))
    assert parsed == spec


def test_task_spec_file_defaults_fill_in():
    parsed = task_spec_from_kv(parse_kv("au_ids = 12\n"))
    assert parsed.landmark_indices == ((48, 54),)
    with pytest.raises(ConfigError):
        task_spec_from_kv(parse_kv("au_ids = 33\n"))  # no default landmarks for AU33


def test_task_spec_file_unknown_key():
    with pytest.raises(ConfigError):
        task_spec_from_kv(parse_kv("au_ids = 12\nlandmarks.13 = 1,2\n"))


def test_sample_invariants():
    lm = np.zeros((68, 2), dtype=np.int64)
    sample = Sample("s1", "sub1", lm, np.array([0, 1]), flow_path="f.flo")
    assert sample.subject_id == "sub1"
    with pytest.raises(Exception):
        Sample("s2", "sub1", np.zeros((67, 2)), np.array([0]), flow_path="f.flo")
    with pytest.raises(Exception):
        Sample("s3", "sub1", lm, np.array([0]))  # neither flow nor frame pair
