import pytest

from conftest import TINY_INI
from dcn.config import ConfigError, ExperimentConfig, format_config, load_config, parse_config


def test_defaults_round_trip():
    cfg = ExperimentConfig()
    assert parse_config(format_config(cfg)) == cfg
    assert parse_config("") == cfg


def test_tiny_config_values():
    cfg = parse_config(TINY_INI)
    assert cfg.embedding_config().channels_per_stage == [8, 16, 16, 32]
    assert cfg.relation_config().widths(cfg.embedding_config()) == [16, 16, 32, 32]
    assert cfg.train_config().train_spec.ways == 2
    assert cfg.eval_spec().queries_per_class == 3
    assert parse_config(format_config(cfg)) == cfg


def test_unknown_key_and_section_are_named():
    with pytest.raises(ConfigError) as err:
        parse_config("[train]\nlearning_rate = 0.1\n[extra]\nx = 1\n")
    text = str(err.value)
    assert "train.learning_rate" in text and "[extra]" in text


def test_bad_values_are_all_reported():
    with pytest.raises(ConfigError) as err:
        parse_config("[ablation]\nnoise = maybe\n[dataset]\nnum_classes = many\n")
    assert len(err.value.problems) == 2


def test_semantic_validation():
    with pytest.raises(ConfigError, match="fractions"):
        parse_config("[dataset]\nfractions = 0.5,0.5,0.5\n")
    with pytest.raises(ConfigError, match="relation"):
        parse_config("[relation]\nscore_weights = 1,1\n")
    with pytest.raises(ConfigError, match="path"):
        parse_config("[dataset]\nsource = directory\n")


@pytest.mark.parametrize(
    "section, key, value, attr",
    [
        ("ablation", "noise", "false", ("embedding_config", "noise_enabled")),
        ("ablation", "deep_supervision", "false", ("train_config", "deep_supervision")),
        ("ablation", "retrain", "false", ("train_config", "retrain")),
        ("ablation", "block_kind", "residual", ("embedding_config", "block_kind")),
    ],
)
def test_each_ablation_is_one_line(section, key, value, attr):
    base = parse_config("")
    flipped = parse_config(f"[{section}]\n{key} = {value}\n")
    method, field = attr
    assert getattr(getattr(base, method)(), field) != getattr(getattr(flipped, method)(), field)
    diff = [
        (a, b)
        for a, b in zip(format_config(base).splitlines(), format_config(flipped).splitlines())
        if a != b
    ]
    assert len(diff) == 1


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_config(tmp_path / "none.ini")
