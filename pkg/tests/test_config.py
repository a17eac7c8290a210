from importlib import resources

import pytest
import yaml

from interlab.config import ENV_OUT, ConfigError, load_config, parse_config


def minimal(**extra):
    raw = {"name": "t", "languages": [{"lang": "aa", "seed": 1}, {"lang": "bb", "seed": 2}],
           "models": [{"name": "joint"}], "stages": ["gen-corpus", "learn-bpe", "pretrain"]}
    raw.update(extra)
    return raw


def errors_of(raw, **kw):
    with pytest.raises(ConfigError) as exc:
        parse_config(raw, **kw)
    return exc.value.errors


def test_minimal_config_parses():
    cfg = parse_config(minimal())
    assert cfg.language_ids == ["aa", "bb"]
    assert [r.name for r in cfg.model_runs()] == ["joint"]
    assert cfg.train.seed == cfg.seed == 0


def test_unknown_keys_are_errors():
    errs = errors_of(minimal(bogus=1, model={"d_model": 32, "widht": 3}))
    assert any("bogus" in e for e in errs) and any("widht" in e for e in errs)


def test_all_problems_reported_together():
    raw = minimal(seed=-1, bpe={"vocab_size": 0}, stages=["pretrain", "fly"])
    raw["languages"][1]["shared_fraction"] = 2.0
    errs = errors_of(raw)
    assert len(errs) >= 4
    for needle in ("seed", "bpe.vocab_size", "fly", "shared_fraction"):
        assert any(needle in e for e in errs), needle


def test_out_dir_precedence(monkeypatch):
    raw = minimal(out_dir="from_file")
    assert parse_config(raw).out_dir == "from_file"
    monkeypatch.setenv(ENV_OUT, "from_env")
    assert parse_config(raw).out_dir == "from_env"
    assert parse_config(raw, out_dir="from_cli").out_dir == "from_cli"


def test_seed_override_reaches_training():
    cfg = parse_config(minimal(seed=3), seed=9)
    assert cfg.seed == 9 and cfg.train.seed == 9 and cfg.raw["seed"] == 9


def test_meta_trainer_needs_language_specific_mode():
    errs = errors_of(minimal(models=[{"name": "m", "trainer": "meta"}]))
    assert any("language-specific" in e for e in errs)


def test_per_language_expansion():
    cfg = parse_config(minimal(models=[{"name": "mono", "per_language": True}, {"name": "joint"}]))
    assert [r.name for r in cfg.model_runs()] == ["mono/aa", "mono/bb", "joint"]
    assert cfg.model_runs()[0].languages == ("aa",)


def test_sweep_validation():
    assert parse_config(minimal(sweep={"shared_fraction": [0, 0.5, 1]})).sweep == {"shared_fraction": [0, 0.5, 1]}
    errs = errors_of(minimal(sweep={"shared_fraction": [0.5, 1.5], "grammar": [1]}))
    assert any("1.5" in e for e in errs) and any("grammar" in e for e in errs)


def test_probe_stage_needs_probe_section():
    errs = errors_of(minimal(stages=["probe"]))
    assert any("probe section" in e for e in errs)


def test_probe_pairs_must_name_known_languages():
    errs = errors_of(minimal(probe={"model": "joint", "pairs": [["aa", "zz"]]}))
    assert any("bad pair" in e for e in errs)


def test_missing_external_file(tmp_path):
    raw = minimal(languages=[{"lang": "xx", "path": "nope.txt"}], models=[{"name": "j"}])
    errs = errors_of(raw, base_dir=tmp_path)
    assert any("does not exist" in e for e in errs)


def test_invalid_yaml(tmp_path):
    (tmp_path / "c.yaml").write_text("a: [1, 2\n")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "c.yaml")


def test_bundled_configs_all_parse():
    names = [p.name for p in resources.files("interlab").joinpath("configs").iterdir() if p.name.endswith(".yaml")]
    assert len(names) >= 7
    for n in names:
        raw = yaml.safe_load(resources.files("interlab").joinpath("configs", n).read_text())
        parse_config(raw)
