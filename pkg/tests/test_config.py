import pytest

from styleddg.config import ExperimentConfig, dump_config, load_config, parse_value
from styleddg.errors import ConfigError


def test_defaults_match_desk_scale():
    cfg = ExperimentConfig()
    assert cfg.mode == ("dsgd", "mixstyle", "dsu", "styleddg")
    assert cfg.channels == (8, 16, 32) and cfg.hooks == (1, 2)
    assert (cfg.classes, cfg.image_size, cfg.train_per_domain, cfg.test_per_domain) == (5, 16, 600, 300)
    assert cfg.p_ell == 0.5 and cfg.alpha_explore == 3.0


def test_parse_types():
    assert parse_value("K", "12") == 12
    assert parse_value("lr", "0.5") == 0.5
    assert parse_value("seeds", "1, 2,3") == (1, 2, 3)
    assert parse_value("mode", "dsgd,styleddg") == ("dsgd", "styleddg")
    assert parse_value("radii", "0.4,1.5") == (0.4, 1.5)
    assert parse_value("checkpoints", "off") is False


def test_unknown_key_names_the_key(tmp_path):
    with pytest.raises(ConfigError, match="learning_rate"):
        load_config(None, ["learning_rate=0.1"])
    p = tmp_path / "c.cfg"
    p.write_text("K = 5\nbogus_key = 1\n")
    with pytest.raises(ConfigError, match="bogus_key"):
        load_config(str(p))


def test_bad_value_names_the_key():
    with pytest.raises(ConfigError, match="K"):
        load_config(None, ["K=many"])
    with pytest.raises(ConfigError, match="batch_size"):
        load_config(None, ["batch_size=7"])
    with pytest.raises(ConfigError, match="mode"):
        load_config(None, ["mode=fedavg"])


def test_file_then_overrides(tmp_path):
    p = tmp_path / "c.cfg"
    p.write_text("# comment\nmode = styleddg\nK = 5   # trailing\n\nlr = 0.3\n")
    cfg = load_config(str(p), ["mode=dsgd", "K=7"])
    assert cfg.mode == ("dsgd",) and cfg.K == 7 and cfg.lr == 0.3


def test_malformed_lines(tmp_path):
    p = tmp_path / "c.cfg"
    p.write_text("K 5\n")
    with pytest.raises(ConfigError, match="key = value"):
        load_config(str(p))
    with pytest.raises(ConfigError, match="KEY=VAL"):
        load_config(None, ["K"])
    with pytest.raises(ConfigError, match="not found"):
        load_config(str(tmp_path / "missing.cfg"))


def test_dump_round_trip(tmp_path):
    cfg = ExperimentConfig(mode=("dsu",), seeds=(4, 5), lr=0.1 + 0.2, checkpoints=False, dataset="x.bin")
    text = dump_config(cfg)
    assert text.startswith("# styleddg experiment config v1\n")
    p = tmp_path / "snap.cfg"
    p.write_text(text)
    assert load_config(str(p)) == cfg
