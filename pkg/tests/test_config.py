import pytest

from cubeforge.config import AppConfig, load_config, parse_interval, parse_size
from cubeforge.errors import ConfigError


@pytest.mark.parametrize("text,want", [("64M", 64 << 20), ("1gib", 1 << 30), ("512k", 512 << 10), ("100", 100)])
def test_parse_size(text, want):
    assert parse_size(text) == want


@pytest.mark.parametrize("text,want", [("inf", None), ("0", None), ("none", None), ("2", 2), (None, None)])
def test_parse_interval(text, want):
    assert parse_interval(text) == want


def test_load_config(tmp_path):
    (tmp_path / "c.conf").write_text(
        "# demo\napp = sales\nschema = s.txt\nfunctions = SUM(q),COUNT(*),MEDIAN\nr = 16\n"
        "checkpoint_interval = inf\nmem_budget = 8M\ncombine = off\ncuboids = A,BC\n")
    cfg = load_config(tmp_path / "c.conf")
    assert cfg.app_id == "sales" and cfg.reducers == 16
    assert cfg.schema == str(tmp_path / "s.txt")
    assert cfg.functions == ["SUM(q)", "COUNT(*)", "MEDIAN"]
    assert cfg.checkpoint_interval is None and cfg.mem_budget == 8 << 20
    assert cfg.combine is False and cfg.cuboids == ["A", "BC"]


@pytest.mark.parametrize("body", ["bogus = 1\n", "reducers = x\n", "no equals sign\n", "reducers = 0\n",
                                  "combine = maybe\n", "app = a b\n"])
def test_bad_config(tmp_path, body):
    (tmp_path / "c.conf").write_text(body)
    with pytest.raises(ConfigError):
        load_config(tmp_path / "c.conf")


def test_overrides_and_round_trip():
    cfg = AppConfig().with_overrides(reducers=32, app_id=None)
    assert cfg.reducers == 32 and cfg.app_id == "cube"
    assert AppConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ConfigError):
        cfg.with_overrides(workers=0)
