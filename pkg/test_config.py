import json

import pytest

from config import DEFAULTS, load_config_file, resolve_config
from errors import ConfigError


def test_precedence_flags_over_file_over_defaults():
    cfg = resolve_config({"seed": 5, "epsilon": None}, {"epsilon": 3.0, "seed": 1, "dims": 7})
    assert cfg["seed"] == 5
    assert cfg["epsilon"] == 3.0
    assert cfg["dims"] == 7
    assert cfg["repeats"] == DEFAULTS["repeats"]


def test_unknown_file_keys_rejected():
    with pytest.raises(ConfigError) as err:
        resolve_config({}, {"epsilom": 1.0})
    assert err.value.context["keys"] == ["epsilom"]


def test_flag_keys_extend_known_keys():
    cfg = resolve_config({"stats": None}, {"stats": "s.json"})
    assert cfg["stats"] == "s.json"


def test_load_config_file(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"seed": 3}))
    assert load_config_file(str(path)) == {"seed": 3}
    assert load_config_file(None) == {}


@pytest.mark.parametrize("text", ["[1, 2]", "{oops"])
def test_load_config_file_rejects_bad_content(tmp_path, text):
    path = tmp_path / "c.json"
    path.write_text(text)
    with pytest.raises(ConfigError):
        load_config_file(str(path))


def test_load_config_file_missing(tmp_path):
    with pytest.raises(ConfigError):
        load_config_file(str(tmp_path / "none.json"))
