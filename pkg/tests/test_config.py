import pytest

from vitgzsl.config import load_config, merge, parse_config
from vitgzsl.errors import ConfigError, ParseError


def test_parse_skips_comments_and_blanks():
    text = "# settings\n\naam_epochs = 5\n  variant=avg  \nname = a = b\n"
    assert parse_config(text) == {"aam_epochs": "5", "variant": "avg", "name": "a = b"}


def test_parse_errors_name_the_line():
    with pytest.raises(ParseError) as exc:
        parse_config("a = 1\nnot a pair\n")
    assert exc.value.line == 2
    with pytest.raises(ParseError):
        parse_config("= 3\n")
    with pytest.raises(ConfigError, match="line 2.*aam_epoch"):
        parse_config("seed = 1\naam_epoch = 3\n", allowed={"seed", "aam_epochs"})
    with pytest.raises(ConfigError, match="duplicate"):
        parse_config("seed = 1\nseed = 2\n")


def test_load_config(tmp_path):
    path = tmp_path / "c.cfg"
    path.write_text("seed = 9\n", encoding="utf-8")
    assert load_config(path) == {"seed": "9"}


def test_precedence_cli_over_file_over_default():
    defaults = {"a": 1, "b": 2, "c": 3}
    merged = merge(defaults, {"b": "20", "c": "30"}, {"c": "300", "a": None})
    assert merged == {"a": 1, "b": "20", "c": "300"}
