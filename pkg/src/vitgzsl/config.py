"""Line-based ``key = value`` config files.

Blank lines and lines starting with ``#`` are skipped.  Keys are checked
against the caller's allowed set so typos fail loudly.
"""

from .errors import ConfigError, ParseError


def parse_config(text, allowed=None):
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key:
            raise ParseError("expected 'key = value'", lineno)
        if allowed is not None and key not in allowed:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        values[key] = value
    return values


def load_config(path, allowed=None):
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read(), allowed)


def merge(defaults, file_values, cli_values):
    """CLI flag > config file > built-in default.  ``None`` CLI values are unset."""
    out = dict(defaults)
    out.update(file_values)
    out.update({k: v for k, v in cli_values.items() if v is not None})
    return out
