"""Key-value text config files.

Format, shared by cluster configs and column-mapping files:

    # comment
    key = value
    other_key = value with spaces

Keys are case-sensitive; whitespace around `=` is ignored; later duplicate
keys win. Values are plain strings; callers interpret them.
"""

from __future__ import annotations


class ConfigError(Exception):
    pass


def parse_kv_text(text: str, source: str = "<config>") -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {line!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        out[key] = value.strip()
    return out


def load_kv_file(path) -> dict[str, str]:
    try:
        with open(path, encoding="utf-8") as handle:
            return parse_kv_text(handle.read(), source=str(path))
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc


def write_kv_file(path, values: dict[str, object]) -> None:
    with open(path, "w", encoding="utf-8") as handle:
        for key, value in values.items():
            handle.write(f"{key} = {value}\n")
