"""Flat key-value config files: ``key = value`` lines, ``#`` comments.

Kept diff-friendly on purpose; command line flags override file values.
"""

from __future__ import annotations

__all__ = ["parse_kv_text", "load_config", "format_config"]


def parse_kv_text(text: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value', got '{raw.strip()}'")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def load_config(path) -> dict[str, str]:
    with open(path) as f:
        return parse_kv_text(f.read())


def format_config(mapping: dict[str, object]) -> str:
    return "".join(f"{k} = {v}\n" for k, v in mapping.items())
