"""Run configuration: INI-style config files, flag overrides, content digests.

The digest is a sha256 over the canonical (sorted-key) JSON rendering of the
merged configuration, so it is stable under key reordering and is stamped
into every output artifact for exact re-runs.
"""
from __future__ import annotations

import configparser
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path


def canonical_digest(obj) -> str:
    text = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def parse_config_file(path: str | Path) -> dict[str, dict[str, str]]:
    """Sections of key=value pairs; keys keep their case."""
    parser = configparser.ConfigParser()
    parser.optionxform = str  # type: ignore[assignment]
    read = parser.read(path)
    if not read:
        raise FileNotFoundError(f"config file not found: {path}")
    return {section: dict(parser.items(section)) for section in parser.sections()}


@dataclass
class RunConfig:
    """Config file sections merged with command-line overrides."""
    sections: dict[str, dict[str, str]] = field(default_factory=dict)
    overrides: dict[str, str] = field(default_factory=dict)  # flat "section.key"

    def __post_init__(self):
        bad = [k for k in self.overrides if "." not in k]
        if bad:
            raise ValueError(f"override keys must be section.key, got {bad}")

    @staticmethod
    def load(path: str | Path | None, overrides: dict[str, str] | None = None) -> "RunConfig":
        sections = parse_config_file(path) if path else {}
        return RunConfig(sections, dict(overrides or {}))

    def get(self, section: str, key: str, default: str | None = None) -> str | None:
        flat = f"{section}.{key}"
        if flat in self.overrides:
            return self.overrides[flat]
        return self.sections.get(section, {}).get(key, default)

    def section(self, name: str) -> dict[str, str]:
        out = dict(self.sections.get(name, {}))
        prefix = f"{name}."
        for flat, value in self.overrides.items():
            if flat.startswith(prefix):
                out[flat[len(prefix):]] = value
        return out

    @property
    def digest(self) -> str:
        merged = {name: self.section(name)
                  for name in {*self.sections, *(f.split(".", 1)[0] for f in self.overrides)}}
        return canonical_digest(merged)
