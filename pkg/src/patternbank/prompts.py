"""Loader for the versioned prompt-template assets shipped with the package.

These templates are the plug-in contract for LLM-backed providers (extraction,
classification, utilization judging); the engine itself never sends them
anywhere.
"""

from __future__ import annotations

import re
from importlib import resources

from .core import PatternBankError

ASSET_NAMES = (
    "pattern_classification",
    "skill_extraction",
    "subagent_extraction",
    "utilization_analysis",
)

_VERSION_RE = re.compile(r"<!-- asset: (?P<name>[a-z_]+), version (?P<version>\d+) -->")


def prompt_asset(name: str) -> str:
    if name not in ASSET_NAMES:
        raise PatternBankError(f"unknown prompt asset {name!r}; known: {', '.join(ASSET_NAMES)}")
    return (resources.files(__package__) / "assets" / f"{name}.md").read_text(encoding="utf-8")


def asset_version(name: str) -> int:
    match = _VERSION_RE.search(prompt_asset(name))
    if not match or match.group("name") != name:
        raise PatternBankError(f"asset {name!r} is missing its version header")
    return int(match.group("version"))
