"""Prompt templates: plain-text files with {name} placeholders.

Templates ship as versioned files (package data under ``templates/``) rather
than inlined constants, so new tasks add templates without code changes. A
user-supplied template directory, when configured, is searched before the
builtin one. Rendering is byte-exact substitution of the named placeholders
and nothing else; literal braces that do not form a ``{lower_snake}`` token
(e.g. JSON examples inside a prompt) pass through untouched.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Mapping

from .errors import ConfigError, MissingPlaceholderValue

_PLACEHOLDER = re.compile(r"\{([a-z_][a-z0-9_]*)\}")

BUILTIN_TEMPLATE_IDS = (
    "contract_nli_extraction",
    "stereoset_extraction",
    "synthetic_extraction",
    "logic_synthesis",
    "conflict_resolution",
    "system_preamble",
    "few_shot_block",
)


@dataclass(frozen=True)
class PromptTemplate:
    template_id: str
    body: str
    required_placeholders: frozenset[str]

    def __post_init__(self):
        found = set(_PLACEHOLDER.findall(self.body))
        missing = self.required_placeholders - found
        if missing:
            raise ConfigError(
                f"template {self.template_id!r} body lacks declared placeholders: {sorted(missing)}"
            )


def template_from_text(template_id: str, body: str) -> PromptTemplate:
    return PromptTemplate(
        template_id=template_id,
        body=body,
        required_placeholders=frozenset(_PLACEHOLDER.findall(body)),
    )


def _builtin_dir() -> Path:
    return Path(str(resources.files("promptdistill").joinpath("templates")))


def template_exists(template_id: str, template_dir: str | Path | None = None) -> bool:
    for root in _search_roots(template_dir):
        if (root / f"{template_id}.txt").is_file():
            return True
    return False


def _search_roots(template_dir: str | Path | None) -> list[Path]:
    roots = []
    if template_dir:
        roots.append(Path(template_dir))
    roots.append(_builtin_dir())
    return roots


def load_template(template_id: str, template_dir: str | Path | None = None) -> PromptTemplate:
    for root in _search_roots(template_dir):
        path = root / f"{template_id}.txt"
        if path.is_file():
            return template_from_text(template_id, path.read_text(encoding="utf-8"))
    raise ConfigError(f"template {template_id!r} not found")


def render(template: PromptTemplate, values: Mapping[str, str]) -> str:
    """Substitute every required placeholder; any other transformation is out."""
    for name in sorted(template.required_placeholders):
        if name not in values:
            raise MissingPlaceholderValue(name)

    def _sub(m: re.Match) -> str:
        name = m.group(1)
        if name in template.required_placeholders:
            return str(values[name])
        return m.group(0)

    return _PLACEHOLDER.sub(_sub, template.body)
