"""Stage prompt templates and rendering.

The embedded templates live in ``templates/`` as ``<name>.system.txt`` and
``<name>.user.txt``. Operators can override any stage without rebuilding by
pointing :func:`load_templates` at a directory holding ``<stage>.txt`` files,
with the system and user parts separated by a line reading ``=====USER=====``.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from enum import Enum
from importlib import resources
from pathlib import Path
from typing import Mapping

from .errors import InvalidConfig, MissingVariable, UnknownStage

PLACEHOLDER = re.compile(r"\{([A-Za-z_][A-Za-z0-9_]*)\}")
OVERRIDE_SEPARATOR = "=====USER====="


class StageKind(str, Enum):
    PRUNING = "pruning"
    LINKING = "linking"
    GENERATION_WITH_LINKING = "generation_with_linking"
    GENERATION_WITHOUT_LINKING = "generation_without_linking"
    CORRECTION = "correction"
    SELECTION_QUERY_ONLY = "selection_query_only"
    SELECTION_WITH_RESULTS = "selection_with_results"


# stage -> (system file stem, user file stem)
_TEMPLATE_FILES = {
    StageKind.PRUNING: ("pruning", "pruning"),
    StageKind.LINKING: ("linking", "linking"),
    StageKind.GENERATION_WITH_LINKING: ("generation", "generation_with_linking"),
    StageKind.GENERATION_WITHOUT_LINKING: ("generation", "generation_without_linking"),
    StageKind.CORRECTION: ("correction", "correction"),
    StageKind.SELECTION_QUERY_ONLY: ("selection", "selection_query_only"),
    StageKind.SELECTION_WITH_RESULTS: ("selection", "selection_with_results"),
}

# Word counts reported for the reference prompts; used as budgets.
REFERENCE_WORD_COUNTS = {
    StageKind.PRUNING: 267,
    StageKind.LINKING: 287,
    StageKind.GENERATION_WITH_LINKING: 190,
    StageKind.GENERATION_WITHOUT_LINKING: 190,
    StageKind.CORRECTION: 106,
    StageKind.SELECTION_QUERY_ONLY: 271,
    StageKind.SELECTION_WITH_RESULTS: 271,
}
BUDGET_SLACK = 0.30


@dataclass(frozen=True)
class PromptTemplate:
    stage: StageKind
    system_text: str
    user_text: str
    placeholders: frozenset[str]

    @classmethod
    def build(cls, stage: StageKind, system_text: str, user_text: str) -> "PromptTemplate":
        system_text, user_text = system_text.strip(), user_text.strip()
        names = frozenset(PLACEHOLDER.findall(system_text) + PLACEHOLDER.findall(user_text))
        return cls(stage, system_text, user_text, names)


@dataclass(frozen=True)
class RenderedPrompt:
    stage: StageKind
    system: str
    user: str
    word_count: int


def _read_embedded(name: str) -> str:
    return resources.files("slmsql").joinpath("templates").joinpath(name).read_text(encoding="utf-8")


def _embedded_templates() -> dict[StageKind, PromptTemplate]:
    out = {}
    for stage, (sys_stem, user_stem) in _TEMPLATE_FILES.items():
        out[stage] = PromptTemplate.build(
            stage, _read_embedded(f"{sys_stem}.system.txt"), _read_embedded(f"{user_stem}.user.txt")
        )
    return out


DEFAULT_TEMPLATES: dict[StageKind, PromptTemplate] = _embedded_templates()


def load_templates(override_dir: str | Path | None = None) -> dict[StageKind, PromptTemplate]:
    """Embedded templates, with any ``<stage>.txt`` in ``override_dir`` replacing its stage."""
    templates = dict(DEFAULT_TEMPLATES)
    if override_dir is None:
        return templates
    root = Path(override_dir)
    if not root.is_dir():
        raise InvalidConfig(f"prompt override directory not found: {root}")
    for stage in StageKind:
        path = root / f"{stage.value}.txt"
        if not path.exists():
            continue
        text = path.read_text(encoding="utf-8")
        if OVERRIDE_SEPARATOR not in text:
            raise InvalidConfig(f"{path}: missing {OVERRIDE_SEPARATOR!r} separator line")
        system, user = text.split(OVERRIDE_SEPARATOR, 1)
        templates[stage] = PromptTemplate.build(stage, system, user)
    return templates


def _coerce_stage(stage) -> StageKind:
    try:
        return StageKind(stage)
    except ValueError:
        raise UnknownStage(f"unknown stage: {stage!r}") from None


def _count_words(text: str) -> int:
    return len(text.split())


def render(stage: StageKind | str, variables: Mapping[str, str | None],
           templates: Mapping[StageKind, PromptTemplate] | None = None) -> RenderedPrompt:
    """Substitute ``variables`` into the stage's template.

    An absent or empty ``hint`` renders as ``None``; any other missing
    placeholder raises :class:`MissingVariable`.
    """
    stage = _coerce_stage(stage)
    template = (templates or DEFAULT_TEMPLATES)[stage]

    def substitute(m: re.Match) -> str:
        name = m.group(1)
        value = variables.get(name)
        if name == "hint" and not value:
            return "None"
        if value is None:
            raise MissingVariable(name)
        return str(value)

    # fail on the first missing name in a stable order
    for name in sorted(template.placeholders):
        if name != "hint" and variables.get(name) is None:
            raise MissingVariable(name)
    system = PLACEHOLDER.sub(substitute, template.system_text)
    user = PLACEHOLDER.sub(substitute, template.user_text)
    return RenderedPrompt(stage, system, user, _count_words(system) + _count_words(user))


def static_word_count(stage: StageKind | str | PromptTemplate,
                      templates: Mapping[StageKind, PromptTemplate] | None = None) -> int:
    """Whitespace-delimited words of system + user text with placeholders removed."""
    if isinstance(stage, PromptTemplate):
        template = stage
    else:
        template = (templates or DEFAULT_TEMPLATES)[_coerce_stage(stage)]
    text = PLACEHOLDER.sub(" ", template.system_text + "\n" + template.user_text)
    return _count_words(text)


def word_budget(stage: StageKind) -> int:
    return int(REFERENCE_WORD_COUNTS[stage] * (1 + BUDGET_SLACK))
