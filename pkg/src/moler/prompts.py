"""Prompt rendering (query expansion, combined pre-answer, Q2D, CoT) and response parsing."""

from __future__ import annotations

import re
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Optional, Sequence

from .errors import BadExpansionCount, EmptyPassage

TEMPLATE_NAMES = ("mqr", "cqe", "q2d", "cot")
DEFAULT_EXPANSIONS = 3

_SLOT_RE = re.compile(r"\{(\w+)\}")
_NUMBERED_RE = re.compile(r"^\s*\d+[.)]\s*(.+)$")
PASSAGE_MARKER = "Passage:"


@lru_cache(maxsize=None)
def _builtin(name):
    return resources.files("moler").joinpath("templates", f"{name}.txt").read_text(encoding="utf-8")


class PromptTemplates:
    """Template set; ``override_dir`` may hold any of ``mqr.txt``, ``cqe.txt``, ``q2d.txt``, ``cot.txt``."""

    def __init__(self, override_dir=None):
        self.override_dir = Path(override_dir) if override_dir else None
        self._templates = {}
        for name in TEMPLATE_NAMES:
            text = None
            if self.override_dir is not None:
                p = self.override_dir / f"{name}.txt"
                if p.is_file():
                    text = p.read_text(encoding="utf-8")
            self._templates[name] = text if text is not None else _builtin(name)

    def __getitem__(self, name):
        return self._templates[name]


DEFAULT_TEMPLATES = None


def _templates(templates: Optional[PromptTemplates]):
    global DEFAULT_TEMPLATES
    if templates is not None:
        return templates
    if DEFAULT_TEMPLATES is None:
        DEFAULT_TEMPLATES = PromptTemplates()
    return DEFAULT_TEMPLATES


def fill(template: str, **values) -> str:
    """Substitute ``{name}`` slots in one pass, so substituted text is never re-expanded."""
    def repl(m):
        key = m.group(1)
        return str(values[key]) if key in values else m.group(0)
    return _SLOT_RE.sub(repl, template)


def example_block(cnt: int) -> str:
    return "\n".join(f"{i}. <query variant {i}>" for i in range(1, cnt + 1))


def render_mqr(query: str, cnt: int = DEFAULT_EXPANSIONS, templates=None) -> str:
    if cnt < 1:
        raise ValueError("cnt must be >= 1")
    return fill(_templates(templates)["mqr"], cnt=cnt, query=query, example=example_block(cnt))


def render_cqe(original: str, subs: Sequence[str] = (), templates=None) -> str:
    questions = [original, *subs]
    block = "\n\n".join(f"Question {i}: {q}" for i, q in enumerate(questions, start=1))
    return fill(_templates(templates)["cqe"], questions=block, original_query=original)


def render_q2d(query: str, templates=None) -> str:
    return fill(_templates(templates)["q2d"], query=query)


def render_cot(query: str, templates=None) -> str:
    return fill(_templates(templates)["cot"], query=query)


def parse_numbered(text: str) -> list[str]:
    items = []
    for line in text.splitlines():
        m = _NUMBERED_RE.match(line)
        if m and m.group(1).strip():
            items.append(m.group(1).strip())
    return items


def parse_mqr_response(text: str, cnt: int) -> list[str]:
    """First ``cnt`` numbered lines (``1.`` or ``1)``) with the numbering stripped."""
    items = parse_numbered(text)
    if len(items) < cnt:
        raise BadExpansionCount(items, cnt)
    return items[:cnt]


def parse_cqe_response(text: str) -> str:
    """Text after the last ``Passage:`` marker (or the whole text), trimmed."""
    head, marker, tail = text.rpartition(PASSAGE_MARKER)
    passage = (tail if marker else text).strip()
    if not passage:
        raise EmptyPassage("model returned an empty passage")
    return passage
