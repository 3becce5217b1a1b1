"""Keyword rule routing of prompts onto the nine intent categories."""

from __future__ import annotations

import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

from .core import AdapruneError

CATEGORY_NAMES = (
    "Object identification",
    "Attribute / breed identification",
    "Text / symbol recognition",
    "Scene understanding",
    "Spatial relations",
    "Counting",
    "Action / interaction",
    "Intention / function",
    "Default",
)
NUM_CATEGORIES = len(CATEGORY_NAMES)
DEFAULT_CATEGORY = 8


class ParseError(AdapruneError):
    def __init__(self, message: str, line: int | None = None):
        where = f" (line {line})" if line is not None else ""
        super().__init__(f"{message}{where}")
        self.line = line


class DuplicatePriority(AdapruneError):
    pass


def _normalize(text: str) -> str:
    return " ".join(text.split()).casefold()


@dataclass(frozen=True)
class Rule:
    pattern: str
    category: int
    priority: int


@dataclass(frozen=True)
class RuleTable:
    rules: tuple[Rule, ...] = ()
    fallback: int = DEFAULT_CATEGORY

    def __post_init__(self):
        # matching order is fixed by priority, never by file order
        ordered = tuple(sorted(self.rules, key=lambda r: -r.priority))
        prios = [r.priority for r in ordered]
        if len(set(prios)) != len(prios):
            raise DuplicatePriority(f"priorities must be unique: {sorted(prios)}")
        for r in ordered:
            if not r.pattern:
                raise ParseError("empty pattern")
            if not 0 <= r.category < NUM_CATEGORIES:
                raise ParseError(f"category {r.category} outside 0..{NUM_CATEGORIES - 1}")
        if self.fallback != DEFAULT_CATEGORY:
            raise ParseError("fallback category is fixed at 8")
        object.__setattr__(self, "rules", ordered)


def route(prompt: str, rules: RuleTable) -> int:
    text = _normalize(prompt or "")
    if not text:
        return rules.fallback
    for rule in rules.rules:
        if rule.pattern in text:
            return rule.category
    return rules.fallback


def load_rules(content: str) -> RuleTable:
    """Parse a rule file: ``{"rules": [{"pattern", "category", "priority"}, ...]}``.

    A bare JSON list of rule objects is accepted as well.
    """
    try:
        doc = json.loads(content) if content.strip() else {"rules": []}
    except json.JSONDecodeError as exc:
        raise ParseError(exc.msg, exc.lineno) from None
    entries = doc.get("rules", []) if isinstance(doc, dict) else doc
    if not isinstance(entries, list):
        raise ParseError("'rules' must be a list")
    rules = []
    for i, e in enumerate(entries):
        try:
            pattern = _normalize(str(e["pattern"]))
            rules.append(Rule(pattern, int(e["category"]), int(e["priority"])))
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError(f"rule #{i} malformed: {exc!r}") from None
    return RuleTable(tuple(rules))


def default_rules() -> RuleTable:
    return load_rules(resources.files("adaprune").joinpath("data/rules.json").read_text("utf-8"))


def load_rules_file(path: str | Path) -> RuleTable:
    return load_rules(Path(path).read_text(encoding="utf-8"))
