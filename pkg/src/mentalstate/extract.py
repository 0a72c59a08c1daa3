"""Recover stage labels from free-form model output.

An explicit ``Answer: <label>`` line wins. Otherwise the last whole-word
mention of any label in the stage's own space is taken. Labels from other
stages never match: ``C_Mixed`` is invisible to the behavior stage because
the underscore joins it into a single word.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from functools import lru_cache

from .domain import DIMENSIONS, PREFIXES, Label, Stage, labels_for, parse_label

ANSWER_LINE = "AnswerLine"
LAST_MENTION = "LastMention"
NONE = "None"

_DECORATION = r"[\s*_`'\"\[\(]*"


@dataclass(frozen=True)
class Extraction:
    label: Label | None
    span: tuple[int, int] | None
    method: str

    def __post_init__(self) -> None:
        if (self.label is None) != (self.method == NONE):
            raise ValueError("label must be None exactly when method is None")


UNPARSED = Extraction(None, None, NONE)


def _alternation(stage: Stage) -> str:
    names = "|".join(x.value for x in labels_for(stage))
    prefix = PREFIXES[stage]
    optional = f"(?:{prefix})?" if prefix else ""
    return rf"{optional}(?:{names})"


@lru_cache(maxsize=None)
def _patterns(stage: Stage) -> tuple[re.Pattern, re.Pattern]:
    label = _alternation(stage)
    mention = re.compile(rf"\b(?P<label>{label})\b", re.IGNORECASE)
    answer = re.compile(
        rf"^[\s*#>-]*answer[\s*]*:{_DECORATION}(?P<label>{label})\b",
        re.IGNORECASE | re.MULTILINE,
    )
    return answer, mention


@lru_cache(maxsize=None)
def _keyed_line(stage: Stage) -> re.Pattern:
    label = _alternation(stage)
    return re.compile(
        rf"^[\s*#>-]*{stage.value}[\s*]*:{_DECORATION}(?P<label>{label})\b",
        re.IGNORECASE | re.MULTILINE,
    )


def _from_match(stage: Stage, match: re.Match, method: str) -> Extraction:
    return Extraction(parse_label(stage, match.group("label")), match.span("label"), method)


def extract(stage: Stage, text: str) -> Extraction:
    if stage not in DIMENSIONS:
        raise ValueError(f"extract() needs a single dimension, got {stage}")
    answer, mention = _patterns(stage)
    matches = list(answer.finditer(text))
    if matches:
        return _from_match(stage, matches[-1], ANSWER_LINE)
    matches = list(mention.finditer(text))
    if matches:
        return _from_match(stage, matches[-1], LAST_MENTION)
    return UNPARSED


def extract_combined(text: str) -> tuple[Extraction, Extraction, Extraction]:
    """Parse ``Behavior:``/``Cognition:``/``Emotion:`` lines independently.

    Lines are found by key, not position; a missing line yields Unparsed for
    that dimension only.
    """
    out = []
    for stage in DIMENSIONS:
        matches = list(_keyed_line(stage).finditer(text))
        out.append(_from_match(stage, matches[-1], ANSWER_LINE) if matches else UNPARSED)
    return tuple(out)
