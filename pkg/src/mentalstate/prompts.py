"""Per-stage prompt construction from versioned text templates.

Templates live in ``templates/<stage>_<flavor>.txt`` and use the placeholders
``{transcript}``, ``{behavior}``, ``{cognition}`` and ``{label_menu}``.
Substitution is a single pass, so braces inside a transcript are left alone.
"""

from __future__ import annotations

import enum
import re
from dataclasses import dataclass
from pathlib import Path

from .domain import (
    DIMENSIONS,
    UNKNOWN,
    BehaviorLabel,
    ClipSample,
    CognitionLabel,
    Label,
    Stage,
    labels_for,
    render_label,
)

TEMPLATE_DIR = Path(__file__).parent / "templates"
NO_SPEECH = "[no speech]"
PLACEHOLDER = re.compile(r"\{(transcript|behavior|cognition|label_menu)\}")


class Flavor(enum.Enum):
    SRL = "srl"
    GENERIC = "generic"


# Definition sentences that only SRL-flavored templates may contain.
SRL_SENTENCES = (
    "the utterance serves to increase awareness of the group's current state",
    "the utterance attempts to influence or regulate the group's task",
    "the episode contains inseparable elements of both monitoring and controlling",
    "Judge the directional intent of the utterance (noticing versus steering)",
    "the valence of the learner's metacognitive evaluation of the ongoing task",
    "Use that behavior as your anchor.",
    "Default to E_Neutral, and choose another label only when explicit emotional markers are present",
)

NEUTRALITY_CLAUSE = SRL_SENTENCES[-1]

# placeholders each stage's template must (True) or must not (False) carry
_REQUIRED = {
    Stage.BEHAVIOR: {"behavior": False, "cognition": False},
    Stage.COGNITION: {"behavior": True, "cognition": False},
    Stage.EMOTION: {"behavior": True, "cognition": True},
    Stage.COMBINED: {"behavior": False, "cognition": False},
}


class TemplateError(ValueError):
    pass


@dataclass(frozen=True)
class PromptTemplate:
    stage: Stage
    flavor: Flavor
    body: str

    def __post_init__(self) -> None:
        name = f"{self.stage.value.lower()}_{self.flavor.value}"
        for placeholder, wanted in _REQUIRED[self.stage].items():
            present = "{" + placeholder + "}" in self.body
            if present != wanted:
                verb = "lacks" if wanted else "must not contain"
                raise TemplateError(f"template {name} {verb} {{{placeholder}}}")
        for placeholder in ("transcript", "label_menu"):
            if "{" + placeholder + "}" not in self.body:
                raise TemplateError(f"template {name} lacks {{{placeholder}}}")
        answer_lines = (
            ["Behavior: <label>", "Cognition: <label>", "Emotion: <label>"]
            if self.stage is Stage.COMBINED else ["Answer: <label>"]
        )
        for line in answer_lines:
            if line not in self.body:
                raise TemplateError(f"template {name} does not ask for '{line}'")

    def render(self, **values: str) -> str:
        return PLACEHOLDER.sub(lambda m: values.get(m.group(1), m.group(0)), self.body)


class TemplateSet:
    """All eight (stage, flavor) templates, loaded from one directory."""

    def __init__(self, directory: str | Path | None = None):
        self.directory = Path(directory) if directory is not None else TEMPLATE_DIR
        self._templates: dict[tuple[Stage, Flavor], PromptTemplate] = {}
        for stage in (*DIMENSIONS, Stage.COMBINED):
            for flavor in Flavor:
                path = self.directory / f"{stage.value.lower()}_{flavor.value}.txt"
                if not path.is_file():
                    raise TemplateError(f"missing template file {path}")
                body = path.read_text(encoding="utf-8")
                self._templates[stage, flavor] = PromptTemplate(stage, flavor, body)

    def get(self, stage: Stage, flavor: Flavor) -> PromptTemplate:
        return self._templates[stage, flavor]


_default: TemplateSet | None = None


def default_templates() -> TemplateSet:
    global _default
    if _default is None:
        _default = TemplateSet()
    return _default


def label_menu(stage: Stage) -> str:
    if stage is Stage.COMBINED:
        return "\n".join(f"{s.value}: {label_menu(s)}" for s in DIMENSIONS)
    return ", ".join(render_label(x) for x in labels_for(stage))


def _transcript(sample: ClipSample) -> str:
    return sample.transcript if sample.transcript.strip() else NO_SPEECH


def _slot(label: Label | None) -> str:
    return UNKNOWN if label is None else render_label(label)


def build_behavior_prompt(sample: ClipSample, flavor: Flavor = Flavor.SRL,
                          templates: TemplateSet | None = None) -> str:
    tpl = (templates or default_templates()).get(Stage.BEHAVIOR, flavor)
    return tpl.render(transcript=_transcript(sample), label_menu=label_menu(Stage.BEHAVIOR))


def build_cognition_prompt(sample: ClipSample, behavior: BehaviorLabel | None,
                           flavor: Flavor = Flavor.SRL,
                           templates: TemplateSet | None = None) -> str:
    tpl = (templates or default_templates()).get(Stage.COGNITION, flavor)
    return tpl.render(
        transcript=_transcript(sample),
        behavior=_slot(behavior),
        label_menu=label_menu(Stage.COGNITION),
    )


def build_emotion_prompt(sample: ClipSample, behavior: BehaviorLabel | None,
                         cognition: CognitionLabel | None, flavor: Flavor = Flavor.SRL,
                         templates: TemplateSet | None = None) -> str:
    tpl = (templates or default_templates()).get(Stage.EMOTION, flavor)
    return tpl.render(
        transcript=_transcript(sample),
        behavior=_slot(behavior),
        cognition=_slot(cognition),
        label_menu=label_menu(Stage.EMOTION),
    )


def build_combined_prompt(sample: ClipSample, flavor: Flavor = Flavor.SRL,
                          templates: TemplateSet | None = None) -> str:
    tpl = (templates or default_templates()).get(Stage.COMBINED, flavor)
    return tpl.render(transcript=_transcript(sample), label_menu=label_menu(Stage.COMBINED))


def clarification(stage: Stage) -> str:
    """Suffix appended when retrying after an unparseable reply."""
    if stage is Stage.COMBINED:
        return ("\n\nYour previous reply could not be parsed. Reply with exactly three lines:\n"
                + label_menu(Stage.COMBINED).replace(": ", ": one of "))
    return f"\n\nReply with exactly one label from: {label_menu(stage)}\nAnswer: <label>"
