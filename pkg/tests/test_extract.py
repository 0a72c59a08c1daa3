from __future__ import annotations

import json

import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import CORPUS
from mentalstate.domain import DIMENSIONS, BehaviorLabel, CognitionLabel, Stage, labels_for, render_label
from mentalstate.extract import ANSWER_LINE, LAST_MENTION, NONE, Extraction, extract, extract_combined


def _corpus():
    with open(CORPUS, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


@pytest.mark.parametrize("case", _corpus(), ids=lambda c: f"{c['stage']}:{c['text'][:30]!r}")
def test_corpus(case):
    stage = Stage(case["stage"])
    if stage is Stage.COMBINED:
        got = [render_label(x.label) for x in extract_combined(case["text"])]
    else:
        got = render_label(extract(stage, case["text"]).label)
    assert got == case["expected"]


def test_answer_line():
    ex = extract(Stage.COGNITION, "...reasoning...\nAnswer: C_Negative")
    assert ex.label is CognitionLabel.NEGATIVE
    assert ex.method == ANSWER_LINE
    text = "...reasoning...\nAnswer: C_Negative"
    assert text[slice(*ex.span)] == "C_Negative"


def test_last_mention():
    ex = extract(Stage.BEHAVIOR, "They are monitoring, not controlling the task")
    assert ex.label is BehaviorLabel.CONTROLLING
    assert ex.method == LAST_MENTION


def test_nothing_found():
    ex = extract(Stage.EMOTION, "The group continues working.")
    assert ex.label is None and ex.method == NONE and ex.span is None


def test_extraction_invariant():
    with pytest.raises(ValueError):
        Extraction(None, None, ANSWER_LINE)


def test_combined_partial_and_out_of_order():
    b, c, e = extract_combined("Cognition: C_Mixed\nBehavior: Monitoring\n")
    assert (b.label, c.label, e.label) == (BehaviorLabel.MONITORING, CognitionLabel.MIXED, None)
    assert e.method == NONE


def test_combined_is_not_a_stage():
    with pytest.raises(ValueError):
        extract(Stage.COMBINED, "Answer: Monitoring")


@pytest.mark.parametrize("stage", DIMENSIONS)
def test_rendered_answer_round_trip(stage):
    for label in labels_for(stage):
        rendered = render_label(label)
        for text in (rendered, rendered.upper(), rendered.lower()):
            assert extract(stage, "Answer: " + text).label is label


_label_words = [render_label(x) for s in DIMENSIONS for x in labels_for(s)]


@given(st.lists(st.one_of(st.sampled_from(_label_words), st.text(max_size=10)), max_size=12))
def test_stage_scoping_and_determinism(parts):
    text = " ".join(parts)
    for stage in DIMENSIONS:
        ex = extract(stage, text)
        assert ex.label is None or ex.label in labels_for(stage)
        assert ex == extract(stage, text)


@given(st.sampled_from(["C_Positive", "C_Negative", "C_Mixed", "C_Neutral",
                        "E_Positive", "E_Negative", "E_Mixed", "E_Neutral"]))
def test_behavior_never_sees_prefixed_labels(word):
    assert extract(Stage.BEHAVIOR, f"The state is {word}.\nAnswer: {word}").label is None
