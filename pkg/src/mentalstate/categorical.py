"""Conditional probability tables over the behavior/cognition/emotion chain.

The joint factorizes as P(B) P(C|B) P(E|B,C). :func:`marginalize` sums the
chain out to per-dimension marginals; the synthetic generator and the
probabilistic mock both sample from the same tables, which makes the
marginals an exact oracle for their empirical frequencies.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import dataclass, field
from typing import Sequence

from .domain import (
    BehaviorLabel,
    CognitionLabel,
    EmotionLabel,
    Stage,
    parse_label,
    render_label,
)

ROW_TOL = 1e-9

B_LABELS = tuple(BehaviorLabel)
C_LABELS = tuple(CognitionLabel)
E_LABELS = tuple(EmotionLabel)


def _check_row(row: Sequence[float], width: int, name: str) -> tuple[float, ...]:
    row = tuple(float(x) for x in row)
    if len(row) != width:
        raise ValueError(f"{name}: expected {width} entries, got {len(row)}")
    if any(not math.isfinite(x) or x < 0 for x in row):
        raise ValueError(f"{name}: entries must be finite and >= 0")
    if abs(math.fsum(row) - 1.0) > ROW_TOL:
        raise ValueError(f"{name}: row sums to {math.fsum(row)!r}, not 1")
    return row


@dataclass(frozen=True)
class CategoricalModel:
    """P(B), P(C|B) as a 3x4 table and P(E|B,C) as a 12x4 table.

    Rows of ``p_emotion_given_behavior_cognition`` are behavior-major:
    row ``4 * b + c`` holds P(E | b, c).
    ``assumed`` lists the cells that are modelling choices rather than data.
    """

    p_behavior: tuple[float, ...]
    p_cognition_given_behavior: tuple[tuple[float, ...], ...]
    p_emotion_given_behavior_cognition: tuple[tuple[float, ...], ...]
    assumed: tuple[str, ...] = field(default=(), compare=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "p_behavior", _check_row(self.p_behavior, 3, "p_behavior"))
        rows = self.p_cognition_given_behavior
        if len(rows) != 3:
            raise ValueError("p_cognition_given_behavior needs 3 rows")
        object.__setattr__(self, "p_cognition_given_behavior", tuple(
            _check_row(r, 4, f"p_cognition_given_behavior[{B_LABELS[i].value}]")
            for i, r in enumerate(rows)))
        rows = self.p_emotion_given_behavior_cognition
        if len(rows) != 12:
            raise ValueError("p_emotion_given_behavior_cognition needs 12 rows")
        object.__setattr__(self, "p_emotion_given_behavior_cognition", tuple(
            _check_row(r, 4, f"p_emotion_given_behavior_cognition[{i}]")
            for i, r in enumerate(rows)))
        object.__setattr__(self, "assumed", tuple(self.assumed))

    def cognition_row(self, b: BehaviorLabel) -> tuple[float, ...]:
        return self.p_cognition_given_behavior[B_LABELS.index(b)]

    def emotion_row(self, b: BehaviorLabel, c: CognitionLabel) -> tuple[float, ...]:
        return self.p_emotion_given_behavior_cognition[4 * B_LABELS.index(b) + C_LABELS.index(c)]

    def to_json(self) -> dict:
        return {
            "p_behavior": {render_label(b): p for b, p in zip(B_LABELS, self.p_behavior)},
            "p_cognition_given_behavior": {
                render_label(b): {render_label(c): p for c, p in zip(C_LABELS, row)}
                for b, row in zip(B_LABELS, self.p_cognition_given_behavior)
            },
            "p_emotion_given_behavior_cognition": {
                f"{render_label(b)}|{render_label(c)}": {
                    render_label(e): p for e, p in zip(E_LABELS, self.emotion_row(b, c))
                }
                for b in B_LABELS for c in C_LABELS
            },
            "assumed": list(self.assumed),
        }

    @classmethod
    def from_json(cls, obj: dict) -> CategoricalModel:
        def row(mapping: dict, stage: Stage, labels: tuple) -> list[float]:
            parsed = {parse_label(stage, k): float(v) for k, v in mapping.items()}
            missing = [render_label(x) for x in labels if x not in parsed]
            if missing:
                raise ValueError(f"missing entries {missing}")
            return [parsed[x] for x in labels]

        p_b = row(obj["p_behavior"], Stage.BEHAVIOR, B_LABELS)
        cog = {parse_label(Stage.BEHAVIOR, k): v for k, v in obj["p_cognition_given_behavior"].items()}
        p_c = [row(cog[b], Stage.COGNITION, C_LABELS) for b in B_LABELS]
        emo = {}
        for key, v in obj["p_emotion_given_behavior_cognition"].items():
            b_text, c_text = key.split("|")
            emo[parse_label(Stage.BEHAVIOR, b_text), parse_label(Stage.COGNITION, c_text)] = v
        p_e = [row(emo[b, c], Stage.EMOTION, E_LABELS) for b in B_LABELS for c in C_LABELS]
        return cls(p_b, p_c, p_e, tuple(obj.get("assumed", ())))

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2) + "\n"


def uniform_model() -> CategoricalModel:
    return CategoricalModel((1 / 3,) * 3, ((0.25,) * 4,) * 3, ((0.25,) * 4,) * 12)


def marginalize(model: CategoricalModel) -> tuple[list[float], list[float], list[float]]:
    """Return (P(B), P(C), P(E)) by summing out the chain.

    P(C)[c] = sum_b P(c|b) P(b)
    P(E)[e] = sum_{b,c} P(e|b,c) P(c|b) P(b)
    """
    # tables are validated on construction; re-check in case of a hand-built object
    _check_row(model.p_behavior, 3, "p_behavior")
    for r in model.p_cognition_given_behavior:
        _check_row(r, 4, "p_cognition_given_behavior")
    for r in model.p_emotion_given_behavior_cognition:
        _check_row(r, 4, "p_emotion_given_behavior_cognition")

    p_b = list(model.p_behavior)
    p_c = [
        math.fsum(model.p_cognition_given_behavior[i][j] * p_b[i] for i in range(3))
        for j in range(4)
    ]
    p_e = [
        math.fsum(
            model.p_emotion_given_behavior_cognition[4 * i + j][k]
            * model.p_cognition_given_behavior[i][j] * p_b[i]
            for i in range(3) for j in range(4)
        )
        for k in range(4)
    ]
    return p_b, p_c, p_e


def counter_uniform(seed: int, *key: object) -> float:
    """Uniform float in [0, 1) that depends only on ``(seed, key)``.

    A keyed hash acts as a counter-based generator: every (seed, index, stage)
    gets its own stream, so results do not depend on call order or worker count.
    """
    payload = json.dumps([seed, *[str(k) for k in key]]).encode()
    digest = hashlib.blake2b(payload, digest_size=8).digest()
    return (struct.unpack(">Q", digest)[0] >> 11) * (1.0 / (1 << 53))


def categorical_draw(probs: Sequence[float], u: float) -> int:
    """Inverse-CDF draw of an index from ``probs`` given ``u`` in [0, 1)."""
    acc = 0.0
    last = None
    for i, p in enumerate(probs):
        if p <= 0:
            continue
        acc += p
        last = i
        if u < acc:
            return i
    if last is None:
        raise ValueError("distribution has no positive mass")
    return last
