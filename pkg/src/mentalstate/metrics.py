"""Per-dimension scoring, flow statistics and inter-rater agreement.

Predictions may be ``None`` (Unparsed). An Unparsed prediction is a false
negative for the gold class and a false positive for no class.
"""

from __future__ import annotations

import csv
import io
import math
from collections import Counter
from dataclasses import dataclass
from fractions import Fraction
from typing import Hashable, Iterable, Sequence

from .domain import (
    DIMENSIONS,
    UNPARSED,
    ClipSample,
    MentalStateTriplet,
    Stage,
    StageTranscript,
    labels_for,
    render_label,
    stage_of,
)

PRESENT = "present"
ALL = "all"


def _check_pair(gold: Sequence, pred: Sequence) -> None:
    if len(gold) != len(pred):
        raise ValueError(f"length mismatch: {len(gold)} gold vs {len(pred)} predicted")
    if not gold:
        raise ValueError("cannot score an empty list")
    if any(g is None for g in gold):
        raise ValueError("gold labels may not be Unparsed")


def _label_space(gold: Sequence, pred: Sequence, labels: Sequence | None) -> list:
    if labels is not None:
        return list(labels)
    try:
        return labels_for(stage_of(gold[0]))
    except TypeError:
        seen = {x for x in (*gold, *pred) if x is not None}
        return sorted(seen, key=str)


@dataclass(frozen=True)
class ClassScore:
    precision: Fraction
    recall: Fraction
    f1: Fraction
    support: int


def per_class_scores(gold: Sequence[Hashable], pred: Sequence[Hashable | None],
                     labels: Sequence | None = None) -> dict:
    """Exact (rational) precision, recall and F1 for every label in the space."""
    _check_pair(gold, pred)
    tp: Counter = Counter()
    fp: Counter = Counter()
    fn: Counter = Counter()
    for g, p in zip(gold, pred):
        if g == p:
            tp[g] += 1
            continue
        fn[g] += 1
        if p is not None:
            fp[p] += 1
    scores = {}
    for c in _label_space(gold, pred, labels):
        # F1 = 2TP / (2TP + FP + FN), which equals 2PR/(P+R) and is 0 when TP = 0
        denom_p = tp[c] + fp[c]
        denom_r = tp[c] + fn[c]
        precision = Fraction(tp[c], denom_p) if denom_p else Fraction(0)
        recall = Fraction(tp[c], denom_r) if denom_r else Fraction(0)
        denom_f = 2 * tp[c] + fp[c] + fn[c]
        f1 = Fraction(2 * tp[c], denom_f) if denom_f else Fraction(0)
        scores[c] = ClassScore(precision, recall, f1, tp[c] + fn[c])
    return scores


def macro_f1(gold: Sequence[Hashable], pred: Sequence[Hashable | None],
             labels: Sequence | None = None, average: str = PRESENT) -> float:
    """Macro-averaged F1 as a percentage.

    ``average="present"`` (default) averages over classes that occur in gold;
    ``average="all"`` over the whole label space.
    """
    scores = per_class_scores(gold, pred, labels)
    if average == PRESENT:
        present = set(gold)
        f1s = [s.f1 for c, s in scores.items() if c in present]
    elif average == ALL:
        f1s = [s.f1 for s in scores.values()]
    else:
        raise ValueError(f"average must be 'present' or 'all', got {average!r}")
    return float(100 * sum(f1s, Fraction(0)) / len(f1s))


def accuracy(gold: Sequence[Hashable], pred: Sequence[Hashable | None]) -> float:
    _check_pair(gold, pred)
    hits = sum(1 for g, p in zip(gold, pred) if p is not None and g == p)
    return float(Fraction(100 * hits, len(gold)))


def avg_macro_f1(scores: Iterable[float]) -> float:
    scores = list(scores)
    if len(scores) != 3:
        raise ValueError(f"expected three dimension scores, got {len(scores)}")
    return math.fsum(scores) / 3


def pct(x: float) -> float:
    """Round a percentage to two decimals for reporting."""
    return round(x, 2)


def cohen_kappa(ratings_a: Sequence[Hashable], ratings_b: Sequence[Hashable]) -> float:
    """Cohen's kappa for two raters: (p_o - p_e) / (1 - p_e)."""
    if len(ratings_a) != len(ratings_b):
        raise ValueError(f"length mismatch: {len(ratings_a)} vs {len(ratings_b)}")
    n = len(ratings_a)
    if n == 0:
        raise ValueError("cannot compute kappa on empty ratings")
    p_o = Fraction(sum(a == b for a, b in zip(ratings_a, ratings_b)), n)
    count_a, count_b = Counter(ratings_a), Counter(ratings_b)
    p_e = sum((Fraction(count_a[k] * count_b[k], n * n) for k in count_a), Fraction(0))
    if p_e == 1:
        # both raters used one identical label throughout
        return 1.0
    return float((p_o - p_e) / (1 - p_e))


@dataclass(frozen=True)
class ConfusionMatrix:
    stage: Stage
    labels: tuple
    counts: tuple[tuple[int, ...], ...]  # rows: gold; columns: labels + Unparsed

    @property
    def total(self) -> int:
        return sum(map(sum, self.counts))

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["gold\\pred", *(render_label(x) for x in self.labels), UNPARSED])
        for label, row in zip(self.labels, self.counts):
            writer.writerow([render_label(label), *row])
        return buf.getvalue()


def confusion_matrix(stage: Stage, gold: Sequence, pred: Sequence) -> ConfusionMatrix:
    _check_pair(gold, pred)
    labels = tuple(labels_for(stage))
    index = {x: i for i, x in enumerate(labels)}
    counts = [[0] * (len(labels) + 1) for _ in labels]
    for g, p in zip(gold, pred):
        counts[index[g]][len(labels) if p is None else index[p]] += 1
    return ConfusionMatrix(stage, labels, tuple(map(tuple, counts)))


@dataclass(frozen=True)
class FlowTables:
    """Row-normalized transition tables; rows without support are empty dicts."""

    behavior_to_cognition: dict
    cognition_to_emotion: dict

    def to_json(self) -> dict:
        def render(table: dict) -> dict:
            return {render_label(k): {render_label(c): v for c, v in row.items()}
                    for k, row in table.items()}
        return {
            "behavior_to_cognition": render(self.behavior_to_cognition),
            "cognition_to_emotion": render(self.cognition_to_emotion),
        }


def _flow(pairs: Iterable[tuple], sources: Sequence, targets: Sequence) -> dict:
    counts = {s: Counter() for s in sources}
    for s, t in pairs:
        counts[s][t] += 1
    table = {}
    for s in sources:
        total = sum(counts[s].values())
        table[s] = {t: counts[s][t] / total for t in targets} if total else {}
    return table


def flow_statistics(triplets: Sequence[MentalStateTriplet]) -> FlowTables:
    if not triplets:
        raise ValueError("flow statistics need at least one triplet")
    b_labels = labels_for(Stage.BEHAVIOR)
    c_labels = labels_for(Stage.COGNITION)
    e_labels = labels_for(Stage.EMOTION)
    return FlowTables(
        _flow(((t.behavior, t.cognition) for t in triplets), b_labels, c_labels),
        _flow(((t.cognition, t.emotion) for t in triplets), c_labels, e_labels),
    )


@dataclass(frozen=True)
class DimensionReport:
    stage: Stage
    per_class: dict
    macro_f1: float
    accuracy: float
    unparsed_rate: float
    confusion: ConfusionMatrix

    def to_json(self) -> dict:
        return {
            "per_class": {
                render_label(c): {
                    "precision": pct(100 * float(s.precision)),
                    "recall": pct(100 * float(s.recall)),
                    "f1": pct(100 * float(s.f1)),
                    "support": s.support,
                }
                for c, s in self.per_class.items()
            },
            "macro_f1": pct(self.macro_f1),
            "accuracy": pct(self.accuracy),
            "unparsed_rate": pct(self.unparsed_rate),
        }


@dataclass(frozen=True)
class EvalReport:
    dimensions: dict
    n_scored: int
    n_failed: int
    average: str
    gold_flow: FlowTables
    predicted_flow: FlowTables | None

    @property
    def avg_macro_f1(self) -> float:
        return avg_macro_f1(self.dimensions[s].macro_f1 for s in DIMENSIONS)

    def to_json(self) -> dict:
        return {
            "n_scored": self.n_scored,
            "n_failed": self.n_failed,
            "average": self.average,
            "dimensions": {s.value: self.dimensions[s].to_json() for s in DIMENSIONS},
            "avg_macro_f1": pct(self.avg_macro_f1),
            "flow": {
                "gold": self.gold_flow.to_json(),
                "predicted": self.predicted_flow.to_json() if self.predicted_flow else None,
            },
        }

    def to_markdown(self) -> str:
        lines = [
            f"Scored samples: {self.n_scored} (failed, excluded: {self.n_failed}); "
            f"macro average over {self.average} classes",
            "",
            "| Dimension | Macro-F1 | Accuracy | Unparsed % |",
            "|---|---:|---:|---:|",
        ]
        for s in DIMENSIONS:
            d = self.dimensions[s]
            lines.append(f"| {s.value} | {d.macro_f1:.2f} | {d.accuracy:.2f} | {d.unparsed_rate:.2f} |")
        lines.append(f"| Avg | {self.avg_macro_f1:.2f} | | |")
        for s in DIMENSIONS:
            d = self.dimensions[s]
            lines += ["", f"### {s.value}", "", "| Class | Precision | Recall | F1 | Support |",
                      "|---|---:|---:|---:|---:|"]
            for c, cs in d.per_class.items():
                lines.append(f"| {render_label(c)} | {100 * float(cs.precision):.2f} | "
                             f"{100 * float(cs.recall):.2f} | {100 * float(cs.f1):.2f} | {cs.support} |")
        return "\n".join(lines) + "\n"


def build_report(samples: Sequence[ClipSample], transcripts: Sequence[StageTranscript],
                 average: str = PRESENT) -> EvalReport:
    """Score completed transcripts against gold; failed samples are excluded."""
    by_id = {s.clip_id: s for s in samples}
    scored = []
    n_failed = 0
    for t in transcripts:
        if t.failed:
            n_failed += 1
            continue
        sample = by_id.get(t.clip_id)
        if sample is None:
            raise ValueError(f"result for unknown clip {t.clip_id!r}")
        if sample.gold is None:
            raise ValueError(f"clip {t.clip_id!r} has no gold labels; cannot score")
        scored.append((sample.gold, t.predicted))
    if not scored:
        raise ValueError("no completed samples to score")
    dims = {}
    for stage in DIMENSIONS:
        gold = [g.get(stage) for g, _ in scored]
        pred = [p.get(stage) for _, p in scored]
        dims[stage] = DimensionReport(
            stage=stage,
            per_class=per_class_scores(gold, pred, labels_for(stage)),
            macro_f1=macro_f1(gold, pred, labels_for(stage), average),
            accuracy=accuracy(gold, pred),
            unparsed_rate=100 * sum(p is None for p in pred) / len(pred),
            confusion=confusion_matrix(stage, gold, pred),
        )
    complete_preds = [
        MentalStateTriplet(*p) for _, p in scored if p.complete
    ]
    return EvalReport(
        dimensions=dims,
        n_scored=len(scored),
        n_failed=n_failed,
        average=average,
        gold_flow=flow_statistics([g for g, _ in scored]),
        predicted_flow=flow_statistics(complete_preds) if complete_preds else None,
    )

