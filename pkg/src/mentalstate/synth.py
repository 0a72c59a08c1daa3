"""Synthetic manifests drawn from conditional label tables.

Triplets are drawn ancestrally (B, then C|B, then E|B,C) with one
hash-keyed uniform per (seed, index, dimension), so any worker count yields
the same manifest.
"""

from __future__ import annotations

import enum
import io
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

from PIL import Image

from .categorical import (
    B_LABELS,
    C_LABELS,
    E_LABELS,
    CategoricalModel,
    categorical_draw,
    counter_uniform,
    marginalize,
)
from .domain import (
    BehaviorLabel,
    ClipSample,
    CognitionLabel,
    EmotionLabel,
    MentalStateTriplet,
    dump_manifest,
)

# Reference dataset figures: behavior marginal for Monitoring, the Controlling -> C_Neutral
# share, and the full Monitoring cognition row.
MONITORING_SHARE = 0.562
CONTROLLING_C_NEUTRAL = 0.991
MONITORING_COGNITION = {
    CognitionLabel.POSITIVE: 0.252,
    CognitionLabel.NEGATIVE: 0.270,
    CognitionLabel.MIXED: 0.094,
    CognitionLabel.NEUTRAL: 0.384,
}
# Reference marginals used only as targets: C_Neutral overall and E_Neutral overall.
COGNITION_NEUTRAL_SHARE = 0.478
EMOTION_NEUTRAL_SHARE = 0.656
MATCHING_EMOTION_MASS = 0.70


class TranscriptStyle(enum.Enum):
    KEYWORD_BEARING = "keyword"
    PLAIN = "plain"


def _controlling_share() -> float:
    # Pick P(Controlling) so the implied C_Neutral marginal hits the reference
    # share, given that the Mixed row copies the Monitoring row.
    # C_Neutral = n_mon * (1 - p_ctrl) + n_ctrl * p_ctrl
    neutral_mon = MONITORING_COGNITION[CognitionLabel.NEUTRAL]
    share = (COGNITION_NEUTRAL_SHARE - neutral_mon) / (CONTROLLING_C_NEUTRAL - neutral_mon)
    return round(share, 3)


def paper_model() -> CategoricalModel:
    """Tables seeded from the reference dataset statistics.

    Cells those statistics do not pin down are filled by stated assumptions and
    listed in ``assumed``: the Controlling/Mixed split of the behavior
    marginal, the small non-neutral Controlling cells, the Mixed-behavior
    cognition row (a copy of Monitoring) and the whole emotion table (0.70 on
    the valence-matching emotion, the rest spread evenly).
    """
    controlling = _controlling_share()
    p_b = (MONITORING_SHARE, controlling, round(1.0 - MONITORING_SHARE - controlling, 3))
    mon_row = tuple(MONITORING_COGNITION[c] for c in C_LABELS)
    leftover = (1.0 - CONTROLLING_C_NEUTRAL) / 3
    ctrl_row = tuple(CONTROLLING_C_NEUTRAL if c is CognitionLabel.NEUTRAL else leftover for c in C_LABELS)
    p_c = (mon_row, ctrl_row, mon_row)
    other = (1.0 - MATCHING_EMOTION_MASS) / 3
    p_e = []
    for _b in B_LABELS:
        for c in C_LABELS:
            p_e.append(tuple(MATCHING_EMOTION_MASS if e.value == c.value else other for e in E_LABELS))
    assumed = [
        "p_behavior[Controlling]", "p_behavior[Mixed]",
        *(f"p_cognition_given_behavior[Controlling][C_{c.value}]"
          for c in C_LABELS if c is not CognitionLabel.NEUTRAL),
        *(f"p_cognition_given_behavior[Mixed][C_{c.value}]" for c in C_LABELS),
        "p_emotion_given_behavior_cognition[*]",
    ]
    return CategoricalModel(p_b, p_c, tuple(p_e), tuple(assumed))


def diagnostics(model: CategoricalModel) -> dict:
    """Implied marginals next to the reference targets the tables do not enforce."""
    _, p_c, p_e = marginalize(model)
    return {
        "c_neutral": {"implied": p_c[C_LABELS.index(CognitionLabel.NEUTRAL)],
                      "target": COGNITION_NEUTRAL_SHARE},
        "e_neutral": {"implied": p_e[E_LABELS.index(EmotionLabel.NEUTRAL)],
                      "target": EMOTION_NEUTRAL_SHARE},
    }


PHRASES = {
    BehaviorLabel.MONITORING: (
        "Wait, where are we now with this part?",
        "Did we already write down the second measurement?",
        "So we have done three of the five steps.",
    ),
    BehaviorLabel.CONTROLLING: (
        "Pour it here and then put the lid on.",
        "You hold the tube and I will read the scale.",
        "Let's do the next sample first.",
    ),
    BehaviorLabel.MIXED: (
        "Are we done with this? Then take the next one.",
        "I think we are behind, so let's hurry with the last step.",
        "Did that work? If not, try the other bottle.",
    ),
    CognitionLabel.POSITIVE: (
        "This actually makes sense now.",
        "We got that one right, I'm sure.",
    ),
    CognitionLabel.NEGATIVE: (
        "I really have no idea what this means.",
        "This doesn't seem to work at all.",
    ),
    CognitionLabel.MIXED: (
        "The first part is clear but the rest confuses me.",
        "Maybe it's right, though I'm not sure about the numbers.",
    ),
    CognitionLabel.NEUTRAL: (
        "The value is twelve.",
        "Next is the water sample.",
    ),
    EmotionLabel.POSITIVE: (
        "Haha, this is fun!",
        "Yes, great, finally!",
    ),
    EmotionLabel.NEGATIVE: (
        "Ugh, this is so annoying.",
        "I'm so bored of this.",
    ),
    EmotionLabel.MIXED: (
        "Great, it's broken again, haha.",
        "I'm nervous but this is kind of exciting.",
    ),
    EmotionLabel.NEUTRAL: (
        "Okay.",
        "Right.",
    ),
}

PLAIN_PHRASES = (
    "We are working on the experiment.",
    "They talk about the task.",
    "Someone moves the equipment.",
)

FRAME_COLORS = {
    BehaviorLabel.MONITORING: (70, 110, 160),
    BehaviorLabel.CONTROLLING: (160, 90, 60),
    BehaviorLabel.MIXED: (110, 140, 90),
}


@dataclass(frozen=True)
class GeneratorSpec:
    n_samples: int
    model: CategoricalModel
    seed: int = 0
    transcript_style: TranscriptStyle = TranscriptStyle.KEYWORD_BEARING
    frames_per_clip: int = 8
    frame_side_px: int = 448

    def __post_init__(self) -> None:
        if self.n_samples < 1:
            raise ValueError("n_samples must be >= 1")
        if self.frames_per_clip < 1 or self.frame_side_px < 1:
            raise ValueError("frames_per_clip and frame_side_px must be positive")


def clip_id_for(index: int) -> str:
    return f"synth-{index:06d}"


def _pick(options: tuple[str, ...], seed: int, index: int, slot: str) -> str:
    return options[int(counter_uniform(seed, index, slot) * len(options))]


def draw_triplet(model: CategoricalModel, seed: int, index: int) -> MentalStateTriplet:
    b = B_LABELS[categorical_draw(model.p_behavior, counter_uniform(seed, index, "behavior"))]
    c = C_LABELS[categorical_draw(model.cognition_row(b), counter_uniform(seed, index, "cognition"))]
    e = E_LABELS[categorical_draw(model.emotion_row(b, c), counter_uniform(seed, index, "emotion"))]
    return MentalStateTriplet(b, c, e)


def generate_one(spec: GeneratorSpec, index: int) -> ClipSample:
    gold = draw_triplet(spec.model, spec.seed, index)
    if spec.transcript_style is TranscriptStyle.KEYWORD_BEARING:
        transcript = " ".join(
            _pick(PHRASES[label], spec.seed, index, f"phrase-{n}") for n, label in enumerate(gold)
        )
    else:
        transcript = _pick(PLAIN_PHRASES, spec.seed, index, "plain")
    duration = round(3.0 + 6.2 * counter_uniform(spec.seed, index, "duration"), 2)
    group_size = 2 + int(3 * counter_uniform(spec.seed, index, "group"))
    clip_id = clip_id_for(index)
    return ClipSample(
        clip_id=clip_id,
        frames_dir=f"frames/{clip_id}",
        transcript=transcript,
        duration_s=duration,
        group_size=group_size,
        gold=gold,
    )


def generate(spec: GeneratorSpec, workers: int = 1) -> list[ClipSample]:
    if workers <= 1:
        return [generate_one(spec, i) for i in range(spec.n_samples)]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda i: generate_one(spec, i), range(spec.n_samples),
                             chunksize=256))


def _png_bytes(color: tuple[int, int, int], side: int) -> bytes:
    buf = io.BytesIO()
    Image.new("RGB", (side, side), color).save(buf, format="PNG")
    return buf.getvalue()


def write_dataset(out_dir: str | Path, spec: GeneratorSpec, workers: int = 1,
                  frames: bool = True) -> list[ClipSample]:
    """Write manifest.jsonl, model.json and placeholder frames under ``out_dir``."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write-test"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as exc:
        raise OSError(f"output directory {out} is not writable: {exc}") from exc
    samples = generate(spec, workers)
    (out / "manifest.jsonl").write_text(dump_manifest(samples), encoding="utf-8")
    (out / "model.json").write_text(spec.model.dumps(), encoding="utf-8")
    if frames:
        cache: dict[tuple, bytes] = {}
        for sample in samples:
            color = FRAME_COLORS[sample.gold.behavior]
            if color not in cache:
                cache[color] = _png_bytes(color, spec.frame_side_px)
            frame_dir = out / sample.frames_dir
            frame_dir.mkdir(parents=True, exist_ok=True)
            for i in range(spec.frames_per_clip):
                (frame_dir / f"frame_{i}.png").write_bytes(cache[color])
    return samples


def load_model(source: str | Path) -> CategoricalModel:
    """``"paper"`` or a path to a model JSON file."""
    if str(source) == "paper":
        return paper_model()
    return CategoricalModel.from_json(json.loads(Path(source).read_text(encoding="utf-8")))
