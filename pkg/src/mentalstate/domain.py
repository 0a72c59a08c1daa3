"""Label algebra, clip records, run configuration and manifest ingestion."""

from __future__ import annotations

import enum
import itertools
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Union

UNPARSED = "Unparsed"
UNKNOWN = "Unknown"


class Stage(enum.Enum):
    BEHAVIOR = "Behavior"
    COGNITION = "Cognition"
    EMOTION = "Emotion"
    COMBINED = "Combined"


DIMENSIONS = (Stage.BEHAVIOR, Stage.COGNITION, Stage.EMOTION)


class BehaviorLabel(enum.Enum):
    MONITORING = "Monitoring"
    CONTROLLING = "Controlling"
    MIXED = "Mixed"


class CognitionLabel(enum.Enum):
    POSITIVE = "Positive"
    NEGATIVE = "Negative"
    MIXED = "Mixed"
    NEUTRAL = "Neutral"


class EmotionLabel(enum.Enum):
    POSITIVE = "Positive"
    NEGATIVE = "Negative"
    MIXED = "Mixed"
    NEUTRAL = "Neutral"


Label = Union[BehaviorLabel, CognitionLabel, EmotionLabel]

LABEL_TYPES: dict[Stage, type] = {
    Stage.BEHAVIOR: BehaviorLabel,
    Stage.COGNITION: CognitionLabel,
    Stage.EMOTION: EmotionLabel,
}

# cognition and emotion share bare names, so their canonical forms carry a prefix
PREFIXES: dict[Stage, str] = {
    Stage.BEHAVIOR: "",
    Stage.COGNITION: "C_",
    Stage.EMOTION: "E_",
}


def stage_of(label: Label) -> Stage:
    for stage, cls in LABEL_TYPES.items():
        if isinstance(label, cls):
            return stage
    raise TypeError(f"not a label: {label!r}")


def labels_for(stage: Stage) -> list[Label]:
    return list(LABEL_TYPES[stage])


def render_label(label: Label | None) -> str:
    """Canonical string form: ``Monitoring``, ``C_Positive``, ``E_Neutral``.

    ``None`` (an extraction failure) renders as ``Unparsed``.
    """
    if label is None:
        return UNPARSED
    return PREFIXES[stage_of(label)] + label.value


def parse_label(stage: Stage, text: str) -> Label:
    """Parse a bare or prefixed label name within one stage's label space.

    Matching is case-insensitive. A prefix belonging to another stage is
    rejected, so ``E_Mixed`` is not a cognition label.
    """
    cls = LABEL_TYPES[stage]
    prefix = PREFIXES[stage].lower()
    key = text.strip().lower()
    if prefix and key.startswith(prefix):
        key = key[len(prefix):]
    for label in cls:
        if label.value.lower() == key:
            return label
    raise ValueError(f"{text!r} is not a {stage.value.lower()} label")


def parse_optional_label(stage: Stage, text: str | None) -> Label | None:
    """Like :func:`parse_label` but maps ``Unparsed``/``Unknown``/None to None."""
    if text is None or text in (UNPARSED, UNKNOWN):
        return None
    return parse_label(stage, text)


@dataclass(frozen=True)
class MentalStateTriplet:
    behavior: BehaviorLabel
    cognition: CognitionLabel
    emotion: EmotionLabel

    def __post_init__(self) -> None:
        for value, cls in zip(self, (BehaviorLabel, CognitionLabel, EmotionLabel)):
            if not isinstance(value, cls):
                raise TypeError(f"expected {cls.__name__}, got {value!r}")

    def __iter__(self) -> Iterator[Label]:
        return iter((self.behavior, self.cognition, self.emotion))

    def get(self, stage: Stage) -> Label:
        return tuple(self)[DIMENSIONS.index(stage)]

    def to_json(self) -> dict[str, str]:
        return {
            "behavior": render_label(self.behavior),
            "cognition": render_label(self.cognition),
            "emotion": render_label(self.emotion),
        }

    @classmethod
    def from_json(cls, obj: dict) -> MentalStateTriplet:
        return cls(
            parse_label(Stage.BEHAVIOR, obj["behavior"]),
            parse_label(Stage.COGNITION, obj["cognition"]),
            parse_label(Stage.EMOTION, obj["emotion"]),
        )


@dataclass(frozen=True)
class PredictedTriplet:
    """A triplet whose slots may be None when extraction failed."""

    behavior: BehaviorLabel | None = None
    cognition: CognitionLabel | None = None
    emotion: EmotionLabel | None = None

    def __iter__(self) -> Iterator[Label | None]:
        return iter((self.behavior, self.cognition, self.emotion))

    def get(self, stage: Stage) -> Label | None:
        return tuple(self)[DIMENSIONS.index(stage)]

    @property
    def complete(self) -> bool:
        return None not in tuple(self)

    def to_json(self) -> dict[str, str]:
        return {
            "behavior": render_label(self.behavior),
            "cognition": render_label(self.cognition),
            "emotion": render_label(self.emotion),
        }

    @classmethod
    def from_json(cls, obj: dict) -> PredictedTriplet:
        return cls(
            parse_optional_label(Stage.BEHAVIOR, obj.get("behavior")),
            parse_optional_label(Stage.COGNITION, obj.get("cognition")),
            parse_optional_label(Stage.EMOTION, obj.get("emotion")),
        )


def all_triplets() -> list[MentalStateTriplet]:
    """Every point of the 3 x 4 x 4 output space, in label declaration order."""
    return [
        MentalStateTriplet(b, c, e)
        for b, c, e in itertools.product(BehaviorLabel, CognitionLabel, EmotionLabel)
    ]


@dataclass(frozen=True)
class ClipSample:
    clip_id: str
    frames_dir: str
    transcript: str
    duration_s: float
    group_size: int | None = None
    gold: MentalStateTriplet | None = None
    video: str | None = None

    def __post_init__(self) -> None:
        if not self.clip_id:
            raise ValueError("clip_id must be nonempty")
        if not math.isfinite(self.duration_s) or self.duration_s < 0:
            raise ValueError(f"duration_s must be >= 0, got {self.duration_s}")
        if self.group_size is not None and not 2 <= self.group_size <= 4:
            raise ValueError(f"group_size must be 2-4 or null, got {self.group_size}")

    def to_json(self) -> dict:
        obj = {
            "clip_id": self.clip_id,
            "frames_dir": self.frames_dir,
            "transcript": self.transcript,
            "duration_s": self.duration_s,
            "group_size": self.group_size,
            "gold": self.gold.to_json() if self.gold else None,
        }
        if self.video is not None:
            obj["video"] = self.video
        return obj


class ManifestError(ValueError):
    def __init__(self, line_no: int, field_name: str | None, message: str):
        self.line_no = line_no
        self.field_name = field_name
        where = f"line {line_no}" + (f", field {field_name!r}" if field_name else "")
        super().__init__(f"manifest {where}: {message}")


_REQUIRED_TYPES = {
    "clip_id": str,
    "frames_dir": str,
    "transcript": str,
    "duration_s": (int, float),
}


def _sample_from_record(obj: object, line_no: int, root: Path | None) -> ClipSample:
    if not isinstance(obj, dict):
        raise ManifestError(line_no, None, "record is not a JSON object")
    for name, types in _REQUIRED_TYPES.items():
        if name not in obj:
            raise ManifestError(line_no, name, "missing")
        if isinstance(obj[name], bool) or not isinstance(obj[name], types):
            raise ManifestError(line_no, name, f"wrong type {type(obj[name]).__name__}")
    group_size = obj.get("group_size")
    if group_size is not None and (isinstance(group_size, bool) or not isinstance(group_size, int)):
        raise ManifestError(line_no, "group_size", "must be an integer or null")
    gold = None
    if obj.get("gold") is not None:
        try:
            gold = MentalStateTriplet.from_json(obj["gold"])
        except (KeyError, TypeError, ValueError, AttributeError) as exc:
            raise ManifestError(line_no, "gold", str(exc)) from None
    video = obj.get("video")
    if video is not None and not isinstance(video, str):
        raise ManifestError(line_no, "video", "must be a string or null")
    frames_dir = obj["frames_dir"]
    if root is not None and not Path(frames_dir).is_absolute():
        frames_dir = str(root / frames_dir)
    if video is not None and root is not None and not Path(video).is_absolute():
        video = str(root / video)
    try:
        return ClipSample(
            clip_id=obj["clip_id"],
            frames_dir=frames_dir,
            transcript=obj["transcript"],
            duration_s=float(obj["duration_s"]),
            group_size=group_size,
            gold=gold,
            video=video,
        )
    except ValueError as exc:
        raise ManifestError(line_no, None, str(exc)) from None


def parse_manifest(data: bytes | str, root: str | Path | None = None) -> list[ClipSample]:
    """Parse a JSONL manifest into samples, preserving line order.

    Relative ``frames_dir``/``video`` paths are joined onto ``root`` when given.
    """
    text = data.decode("utf-8") if isinstance(data, bytes) else data
    root_path = Path(root) if root is not None else None
    samples: list[ClipSample] = []
    seen: dict[str, int] = {}
    # JSON may carry raw U+0085/U+2028 inside strings, so split on newlines only
    for line_no, line in enumerate(text.split("\n"), start=1):
        line = line.rstrip("\r")
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ManifestError(line_no, None, f"invalid JSON ({exc.msg})") from None
        sample = _sample_from_record(obj, line_no, root_path)
        if sample.clip_id in seen:
            raise ManifestError(
                line_no, "clip_id",
                f"duplicate clip_id {sample.clip_id!r} (first on line {seen[sample.clip_id]})",
            )
        seen[sample.clip_id] = line_no
        samples.append(sample)
    return samples


def load_manifest(path: str | Path) -> list[ClipSample]:
    path = Path(path)
    return parse_manifest(path.read_bytes(), root=path.parent)


def dump_manifest(samples: list[ClipSample]) -> str:
    return "".join(json.dumps(s.to_json(), ensure_ascii=False) + "\n" for s in samples)


class Mode(enum.Enum):
    FULL_MAS = "FullMAS"
    SINGLE_PASS = "SinglePass"
    NO_SRL = "NoSRL"
    TEXT_ONLY = "TextOnly"

    @property
    def calls_per_sample(self) -> int:
        return 1 if self is Mode.SINGLE_PASS else 3

    @classmethod
    def parse(cls, text: str) -> Mode:
        key = text.strip().lower().replace("-", "").replace("_", "")
        aliases = {
            "fullmas": cls.FULL_MAS, "full": cls.FULL_MAS,
            "singlepass": cls.SINGLE_PASS, "single": cls.SINGLE_PASS,
            "nosrl": cls.NO_SRL,
            "textonly": cls.TEXT_ONLY, "text": cls.TEXT_ONLY,
        }
        try:
            return aliases[key]
        except KeyError:
            raise ValueError(f"unknown mode {text!r}") from None


@dataclass(frozen=True)
class RunConfig:
    """Run settings. Defaults follow the reference protocol (8 frames at 448 px,
    greedy decoding, 1024 new tokens)."""

    mode: Mode = Mode.FULL_MAS
    frames_per_clip: int = 8
    frame_side_px: int = 448
    temperature: float = 0.0
    max_new_tokens: int = 1024
    max_concurrent_samples: int = 4
    retry_on_unparseable: bool = True
    seed: int = 0

    def __post_init__(self) -> None:
        for name in ("frames_per_clip", "frame_side_px", "max_new_tokens", "max_concurrent_samples"):
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, int) or value < 1:
                raise ValueError(f"{name} must be a positive integer, got {value!r}")
        if not self.temperature >= 0:
            raise ValueError(f"temperature must be >= 0, got {self.temperature}")
        if not -(2**63) <= self.seed < 2**64:
            raise ValueError("seed must fit in 64 bits")

    def to_json(self) -> dict:
        obj = asdict(self)
        obj["mode"] = self.mode.value
        return obj

    @classmethod
    def from_json(cls, obj: dict) -> RunConfig:
        known = set(cls.__dataclass_fields__)
        unknown = set(obj) - known
        if unknown:
            raise ValueError(f"unknown config fields: {sorted(unknown)}")
        kwargs = dict(obj)
        if "mode" in kwargs:
            kwargs["mode"] = Mode.parse(kwargs["mode"])
        return cls(**kwargs)


@dataclass(frozen=True)
class StageRecord:
    stage: Stage
    prompt: str
    frame_refs: tuple[str, ...]
    raw_output: str
    labels: tuple[Label | None, ...]
    method: str
    calls: int = 1
    started_ns: int = 0
    wall_time_s: float = 0.0

    def to_json(self) -> dict:
        obj = {
            "stage": self.stage.value,
            "prompt": self.prompt,
            "frame_refs": list(self.frame_refs),
            "raw_output": self.raw_output,
            "method": self.method,
            "calls": self.calls,
        }
        if self.stage is Stage.COMBINED:
            obj["labels"] = [render_label(x) for x in self.labels]
        else:
            obj["label"] = render_label(self.labels[0])
        return obj


@dataclass(frozen=True)
class StageTranscript:
    """Everything that happened while running one sample through the pipeline."""

    clip_id: str
    mode: Mode
    stages: tuple[StageRecord, ...] = ()
    predicted: PredictedTriplet = field(default_factory=PredictedTriplet)
    status: str = "Completed"
    error: str | None = None
    warnings: tuple[str, ...] = ()

    @property
    def backend_calls(self) -> int:
        return sum(s.calls for s in self.stages)

    @property
    def failed(self) -> bool:
        return self.status == "Failed"

    def to_json(self) -> dict:
        """Deterministic record; timing lives in :meth:`timing_json`."""
        return {
            "clip_id": self.clip_id,
            "mode": self.mode.value,
            "status": self.status,
            "error": self.error,
            "predicted": self.predicted.to_json(),
            "backend_calls": self.backend_calls,
            "warnings": list(self.warnings),
            "stages": [s.to_json() for s in self.stages],
        }

    def timing_json(self) -> dict:
        return {
            "clip_id": self.clip_id,
            "stages": [
                {
                    "stage": s.stage.value,
                    "started_ns": s.started_ns,
                    "wall_time_s": s.wall_time_s,
                    "prompt_chars": len(s.prompt),
                    "output_chars": len(s.raw_output),
                }
                for s in self.stages
            ],
            "wall_time_s": sum(s.wall_time_s for s in self.stages),
        }
