"""Staged Behavior -> Cognition -> Emotion inference over a dataset.

Inside one sample the stages run strictly in order, each prompt carrying the
labels extracted upstream. Samples run concurrently up to
``RunConfig.max_concurrent_samples``; output order always follows input order.
"""

from __future__ import annotations

import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

from . import prompts
from .backends import Backend, BackendError, ModelRequest, conditioning_for
from .categorical import CategoricalModel, marginalize  # noqa: F401  (re-exported)
from .domain import (
    ClipSample,
    Mode,
    PredictedTriplet,
    RunConfig,
    Stage,
    StageRecord,
    StageTranscript,
)
from .extract import Extraction, extract, extract_combined
from .media import FrameError, sample_frames
from .prompts import Flavor, TemplateSet

logger = logging.getLogger(__name__)

COMPLETED = "Completed"
FAILED = "Failed"


class _Clock:
    """Strictly increasing nanosecond stamps, even when calls land in one tick."""

    def __init__(self) -> None:
        self._last = 0

    def now(self) -> int:
        self._last = max(time.monotonic_ns(), self._last + 1)
        return self._last


def _call(backend: Backend, config: RunConfig, sample: ClipSample, stage: Stage,
          prompt: str, frames: tuple[str, ...], conditioning: tuple[str, ...] = ()):
    request = ModelRequest(
        prompt=prompt,
        frame_refs=frames,
        temperature=config.temperature,
        max_new_tokens=config.max_new_tokens,
        clip_id=sample.clip_id,
        stage=stage,
        conditioning=conditioning,
    )
    return backend.complete(request).text


def _run_stage(backend, config, sample, stage, prompt, frames, conditioning, clock) -> StageRecord:
    started = clock.now()
    t0 = time.perf_counter()
    text = _call(backend, config, sample, stage, prompt, frames, conditioning)
    calls = 1
    if stage is Stage.COMBINED:
        found: tuple[Extraction, ...] = extract_combined(text)
    else:
        found = (extract(stage, text),)
    if config.retry_on_unparseable and any(x.label is None for x in found):
        retry_prompt = prompt + prompts.clarification(stage)
        text = _call(backend, config, sample, stage, retry_prompt, frames, conditioning)
        calls += 1
        if stage is Stage.COMBINED:
            # keep whatever the first reply already settled
            second = extract_combined(text)
            found = tuple(a if a.label is not None else b for a, b in zip(found, second))
        else:
            found = (extract(stage, text),)
    methods = sorted({x.method for x in found})
    return StageRecord(
        stage=stage,
        prompt=prompt,
        frame_refs=frames,
        raw_output=text,
        labels=tuple(x.label for x in found),
        method="+".join(methods),
        calls=calls,
        started_ns=started,
        wall_time_s=time.perf_counter() - t0,
    )


def run_sample(sample: ClipSample, config: RunConfig, backend: Backend,
               templates: TemplateSet | None = None) -> StageTranscript:
    """Run one clip through the configured mode.

    Backend or frame failures mark the transcript Failed instead of raising.
    """
    templates = templates or prompts.default_templates()
    flavor = Flavor.GENERIC if config.mode is Mode.NO_SRL else Flavor.SRL
    clock = _Clock()
    stages: list[StageRecord] = []
    warnings: tuple[str, ...] = ()
    try:
        if config.mode is Mode.TEXT_ONLY:
            frames: tuple[str, ...] = ()
        else:
            refs, found_warnings = sample_frames(sample, config.frames_per_clip, config.frame_side_px)
            frames, warnings = tuple(refs), tuple(found_warnings)

        if config.mode is Mode.SINGLE_PASS:
            prompt = prompts.build_combined_prompt(sample, flavor, templates)
            record = _run_stage(backend, config, sample, Stage.COMBINED, prompt, frames, (), clock)
            stages.append(record)
            predicted = PredictedTriplet(*record.labels)
        else:
            prompt = prompts.build_behavior_prompt(sample, flavor, templates)
            rec_b = _run_stage(backend, config, sample, Stage.BEHAVIOR, prompt, frames, (), clock)
            stages.append(rec_b)
            behavior = rec_b.labels[0]

            prompt = prompts.build_cognition_prompt(sample, behavior, flavor, templates)
            rec_c = _run_stage(backend, config, sample, Stage.COGNITION, prompt, frames,
                               conditioning_for(behavior), clock)
            stages.append(rec_c)
            cognition = rec_c.labels[0]

            prompt = prompts.build_emotion_prompt(sample, behavior, cognition, flavor, templates)
            rec_e = _run_stage(backend, config, sample, Stage.EMOTION, prompt, frames,
                               conditioning_for(behavior, cognition), clock)
            stages.append(rec_e)
            predicted = PredictedTriplet(behavior, cognition, rec_e.labels[0])
    except (BackendError, FrameError) as exc:
        logger.warning("sample %s failed: %s", sample.clip_id, exc)
        return StageTranscript(
            clip_id=sample.clip_id,
            mode=config.mode,
            stages=tuple(stages),
            status=FAILED,
            error=f"{type(exc).__name__}: {exc}",
            warnings=warnings,
        )
    return StageTranscript(sample.clip_id, config.mode, tuple(stages), predicted, COMPLETED,
                           None, warnings)


@dataclass(frozen=True)
class RunSummary:
    mode: str
    n_samples: int
    completed: int
    failed: int
    backend_calls: int
    failed_clip_ids: tuple[str, ...]

    def to_json(self) -> dict:
        return {
            "mode": self.mode,
            "n_samples": self.n_samples,
            "completed": self.completed,
            "failed": self.failed,
            "backend_calls": self.backend_calls,
            "calls_per_sample": self.backend_calls / self.n_samples if self.n_samples else 0.0,
            "failed_clip_ids": list(self.failed_clip_ids),
        }


def summarize(transcripts: Sequence[StageTranscript], mode: Mode) -> RunSummary:
    failed = [t.clip_id for t in transcripts if t.failed]
    return RunSummary(
        mode=mode.value,
        n_samples=len(transcripts),
        completed=len(transcripts) - len(failed),
        failed=len(failed),
        backend_calls=sum(t.backend_calls for t in transcripts),
        failed_clip_ids=tuple(failed),
    )


def run_dataset(samples: Sequence[ClipSample], config: RunConfig, backend: Backend,
                templates: TemplateSet | None = None) -> tuple[list[StageTranscript], RunSummary]:
    templates = templates or prompts.default_templates()
    workers = config.max_concurrent_samples
    if workers == 1:
        transcripts = [run_sample(s, config, backend, templates) for s in samples]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            transcripts = list(pool.map(lambda s: run_sample(s, config, backend, templates), samples))
    return transcripts, summarize(transcripts, config.mode)


def write_results(out_dir: str | Path, transcripts: Sequence[StageTranscript],
                  summary: RunSummary) -> None:
    """results.jsonl and summary.json are deterministic; timings.jsonl is not."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "results.jsonl", "w", encoding="utf-8") as fh:
        for t in transcripts:
            fh.write(json.dumps(t.to_json(), ensure_ascii=False) + "\n")
    with open(out / "timings.jsonl", "w", encoding="utf-8") as fh:
        for t in transcripts:
            fh.write(json.dumps(t.timing_json()) + "\n")
    (out / "summary.json").write_text(json.dumps(summary.to_json(), indent=2) + "\n", encoding="utf-8")


def read_results(path: str | Path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]
