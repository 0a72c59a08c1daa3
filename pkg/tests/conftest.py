from __future__ import annotations

from pathlib import Path

import pytest
from PIL import Image

from mentalstate.domain import (
    BehaviorLabel,
    ClipSample,
    CognitionLabel,
    EmotionLabel,
    MentalStateTriplet,
)
from mentalstate.synth import GeneratorSpec, paper_model, write_dataset

ROOT = Path(__file__).resolve().parent.parent
CORPUS = ROOT / "testdata" / "extraction_corpus.jsonl"


def write_frames(directory: Path, n: int, size=(448, 448)) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    for i in range(n):
        Image.new("RGB", size, (10, 20, 30)).save(directory / f"frame_{i}.png")


@pytest.fixture
def gold() -> MentalStateTriplet:
    return MentalStateTriplet(BehaviorLabel.MONITORING, CognitionLabel.NEGATIVE, EmotionLabel.NEUTRAL)


@pytest.fixture
def sample(tmp_path: Path, gold: MentalStateTriplet) -> ClipSample:
    frames = tmp_path / "frames" / "s1"
    write_frames(frames, 16)
    return ClipSample(
        clip_id="s1",
        frames_dir=str(frames),
        transcript="Wait, did we {behavior} already write the pH value? Ääh.",
        duration_s=6.1,
        group_size=3,
        gold=gold,
    )


@pytest.fixture(scope="session")
def synth_dir(tmp_path_factory) -> Path:
    out = tmp_path_factory.mktemp("synth")
    write_dataset(out, GeneratorSpec(40, paper_model(), seed=11))
    return out


ACCEPTANCE_KEY = pytest.StashKey[dict]()


def pytest_configure(config) -> None:
    config.stash[ACCEPTANCE_KEY] = {}


@pytest.fixture(scope="session")
def acceptance_log(request) -> dict:
    return request.config.stash[ACCEPTANCE_KEY]


def pytest_terminal_summary(terminalreporter, exitstatus, config) -> None:
    results = config.stash.get(ACCEPTANCE_KEY, {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(results):
        ok, line = results[number]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {number:>2}. {line}")
