"""Uniform frame selection and validation of pre-extracted frame files.

Decoding happens outside the engine: :func:`extraction_plan` writes one
``ffmpeg`` command per clip that dumps every frame as ``frame_<index>.png``
at the target size. The engine then picks ``k`` of them and checks them.
"""

from __future__ import annotations

import logging
import re
import shlex
from dataclasses import dataclass
from pathlib import Path

from PIL import Image

from .domain import ClipSample

logger = logging.getLogger(__name__)

FRAME_NAME = re.compile(r"^frame_(\d+)\.([A-Za-z0-9]+)$")


class FrameError(Exception):
    """A selected frame is missing or the frame directory is unusable."""


@dataclass(frozen=True)
class FramePlan:
    clip_id: str
    selected_indices: tuple[int, ...]
    target_side_px: int


def select_frame_indices(n_total: int, k: int) -> list[int]:
    """Pick ``k`` frame indices spread evenly over ``n_total`` frames.

    Both endpoints are included when ``k >= 2``. A single frame is taken from
    the middle. Clips shorter than ``k`` use every frame and then repeat the
    last one so every request has the same number of images.
    """
    if n_total < 1 or k < 1:
        raise ValueError(f"need n_total >= 1 and k >= 1, got ({n_total}, {k})")
    if n_total < k:
        return list(range(n_total)) + [n_total - 1] * (k - n_total)
    if k == 1:
        return [(n_total - 1) // 2]
    return [i * (n_total - 1) // (k - 1) for i in range(k)]


def list_frames(frames_dir: str | Path) -> dict[int, Path]:
    directory = Path(frames_dir)
    if not directory.is_dir():
        raise FrameError(f"frames directory not found: {directory}")
    found: dict[int, Path] = {}
    for entry in directory.iterdir():
        m = FRAME_NAME.match(entry.name)
        if m:
            found.setdefault(int(m.group(1)), entry)
    return found


def plan_frames(sample: ClipSample, k: int, side_px: int) -> FramePlan:
    frames = list_frames(sample.frames_dir)
    if not frames:
        raise FrameError(f"clip {sample.clip_id}: no frame_<index> files in {sample.frames_dir}")
    n_total = max(frames) + 1
    return FramePlan(sample.clip_id, tuple(select_frame_indices(n_total, k)), side_px)


def validate_frames(sample: ClipSample, plan: FramePlan) -> tuple[list[str], list[str]]:
    """Resolve the planned indices to files and check their pixel size.

    Returns ``(frame_refs, warnings)``. Wrong dimensions only warn; a missing
    file raises :class:`FrameError`.
    """
    frames = list_frames(sample.frames_dir)
    refs: list[str] = []
    warnings: list[str] = []
    checked: set[int] = set()
    for index in plan.selected_indices:
        path = frames.get(index)
        if path is None:
            raise FrameError(f"clip {sample.clip_id}: frame index {index} missing in {sample.frames_dir}")
        refs.append(str(path))
        if index in checked:
            continue
        checked.add(index)
        try:
            with Image.open(path) as img:
                size = img.size
        except OSError as exc:
            raise FrameError(f"clip {sample.clip_id}: frame index {index} unreadable: {exc}") from None
        side = plan.target_side_px
        if size != (side, side):
            msg = (f"clip {sample.clip_id}: frame index {index} is {size[0]}x{size[1]}, "
                   f"expected {side}x{side}")
            logger.warning(msg)
            warnings.append(msg)
    return refs, warnings


def sample_frames(sample: ClipSample, k: int, side_px: int) -> tuple[list[str], list[str]]:
    return validate_frames(sample, plan_frames(sample, k, side_px))


def extraction_command(sample: ClipSample, side_px: int = 448, decoder: str = "ffmpeg") -> str:
    if not sample.video:
        raise ValueError(f"clip {sample.clip_id}: manifest record has no 'video' field")
    out_dir = shlex.quote(sample.frames_dir)
    pattern = shlex.quote(str(Path(sample.frames_dir) / "frame_%d.png"))
    return (
        f"mkdir -p {out_dir} && {decoder} -nostdin -loglevel error -y "
        f"-i {shlex.quote(sample.video)} -vf scale={side_px}:{side_px} "
        f"-start_number 0 {pattern}"
    )


def extraction_plan(samples: list[ClipSample], side_px: int = 448, decoder: str = "ffmpeg") -> str:
    return "".join(extraction_command(s, side_px, decoder) + "\n" for s in samples)
