"""Staged behavior -> cognition -> emotion inference over classroom clips, with
mock and HTTP model backends, scoring, and a synthetic data generator."""

__version__ = "0.1.0"

from .domain import (  # noqa: E402
    BehaviorLabel,
    ClipSample,
    CognitionLabel,
    EmotionLabel,
    MentalStateTriplet,
    Mode,
    RunConfig,
    Stage,
    parse_label,
    parse_manifest,
    render_label,
)

__all__ = [
    "BehaviorLabel",
    "ClipSample",
    "CognitionLabel",
    "EmotionLabel",
    "MentalStateTriplet",
    "Mode",
    "RunConfig",
    "Stage",
    "parse_label",
    "parse_manifest",
    "render_label",
]
