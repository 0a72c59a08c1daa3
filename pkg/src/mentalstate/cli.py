"""Command-line entry point: eval, ablate, synth, report, extract-frames.

Run settings resolve as flag > ``--config`` JSON file > built-in default, and
the resolved settings are written to ``run_config.json`` in every output
directory.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
import time
from pathlib import Path
from typing import Sequence

from . import __version__
from .backends import (
    API_KEY_ENV,
    CachingBackend,
    EchoGoldBackend,
    HttpBackend,
    ProbabilisticBackend,
    ScriptedBackend,
)
from .domain import (
    ClipSample,
    ManifestError,
    Mode,
    PredictedTriplet,
    RunConfig,
    StageTranscript,
    load_manifest,
)
from .media import extraction_plan
from .metrics import ALL, PRESENT, EvalReport, build_report, pct
from .pipeline import read_results, run_dataset, write_results
from .prompts import TemplateError, TemplateSet, default_templates
from .synth import GeneratorSpec, TranscriptStyle, diagnostics, load_model, write_dataset

logger = logging.getLogger("mentalstate")

DEFAULTS = RunConfig()

MODE_CHOICES = {
    "full": Mode.FULL_MAS,
    "single": Mode.SINGLE_PASS,
    "no-srl": Mode.NO_SRL,
    "text-only": Mode.TEXT_ONLY,
}

# CLI flag dest -> RunConfig field
CONFIG_FLAGS = {
    "mode": "mode",
    "frames_per_clip": "frames_per_clip",
    "frame_side": "frame_side_px",
    "temperature": "temperature",
    "max_new_tokens": "max_new_tokens",
    "concurrency": "max_concurrent_samples",
    "retry": "retry_on_unparseable",
    "seed": "seed",
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # noqa: D401 - argparse hook
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


class _HelpFormatter(argparse.ArgumentDefaultsHelpFormatter):
    def _get_help_string(self, action):
        if "(default:" in (action.help or ""):
            return action.help
        return super()._get_help_string(action)


class _JsonFormatter(logging.Formatter):
    def format(self, record: logging.LogRecord) -> str:
        obj = {
            "ts": round(record.created, 3),
            "level": record.levelname.lower(),
            "logger": record.name,
            "msg": record.getMessage(),
        }
        if record.exc_info:
            obj["exc"] = self.formatException(record.exc_info)
        return json.dumps(obj, ensure_ascii=False)


def _setup_logging(pretty: bool, verbose: bool) -> None:
    handler = logging.StreamHandler(sys.stderr)
    if pretty:
        handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)-7s %(name)s: %(message)s"))
    else:
        handler.setFormatter(_JsonFormatter())
    root = logging.getLogger()
    root.handlers[:] = [handler]
    root.setLevel(logging.DEBUG if verbose else logging.INFO)
    logging.getLogger("httpx").setLevel(logging.WARNING)


def _add_run_flags(p: argparse.ArgumentParser, with_mode: bool = True) -> None:
    if with_mode:
        p.add_argument("--mode", choices=sorted(MODE_CHOICES),
                       help="run mode (default: full)")
    p.add_argument("--frames-per-clip", type=int,
                   help=f"frames sent per clip (default: {DEFAULTS.frames_per_clip})")
    p.add_argument("--frame-side", type=int,
                   help=f"expected frame side in pixels (default: {DEFAULTS.frame_side_px})")
    p.add_argument("--temperature", type=float,
                   help=f"sampling temperature (default: {DEFAULTS.temperature})")
    p.add_argument("--max-new-tokens", type=int,
                   help=f"generation limit per call (default: {DEFAULTS.max_new_tokens})")
    p.add_argument("--concurrency", type=int,
                   help=f"samples in flight (default: {DEFAULTS.max_concurrent_samples})")
    p.add_argument("--seed", type=int, help=f"random seed (default: {DEFAULTS.seed})")
    p.add_argument("--retry", dest="retry", action=argparse.BooleanOptionalAction, default=None,
                   help="retry once with a clarification when a reply is unparseable "
                        f"(default: {DEFAULTS.retry_on_unparseable})")
    p.add_argument("--config", help="JSON file with RunConfig field overrides (default: none)")


def _add_backend_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--manifest", required=True, help="JSONL manifest (default: required)")
    p.add_argument("--backend", choices=["http", "echo-gold", "scripted", "probabilistic"],
                   default="http", help="model backend")
    p.add_argument("--endpoint", help="chat-completions URL for --backend http (default: none)")
    p.add_argument("--model-name", default="default", help="model name sent to the endpoint")
    p.add_argument("--send-paths", action="store_true",
                   help="send file:// frame URLs instead of inline base64 images")
    p.add_argument("--timeout", type=float, default=300.0, help="deadline per backend call in seconds")
    p.add_argument("--script", help="JSON reply table for --backend scripted (default: none)")
    p.add_argument("--mock-model", default="paper",
                   help="label tables for --backend probabilistic: 'paper' or a model JSON path")
    p.add_argument("--templates", help="directory overriding the bundled prompt templates (default: bundled)")
    p.add_argument("--average", choices=[PRESENT, ALL], default=PRESENT,
                   help="classes to macro-average over")
    p.add_argument("--trace", action="store_true", help="log request/response bodies, frames elided")
    p.add_argument("--out", default="out", help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mentalstate", formatter_class=_HelpFormatter,
                     description="Staged behavior/cognition/emotion inference and evaluation.")
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("--pretty", action="store_true", help="human-readable logs instead of JSON lines")
    parser.add_argument("--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")

    p = sub.add_parser("eval", help="run the pipeline over a manifest and score it",
                       formatter_class=_HelpFormatter)
    _add_backend_flags(p)
    _add_run_flags(p)

    p = sub.add_parser("ablate", help="run all four modes and tabulate the drop vs the full pipeline",
                       formatter_class=_HelpFormatter)
    _add_backend_flags(p)
    _add_run_flags(p, with_mode=False)
    p.add_argument("--reuse-cache", action="store_true",
                   help="reuse replies across modes when requests are identical")

    p = sub.add_parser("synth", help="generate a synthetic manifest with placeholder frames",
                       formatter_class=_HelpFormatter)
    p.add_argument("--n", type=int, default=100, help="number of clips")
    p.add_argument("--seed", type=int, default=0, help="random seed")
    p.add_argument("--model", default="paper", help="'paper' or a path to a model JSON file")
    p.add_argument("--style", choices=[s.value for s in TranscriptStyle],
                   default=TranscriptStyle.KEYWORD_BEARING.value, help="transcript style")
    p.add_argument("--frames-per-clip", type=int, default=DEFAULTS.frames_per_clip,
                   help="placeholder frames per clip")
    p.add_argument("--frame-side", type=int, default=DEFAULTS.frame_side_px, help="frame side in pixels")
    p.add_argument("--no-frames", action="store_true", help="skip writing placeholder frames")
    p.add_argument("--workers", type=int, default=1, help="generator threads")
    p.add_argument("--out", required=True, help="output directory (default: required)")

    p = sub.add_parser("report", help="score an existing results.jsonl against a manifest",
                       formatter_class=_HelpFormatter)
    p.add_argument("--results", required=True, help="results.jsonl from eval (default: required)")
    p.add_argument("--manifest", required=True, help="JSONL manifest with gold labels (default: required)")
    p.add_argument("--average", choices=[PRESENT, ALL], default=PRESENT,
                   help="classes to macro-average over")
    p.add_argument("--out", default="out", help="output directory")

    p = sub.add_parser("extract-frames", help="write a shell plan that decodes each clip's video to frames",
                       formatter_class=_HelpFormatter)
    p.add_argument("--manifest", required=True, help="JSONL manifest with 'video' fields (default: required)")
    p.add_argument("--frame-side", type=int, default=DEFAULTS.frame_side_px, help="output frame side in pixels")
    p.add_argument("--decoder", default="ffmpeg", help="decoder executable")
    p.add_argument("--out", required=True, help="directory for extract_frames.sh (default: required)")
    return parser


def resolve_config(args: argparse.Namespace, mode: Mode | None = None) -> RunConfig:
    values = DEFAULTS.to_json()
    if getattr(args, "config", None):
        try:
            overlay = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except (OSError, ValueError) as exc:
            raise UsageError(f"cannot read config file {args.config}: {exc}") from None
        if not isinstance(overlay, dict):
            raise UsageError("config file must hold a JSON object")
        values.update(overlay)
    for dest, field_name in CONFIG_FLAGS.items():
        value = getattr(args, dest, None)
        if value is None:
            continue
        values[field_name] = MODE_CHOICES[value].value if dest == "mode" else value
    if mode is not None:
        values["mode"] = mode.value
    try:
        return RunConfig.from_json(values)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid run configuration: {exc}") from None


def _load_samples(path: str) -> list[ClipSample]:
    try:
        samples = load_manifest(path)
    except OSError as exc:
        raise UsageError(f"cannot read manifest: {exc}") from None
    except ManifestError as exc:
        raise UsageError(str(exc)) from None
    if not samples:
        raise UsageError(f"manifest {path} has no records")
    return samples


def make_backend(args: argparse.Namespace, samples: Sequence[ClipSample], config: RunConfig):
    kind = args.backend
    if kind == "http":
        if not args.endpoint:
            raise UsageError("--backend http needs --endpoint")
        return HttpBackend(
            endpoint=args.endpoint,
            model=args.model_name,
            inline_images=not args.send_paths,
            deadline_s=args.timeout,
            max_in_flight=config.max_concurrent_samples,
            trace=args.trace,
        )
    if kind == "echo-gold":
        try:
            return EchoGoldBackend(samples)
        except ValueError as exc:
            raise UsageError(str(exc)) from None
    if kind == "scripted":
        if not args.script:
            raise UsageError("--backend scripted needs --script")
        try:
            return ScriptedBackend.from_json(json.loads(Path(args.script).read_text(encoding="utf-8")))
        except (OSError, ValueError) as exc:
            raise UsageError(f"cannot load script {args.script}: {exc}") from None
    if kind == "probabilistic":
        try:
            model = load_model(args.mock_model)
        except (OSError, ValueError, KeyError) as exc:
            raise UsageError(f"cannot load mock model {args.mock_model}: {exc}") from None
        return ProbabilisticBackend(model, seed=config.seed)
    raise UsageError(f"unknown backend {kind}")


def _templates(args: argparse.Namespace) -> TemplateSet:
    if not args.templates:
        return default_templates()
    try:
        return TemplateSet(args.templates)
    except TemplateError as exc:
        raise UsageError(str(exc)) from None


def _write_json(path: Path, obj: object) -> None:
    path.write_text(json.dumps(obj, indent=2, ensure_ascii=False) + "\n", encoding="utf-8")


def _run_record(args: argparse.Namespace, config: RunConfig) -> dict:
    record = {
        "command": args.command,
        "run_config": config.to_json(),
        "manifest": str(Path(args.manifest).resolve()),
        "backend": args.backend,
        "templates": str(Path(args.templates).resolve()) if args.templates else None,
        "average": args.average,
    }
    if args.backend == "http":
        record.update(endpoint=args.endpoint, model_name=args.model_name,
                      send_paths=args.send_paths, timeout=args.timeout,
                      api_key_env=API_KEY_ENV)
    elif args.backend == "scripted":
        record["script"] = str(Path(args.script).resolve())
    elif args.backend == "probabilistic":
        record["mock_model"] = (args.mock_model if args.mock_model == "paper"
                                else str(Path(args.mock_model).resolve()))
    return record


def write_report(out: Path, report: EvalReport) -> None:
    _write_json(out / "report.json", report.to_json())
    (out / "report.md").write_text(report.to_markdown(), encoding="utf-8")
    for stage, dim in report.dimensions.items():
        (out / f"confusion_{stage.value.lower()}.csv").write_text(dim.confusion.to_csv(), encoding="utf-8")


def _evaluate(args, config, samples, backend, templates, out: Path):
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "run_config.json", _run_record(args, config))
    t0 = time.perf_counter()
    transcripts, summary = run_dataset(samples, config, backend, templates)
    logger.info("mode %s: %d completed, %d failed, %d backend calls in %.2fs",
                config.mode.value, summary.completed, summary.failed,
                summary.backend_calls, time.perf_counter() - t0)
    write_results(out, transcripts, summary)
    report = None
    if summary.completed and all(s.gold is not None for s in samples):
        report = build_report(samples, transcripts, args.average)
        write_report(out, report)
    elif summary.completed:
        logger.warning("manifest has clips without gold labels; skipping the report")
    return summary, report


def cmd_eval(args: argparse.Namespace) -> int:
    config = resolve_config(args)
    samples = _load_samples(args.manifest)
    backend = make_backend(args, samples, config)
    summary, report = _evaluate(args, config, samples, backend, _templates(args), Path(args.out))
    if report is not None:
        sys.stdout.write(report.to_markdown())
    return 0 if summary.completed else 2


def cmd_ablate(args: argparse.Namespace) -> int:
    base = resolve_config(args)
    samples = _load_samples(args.manifest)
    backend = make_backend(args, samples, base)
    if args.reuse_cache:
        backend = CachingBackend(backend)
    templates = _templates(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "run_config.json", {**_run_record(args, base), "reuse_cache": args.reuse_cache})
    rows = []
    any_completed = False
    for mode in Mode:
        config = dataclasses.replace(base, mode=mode)
        summary, report = _evaluate(args, config, samples, backend, templates, out / mode.value)
        any_completed = any_completed or summary.completed > 0
        row = {"variant": mode.value, "completed": summary.completed,
               "backend_calls": summary.backend_calls}
        if report is not None:
            row.update({s.value: pct(d.macro_f1) for s, d in report.dimensions.items()})
            row["avg"] = report.avg_macro_f1
        rows.append(row)
    full = rows[0].get("avg")
    for row in rows:
        avg = row.get("avg")
        row["delta"] = pct(avg - full) if avg is not None and full is not None else None
        if avg is not None:
            row["avg"] = pct(avg)
    _write_json(out / "ablation.json", rows)
    table = _ablation_markdown(rows)
    (out / "ablation.md").write_text(table, encoding="utf-8")
    sys.stdout.write(table)
    return 0 if any_completed else 2


def _ablation_markdown(rows: list[dict]) -> str:
    def cell(x) -> str:
        return "-" if x is None else f"{x:.2f}"

    lines = ["| Variant | Behavior | Cognition | Emotion | Avg | Delta | Calls |",
             "|---|---:|---:|---:|---:|---:|---:|"]
    for r in rows:
        lines.append(f"| {r['variant']} | {cell(r.get('Behavior'))} | {cell(r.get('Cognition'))} | "
                     f"{cell(r.get('Emotion'))} | {cell(r.get('avg'))} | {cell(r.get('delta'))} | "
                     f"{r['backend_calls']} |")
    return "\n".join(lines) + "\n"


def cmd_synth(args: argparse.Namespace) -> int:
    try:
        model = load_model(args.model)
        spec = GeneratorSpec(args.n, model, args.seed, TranscriptStyle(args.style),
                             args.frames_per_clip, args.frame_side)
    except (OSError, ValueError, KeyError) as exc:
        raise UsageError(str(exc)) from None
    out = Path(args.out)
    try:
        samples = write_dataset(out, spec, workers=args.workers, frames=not args.no_frames)
    except OSError as exc:
        raise UsageError(str(exc)) from None
    _write_json(out / "run_config.json", {
        "command": "synth", "n": args.n, "seed": args.seed, "model": args.model,
        "style": args.style, "frames_per_clip": args.frames_per_clip,
        "frame_side": args.frame_side, "frames": not args.no_frames,
    })
    logger.info("wrote %d clips to %s", len(samples), out)
    for name, d in diagnostics(model).items():
        logger.info("%s marginal implied %.3f, reference %.3f", name, d["implied"], d["target"])
    return 0


def _transcript_from_json(obj: dict) -> StageTranscript:
    return StageTranscript(
        clip_id=obj["clip_id"],
        mode=Mode(obj["mode"]),
        predicted=PredictedTriplet.from_json(obj["predicted"]),
        status=obj["status"],
        error=obj.get("error"),
    )


def cmd_report(args: argparse.Namespace) -> int:
    samples = _load_samples(args.manifest)
    try:
        transcripts = [_transcript_from_json(o) for o in read_results(args.results)]
        report = build_report(samples, transcripts, args.average)
    except (OSError, KeyError, ValueError) as exc:
        raise UsageError(f"cannot score {args.results}: {exc}") from None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "run_config.json", {
        "command": "report", "results": str(Path(args.results).resolve()),
        "manifest": str(Path(args.manifest).resolve()), "average": args.average,
    })
    write_report(out, report)
    sys.stdout.write(report.to_markdown())
    return 0


def cmd_extract_frames(args: argparse.Namespace) -> int:
    samples = _load_samples(args.manifest)
    try:
        plan = extraction_plan(samples, args.frame_side, args.decoder)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "extract_frames.sh").write_text(plan, encoding="utf-8")
    _write_json(out / "run_config.json", {
        "command": "extract-frames", "manifest": str(Path(args.manifest).resolve()),
        "frame_side": args.frame_side, "decoder": args.decoder,
    })
    logger.info("wrote %d extraction commands", len(samples))
    return 0


COMMANDS = {
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "synth": cmd_synth,
    "report": cmd_report,
    "extract-frames": cmd_extract_frames,
}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 1
    _setup_logging(args.pretty, args.verbose)
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"mentalstate {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
