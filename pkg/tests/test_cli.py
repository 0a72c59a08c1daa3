from __future__ import annotations

import json
import subprocess
import sys

import pytest

from mentalstate.cli import build_parser, main, resolve_config
from mentalstate.domain import ClipSample, Mode, dump_manifest


def run(argv, capsys=None):
    try:
        code = main(argv)
    except SystemExit as exc:
        code = exc.code
    return code


def test_eval_echo_gold(synth_dir, tmp_path, capsys):
    out = tmp_path / "run"
    code = run(["eval", "--manifest", str(synth_dir / "manifest.jsonl"), "--backend", "echo-gold",
                "--out", str(out)])
    assert code == 0
    report = json.loads((out / "report.json").read_text())
    for dim in ("Behavior", "Cognition", "Emotion"):
        assert report["dimensions"][dim]["macro_f1"] == 100.0
        assert report["dimensions"][dim]["accuracy"] == 100.0
    summary = json.loads((out / "summary.json").read_text())
    assert summary["backend_calls"] == 3 * summary["n_samples"]
    config = json.loads((out / "run_config.json").read_text())
    assert config["run_config"]["frames_per_clip"] == 8
    assert (out / "confusion_cognition.csv").exists()
    assert "| Avg | 100.00 |" in capsys.readouterr().out


def test_eval_single_pass_call_count(synth_dir, tmp_path):
    out = tmp_path / "run"
    assert run(["eval", "--manifest", str(synth_dir / "manifest.jsonl"), "--backend", "echo-gold",
                "--mode", "single", "--out", str(out)]) == 0
    summary = json.loads((out / "summary.json").read_text())
    assert summary["backend_calls"] == summary["n_samples"]


def test_missing_manifest_flag_exits_1(capsys):
    assert run(["eval", "--backend", "echo-gold"]) == 1
    err = capsys.readouterr().err
    assert "usage:" in err and "--manifest" in err


def test_unreadable_manifest_exits_1(tmp_path, capsys):
    assert run(["eval", "--manifest", str(tmp_path / "nope.jsonl"), "--out", str(tmp_path)]) == 1
    assert "cannot read manifest" in capsys.readouterr().err


def test_http_without_endpoint_exits_1(synth_dir, tmp_path):
    assert run(["eval", "--manifest", str(synth_dir / "manifest.jsonl"), "--backend", "http",
                "--out", str(tmp_path)]) == 1


def test_all_failed_exits_2(tmp_path, gold):
    manifest = tmp_path / "m.jsonl"
    manifest.write_text(dump_manifest([ClipSample("a", "missing", "t", 1.0, gold=gold)]))
    out = tmp_path / "run"
    assert run(["eval", "--manifest", str(manifest), "--backend", "echo-gold", "--out", str(out)]) == 2
    assert json.loads((out / "summary.json").read_text())["failed_clip_ids"] == ["a"]
    assert not (out / "report.json").exists()


def test_config_precedence(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"frames_per_clip": 4, "seed": 9, "temperature": 0.5}))
    args = build_parser().parse_args(["eval", "--manifest", "m", "--config", str(cfg), "--seed", "3"])
    config = resolve_config(args)
    assert config.seed == 3
    assert config.frames_per_clip == 4
    assert config.temperature == 0.5
    assert config.max_new_tokens == 1024
    assert resolve_config(build_parser().parse_args(["eval", "--manifest", "m"])).frames_per_clip == 8


def test_bad_config_field_exits_1(synth_dir, tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"frames": 4}))
    assert run(["eval", "--manifest", str(synth_dir / "manifest.jsonl"), "--backend", "echo-gold",
                "--config", str(cfg), "--out", str(tmp_path / "o")]) == 1
    assert "invalid run configuration" in capsys.readouterr().err


def test_help_lists_protocol_defaults():
    text = subprocess.run([sys.executable, "-m", "mentalstate", "eval", "--help"],
                          capture_output=True, text=True, check=True).stdout
    for flag, default in (("--frames-per-clip", "8"), ("--frame-side", "448"),
                          ("--temperature", "0.0"), ("--max-new-tokens", "1024"),
                          ("--concurrency", "4")):
        segment = text.split(f"\n  {flag}", 1)[1].split("\n  -", 1)[0]
        assert f"default: {default}" in " ".join(segment.split()), flag
    for action in build_parser()._subparsers._group_actions[0].choices["eval"]._actions:
        if action.option_strings and action.dest != "help":
            assert action.option_strings[-1] in text


def test_ablate_probabilistic(synth_dir, tmp_path, capsys):
    out = tmp_path / "abl"
    assert run(["ablate", "--manifest", str(synth_dir / "manifest.jsonl"), "--backend", "probabilistic",
                "--seed", "4", "--out", str(out)]) == 0
    rows = json.loads((out / "ablation.json").read_text())
    assert [r["variant"] for r in rows] == [m.value for m in Mode]
    assert rows[0]["delta"] == 0.0
    n = rows[0]["completed"]
    assert [r["backend_calls"] for r in rows] == [3 * n, n, 3 * n, 3 * n]
    for r in rows:
        assert r["delta"] == pytest.approx(r["avg"] - rows[0]["avg"], abs=0.011)
        assert (out / r["variant"] / "run_config.json").exists()
    text_only = [json.loads(line) for line in (out / "TextOnly" / "results.jsonl").read_text().splitlines()]
    assert all(not stage["frame_refs"] for row in text_only for stage in row["stages"])
    assert "| Variant |" in capsys.readouterr().out


def test_ablate_reuse_cache(synth_dir, tmp_path):
    out = tmp_path / "abl"
    assert run(["ablate", "--manifest", str(synth_dir / "manifest.jsonl"), "--backend", "echo-gold",
                "--reuse-cache", "--out", str(out)]) == 0
    assert json.loads((out / "run_config.json").read_text())["reuse_cache"] is True


def test_report_reproduces_eval(synth_dir, tmp_path):
    run_dir = tmp_path / "run"
    assert run(["eval", "--manifest", str(synth_dir / "manifest.jsonl"), "--backend", "probabilistic",
                "--out", str(run_dir)]) == 0
    rep_dir = tmp_path / "rep"
    assert run(["report", "--results", str(run_dir / "results.jsonl"),
                "--manifest", str(synth_dir / "manifest.jsonl"), "--out", str(rep_dir)]) == 0
    assert (rep_dir / "report.json").read_text() == (run_dir / "report.json").read_text()
    assert (rep_dir / "run_config.json").exists()


def test_synth_command(tmp_path):
    out = tmp_path / "data"
    assert run(["synth", "--n", "7", "--seed", "2", "--out", str(out)]) == 0
    assert len((out / "manifest.jsonl").read_text().splitlines()) == 7
    assert json.loads((out / "model.json").read_text())["assumed"]
    assert (out / "frames" / "synth-000006" / "frame_7.png").exists()
    assert json.loads((out / "run_config.json").read_text())["seed"] == 2


def test_synth_bad_model_exits_1(tmp_path):
    assert run(["synth", "--n", "2", "--model", str(tmp_path / "none.json"), "--out", str(tmp_path)]) == 1


def test_extract_frames_plan(tmp_path, gold):
    manifest = tmp_path / "m.jsonl"
    manifest.write_text(dump_manifest([ClipSample("a", "frames/a", "t", 1.0, gold=gold, video="a.mp4")]))
    out = tmp_path / "plan"
    assert run(["extract-frames", "--manifest", str(manifest), "--out", str(out)]) == 0
    script = (out / "extract_frames.sh").read_text()
    assert "scale=448:448" in script and str(tmp_path / "a.mp4") in script
    assert (out / "run_config.json").exists()


def test_extract_frames_without_video_exits_1(synth_dir, tmp_path):
    assert run(["extract-frames", "--manifest", str(synth_dir / "manifest.jsonl"), "--out", str(tmp_path)]) == 1


def test_outputs_stay_inside_out(synth_dir, tmp_path):
    before = set(synth_dir.rglob("*"))
    out = tmp_path / "run"
    run(["eval", "--manifest", str(synth_dir / "manifest.jsonl"), "--backend", "echo-gold", "--out", str(out)])
    assert set(synth_dir.rglob("*")) == before
    assert {p.parent for p in out.rglob("*")} == {out}


def test_no_command_exits_1():
    assert run([]) == 1
