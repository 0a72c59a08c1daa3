from __future__ import annotations

import base64
import json
import logging
import math
import threading
import time

import httpx
import pytest

from mentalstate.backends import (
    BackendRejected,
    BackendUnavailable,
    CachingBackend,
    EchoGoldBackend,
    HttpBackend,
    MalformedResponse,
    ModelRequest,
    ProbabilisticBackend,
    ScriptedBackend,
    stage_distribution,
)
from mentalstate.categorical import marginalize
from mentalstate.domain import BehaviorLabel, ClipSample, CognitionLabel, Stage
from mentalstate.synth import paper_model


def _ok(text="Answer: Monitoring"):
    return httpx.Response(200, json={"choices": [{"message": {"role": "assistant", "content": text}}]})


def test_echo_gold_behavior(sample):
    backend = EchoGoldBackend([sample])
    out = backend.complete(ModelRequest("p", clip_id="s1", stage=Stage.BEHAVIOR))
    assert out.text == "Answer: Monitoring"
    combined = backend.complete(ModelRequest("p", clip_id="s1", stage=Stage.COMBINED))
    assert combined.text == "Behavior: Monitoring\nCognition: C_Negative\nEmotion: E_Neutral"


def test_echo_gold_requires_gold(sample):
    with pytest.raises(ValueError, match="gold"):
        EchoGoldBackend([ClipSample("nogold", "d", "t", 1.0)])
    with pytest.raises(BackendRejected):
        EchoGoldBackend([sample]).complete(ModelRequest("p", clip_id="other"))


def test_scripted_lookup():
    backend = ScriptedBackend.from_json({"c7": {"Emotion": "I think E_Mixed.\nAnswer: E_Mixed"}})
    out = backend.complete(ModelRequest("p", clip_id="c7", stage=Stage.EMOTION))
    assert out.text == "I think E_Mixed.\nAnswer: E_Mixed"
    with pytest.raises(BackendRejected):
        backend.complete(ModelRequest("p", clip_id="c7", stage=Stage.BEHAVIOR))
    fallback = ScriptedBackend.from_json({"*": "nothing"})
    assert fallback.complete(ModelRequest("p", clip_id="z")).text == "nothing"


def test_probabilistic_is_deterministic():
    backend = ProbabilisticBackend(paper_model(), seed=5)
    req = ModelRequest("p", clip_id="c1", stage=Stage.COGNITION, conditioning=("Monitoring",))
    assert backend.complete(req) == backend.complete(req)
    texts = {ProbabilisticBackend(paper_model(), seed=s).complete(
        ModelRequest("p", clip_id="c1")).text for s in range(40)}
    assert len(texts) > 1


def test_stage_distribution_reference_values():
    model = paper_model()
    p_b = stage_distribution(model, Stage.BEHAVIOR)
    assert p_b[0] == pytest.approx(0.562, abs=1e-12)
    p_c = stage_distribution(model, Stage.COGNITION, BehaviorLabel.CONTROLLING)
    assert p_c[3] == pytest.approx(0.991, abs=1e-12)


def test_stage_distribution_sums_to_one():
    model = paper_model()
    vectors = [stage_distribution(model, Stage.BEHAVIOR)]
    for b in [*BehaviorLabel, None]:
        vectors.append(stage_distribution(model, Stage.COGNITION, b))
        for c in [*CognitionLabel, None]:
            vectors.append(stage_distribution(model, Stage.EMOTION, b, c))
    for v in vectors:
        assert all(x >= 0 for x in v)
        assert abs(math.fsum(v) - 1) < 1e-12


def test_stage_distribution_unknown_upstream_is_marginal():
    model = paper_model()
    _, p_c, p_e = marginalize(model)
    assert stage_distribution(model, Stage.COGNITION, None) == pytest.approx(p_c, abs=1e-12)
    assert stage_distribution(model, Stage.EMOTION, None, None) == pytest.approx(p_e, abs=1e-12)


def test_stage_distribution_rejects_out_of_space():
    model = paper_model()
    with pytest.raises(ValueError):
        stage_distribution(model, Stage.COGNITION, CognitionLabel.MIXED)
    with pytest.raises(ValueError):
        ProbabilisticBackend(model).distribution(Stage.COGNITION, ("C_Mixed",))


def test_caching_backend_counts_hits(sample):
    inner = EchoGoldBackend([sample])
    cache = CachingBackend(inner)
    req = ModelRequest("p", clip_id="s1", stage=Stage.EMOTION)
    assert cache.complete(req) == cache.complete(req)
    assert cache.hits == 1


# HTTP backend against an in-process transport


def _backend(handler, **kw):
    sleeps = []
    clock = [0.0]

    def fake_sleep(seconds):
        sleeps.append(seconds)
        clock[0] += seconds

    backend = HttpBackend("http://model.test/v1/chat/completions", model="m",
                          transport=httpx.MockTransport(handler), sleep=fake_sleep,
                          clock=lambda: clock[0], **kw)
    return backend, sleeps


def test_http_payload_shape(sample, monkeypatch):
    monkeypatch.setenv("MOTOR_API_KEY", "secret-token")
    seen = {}

    def handler(request: httpx.Request):
        seen["body"] = json.loads(request.content)
        seen["auth"] = request.headers.get("authorization")
        return _ok()

    from mentalstate.media import sample_frames
    refs, _ = sample_frames(sample, 8, 448)
    backend, _ = _backend(handler)
    out = backend.complete(ModelRequest("PROMPT", tuple(refs), 0.0, 1024, "s1"))
    assert out.text == "Answer: Monitoring"
    assert out.backend_id == "http:m"
    body = seen["body"]
    assert seen["auth"] == "Bearer secret-token"
    assert body["model"] == "m"
    assert body["temperature"] == 0.0 and body["max_tokens"] == 1024 and body["top_p"] == 1.0
    (message,) = body["messages"]
    parts = message["content"]
    assert [p["type"] for p in parts] == ["image_url"] * 8 + ["text"]
    assert parts[-1]["text"] == "PROMPT"
    first = parts[0]["image_url"]["url"]
    assert first.startswith("data:image/png;base64,")
    with open(refs[0], "rb") as fh:
        assert base64.b64decode(first.split(",", 1)[1]) == fh.read()
    # frames are sent in the order given
    last = base64.b64decode(parts[7]["image_url"]["url"].split(",", 1)[1])
    with open(refs[7], "rb") as fh:
        assert last == fh.read()


def test_http_text_only_and_paths(sample):
    bodies = []

    def handler(request):
        bodies.append(json.loads(request.content))
        return _ok()

    backend, _ = _backend(handler, inline_images=False)
    backend.complete(ModelRequest("p"))
    assert [p["type"] for p in bodies[0]["messages"][0]["content"]] == ["text"]
    backend.complete(ModelRequest("p", (sample.frames_dir + "/frame_0.png",)))
    assert bodies[1]["messages"][0]["content"][0]["image_url"]["url"].startswith("file://")


def test_http_retries_transient_then_succeeds():
    calls = []

    def handler(request):
        calls.append(1)
        if len(calls) == 1:
            raise httpx.ConnectError("refused")
        if len(calls) == 2:
            return httpx.Response(503, json={"error": {"message": "busy"}})
        return _ok("Answer: Mixed")

    backend, sleeps = _backend(handler)
    assert backend.complete(ModelRequest("p")).text == "Answer: Mixed"
    assert sleeps == [1.0, 2.0]


def test_http_gives_up_after_retries():
    backend, sleeps = _backend(lambda r: (_ for _ in ()).throw(httpx.ConnectError("down")))
    with pytest.raises(BackendUnavailable, match="4 attempts"):
        backend.complete(ModelRequest("p"))
    assert sleeps == [1.0, 2.0, 4.0]


def test_http_rejected_carries_status_and_message():
    backend, sleeps = _backend(lambda r: httpx.Response(400, json={"error": {"message": "bad prompt"}}))
    with pytest.raises(BackendRejected) as info:
        backend.complete(ModelRequest("p"))
    assert info.value.status == 400 and info.value.message == "bad prompt"
    assert sleeps == []


def test_http_persistent_503_is_rejected_after_retries():
    backend, sleeps = _backend(lambda r: httpx.Response(503, json={"error": "overloaded"}))
    with pytest.raises(BackendRejected) as info:
        backend.complete(ModelRequest("p"))
    assert info.value.status == 503
    assert len(sleeps) == 3


@pytest.mark.parametrize("body", [
    {"choices": []},
    {"choices": [{"message": {}}]},
    {"result": "x"},
    {"choices": [{"message": {"content": None}}]},
])
def test_http_malformed(body):
    backend, _ = _backend(lambda r: httpx.Response(200, json=body))
    with pytest.raises(MalformedResponse):
        backend.complete(ModelRequest("p"))


def test_http_non_json_body():
    backend, _ = _backend(lambda r: httpx.Response(200, text="<html>"))
    with pytest.raises(MalformedResponse):
        backend.complete(ModelRequest("p"))


def test_http_content_parts_are_joined():
    body = {"choices": [{"message": {"content": [{"type": "text", "text": "Answer: "},
                                                 {"type": "text", "text": "Mixed"}]}}]}
    backend, _ = _backend(lambda r: httpx.Response(200, json=body))
    assert backend.complete(ModelRequest("p")).text == "Answer: Mixed"


def test_http_deadline_bounds_retries():
    backend, sleeps = _backend(lambda r: (_ for _ in ()).throw(httpx.ConnectError("down")),
                               deadline_s=2.5)
    with pytest.raises(BackendUnavailable, match="deadline"):
        backend.complete(ModelRequest("p"))
    assert sleeps == [1.0]


def test_http_bounds_in_flight_requests():
    lock = threading.Lock()
    state = {"now": 0, "peak": 0}

    def handler(request):
        with lock:
            state["now"] += 1
            state["peak"] = max(state["peak"], state["now"])
        time.sleep(0.02)
        with lock:
            state["now"] -= 1
        return _ok()

    backend, _ = _backend(handler, max_in_flight=2)
    threads = [threading.Thread(target=backend.complete, args=(ModelRequest("p"),)) for _ in range(8)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert state["peak"] <= 2


def test_http_trace_elides_frames_and_key(sample, caplog, monkeypatch):
    monkeypatch.setenv("MOTOR_API_KEY", "secret-token")
    backend, _ = _backend(lambda r: _ok(), trace=True)
    with caplog.at_level(logging.INFO, logger="mentalstate.backends"):
        backend.complete(ModelRequest("p", (sample.frames_dir + "/frame_0.png",)))
    logged = caplog.text
    assert "<elided>" in logged
    assert "base64" not in logged
    assert "secret-token" not in logged
