"""Model backends: a chat-completions HTTP client and deterministic mocks.

Every backend exposes ``complete(request) -> ModelResponse`` and must be safe
to call from several worker threads at once.
"""

from __future__ import annotations

import base64
import functools
import json
import logging
import mimetypes
import os
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Protocol, Sequence

import httpx

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
    DIMENSIONS,
    UNKNOWN,
    BehaviorLabel,
    ClipSample,
    CognitionLabel,
    Label,
    Stage,
    parse_optional_label,
    render_label,
)

logger = logging.getLogger(__name__)

API_KEY_ENV = "MOTOR_API_KEY"


class BackendError(Exception):
    pass


class BackendUnavailable(BackendError):
    """Transport kept failing after all retries (or the deadline ran out)."""


class BackendRejected(BackendError):
    def __init__(self, status: int, message: str):
        self.status = status
        self.message = message
        super().__init__(f"HTTP {status}: {message}")


class MalformedResponse(BackendError):
    pass


@dataclass(frozen=True)
class ModelRequest:
    """One generation request.

    ``clip_id``, ``stage`` and ``conditioning`` never go over the wire; mocks
    use them to decide what to answer.
    """

    prompt: str
    frame_refs: tuple[str, ...] = ()
    temperature: float = 0.0
    max_new_tokens: int = 1024
    clip_id: str = ""
    stage: Stage = Stage.BEHAVIOR
    conditioning: tuple[str, ...] = ()


@dataclass(frozen=True)
class ModelResponse:
    text: str
    latency_ms: float
    backend_id: str


class Backend(Protocol):
    backend_id: str

    def complete(self, request: ModelRequest) -> ModelResponse: ...


def _answer_text(stage: Stage, labels: Sequence[Label]) -> str:
    if stage is Stage.COMBINED:
        return "\n".join(f"{s.value}: {render_label(x)}" for s, x in zip(DIMENSIONS, labels))
    return f"Answer: {render_label(labels[0])}"


class EchoGoldBackend:
    """Answers every request with the sample's gold label."""

    backend_id = "mock:echo-gold"

    def __init__(self, samples: Sequence[ClipSample]):
        self._gold = {}
        for s in samples:
            if s.gold is None:
                raise ValueError(f"echo-gold mock needs gold labels; clip {s.clip_id} has none")
            self._gold[s.clip_id] = s.gold

    def complete(self, request: ModelRequest) -> ModelResponse:
        try:
            gold = self._gold[request.clip_id]
        except KeyError:
            raise BackendRejected(404, f"no gold labels for clip {request.clip_id!r}") from None
        labels = tuple(gold) if request.stage is Stage.COMBINED else (gold.get(request.stage),)
        return ModelResponse(_answer_text(request.stage, labels), 0.0, self.backend_id)


class ScriptedBackend:
    """Replies from a fixed ``(clip_id, stage) -> text`` table."""

    backend_id = "mock:scripted"

    def __init__(self, script: Mapping[tuple[str, Stage], str], default: str | None = None):
        self._script = dict(script)
        self._default = default

    @classmethod
    def from_json(cls, obj: dict) -> ScriptedBackend:
        """``{"clip_id": {"Behavior": "...", ...}, ...}`` plus an optional ``"*"`` default."""
        script = {}
        default = None
        for clip_id, stages in obj.items():
            if clip_id == "*":
                default = stages
                continue
            for stage_name, text in stages.items():
                script[clip_id, Stage(stage_name)] = text
        return cls(script, default)

    def complete(self, request: ModelRequest) -> ModelResponse:
        text = self._script.get((request.clip_id, request.stage), self._default)
        if text is None:
            raise BackendRejected(404, f"no scripted reply for ({request.clip_id}, {request.stage.value})")
        return ModelResponse(text, 0.0, self.backend_id)


@functools.lru_cache(maxsize=32)
def _marginals(model: CategoricalModel) -> tuple:
    return marginalize(model)


def stage_distribution(model: CategoricalModel, stage: Stage,
                       behavior: BehaviorLabel | None = None,
                       cognition: CognitionLabel | None = None) -> list[float]:
    """The exact distribution the probabilistic mock samples ``stage`` from.

    Missing (Unknown) upstream labels are summed out of the chain.
    """
    if behavior is not None and not isinstance(behavior, BehaviorLabel):
        raise ValueError(f"behavior conditioning must be a behavior label, got {behavior!r}")
    if cognition is not None and not isinstance(cognition, CognitionLabel):
        raise ValueError(f"cognition conditioning must be a cognition label, got {cognition!r}")
    p_b, p_c, p_e = (list(x) for x in _marginals(model))
    if stage is Stage.BEHAVIOR:
        return p_b
    if stage is Stage.COGNITION:
        return list(model.cognition_row(behavior)) if behavior is not None else p_c
    if stage is not Stage.EMOTION:
        raise ValueError(f"no single distribution for stage {stage}")
    if behavior is not None and cognition is not None:
        return list(model.emotion_row(behavior, cognition))
    # weight each (b, c) cell by its joint mass consistent with the known labels
    weights = {}
    for b, pb in zip(B_LABELS, p_b):
        if behavior is not None and b is not behavior:
            continue
        for c, pc in zip(C_LABELS, model.cognition_row(b)):
            if cognition is not None and c is not cognition:
                continue
            weights[b, c] = pb * pc
    total = sum(weights.values())
    if total <= 0:
        # conditioning on a zero-probability event; fall back to the emotion marginal
        return p_e
    return [
        sum(w * model.emotion_row(b, c)[k] for (b, c), w in weights.items()) / total
        for k in range(4)
    ]


class ProbabilisticBackend:
    """Samples answers from a :class:`CategoricalModel`.

    Each draw is keyed by ``(seed, clip_id, stage)`` so repeated calls agree and
    results are independent of scheduling.
    """

    backend_id = "mock:probabilistic"

    def __init__(self, model: CategoricalModel, seed: int = 0):
        self.model = model
        self.seed = seed

    def distribution(self, stage: Stage, conditioning: Sequence[str] = ()) -> list[float]:
        behavior = cognition = None
        if len(conditioning) > 0:
            behavior = parse_optional_label(Stage.BEHAVIOR, conditioning[0])
        if len(conditioning) > 1:
            cognition = parse_optional_label(Stage.COGNITION, conditioning[1])
        return stage_distribution(self.model, stage, behavior, cognition)

    def _draw(self, clip_id: str, stage: Stage, probs: Sequence[float], labels: tuple) -> Label:
        return labels[categorical_draw(probs, counter_uniform(self.seed, clip_id, stage.value))]

    def complete(self, request: ModelRequest) -> ModelResponse:
        stage = request.stage
        if stage is Stage.COMBINED:
            b = self._draw(request.clip_id, Stage.BEHAVIOR, self.model.p_behavior, B_LABELS)
            c = self._draw(request.clip_id, Stage.COGNITION, self.model.cognition_row(b), C_LABELS)
            e = self._draw(request.clip_id, Stage.EMOTION, self.model.emotion_row(b, c), E_LABELS)
            labels = (b, c, e)
        else:
            probs = self.distribution(stage, request.conditioning)
            space = {Stage.BEHAVIOR: B_LABELS, Stage.COGNITION: C_LABELS, Stage.EMOTION: E_LABELS}[stage]
            labels = (self._draw(request.clip_id, stage, probs, space),)
        return ModelResponse(_answer_text(stage, labels), 0.0, self.backend_id)


class CachingBackend:
    """Memoizes replies by full request content; used for ablation reuse."""

    def __init__(self, inner: Backend):
        self.inner = inner
        self.backend_id = inner.backend_id
        self._cache: dict[ModelRequest, ModelResponse] = {}
        self._lock = threading.Lock()
        self.hits = 0

    def complete(self, request: ModelRequest) -> ModelResponse:
        with self._lock:
            cached = self._cache.get(request)
            if cached is not None:
                self.hits += 1
                return cached
        response = self.inner.complete(request)
        with self._lock:
            self._cache.setdefault(request, response)
        return response


RETRYABLE_STATUS = frozenset({408, 429, 500, 502, 503, 504})


def _image_part(ref: str, inline: bool) -> dict:
    if not inline:
        return {"type": "image_url", "image_url": {"url": Path(ref).resolve().as_uri()}}
    mime = mimetypes.guess_type(ref)[0] or "image/png"
    data = base64.b64encode(Path(ref).read_bytes()).decode("ascii")
    return {"type": "image_url", "image_url": {"url": f"data:{mime};base64,{data}"}}


def _elide_images(payload: dict) -> dict:
    clone = json.loads(json.dumps(payload))
    for message in clone.get("messages", []):
        content = message.get("content")
        if isinstance(content, list):
            for part in content:
                if part.get("type") == "image_url":
                    part["image_url"] = {"url": "<elided>"}
    return clone


@dataclass
class HttpBackend:
    """Client for any server speaking the chat-completions JSON shape.

    Images go first, then the text prompt, all in one user message. Transient
    failures (transport errors, 408/429/500/502/503/504) are retried with exponential
    backoff; ``deadline_s`` caps the total time spent on one call.
    """

    endpoint: str
    model: str = "default"
    api_key: str | None = None
    inline_images: bool = True
    max_retries: int = 3
    backoff_s: float = 1.0
    deadline_s: float = 300.0
    max_in_flight: int = 4
    trace: bool = False
    transport: httpx.BaseTransport | None = None
    sleep: Callable[[float], None] = time.sleep
    clock: Callable[[], float] = time.monotonic
    backend_id: str = field(init=False)

    def __post_init__(self) -> None:
        if self.api_key is None:
            self.api_key = os.environ.get(API_KEY_ENV)
        self.backend_id = f"http:{self.model}"
        self._gate = threading.BoundedSemaphore(self.max_in_flight)
        self._client = httpx.Client(transport=self.transport)

    def close(self) -> None:
        self._client.close()

    def payload(self, request: ModelRequest) -> dict:
        parts = [_image_part(ref, self.inline_images) for ref in request.frame_refs]
        parts.append({"type": "text", "text": request.prompt})
        return {
            "model": self.model,
            "messages": [{"role": "user", "content": parts}],
            "temperature": request.temperature,
            "top_p": 1.0,
            "max_tokens": request.max_new_tokens,
        }

    def _headers(self) -> dict[str, str]:
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        return headers

    def complete(self, request: ModelRequest) -> ModelResponse:
        payload = self.payload(request)
        if self.trace:
            logger.info("request %s", json.dumps(_elide_images(payload), ensure_ascii=False))
        start = self.clock()
        with self._gate:
            response = self._post_with_retries(payload, start)
        latency_ms = (self.clock() - start) * 1000.0
        try:
            body = response.json()
        except ValueError:
            raise MalformedResponse("response body is not JSON") from None
        if self.trace:
            logger.info("response %s", json.dumps(body, ensure_ascii=False))
        return ModelResponse(_response_text(body), latency_ms, self.backend_id)

    def _post_with_retries(self, payload: dict, start: float) -> httpx.Response:
        attempt = 0
        while True:
            remaining = self.deadline_s - (self.clock() - start)
            if remaining <= 0:
                raise BackendUnavailable(f"deadline of {self.deadline_s}s exceeded")
            failure: str
            try:
                response = self._client.post(
                    self.endpoint, json=payload, headers=self._headers(), timeout=remaining,
                )
            except httpx.TransportError as exc:
                failure = f"{type(exc).__name__}: {exc}"
                response = None
            if response is not None:
                if response.is_success:
                    return response
                if response.status_code not in RETRYABLE_STATUS:
                    raise _rejection(response)
                failure = f"HTTP {response.status_code}"
            if attempt >= self.max_retries:
                if response is not None:
                    raise _rejection(response)
                raise BackendUnavailable(f"giving up after {attempt + 1} attempts: {failure}")
            delay = self.backoff_s * (2 ** attempt)
            if self.clock() - start + delay >= self.deadline_s:
                raise BackendUnavailable(f"deadline of {self.deadline_s}s would be exceeded: {failure}")
            logger.warning("transient backend failure (%s); retrying in %.1fs", failure, delay)
            self.sleep(delay)
            attempt += 1


def _rejection(response: httpx.Response) -> BackendRejected:
    message = response.text
    try:
        body = response.json()
        err = body.get("error", body) if isinstance(body, dict) else body
        if isinstance(err, dict):
            message = str(err.get("message", err))
        elif err:
            message = str(err)
    except ValueError:
        pass
    return BackendRejected(response.status_code, message)


def _response_text(body: object) -> str:
    try:
        content = body["choices"][0]["message"]["content"]
    except (KeyError, IndexError, TypeError):
        raise MalformedResponse("response lacks choices[0].message.content") from None
    if content is None:
        raise MalformedResponse("response content is null")
    if isinstance(content, list):
        return "".join(p.get("text", "") for p in content if isinstance(p, dict))
    if not isinstance(content, str):
        raise MalformedResponse(f"unexpected content type {type(content).__name__}")
    return content


def conditioning_for(*labels: Label | None) -> tuple[str, ...]:
    return tuple(UNKNOWN if x is None else render_label(x) for x in labels)
