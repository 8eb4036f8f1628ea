"""Chat-completion clients used to collect self-generated targets.

Two adapters share one interface: an HTTP client for a standard
chat-completions endpoint (auth token read from an environment variable at
call time, never stored or logged), and an in-process client around the toy
frozen LM for hermetic runs. Requests carry the originating record id so
failures can be attributed when runs quarantine records.
"""

from __future__ import annotations

import logging
import os
import time
from dataclasses import dataclass, field
from typing import Protocol

import requests

from .errors import DecodeBudgetExceeded, ProviderRefusal, TransportError
from .toylm import FrozenLMAdapter

logger = logging.getLogger(__name__)

_RETRYABLE_STATUS = {429, 500, 502, 503, 504}


@dataclass(frozen=True)
class DecodeParams:
    temperature: float = 0.0
    max_new_tokens: int = 512
    seed: int | None = None

    def __post_init__(self):
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if self.max_new_tokens < 1:
            raise ValueError("max_new_tokens must be >= 1")


@dataclass(frozen=True)
class ChatRequest:
    user: str
    system: str | None = None
    decode: DecodeParams = field(default_factory=DecodeParams)
    instruction: str | None = None  # the appended instruction, if any
    record_id: str = ""


@dataclass(frozen=True)
class TargetResponse:
    text: str
    finish_reason: str
    usage: dict[str, int] = field(default_factory=dict)


class LLMClient(Protocol):
    def complete(self, request: ChatRequest) -> TargetResponse: ...


class ToyLMClient:
    """Runs generation requests against the in-process frozen toy LM."""

    def __init__(self, lm: FrozenLMAdapter):
        self.lm = lm

    def complete(self, request: ChatRequest) -> TargetResponse:
        pieces = self.lm.chat_template(request.system, request.user, "")
        prefix = self.lm.embed(pieces.pre_ids + pieces.post_ids)
        try:
            ids = self.lm.decode(
                prefix,
                max_new_tokens=request.decode.max_new_tokens,
                temperature=request.decode.temperature,
                seed=request.decode.seed,
            )
        except DecodeBudgetExceeded:
            return TargetResponse(text="", finish_reason="length")
        return TargetResponse(
            text=self.lm.detokenize(ids),
            finish_reason="stop",
            usage={
                "prompt_tokens": len(pieces.pre_ids) + len(pieces.post_ids),
                "completion_tokens": len(ids),
            },
        )


class HttpChatClient:
    """Client for a chat-completions JSON endpoint with retry and backoff.

    Args:
        base_url: endpoint root; requests go to ``{base_url}/chat/completions``.
        model: model name passed through in the request body.
        api_key_env: name of the environment variable holding the bearer
            token; resolved per call so rotation needs no restart.
        max_retries: additional attempts after the first, on retryable
            failures (connection errors, 429, 5xx).
        backoff_base_s: sleep before retry k is ``backoff_base_s * 2**k``.
        sleep: injectable for tests.
    """

    def __init__(
        self,
        base_url: str,
        model: str,
        api_key_env: str = "SIFTLAB_API_KEY",
        timeout_s: float = 60.0,
        max_retries: int = 3,
        backoff_base_s: float = 1.0,
        sleep=None,
    ):
        self.base_url = base_url.rstrip("/")
        self.model = model
        self.api_key_env = api_key_env
        self.timeout_s = timeout_s
        self.max_retries = max_retries
        self.backoff_base_s = backoff_base_s
        self._sleep = sleep if sleep is not None else time.sleep

    def _headers(self) -> dict[str, str]:
        headers = {"Content-Type": "application/json"}
        token = os.environ.get(self.api_key_env)
        if token:
            headers["Authorization"] = f"Bearer {token}"
        return headers

    def _body(self, request: ChatRequest) -> dict:
        messages = []
        if request.system is not None:
            messages.append({"role": "system", "content": request.system})
        messages.append({"role": "user", "content": request.user})
        body = {
            "model": self.model,
            "messages": messages,
            "temperature": request.decode.temperature,
            "max_tokens": request.decode.max_new_tokens,
        }
        if request.decode.seed is not None:
            body["seed"] = request.decode.seed
        return body

    def complete(self, request: ChatRequest) -> TargetResponse:
        url = f"{self.base_url}/chat/completions"
        body = self._body(request)
        last_failure = "no attempt made"
        for attempt in range(self.max_retries + 1):
            if attempt:
                delay = self.backoff_base_s * 2 ** (attempt - 1)
                logger.warning(
                    "retrying request for record %s in %.1fs (%s)",
                    request.record_id, delay, last_failure,
                )
                self._sleep(delay)
            try:
                resp = requests.post(url, json=body, headers=self._headers(), timeout=self.timeout_s)
            except requests.RequestException as exc:
                last_failure = f"transport: {exc}"
                continue
            if resp.status_code in _RETRYABLE_STATUS:
                last_failure = f"status {resp.status_code}"
                continue
            if resp.status_code != 200:
                raise ProviderRefusal(request.record_id, f"status {resp.status_code}")
            return self._parse(request, resp)
        raise TransportError(last_failure)

    def _parse(self, request: ChatRequest, resp) -> TargetResponse:
        try:
            payload = resp.json()
            choice = payload["choices"][0]
            content = choice["message"]["content"]
            finish = choice.get("finish_reason", "stop")
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise TransportError(f"malformed completion payload: {exc}") from exc
        if finish == "content_filter":
            raise ProviderRefusal(request.record_id, "content filter")
        usage = payload.get("usage") or {}
        return TargetResponse(
            text=content if isinstance(content, str) else "",
            finish_reason=str(finish),
            usage={k: v for k, v in usage.items() if isinstance(v, int)},
        )
