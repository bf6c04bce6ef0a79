"""Clients for captioning proxies, victim models and judges.

Three transports share one retrying front end:

* :class:`MockTransport` answers from a table keyed by ``(image hash, prompt)``
  and can inject failures, for tests and dry runs.
* :class:`LocalTransport` wraps any in-process ``(image, prompt) -> text``
  callable.
* :class:`HTTPTransport` posts a chat-completion request with the image
  attached as a base64 PNG. The API key is read from an environment variable
  at call time and never stored on the client.
"""

from __future__ import annotations

import base64
import logging
import os
import threading
import time
from dataclasses import dataclass, field
from typing import Callable, Optional, Protocol

import torch

from sgma.images import image_hash, png_bytes

logger = logging.getLogger(__name__)

CAPTION_PROMPT = "Describe this image in a short sentence."
CAPTIONING_TASK_PROMPT = "Describe the image in one sentence."


class TransportError(RuntimeError):
    retryable = False


class AuthError(TransportError):
    retryable = False


class RateLimitError(TransportError):
    retryable = True


class RequestTimeout(TransportError):
    retryable = True


class MalformedResponseError(TransportError):
    retryable = False


class RetriesExhausted(TransportError):
    def __init__(self, message: str, attempts: int, last: Exception):
        super().__init__(message)
        self.attempts = attempts
        self.last = last


@dataclass(frozen=True)
class RetryPolicy:
    max_attempts: int = 3
    base_delay: float = 1.0
    factor: float = 2.0

    def delay(self, attempt: int) -> float:
        """Wait before retry number ``attempt`` (1-based)."""
        return self.base_delay * self.factor ** (attempt - 1)


@dataclass
class VLMResponse:
    text: str
    latency: float
    attempt_count: int
    truncated: bool = False


@dataclass
class TransportReply:
    text: str
    truncated: bool = False


class Transport(Protocol):
    def send(self, image: torch.Tensor, prompt: str) -> TransportReply: ...


class TokenBucket:
    """Thread-safe token bucket; ``rate`` tokens per second up to ``capacity``."""

    def __init__(self, rate: float, capacity: Optional[float] = None, clock=time.monotonic, sleep=time.sleep):
        if rate <= 0:
            raise ValueError("rate must be positive")
        self.rate = rate
        self.capacity = capacity if capacity is not None else max(1.0, rate)
        self._tokens = self.capacity
        self._clock, self._sleep = clock, sleep
        self._stamp = clock()
        self._lock = threading.Lock()

    def acquire(self) -> None:
        while True:
            with self._lock:
                now = self._clock()
                self._tokens = min(self.capacity, self._tokens + (now - self._stamp) * self.rate)
                self._stamp = now
                if self._tokens >= 1.0:
                    self._tokens -= 1.0
                    return
                wait = (1.0 - self._tokens) / self.rate
            self._sleep(wait)


# ---------------------------------------------------------------- transports


class MockTransport:
    """Canned responses keyed by ``(image_hash, prompt)``.

    ``failures`` is a list of exceptions raised (in order) before any answer
    is served; ``default`` computes a reply for unknown keys.
    """

    def __init__(self, responses: Optional[dict] = None, default: Optional[Callable[[str, str], str]] = None,
                 failures: Optional[list[Exception]] = None):
        self.responses = dict(responses or {})
        self.default = default
        self.failures = list(failures or [])
        self.calls: list[tuple[str, str]] = []

    def add(self, image: torch.Tensor, prompt: str, text: str) -> None:
        self.responses[(image_hash(image), prompt)] = text

    def send(self, image: torch.Tensor, prompt: str) -> TransportReply:
        key = (image_hash(image), prompt)
        self.calls.append(key)
        if self.failures:
            raise self.failures.pop(0)
        if key in self.responses:
            return TransportReply(self.responses[key])
        if self.default is not None:
            return TransportReply(self.default(*key))
        raise MalformedResponseError(f"mock has no response for image {key[0][:12]} and prompt {prompt!r}")


class LocalTransport:
    def __init__(self, fn: Callable[[torch.Tensor, str], str]):
        self.fn = fn

    def send(self, image: torch.Tensor, prompt: str) -> TransportReply:
        return TransportReply(self.fn(image, prompt))


class HTTPTransport:
    """OpenAI-style ``/chat/completions`` endpoint with an image attachment."""

    def __init__(self, url: str, model: str, api_key_env: Optional[str] = None, timeout: float = 60.0,
                 temperature: float = 0.0, max_tokens: int = 128):
        self.url = url
        self.model = model
        self.api_key_env = api_key_env
        self.timeout = timeout
        self.temperature = temperature
        self.max_tokens = max_tokens

    def payload(self, image: torch.Tensor, prompt: str) -> dict:
        data = base64.b64encode(png_bytes(image)).decode("ascii")
        return {
            "model": self.model,
            "temperature": self.temperature,
            "max_tokens": self.max_tokens,
            "messages": [
                {
                    "role": "user",
                    "content": [
                        {"type": "text", "text": prompt},
                        {"type": "image_url", "image_url": {"url": f"data:image/png;base64,{data}"}},
                    ],
                }
            ],
        }

    def send(self, image: torch.Tensor, prompt: str) -> TransportReply:
        import httpx

        headers = {}
        if self.api_key_env:
            key = os.environ.get(self.api_key_env)
            if not key:
                raise AuthError(f"environment variable {self.api_key_env} is not set")
            headers["Authorization"] = f"Bearer {key}"
        try:
            resp = httpx.post(self.url, json=self.payload(image, prompt), headers=headers, timeout=self.timeout)
        except httpx.TimeoutException as exc:
            raise RequestTimeout(str(exc)) from exc
        except httpx.TransportError as exc:
            raise RequestTimeout(f"connection failed: {exc}") from exc
        if resp.status_code in (401, 403):
            raise AuthError(f"authentication failed ({resp.status_code})")
        if resp.status_code == 429:
            raise RateLimitError("rate limited")
        if resp.status_code in (408, 504):
            raise RequestTimeout(f"server timeout ({resp.status_code})")
        if resp.status_code >= 500:
            raise RateLimitError(f"server error {resp.status_code}")
        if resp.status_code >= 400:
            raise MalformedResponseError(f"request rejected ({resp.status_code})")
        try:
            choice = resp.json()["choices"][0]
            text = choice["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise MalformedResponseError("response lacks choices[0].message.content") from exc
        if not isinstance(text, str):
            raise MalformedResponseError("response content is not a string")
        return TransportReply(text, truncated=choice.get("finish_reason") == "length")

    def describe(self) -> dict:
        return {
            "url": self.url,
            "model": self.model,
            "api_key_env": self.api_key_env,
            "temperature": self.temperature,
            "max_tokens": self.max_tokens,
        }


# ---------------------------------------------------------------- client


@dataclass
class VLMClient:
    endpoint: str
    transport: Transport
    retry: RetryPolicy = field(default_factory=RetryPolicy)
    timeout: float = 60.0
    rate_limit: Optional[float] = None  # requests per second
    sleep: Callable[[float], None] = time.sleep

    def __post_init__(self):
        self._bucket = TokenBucket(self.rate_limit, sleep=self.sleep) if self.rate_limit else None

    def describe(self) -> dict:
        """Serializable client settings (never includes credentials)."""
        info = {"endpoint": self.endpoint, "transport": type(self.transport).__name__,
                "max_attempts": self.retry.max_attempts, "timeout": self.timeout}
        if hasattr(self.transport, "describe"):
            info.update(self.transport.describe())
        return info

    def query(self, image: torch.Tensor, prompt: str) -> VLMResponse:
        last: Optional[Exception] = None
        for attempt in range(1, self.retry.max_attempts + 1):
            if self._bucket is not None:
                self._bucket.acquire()
            started = time.perf_counter()
            try:
                reply = self.transport.send(image, prompt)
            except TransportError as exc:
                if not exc.retryable:
                    raise
                last = exc
                logger.warning("%s attempt %d failed: %s", self.endpoint, attempt, exc)
                if attempt < self.retry.max_attempts:
                    self.sleep(self.retry.delay(attempt))
                continue
            if not reply.text or not reply.text.strip():
                raise MalformedResponseError(f"{self.endpoint} returned an empty response")
            return VLMResponse(reply.text, time.perf_counter() - started, attempt, reply.truncated)
        raise RetriesExhausted(
            f"{self.endpoint} failed after {self.retry.max_attempts} attempts: {last}", self.retry.max_attempts, last
        )


def _one_line(text: str) -> str:
    return " ".join(text.split())


def caption_image(client: Optional[VLMClient], image: torch.Tensor, manifest_caption: Optional[str] = None) -> str:
    """Proxy caption for the attack; a manifest caption skips the call."""
    if manifest_caption and manifest_caption.strip():
        return _one_line(manifest_caption)
    if client is None:
        raise ValueError("no caption in the manifest and no caption client configured")
    return _one_line(client.query(image, CAPTION_PROMPT).text)


def describe_for_captioning_task(client: Optional[VLMClient], image: torch.Tensor,
                                 manifest_caption: Optional[str] = None) -> str:
    """Victim output for the image-captioning evaluation task."""
    if manifest_caption and manifest_caption.strip():
        return _one_line(manifest_caption)
    if client is None:
        raise ValueError("no captioning client configured")
    return _one_line(client.query(image, CAPTIONING_TASK_PROMPT).text)
