"""Model backends: the interface the orchestrator talks to, an HTTP client
for remote inference servers, and a scripted backend for tests."""

from __future__ import annotations

import threading
from typing import Iterable, Mapping, Protocol, runtime_checkable

import httpx

__all__ = ["ModelBackend", "HttpBackend", "ScriptedBackend", "request_gate"]


@runtime_checkable
class ModelBackend(Protocol):
    """Anything that turns a prompt payload into raw response text.

    ``supports_audio_bytes`` asks for base64 WAV in the payload instead of
    file references. ``serial`` declares that ``generate`` must not be
    called concurrently.
    """

    supports_audio_bytes: bool
    serial: bool

    def generate(self, payload: Mapping) -> str: ...


_GATES: dict[int, threading.Lock] = {}
_GATES_LOCK = threading.Lock()


class _NoGate:
    def __enter__(self):
        return self

    def __exit__(self, *exc):
        return False


_NO_GATE = _NoGate()


def request_gate(backend):
    """Lock serialising calls to a backend that declares itself serial."""
    if not getattr(backend, "serial", False):
        return _NO_GATE
    with _GATES_LOCK:
        return _GATES.setdefault(id(backend), threading.Lock())


class HttpBackend:
    """POST each payload to ``<url>/generate`` and return the ``text`` field."""

    def __init__(self, url: str, *, timeout: float = 120.0, supports_audio_bytes: bool = False,
                 serial: bool = False, client: httpx.Client | None = None):
        self.url = url.rstrip("/")
        self.timeout = timeout
        self.supports_audio_bytes = supports_audio_bytes
        self.serial = serial
        self._client = client or httpx.Client(timeout=timeout)

    def generate(self, payload: Mapping) -> str:
        resp = self._client.post(f"{self.url}/generate", json=dict(payload))
        resp.raise_for_status()
        body = resp.json()
        if not isinstance(body, dict) or not isinstance(body.get("text"), str):
            raise ValueError(f"malformed backend response: {str(body)[:120]}")
        return body["text"]

    def close(self):
        self._client.close()


class ScriptedBackend:
    """Replay fixed responses in order, recording the payloads it was sent.

    After the script runs out the last response repeats.
    """

    supports_audio_bytes = False
    serial = True

    def __init__(self, responses: Iterable[str] | str):
        self.responses = [responses] if isinstance(responses, str) else list(responses)
        if not self.responses:
            raise ValueError("ScriptedBackend needs at least one response")
        self.payloads: list[Mapping] = []

    def generate(self, payload: Mapping) -> str:
        self.payloads.append(payload)
        i = min(len(self.payloads), len(self.responses)) - 1
        return self.responses[i]
