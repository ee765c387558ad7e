from __future__ import annotations

from dataclasses import dataclass
from enum import StrEnum
from typing import Protocol, runtime_checkable

from llmrescore.prompts import ChatTurn


class FinishReason(StrEnum):
    STOP = "stop"
    LENGTH = "length"
    ERROR = "error"


@dataclass(frozen=True)
class LlmRequest:
    model_name: str
    turns: tuple[ChatTurn, ...]
    temperature: float = 0.0
    max_tokens: int = 512
    request_tag: str = ""

    def __post_init__(self) -> None:
        if not self.turns:
            raise ValueError("request needs at least one turn")
        if self.temperature < 0:
            raise ValueError(f"temperature must be >= 0, got {self.temperature}")
        if self.max_tokens < 1:
            raise ValueError(f"max_tokens must be positive, got {self.max_tokens}")

    def payload(self) -> dict:
        return {
            "model": self.model_name,
            "messages": [t.to_message() for t in self.turns],
            "temperature": self.temperature,
            "max_tokens": self.max_tokens,
        }


@dataclass(frozen=True)
class LlmResponse:
    text: str
    finish_reason: FinishReason
    latency: float  # seconds
    raw_payload: bytes = b""
    request_tag: str = ""


class LlmError(Exception):
    """A request that produced no usable response."""

    retryable = False

    def __init__(self, message: str, *, request_tag: str = "", attempts: int = 1) -> None:
        super().__init__(message)
        self.request_tag = request_tag
        self.attempts = attempts


class LlmTransportError(LlmError):
    retryable = True


class LlmTimeoutError(LlmError):
    retryable = True


class LlmResponseError(LlmError):
    """2xx response whose body is not a chat completion."""


class LlmStatusError(LlmError):
    def __init__(self, status: int, body_excerpt: str, **kwargs) -> None:
        super().__init__(f"HTTP {status}: {body_excerpt}", **kwargs)
        self.status = status
        self.body_excerpt = body_excerpt

    @property
    def retryable(self) -> bool:  # type: ignore[override]
        return self.status >= 500


@runtime_checkable
class LlmBackend(Protocol):
    async def complete(self, req: LlmRequest) -> LlmResponse: ...

    async def close(self) -> None: ...
