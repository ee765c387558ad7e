from __future__ import annotations

import time

import httpx
import structlog

from llmrescore.config import LlmConfig
from llmrescore.llm.base import (
    FinishReason,
    LlmRequest,
    LlmResponse,
    LlmResponseError,
    LlmStatusError,
    LlmTimeoutError,
    LlmTransportError,
)

log = structlog.get_logger()

_FINISH = {"stop": FinishReason.STOP, "length": FinishReason.LENGTH}


class ChatApiBackend:
    """Chat-completions endpoint: POST ``<endpoint>/v1/chat/completions``."""

    def __init__(self, config: LlmConfig, client: httpx.AsyncClient | None = None) -> None:
        if not config.endpoint:
            raise ValueError("no LLM endpoint configured (use --endpoint or LLM_ENDPOINT)")
        self._url = f"{config.endpoint.rstrip('/')}/v1/chat/completions"
        self._headers = {"Content-Type": "application/json"}
        if config.api_key:
            self._headers["Authorization"] = f"Bearer {config.api_key}"
        self._owns_client = client is None
        self._client = client or httpx.AsyncClient(timeout=config.timeout_sec)

    async def complete(self, req: LlmRequest) -> LlmResponse:
        tag = req.request_tag
        start = time.perf_counter()
        try:
            resp = await self._client.post(self._url, json=req.payload(), headers=self._headers)
        except httpx.TimeoutException as exc:
            raise LlmTimeoutError(f"timeout: {exc}", request_tag=tag) from exc
        except httpx.TransportError as exc:
            raise LlmTransportError(f"transport failure: {exc}", request_tag=tag) from exc
        latency = time.perf_counter() - start

        if not resp.is_success:
            raise LlmStatusError(resp.status_code, resp.text[:200], request_tag=tag)

        try:
            data = resp.json()
            choice = data["choices"][0]
            text = choice["message"]["content"] or ""
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise LlmResponseError(f"malformed completion body: {exc!r}", request_tag=tag) from exc

        finish = _FINISH.get(choice.get("finish_reason") or "stop", FinishReason.ERROR)
        log.debug("llm_completed", tag=tag, status=resp.status_code, latency=round(latency, 3))
        return LlmResponse(
            text=text,
            finish_reason=finish,
            latency=latency,
            raw_payload=resp.content,
            request_tag=tag,
        )

    async def close(self) -> None:
        if self._owns_client:
            await self._client.aclose()

