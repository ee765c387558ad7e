"""Retrying, order-preserving request dispatch on top of any backend."""

from __future__ import annotations

import asyncio
import random
from collections.abc import Sequence

import structlog

from llmrescore.config import ConcurrencyPolicy
from llmrescore.llm.base import LlmBackend, LlmError, LlmRequest, LlmResponse
from llmrescore.store import RawStore

log = structlog.get_logger()


async def complete(
    req: LlmRequest,
    backend: LlmBackend,
    policy: ConcurrencyPolicy | None = None,
    *,
    rng: random.Random | None = None,
    store: RawStore | None = None,
) -> LlmResponse:
    """One logical completion, retried on transport errors, timeouts and 5xx.

    Backoff is ``base * factor**(attempt-1)`` plus seeded jitter in
    ``[0, base)``. 4xx and malformed bodies are never retried.
    """
    policy = policy or ConcurrencyPolicy()
    rng = rng or random.Random(f"{policy.seed}:{req.request_tag}")

    for attempt in range(1, policy.max_attempts + 1):
        try:
            resp = await backend.complete(req)
        except LlmError as exc:
            exc.attempts = attempt
            if store is not None:
                store.record_failure(req.request_tag, attempt, str(exc))
            if not exc.retryable or attempt == policy.max_attempts:
                log.warning(
                    "llm_request_failed",
                    tag=req.request_tag,
                    attempts=attempt,
                    error=str(exc),
                )
                raise
            delay = policy.backoff_base_sec * policy.backoff_factor ** (attempt - 1)
            delay += rng.uniform(0, policy.backoff_base_sec)
            log.info("llm_retry", tag=req.request_tag, attempt=attempt, delay=round(delay, 3))
            await asyncio.sleep(delay)
            continue

        if store is not None:
            store.record_response(req.request_tag, attempt, str(resp.finish_reason), resp.raw_payload)
        return resp

    raise AssertionError("unreachable")


async def complete_batch(
    reqs: Sequence[LlmRequest],
    backend: LlmBackend,
    policy: ConcurrencyPolicy | None = None,
    *,
    store: RawStore | None = None,
) -> list[LlmResponse | LlmError]:
    """Complete every request with at most ``max_in_flight`` outstanding.

    Results come back in input order. Failed slots hold their ``LlmError``
    unless ``fail_fast`` is set, in which case the first failure is raised
    and the remaining requests are cancelled.
    Anything that is not an ``LlmError`` propagates whatever the policy.
    """
    policy = policy or ConcurrencyPolicy()
    gate = asyncio.Semaphore(policy.max_in_flight)

    async def _one(index: int, req: LlmRequest) -> LlmResponse:
        rng = random.Random(f"{policy.seed}:{index}")
        async with gate:
            return await complete(req, backend, policy, rng=rng, store=store)

    if policy.fail_fast:
        try:
            async with asyncio.TaskGroup() as tg:
                tasks = [tg.create_task(_one(i, r)) for i, r in enumerate(reqs)]
        except ExceptionGroup as group:
            raise group.exceptions[0] from None
        return [t.result() for t in tasks]

    async def _guarded(index: int, req: LlmRequest) -> LlmResponse | LlmError:
        try:
            return await _one(index, req)
        except LlmError as exc:
            return exc

    results = await asyncio.gather(*(_guarded(i, r) for i, r in enumerate(reqs)))
    failed = sum(isinstance(r, LlmError) for r in results)
    log.info("llm_batch_complete", requests=len(reqs), failed=failed)
    return list(results)
