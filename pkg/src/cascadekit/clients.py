"""Black-box access to chat-completion and embedding endpoints.

Speaks the OpenAI-compatible wire protocol: POST {base_url}/v1/chat/completions
and POST {base_url}/v1/embeddings. API keys are read from the environment
variable each endpoint names and sent as a bearer token. Latency is whatever
the client observes around a single request (batch of 1), network included.
"""

from __future__ import annotations

import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Mapping, Sequence

import httpx

from .errors import (
    DimensionMismatch,
    EnsembleMemberFailure,
    HttpError,
    InsufficientSurvivors,
    MalformedResponse,
    MissingLogprobs,
    Timeout,
)

FANOUT_MODES = ("fail_fast", "degrade")


@dataclass(frozen=True)
class EndpointSpec:
    """One model endpoint the cascade can call."""

    id: str
    base_url: str
    model_name: str
    api_key_ref: str | None = None
    timeout_ms: int = 30_000
    wants_logprobs: bool = False

    def __post_init__(self) -> None:
        if self.timeout_ms <= 0:
            raise ValueError(f"timeout_ms must be > 0, got {self.timeout_ms}")

    @classmethod
    def from_dict(cls, data: Mapping) -> "EndpointSpec":
        return cls(
            id=data["id"],
            base_url=data["base_url"].rstrip("/"),
            model_name=data["model_name"],
            api_key_ref=data.get("api_key_ref"),
            timeout_ms=int(data.get("timeout_ms", 30_000)),
            wants_logprobs=bool(data.get("wants_logprobs", False)),
        )

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "base_url": self.base_url,
            "model_name": self.model_name,
            "api_key_ref": self.api_key_ref,
            "timeout_ms": self.timeout_ms,
            "wants_logprobs": self.wants_logprobs,
        }


@dataclass(frozen=True)
class DecodingParams:
    """Greedy decoding by default; max_tokens caps every completion."""

    temperature: float = 0.0
    max_tokens: int = 256

    @classmethod
    def from_dict(cls, data: Mapping) -> "DecodingParams":
        return cls(
            temperature=float(data.get("temperature", 0.0)),
            max_tokens=int(data.get("max_tokens", 256)),
        )


@dataclass(frozen=True)
class Generation:
    """One model's full response to one query."""

    model_id: str
    text: str
    logprobs: tuple[float, ...] | None
    latency_ms: float
    prompt_tokens: int
    completion_tokens: int


@dataclass(frozen=True)
class EnsembleResult:
    query_id: str
    generations: tuple[Generation, ...]


def _auth_headers(ep: EndpointSpec) -> dict[str, str]:
    if ep.api_key_ref:
        key = os.environ.get(ep.api_key_ref)
        if key:
            return {"Authorization": f"Bearer {key}"}
    return {}


def _post(ep: EndpointSpec, path: str, body: dict, client: httpx.Client | None) -> dict:
    timeout = httpx.Timeout(ep.timeout_ms / 1000.0)
    try:
        if client is None:
            with httpx.Client(timeout=timeout) as own:
                response = own.post(
                    f"{ep.base_url}{path}", json=body, headers=_auth_headers(ep)
                )
        else:
            response = client.post(
                f"{ep.base_url}{path}",
                json=body,
                headers=_auth_headers(ep),
                timeout=timeout,
            )
    except httpx.TimeoutException:
        raise Timeout(ep.id, ep.timeout_ms) from None
    except httpx.HTTPError as exc:
        raise HttpError(None, f"{ep.id}: {exc}") from exc
    if response.status_code != 200:
        raise HttpError(response.status_code, response.text[:200])
    try:
        return response.json()
    except ValueError as exc:
        raise MalformedResponse(f"{ep.id}: body is not JSON") from exc


def complete(
    ep: EndpointSpec,
    prompt: str,
    decoding: DecodingParams = DecodingParams(),
    *,
    require_logprobs: bool = False,
    client: httpx.Client | None = None,
) -> Generation:
    """Issue one chat-completion request and parse the reply.

    Log-probabilities are requested iff the endpoint wants them; a missing
    logprobs block is only an error when ``require_logprobs`` says the
    caller's policy cannot work without it.
    """
    body = {
        "model": ep.model_name,
        "messages": [{"role": "user", "content": prompt}],
        "temperature": decoding.temperature,
        "max_tokens": decoding.max_tokens,
        "logprobs": ep.wants_logprobs,
    }
    start = time.perf_counter()
    payload = _post(ep, "/v1/chat/completions", body, client)
    latency_ms = (time.perf_counter() - start) * 1000.0

    try:
        choice = payload["choices"][0]
        text = choice["message"]["content"]
        usage = payload["usage"]
        prompt_tokens = int(usage["prompt_tokens"])
        completion_tokens = int(usage["completion_tokens"])
    except (KeyError, IndexError, TypeError) as exc:
        raise MalformedResponse(f"{ep.id}: missing completion fields ({exc})") from exc
    if not isinstance(text, str):
        raise MalformedResponse(f"{ep.id}: message content is not a string")

    logprobs: tuple[float, ...] | None = None
    lp_block = choice.get("logprobs")
    if lp_block is not None:
        try:
            logprobs = tuple(float(entry["logprob"]) for entry in lp_block["content"])
        except (KeyError, TypeError, ValueError) as exc:
            raise MalformedResponse(f"{ep.id}: malformed logprobs block") from exc
        if len(logprobs) != completion_tokens:
            raise MalformedResponse(
                f"{ep.id}: {len(logprobs)} logprobs for {completion_tokens} tokens"
            )
    elif ep.wants_logprobs and require_logprobs:
        raise MissingLogprobs(f"{ep.id}: endpoint returned no logprobs")

    return Generation(
        model_id=ep.id,
        text=text,
        logprobs=logprobs,
        latency_ms=latency_ms,
        prompt_tokens=prompt_tokens,
        completion_tokens=completion_tokens,
    )


def embed(
    ep: EndpointSpec,
    texts: Sequence[str],
    *,
    client: httpx.Client | None = None,
) -> list[list[float]]:
    """Embed a batch of texts; vectors come back in input order, same dim."""
    if not texts:
        raise ValueError("embed needs at least one text")
    payload = _post(ep, "/v1/embeddings", {"model": ep.model_name, "input": list(texts)}, client)
    try:
        data = payload["data"]
        if any("index" in entry for entry in data):
            data = sorted(data, key=lambda entry: entry["index"])
        vectors = [[float(x) for x in entry["embedding"]] for entry in data]
    except (KeyError, TypeError, ValueError) as exc:
        raise MalformedResponse(f"{ep.id}: malformed embeddings body") from exc
    if len(vectors) != len(texts):
        raise MalformedResponse(f"{ep.id}: {len(vectors)} vectors for {len(texts)} texts")
    dims = {len(v) for v in vectors}
    if len(dims) > 1:
        raise DimensionMismatch(f"{ep.id}: ragged embedding dims {sorted(dims)}")
    return vectors


def fanout(
    eps: Sequence[EndpointSpec],
    prompt: str,
    decoding: DecodingParams = DecodingParams(),
    *,
    query_id: str = "",
    mode: str = "fail_fast",
    require_logprobs: bool = False,
    client: httpx.Client | None = None,
) -> EnsembleResult:
    """Query every ensemble endpoint concurrently.

    Results keep the endpoint order regardless of completion order. In
    fail_fast mode (the default, for deterministic evaluation) any member
    error fails the whole fan-out; degrade mode drops failed members as
    long as at least two survive. Ensemble latency accounting is the max
    over member latencies, since members run in parallel.
    """
    if not eps:
        raise ValueError("fanout needs at least one endpoint")
    if mode not in FANOUT_MODES:
        raise ValueError(f"mode must be one of {FANOUT_MODES}, got {mode!r}")

    results: list[Generation | Exception] = [None] * len(eps)  # type: ignore[list-item]

    def worker(index: int, ep: EndpointSpec) -> None:
        try:
            results[index] = complete(
                ep, prompt, decoding, require_logprobs=require_logprobs, client=client
            )
        except Exception as exc:  # propagated per failure mode below
            results[index] = exc

    with ThreadPoolExecutor(max_workers=len(eps)) as pool:
        for i, ep in enumerate(eps):
            pool.submit(worker, i, ep)

    failures = {
        eps[i].id: r for i, r in enumerate(results) if isinstance(r, Exception)
    }
    if failures:
        if mode == "fail_fast":
            first_id = next(ep.id for ep in eps if ep.id in failures)
            raise EnsembleMemberFailure(first_id, failures[first_id])
        survivors = [r for r in results if isinstance(r, Generation)]
        if len(survivors) < 2:
            raise InsufficientSurvivors(failures)
        return EnsembleResult(query_id=query_id, generations=tuple(survivors))
    return EnsembleResult(query_id=query_id, generations=tuple(results))  # type: ignore[arg-type]
