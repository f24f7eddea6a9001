"""Live HTTP cascade gateway and threshold calibration.

The gateway fans a prompt out to the ensemble, runs the configured policy
on the outputs, and either answers from the ensemble or defers to the
target endpoint. The same policy code path also runs offline over recorded
traces, so a recorded live run replays to bit-identical decisions.
"""

from __future__ import annotations

import json
import threading
import uuid
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Mapping, Sequence

import httpx
import numpy as np
from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse

from . import __version__
from .clients import (
    DecodingParams,
    EndpointSpec,
    FANOUT_MODES,
    Generation,
    complete,
    embed,
    fanout,
)
from .confidence import CalibrationStats
from .errors import (
    CascadeError,
    ConfigError,
    EmptyTrace,
    EnsembleMemberFailure,
    InsufficientSurvivors,
    UpstreamFailure,
)
from .evaluation import CostModel, Embedder, score_trace
from .policy import Decision, PolicySpec, apply_policy
from .trace import GenerationRecord, Trace


@dataclass(frozen=True)
class CascadeConfig:
    """Full gateway configuration, loaded from one JSON file.

    Per-request overrides are limited to decoding parameters; policy and
    threshold stay fixed for the life of the process so responses stay
    auditable against the config.
    """

    ensemble: tuple[EndpointSpec, ...]
    target: EndpointSpec
    policy: PolicySpec
    embedding: EndpointSpec | None = None
    cost_model: CostModel = None  # type: ignore[assignment]
    decoding: DecodingParams = DecodingParams()
    fanout_mode: str = "fail_fast"
    record_path: Path | None = None
    stats: CalibrationStats | None = None

    def __post_init__(self) -> None:
        if not self.ensemble:
            raise ConfigError("config needs at least one ensemble endpoint")
        ids = [ep.id for ep in self.ensemble]
        if len(set(ids)) != len(ids):
            raise ConfigError(f"ensemble ids must be distinct, got {ids}")
        if self.target.id in ids:
            raise ConfigError(f"target id {self.target.id!r} collides with the ensemble")
        if self.fanout_mode not in FANOUT_MODES:
            raise ConfigError(f"fanout_mode must be one of {FANOUT_MODES}")
        if self.policy.policy in ("oracle", "partial_oracle"):
            raise ConfigError("oracle policies need references and cannot serve live traffic")
        if self.policy.policy == "semantic" and len(self.ensemble) < 2:
            raise ConfigError("semantic policy needs an ensemble of at least 2")
        if self.policy.needs_embeddings and self.embedding is None:
            raise ConfigError("embedding-cosine metric needs an embedding endpoint")
        if not self.policy.needs_embeddings and self.embedding is not None:
            raise ConfigError("embedding endpoint configured but the metric never uses it")
        if self.policy.policy == "token" and self.policy.normalize and self.stats is None:
            raise ConfigError("token policy needs calibration stats (policy.stats path)")
        if self.cost_model is None:
            object.__setattr__(self, "cost_model", CostModel(default_unit_cost=1.0))

    @classmethod
    def from_dict(cls, data: Mapping, base_dir: Path | None = None) -> "CascadeConfig":
        base_dir = base_dir or Path.cwd()
        policy = PolicySpec.from_dict(data["policy"])
        stats = None
        if policy.stats_path:
            stats = CalibrationStats.load(base_dir / policy.stats_path)
        record = data.get("record", {})
        record_path = record.get("path") if isinstance(record, Mapping) else None
        embedding = data.get("embedding")
        return cls(
            ensemble=tuple(EndpointSpec.from_dict(e) for e in data["ensemble"]),
            target=EndpointSpec.from_dict(data["target"]),
            policy=policy,
            embedding=EndpointSpec.from_dict(embedding) if embedding else None,
            cost_model=CostModel.from_dict(data.get("cost_model")),
            decoding=DecodingParams.from_dict(data.get("decoding", {})),
            fanout_mode=data.get("fanout_mode", "fail_fast"),
            record_path=(base_dir / record_path) if record_path else None,
            stats=stats,
        )

    @classmethod
    def from_file(cls, path: str | Path) -> "CascadeConfig":
        path = Path(path)
        return cls.from_dict(
            json.loads(path.read_text(encoding="utf-8")), base_dir=path.parent
        )

    def redacted(self) -> dict:
        """Config as served over HTTP; key references are masked."""

        def scrub(ep: EndpointSpec) -> dict:
            d = ep.to_dict()
            if d.get("api_key_ref"):
                d["api_key_ref"] = "***"
            return d

        return {
            "ensemble": [scrub(ep) for ep in self.ensemble],
            "target": scrub(self.target),
            "embedding": scrub(self.embedding) if self.embedding else None,
            "policy": self.policy.to_dict(),
            "fanout_mode": self.fanout_mode,
            "decoding": {
                "temperature": self.decoding.temperature,
                "max_tokens": self.decoding.max_tokens,
            },
            "recording": self.record_path is not None,
        }


@dataclass(frozen=True)
class RouteResponse:
    """The cascade's answer plus full decision diagnostics."""

    text: str
    deferred: bool
    deferral_score: float
    selected_model: str
    per_output_scores: dict[str, float]
    ensemble_latency_ms: float
    target_latency_ms: float | None
    est_cost: float
    degraded: bool
    query_id: str

    def to_dict(self) -> dict:
        return {
            "text": self.text,
            "cascade": {
                "deferred": self.deferred,
                "score": self.deferral_score,
                "selected_model": self.selected_model,
                "scores": self.per_output_scores,
                "latency_ms": {
                    "ensemble": self.ensemble_latency_ms,
                    "target": self.target_latency_ms,
                },
                "est_cost": self.est_cost,
                "degraded": self.degraded,
                "query_id": self.query_id,
            },
        }


class CascadeGateway:
    """Stateful wrapper holding the HTTP client and optional trace recorder."""

    def __init__(self, config: CascadeConfig):
        self.config = config
        self._client = httpx.Client()
        self._record_lock = threading.Lock()
        if config.record_path is not None:
            config.record_path.parent.mkdir(parents=True, exist_ok=True)

    def close(self) -> None:
        self._client.close()

    def _record(self, query_id: str, generations: Sequence[Generation]) -> None:
        if self.config.record_path is None:
            return
        lines = [
            json.dumps(
                GenerationRecord.from_generation(query_id, g).to_dict(),
                ensure_ascii=False,
            )
            for g in generations
        ]
        with self._record_lock:
            with open(self.config.record_path, "a", encoding="utf-8") as handle:
                handle.write("".join(line + "\n" for line in lines))
                handle.flush()

    def route(
        self,
        prompt: str,
        *,
        max_tokens: int | None = None,
        temperature: float | None = None,
        query_id: str | None = None,
    ) -> RouteResponse:
        """Run the full deferral protocol for one prompt."""
        cfg = self.config
        query_id = query_id or uuid.uuid4().hex
        decoding = cfg.decoding
        if max_tokens is not None:
            decoding = replace(decoding, max_tokens=max_tokens)
        if temperature is not None:
            decoding = replace(decoding, temperature=temperature)

        need_logprobs = cfg.policy.policy == "token"
        result = fanout(
            cfg.ensemble,
            prompt,
            decoding,
            query_id=query_id,
            mode=cfg.fanout_mode,
            require_logprobs=need_logprobs,
            client=self._client,
        )
        generations = list(result.generations)
        texts = [g.text for g in generations]
        model_ids = [g.model_id for g in generations]
        embeddings = None
        if cfg.policy.needs_embeddings:
            try:
                embeddings = embed(cfg.embedding, texts, client=self._client)
            except CascadeError as exc:
                raise UpstreamFailure(cfg.embedding.id, exc) from exc
        decision = apply_policy(
            cfg.policy,
            model_ids,
            texts,
            [g.logprobs for g in generations],
            stats=cfg.stats,
            embeddings=embeddings,
        )

        ensemble_latency = max(g.latency_ms for g in generations)
        est_cost = sum(
            cfg.cost_model.query_cost(g.model_id, g.prompt_tokens, g.completion_tokens)
            for g in generations
        )
        target_gen: Generation | None = None
        if decision.deferred:
            try:
                target_gen = complete(cfg.target, prompt, decoding, client=self._client)
            except CascadeError as exc:
                raise UpstreamFailure(cfg.target.id, exc) from exc
            est_cost += cfg.cost_model.query_cost(
                target_gen.model_id, target_gen.prompt_tokens, target_gen.completion_tokens
            )

        self._record(query_id, generations + ([target_gen] if target_gen else []))
        return RouteResponse(
            text=target_gen.text if target_gen is not None else texts[decision.selected_index],
            deferred=decision.deferred,
            deferral_score=decision.deferral_score,
            selected_model=model_ids[decision.selected_index],
            per_output_scores=dict(zip(model_ids, decision.per_output_scores)),
            ensemble_latency_ms=ensemble_latency,
            target_latency_ms=target_gen.latency_ms if target_gen is not None else None,
            est_cost=est_cost,
            degraded=len(generations) < len(cfg.ensemble),
            query_id=query_id,
        )


def replay_decision(
    policy: PolicySpec,
    records: Sequence[GenerationRecord],
    *,
    stats: CalibrationStats | None = None,
    embeddings: Sequence[Sequence[float]] | None = None,
) -> Decision:
    """Re-run a policy over recorded ensemble generations.

    Feeding back the records a live route appended must reproduce the live
    decision exactly; any target-model record is excluded by the caller
    since the decision never saw it.
    """
    return apply_policy(
        policy,
        [r.model_id for r in records],
        [r.text for r in records],
        [r.logprobs for r in records],
        stats=stats,
        embeddings=embeddings,
    )


def calibrate_threshold(
    trace: Trace,
    policy: PolicySpec,
    rate: float,
    *,
    stats: CalibrationStats | None = None,
    embedder: Embedder | None = None,
) -> float:
    """Pick the score threshold that defers about ``rate`` of a trace.

    Returns the linear-interpolation quantile of the per-example deferral
    scores at ``rate``. With strict less-than deferral, rate=0 defers
    nothing; rate=1 returns the max score, which defers everything except
    exact ties with the max (defer-all is not representable under a strict
    comparison).
    """
    if not 0.0 <= rate <= 1.0:
        raise ValueError(f"rate must be in [0, 1], got {rate}")
    outcomes = score_trace(trace, policy, stats=stats, embedder=embedder)
    if not outcomes:
        raise EmptyTrace("cannot calibrate on an empty trace")
    scores = np.asarray([o.score for o in outcomes], dtype=float)
    return float(np.quantile(scores, rate))


def build_app(gateway: CascadeGateway) -> FastAPI:
    """FastAPI app exposing the routing endpoint plus health and config."""
    app = FastAPI(title="cascadekit gateway", version=__version__)

    @app.get("/healthz")
    def healthz() -> dict:
        return {"status": "ok", "version": __version__}

    @app.get("/v1/cascade/config")
    def config() -> dict:
        return gateway.config.redacted()

    @app.post("/v1/cascade/completions")
    async def completions(request: Request) -> JSONResponse:
        try:
            body = await request.json()
        except Exception:
            return JSONResponse({"error": "body must be JSON"}, status_code=400)
        if not isinstance(body, dict) or not isinstance(body.get("prompt"), str):
            return JSONResponse({"error": "body needs a string 'prompt'"}, status_code=400)
        max_tokens = body.get("max_tokens")
        temperature = body.get("temperature")
        if max_tokens is not None and (not isinstance(max_tokens, int) or max_tokens <= 0):
            return JSONResponse({"error": "'max_tokens' must be a positive int"}, status_code=400)
        if temperature is not None and not isinstance(temperature, (int, float)):
            return JSONResponse({"error": "'temperature' must be a number"}, status_code=400)
        try:
            response = gateway.route(
                body["prompt"], max_tokens=max_tokens, temperature=temperature
            )
        except InsufficientSurvivors as exc:
            return JSONResponse({"error": str(exc)}, status_code=503)
        except EnsembleMemberFailure as exc:
            return JSONResponse(
                {"error": str(exc), "model_id": exc.endpoint_id}, status_code=502
            )
        except UpstreamFailure as exc:
            return JSONResponse(
                {"error": str(exc), "model_id": exc.model_id}, status_code=502
            )
        except CascadeError as exc:
            return JSONResponse({"error": str(exc)}, status_code=500)
        return JSONResponse(response.to_dict())

    return app


def serve(config: CascadeConfig, bind: str = "127.0.0.1:8080") -> None:
    """Run the gateway until interrupted."""
    import uvicorn

    host, _, port = bind.rpartition(":")
    app = build_app(CascadeGateway(config))
    uvicorn.run(app, host=host or "127.0.0.1", port=int(port))
