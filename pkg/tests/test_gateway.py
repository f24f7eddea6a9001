from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor

import pytest
from fastapi.testclient import TestClient

from cascadekit.clients import DecodingParams, EndpointSpec
from cascadekit.confidence import CalibrationStats, ChowVariant, ModelStats
from cascadekit.errors import ConfigError, UpstreamFailure
from cascadekit.evaluation import CostModel
from cascadekit.gateway import (
    CascadeConfig,
    CascadeGateway,
    build_app,
    calibrate_threshold,
    replay_decision,
)
from cascadekit.policy import PolicySpec
from cascadekit.trace import read_generations
from conftest import endpoint_for
from stubserver import StubModel
from test_evaluation import gen_row, make_trace


def semantic_config(server, replies, threshold=0.9, **kwargs):
    models = {mid: StubModel(reply=reply) for mid, reply in replies.items()}
    models["tgt"] = kwargs.pop("target_model", StubModel(reply="target answer"))
    server.models.update(models)
    ensemble = tuple(
        endpoint_for(server, mid) for mid in replies
    )
    return CascadeConfig(
        ensemble=ensemble,
        target=endpoint_for(server, "tgt"),
        policy=PolicySpec.from_dict(
            {"policy": "semantic", "metric": "rouge_l", "threshold": threshold}
        ),
        cost_model=CostModel(default_unit_cost=1.0),
        **kwargs,
    )


class TestConfigValidation:
    def ep(self, name):
        return EndpointSpec(id=name, base_url="http://x", model_name=name)

    def test_duplicate_ensemble_ids(self):
        with pytest.raises(ConfigError):
            CascadeConfig(
                ensemble=(self.ep("a"), self.ep("a")),
                target=self.ep("t"),
                policy=PolicySpec.from_dict({"policy": "semantic"}),
            )

    def test_target_collision(self):
        with pytest.raises(ConfigError):
            CascadeConfig(
                ensemble=(self.ep("a"), self.ep("b")),
                target=self.ep("a"),
                policy=PolicySpec.from_dict({"policy": "semantic"}),
            )

    def test_semantic_needs_two(self):
        with pytest.raises(ConfigError):
            CascadeConfig(
                ensemble=(self.ep("a"),),
                target=self.ep("t"),
                policy=PolicySpec.from_dict({"policy": "semantic"}),
            )

    def test_embedding_endpoint_iff_cosine_metric(self):
        with pytest.raises(ConfigError):
            CascadeConfig(
                ensemble=(self.ep("a"), self.ep("b")),
                target=self.ep("t"),
                policy=PolicySpec.from_dict(
                    {"policy": "semantic", "metric": "embedding_cosine"}
                ),
            )
        with pytest.raises(ConfigError):
            CascadeConfig(
                ensemble=(self.ep("a"), self.ep("b")),
                target=self.ep("t"),
                embedding=self.ep("emb"),
                policy=PolicySpec.from_dict({"policy": "semantic", "metric": "rouge_l"}),
            )

    def test_oracle_policies_rejected_live(self):
        with pytest.raises(ConfigError):
            CascadeConfig(
                ensemble=(self.ep("a"), self.ep("b")),
                target=self.ep("t"),
                policy=PolicySpec.from_dict({"policy": "oracle"}),
            )

    def test_token_policy_needs_stats(self):
        with pytest.raises(ConfigError):
            CascadeConfig(
                ensemble=(self.ep("a"),),
                target=self.ep("t"),
                policy=PolicySpec.from_dict({"policy": "token", "variant": {"kind": "avg"}}),
            )

    def test_from_file(self, tmp_path, stub_server):
        server = stub_server({})
        config_path = tmp_path / "c.json"
        config_path.write_text(
            json.dumps(
                {
                    "ensemble": [
                        {"id": "a", "base_url": server.base_url, "model_name": "a"},
                        {"id": "b", "base_url": server.base_url, "model_name": "b"},
                    ],
                    "target": {"id": "t", "base_url": server.base_url, "model_name": "t"},
                    "policy": {"policy": "semantic", "metric": "rouge_l", "threshold": 0.5},
                    "decoding": {"max_tokens": 64},
                    "cost_model": {"t": {"params": 70e9}, "default_unit_cost": 2.0},
                }
            )
        )
        cfg = CascadeConfig.from_file(config_path)
        assert cfg.decoding.max_tokens == 64
        assert cfg.cost_model.unit_cost("t") == 140e9
        assert cfg.cost_model.unit_cost("a") == 2.0


class TestRoute:
    def test_agreement_keeps_ensemble_answer(self, stub_server):
        server = stub_server({})
        cfg = semantic_config(
            server, {"a": "the answer", "b": "the answer", "c": "the answer"}
        )
        gateway = CascadeGateway(cfg)
        response = gateway.route("question")
        assert not response.deferred
        assert response.text == "the answer"
        assert response.selected_model == "a"
        assert response.deferral_score == 1.0
        assert server.hits("tgt") == 0
        assert response.target_latency_ms is None

    def test_disagreement_defers_to_target(self, stub_server):
        server = stub_server({})
        cfg = semantic_config(
            server,
            {"a": "alpha beta", "b": "gamma delta", "c": "epsilon zeta"},
            threshold=0.5,
        )
        gateway = CascadeGateway(cfg)
        response = gateway.route("question")
        assert response.deferred
        assert response.deferral_score == 0.0
        assert response.text == "target answer"
        assert server.hits("tgt") == 1
        assert response.target_latency_ms is not None

    def test_cost_estimate_includes_target_only_when_deferred(self, stub_server):
        server = stub_server({})
        kept = CascadeGateway(
            semantic_config(server, {"a": "same", "b": "same", "c": "same"})
        ).route("q")
        assert kept.est_cost > 0
        server2 = stub_server({})
        deferred = CascadeGateway(
            semantic_config(server2, {"a": "one two", "b": "three four", "c": "five six"}, threshold=0.5)
        ).route("q")
        assert deferred.est_cost > kept.est_cost

    def test_degrade_mode_flags_response(self, stub_server):
        server = stub_server({})
        server.models["slow"] = StubModel(reply="late", delay_ms=900)
        cfg = semantic_config(
            server, {"a": "same answer", "b": "same answer"}, fanout_mode="degrade"
        )
        slow = EndpointSpec(
            id="slow", base_url=server.base_url, model_name="slow", timeout_ms=120
        )
        cfg = CascadeConfig(
            ensemble=cfg.ensemble + (slow,),
            target=cfg.target,
            policy=cfg.policy,
            cost_model=cfg.cost_model,
            fanout_mode="degrade",
        )
        response = CascadeGateway(cfg).route("q")
        assert response.degraded
        assert set(response.per_output_scores) == {"a", "b"}

    def test_token_policy_routes_on_confidence(self, stub_server):
        server = stub_server(
            {
                "a": StubModel(reply="confident", logprobs=[-0.1]),
                "tgt": StubModel(reply="target answer"),
            }
        )
        stats = CalibrationStats(
            ChowVariant("avg"), {"a": ModelStats(-2.0, 1.0, 10)}
        )
        cfg = CascadeConfig(
            ensemble=(endpoint_for(server, "a", wants_logprobs=True),),
            target=endpoint_for(server, "tgt"),
            policy=PolicySpec.from_dict(
                {"policy": "token", "variant": {"kind": "avg"}, "threshold": 0.0}
            ),
            stats=stats,
        )
        response = CascadeGateway(cfg).route("q")
        # z = (-0.1 - (-2)) / 1 = 1.9 >= 0: keep
        assert not response.deferred
        assert response.deferral_score == pytest.approx(1.9, abs=1e-12)

    def test_target_down_raises_upstream_failure(self, stub_server):
        server = stub_server({})
        cfg = semantic_config(
            server,
            {"a": "one two", "b": "three four", "c": "five six"},
            threshold=0.5,
            target_model=StubModel(fail_status=503),
        )
        with pytest.raises(UpstreamFailure) as err:
            CascadeGateway(cfg).route("q")
        assert err.value.model_id == "tgt"

    def test_record_and_replay_matches_live(self, stub_server, tmp_path):
        server = stub_server({})
        record_path = tmp_path / "live.jsonl"
        cfg = semantic_config(
            server,
            {
                "a": "shared phrase here",
                "b": "shared phrase here",
                "c": "totally different words",
            },
            threshold=0.95,
            record_path=record_path,
        )
        gateway = CascadeGateway(cfg)
        live = gateway.route("q", query_id="req-1")
        records = [r for r in read_generations(record_path) if r.model_id != "tgt"]
        replayed = replay_decision(cfg.policy, records)
        assert replayed.deferred == live.deferred
        assert replayed.deferral_score == live.deferral_score
        assert records[replayed.selected_index].model_id == live.selected_model


class TestHttpSurface:
    def make_client(self, stub_server, **kwargs):
        server = stub_server({})
        cfg = semantic_config(
            server, {"a": "same answer", "b": "same answer", "c": "same answer"}, **kwargs
        )
        return server, TestClient(build_app(CascadeGateway(cfg)))

    def test_healthz(self, stub_server):
        _, client = self.make_client(stub_server)
        response = client.get("/healthz")
        assert response.status_code == 200
        assert response.json()["status"] == "ok"

    def test_config_redacts_key_refs(self, stub_server):
        server = stub_server({})
        cfg = semantic_config(server, {"a": "x", "b": "x"})
        cfg = CascadeConfig(
            ensemble=tuple(
                EndpointSpec(
                    id=ep.id,
                    base_url=ep.base_url,
                    model_name=ep.model_name,
                    api_key_ref="SECRET_ENV",
                )
                for ep in cfg.ensemble
            ),
            target=cfg.target,
            policy=cfg.policy,
        )
        client = TestClient(build_app(CascadeGateway(cfg)))
        body = client.get("/v1/cascade/config").json()
        assert all(ep["api_key_ref"] == "***" for ep in body["ensemble"])
        assert body["policy"]["policy"] == "semantic"

    def test_completions_roundtrip(self, stub_server):
        server, client = self.make_client(stub_server)
        response = client.post("/v1/cascade/completions", json={"prompt": "hello"})
        assert response.status_code == 200
        body = response.json()
        assert body["text"] == "same answer"
        assert body["cascade"]["deferred"] is False
        assert set(body["cascade"]["scores"]) == {"a", "b", "c"}
        assert body["cascade"]["latency_ms"]["ensemble"] > 0

    def test_malformed_bodies_return_400(self, stub_server):
        _, client = self.make_client(stub_server)
        assert client.post(
            "/v1/cascade/completions", content=b"{not json",
            headers={"Content-Type": "application/json"},
        ).status_code == 400
        assert client.post("/v1/cascade/completions", json={}).status_code == 400
        assert client.post(
            "/v1/cascade/completions", json={"prompt": "x", "max_tokens": -1}
        ).status_code == 400

    def test_upstream_failure_maps_to_502(self, stub_server):
        server = stub_server({})
        cfg = semantic_config(
            server,
            {"a": "one two", "b": "three four", "c": "five six"},
            threshold=0.5,
            target_model=StubModel(fail_status=500),
        )
        client = TestClient(build_app(CascadeGateway(cfg)))
        response = client.post("/v1/cascade/completions", json={"prompt": "q"})
        assert response.status_code == 502
        assert response.json()["model_id"] == "tgt"

    def test_ensemble_member_failure_maps_to_502(self, stub_server):
        server = stub_server({})
        server.models["b"] = StubModel(fail_status=500)
        cfg = semantic_config(server, {"a": "x y", "c": "x y"})
        cfg = CascadeConfig(
            ensemble=(
                cfg.ensemble[0],
                endpoint_for(server, "b"),
                cfg.ensemble[1],
            ),
            target=cfg.target,
            policy=cfg.policy,
        )
        client = TestClient(build_app(CascadeGateway(cfg)))
        response = client.post("/v1/cascade/completions", json={"prompt": "q"})
        assert response.status_code == 502
        assert response.json()["model_id"] == "b"

    def test_concurrent_identical_requests_identical_modulo_latency(self, stub_server):
        _, client = self.make_client(stub_server)

        def call(_):
            return client.post("/v1/cascade/completions", json={"prompt": "same"}).json()

        with ThreadPoolExecutor(max_workers=8) as pool:
            bodies = list(pool.map(call, range(16)))

        def strip(body):
            cascade = dict(body["cascade"])
            cascade.pop("latency_ms")
            cascade.pop("est_cost")  # token counts are deterministic but latency is not
            cascade.pop("query_id")
            return (body["text"], json.dumps(cascade, sort_keys=True))

        assert len({strip(b) for b in bodies}) == 1


class TestCalibrateThreshold:
    def ladder_trace(self, tmp_path):
        """Oracle scores k/10 for k = 1..10: rouge_l against a 10-token reference."""
        ref_tokens = [f"r{i}" for i in range(10)]
        examples = []
        records = []
        for k in range(1, 11):
            eid = f"e{k:02d}"
            examples.append(
                {"id": eid, "references": [" ".join(ref_tokens)], "task_metric": "rouge_l"}
            )
            text = " ".join(ref_tokens[:k] + [f"f{k}x{i}" for i in range(10 - k)])
            records.append(gen_row(eid, "m1", text))
            records.append(gen_row(eid, "tgt", "zz"))
        return make_trace(tmp_path, examples, records, ["m1"], "tgt")

    def test_quantile_with_linear_interpolation(self, tmp_path):
        trace = self.ladder_trace(tmp_path)
        policy = PolicySpec.from_dict({"policy": "oracle"})
        tau = calibrate_threshold(trace, policy, 0.3)
        # scores are 0.1..1.0; the 0.3 empirical quantile interpolates to 0.37
        assert tau == pytest.approx(0.37, abs=1e-9)
        from cascadekit.evaluation import score_trace

        scores = [o.score for o in score_trace(trace, policy)]
        assert sum(1 for s in scores if s < tau) == 3

    def test_rate_zero_defers_nothing(self, tmp_path):
        trace = self.ladder_trace(tmp_path)
        policy = PolicySpec.from_dict({"policy": "oracle"})
        tau = calibrate_threshold(trace, policy, 0.0)
        from cascadekit.evaluation import score_trace

        scores = [o.score for o in score_trace(trace, policy)]
        assert tau <= min(scores)
        assert sum(1 for s in scores if s < tau) == 0

    def test_rate_one_defers_all_but_max_ties(self, tmp_path):
        trace = self.ladder_trace(tmp_path)
        policy = PolicySpec.from_dict({"policy": "oracle"})
        tau = calibrate_threshold(trace, policy, 1.0)
        from cascadekit.evaluation import score_trace

        scores = [o.score for o in score_trace(trace, policy)]
        assert tau == max(scores)
        assert sum(1 for s in scores if s < tau) == len(scores) - 1

    def test_monotone_in_rate(self, tmp_path):
        trace = self.ladder_trace(tmp_path)
        policy = PolicySpec.from_dict({"policy": "oracle"})
        taus = [calibrate_threshold(trace, policy, r / 10) for r in range(11)]
        assert taus == sorted(taus)
