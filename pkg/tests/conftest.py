from __future__ import annotations

import sys
from pathlib import Path

import pytest

# Make the sibling oracle/stub helpers importable as plain modules.
sys.path.insert(0, str(Path(__file__).parent))

from cascadekit.clients import EndpointSpec
from stubserver import StubModel, StubServer


@pytest.fixture
def stub_server():
    """Factory: start a stub upstream with the given models, stop on teardown."""
    servers: list[StubServer] = []

    def start(models: dict[str, StubModel], **kwargs) -> StubServer:
        server = StubServer(models=models, **kwargs).__enter__()
        servers.append(server)
        return server

    yield start
    for server in servers:
        server.__exit__(None, None, None)


def endpoint_for(server: StubServer, model_id: str, *, wants_logprobs: bool = False,
                 timeout_ms: int = 10_000) -> EndpointSpec:
    return EndpointSpec(
        id=model_id,
        base_url=server.base_url,
        model_name=model_id,
        timeout_ms=timeout_ms,
        wants_logprobs=wants_logprobs,
    )
