from __future__ import annotations

import pytest
from hypothesis import HealthCheck, settings

from gradsync.protocol import CollectiveKind, Request, Response, TensorMeta, merge_requests

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def tensor(name: str, elements: int = 1024, element_bytes: int = 2) -> TensorMeta:
    return TensorMeta.from_shape(name, (elements,), element_bytes)


def response(t: TensorMeta, world_size: int = 2, kind=CollectiveKind.ALLREDUCE) -> Response:
    return merge_requests([Request(r, t, kind) for r in range(world_size)], world_size)


@pytest.fixture
def make_tensor():
    return tensor


@pytest.fixture
def make_response():
    return response


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
