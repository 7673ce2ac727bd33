from __future__ import annotations

import json
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from urllib.parse import parse_qs, urlparse

import pytest
import yaml

FIXTURES = Path(__file__).parent / "fixtures"
DATA = Path(__file__).parent.parent / "src" / "ecoharness" / "data"


class FixtureServer:
    """Tiny HTTP server answering from a path -> (status, body) table."""

    def __init__(self):
        self.routes: dict[str, tuple[int, str]] = {}
        self.requests: list[tuple[str, dict]] = []
        server = self

        class Handler(BaseHTTPRequestHandler):
            def do_GET(self):  # noqa: N802
                url = urlparse(self.path)
                server.requests.append((url.path, parse_qs(url.query)))
                status, body = server.routes.get(url.path, (404, "not found"))
                data = body.encode()
                self.send_response(status)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(data)))
                self.end_headers()
                self.wfile.write(data)

            def log_message(self, *args):
                pass

        self.httpd = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
        self.url = f"http://127.0.0.1:{self.httpd.server_address[1]}"
        self.thread = threading.Thread(target=self.httpd.serve_forever, daemon=True)
        self.thread.start()

    def route(self, path, body, status=200):
        if not isinstance(body, str):
            body = json.dumps(body)
        self.routes[path] = (status, body)

    def close(self):
        self.httpd.shutdown()
        self.httpd.server_close()


@pytest.fixture
def http_fixture():
    srv = FixtureServer()
    yield srv
    srv.close()


@pytest.fixture
def fixture_path():
    return lambda name: FIXTURES / name


@pytest.fixture
def topology_doc():
    return yaml.safe_load((DATA / "topology.yaml").read_text(encoding="utf-8"))


def small_topology(**over):
    """One-node, one-service topology used across simulator and runner tests."""
    doc = {
        "nodes": [{"id": "n1", "cpu_capacity": 4000, "mem_capacity": 8 * 2**30, "p_idle": 40, "p_max": 120},
                  {"id": "lg", "cpu_capacity": 1000, "mem_capacity": 2**30, "p_idle": 10, "p_max": 20}],
        "loadgen_node": "lg",
        "services": [{
            "name": "web", "per_request_cpu_ms": 50, "service_time": 0.05, "mem_floor": 64 * 2**20,
            "resources": {"cpu_limit": 1000, "mem_limit": 512 * 2**20, "replicas_min": 1, "replicas_max": 1},
        }],
        "platform_pods": [{"name": "proxy", "namespace": "kube-system", "node": "n1", "cpu_millicores": 10,
                           "mem_bytes": 2**25, "cpu_limit": 100, "mem_limit": 2**27}],
    }
    doc.update(over)
    return doc


def write_plan(tmp_path: Path, **over) -> Path:
    """A small two-variant sim plan next to a copy of the example topology."""
    (tmp_path / "topology.yaml").write_text((DATA / "topology.yaml").read_text(encoding="utf-8"),
                                            encoding="utf-8")
    plan = {
        "name": "t",
        "seed": 7,
        "repetitions": 1,
        "settle": 10,
        "variants": [
            {"name": "base", "source": ".", "deployment_descriptor": "topology.yaml"},
            {"name": "lean", "source": ".", "deployment_descriptor": "topology.yaml",
             "patches": {"services.0.per_request_cpu_ms": 14}},
        ],
        "workloads": [{"shape": "stress", "duration": 30, "peak_users": 10}],
        "scenario": [{"path": "/", "weight": 2}, {"path": "/catalog"}],
    }
    plan.update(over)
    p = tmp_path / "plan.yaml"
    p.write_text(yaml.safe_dump(plan, sort_keys=False), encoding="utf-8")
    return p


def timeline(replica, service="web", layer="service", n=10, cpu=None, mem=None, watts=None, live=None,
             cpu_limit=1000.0, mem_limit=float(2**30), node="n1", deploy_kind="pod"):
    """ResourceTimeline from scalars or arrays; scalars are broadcast over ``n`` seconds."""
    import numpy as np

    from ecoharness.aggregator import ResourceTimeline
    from ecoharness.model import LayerTag

    def arr(v):
        if v is None:
            return np.full(n, np.nan)
        return np.broadcast_to(np.asarray(v, dtype=float), (n,)).copy()

    return ResourceTimeline(replica, service, LayerTag(layer), node, 0.0, arr(cpu), arr(mem), arr(watts),
                            np.ones(n, bool) if live is None else np.asarray(live, bool),
                            deploy_kind=deploy_kind, cpu_limit=cpu_limit, mem_limit=mem_limit)
