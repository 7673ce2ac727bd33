"""Polling sources that turn external measurement systems into samples.

Every backend is reached through :func:`poll`, which never raises for an
unreachable backend: it returns a ``failed`` batch with a diagnostic so the
runner can decide whether the run is still usable.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
import queue
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np
import requests

from .model import (
    JOULES_PER_WH,
    CollectorConfig,
    LayerTag,
    MeasurementSample,
    QuerySpec,
    SampleKind,
)

log = logging.getLogger(__name__)

TRACE_HEADER = ["timestamp", "layer", "source", "node", "pod", "kind", "value", "unit"]
UNATTRIBUTED = "unattributed"


class CollectorError(RuntimeError):
    pass


class TsdbError(CollectorError):
    """HTTP or decoding failure talking to the time-series database."""

    def __init__(self, message, status=None, body=""):
        super().__init__(message)
        self.status = status
        self.body = body[:500] if body else ""


@dataclass(frozen=True)
class CollectorBatch:
    collector_id: str
    polled_at: float
    window: tuple[float, float]
    samples: tuple[MeasurementSample, ...]
    status: str  # ok | partial | failed
    diagnostic: str = ""

    def __post_init__(self):
        if self.status == "failed" and (self.samples or not self.diagnostic):
            raise ValueError("failed batches carry zero samples and a diagnostic")


# --- units ------------------------------------------------------------------

_WATT_UNITS = {"w": 1.0, "watt": 1.0, "watts": 1.0, "mw": 1e-3, "kw": 1e3, "": 1.0}
_ENERGY_UNITS = {"j": 1.0, "ws": 1.0, "joule": 1.0, "joules": 1.0, "wh": JOULES_PER_WH,
                 "kwh": JOULES_PER_WH * 1000, "mj": 1e-3, "uj": 1e-6, "": 1.0}
_MEM_UNITS = {"b": 1, "bytes": 1, "": 1, "kib": 2**10, "mib": 2**20, "gib": 2**30,
              "kb": 2**10, "mb": 2**20, "gb": 2**30}
_CPU_UNITS = {"m": 1.0, "millicores": 1.0, "mcpu": 1.0, "": 1.0, "cores": 1000.0, "vcpu": 1000.0}

CANONICAL_UNIT = {
    SampleKind.WATTS: "W",
    SampleKind.ENERGY_JOULES: "J",
    SampleKind.MEM_BYTES: "B",
    SampleKind.CPU_MILLICORES: "m",
    SampleKind.CPU_FRACTION: "1",
    SampleKind.REQUEST_COUNT: "1",
}


def normalize_value(value: float, unit: str, kind: SampleKind) -> tuple[float, str]:
    """Convert a reading to the canonical unit for its kind (watts, joules,
    bytes, millicores, fraction). Custom samples keep their unit."""
    kind = SampleKind(kind)
    u = (unit or "").strip().lower()
    if kind is SampleKind.CUSTOM:
        return float(value), unit
    if kind is SampleKind.REQUEST_COUNT:
        return float(value), "1"
    table = {
        SampleKind.WATTS: _WATT_UNITS,
        SampleKind.ENERGY_JOULES: _ENERGY_UNITS,
        SampleKind.MEM_BYTES: _MEM_UNITS,
        SampleKind.CPU_MILLICORES: _CPU_UNITS,
    }.get(kind)
    if kind is SampleKind.CPU_FRACTION:
        if u in ("%", "percent"):
            return float(value) / 100.0, "1"
        if u in ("", "1", "fraction"):
            return float(value), "1"
        raise CollectorError(f"unknown unit {unit!r} for {kind.value}")
    if u == CANONICAL_UNIT[kind].lower():
        return float(value), CANONICAL_UNIT[kind]
    if u not in table:
        raise CollectorError(f"unknown unit {unit!r} for {kind.value}")
    return float(value) * table[u], CANONICAL_UNIT[kind]


# --- trace CSV ---------------------------------------------------------------


def format_number(v: float) -> str:
    """Shortest round-tripping decimal; integral values without a fraction."""
    v = float(v)
    if v.is_integer() and abs(v) < 1e15:
        return str(int(v))
    r = repr(v)
    if "e" in r or "E" in r:
        from decimal import Decimal

        r = format(Decimal(r), "f")
    return r


def write_trace(samples: Iterable[MeasurementSample], fh, header=True):
    w = csv.writer(fh, lineterminator="\n")
    if header:
        w.writerow(TRACE_HEADER)
    for s in samples:
        w.writerow([
            format_number(s.timestamp),
            s.layer.value,
            s.source,
            s.node,
            s.pod or "",
            s.kind.value,
            format_number(s.value),
            s.unit,
        ])


def trace_to_string(samples) -> str:
    buf = io.StringIO()
    write_trace(samples, buf)
    return buf.getvalue()


def read_trace(path_or_fh) -> list[MeasurementSample]:
    if isinstance(path_or_fh, (str, os.PathLike)):
        with open(path_or_fh, encoding="utf-8", newline="") as fh:
            return read_trace(fh)
    reader = csv.reader(path_or_fh)
    try:
        header = next(reader)
    except StopIteration:
        return []
    if header != TRACE_HEADER:
        raise CollectorError(f"unexpected trace header {header!r}")
    out = []
    for lineno, row in enumerate(reader, start=2):
        if not row:
            continue
        if len(row) != len(TRACE_HEADER):
            raise CollectorError(f"trace line {lineno}: expected {len(TRACE_HEADER)} fields")
        ts, layer, source, node, pod, kind, value, unit = row
        out.append(MeasurementSample(float(ts), LayerTag(layer), source, node, pod or None,
                                     SampleKind(kind), float(value), unit))
    return out


# --- time-series database ----------------------------------------------------


def tsdb_range_query(endpoint: str, query: str, window, step: float = 1.0, *,
                     session=None, timeout: float = 10.0):
    """Run a range query against ``<endpoint>/api/v1/query_range``.

    Returns ``[(labels, [(timestamp, value), ...]), ...]``. Values that do not
    parse as finite numbers come back as ``nan`` so callers can count them.
    """
    t0, t1 = window
    if step < 1:
        raise ValueError("step ≥ 1 s")
    url = endpoint.rstrip("/") + "/api/v1/query_range"
    params = {"query": query, "start": format_number(t0), "end": format_number(t1),
              "step": format_number(step)}
    http = session or requests
    try:
        resp = http.get(url, params=params, timeout=timeout)
    except requests.RequestException as exc:
        raise TsdbError(f"tsdb unreachable: {exc}") from exc
    body = resp.text
    if resp.status_code != 200:
        raise TsdbError(f"tsdb HTTP {resp.status_code}", status=resp.status_code, body=body)
    try:
        doc = json.loads(body)
        if doc.get("status") != "success":
            raise TsdbError(f"tsdb error: {doc.get('error', 'status != success')}",
                            status=resp.status_code, body=body)
        data = doc["data"]
        if data.get("resultType") != "matrix":
            raise TsdbError(f"expected matrix result, got {data.get('resultType')!r}",
                            status=resp.status_code, body=body)
        result = []
        for series in data["result"]:
            labels = dict(series.get("metric", {}))
            points = []
            for ts, raw in series.get("values", []):
                try:
                    v = float(raw)
                except (TypeError, ValueError):
                    v = math.nan
                points.append((float(ts), v))
            result.append((labels, points))
        return result
    except TsdbError:
        raise
    except (ValueError, KeyError, TypeError, AttributeError) as exc:
        raise TsdbError(f"malformed tsdb body: {exc}", status=resp.status_code, body=body) from exc


# --- polling -----------------------------------------------------------------


def _in_window(ts, t0, t1):
    return t0 <= ts < t1


def _poll_trace(cfg, t0, t1):
    samples = read_trace(cfg.endpoint)
    wanted = {(q.layer, q.kind) for q in cfg.queries}
    out = []
    for s in samples:
        if not _in_window(s.timestamp, t0, t1):
            continue
        if wanted and (s.layer, s.kind) not in wanted:
            continue
        out.append(s)
    return out, []


def _sample_from_point(cfg, q: QuerySpec, labels, ts, v):
    opts = cfg.options
    pod = labels.get(opts.get("pod_label", "pod")) or None
    node = labels.get(opts.get("node_label", "node")) or labels.get("instance", "") or ""
    value, unit = normalize_value(v, q.unit, q.kind)
    return MeasurementSample(ts, q.layer, cfg.id, node, pod, q.kind, value, unit)


def _poll_tsdb(cfg, t0, t1, session):
    step = float(cfg.options.get("step", 1.0))
    out, problems = [], []
    for q in cfg.queries:
        try:
            series = tsdb_range_query(cfg.endpoint, q.query, (t0, t1), step, session=session,
                                      timeout=float(cfg.options.get("timeout", 10.0)))
        except TsdbError as exc:
            problems.append(f"{q.query}: {exc}")
            continue
        dropped = 0
        for labels, points in series:
            for ts, v in points:
                if not _in_window(ts, t0, t1):
                    continue
                if not math.isfinite(v):
                    dropped += 1
                    continue
                out.append(_sample_from_point(cfg, q, labels, ts, v))
        if dropped:
            problems.append(f"{q.query}: dropped {dropped} non-finite values")
    return out, problems


def _parse_k8s_time(text):
    from datetime import datetime

    return datetime.fromisoformat(text.replace("Z", "+00:00")).timestamp()


def _poll_cluster_metrics(cfg, t0, t1, session):
    http = session or requests
    try:
        resp = http.get(cfg.endpoint, timeout=float(cfg.options.get("timeout", 10.0)))
        resp.raise_for_status()
        doc = resp.json()
    except (requests.RequestException, ValueError) as exc:
        return [], [f"cluster metrics: {exc}"]
    from .model import parse_mem

    layer = LayerTag(cfg.options.get("layer", "service"))
    out = []
    for item in doc.get("items", []):
        meta = item.get("metadata", {})
        pod = meta.get("name")
        node = meta.get("labels", {}).get("kubernetes.io/hostname", "") or item.get("node", "")
        ts = _parse_k8s_time(item["timestamp"]) if "timestamp" in item else t0
        if not _in_window(ts, t0, t1):
            continue
        cpu = sum(_cpu_millicores(c["usage"]["cpu"]) for c in item.get("containers", []))
        mem = sum(parse_mem(c["usage"]["memory"]) for c in item.get("containers", []))
        out.append(MeasurementSample(ts, layer, cfg.id, node, pod, SampleKind.CPU_MILLICORES, cpu, "m"))
        out.append(MeasurementSample(ts, layer, cfg.id, node, pod, SampleKind.MEM_BYTES, mem, "B"))
    return out, []


def _cpu_millicores(text):
    # metrics-server reports nanocores ("123456789n") and microcores ("12u")
    from .model import parse_cpu

    text = str(text)
    if text.endswith("n"):
        return float(text[:-1]) / 1e6
    if text.endswith("u"):
        return float(text[:-1]) / 1e3
    return float(parse_cpu(text))


def _poll_power_meter(cfg, t0, t1, session):
    http = session or requests
    try:
        resp = http.get(cfg.endpoint, timeout=float(cfg.options.get("timeout", 5.0)))
        resp.raise_for_status()
        doc = resp.json()
        watts = float(doc["watts"])
        ts = float(doc["ts"])
    except (requests.RequestException, ValueError, KeyError, TypeError) as exc:
        return [], [f"power meter: {exc}"]
    if not _in_window(ts, t0, t1):
        return [], []
    if not math.isfinite(watts) or watts < 0:
        return [], [f"power meter: invalid reading {watts!r}"]
    node = cfg.options.get("node", cfg.id)
    return [MeasurementSample(ts, LayerTag.PHYSICAL, cfg.id, node, None, SampleKind.WATTS, watts, "W")], []


def _poll_simulator(cfg, t0, t1, provider, attempt):
    if provider is None:
        return [], ["simulator backend needs a live simulation provider"]
    out = []
    for q in cfg.queries:
        out.extend(provider.samples(q.query, (t0, t1), source=cfg.id, layer=q.layer, kind=q.kind))
    out = [s for s in out if _in_window(s.timestamp, t0, t1)]
    drop = float(cfg.options.get("drop_fraction", 0.0))
    on_attempts = cfg.options.get("drop_attempts")
    if drop > 0 and (not on_attempts or attempt in on_attempts):
        kinds = set(cfg.options.get("drop_kinds", ["watts"]))
        rng = np.random.default_rng([int(cfg.options.get("drop_seed", 0)), int(attempt),
                                     int(round(t0 * 1000))])
        keep = []
        for s in out:
            u = rng.random()
            if s.kind.value in kinds and u < drop:
                continue
            keep.append(s)
        out = keep
    return out, []


def poll(config: CollectorConfig, window, *, provider=None, session=None, attempt: int = 1,
         now: float | None = None) -> CollectorBatch:
    """Fetch every sample of ``config`` with a timestamp in ``[t0, t1)``."""
    t0, t1 = float(window[0]), float(window[1])
    if not t0 < t1:
        raise ValueError(f"poll window must satisfy t0 < t1, got [{t0}, {t1}]")
    polled_at = time.time() if now is None else now
    try:
        if config.backend == "trace_replay":
            samples, problems = _poll_trace(config, t0, t1)
        elif config.backend == "tsdb_http":
            samples, problems = _poll_tsdb(config, t0, t1, session)
        elif config.backend == "cluster_metrics":
            samples, problems = _poll_cluster_metrics(config, t0, t1, session)
        elif config.backend == "power_meter":
            samples, problems = _poll_power_meter(config, t0, t1, session)
        else:
            samples, problems = _poll_simulator(config, t0, t1, provider, attempt)
    except (OSError, CollectorError, ValueError) as exc:
        return CollectorBatch(config.id, polled_at, (t0, t1), (), "failed", f"{type(exc).__name__}: {exc}")
    diag = "; ".join(problems)
    if problems and not samples and all("dropped" not in p for p in problems):
        return CollectorBatch(config.id, polled_at, (t0, t1), (), "failed", diag)
    status = "partial" if problems else "ok"
    return CollectorBatch(config.id, polled_at, (t0, t1), tuple(samples), status, diag)


# --- enrichment --------------------------------------------------------------


@dataclass(frozen=True)
class PodInfo:
    node: str
    service: str
    layer: LayerTag


@dataclass
class EnrichStats:
    enriched: int = 0
    unattributed: int = 0
    unknown_pods: set = field(default_factory=set)


def enrich(samples, topology: dict) -> tuple[list[MeasurementSample], EnrichStats]:
    """Attach node, service and layer from ``topology`` (pod -> PodInfo or a
    ``(node, service, layer)`` tuple). Samples of unknown pods are kept and
    tagged ``unattributed``."""
    stats = EnrichStats()
    out = []
    for s in samples:
        if not s.pod:
            out.append(s)
            continue
        info = topology.get(s.pod)
        if info is None:
            stats.unattributed += 1
            stats.unknown_pods.add(s.pod)
            out.append(_replace(s, service=UNATTRIBUTED))
            continue
        if not isinstance(info, PodInfo):
            info = PodInfo(info[0], info[1], LayerTag(info[2]))
        stats.enriched += 1
        out.append(_replace(s, node=info.node, service=info.service, layer=info.layer))
    return out, stats


def _replace(s, **kw):
    from dataclasses import replace

    return replace(s, **kw)


# --- coverage ------------------------------------------------------------------


def coverage(samples, window, lifetimes: dict | None = None) -> float:
    """Fraction of expected series-seconds that hold at least one raw sample.

    A series is one (pod or node, kind) pair seen in ``samples``; its expected
    seconds are the window, clipped to the pod's ``(start, end)`` lifetime
    when ``lifetimes`` has it.
    """
    t0, t1 = window
    n = int(math.ceil(t1 - t0))
    if n <= 0:
        return 0.0
    seen: dict[tuple, set] = {}
    for s in samples:
        sec = int(math.floor(s.timestamp - t0))
        if 0 <= sec < n:
            seen.setdefault(s.series_key, set()).add(sec)
    if not seen:
        return 0.0
    covered = expected = 0
    for key, secs in seen.items():
        lo, hi = 0, n
        if lifetimes and key[0] in lifetimes:
            a, b = lifetimes[key[0]]
            lo = max(0, int(math.floor(a - t0)))
            hi = min(n, int(math.ceil((b if b is not None else t1) - t0)))
        if hi <= lo:
            continue
        expected += hi - lo
        covered += sum(1 for s in secs if lo <= s < hi)
    return covered / expected if expected else 0.0


# --- journal -------------------------------------------------------------------


class Journal:
    """Append-only on-disk record of every batch: samples go to a trace CSV,
    batch metadata to a JSON-lines file. Each append is fsynced."""

    def __init__(self, directory):
        self.dir = Path(directory)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.samples_path = self.dir / "samples.csv"
        self.batches_path = self.dir / "batches.jsonl"
        if not self.samples_path.exists():
            with open(self.samples_path, "w", encoding="utf-8", newline="") as fh:
                write_trace([], fh)

    def append(self, batch: CollectorBatch):
        with open(self.samples_path, "a", encoding="utf-8", newline="") as fh:
            write_trace(batch.samples, fh, header=False)
            fh.flush()
            os.fsync(fh.fileno())
        meta = {
            "collector_id": batch.collector_id,
            "window": [batch.window[0], batch.window[1]],
            "status": batch.status,
            "samples": len(batch.samples),
            "diagnostic": batch.diagnostic,
        }
        with open(self.batches_path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(meta, sort_keys=True) + "\n")
            fh.flush()
            os.fsync(fh.fileno())

    def samples(self):
        return read_trace(self.samples_path)

    def batches(self):
        if not self.batches_path.exists():
            return []
        with open(self.batches_path, encoding="utf-8") as fh:
            return [json.loads(line) for line in fh if line.strip()]


# --- concurrent polling --------------------------------------------------------


class RealClock:
    def now(self):
        return time.time()

    def sleep(self, dt):
        time.sleep(dt)


class CollectorPool:
    """One polling thread per collector; batches flow through a single queue
    to one journal-writer thread, so journal order is arrival order."""

    def __init__(self, configs, journal: Journal, clock=None, provider=None, attempt=1, session=None):
        self.configs = list(configs)
        self.journal = journal
        self.clock = clock or RealClock()
        self.provider = provider
        self.attempt = attempt
        self.session = session
        self._queue: queue.Queue = queue.Queue()
        self._stop_at = None
        self._stop = threading.Event()
        self._threads: list[threading.Thread] = []
        self._writer = None
        self.batches: list[CollectorBatch] = []

    def start(self, t0):
        self._writer = threading.Thread(target=self._write_loop, daemon=True)
        self._writer.start()
        for cfg in self.configs:
            th = threading.Thread(target=self._poll_loop, args=(cfg, float(t0)), daemon=True)
            th.start()
            self._threads.append(th)

    def stop(self, t_end):
        """Finish polling up to ``t_end`` and drain the queue."""
        self._stop_at = float(t_end)
        self._stop.set()
        for th in self._threads:
            th.join()
        self._queue.put(None)
        self._writer.join()
        return self.batches

    def _poll_loop(self, cfg, last):
        interval = cfg.poll_interval
        while True:
            stopping = self._stop.is_set()
            now = self.clock.now()
            upto = min(now, self._stop_at) if stopping else now
            if stopping or upto - last >= interval:
                # poll in interval-sized windows so a stalled poller catches up
                while upto - last > 0 and (stopping or upto - last >= interval):
                    t1 = min(last + interval, upto)
                    batch = poll(cfg, (last, t1), provider=self.provider, session=self.session,
                                 attempt=self.attempt, now=now)
                    if batch.status != "ok":
                        log.warning("collector %s %s: %s", cfg.id, batch.status, batch.diagnostic)
                    self._queue.put(batch)
                    last = t1
                if stopping:
                    return
            self.clock.sleep(min(interval, 0.05))

    def _write_loop(self):
        while True:
            batch = self._queue.get()
            if batch is None:
                return
            self.journal.append(batch)
            self.batches.append(batch)
