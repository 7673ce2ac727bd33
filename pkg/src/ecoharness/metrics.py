"""The nine comparison metrics, computed from timelines, the energy ledger,
the request log and a price book. Everything here is a pure function."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields
from decimal import Decimal
from typing import Callable, Sequence

import numpy as np

from .aggregator import EnergyLedger, ResourceTimeline, default_sut_selector
from .kernels import overprovision_mask, utilization_terms
from .model import (
    BYTES_PER_GB,
    AuxModel,
    CostBook,
    OverProvisionRule,
    RequestRecord,
    ResourceSpec,
)

__all__ = [
    "AuxModel",
    "CostBook",
    "OverProvisionRule",
    "MetricError",
    "FnInvocation",
    "CostBreakdown",
    "MetricsReport",
    "request_consumption",
    "runtime_overhead",
    "overhead_ratio_raw",
    "resource_utilization",
    "scaling_waste",
    "auxiliary_costs",
    "total_cost",
    "failure_rate",
    "throughput",
    "latency_quantiles",
    "compute_report",
]


class MetricError(ValueError):
    """A metric is undefined for the given inputs."""


@dataclass(frozen=True)
class FnInvocation:
    duration: float
    memory_bytes: float
    used_memory_bytes: float | None = None


@dataclass(frozen=True)
class CostBreakdown:
    total: float
    consumed: float
    per_kilorequest_cents: float | None


# --- sustainability ------------------------------------------------------------


def request_consumption(ledger: EnergyLedger, requests: Sequence[RequestRecord]) -> float:
    """WR: SUT joules per successful request."""
    ok = sum(1 for r in requests if r.success)
    if ok == 0:
        raise MetricError("WR undefined: zero successful requests")
    return ledger.sut_joules / ok


def runtime_overhead(ledger: EnergyLedger) -> float:
    """RO: overhead share of all attributed energy, in [0, 1]."""
    total = ledger.overhead_joules + ledger.sut_joules
    if total <= 0:
        raise MetricError("no energy")
    return ledger.overhead_joules / total


def overhead_ratio_raw(ledger: EnergyLedger) -> float | None:
    """Overhead relative to SUT energy alone (unbounded)."""
    if ledger.sut_joules <= 0:
        return None
    return ledger.overhead_joules / ledger.sut_joules


def _sut(timelines, selector):
    select = selector or default_sut_selector()
    return [t for t in timelines if select(t.service, t.layer)]


def _limits(tl: ResourceTimeline, specs):
    if tl.cpu_limit and tl.mem_limit:
        return float(tl.cpu_limit), float(tl.mem_limit)
    spec = (specs or {}).get(tl.service)
    if spec is None:
        raise MetricError(f"no resource spec for service {tl.service!r}")
    if isinstance(spec, ResourceSpec):
        return float(spec.cpu_limit), float(spec.mem_limit)
    return float(spec["cpu_limit"]), float(spec["mem_limit"])


def _stack(timelines, specs):
    n = max(len(t) for t in timelines)
    R = len(timelines)
    cpu = np.full((n, R), np.nan)
    mem = np.full((n, R), np.nan)
    watts = np.full((n, R), np.nan)
    cpu_lim = np.empty(R)
    mem_lim = np.empty(R)
    for j, tl in enumerate(timelines):
        k = len(tl)
        cpu[:k, j] = tl.cpu_millicores
        mem[:k, j] = tl.mem_bytes
        watts[:k, j] = tl.watts
        cpu_lim[j], mem_lim[j] = _limits(tl, specs)
    return cpu, mem, watts, cpu_lim, mem_lim


def resource_utilization(timelines, specs: dict | None = None,
                         sut_selector: Callable | None = None) -> float:
    """RU: mean over seconds of used/provisioned, cpu and memory weighted
    equally. Provisioned capacity counts only replicas live in that second;
    seconds with nothing provisioned are skipped."""
    sut = _sut(timelines, sut_selector)
    if not sut:
        raise MetricError("no SUT timelines")
    cpu, mem, _, cpu_lim, mem_lim = _stack(sut, specs)
    used_c, prov_c, used_m, prov_m = utilization_terms(cpu, mem, cpu_lim, mem_lim)
    has_c = prov_c > 0
    has_m = prov_m > 0
    with np.errstate(invalid="ignore", divide="ignore"):
        rc = np.where(has_c, used_c / np.where(has_c, prov_c, 1.0), 0.0)
        rm = np.where(has_m, used_m / np.where(has_m, prov_m, 1.0), 0.0)
    dims = has_c.astype(np.float64) + has_m.astype(np.float64)
    keep = dims > 0
    if not keep.any():
        raise MetricError("RU undefined: nothing provisioned")
    per_second = (rc[keep] + rm[keep]) / dims[keep]
    return math.fsum(per_second.tolist()) / int(keep.sum())


def scaling_waste(timelines, rule: OverProvisionRule = OverProvisionRule(), specs: dict | None = None,
                  sut_selector: Callable | None = None) -> float:
    """RE: joules drawn by over-provisioned SUT replicas, second by second."""
    sut = _sut(timelines, sut_selector)
    if not sut:
        return 0.0
    cpu, mem, watts, cpu_lim, mem_lim = _stack(sut, specs)
    names = sorted({t.service for t in sut})
    group = np.array([names.index(t.service) for t in sut], dtype=np.int64)
    mask = overprovision_mask(cpu, mem, cpu_lim, mem_lim, group, rule.cpu_threshold,
                              rule.mem_threshold, rule.require_peer_headroom)
    w = watts[mask]
    return math.fsum(w[np.isfinite(w)].tolist())


def auxiliary_costs(ledger: EnergyLedger, model: AuxModel = AuxModel(), bytes_tx: float = 0.0,
                    storage_gb_s: float = 0.0) -> float:
    """AC: cooling (PUE surplus) plus network and storage energy estimates."""
    return ((model.pue - 1.0) * (ledger.sut_joules + ledger.overhead_joules)
            + model.network_j_per_gb * (bytes_tx / BYTES_PER_GB)
            + model.storage_j_per_gb_s * storage_gb_s)


# --- quality -------------------------------------------------------------------


def total_cost(timelines, fn_invocations: Sequence[FnInvocation], book: CostBook = CostBook(),
               successful_requests: int | None = None, specs: dict | None = None,
               sut_selector: Callable | None = None) -> CostBreakdown:
    """TC bills provisioned limits for every live replica second; the consumed
    cost bills measured usage at the same prices. Functions are billed per
    invocation plus GB-seconds of configured (TC) or used (consumed) memory."""
    tc_terms, used_terms = [], []
    for tl in _sut(timelines, sut_selector):
        if tl.deploy_kind == "function":
            continue
        if tl.deploy_kind != "pod":
            raise MetricError(f"unpriced deployment kind {tl.deploy_kind!r}")
        cpu_lim, mem_lim = _limits(tl, specs)
        live_s = float(np.count_nonzero(tl.live))
        tc_terms.append(live_s * (cpu_lim / 1000.0 * book.pod_cpu_price
                                  + mem_lim / BYTES_PER_GB * book.pod_mem_price))
        # usage above the limit is not billable
        cpu = np.where(tl.live & np.isfinite(tl.cpu_millicores), np.minimum(tl.cpu_millicores, cpu_lim), 0.0)
        mem = np.where(tl.live & np.isfinite(tl.mem_bytes), np.minimum(tl.mem_bytes, mem_lim), 0.0)
        used_terms.append(math.fsum((cpu / 1000.0 * book.pod_cpu_price
                                     + mem / BYTES_PER_GB * book.pod_mem_price).tolist()))
    n_inv = len(fn_invocations)
    if n_inv:
        inv = n_inv * book.fn_invocation_price
        gbs = math.fsum(f.duration * (f.memory_bytes / BYTES_PER_GB) for f in fn_invocations)
        used_gbs = math.fsum(
            f.duration * (min(f.memory_bytes, f.used_memory_bytes
                              if f.used_memory_bytes is not None else f.memory_bytes) / BYTES_PER_GB)
            for f in fn_invocations)
        tc_terms.append(inv + gbs * book.fn_gbs_price)
        used_terms.append(inv + used_gbs * book.fn_gbs_price)
    tc = math.fsum(tc_terms)
    consumed = math.fsum(used_terms)
    per_k = None
    if successful_requests:
        per_k = tc / (successful_requests / 1000.0) * 100.0
    return CostBreakdown(tc, consumed, per_k)


def failure_rate(requests: Sequence[RequestRecord]) -> float:
    """FR: failed / total."""
    if not requests:
        raise MetricError("FR undefined: empty request log")
    failed = sum(1 for r in requests if not r.success)
    return failed / len(requests)


# --- performance ---------------------------------------------------------------


def throughput(requests: Sequence[RequestRecord], window) -> float:
    """Rqs: successful requests started inside ``[t0, t1)`` per second."""
    t0, t1 = window
    if not t1 - t0 > 0:
        raise MetricError("throughput window must have positive length")
    ok = sum(1 for r in requests if r.success and t0 <= r.start < t1)
    return ok / (t1 - t0)


def latency_quantiles(requests: Sequence[RequestRecord], quantiles=(0.5, 0.95)) -> list[float]:
    """Nearest-rank quantiles of successful-request latencies."""
    lat = sorted(r.latency for r in requests if r.success)
    if not lat:
        raise MetricError("latency undefined: no successful requests")
    n = len(lat)
    out = []
    for q in quantiles:
        if not 0 < q <= 1:
            raise ValueError(f"quantile must be in (0, 1], got {q}")
        rank = max(1, math.ceil(q * n - 1e-12))
        out.append(lat[rank - 1])
    return out


# --- report --------------------------------------------------------------------


@dataclass(frozen=True)
class MetricsReport:
    variant: str
    workload: str
    repetition: int
    wr: float | None
    ro: float | None
    ru: float | None
    re: float
    ac: float
    tc: float
    consumed_cost: float
    cost_per_kilorequest: float | None
    fr: float | None
    rqs: float
    lat_p50: float | None
    lat_p95: float | None
    successful_requests: int
    total_requests: int
    total_sut_energy: float
    total_overhead_energy: float
    overhead_ratio_raw: float | None = None
    energy_coverage: float = 1.0
    collector_coverage: float = 1.0
    outliers_removed: int = 0
    currency: str = "USD"

    def __post_init__(self):
        for name in ("ro", "ru", "fr"):
            v = getattr(self, name)
            if v is not None and not -1e-12 <= v <= 1 + 1e-12:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        for name in ("re", "ac", "total_sut_energy", "total_overhead_energy"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be ≥ 0")
        if self.successful_requests > self.total_requests:
            raise ValueError("successful_requests ≤ total_requests")

    def to_json(self) -> str:
        parts = []
        for f in fields(self):
            parts.append(f"{json.dumps(f.name)}: {_json_value(getattr(self, f.name))}")
        return "{\n  " + ",\n  ".join(parts) + "\n}\n"

    @classmethod
    def from_json(cls, text: str) -> "MetricsReport":
        data = json.loads(text)
        return cls(**{f.name: data[f.name] for f in fields(cls) if f.name in data})

    def as_dict(self):
        return asdict(self)


def format_decimal(x: float, digits: int = 6) -> str:
    """Plain decimal with ``digits`` significant digits, never exponent form."""
    if x == 0:
        return "0"
    d = Decimal(f"{x:.{digits}g}")
    s = format(d, "f")
    if "." in s:
        s = s.rstrip("0").rstrip(".")
    return s


def _json_value(v):
    if v is None:
        return "null"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, int):
        return str(v)
    if isinstance(v, float):
        if not math.isfinite(v):
            return "null"
        return format_decimal(v)
    return json.dumps(v)


def _maybe(fn, *args, **kw):
    try:
        return fn(*args, **kw)
    except MetricError:
        return None


def compute_report(*, variant: str, workload: str, repetition: int, timelines, ledger: EnergyLedger,
                   requests: Sequence[RequestRecord], window, rule=OverProvisionRule(),
                   book: CostBook = CostBook(), aux: AuxModel = AuxModel(),
                   fn_invocations=(), bytes_tx: float = 0.0, storage_gb_s: float = 0.0,
                   specs: dict | None = None, sut_selector=None, normal_window=None,
                   collector_coverage: float = 1.0, outliers_removed: int = 0) -> MetricsReport:
    ok = sum(1 for r in requests if r.success)
    lat = _maybe(latency_quantiles, requests, (0.5, 0.95)) or [None, None]
    cost = total_cost(timelines, fn_invocations, book, ok, specs, sut_selector)
    return MetricsReport(
        variant=variant,
        workload=workload,
        repetition=repetition,
        wr=_maybe(request_consumption, ledger, requests),
        ro=_maybe(runtime_overhead, ledger),
        ru=_maybe(resource_utilization, timelines, specs, sut_selector),
        re=scaling_waste(timelines, rule, specs, sut_selector),
        ac=auxiliary_costs(ledger, aux, bytes_tx, storage_gb_s),
        tc=cost.total,
        consumed_cost=cost.consumed,
        cost_per_kilorequest=cost.per_kilorequest_cents,
        fr=_maybe(failure_rate, requests),
        rqs=throughput(requests, normal_window or window),
        lat_p50=lat[0],
        lat_p95=lat[1],
        successful_requests=ok,
        total_requests=len(requests),
        total_sut_energy=ledger.sut_joules,
        total_overhead_energy=ledger.overhead_joules,
        overhead_ratio_raw=overhead_ratio_raw(ledger),
        energy_coverage=ledger.energy_coverage,
        collector_coverage=collector_coverage,
        outliers_removed=outliers_removed,
        currency=book.currency,
    )
