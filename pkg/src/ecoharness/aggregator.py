"""Put collector samples on a 1 s grid, clean them, and attribute energy."""

from __future__ import annotations

import csv
import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np

from .collectors import UNATTRIBUTED, enrich, format_number
from .kernels import locf_grid
from .model import (
    COUNTER_KINDS,
    DEFAULT_INFRA_PREFIXES,
    CleaningConfig,
    LayerTag,
    MeasurementSample,
    SampleKind,
)

log = logging.getLogger(__name__)

TIMELINE_HEADER = ["second", "replica", "service", "layer", "cpu_millicores", "mem_bytes", "watts",
                   "missing_flags"]
MISSING_CPU, MISSING_MEM, MISSING_WATTS = 1, 2, 4

# MAD -> mean-absolute-deviation scale match for normal data (1.253314 / 1.4826)
_MEANAD_TO_MAD = 0.845347


class NoEnergyError(RuntimeError):
    """None of the timelines carries a single watt reading."""


@dataclass(frozen=True)
class PodMeta:
    """What the cluster (or simulator) says about one replica."""

    node: str
    service: str
    layer: LayerTag
    deploy_kind: str = "pod"  # pod | function
    cpu_limit: float | None = None
    mem_limit: float | None = None
    lifecycle: tuple = ()  # ((event, timestamp), ...)

    def lifetime(self):
        """(created, terminated) or None when no lifecycle is known."""
        created = terminated = None
        for event, ts in self.lifecycle:
            if event == "created" and created is None:
                created = ts
            elif event == "terminated":
                terminated = ts
        if created is None:
            return None
        return created, terminated


@dataclass
class ResourceTimeline:
    replica: str
    service: str
    layer: LayerTag
    node: str
    grid_start: float
    cpu_millicores: np.ndarray
    mem_bytes: np.ndarray
    watts: np.ndarray
    live: np.ndarray
    deploy_kind: str = "pod"
    cpu_limit: float | None = None
    mem_limit: float | None = None
    lifecycle: tuple = ()
    step: float = 1.0

    def __post_init__(self):
        n = len(self.live)
        if not (len(self.cpu_millicores) == len(self.mem_bytes) == len(self.watts) == n):
            raise ValueError("timeline series must share one length")
        w = self.watts[~np.isnan(self.watts)]
        if w.size and w.min() < 0:
            raise ValueError("watts ≥ 0")

    def __len__(self):
        return len(self.live)


@dataclass
class EnergyLedger:
    per_layer: dict
    sut_joules: float
    overhead_joules: float
    node_joules: dict
    energy_coverage: float = 1.0
    warnings: list = field(default_factory=list)

    @property
    def total_joules(self):
        return self.sut_joules + self.overhead_joules

    def check(self, tolerance=1e-6):
        """Attribution may not exceed measured host energy, when present."""
        if self.node_joules:
            host = math.fsum(self.node_joules.values())
            if self.total_joules > host * (1 + tolerance) + tolerance:
                raise AssertionError(f"attributed {self.total_joules} J exceeds host {host} J")


@dataclass
class AggregationStats:
    removed: int = 0
    unattributed_samples: int = 0
    custom: dict = field(default_factory=dict)
    colocated_loadgen: bool = False


# --- resampling --------------------------------------------------------------


def counter_rates(times, values):
    """Per-interval rates of a monotone counter with reset detection.

    Returns ``(rates, resets)``: ``rates[i]`` covers ``[times[i], times[i+1])``
    and ``resets`` lists sample indices where the counter went backwards (the
    new value is then taken as growth from zero).
    """
    times = np.asarray(times, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    rates, resets = [], []
    for i in range(1, len(values)):
        dt = times[i] - times[i - 1]
        delta = values[i] - values[i - 1]
        if delta < 0:
            resets.append(i)
            delta = values[i]
        rates.append(delta / dt if dt > 0 else math.nan)
    return np.asarray(rates, dtype=np.float64), resets


def resample(samples: Iterable[MeasurementSample], grid, max_gap_fill: int = 3,
             counter: bool | None = None) -> np.ndarray:
    """One value per grid second of ``grid = (t0, t1)`` (``step`` is 1 s).

    Gauges use last-observation-carried-forward for at most ``max_gap_fill``
    seconds per observation; counters become rates over successive
    differences. Missing seconds are NaN.
    """
    t0, t1 = grid[0], grid[1]
    n = int(math.ceil(t1 - t0))
    samples = sorted(samples, key=lambda s: s.timestamp)
    if n <= 0:
        return np.empty(0)
    if not samples:
        return np.full(n, np.nan)
    if counter is None:
        counter = samples[0].kind in COUNTER_KINDS
    times = np.array([s.timestamp for s in samples], dtype=np.float64)
    values = np.array([s.value for s in samples], dtype=np.float64)
    if not counter:
        return locf_grid(times, values, t0, n, max_gap_fill)
    if len(samples) < 2:
        return np.full(n, np.nan)
    rates, _ = counter_rates(times, values)
    # each rate holds until the next counter reading, then stops
    rtimes = times
    rvalues = np.append(rates, np.nan)
    return locf_grid(rtimes, rvalues, t0, n, np.inf)


# --- cleaning ----------------------------------------------------------------


def clean(series, config: CleaningConfig, upper=None):
    """Replace outliers with NaN; returns ``(series, removed_count)``.

    A point is a candidate when ``|x - median| > mad_k * MAD`` over the finite
    values. If MAD is zero the mean absolute deviation, rescaled to the MAD
    scale, stands in. Only runs of at most ``max_outlier_run`` consecutive
    candidates are removed; longer runs are a genuine load level.

    ``upper`` (scalar or per-point array) is a physical ceiling such as a cpu
    limit. When given, values at or below it are never removed: a reading the
    hardware could have produced is load, not a fault.
    """
    x = np.array(series, dtype=np.float64)
    if config.method == "none":
        return x, 0
    finite = np.isfinite(x)
    if finite.sum() < 3:
        return x, 0
    vals = x[finite]
    med = np.median(vals)
    dev = np.abs(vals - med)
    scale = np.median(dev)
    if scale == 0:
        scale = _MEANAD_TO_MAD * dev.mean()
    if scale == 0:
        return x, 0
    cand = np.zeros(x.shape, dtype=bool)
    cand[finite] = dev > config.mad_k * scale
    if upper is not None:
        ceiling = np.broadcast_to(np.asarray(upper, dtype=np.float64), x.shape)
        with np.errstate(invalid="ignore"):
            plausible = (x >= 0) & (x <= ceiling)
        cand &= ~plausible
    if config.max_outlier_run > 0:
        cand = _short_runs(cand, config.max_outlier_run)
    removed = int(cand.sum())
    x[cand] = np.nan
    return x, removed


def _short_runs(mask, max_run):
    out = np.zeros_like(mask)
    n = len(mask)
    i = 0
    while i < n:
        if not mask[i]:
            i += 1
            continue
        j = i
        while j < n and mask[j]:
            j += 1
        if j - i <= max_run:
            out[i:j] = True
        i = j
    return out


# --- timelines -----------------------------------------------------------------


def _entity_series(samples, grid, cfg: CleaningConfig):
    """Group samples per (entity, kind), picking the best-covered source when
    several collectors report the same series."""
    groups: dict[tuple, dict[str, list]] = {}
    for s in samples:
        key = (s.pod or s.node, s.kind)
        groups.setdefault(key, {}).setdefault(s.source, []).append(s)
    out = {}
    for key, by_source in groups.items():
        best = max(sorted(by_source), key=lambda src: len(by_source[src]))
        out[key] = resample(by_source[best], grid, cfg.max_gap_fill)
    return out


def build_timelines(samples, topology: dict, window, cleaning: CleaningConfig = CleaningConfig(),
                    exclude_nodes=(), node_ceilings: dict | None = None):
    """Assemble per-replica and per-node timelines over ``window = (t0, t1)``.

    ``topology`` maps pod id -> :class:`PodMeta`. Node-level watts (no pod id)
    become physical-layer timelines named after the node. ``node_ceilings``
    (node -> rated watts) bounds what outlier cleaning may call a fault for
    that node and every pod on it.
    """
    t0, t1 = window
    n = int(math.ceil(t1 - t0))
    stats = AggregationStats()
    pod_map = {p: (m.node, m.service, m.layer) for p, m in topology.items()}
    enriched, est = enrich(samples, pod_map)
    stats.unattributed_samples = est.unattributed

    custom = [s for s in enriched if s.kind is SampleKind.CUSTOM]
    for s in custom:
        if t0 <= s.timestamp < t1:
            stats.custom.setdefault((s.pod or s.node, s.unit), []).append(s.value)
    stats.custom = {k: float(np.mean(v)) for k, v in sorted(stats.custom.items())}

    measured = [s for s in enriched if s.kind is not SampleKind.CUSTOM]
    series = _entity_series(measured, (t0, t1), cleaning)

    entities: dict[str, dict] = {}
    for s in measured:
        ent = s.pod or s.node
        if ent not in entities:
            entities[ent] = {"node": s.node, "service": s.service or "", "layer": s.layer,
                             "is_pod": bool(s.pod)}

    ceilings = dict(node_ceilings or {})

    timelines = []
    grid = t0 + np.arange(n, dtype=np.float64)
    for ent in sorted(entities):
        info = entities[ent]
        meta = topology.get(ent) if info["is_pod"] else None
        cpu_lim = meta.cpu_limit if meta else None
        mem_lim = meta.mem_limit if meta else None

        def get(kind):
            return series.get((ent, kind))

        cpu = get(SampleKind.CPU_MILLICORES)
        frac = get(SampleKind.CPU_FRACTION)
        if cpu is None and frac is not None and cpu_lim:
            cpu = frac * cpu_lim
        mem = get(SampleKind.MEM_BYTES)
        watts = get(SampleKind.WATTS)
        joules = get(SampleKind.ENERGY_JOULES)
        if joules is not None:
            watts = joules if watts is None else np.where(np.isnan(watts), joules, watts)
        nan = np.full(n, np.nan)
        cpu = nan.copy() if cpu is None else cpu
        mem = nan.copy() if mem is None else mem
        watts = nan.copy() if watts is None else watts

        node_cap = ceilings.get(meta.node if meta else info["node"])
        if info["is_pod"]:
            cpu, r_cpu = clean(cpu, cleaning, cpu_lim)
            mem, r_mem = clean(mem, cleaning, mem_lim)
        else:
            r_cpu = r_mem = 0
        watts, r_w = clean(watts, cleaning, node_cap)
        stats.removed += r_cpu + r_mem + r_w

        if meta is not None and meta.lifetime() is not None:
            created, terminated = meta.lifetime()
            live = grid >= math.floor(created)
            if terminated is not None:
                live &= grid < terminated
        else:
            live = ~(np.isnan(cpu) & np.isnan(mem) & np.isnan(watts))
        cpu[~live] = np.nan
        mem[~live] = np.nan
        watts[~live] = np.nan

        layer = meta.layer if meta else info["layer"]
        if not info["is_pod"]:
            layer = LayerTag.PHYSICAL if info["layer"] is LayerTag.PHYSICAL else info["layer"]
        timelines.append(ResourceTimeline(
            replica=ent,
            service=meta.service if meta else info["service"],
            layer=layer,
            node=meta.node if meta else info["node"],
            grid_start=float(t0),
            cpu_millicores=cpu,
            mem_bytes=mem,
            watts=watts,
            live=live,
            deploy_kind=meta.deploy_kind if meta else "pod",
            cpu_limit=cpu_lim,
            mem_limit=mem_lim,
            lifecycle=meta.lifecycle if meta else (),
        ))
    if exclude_nodes:
        stats.colocated_loadgen = any(
            t.node in exclude_nodes and t.layer in (LayerTag.APPLICATION, LayerTag.SERVICE)
            for t in timelines)
    return timelines, stats


# --- energy attribution ----------------------------------------------------------


def default_sut_selector(infra_prefixes=DEFAULT_INFRA_PREFIXES) -> Callable:
    prefixes = tuple(infra_prefixes)

    def select(service: str, layer: LayerTag) -> bool:
        if layer not in (LayerTag.APPLICATION, LayerTag.SERVICE):
            return False
        if service == UNATTRIBUTED:
            return False
        return not service.startswith(prefixes)

    return select


def classify_layer(name: str, namespace: str = "", infra_prefixes=DEFAULT_INFRA_PREFIXES) -> LayerTag:
    """Platform layer for infrastructure pods (by namespace or name prefix),
    service layer otherwise."""
    prefixes = tuple(infra_prefixes)
    if namespace.startswith(prefixes) or name.startswith(prefixes):
        return LayerTag.PLATFORM
    return LayerTag.SERVICE


def _joules(tl):
    w = tl.watts[np.isfinite(tl.watts)]
    return math.fsum(w.tolist())


def attribute_energy(timelines, sut_selector: Callable | None = None, exclude_nodes=(),
                     layer_map: dict | None = None) -> EnergyLedger:
    """Split measured energy into SUT and overhead joules.

    ``layer_map`` optionally re-tags replicas (replica id -> LayerTag) before
    attribution. Timelines on ``exclude_nodes`` (the load generator's node)
    are left out entirely.
    """
    select = sut_selector or default_sut_selector()
    layer_map = layer_map or {}
    per_layer = {tag.value: [] for tag in LayerTag}
    sut, overhead = [], []
    nodes: dict[str, list] = {}
    any_energy = False
    expected = covered = 0
    notes = []
    matched = 0
    for tl in timelines:
        if tl.node in exclude_nodes:
            continue
        layer = LayerTag(layer_map.get(tl.replica, tl.layer))
        if tl.service == UNATTRIBUTED:
            continue
        j = _joules(tl)
        has = bool(np.isfinite(tl.watts).any())
        any_energy |= has
        expected += int(tl.live.sum())
        covered += int((np.isfinite(tl.watts) & tl.live).sum())
        per_layer[layer.value].append(j)
        if layer is LayerTag.PHYSICAL:
            nodes.setdefault(tl.node or tl.replica, []).append(j)
        elif select(tl.service, layer):
            sut.append(j)
            matched += 1
        else:
            overhead.append(j)
    if not any_energy:
        raise NoEnergyError("no energy source")
    if matched == 0:
        msg = "SUT selector matched no timeline; sut energy is 0 J"
        warnings.warn(msg, stacklevel=2)
        notes.append(msg)
    return EnergyLedger(
        per_layer={k: math.fsum(v) for k, v in per_layer.items()},
        sut_joules=math.fsum(sut),
        overhead_joules=math.fsum(overhead),
        node_joules={k: math.fsum(v) for k, v in sorted(nodes.items())},
        energy_coverage=covered / expected if expected else 0.0,
        warnings=notes,
    )


# --- CSV export -------------------------------------------------------------------


def _cell(v):
    return "" if not np.isfinite(v) else format_number(v)


def write_timelines_csv(timelines, fh):
    """Aggregated per-second rows for every live replica second."""
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(TIMELINE_HEADER)
    if not timelines:
        return
    n = max(len(t) for t in timelines)
    order = sorted(timelines, key=lambda t: t.replica)
    for s in range(n):
        for tl in order:
            if s >= len(tl) or not tl.live[s]:
                continue
            c, m, wt = tl.cpu_millicores[s], tl.mem_bytes[s], tl.watts[s]
            flags = ((MISSING_CPU if not np.isfinite(c) else 0)
                     | (MISSING_MEM if not np.isfinite(m) else 0)
                     | (MISSING_WATTS if not np.isfinite(wt) else 0))
            w.writerow([format_number(tl.grid_start + s), tl.replica, tl.service, tl.layer.value,
                        _cell(c), _cell(m), _cell(wt), flags])


def read_timelines_csv(fh):
    """Inverse of :func:`write_timelines_csv` (limits and lifecycle are not
    part of the schema and come back empty)."""
    rows = list(csv.reader(fh))
    if not rows:
        return []
    if rows[0] != TIMELINE_HEADER:
        raise ValueError(f"unexpected timeline header {rows[0]!r}")
    body = rows[1:]
    if not body:
        return []
    t0 = min(float(r[0]) for r in body)
    n = int(max(float(r[0]) for r in body) - t0) + 1
    by_rep: dict[str, dict] = {}
    for sec, rep, svc, layer, c, m, wt, _flags in body:
        d = by_rep.setdefault(rep, {"service": svc, "layer": LayerTag(layer),
                                    "cpu": np.full(n, np.nan), "mem": np.full(n, np.nan),
                                    "watts": np.full(n, np.nan), "live": np.zeros(n, dtype=bool)})
        i = int(float(sec) - t0)
        d["live"][i] = True
        d["cpu"][i] = float(c) if c else np.nan
        d["mem"][i] = float(m) if m else np.nan
        d["watts"][i] = float(wt) if wt else np.nan
    return [ResourceTimeline(rep, d["service"], d["layer"],
                             rep if d["layer"] is LayerTag.PHYSICAL else "", t0,
                             d["cpu"], d["mem"], d["watts"], d["live"])
            for rep, d in sorted(by_rep.items())]
