"""Deterministic 1 s cluster model used as a deployment target and as the
ground truth that every metric is checked against.

Requests go through one FIFO fluid server per service whose rate is the sum of
its ready replicas' capacity (``cpu_limit / per_request_cpu_ms`` requests/s).
A request that would wait more than ``MAX_BACKLOG_S`` is rejected. Power is
linear in node cpu utilization; node idle power is split across replicas by
cpu limit and dynamic power by cpu usage, the unsplit remainder is booked on a
per-node isolation-layer pseudo replica.
"""

from __future__ import annotations

import heapq
import math
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import yaml

from .aggregator import PodMeta, ResourceTimeline
from .metrics import FnInvocation
from .model import (
    LayerTag,
    MeasurementSample,
    OverProvisionRule,
    RequestRecord,
    ResourceSpec,
    SampleKind,
    ScenarioStep,
    parse_cpu,
    parse_mem,
)
from .workloads import DriveResult, StepPicker, UserSchedule

MAX_BACKLOG_S = 10.0
DEFAULT_EPOCH = 1_700_000_000.0
JITTER = 0.10


# --- topology ------------------------------------------------------------------


@dataclass(frozen=True)
class SimNode:
    id: str
    cpu_capacity: float
    mem_capacity: float
    p_idle: float
    p_max: float

    def __post_init__(self):
        if not self.p_max >= self.p_idle >= 0:
            raise ValueError(f"node {self.id}: need p_max ≥ p_idle ≥ 0")
        if self.cpu_capacity <= 0 or self.mem_capacity <= 0:
            raise ValueError(f"node {self.id}: capacities must be > 0")


@dataclass(frozen=True)
class Autoscaler:
    target_cpu_fraction: float = 0.5
    scale_up_delay: float = 15.0
    scale_down_delay: float = 60.0
    min_replicas: int | None = None
    max_replicas: int | None = None

    def __post_init__(self):
        if self.scale_up_delay < 0 or self.scale_down_delay < 0:
            raise ValueError("autoscaler delays ≥ 0")
        if not 0 < self.target_cpu_fraction <= 1:
            raise ValueError("target_cpu_fraction ∈ (0, 1]")


@dataclass(frozen=True)
class SimService:
    name: str
    per_request_cpu_ms: float
    mem_floor: float
    service_time: float
    spec: ResourceSpec
    kind: str = "pod"
    cold_start: float = 0.0
    startup: float = 0.0
    idle_millicores: float = 0.0
    mem_per_request: float = 0.0
    response_bytes: float = 0.0
    autoscaler: Autoscaler | None = None

    def __post_init__(self):
        if self.service_time <= 0:
            raise ValueError(f"service {self.name}: service_time > 0")
        if self.per_request_cpu_ms <= 0:
            raise ValueError(f"service {self.name}: per_request_cpu_ms > 0")
        if self.kind not in ("pod", "function"):
            raise ValueError(f"service {self.name}: kind must be pod or function")

    @property
    def replica_rate(self) -> float:
        return self.spec.cpu_limit / self.per_request_cpu_ms


@dataclass(frozen=True)
class PlatformPod:
    name: str
    namespace: str
    node: str
    cpu_millicores: float
    mem_bytes: float
    cpu_limit: float
    mem_limit: float


@dataclass(frozen=True)
class Topology:
    nodes: tuple[SimNode, ...]
    services: tuple[SimService, ...]
    platform_pods: tuple[PlatformPod, ...] = ()
    routes: dict = field(default_factory=dict)
    loadgen_node: str | None = None
    fn_idle_timeout: float = 60.0

    def service(self, name) -> SimService:
        for s in self.services:
            if s.name == name:
                return s
        raise KeyError(name)

    def route(self, step: ScenarioStep) -> str:
        for key in (step.endpoint, step.path, step.name):
            if key and key in self.routes:
                return self.routes[key]
        return self.services[0].name


def topology_from_dict(doc: dict) -> Topology:
    """Build a :class:`Topology` from a parsed topology document."""
    nodes = tuple(
        SimNode(n["id"], parse_cpu(n["cpu_capacity"]), parse_mem(n["mem_capacity"]),
                float(n["p_idle"]), float(n["p_max"]))
        for n in doc["nodes"])
    services = []
    for s in doc["services"]:
        res = ResourceSpec.model_validate(s["resources"])
        scaler = s.get("autoscaler")
        services.append(SimService(
            name=s["name"],
            per_request_cpu_ms=float(s["per_request_cpu_ms"]),
            mem_floor=float(parse_mem(s.get("mem_floor", 0))),
            service_time=float(s["service_time"]),
            spec=res,
            kind=s.get("kind", "pod"),
            cold_start=float(s.get("cold_start", 0.0)),
            startup=float(s.get("startup", 0.0)),
            idle_millicores=float(parse_cpu(s.get("idle_millicores", 0))),
            mem_per_request=float(parse_mem(s.get("mem_per_request", 0))),
            response_bytes=float(s.get("response_bytes", 0)),
            autoscaler=Autoscaler(**scaler) if scaler else None,
        ))
    pods = tuple(
        PlatformPod(p["name"], p.get("namespace", "kube-system"), p["node"],
                    float(parse_cpu(p["cpu_millicores"])), float(parse_mem(p["mem_bytes"])),
                    float(parse_cpu(p["cpu_limit"])), float(parse_mem(p["mem_limit"])))
        for p in doc.get("platform_pods", []))
    node_ids = {n.id for n in nodes}
    if len(node_ids) != len(nodes):
        raise ValueError("node ids must be unique")
    for p in pods:
        if p.node not in node_ids:
            raise ValueError(f"platform pod {p.name} on unknown node {p.node}")
    names = [s.name for s in services]
    if len(set(names)) != len(names) or not names:
        raise ValueError("need at least one service; service names must be unique")
    routes = dict(doc.get("routes", {}))
    for ep, svc in routes.items():
        if svc not in names:
            raise ValueError(f"route {ep!r} targets unknown service {svc!r}")
    return Topology(nodes, tuple(services), pods, routes, doc.get("loadgen_node"),
                    float(doc.get("fn_idle_timeout", 60.0)))


def load_topology(path) -> Topology:
    with open(path, encoding="utf-8") as fh:
        return topology_from_dict(yaml.safe_load(fh))


# --- runtime state -----------------------------------------------------------------


@dataclass
class _Replica:
    id: str
    service: str
    node: str
    created: float
    ready_at: float
    terminated: float | None = None
    cpu: float = 0.0
    mem: float = 0.0
    watts: float = 0.0

    def live(self, t):
        return self.created <= t and (self.terminated is None or t < self.terminated)

    def ready(self, t):
        return self.ready_at <= t and (self.terminated is None or t < self.terminated)


@dataclass
class _ServiceState:
    svc: SimService
    replicas: list = field(default_factory=list)
    pool_free: float = 0.0  # seconds since epoch, kept relative for precision
    next_index: int = 0
    work: dict = field(default_factory=dict)  # second -> cpu ms started
    starts: dict = field(default_factory=dict)  # second -> requests started
    arrivals: dict = field(default_factory=dict)  # second -> arrivals
    up_since: float | None = None
    down_since: float | None = None
    idle_seconds: int = 0


@dataclass
class SimTrace:
    """Per-second record of one simulation."""

    epoch: float
    replicas: list  # replica ids, column order
    meta: dict  # replica id -> PodMeta
    cpu: np.ndarray  # [seconds, replicas], NaN when not live
    mem: np.ndarray
    watts: np.ndarray
    node_ids: list
    node_watts: np.ndarray  # [seconds, nodes]
    served: np.ndarray
    failed: np.ndarray
    events: list
    ground: dict  # second -> per-second ground-truth terms
    injected: int = 0
    in_queue_at_end: int = 0

    def seconds(self, window):
        t0, t1 = window
        a = int(round(t0 - self.epoch))
        b = int(round(t1 - self.epoch))
        return range(max(a, 0), min(b, len(self.served)))

    def ground_truth(self, window) -> dict:
        """Ledger terms straight from the simulator's own per-second tally."""
        secs = self.seconds(window)
        g = [self.ground[s] for s in secs if s in self.ground]
        ru_terms = [x["ru"] for x in g if x["ru"] is not None]
        return {
            "sut_joules": math.fsum(v for x in g for v in x["sut_w"]),
            "overhead_joules": math.fsum(v for x in g for v in x["overhead_w"]),
            "waste_joules": math.fsum(v for x in g for v in x["waste_w"]),
            "node_joules": math.fsum(v for x in g for v in x["node_w"]),
            "ru": math.fsum(ru_terms) / len(ru_terms) if ru_terms else None,
            "served": int(sum(self.served[s] for s in secs)),
            "failed": int(sum(self.failed[s] for s in secs)),
        }

    def timelines(self, window=None) -> list[ResourceTimeline]:
        """The trace as aggregator timelines (replicas plus node rows)."""
        n = len(self.served)
        a, b = (0, n) if window is None else (self.seconds(window).start, self.seconds(window).stop)
        out = []
        for j, rid in enumerate(self.replicas):
            m = self.meta[rid]
            cpu = self.cpu[a:b, j].copy()
            mem = self.mem[a:b, j].copy()
            w = self.watts[a:b, j].copy()
            live = ~np.isnan(w)
            out.append(ResourceTimeline(rid, m.service, m.layer, m.node, self.epoch + a, cpu, mem, w,
                                        live, m.deploy_kind, m.cpu_limit, m.mem_limit, m.lifecycle))
        nan = np.full(b - a, np.nan)
        for k, nid in enumerate(self.node_ids):
            w = self.node_watts[a:b, k].copy()
            out.append(ResourceTimeline(nid, "", LayerTag.PHYSICAL, nid, self.epoch + a, nan.copy(),
                                        nan.copy(), w, ~np.isnan(w)))
        return out


class Simulation:
    """One simulated cluster. Not thread-safe for stepping; sample reads from
    other threads are guarded by a lock."""

    def __init__(self, topology: Topology, seed: int = 0, epoch: float = DEFAULT_EPOCH,
                 rule: OverProvisionRule = OverProvisionRule()):
        self.topo = topology
        self.seed = int(seed)
        self.epoch = float(epoch)
        self.rule = rule
        self.sec = 0  # seconds simulated so far
        self.lock = threading.Lock()
        self.nodes = {n.id: n for n in topology.nodes}
        self.services = {s.name: _ServiceState(s) for s in topology.services}
        self._jitter = {s.name: np.random.default_rng([self.seed, 7919, i])
                        for i, s in enumerate(topology.services)}
        self.platform = list(topology.platform_pods)
        self.events: list = []
        self._rows: list = []  # per second: {replica: (cpu, mem, watts)}, {node: watts}
        self._ground: dict = {}
        self.served: list = []
        self.failed: list = []
        self._served_now = 0
        self._failed_now = 0
        self.injected = 0
        self.in_queue_at_end = 0
        self.fn_invocations: list[FnInvocation] = []
        self.bytes_tx = 0.0
        self._all_replicas: dict = {}
        for svc in topology.services:
            for _ in range(svc.spec.replicas_min):
                self._create(svc.name, self.epoch, svc.startup)

    # -- clock ---------------------------------------------------------------

    @property
    def now(self) -> float:
        return self.epoch + self.sec

    # -- replicas ------------------------------------------------------------

    def _node_allocated(self, node_id, t):
        cpu = sum(p.cpu_limit for p in self.platform if p.node == node_id)
        mem = sum(p.mem_limit for p in self.platform if p.node == node_id)
        for st in self.services.values():
            for r in st.replicas:
                if r.node == node_id and (r.terminated is None or r.terminated > t):
                    cpu += st.svc.spec.cpu_limit
                    mem += st.svc.spec.mem_limit
        return cpu, mem

    def _place(self, svc: SimService, t):
        best = None
        for nid in sorted(self.nodes):
            if nid == self.topo.loadgen_node:
                continue
            node = self.nodes[nid]
            cpu, mem = self._node_allocated(nid, t)
            free_c = node.cpu_capacity - cpu
            free_m = node.mem_capacity - mem
            if free_c >= svc.spec.cpu_limit and free_m >= svc.spec.mem_limit:
                if best is None or free_c > best[0]:
                    best = (free_c, nid)
        return None if best is None else best[1]

    def _create(self, name, t, delay):
        st = self.services[name]
        node = self._place(st.svc, t)
        if node is None:
            self.events.append(("unschedulable", name, t))
            return None
        rid = f"{name}-{st.next_index}"
        st.next_index += 1
        rep = _Replica(rid, name, node, t, t + delay)
        st.replicas.append(rep)
        self._all_replicas[rid] = rep
        self.events.append(("created", rid, t))
        return rep

    def _terminate(self, rep: _Replica, t):
        rep.terminated = t
        self.events.append(("terminated", rep.id, t))

    def live_replicas(self, name, t):
        return [r for r in self.services[name].replicas if r.live(t)]

    def ready_replicas(self, name, t):
        return [r for r in self.services[name].replicas if r.ready(t)]

    # -- requests ------------------------------------------------------------

    def submit(self, name: str, arrival: float, endpoint: str = "") -> tuple[bool, float, int, float]:
        """Queue one request; returns (success, latency, status, completion)."""
        st = self.services[name]
        svc = st.svc
        self.injected += 1
        sec = int(math.floor(arrival - self.epoch))
        st.arrivals[sec] = st.arrivals.get(sec, 0) + 1
        ready = self.ready_replicas(name, arrival)
        if ready:
            begin_at = arrival
            n_ready = len(ready)
        else:
            live = self.live_replicas(name, arrival)
            if not live:
                rep = self._create(name, self.epoch + sec, svc.cold_start if svc.kind == "function"
                                   else svc.startup)
                if rep is None:
                    self._failed_now += 1
                    return False, 0.0, 503, arrival
                rep.ready_at = max(rep.ready_at, arrival + (svc.cold_start if svc.kind == "function"
                                                           else svc.startup))
                live = [rep]
            begin_at = min(r.ready_at for r in live)
            n_ready = 1
        rate = n_ready * svc.replica_rate
        rel = arrival - self.epoch
        start_rel = max(begin_at - self.epoch, st.pool_free)
        if start_rel - rel > MAX_BACKLOG_S + 1e-6:
            self._failed_now += 1
            return False, 0.0, 503, arrival
        st.pool_free = start_rel + 1.0 / rate
        start = self.epoch + start_rel
        jitter = 1.0 + JITTER * (2.0 * self._jitter[name].random() - 1.0)
        completion = start + svc.service_time * jitter
        ssec = int(math.floor(start_rel))
        st.work[ssec] = st.work.get(ssec, 0.0) + svc.per_request_cpu_ms
        st.starts[ssec] = st.starts.get(ssec, 0) + 1
        return True, completion - arrival, 200, completion

    def _count_served(self, success, svc_name, latency, completion):
        if success:
            svc = self.services[svc_name].svc
            self.bytes_tx += svc.response_bytes
            if svc.kind == "function":
                self.fn_invocations.append(FnInvocation(
                    svc.service_time, svc.spec.mem_limit,
                    min(svc.spec.mem_limit, svc.mem_floor + svc.mem_per_request)))

    # -- stepping ------------------------------------------------------------

    def step(self, incoming: int | dict = 0):
        """Advance one second. ``incoming`` is a request count for the first
        service (spread evenly over the second) or ``{service: [arrival
        times]}``."""
        t = self.now
        if isinstance(incoming, int):
            name = self.topo.services[0].name
            n = incoming
            incoming = {name: [t + (i + 0.5) / n for i in range(n)]} if n else {}
        for name, arrivals in incoming.items():
            for a in sorted(arrivals):
                ok, lat, _, comp = self.submit(name, a)
                if ok:
                    self._served_now += 1
                    self._count_served(ok, name, lat, comp)
        self._end_second()

    def advance(self, seconds: float):
        for _ in range(int(math.ceil(seconds))):
            self.step(0)

    def _end_second(self):
        t = self.now
        sec = self.sec
        rows = {}
        sut_w, waste_w, node_w, overhead_w = [], [], [], []
        usage = {nid: 0.0 for nid in self.nodes}
        per_service_live = {}
        for name, st in self.services.items():
            svc = st.svc
            live = [r for r in st.replicas if r.live(t)]
            ready = [r for r in live if r.ready(t)]
            per_service_live[name] = live
            work = st.work.pop(sec, 0.0)
            starts = st.starts.pop(sec, 0)
            for r in live:
                if r in ready:
                    share = work / len(ready) if ready else 0.0
                    per_rep_starts = starts / len(ready)
                    r.cpu = min(svc.spec.cpu_limit, svc.idle_millicores + share)
                else:
                    # booting replicas burn half their limit
                    per_rep_starts = 0.0
                    r.cpu = 0.5 * svc.spec.cpu_limit
                r.mem = min(svc.spec.mem_limit, svc.mem_floor + svc.mem_per_request * per_rep_starts)
                usage[r.node] += r.cpu
        for p in self.platform:
            usage[p.node] += p.cpu_millicores
        node_watts = {}
        for nid, node in self.nodes.items():
            frac = min(1.0, usage[nid] / node.cpu_capacity)
            node_watts[nid] = node.p_idle + (node.p_max - node.p_idle) * frac
        shares = {nid: [] for nid in self.nodes}
        for name, live in per_service_live.items():
            svc = self.services[name].svc
            for r in live:
                node = self.nodes[r.node]
                r.watts = ((node.p_max - node.p_idle) * r.cpu / node.cpu_capacity
                           + node.p_idle * svc.spec.cpu_limit / node.cpu_capacity)
                shares[r.node].append(r.watts)
                rows[r.id] = (r.cpu, r.mem, r.watts)
                if r.node != self.topo.loadgen_node:
                    sut_w.append(r.watts)
        for p in self.platform:
            node = self.nodes[p.node]
            w = ((node.p_max - node.p_idle) * p.cpu_millicores / node.cpu_capacity
                 + node.p_idle * p.cpu_limit / node.cpu_capacity)
            shares[p.node].append(w)
            rows[_platform_id(p)] = (p.cpu_millicores, p.mem_bytes, w)
            if p.node != self.topo.loadgen_node:
                overhead_w.append(w)
        for nid in self.nodes:
            rest = max(0.0, node_watts[nid] - math.fsum(shares[nid]))
            rows[_isolation_id(nid)] = (math.nan, math.nan, rest)
            if nid != self.topo.loadgen_node:
                overhead_w.append(rest)
                node_w.append(node_watts[nid])

        # over-provisioned replicas, evaluated directly on replica objects
        rule = self.rule
        for name, live in per_service_live.items():
            spec = self.services[name].svc.spec
            for r in live:
                if r.node == self.topo.loadgen_node:
                    continue
                if not (r.cpu / spec.cpu_limit < rule.cpu_threshold
                        and r.mem / spec.mem_limit < rule.mem_threshold):
                    continue
                if rule.require_peer_headroom:
                    peer = any(p is not r and spec.cpu_limit - p.cpu >= r.cpu
                               and spec.mem_limit - p.mem >= r.mem for p in live)
                    if not peer:
                        continue
                waste_w.append(r.watts)

        used_c = prov_c = used_m = prov_m = 0.0
        for name, live in per_service_live.items():
            spec = self.services[name].svc.spec
            for r in live:
                used_c += r.cpu
                prov_c += spec.cpu_limit
                used_m += r.mem
                prov_m += spec.mem_limit
        ru = 0.5 * (used_c / prov_c + used_m / prov_m) if prov_c > 0 else None

        with self.lock:
            self._rows.append((rows, node_watts))
            self._ground[sec] = {"sut_w": sut_w, "overhead_w": overhead_w, "waste_w": waste_w,
                                 "node_w": node_w, "ru": ru}
            self.served.append(self._served_now)
            self.failed.append(self._failed_now)
            self._served_now = self._failed_now = 0
            self.sec += 1
        self._autoscale(t)

    def _autoscale(self, t):
        t_next = t + 1.0
        sec = int(round(t - self.epoch))
        for name, st in self.services.items():
            svc = st.svc
            scaler = svc.autoscaler
            live = [r for r in st.replicas if r.live(t_next)]
            ready = [r for r in live if r.ready(t)]
            arrivals = st.arrivals.pop(sec, 0)
            backlog = max(0.0, st.pool_free - (t_next - self.epoch))
            if svc.kind == "function":
                if arrivals == 0 and backlog == 0:
                    st.idle_seconds += 1
                else:
                    st.idle_seconds = 0
                if st.idle_seconds >= self.topo.fn_idle_timeout and live:
                    for r in live:
                        self._terminate(r, t_next)
                    continue
            if scaler is None or not ready:
                continue
            lo = scaler.min_replicas if scaler.min_replicas is not None else svc.spec.replicas_min
            hi = scaler.max_replicas if scaler.max_replicas is not None else svc.spec.replicas_max
            capacity = len(ready) * svc.replica_rate
            util = 1.0 if backlog > 0 else min(1.0, arrivals / capacity)
            desired = min(hi, max(lo, math.ceil(len(ready) * util / scaler.target_cpu_fraction - 1e-9)))
            if desired > len(live):
                st.down_since = None
                if st.up_since is None:
                    st.up_since = t
                if t_next - st.up_since >= scaler.scale_up_delay:
                    for _ in range(desired - len(live)):
                        delay = svc.cold_start if svc.kind == "function" else svc.startup
                        self._create(name, t_next, delay)
                    st.up_since = None
            elif desired < len(ready) and len(ready) == len(live):
                st.up_since = None
                if st.down_since is None:
                    st.down_since = t
                if t_next - st.down_since >= scaler.scale_down_delay:
                    for r in sorted(live, key=lambda r: r.created, reverse=True)[:len(live) - desired]:
                        self._terminate(r, t_next)
                    st.down_since = None
            else:
                st.up_since = st.down_since = None

    # -- virtual-time closed loop ---------------------------------------------

    def run_closed_loop(self, schedule: UserSchedule, scenario, seed: int = 0) -> DriveResult:
        """Play ``schedule`` with closed-loop virtual users in simulated time."""
        started = self.now
        records: list[RequestRecord] = []
        limit = schedule.request_limit
        users: list[dict] = []
        heap: list = []
        pickers = []
        issued = 0
        max_in_flight = []
        last_completion = started
        pending = []  # (completion, index into records) of successes
        n = len(schedule.target_users)
        sec = 0
        while True:
            t = self.now
            if sec < n:
                want = schedule.target_users[sec]
                active = [u for u in users if u["active"]]
                while len(active) < want:
                    uid = len(users)
                    rng = np.random.default_rng([self.seed, int(seed), uid])
                    u = {"id": uid, "active": True, "cycle": 0, "burst": 0, "busy_until": t}
                    users.append(u)
                    pickers.append(StepPicker(scenario, rng))
                    active.append(u)
                    heapq.heappush(heap, (t + float(rng.random()), uid))
                for u in active[want:]:
                    u["active"] = False
            budget_left = limit is None or issued < limit
            in_flight = 0
            while heap and heap[0][0] < t + 1.0 and sec < n and budget_left:
                at, uid = heapq.heappop(heap)
                u = users[uid]
                if not u["active"]:
                    continue
                step = pickers[uid].next()
                svc = self.topo.route(step)
                ok, lat, status, comp = self.submit(svc, at, step.endpoint)
                issued += 1
                records.append(RequestRecord(at, lat, ok, step.endpoint, status))
                if ok:
                    self._served_now += 1
                    self._count_served(ok, svc, lat, comp)
                    pending.append((comp, len(records) - 1))
                    last_completion = max(last_completion, comp)
                in_flight += 1
                pause = step.think_time if step.think_time is not None else schedule.think_time
                if schedule.pause_gaps:
                    u["burst"] += 1
                    if u["burst"] >= schedule.burst_requests:
                        pause = schedule.gap(u["cycle"])
                        u["cycle"] += 1
                        u["burst"] = 0
                    else:
                        pause = 0.0
                nxt = (comp if ok else at) + pause
                heapq.heappush(heap, (nxt, uid))
                budget_left = limit is None or issued < limit
            max_in_flight.append(min(in_flight, len([u for u in users if u["active"]])))
            self._end_second()
            sec += 1
            if limit is not None and not budget_left:
                if last_completion <= self.now:
                    break
            elif sec >= n:
                break
            if limit is not None and sec >= n and last_completion <= self.now:
                break
        ended = self.now
        if limit is None:
            # responses still outstanding when the run stops are never seen by the client
            late = {i for comp, i in pending if comp > ended}
            if late:
                self.in_queue_at_end += len(late)
                for comp, i in pending:
                    if i in late:
                        self._unserve(comp)
                records = [r for i, r in enumerate(records) if i not in late]
        return DriveResult(records, started, ended, False, max_in_flight)

    def _unserve(self, completion):
        # counted as served at submission; move to the in-queue tally
        sec = int(math.floor(completion - self.epoch))
        for s in range(min(sec, len(self.served) - 1), -1, -1):
            if self.served[s] > 0:
                self.served[s] -= 1
                return

    # -- collector interface ---------------------------------------------------

    def samples(self, query: str, window, source="sim", layer=LayerTag.SERVICE,
                kind=None) -> list[MeasurementSample]:
        """Samples for ``query`` in ``[t0, t1)``: ``pod_cpu``, ``pod_mem``,
        ``pod_watts`` (every replica, platform and isolation pod) or
        ``node_watts``."""
        t0, t1 = window
        a = max(0, int(math.ceil(t0 - self.epoch)))
        with self.lock:
            b = min(len(self._rows), int(math.ceil(t1 - self.epoch)))
            rows = self._rows[a:b]
        meta = self.pod_meta()
        out = []
        for i, (reps, nodes) in enumerate(rows):
            ts = self.epoch + a + i
            if query == "node_watts":
                for nid in sorted(nodes):
                    out.append(MeasurementSample(ts, LayerTag.PHYSICAL, source, nid, None,
                                                 SampleKind.WATTS, nodes[nid], "W"))
                continue
            idx, k, unit = {"pod_cpu": (0, SampleKind.CPU_MILLICORES, "m"),
                            "pod_mem": (1, SampleKind.MEM_BYTES, "B"),
                            "pod_watts": (2, SampleKind.WATTS, "W")}[query]
            for rid in sorted(reps):
                v = reps[rid][idx]
                if math.isnan(v):
                    continue
                out.append(MeasurementSample(ts, layer, source, meta[rid].node, rid, k, v, unit))
        return out

    def pod_meta(self) -> dict[str, PodMeta]:
        meta = {}
        for st in self.services.values():
            svc = st.svc
            for r in st.replicas:
                life = [("created", r.created), ("ready", r.ready_at)]
                if r.terminated is not None:
                    life.append(("terminated", r.terminated))
                meta[r.id] = PodMeta(r.node, svc.name, LayerTag.SERVICE, svc.kind,
                                     float(svc.spec.cpu_limit), float(svc.spec.mem_limit), tuple(life))
        for p in self.platform:
            meta[_platform_id(p)] = PodMeta(p.node, p.namespace, LayerTag.PLATFORM, "pod", p.cpu_limit,
                                            p.mem_limit, (("created", self.epoch), ("ready", self.epoch)))
        for nid in self.nodes:
            meta[_isolation_id(nid)] = PodMeta(nid, "isolation", LayerTag.ISOLATION, "pod", None, None,
                                               (("created", self.epoch), ("ready", self.epoch)))
        return meta

    def ready(self) -> bool:
        t = self.now
        return all(self.ready_replicas(s.name, t) or s.kind == "function" for s in self.topo.services)

    def trace(self) -> SimTrace:
        with self.lock:
            rows = list(self._rows)
        meta = self.pod_meta()
        rids = sorted(meta)
        col = {r: j for j, r in enumerate(rids)}
        T = len(rows)
        cpu = np.full((T, len(rids)), np.nan)
        mem = np.full((T, len(rids)), np.nan)
        watts = np.full((T, len(rids)), np.nan)
        node_ids = sorted(self.nodes)
        node_watts = np.full((T, len(node_ids)), np.nan)
        for s, (reps, nodes) in enumerate(rows):
            for rid, (c, m, w) in reps.items():
                j = col[rid]
                cpu[s, j], mem[s, j], watts[s, j] = c, m, w
            for k, nid in enumerate(node_ids):
                node_watts[s, k] = nodes[nid]
        return SimTrace(self.epoch, rids, meta, cpu, mem, watts, node_ids, node_watts,
                        np.array(self.served, dtype=np.int64), np.array(self.failed, dtype=np.int64),
                        list(self.events), dict(self._ground), self.injected, self.in_queue_at_end)


def _platform_id(p: PlatformPod) -> str:
    return f"{p.namespace}.{p.name}"


def _isolation_id(node_id: str) -> str:
    return f"isolation.{node_id}"


def run_sim(topology: Topology, schedule: UserSchedule, seed: int = 0, scenario=(),
            settle: float = 0.0, epoch: float = DEFAULT_EPOCH,
            rule: OverProvisionRule = OverProvisionRule()) -> tuple[SimTrace, DriveResult]:
    """Deploy, optionally settle, play ``schedule``, and return the trace and
    the request log."""
    sim = Simulation(topology, seed, epoch, rule)
    while not sim.ready():
        sim.step(0)
    sim.advance(settle)
    result = sim.run_closed_loop(schedule, tuple(scenario) or (ScenarioStep(),), seed)
    return sim.trace(), result


def topology_to_dict(topo: Topology) -> dict[str, Any]:
    """Inverse of :func:`topology_from_dict` (numbers in canonical units)."""
    def svc(s: SimService):
        d = {"name": s.name, "per_request_cpu_ms": s.per_request_cpu_ms, "mem_floor": s.mem_floor,
             "service_time": s.service_time, "kind": s.kind, "cold_start": s.cold_start,
             "startup": s.startup, "idle_millicores": s.idle_millicores,
             "mem_per_request": s.mem_per_request, "response_bytes": s.response_bytes,
             "resources": s.spec.model_dump()}
        if s.autoscaler:
            d["autoscaler"] = dict(s.autoscaler.__dict__)
        return d

    return {
        "nodes": [dict(n.__dict__) for n in topo.nodes],
        "services": [svc(s) for s in topo.services],
        "platform_pods": [dict(p.__dict__) for p in topo.platform_pods],
        "routes": dict(topo.routes),
        "loadgen_node": topo.loadgen_node,
        "fn_idle_timeout": topo.fn_idle_timeout,
    }


def write_topology(topo: Topology, path):
    Path(path).write_text(yaml.safe_dump(topology_to_dict(topo), sort_keys=False), encoding="utf-8")
