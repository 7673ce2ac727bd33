"""Workload shapes as per-second user schedules, and the closed-loop driver
that plays them against an HTTP service or a simulated cluster."""

from __future__ import annotations

import csv
import logging
import math
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import yaml

from .collectors import format_number
from .model import RequestRecord, ScenarioStep, WorkloadSpec

log = logging.getLogger(__name__)

REQUEST_LOG_HEADER = ["start", "endpoint", "status", "latency_s", "success"]

# shaped day profile: (hour, relative height, width in hours)
DAY_BUMPS = (
    (9.0, 1.0, 1.5),
    (17.0, 1.0, 1.5),
    (13.0, 0.5, 1.0),
    (20.5, 0.3, 1.0),
)


@dataclass(frozen=True)
class UserSchedule:
    target_users: tuple[int, ...]
    stop_condition: tuple = ("duration",)  # ("duration",) | ("request_count", n)
    think_time: float = 1.0
    # pausing workloads only: pause after each burst, doubling per cycle
    pause_gaps: tuple[float, ...] = ()
    burst_requests: int = 0
    step: float = 1.0

    @property
    def duration(self) -> float:
        return len(self.target_users) * self.step

    @property
    def request_limit(self) -> int | None:
        if self.stop_condition[0] == "request_count":
            return int(self.stop_condition[1])
        return None

    def gap(self, k: int) -> float:
        if k < len(self.pause_gaps):
            return self.pause_gaps[k]
        return self.pause_gaps[-1] * 2.0 ** (k - len(self.pause_gaps) + 1)


@dataclass
class DriveResult:
    records: list[RequestRecord]
    started: float
    ended: float
    aborted: bool = False
    max_in_flight: list[int] = field(default_factory=list)
    diagnostic: str = ""


def _day_curve(n: int) -> np.ndarray:
    hours = 24.0 * np.arange(n, dtype=np.float64) / n
    curve = np.zeros(n)
    for center, height, width in DAY_BUMPS:
        curve += height * np.exp(-0.5 * ((hours - center) / width) ** 2)
    return curve / curve.max()


def build_schedule(spec: WorkloadSpec) -> UserSchedule:
    """Per-second target concurrency for one workload."""
    n = int(math.ceil(spec.duration))
    peak = spec.peak_users
    if spec.shape == "stress":
        if n == 1:
            users = np.array([peak])
        else:
            users = np.rint(peak * np.arange(n) / (n - 1)).astype(int)
        return UserSchedule(tuple(int(u) for u in users), think_time=spec.think_time)
    if spec.shape == "fixed":
        return UserSchedule((peak,) * n, ("request_count", spec.fixed_request_count),
                            think_time=spec.think_time)
    if spec.shape == "shaped":
        floor = max(1, int(round(spec.floor_fraction * peak)))
        users = np.maximum(np.rint(peak * _day_curve(n)).astype(int), floor)
        return UserSchedule(tuple(int(u) for u in users), think_time=spec.think_time)
    # pausing
    if spec.think_time <= 0:
        raise ValueError("pausing workload needs think_time > 0")
    gaps = []
    total = 0.0
    gap = spec.think_time
    while not gaps or total + gap <= spec.duration:
        gaps.append(gap)
        total += gap
        gap *= 2.0
    return UserSchedule((spec.pausing_users,) * n, think_time=spec.think_time, pause_gaps=tuple(gaps),
                        burst_requests=spec.burst_requests)


# --- scenario ----------------------------------------------------------------


def load_scenario(path) -> tuple[ScenarioStep, ...]:
    with open(path, encoding="utf-8") as fh:
        doc = yaml.safe_load(fh)
    steps = doc.get("steps", []) if isinstance(doc, dict) else doc
    return tuple(ScenarioStep.model_validate(s) for s in steps)


class StepPicker:
    """Weighted choice over scenario steps from a private RNG."""

    def __init__(self, scenario: Sequence[ScenarioStep], rng: np.random.Generator):
        self.steps = list(scenario) or [ScenarioStep()]
        w = np.array([s.weight for s in self.steps], dtype=np.float64)
        self.cum = np.cumsum(w / w.sum())
        self.rng = rng

    def next(self) -> ScenarioStep:
        if len(self.steps) == 1:
            return self.steps[0]
        i = int(np.searchsorted(self.cum, self.rng.random(), side="right"))
        return self.steps[min(i, len(self.steps) - 1)]


# --- request log ---------------------------------------------------------------


def write_request_log(records, fh):
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(REQUEST_LOG_HEADER)
    for r in records:
        w.writerow([format_number(r.start), r.endpoint, r.status, format_number(r.latency),
                    "true" if r.success else "false"])


def read_request_log(fh) -> list[RequestRecord]:
    rows = csv.reader(fh)
    header = next(rows, None)
    if header is None:
        return []
    if header != REQUEST_LOG_HEADER:
        raise ValueError(f"unexpected request log header {header!r}")
    return [RequestRecord(float(s), float(lat), ok == "true", ep, int(st))
            for s, ep, st, lat, ok in rows]


# --- HTTP execution --------------------------------------------------------------


class HttpTarget:
    """Executes scenario steps against ``base_url``. Latency spans connection
    setup through the last byte of the response body."""

    def __init__(self, base_url: str, timeout: float = 30.0):
        self.base_url = base_url.rstrip("/")
        self.timeout = timeout
        self._local = threading.local()

    def _session(self):
        import requests

        if not hasattr(self._local, "session"):
            self._local.session = requests.Session()
        return self._local.session

    def execute(self, step: ScenarioStep) -> RequestRecord:
        import requests

        start = time.time()
        t0 = time.perf_counter()
        try:
            resp = self._session().request(step.method, self.base_url + step.path,
                                           timeout=self.timeout)
            _ = resp.content
            status = resp.status_code
        except requests.RequestException:
            status = 0
        latency = time.perf_counter() - t0
        return RequestRecord(start, latency, 200 <= status < 400, step.endpoint, status)


class CallableTarget:
    """Adapter for ``fn(step) -> status``; handy for tests and custom clients."""

    def __init__(self, fn: Callable[[ScenarioStep], int]):
        self.fn = fn

    def execute(self, step: ScenarioStep) -> RequestRecord:
        start = time.time()
        t0 = time.perf_counter()
        try:
            status = int(self.fn(step))
        except Exception:  # noqa: BLE001 - any client failure is a failed request
            status = 0
        return RequestRecord(start, time.perf_counter() - t0, 200 <= status < 400, step.endpoint, status)


# --- closed-loop driver ---------------------------------------------------------


class _Budget:
    def __init__(self, limit):
        self.limit = limit
        self.used = 0
        self.lock = threading.Lock()

    def take(self) -> bool:
        with self.lock:
            if self.limit is not None and self.used >= self.limit:
                return False
            self.used += 1
            return True


class _RealTimeDriver:
    def __init__(self, schedule, target, scenario, seed, unreachable_timeout):
        self.schedule = schedule
        self.target = target
        self.scenario = scenario
        self.seed = seed
        self.unreachable_timeout = unreachable_timeout
        self.records: list[RequestRecord] = []
        self.lock = threading.Lock()
        self.budget = _Budget(schedule.request_limit)
        self.stop_all = threading.Event()
        self.in_flight: set[int] = set()
        self.last_answer = time.time()
        self.first_failure = None

    def _sink(self, rec):
        with self.lock:
            self.records.append(rec)
            if rec.status != 0:
                self.last_answer = time.time()
                self.first_failure = None
            elif self.first_failure is None:
                self.first_failure = time.time()

    def _user(self, uid, stop: threading.Event):
        rng = np.random.default_rng([self.seed, uid])
        picker = StepPicker(self.scenario, rng)
        sched = self.schedule
        cycle = burst = 0
        # stagger first requests over the first second
        if stop.wait(float(rng.random())):
            return
        while not stop.is_set() and not self.stop_all.is_set():
            if not self.budget.take():
                self.stop_all.set()
                return
            step = picker.next()
            with self.lock:
                self.in_flight.add(uid)
            rec = self.target.execute(step)
            with self.lock:
                self.in_flight.discard(uid)
            self._sink(rec)
            pause = step.think_time if step.think_time is not None else sched.think_time
            if sched.pause_gaps:
                burst += 1
                if burst >= sched.burst_requests:
                    pause = sched.gap(cycle)
                    cycle += 1
                    burst = 0
                else:
                    pause = 0.0
            if pause > 0 and stop.wait(pause):
                return

    def run(self) -> DriveResult:
        started = time.time()
        users: list[tuple[threading.Thread, threading.Event]] = []
        max_in_flight = []
        aborted = False
        diag = ""
        for sec, want in enumerate(self.schedule.target_users):
            tick = started + sec * self.schedule.step
            active = [u for u in users if not u[1].is_set()]
            while len(active) < want:
                ev = threading.Event()
                th = threading.Thread(target=self._user, args=(len(users), ev), daemon=True)
                users.append((th, ev))
                active.append((th, ev))
                th.start()
            for th, ev in active[want:]:
                ev.set()
            peak = 0
            end = tick + self.schedule.step
            while time.time() < end and not self.stop_all.is_set():
                with self.lock:
                    # users told to stop are draining, not part of the concurrency
                    busy = sum(1 for u in self.in_flight if not users[u][1].is_set())
                    peak = max(peak, busy)
                    ff = self.first_failure
                if ff is not None and time.time() - ff > self.unreachable_timeout:
                    aborted = True
                    diag = f"target unreachable for > {self.unreachable_timeout} s"
                    self.stop_all.set()
                    break
                time.sleep(min(0.01, max(0.0, end - time.time())))
            max_in_flight.append(peak)
            if self.stop_all.is_set():
                break
        self.stop_all.set()
        for th, ev in users:
            ev.set()
        for th, _ in users:
            th.join()
        recs = sorted(self.records, key=lambda r: r.start)
        return DriveResult(recs, started, time.time(), aborted, max_in_flight, diag)


def drive(schedule: UserSchedule, target, scenario: Sequence[ScenarioStep] = (), seed: int = 0,
          unreachable_timeout: float = 30.0) -> DriveResult:
    """Hold closed-loop concurrency at ``schedule.target_users[t]`` against
    ``target`` and record every request.

    Targets that keep their own clock (the simulator) expose
    ``run_closed_loop(schedule, scenario, seed)`` and are driven in virtual
    time; anything with ``execute(step) -> RequestRecord`` runs in real time
    with one thread per virtual user.
    """
    scenario = tuple(scenario) or (ScenarioStep(),)
    if hasattr(target, "run_closed_loop"):
        return target.run_closed_loop(schedule, scenario, seed)
    if not any(schedule.target_users):
        now = time.time()
        return DriveResult([], now, now, False, [0] * len(schedule.target_users))
    return _RealTimeDriver(schedule, target, scenario, seed, unreachable_timeout).run()


def save_request_log(records, path):
    with open(Path(path), "w", encoding="utf-8", newline="") as fh:
        write_request_log(records, fh)


def load_request_log(path):
    with open(Path(path), encoding="utf-8", newline="") as fh:
        return read_request_log(fh)
