"""Experiment orchestration: build, patch, deploy, settle, load, collect,
tear down and export every (variant, workload, repetition) cell, with retry
of faulty cells and a durable phase journal for crash recovery."""

from __future__ import annotations

import json
import logging
import os
import shutil
import subprocess
import time
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol

import yaml

from .aggregator import NoEnergyError, PodMeta, classify_layer, default_sut_selector
from .collectors import CollectorPool, Journal, poll
from .model import (
    CollectorConfig,
    ExperimentPlan,
    LayerTag,
    PlanError,
    QuerySpec,
    VariantSpec,
    WorkloadSpec,
    load_plan,
    parse_plan,
    patch_descriptor,
    render_plan,
)
from .report import compile_cell, export_cell, topology_doc, write_outputs
from .simulator import DEFAULT_EPOCH, Simulation, topology_from_dict
from .workloads import HttpTarget, build_schedule, drive, save_request_log

log = logging.getLogger(__name__)

PHASES = ("pending", "building", "patching", "deploying", "settling", "loading", "collecting",
          "tearing_down", "exporting", "done", "faulty", "retried")
_ACTIVE = PHASES[1:9]
LEGAL = {
    "pending": {"building"},
    "building": {"patching"},
    "patching": {"deploying"},
    "deploying": {"settling"},
    "settling": {"loading"},
    "loading": {"collecting"},
    "collecting": {"tearing_down"},
    "tearing_down": {"exporting"},
    "exporting": {"done"},
    "done": set(),
    "faulty": {"retried"},
    "retried": {"pending"},
}
for _p in _ACTIVE:
    LEGAL[_p] = LEGAL[_p] | {"faulty"}

CRASH_ENV = "ECOHARNESS_CRASH_AT"  # "<cell id>:<phase>", test hook
KUBECONFIG_ENV = "ECOHARNESS_KUBECONFIG"


class CellFailure(RuntimeError):
    """A cell attempt failed; the message becomes its diagnostic."""


class NoWorkloadNodeError(RuntimeError):
    pass


# --- run state -----------------------------------------------------------------


@dataclass
class RunState:
    cell: str
    phase: str = "pending"
    attempt: int = 1
    timestamps: dict = field(default_factory=dict)
    diagnostics: list = field(default_factory=list)
    history: list = field(default_factory=list)  # [{"attempt", "outcome", "diagnostic"}]
    handle: dict | None = None

    def advance(self, phase: str, now: float | None = None, diag: str = ""):
        if phase not in LEGAL[self.phase]:
            raise ValueError(f"{self.cell}: illegal transition {self.phase} -> {phase}")
        if phase == "pending":
            self.attempt += 1
        self.phase = phase
        self.timestamps[phase] = time.time() if now is None else now
        if diag:
            self.diagnostics.append(diag)

    def recover(self):
        """Reset an attempt cut short by a crash so it runs again under the
        same attempt number. Not a lifecycle transition: the attempt never
        produced a result."""
        if self.phase not in _ACTIVE:
            raise ValueError(f"{self.cell}: nothing to recover in phase {self.phase}")
        self.history.append({"attempt": self.attempt, "outcome": "interrupted", "phase": self.phase})
        self.phase = "pending"
        self.handle = None

    @property
    def faulty_attempts(self) -> int:
        return sum(1 for h in self.history if h["outcome"] == "faulty")


class StateJournal:
    """``state.jsonl``: one fsynced line per phase change."""

    def __init__(self, path):
        self.path = Path(path)

    def write(self, state: RunState, **extra):
        rec = {"cell": state.cell, "phase": state.phase, "attempt": state.attempt, "t": time.time()}
        if state.diagnostics and state.phase in ("faulty", "done"):
            rec["diag"] = state.diagnostics[-1]
        rec.update(extra)
        with open(self.path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
            fh.flush()
            os.fsync(fh.fileno())

    def replay(self) -> dict[str, RunState]:
        states: dict[str, RunState] = {}
        if not self.path.exists():
            return states
        with open(self.path, encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                try:
                    rec = json.loads(line)
                except json.JSONDecodeError:
                    break  # torn final line from a crash
                st = states.setdefault(rec["cell"], RunState(rec["cell"]))
                st.phase = rec["phase"]
                st.attempt = rec["attempt"]
                st.timestamps[rec["phase"]] = rec["t"]
                if "diag" in rec:
                    st.diagnostics.append(rec["diag"])
                if "handle" in rec:
                    st.handle = rec["handle"]
                if rec["phase"] == "faulty":
                    st.history.append({"attempt": rec["attempt"], "outcome": "faulty",
                                       "diagnostic": rec.get("diag", "")})
                elif rec["phase"] == "done":
                    st.history.append({"attempt": rec["attempt"], "outcome": "done"})
                elif rec.get("recovered"):
                    st.history.append({"attempt": rec["attempt"], "outcome": "interrupted",
                                       "phase": rec["recovered"]})
        return states


# --- drivers -------------------------------------------------------------------


class DeploymentDriver(Protocol):
    virtual_time: bool

    def build(self, variant: VariantSpec) -> dict: ...
    def deploy(self, descriptor, variant: VariantSpec, seed: int) -> object: ...
    def wait_ready(self, handle, timeout: float) -> bool: ...
    def topology(self, handle) -> dict: ...
    def teardown(self, handle) -> None: ...


@dataclass
class SimHandle:
    sim: Simulation
    variant: str
    torn_down: bool = False


class SimDriver:
    """Deploys descriptors that are simulator topologies. All waiting happens
    in simulated time."""

    virtual_time = True

    def __init__(self, plan: ExperimentPlan | None = None, epoch: float = DEFAULT_EPOCH,
                 ready_fails: bool = False):
        self.rule = plan.overprovision if plan else None
        self.epoch = epoch
        self.ready_fails = ready_fails
        self.logs: list[str] = []

    def build(self, variant):
        self.logs.append(f"build {variant.name}: nothing to build for simulated variants")
        return {"artifact": f"sim:{variant.name}"}

    def deploy(self, descriptor, variant, seed):
        topo = topology_from_dict(descriptor)
        kw = {"rule": self.rule} if self.rule is not None else {}
        sim = Simulation(topo, seed, self.epoch, **kw)
        self.logs.append(f"deploy {variant.name} seed={seed}")
        return SimHandle(sim, variant.name)

    def handle_ref(self, handle):
        return {"variant": handle.variant}

    def wait_ready(self, handle, timeout):
        if self.ready_fails:
            return False
        for _ in range(int(timeout)):
            if handle.sim.ready():
                return True
            handle.sim.step(0)
        return handle.sim.ready()

    def topology(self, handle):
        sim = handle.sim
        return {"pods": sim.pod_meta(), "nodes": sorted(sim.nodes),
                "node_ceilings": {n.id: n.p_max for n in sim.topo.nodes},
                "loadgen_node": sim.topo.loadgen_node}

    def settle(self, handle, seconds):
        handle.sim.advance(seconds)

    def now(self, handle):
        return handle.sim.now

    def target(self, handle):
        return handle.sim

    def provider(self, handle):
        return handle.sim

    def extras(self, handle, window):
        sim = handle.sim
        gt = sim.trace().ground_truth(window)
        return {"fn_invocations": [[f.duration, f.memory_bytes, f.used_memory_bytes]
                                   for f in sim.fn_invocations],
                "bytes_tx": sim.bytes_tx, "ground_truth": gt}

    def teardown(self, handle):
        if isinstance(handle, SimHandle):
            handle.torn_down = True

    def teardown_ref(self, ref):
        self.logs.append(f"teardown of interrupted deployment {ref}: simulated, nothing to do")


class ExternalCommandDriver:
    """Runs the plan's command templates as subprocesses (container build
    tool, cluster package manager, kubectl and so on) and keeps their full
    output. Templates may use ``{variant}``, ``{source}``, ``{branch}``,
    ``{descriptor}`` and ``{cell}``."""

    virtual_time = False

    def __init__(self, plan: ExperimentPlan, workdir):
        self.cfg = plan.driver
        self.infra_prefixes = plan.infra_prefixes
        self.workdir = Path(workdir)
        self.logs: list[str] = []

    def _env(self):
        env = dict(os.environ)
        env.update(self.cfg.env)
        if KUBECONFIG_ENV in os.environ and "KUBECONFIG" not in self.cfg.env:
            env["KUBECONFIG"] = os.environ[KUBECONFIG_ENV]
        return env

    def _run(self, name, ctx, timeout=None, check=True):
        template = self.cfg.commands.get(name)
        if not template:
            return ""
        cmd = template.format(**ctx)
        try:
            proc = subprocess.run(cmd, shell=True, capture_output=True, text=True, timeout=timeout,
                                  env=self._env(), cwd=self.workdir)
        except subprocess.TimeoutExpired as exc:
            self.logs.append(f"$ {cmd}\n[timeout after {timeout} s]\n{exc.stdout or ''}{exc.stderr or ''}")
            raise CellFailure(f"{name} timed out after {timeout} s") from None
        self.logs.append(f"$ {cmd}\n[exit {proc.returncode}]\n{proc.stdout}{proc.stderr}")
        if check and proc.returncode != 0:
            raise CellFailure(f"{name} failed with exit code {proc.returncode}: {proc.stderr.strip()[-500:]}")
        return proc.stdout

    @staticmethod
    def _ctx(variant, descriptor_path="", cell=""):
        return {"variant": variant.name, "source": variant.source, "branch": variant.branch or "",
                "descriptor": descriptor_path, "cell": cell}

    def build(self, variant):
        out = self._run("build", self._ctx(variant))
        return {"artifact": out.strip().splitlines()[-1] if out.strip() else variant.source}

    def deploy(self, descriptor, variant, seed):
        path = self.workdir / f"descriptor-{variant.name}.yaml"
        path.write_text(yaml.safe_dump(descriptor, sort_keys=False), encoding="utf-8")
        ctx = self._ctx(variant, str(path))
        self._run("deploy", ctx)
        return {"variant": variant.name, "ctx": ctx}

    def handle_ref(self, handle):
        return {"variant": handle["variant"], "ctx": handle["ctx"]}

    def wait_ready(self, handle, timeout):
        try:
            self._run("wait_ready", handle["ctx"], timeout=timeout)
        except CellFailure:
            return False
        return True

    def topology(self, handle):
        doc = json.loads(self._run("topology", handle["ctx"]) or "{}")
        pods = {}
        for pod, m in doc.get("pods", {}).items():
            layer = m.get("layer") or classify_layer(pod, m.get("namespace", ""), self.infra_prefixes)
            pods[pod] = PodMeta(m["node"], m.get("service", m.get("namespace", "")), LayerTag(layer),
                                m.get("deploy_kind", "pod"), m.get("cpu_limit"), m.get("mem_limit"),
                                tuple((e, float(t)) for e, t in m.get("lifecycle", [])))
        return {"pods": pods, "nodes": sorted(doc.get("nodes", {p.node for p in pods.values()})),
                "node_ceilings": doc.get("node_ceilings", {}), "loadgen_node": doc.get("loadgen_node")}

    def settle(self, handle, seconds):
        time.sleep(seconds)

    def now(self, handle):
        return time.time()

    def target(self, handle):
        url = self.cfg.commands.get("target_url", "")
        if not url:
            raise CellFailure("external driver needs commands.target_url")
        return HttpTarget(url.format(**handle["ctx"]))

    def provider(self, handle):
        return None

    def extras(self, handle, window):
        return {}

    def teardown(self, handle):
        if handle is None or handle.get("torn_down"):
            return
        self._run("teardown", handle["ctx"], check=False)
        handle["torn_down"] = True

    def teardown_ref(self, ref):
        self._run("teardown", ref["ctx"], check=False)


# --- helpers -----------------------------------------------------------------------


def isolate_workload_node(topology: dict, candidate_nodes, sut_selector=None) -> str:
    """First node (by id) that hosts no SUT replica. ``topology`` maps pod id
    to :class:`PodMeta`."""
    select = sut_selector or default_sut_selector()
    busy = {m.node for m in topology.values() if select(m.service, LayerTag(m.layer))}
    free = sorted(n for n in candidate_nodes if n not in busy)
    if not free:
        raise NoWorkloadNodeError("every node hosts SUT replicas; run the workload generator "
                                  "locally (outside the cluster) instead")
    return free[0]


def cell_id(variant: str, workload: str, rep: int) -> str:
    return f"{variant}/{workload}/{rep}"


def cell_seed(plan: ExperimentPlan, variant: str, workload: WorkloadSpec, rep: int) -> int:
    # independent of the attempt number so retries replay the same experiment
    return zlib.crc32(f"{plan.seed}/{variant}/{workload.name}/{workload.seed}/{rep}".encode())


def plan_cells(plan: ExperimentPlan):
    """Cells in execution order: all repetitions of a pair before the next pair."""
    for v in plan.variants:
        for w in plan.workloads_for(v):
            for rep in range(1, plan.repetitions + 1):
                yield v, w, rep


def default_sim_collectors() -> tuple[CollectorConfig, ...]:
    q = [QuerySpec(query="pod_cpu", layer="service", kind="cpu_millicores", unit="m"),
         QuerySpec(query="pod_mem", layer="service", kind="mem_bytes", unit="B"),
         QuerySpec(query="pod_watts", layer="service", kind="watts", unit="W"),
         QuerySpec(query="node_watts", layer="physical", kind="watts", unit="W")]
    return (CollectorConfig(id="sim", backend="simulator", queries=tuple(q), poll_interval=5.0),)


def prepare_descriptor(variant: VariantSpec, base_dir) -> dict:
    """Load the variant's descriptor, apply its resource specs (for
    descriptors with a ``services`` list) and its patches."""
    path = Path(variant.deployment_descriptor)
    if not path.is_absolute():
        path = Path(base_dir) / path
    try:
        doc = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
    except OSError as exc:
        raise PlanError(f"variants.{variant.name}: cannot read descriptor {path}: {exc}") from None
    if variant.resource_specs and isinstance(doc.get("services"), list):
        known = {s.get("name") for s in doc["services"]}
        for name in variant.resource_specs:
            if name not in known:
                raise PlanError(f"variants.{variant.name}.resource_specs: unknown service {name!r}")
        for svc in doc["services"]:
            spec = variant.resource_specs.get(svc.get("name"))
            if spec is not None:
                svc["resources"] = spec.model_dump()
    return patch_descriptor(doc, variant.patches)


def _clear_attempt(cell_dir: Path):
    cell_dir.mkdir(parents=True, exist_ok=True)
    for f in cell_dir.iterdir():
        if f.name == "attempts":
            continue
        if f.is_dir():
            shutil.rmtree(f)
        else:
            f.unlink()


def _archive_attempt(cell_dir: Path, label: str):
    dest = cell_dir / "attempts" / label
    if dest.exists():
        shutil.rmtree(dest)
    dest.mkdir(parents=True)
    for f in list(cell_dir.iterdir()):
        if f.name != "attempts":
            shutil.move(str(f), dest / f.name)


# --- execution ---------------------------------------------------------------------


@dataclass
class RunArtifact:
    cell: str
    state: RunState
    directory: Path


class Runner:
    def __init__(self, plan: ExperimentPlan, driver, run_dir, descriptors: dict):
        self.plan = plan
        self.driver = driver
        self.run_dir = Path(run_dir)
        self.descriptors = descriptors
        self.journal = StateJournal(self.run_dir / "state.jsonl")
        self.collectors = plan.collectors or (default_sim_collectors() if driver.virtual_time else ())
        self.states: dict[str, RunState] = {}
        self.live = None  # (variant, handle) kept up when teardown_between_runs is off

    def _set(self, st: RunState, phase: str, diag: str = "", **extra):
        st.advance(phase, diag=diag)
        self.journal.write(st, **extra)
        crash = os.environ.get(CRASH_ENV)
        if crash and crash == f"{st.cell}:{phase}":
            os._exit(75)

    def run_cell(self, variant: VariantSpec, workload: WorkloadSpec, rep: int, st: RunState,
                 last_of_variant: bool = True):
        cid = st.cell
        cell_dir = self.run_dir / cid
        plan = self.plan
        while st.phase != "done":
            if st.phase == "faulty":
                if st.faulty_attempts >= plan.max_attempts:
                    return
                self._set(st, "retried")
                self._set(st, "pending")
            _clear_attempt(cell_dir)
            try:
                self._attempt(variant, workload, rep, st, cell_dir, last_of_variant)
            except (CellFailure, NoEnergyError, OSError, ValueError) as exc:
                diag = f"{type(exc).__name__}: {exc}" if not isinstance(exc, CellFailure) else str(exc)
                log.warning("%s attempt %d faulty: %s", cid, st.attempt, diag)
                self._write_log(cell_dir)
                self._set(st, "faulty", diag=diag)
                st.history.append({"attempt": st.attempt, "outcome": "faulty", "diagnostic": diag})
                _archive_attempt(cell_dir, str(st.attempt))

    def _write_log(self, cell_dir: Path):
        logs = getattr(self.driver, "logs", [])
        if logs:
            with open(cell_dir / "driver.log", "a", encoding="utf-8") as fh:
                fh.write("\n".join(logs) + "\n")
            logs.clear()

    def _drop_live(self):
        if self.live is not None:
            self.driver.teardown(self.live[1])
            self.live = None

    def _attempt(self, variant, workload, rep, st: RunState, cell_dir: Path, last_of_variant=True):
        plan, driver = self.plan, self.driver
        seed = cell_seed(plan, variant.name, workload, rep)
        handle = None
        try:
            self._set(st, "building")
            try:
                driver.build(variant)
            except CellFailure as exc:
                raise CellFailure(f"build failed: {exc}") from None
            self._set(st, "patching")
            descriptor = self.descriptors[variant.name]
            (cell_dir / "descriptor.yaml").write_text(yaml.safe_dump(descriptor, sort_keys=False),
                                                      encoding="utf-8")
            if plan.driver.loadgen_node and isinstance(descriptor, dict) and driver.virtual_time:
                descriptor = {**descriptor, "loadgen_node": plan.driver.loadgen_node}
            self._set(st, "deploying")
            reused = self.live is not None and self.live[0] == variant.name
            if reused:
                handle = self.live[1]
            else:
                self._drop_live()
                handle = driver.deploy(descriptor, variant, seed)
            self.live = None
            self.journal.write(st, handle=driver.handle_ref(handle))
            if not driver.wait_ready(handle, plan.driver.ready_timeout):
                raise CellFailure(f"readiness timeout after {plan.driver.ready_timeout} s")
            self._set(st, "settling")
            driver.settle(handle, plan.inter_run_settle if reused else plan.settle)
            topo = driver.topology(handle)
            loadgen = plan.driver.loadgen_node or topo.get("loadgen_node")
            if not loadgen:
                try:
                    loadgen = isolate_workload_node(topo["pods"], topo["nodes"],
                                                    default_sut_selector(plan.infra_prefixes))
                except NoWorkloadNodeError as exc:
                    log.warning("%s: %s", st.cell, exc)
                    loadgen = None

            self._set(st, "loading")
            journal = Journal(cell_dir)
            schedule = build_schedule(workload)
            target = driver.target(handle)
            if driver.virtual_time:
                result = drive(schedule, target, plan.scenario, seed)
            else:
                pool = CollectorPool(self.collectors, journal, attempt=st.attempt)
                pool.start(driver.now(handle))
                result = drive(schedule, target, plan.scenario, seed)
            window = (result.started, result.ended)
            save_request_log(result.records, cell_dir / "requests.csv")
            if result.aborted:
                raise CellFailure(f"workload aborted: {result.diagnostic}")

            self._set(st, "collecting")
            if driver.virtual_time:
                provider = driver.provider(handle)
                for cfg in self.collectors:
                    t = window[0]
                    while t < window[1]:
                        t1 = min(t + cfg.poll_interval, window[1])
                        journal.append(poll(cfg, (t, t1), provider=provider, attempt=st.attempt, now=t1))
                        t = t1
            else:
                pool.stop(window[1])
            topo = driver.topology(handle)
            (cell_dir / "topology.json").write_text(
                json.dumps(topology_doc(topo["pods"], topo.get("node_ceilings"), loadgen),
                           indent=1, sort_keys=True) + "\n", encoding="utf-8")
            extras = driver.extras(handle, window)
            gt = extras.pop("ground_truth", None)
            if gt is not None:
                (cell_dir / "ground_truth.json").write_text(json.dumps(gt, indent=1, sort_keys=True) + "\n",
                                                            encoding="utf-8")
            run = {"cell": st.cell, "seed": seed, "window": [window[0], window[1]],
                   "requests": len(result.records), **extras}
            (cell_dir / "run.json").write_text(json.dumps(run, sort_keys=True) + "\n", encoding="utf-8")

            self._set(st, "tearing_down")
            if plan.teardown_between_runs or last_of_variant:
                driver.teardown(handle)
            else:
                self.live = (variant.name, handle)
            handle = None

            self._set(st, "exporting")
            res = compile_cell(cell_dir, plan, variant.name, workload.name, rep)
            failed = [b for b in journal.batches() if b["status"] == "failed"
                      and any(c.id == b["collector_id"] and c.mandatory for c in self.collectors)]
            if failed:
                raise CellFailure(f"mandatory collector {failed[0]['collector_id']} failed: "
                                  f"{failed[0]['diagnostic']}")
            worst = min(res.kind_coverage.items(), key=lambda kv: kv[1], default=("any", 0.0))
            if worst[1] < plan.coverage_threshold:
                raise CellFailure(f"collector coverage {worst[1]:.3f} for {worst[0]} below "
                                  f"threshold {plan.coverage_threshold}")
            export_cell(cell_dir, res)
            self._write_log(cell_dir)
            self._set(st, "done")
            st.history.append({"attempt": st.attempt, "outcome": "done"})
        finally:
            # teardown runs for every attempt that reached deploying
            if handle is not None:
                driver.teardown(handle)


def _history(states: dict[str, RunState]) -> dict:
    return {c: {"phase": s.phase, "attempts": s.history} for c, s in sorted(states.items())}


def _seeds(plan):
    return {cell_id(v.name, w.name, r): cell_seed(plan, v.name, w, r) for v, w, r in plan_cells(plan)}


def execute_plan(plan: ExperimentPlan, driver, run_dir, plan_dir=".", descriptors=None) -> list[RunArtifact]:
    """Run every cell of ``plan`` (skipping cells already done according to
    the journal in ``run_dir``) and write the comparison and manifest."""
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    if descriptors is None:
        descriptors = {v.name: prepare_descriptor(v, plan_dir) for v in plan.variants}
    snap = run_dir / "plan.yaml"
    if not snap.exists():
        snap.write_text(render_plan(plan), encoding="utf-8")
        ddir = run_dir / "descriptors"
        ddir.mkdir(exist_ok=True)
        for name, doc in descriptors.items():
            (ddir / f"{name}.yaml").write_text(yaml.safe_dump(doc, sort_keys=False), encoding="utf-8")
    cells = [cell_id(v.name, w.name, r) for v, w, r in plan_cells(plan)]
    (run_dir / "cells.json").write_text(json.dumps(cells) + "\n", encoding="utf-8")

    runner = Runner(plan, driver, run_dir, descriptors)
    states = runner.journal.replay()
    for st in states.values():
        if st.phase in _ACTIVE:
            if PHASES.index(st.phase) >= PHASES.index("deploying"):
                driver.teardown_ref(st.handle or {"variant": st.cell.split("/")[0]})
            interrupted = st.phase
            st.recover()
            runner.journal.write(st, recovered=interrupted)
    runner.states = states
    out = []
    order = list(plan_cells(plan))
    ran = False
    for i, (v, w, rep) in enumerate(order):
        cid = cell_id(v.name, w.name, rep)
        st = states.setdefault(cid, RunState(cid))
        if st.phase != "done":
            if ran and not driver.virtual_time and plan.teardown_between_runs:
                time.sleep(plan.inter_run_settle)
            last = i + 1 == len(order) or order[i + 1][0].name != v.name
            runner.run_cell(v, w, rep, st, last)
            ran = True
        out.append(RunArtifact(cid, st, run_dir / cid))
    runner._drop_live()
    write_outputs(run_dir, plan, _history(states), _seeds(plan), descriptors)
    return out


def make_driver(kind: str, plan: ExperimentPlan, run_dir):
    if kind == "sim":
        return SimDriver(plan)
    if kind == "external":
        return ExternalCommandDriver(plan, run_dir)
    raise PlanError(f"unknown driver {kind!r}")


def preflight(plan: ExperimentPlan, window_seconds: float = 60.0) -> list[str]:
    """Query each mandatory collector once; the observers are expected to be
    installed already, so a failure here is reported, not fixed."""
    problems = []
    now = time.time()
    for cfg in plan.collectors:
        if not cfg.mandatory or cfg.backend == "simulator":
            continue
        b = poll(cfg, (now - window_seconds, now))
        if b.status == "failed":
            problems.append(f"collector {cfg.id}: {b.diagnostic}")
    return problems


def run_plan_file(plan_path, run_dir=None, driver_kind=None) -> tuple[list[RunArtifact], Path]:
    plan = load_plan(plan_path)
    plan_dir = Path(plan_path).resolve().parent
    run_dir = Path(run_dir) if run_dir else plan_dir / plan.output_dir / plan.name
    kind = driver_kind or plan.driver.kind
    descriptors = {v.name: prepare_descriptor(v, plan_dir) for v in plan.variants}
    if kind == "sim":
        for name, doc in descriptors.items():
            try:
                topology_from_dict(doc)
            except (KeyError, TypeError, ValueError) as exc:
                raise PlanError(f"variants.{name}: invalid simulator topology: {exc}") from None
    if kind == "external":
        problems = preflight(plan)
        if problems:
            raise PlanError("preflight failed: " + "; ".join(problems))
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "driver.json").write_text(json.dumps({"kind": kind}) + "\n", encoding="utf-8")
    driver = make_driver(kind, plan, run_dir)
    return execute_plan(plan, driver, run_dir, plan_dir, descriptors), run_dir


def resume(run_dir, driver=None) -> list[RunArtifact]:
    """Continue a run from its plan snapshot and state journal."""
    run_dir = Path(run_dir)
    snap = run_dir / "plan.yaml"
    if not snap.exists():
        raise PlanError(f"{run_dir}: no plan snapshot; not a run directory")
    plan = parse_plan(snap.read_text(encoding="utf-8"))
    descriptors = {}
    for v in plan.variants:
        descriptors[v.name] = yaml.safe_load((run_dir / "descriptors" / f"{v.name}.yaml").read_text(
            encoding="utf-8"))
    if driver is None:
        kind = "sim"
        if (run_dir / "driver.json").exists():
            kind = json.loads((run_dir / "driver.json").read_text(encoding="utf-8"))["kind"]
        driver = make_driver(kind, plan, run_dir)
    return execute_plan(plan, driver, run_dir, descriptors=descriptors)


def exit_code(artifacts) -> int:
    return 0 if all(a.state.phase == "done" for a in artifacts) else 2
