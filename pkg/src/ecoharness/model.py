"""Shared domain types and the experiment-plan schema.

Hot-path records (samples, requests) are frozen slotted dataclasses. Anything
that comes out of a config document is a frozen pydantic model so validation
errors carry the key path of the offending entry.
"""

from __future__ import annotations

import copy
import math
import re
from dataclasses import dataclass
from enum import Enum
from typing import Annotated, Any, Literal

import yaml
from pydantic import (
    BaseModel,
    BeforeValidator,
    ConfigDict,
    Field,
    ValidationError,
    field_validator,
    model_validator,
)

JOULES_PER_WH = 3600.0
BYTES_PER_GB = 1024**3
BYTES_PER_MB = 1024**2


class PlanError(ValueError):
    """Config document failed schema or invariant checks."""


class LayerTag(str, Enum):
    APPLICATION = "application"
    SERVICE = "service"
    PLATFORM = "platform"
    ISOLATION = "isolation"
    PHYSICAL = "physical"


class SampleKind(str, Enum):
    CPU_MILLICORES = "cpu_millicores"
    CPU_FRACTION = "cpu_fraction"
    MEM_BYTES = "mem_bytes"
    WATTS = "watts"
    REQUEST_COUNT = "request_count"
    # cumulative energy counter, stored in joules after ingestion
    ENERGY_JOULES = "energy_joules"
    CUSTOM = "custom"


COUNTER_KINDS = frozenset({SampleKind.REQUEST_COUNT, SampleKind.ENERGY_JOULES})


@dataclass(frozen=True, slots=True)
class MeasurementSample:
    timestamp: float
    layer: LayerTag
    source: str
    node: str
    pod: str | None
    kind: SampleKind
    value: float
    unit: str
    service: str | None = None

    def __post_init__(self):
        v = self.value
        if not math.isfinite(v):
            raise ValueError(f"sample value must be finite, got {v!r}")
        if self.kind is SampleKind.CPU_FRACTION and not 0.0 <= v <= 1.0:
            raise ValueError(f"cpu_fraction outside [0, 1]: {v}")
        if self.kind in (SampleKind.WATTS, SampleKind.MEM_BYTES, SampleKind.ENERGY_JOULES) and v < 0:
            raise ValueError(f"{self.kind.value} must be >= 0, got {v}")
        object.__setattr__(self, "timestamp", round(float(self.timestamp), 3))
        object.__setattr__(self, "layer", LayerTag(self.layer))
        object.__setattr__(self, "kind", SampleKind(self.kind))

    @property
    def series_key(self) -> tuple[str, str]:
        return (self.pod if self.pod else self.node, self.kind.value)


@dataclass(frozen=True, slots=True)
class RequestRecord:
    start: float
    latency: float
    success: bool
    endpoint: str
    status: int

    def __post_init__(self):
        if not (math.isfinite(self.latency) and self.latency >= 0):
            raise ValueError(f"latency must be finite and >= 0, got {self.latency!r}")


# --- quantities -------------------------------------------------------------

_QTY = re.compile(r"^\s*([0-9]*\.?[0-9]+(?:[eE][-+]?[0-9]+)?)\s*([A-Za-z]*)\s*$")
_MEM_SUFFIX = {
    "": 1,
    "b": 1,
    "k": 10**3,
    "m": 10**6,
    "g": 10**9,
    "t": 10**12,
    "ki": 2**10,
    "mi": 2**20,
    "gi": 2**30,
    "ti": 2**40,
    # byte-suffixed units follow the binary convention used by cloud billing
    "kb": 2**10,
    "mb": 2**20,
    "gb": 2**30,
    "tb": 2**40,
}


def parse_cpu(value: Any) -> int:
    """CPU quantity to millicores. Bare numbers are millicores; strings follow
    Kubernetes notation ("2000m", "2", "0.5")."""
    if isinstance(value, bool):
        raise ValueError(f"not a cpu quantity: {value!r}")
    if isinstance(value, (int, float)):
        return int(round(value))
    m = _QTY.match(str(value))
    if not m:
        raise ValueError(f"not a cpu quantity: {value!r}")
    num, suffix = float(m.group(1)), m.group(2)
    if suffix == "m":
        return int(round(num))
    if suffix == "":
        return int(round(num * 1000))
    raise ValueError(f"unknown cpu suffix {suffix!r} in {value!r}")


def parse_mem(value: Any) -> int:
    """Memory quantity to bytes ("3000Mi", "3Gi", "500MB", 1073741824)."""
    if isinstance(value, bool):
        raise ValueError(f"not a memory quantity: {value!r}")
    if isinstance(value, (int, float)):
        return int(round(value))
    m = _QTY.match(str(value))
    if not m:
        raise ValueError(f"not a memory quantity: {value!r}")
    num, suffix = float(m.group(1)), m.group(2).lower()
    if suffix not in _MEM_SUFFIX:
        raise ValueError(f"unknown memory suffix {m.group(2)!r} in {value!r}")
    return int(round(num * _MEM_SUFFIX[suffix]))


Millicores = Annotated[int, BeforeValidator(parse_cpu)]
Bytes = Annotated[int, BeforeValidator(parse_mem)]


# --- config models ----------------------------------------------------------


class _Frozen(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")


class ResourceSpec(_Frozen):
    cpu_limit: Millicores
    mem_limit: Bytes
    replicas_min: int = 1
    replicas_max: int = 1

    @field_validator("cpu_limit", "mem_limit")
    @classmethod
    def _positive(cls, v):
        if v <= 0:
            raise ValueError("limits > 0")
        return v

    @model_validator(mode="after")
    def _replicas(self):
        if self.replicas_min < 1:
            raise ValueError("replicas_min ≥ 1")
        if self.replicas_max < self.replicas_min:
            raise ValueError("replicas_max ≥ replicas_min")
        return self


class Patch(_Frozen):
    path: str
    value: Any


class VariantSpec(_Frozen):
    name: str
    source: str
    branch: str | None = None
    deployment_descriptor: str
    resource_specs: dict[str, ResourceSpec] = Field(default_factory=dict)
    patches: tuple[Patch, ...] = ()
    # optional subset of plan workloads; comparisons assume shared workloads
    workloads: tuple[str, ...] | None = None

    @field_validator("patches", mode="before")
    @classmethod
    def _patch_mapping(cls, v):
        if isinstance(v, dict):
            return [{"path": k, "value": val} for k, val in v.items()]
        return v


WorkloadShape = Literal["shaped", "fixed", "pausing", "stress"]


class WorkloadSpec(_Frozen):
    name: str = ""
    shape: WorkloadShape
    duration: float
    peak_users: int
    fixed_request_count: int | None = None
    seed: int = 0
    think_time: float = 1.0
    pausing_users: int = 25
    burst_requests: int = 5
    floor_fraction: float = 0.05

    @model_validator(mode="before")
    @classmethod
    def _default_name(cls, data):
        if isinstance(data, dict) and not data.get("name") and data.get("shape"):
            data = {**data, "name": data["shape"]}
        return data

    @model_validator(mode="after")
    def _check(self):
        if not self.duration > 0:
            raise ValueError("duration > 0")
        if self.peak_users < 1:
            raise ValueError("peak_users ≥ 1")
        if self.think_time < 0:
            raise ValueError("think_time ≥ 0")
        if (self.fixed_request_count is not None) != (self.shape == "fixed"):
            raise ValueError("fixed_request_count required iff shape = fixed")
        if self.fixed_request_count is not None and self.fixed_request_count < 1:
            raise ValueError("fixed_request_count ≥ 1")
        if self.pausing_users < 1 or self.burst_requests < 1:
            raise ValueError("pausing_users ≥ 1 and burst_requests ≥ 1")
        return self


class QuerySpec(_Frozen):
    query: str
    layer: LayerTag
    kind: SampleKind
    unit: str = ""


class CollectorConfig(_Frozen):
    id: str
    backend: Literal["tsdb_http", "cluster_metrics", "power_meter", "trace_replay", "simulator"]
    endpoint: str = ""
    queries: tuple[QuerySpec, ...] = ()
    poll_interval: float = 5.0
    mandatory: bool = True
    options: dict[str, Any] = Field(default_factory=dict)

    @field_validator("poll_interval")
    @classmethod
    def _interval(cls, v):
        if not 1 <= v <= 60:
            raise ValueError("poll_interval ∈ [1, 60]")
        return v


class CostBook(_Frozen):
    """Per-second prices. Defaults are AWS us-east-1 list prices for Fargate
    (ECS pods) and Lambda, converted to seconds."""

    pod_cpu_price: float = 0.04048 / 3600
    pod_mem_price: float = 0.004445 / 3600
    fn_invocation_price: float = 0.20 / 1_000_000
    fn_gbs_price: float = 0.0000166667
    currency: str = "USD"

    @model_validator(mode="after")
    def _non_negative(self):
        for name in ("pod_cpu_price", "pod_mem_price", "fn_invocation_price", "fn_gbs_price"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} ≥ 0")
        return self


class AuxModel(_Frozen):
    pue: float = 1.0
    network_j_per_gb: float = 0.0
    storage_j_per_gb_s: float = 0.0

    @model_validator(mode="after")
    def _check(self):
        if self.pue < 1:
            raise ValueError("pue ≥ 1")
        if self.network_j_per_gb < 0 or self.storage_j_per_gb_s < 0:
            raise ValueError("auxiliary energy factors ≥ 0")
        return self


class OverProvisionRule(_Frozen):
    cpu_threshold: float = 0.49
    mem_threshold: float = 0.49
    require_peer_headroom: bool = True

    @model_validator(mode="after")
    def _check(self):
        for name in ("cpu_threshold", "mem_threshold"):
            if not 0 < getattr(self, name) < 1:
                raise ValueError(f"{name} ∈ (0, 1)")
        return self


class CleaningConfig(_Frozen):
    method: Literal["mad", "none"] = "mad"
    mad_k: float = 5.0
    max_gap_fill: int = 3
    # 0 removes every candidate regardless of run length
    max_outlier_run: int = 3

    @model_validator(mode="after")
    def _check(self):
        if not self.mad_k > 0:
            raise ValueError("mad_k > 0")
        if self.max_gap_fill < 1:
            raise ValueError("max_gap_fill ≥ 1")
        if self.max_outlier_run < 0:
            raise ValueError("max_outlier_run ≥ 0")
        return self


class ScenarioStep(_Frozen):
    name: str = ""
    method: str = "GET"
    path: str = "/"
    weight: float = 1.0
    think_time: float | None = None

    @model_validator(mode="after")
    def _check(self):
        if self.weight <= 0:
            raise ValueError("weight > 0")
        return self

    @property
    def endpoint(self) -> str:
        return self.name or f"{self.method} {self.path}"


class DriverConfig(_Frozen):
    kind: Literal["sim", "external"] = "sim"
    # external driver command templates: build, deploy, wait_ready, topology, teardown
    commands: dict[str, str] = Field(default_factory=dict)
    ready_timeout: float = 300.0
    env: dict[str, str] = Field(default_factory=dict)
    loadgen_node: str | None = None


DEFAULT_INFRA_PREFIXES = (
    "kube-system",
    "monitoring",
    "observability",
    "prometheus",
    "kepler",
    "knative-serving",
    "knative-eventing",
    "istio-system",
)


class ExperimentPlan(_Frozen):
    name: str = "experiment"
    seed: int = 0
    variants: tuple[VariantSpec, ...]
    workloads: tuple[WorkloadSpec, ...]
    repetitions: int = 1
    settle: float = 60.0
    inter_run_settle: float = 120.0
    ramp: float = 0.0
    teardown_between_runs: bool = True
    max_attempts: int = 3
    coverage_threshold: float = 0.9
    collectors: tuple[CollectorConfig, ...] = ()
    scenario: tuple[ScenarioStep, ...] = (ScenarioStep(),)
    cost_book: CostBook = CostBook()
    aux_model: AuxModel = AuxModel()
    overprovision: OverProvisionRule = OverProvisionRule()
    cleaning: CleaningConfig = CleaningConfig()
    driver: DriverConfig = DriverConfig()
    infra_prefixes: tuple[str, ...] = DEFAULT_INFRA_PREFIXES
    output_dir: str = "runs"

    @field_validator("repetitions")
    @classmethod
    def _reps(cls, v):
        if v < 1:
            raise ValueError("repetitions ≥ 1")
        return v

    @field_validator("settle", "inter_run_settle", "ramp")
    @classmethod
    def _non_negative(cls, v):
        if v < 0:
            raise ValueError("settle ≥ 0")
        return v

    @field_validator("max_attempts")
    @classmethod
    def _attempts(cls, v):
        if v < 1:
            raise ValueError("max_attempts ≥ 1")
        return v

    @field_validator("coverage_threshold")
    @classmethod
    def _coverage(cls, v):
        if not 0 <= v <= 1:
            raise ValueError("coverage_threshold ∈ [0, 1]")
        return v

    @model_validator(mode="after")
    def _unique(self):
        _require_unique("variants", [v.name for v in self.variants], "variant names")
        _require_unique("workloads", [w.name for w in self.workloads], "workload names")
        _require_unique("collectors", [c.id for c in self.collectors], "collector ids")
        if not self.variants:
            raise ValueError("at least one variant")
        if not self.workloads:
            raise ValueError("at least one workload")
        known = {w.name for w in self.workloads}
        for v in self.variants:
            for w in v.workloads or ():
                if w not in known:
                    raise ValueError(f"variant {v.name!r} names unknown workload {w!r}")
        return self

    def workloads_for(self, variant: VariantSpec) -> tuple[WorkloadSpec, ...]:
        if variant.workloads is None:
            return self.workloads
        return tuple(w for w in self.workloads if w.name in variant.workloads)


def _require_unique(field, names, what):
    seen = set()
    for n in names:
        if n in seen:
            raise ValueError(f"{what} must be unique: duplicate {n!r} in {field}")
        seen.add(n)


# --- plan documents ---------------------------------------------------------


def _format_validation(err: ValidationError) -> str:
    lines = []
    for e in err.errors():
        path = ".".join(str(p) for p in e["loc"]) or "<root>"
        msg = e["msg"]
        if msg.startswith("Value error, "):
            msg = msg[len("Value error, "):]
        lines.append(f"{path}: {msg}")
    return "; ".join(lines)


def parse_plan(text: str) -> ExperimentPlan:
    """Parse and validate a YAML plan document."""
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise PlanError(f"malformed plan document: {exc}") from exc
    if not isinstance(data, dict):
        raise PlanError("<root>: plan document must be a mapping")
    try:
        return ExperimentPlan.model_validate(data)
    except ValidationError as exc:
        raise PlanError(_format_validation(exc)) from None


def load_plan(path) -> ExperimentPlan:
    with open(path, encoding="utf-8") as fh:
        return parse_plan(fh.read())


def plan_to_dict(plan: ExperimentPlan) -> dict:
    return plan.model_dump(mode="json")


def render_plan(plan: ExperimentPlan) -> str:
    return yaml.safe_dump(plan_to_dict(plan), sort_keys=False, allow_unicode=True)


# --- descriptor patching ----------------------------------------------------


def _split_path(path: str) -> list[str]:
    parts = path.split(".")
    if not path or any(p == "" for p in parts):
        raise PlanError(f"non-addressable path {path!r}: empty segment")
    return parts


def patch_descriptor(descriptor: Any, patches) -> Any:
    """Return a deep copy of ``descriptor`` with each ``path -> value`` patch
    applied. Paths are dotted; numeric segments index into lists. Missing
    mapping keys are created; lists never grow."""
    if isinstance(patches, dict):
        patches = list(patches.items())
    doc = copy.deepcopy(descriptor)
    if doc is None:
        doc = {}
    for patch in patches:
        path, value = (patch.path, patch.value) if isinstance(patch, Patch) else patch
        parts = _split_path(path)
        node = doc
        for i, key in enumerate(parts):
            last = i == len(parts) - 1
            if isinstance(node, dict):
                if last:
                    node[key] = copy.deepcopy(value)
                else:
                    if key not in node or node[key] is None:
                        node[key] = {}
                    node = node[key]
            elif isinstance(node, list):
                try:
                    idx = int(key)
                except ValueError:
                    raise PlanError(f"non-addressable path {path!r}: {key!r} is not a list index") from None
                if not -len(node) <= idx < len(node):
                    raise PlanError(f"non-addressable path {path!r}: index {idx} out of range")
                if last:
                    node[idx] = copy.deepcopy(value)
                else:
                    node = node[idx]
            else:
                where = ".".join(parts[:i]) or "<root>"
                raise PlanError(f"non-addressable path {path!r}: {where} is a scalar")
    return doc
