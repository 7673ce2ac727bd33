import math

import pytest
import yaml

from ecoharness.model import (
    BYTES_PER_GB,
    ExperimentPlan,
    LayerTag,
    MeasurementSample,
    PlanError,
    RequestRecord,
    ResourceSpec,
    SampleKind,
    VariantSpec,
    WorkloadSpec,
    parse_cpu,
    parse_mem,
    parse_plan,
    patch_descriptor,
    render_plan,
)

MINIMAL = """
variants:
  - {name: mono, source: ./shop, deployment_descriptor: deploy.yaml}
workloads:
  - {shape: fixed, duration: 600, peak_users: 10, fixed_request_count: 1000}
"""


def test_layer_tag_has_five_values():
    assert [t.value for t in LayerTag] == ["application", "service", "platform", "isolation", "physical"]


@pytest.mark.parametrize("kind,value", [
    (SampleKind.WATTS, -0.1),
    (SampleKind.MEM_BYTES, -1),
    (SampleKind.CPU_FRACTION, 1.01),
    (SampleKind.WATTS, math.nan),
    (SampleKind.CPU_MILLICORES, math.inf),
])
def test_sample_rejects_invalid_values(kind, value):
    with pytest.raises(ValueError):
        MeasurementSample(0.0, LayerTag.SERVICE, "c", "n1", "p", kind, value, "")


def test_sample_timestamp_kept_to_milliseconds():
    s = MeasurementSample(1.23456, "service", "c", "n1", "p", "watts", 1.0, "W")
    assert s.timestamp == 1.235
    assert s.layer is LayerTag.SERVICE and s.kind is SampleKind.WATTS
    assert s.series_key == ("p", "watts")


def test_request_latency_must_be_non_negative():
    with pytest.raises(ValueError):
        RequestRecord(0.0, -0.001, True, "GET /", 200)
    with pytest.raises(ValueError):
        RequestRecord(0.0, math.inf, True, "GET /", 200)


@pytest.mark.parametrize("text,expected", [("2000m", 2000), ("2", 2000), ("0.5", 500), (250, 250)])
def test_parse_cpu(text, expected):
    assert parse_cpu(text) == expected


@pytest.mark.parametrize("text,expected", [
    ("3000Mi", 3000 * 2**20),
    ("3Gi", 3 * 2**30),
    ("500MB", 500 * 2**20),
    (1024, 1024),
    ("1k", 1000),
])
def test_parse_mem(text, expected):
    assert parse_mem(text) == expected


def test_500_mb_is_exact_binary_fraction_of_a_gb():
    assert parse_mem("500MB") / BYTES_PER_GB == 0.48828125


def test_resource_spec_checks():
    spec = ResourceSpec(cpu_limit="2000m", mem_limit="3000MB")
    assert spec.cpu_limit == 2000 and spec.mem_limit == 3000 * 2**20
    with pytest.raises(ValueError):
        ResourceSpec(cpu_limit=0, mem_limit=1)
    with pytest.raises(ValueError):
        ResourceSpec(cpu_limit=1, mem_limit=1, replicas_min=2, replicas_max=1)
    with pytest.raises(ValueError):
        ResourceSpec(cpu_limit=1, mem_limit=1, replicas_min=0)


def test_minimal_plan_gets_defaults():
    plan = parse_plan(MINIMAL)
    assert plan.settle == 60
    assert plan.repetitions == 1
    assert plan.workloads[0].name == "fixed"
    assert plan.max_attempts == 3 and plan.coverage_threshold == 0.9


def test_zero_repetitions_rejected():
    with pytest.raises(PlanError, match="repetitions ≥ 1"):
        parse_plan(MINIMAL + "repetitions: 0\n")


def test_duplicate_variant_names_rejected():
    doc = yaml.safe_load(MINIMAL)
    doc["variants"].append(dict(doc["variants"][0]))
    with pytest.raises(PlanError, match="unique"):
        parse_plan(yaml.safe_dump(doc))


def test_error_names_key_path():
    doc = yaml.safe_load(MINIMAL)
    doc["workloads"][0]["peak_users"] = 0
    with pytest.raises(PlanError, match=r"workloads\.0"):
        parse_plan(yaml.safe_dump(doc))
    doc = yaml.safe_load(MINIMAL)
    doc["variants"][0]["colour"] = "red"
    with pytest.raises(PlanError, match=r"variants\.0\.colour"):
        parse_plan(yaml.safe_dump(doc))


def test_fixed_count_required_iff_fixed():
    with pytest.raises(ValueError):
        WorkloadSpec(shape="fixed", duration=10, peak_users=1)
    with pytest.raises(ValueError):
        WorkloadSpec(shape="stress", duration=10, peak_users=1, fixed_request_count=5)


def test_not_yaml_mapping_is_plan_error():
    with pytest.raises(PlanError):
        parse_plan("- just\n- a list\n")
    with pytest.raises(PlanError):
        parse_plan("variants: [unclosed")


def test_render_round_trip():
    plan = parse_plan(MINIMAL + "repetitions: 4\nsettle: 30\n")
    again = parse_plan(render_plan(plan))
    assert again == plan


def test_variant_workload_subset_must_exist():
    doc = yaml.safe_load(MINIMAL)
    doc["variants"][0]["workloads"] = ["nope"]
    with pytest.raises(PlanError):
        parse_plan(yaml.safe_dump(doc))
    doc["variants"][0]["workloads"] = ["fixed"]
    plan = parse_plan(yaml.safe_dump(doc))
    assert [w.name for w in plan.workloads_for(plan.variants[0])] == ["fixed"]


def test_variant_patches_accept_mapping():
    v = VariantSpec(name="a", source=".", deployment_descriptor="d", patches={"x.y": 1})
    assert v.patches[0].path == "x.y" and v.patches[0].value == 1


def test_patch_creates_missing_keys():
    assert patch_descriptor({}, [("a.b", 1)]) == {"a": {"b": 1}}


def test_patch_resource_limit_and_original_untouched():
    doc = {"spec": {"containers": [{"name": "app", "resources": {"limits": {"cpu": "500m"}}}]}}
    out = patch_descriptor(doc, {"spec.containers.0.resources.limits.cpu": "2000m"})
    assert out["spec"]["containers"][0]["resources"]["limits"]["cpu"] == "2000m"
    assert doc["spec"]["containers"][0]["resources"]["limits"]["cpu"] == "500m"


def test_empty_patch_list_is_identity():
    doc = {"a": [1, 2, {"b": None}]}
    assert patch_descriptor(doc, []) == doc


@pytest.mark.parametrize("path", ["a.b.c", "l.5", "l.x", "", "a..b"])
def test_non_addressable_paths(path):
    with pytest.raises(PlanError, match="non-addressable"):
        patch_descriptor({"a": {"b": 3}, "l": [1]}, [(path, 0)])


def test_plan_models_are_frozen():
    plan = parse_plan(MINIMAL)
    with pytest.raises(Exception):
        plan.settle = 5
    assert isinstance(plan, ExperimentPlan)
