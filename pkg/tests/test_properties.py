"""Property tests for the invariants the package promises."""

import io
import math
import warnings

import numpy as np
import pytest
import yaml
from conftest import DATA, timeline
from hypothesis import HealthCheck, assume, given, settings
from hypothesis import strategies as st

from ecoharness.aggregator import attribute_energy, build_timelines, clean, resample
from ecoharness.collectors import read_trace, write_trace
from ecoharness.metrics import MetricsReport, runtime_overhead, scaling_waste, total_cost
from ecoharness.model import (
    CleaningConfig,
    MeasurementSample,
    OverProvisionRule,
    ScenarioStep,
    WorkloadSpec,
    parse_plan,
    patch_descriptor,
    render_plan,
)
from ecoharness.report import build_table, parse_csv, render_csv
from ecoharness.simulator import Simulation, load_topology
from ecoharness.workloads import UserSchedule, build_schedule

GIB = 2**30
names = st.text(alphabet="abcdefghijklmnopqrstuvwxyz0123456789-", min_size=1, max_size=8)
finite = st.floats(min_value=0, max_value=1e6, allow_nan=False, allow_infinity=False)


# --- plans and patches -------------------------------------------------------------


@st.composite
def workload_docs(draw, name):
    shape = draw(st.sampled_from(["shaped", "fixed", "pausing", "stress"]))
    doc = {"name": name, "shape": shape, "duration": draw(st.integers(1, 100_000)),
           "peak_users": draw(st.integers(1, 5000)), "seed": draw(st.integers(0, 2**31)),
           "think_time": draw(st.sampled_from([0.0, 0.5, 1.0, 2.25]))}
    if shape == "fixed":
        doc["fixed_request_count"] = draw(st.integers(1, 10**6))
    return doc


@st.composite
def plan_docs(draw):
    vnames = draw(st.lists(names, min_size=1, max_size=3, unique=True))
    wnames = draw(st.lists(names, min_size=1, max_size=3, unique=True))
    variants = []
    for v in vnames:
        doc = {"name": v, "source": draw(st.sampled_from([".", "src/" + v, "git@host:app.git"])),
               "deployment_descriptor": f"{v}.yaml"}
        if draw(st.booleans()):
            doc["branch"] = v
        if draw(st.booleans()):
            doc["resource_specs"] = {"svc": {"cpu_limit": draw(st.integers(1, 8000)),
                                             "mem_limit": draw(st.integers(1, 2**34))}}
        if draw(st.booleans()):
            doc["patches"] = {"spec.replicas": draw(st.integers(0, 9))}
        variants.append(doc)
    return {
        "name": draw(names), "seed": draw(st.integers(0, 2**31)),
        "variants": variants,
        "workloads": [draw(workload_docs(w)) for w in wnames],
        "repetitions": draw(st.integers(1, 10)),
        "settle": draw(st.sampled_from([0, 1.5, 60, 600])),
        "teardown_between_runs": draw(st.booleans()),
    }


@settings(max_examples=60, deadline=None)
@given(plan_docs())
def test_plan_round_trip(doc):
    plan = parse_plan(yaml.safe_dump(doc))
    assert parse_plan(render_plan(plan)) == plan


json_leaf = st.one_of(st.integers(-5, 5), st.text(max_size=3), st.booleans(), st.none())
json_docs = st.recursive(json_leaf, lambda kids: st.one_of(
    st.lists(kids, min_size=1, max_size=3),
    st.dictionaries(names, kids, min_size=1, max_size=3)), max_leaves=12)


def _paths(doc, prefix=()):
    yield prefix
    if isinstance(doc, dict):
        for k, v in doc.items():
            yield from _paths(v, prefix + (k,))
    elif isinstance(doc, list):
        for i, v in enumerate(doc):
            yield from _paths(v, prefix + (str(i),))


@settings(max_examples=150, deadline=None)
@given(st.dictionaries(names, json_docs, min_size=1, max_size=3), st.data(), json_leaf)
def test_patch_idempotent(doc, data, value):
    paths = [p for p in _paths(doc) if p]
    path = ".".join(data.draw(st.sampled_from(paths)))
    once = patch_descriptor(doc, {path: value})
    assert patch_descriptor(once, {path: value}) == once


# --- aggregation ------------------------------------------------------------------------


@settings(max_examples=150, deadline=None)
@given(st.lists(st.tuples(st.integers(1, 3), st.integers(0, 10_000)), min_size=1, max_size=30))
def test_resample_preserves_integral(steps):
    max_gap = 3
    t, samples, expected = 100, [], 0
    for gap, value in steps:
        samples.append(MeasurementSample(t, "service", "c", "n1", "a", "watts", float(value), "W"))
        expected += value * gap
        t += gap
    # the last reading holds only for `gap` seconds: end the window there
    got = resample(samples, (100, t), max_gap_fill=max_gap)
    assert not np.isnan(got).any()
    assert math.fsum(got.tolist()) == expected


def _ledger_tls(draw_watts):
    return [timeline(f"r{i}", service=svc, layer=layer, watts=w, n=len(w))
            for i, (svc, layer, w) in enumerate(draw_watts)]


watt_series = st.lists(st.floats(0, 500, allow_nan=False), min_size=5, max_size=5).map(np.array)
tl_specs = st.lists(st.tuples(st.sampled_from(["web", "cart", "kube-proxy", "monitoring-x"]),
                              st.sampled_from(["service", "application", "platform", "isolation"]),
                              watt_series), min_size=2, max_size=8)


@settings(max_examples=100, deadline=None)
@given(tl_specs, st.data())
def test_attribution_additive(specs, data):
    tls = _ledger_tls(specs)
    cut = data.draw(st.integers(1, len(tls) - 1))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        whole = attribute_energy(tls)
        a, b = attribute_energy(tls[:cut]), attribute_energy(tls[cut:])
    for field in ("sut_joules", "overhead_joules"):
        assert math.isclose(getattr(a, field) + getattr(b, field), getattr(whole, field), rel_tol=1e-12,
                            abs_tol=1e-9)


@settings(max_examples=100, deadline=None, suppress_health_check=[HealthCheck.filter_too_much])
@given(tl_specs, st.floats(1e-3, 1e3))
def test_ro_scale_invariant(specs, c):
    tls = _ledger_tls(specs)
    scaled = _ledger_tls([(s, l, w * c) for s, l, w in specs])
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        base = attribute_energy(tls)
        assume(base.total_joules > 1e-6)
        ro1, ro2 = runtime_overhead(base), runtime_overhead(attribute_energy(scaled))
    assert math.isclose(ro1, ro2, rel_tol=1e-12, abs_tol=1e-15)


def test_clean_light_touch_on_simulator_series():
    topo = load_topology(DATA / "topology.yaml")
    for seed in range(5):
        sim = Simulation(topo, seed=seed)
        sched = build_schedule(WorkloadSpec(shape="shaped", duration=300, peak_users=40, think_time=0.3))
        res = sim.run_closed_loop(sched, (ScenarioStep(path="/"), ScenarioStep(path="/catalog")), seed)
        window = (res.started, res.ended)
        samples = []
        for q in ("pod_cpu", "pod_mem", "pod_watts"):
            samples += sim.samples(q, window)
        by = {}
        for s in samples:
            by.setdefault((s.pod, s.kind), []).append(s)
        for series in by.values():
            x = resample(series, window)
            _, removed = clean(x, CleaningConfig())
            assert removed <= 0.10 * np.isfinite(x).sum()
        _, stats = build_timelines(samples, sim.pod_meta(), window)
        assert stats.removed <= 0.10 * len(samples)


# --- metrics ---------------------------------------------------------------------------


@st.composite
def replica_sets(draw, n=6):
    k = draw(st.integers(1, 4))
    out = []
    for j in range(k):
        cpu_lim = draw(st.sampled_from([250, 500, 1000, 2000]))
        mem_lim = draw(st.sampled_from([GIB // 4, GIB // 2, GIB]))
        cpu = np.array(draw(st.lists(st.floats(0, 1.2, allow_nan=False), min_size=n, max_size=n))) * cpu_lim
        mem = np.array(draw(st.lists(st.floats(0, 1.2, allow_nan=False), min_size=n, max_size=n))) * mem_lim
        live = np.array(draw(st.lists(st.booleans(), min_size=n, max_size=n)))
        watts = np.array(draw(st.lists(st.floats(0, 50, allow_nan=False), min_size=n, max_size=n)))
        svc = draw(st.sampled_from(["web", "cart"]))
        out.append(timeline(f"r{j}", service=svc, n=n, cpu=np.where(live, cpu, np.nan),
                            mem=np.where(live, mem, np.nan), watts=np.where(live, watts, np.nan), live=live,
                            cpu_limit=cpu_lim, mem_limit=mem_lim))
    return out


def naive_re(tls, cpu_thr, mem_thr):
    total = []
    for t in range(len(tls[0])):
        for a in tls:
            c, m = a.cpu_millicores[t], a.mem_bytes[t]
            if np.isnan(c) or np.isnan(m) or not (c / a.cpu_limit < cpu_thr and m / a.mem_limit < mem_thr):
                continue
            for b in tls:
                if b is a or b.service != a.service:
                    continue
                pc, pm = b.cpu_millicores[t], b.mem_bytes[t]
                if np.isnan(pc) or np.isnan(pm):
                    continue
                if b.cpu_limit - pc >= c and b.mem_limit - pm >= m:
                    if np.isfinite(a.watts[t]):
                        total.append(a.watts[t])
                    break
    return math.fsum(total)


thresholds = st.floats(0.01, 0.99)


@settings(max_examples=200, deadline=None)
@given(replica_sets(), thresholds, thresholds)
def test_re_matches_naive_scan(tls, ct, mt):
    assert scaling_waste(tls, OverProvisionRule(cpu_threshold=ct, mem_threshold=mt)) == naive_re(tls, ct, mt)


@settings(max_examples=200, deadline=None)
@given(replica_sets(), thresholds, thresholds, thresholds, thresholds)
def test_re_monotone_in_thresholds(tls, c1, c2, m1, m2):
    lo = OverProvisionRule(cpu_threshold=min(c1, c2), mem_threshold=min(m1, m2))
    hi = OverProvisionRule(cpu_threshold=max(c1, c2), mem_threshold=max(m1, m2))
    assert scaling_waste(tls, lo) <= scaling_waste(tls, hi)


@settings(max_examples=200, deadline=None)
@given(replica_sets())
def test_tc_at_least_consumed(tls):
    cost = total_cost(tls, [])
    assert cost.total >= cost.consumed


# --- serialization -------------------------------------------------------------------


maybe = st.one_of(st.none(), st.floats(0, 1e4, allow_nan=False))
frac = st.one_of(st.none(), st.floats(0, 1, allow_nan=False))


@st.composite
def reports(draw):
    succ = draw(st.integers(0, 1000))
    return MetricsReport(
        draw(st.sampled_from(["a", "b", "c"])), draw(st.sampled_from(["stress", "shaped"])),
        draw(st.integers(1, 3)), draw(maybe), draw(frac), draw(frac), draw(finite), draw(finite),
        draw(finite), draw(finite), draw(maybe), draw(frac), draw(finite), draw(maybe), draw(maybe),
        succ, succ + draw(st.integers(0, 10)), draw(finite), draw(finite))


@settings(max_examples=100, deadline=None)
@given(st.lists(reports(), max_size=12))
def test_comparison_csv_round_trip(rs):
    text = render_csv(build_table(rs))
    assert render_csv(parse_csv(text)) == text


@settings(max_examples=100, deadline=None)
@given(reports())
def test_report_json_round_trip_is_stable(r):
    text = r.to_json()
    assert MetricsReport.from_json(text).to_json() == text


samples = st.builds(
    MeasurementSample,
    st.floats(1.7e9, 1.8e9).map(lambda x: round(x, 3)),
    st.sampled_from(["service", "platform", "physical"]), names,
    names, st.one_of(st.just(""), names), st.sampled_from(["watts", "cpu_millicores", "mem_bytes"]),
    st.floats(0, 1e9, allow_nan=False).map(lambda x: round(x, 2)), st.just(""))


@settings(max_examples=100, deadline=None)
@given(st.lists(samples, max_size=20))
def test_trace_round_trip(ss):
    buf = io.StringIO()
    write_trace(ss, buf)
    text = buf.getvalue()
    again = io.StringIO()
    write_trace(read_trace(io.StringIO(text)), again)
    assert again.getvalue() == text


# --- workloads ---------------------------------------------------------------------------


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 3000), st.integers(1, 10_000))
def test_stress_ends_at_peak(duration, peak):
    s = build_schedule(WorkloadSpec(shape="stress", duration=duration, peak_users=peak))
    assert len(s.target_users) == duration and s.target_users[-1] == peak
    assert list(s.target_users) == sorted(s.target_users)


@settings(max_examples=40, deadline=None)
@given(st.sampled_from(["shaped", "pausing", "stress"]), st.integers(10, 2000), st.integers(1, 500),
       st.integers(0, 99))
def test_schedules_pure(shape, duration, peak, seed):
    spec = WorkloadSpec(shape=shape, duration=duration, peak_users=peak, seed=seed)
    a, b = build_schedule(spec), build_schedule(spec)
    assert a == b and isinstance(a, UserSchedule)


@pytest.mark.parametrize("c", [0.5, 3.0])
def test_ro_scale_example(c):
    tls = [timeline("a", watts=4.0), timeline("p", service="kube-proxy", layer="platform", watts=1.0)]
    scaled = [timeline("a", watts=4.0 * c), timeline("p", service="kube-proxy", layer="platform", watts=c)]
    assert runtime_overhead(attribute_energy(scaled)) == pytest.approx(runtime_overhead(attribute_energy(tls)))
