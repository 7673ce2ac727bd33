import io
import warnings

import numpy as np
import pytest
from conftest import timeline

from ecoharness.aggregator import (
    NoEnergyError,
    PodMeta,
    attribute_energy,
    build_timelines,
    classify_layer,
    clean,
    counter_rates,
    read_timelines_csv,
    resample,
    write_timelines_csv,
)
from ecoharness.collectors import read_trace
from ecoharness.model import CleaningConfig, LayerTag, MeasurementSample

T0 = 1_700_000_000


def _s(ts, v, kind="watts", pod="a", node="n1", layer="service", source="c"):
    return MeasurementSample(ts, layer, source, node, pod, kind, v, "")


def test_resample_locf():
    got = resample([_s(0, 10), _s(2, 20), _s(4, 30)], (0, 5), max_gap_fill=2)
    assert got.tolist() == [10, 10, 20, 20, 30]


def test_resample_gap_beyond_fill_is_missing():
    got = resample([_s(0, 10), _s(4, 30)], (0, 5), max_gap_fill=2)
    assert got[:2].tolist() == [10, 10]
    assert np.isnan(got[2:4]).all() and got[4] == 30


def test_resample_empty():
    assert np.isnan(resample([], (0, 4))).all()


def test_counter_reset():
    rates, resets = counter_rates([0, 1, 2], [100, 150, 30])
    assert rates.tolist() == [50, 30]
    assert resets == [2]


def test_counter_resample_holds_rate_until_next_reading():
    samples = [_s(t, v, kind="request_count") for t, v in [(0, 0), (2, 10), (4, 40)]]
    assert resample(samples, (0, 5)).tolist()[:4] == [5, 5, 15, 15]


def test_clean_constant_series_untouched():
    x, removed = clean(np.full(20, 3.0), CleaningConfig())
    assert removed == 0 and (x == 3.0).all()


def test_clean_spike_on_flat_series():
    x, removed = clean([1.0] * 10 + [10_000.0], CleaningConfig(mad_k=5))
    assert removed == 1
    assert np.isnan(x[-1]) and (x[:-1] == 1).all()


def test_clean_none_is_identity():
    data = [1.0] * 10 + [10_000.0]
    x, removed = clean(data, CleaningConfig(method="none"))
    assert removed == 0 and x.tolist() == data


def test_clean_keeps_long_runs():
    data = [1.0, 1.1, 0.9] * 10 + [50.0] * 4 + [1.0] * 5
    _, removed = clean(data, CleaningConfig())
    assert removed == 0
    _, removed = clean(data, CleaningConfig(max_outlier_run=0))
    assert removed == 4


def test_clean_ceiling_protects_plausible_values():
    data = [10.0, 11.0, 9.0] * 10 + [400.0]
    assert clean(data, CleaningConfig())[1] == 1
    assert clean(data, CleaningConfig(), upper=500.0)[1] == 0
    assert clean(data, CleaningConfig(), upper=300.0)[1] == 1


def test_trace_fixture_timelines(fixture_path):
    samples = read_trace(fixture_path("trace10.csv"))
    topo = {
        "auth-0": PodMeta("n1", "auth", LayerTag.SERVICE, cpu_limit=500, mem_limit=2**29),
        "kube-proxy-n1": PodMeta("n1", "kube-proxy", LayerTag.PLATFORM, cpu_limit=100, mem_limit=2**27),
        "cart-1": PodMeta("n2", "cart", LayerTag.SERVICE, cpu_limit=500, mem_limit=2**29),
    }
    tls, stats = build_timelines(samples, topo, (T0, T0 + 5))
    by = {t.replica: t for t in tls}
    assert set(by) == {"auth-0", "kube-proxy-n1", "cart-1", "n1", "n2"}
    assert by["auth-0"].watts[:4].tolist() == [4.5, 4.75, 4.75, 4.75]
    assert by["auth-0"].mem_bytes[1] == 134217728
    assert by["n1"].layer is LayerTag.PHYSICAL and by["n1"].watts[2] == 61.5
    # the isolation sample has no pod: a node-level timeline carrying its layer
    assert stats.removed == 0 and stats.unattributed_samples == 0


def _ledger_case():
    return [
        timeline("a", watts=5.0, n=100),
        timeline("b", watts=5.0, n=100),
        timeline("p", service="kube-proxy", layer="platform", watts=3.0, n=100),
    ]


def test_attribute_two_pods_and_platform():
    ledger = attribute_energy(_ledger_case())
    assert ledger.sut_joules == 1000.0
    assert ledger.overhead_joules == 300.0
    assert ledger.per_layer["platform"] == 300.0


def test_selector_matching_nothing_warns():
    with pytest.warns(UserWarning, match="matched no timeline"):
        ledger = attribute_energy(_ledger_case(), sut_selector=lambda s, l: False)
    assert ledger.sut_joules == 0.0 and ledger.overhead_joules == 1300.0


def test_no_energy_is_typed_error():
    with pytest.raises(NoEnergyError, match="no energy source"):
        attribute_energy([timeline("a", cpu=5.0)])


def test_infra_prefix_service_counts_as_overhead():
    tls = [timeline("a", watts=2.0), timeline("m", service="monitoring-agent", watts=1.0)]
    ledger = attribute_energy(tls)
    assert (ledger.sut_joules, ledger.overhead_joules) == (20.0, 10.0)


def test_physical_goes_to_node_totals_and_loadgen_excluded():
    tls = [timeline("a", watts=2.0), timeline("n1", service="", layer="physical", watts=40.0),
           timeline("g", node="lg", watts=9.0)]
    ledger = attribute_energy(tls, exclude_nodes=("lg",))
    assert ledger.node_joules == {"n1": 400.0}
    assert ledger.sut_joules == 20.0
    ledger.check()


def test_missing_watts_reduce_coverage():
    w = np.full(10, 2.0)
    w[:5] = np.nan
    ledger = attribute_energy([timeline("a", watts=w)])
    assert ledger.sut_joules == 10.0 and ledger.energy_coverage == 0.5


def test_classify_layer():
    assert classify_layer("coredns", "kube-system") is LayerTag.PLATFORM
    assert classify_layer("activator", "knative-serving") is LayerTag.PLATFORM
    assert classify_layer("cart", "shop") is LayerTag.SERVICE


def test_timelines_csv_round_trip():
    w = np.arange(5, dtype=float)
    w[2] = np.nan
    tls = [timeline("a", n=5, cpu=100.0, mem=2.0**20, watts=w),
           timeline("b", n=5, cpu=1.5, watts=0.25, live=[0, 1, 1, 1, 0])]
    buf = io.StringIO()
    write_timelines_csv(tls, buf)
    text = buf.getvalue()
    assert text.splitlines()[0] == "second,replica,service,layer,cpu_millicores,mem_bytes,watts,missing_flags"
    assert "2,a,web,service,100,1048576,,4" in text
    assert "1,b,web,service,1.5,,0.25,2" in text
    back = read_timelines_csv(io.StringIO(text))
    assert [t.replica for t in back] == ["a", "b"]
    assert back[1].live.tolist() == [False, True, True, True, False]
    buf2 = io.StringIO()
    write_timelines_csv(back, buf2)
    assert buf2.getvalue() == text


def test_duplicate_sources_pick_best_covered():
    samples = [_s(t, 1.0, source="sparse") for t in (0,)] + [_s(t, 2.0, source="dense") for t in range(5)]
    topo = {"a": PodMeta("n1", "web", LayerTag.SERVICE, cpu_limit=1, mem_limit=1)}
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        (tl,), _ = build_timelines(samples, topo, (0, 5))
    assert tl.watts.tolist() == [2.0] * 5


def test_custom_samples_are_summarised_not_aggregated():
    samples = [_s(0, 2.0), _s(0, 10.0, kind="custom"), MeasurementSample(1, "application", "c", "n1", "a",
                                                                       "custom", 20.0, "orders/s")]
    topo = {"a": PodMeta("n1", "web", LayerTag.SERVICE, cpu_limit=1, mem_limit=1)}
    (tl,), stats = build_timelines(samples, topo, (0, 2))
    assert tl.watts.tolist() == [2.0, 2.0]
    assert stats.custom == {("a", ""): 10.0, ("a", "orders/s"): 20.0}
