import io

import numpy as np
import pytest

from ecoharness.model import RequestRecord, ScenarioStep, WorkloadSpec
from ecoharness.workloads import (
    CallableTarget,
    HttpTarget,
    StepPicker,
    UserSchedule,
    build_schedule,
    drive,
    load_scenario,
    read_request_log,
    write_request_log,
)


def local_maxima(series):
    """(height, centre index) of every plateau strictly above both neighbours."""
    x = np.asarray(series)
    out = []
    i, n = 0, len(x)
    while i < n:
        j = i
        while j + 1 < n and x[j + 1] == x[i]:
            j += 1
        left = x[i - 1] if i > 0 else -np.inf
        right = x[j + 1] if j + 1 < n else -np.inf
        if x[i] > left and x[i] > right:
            out.append((x[i], (i + j) / 2))
        i = j + 1
    return out


def test_stress_ramp():
    s = build_schedule(WorkloadSpec(shape="stress", duration=600, peak_users=1000))
    assert len(s.target_users) == 600
    assert s.target_users[0] == 0 and s.target_users[599] == 1000
    expected = np.arange(600) * 1000 / 599
    assert np.max(np.abs(np.array(s.target_users) - expected)) <= 0.5
    assert s.stop_condition == ("duration",)


def test_fixed_stop_condition():
    s = build_schedule(WorkloadSpec(shape="fixed", duration=600, peak_users=10, fixed_request_count=1000))
    assert s.stop_condition == ("request_count", 1000)
    assert set(s.target_users) == {10}


def test_shaped_day_peaks():
    s = build_schedule(WorkloadSpec(shape="shaped", duration=86400, peak_users=1000))
    x = np.array(s.target_users)
    assert x.max() == 1000 and x.min() >= 50
    top = sorted(local_maxima(x), reverse=True)[:2]
    centres = sorted(c for _, c in top)
    assert abs(centres[0] - 32400) <= 600
    assert abs(centres[1] - 61200) <= 600


@pytest.mark.parametrize("duration", [900, 120, 3600])
def test_shaped_peaks_scale_with_duration(duration):
    x = build_schedule(WorkloadSpec(shape="shaped", duration=duration, peak_users=200)).target_users
    top = sorted(local_maxima(x), reverse=True)[:2]
    fr = sorted(c / duration for _, c in top)
    assert abs(fr[0] - 0.375) <= 0.02 and abs(fr[1] - 17 / 24) <= 0.02


def test_shaped_floor_at_least_one_user():
    x = build_schedule(WorkloadSpec(shape="shaped", duration=300, peak_users=3)).target_users
    assert min(x) >= 1


def test_pausing_gaps_double():
    s = build_schedule(WorkloadSpec(shape="pausing", duration=600, peak_users=50, think_time=2.0))
    assert set(s.target_users) == {25}
    g = s.pause_gaps
    assert g[0] == 2.0 and all(b / a == 2.0 for a, b in zip(g, g[1:]))
    assert s.gap(len(g) + 2) / s.gap(len(g) + 1) == 2.0
    assert sum(g) <= 600


def test_pausing_needs_think_time():
    with pytest.raises(ValueError):
        build_schedule(WorkloadSpec(shape="pausing", duration=60, peak_users=1, think_time=0))


def test_schedules_are_pure():
    spec = WorkloadSpec(shape="shaped", duration=500, peak_users=77, seed=3)
    assert build_schedule(spec) == build_schedule(spec)


def test_step_picker_weights():
    steps = [ScenarioStep(path="/a", weight=3), ScenarioStep(path="/b")]
    picker = StepPicker(steps, np.random.default_rng(1))
    picks = [picker.next().path for _ in range(4000)]
    assert abs(picks.count("/a") / 4000 - 0.75) < 0.03


def test_request_log_round_trip():
    recs = [RequestRecord(1700000000.125, 0.05, True, "GET /", 200),
            RequestRecord(1700000001.5, 10.0, False, "POST /cart", 503)]
    buf = io.StringIO()
    write_request_log(recs, buf)
    assert buf.getvalue().splitlines()[0] == "start,endpoint,status,latency_s,success"
    assert read_request_log(io.StringIO(buf.getvalue())) == recs


def test_load_scenario(tmp_path):
    p = tmp_path / "s.yaml"
    p.write_text("steps:\n  - {path: /a, weight: 2}\n  - {method: POST, path: /b, think_time: 0.5}\n")
    steps = load_scenario(p)
    assert steps[1].endpoint == "POST /b" and steps[1].think_time == 0.5


def test_all_zero_schedule_no_records():
    res = drive(UserSchedule((0, 0, 0)), CallableTarget(lambda s: 200))
    assert res.records == []


def test_real_time_fixed_count_exact():
    sched = UserSchedule((4,) * 5, ("request_count", 37), think_time=0.0)
    res = drive(sched, CallableTarget(lambda s: 200), seed=1)
    assert len(res.records) == 37
    assert all(r.success for r in res.records)
    starts = [r.start for r in res.records]
    assert starts == sorted(starts)


def test_real_time_concurrency_tracks_schedule():
    import threading
    import time

    lock = threading.Lock()
    state = {"now": 0, "peak": 0}

    def slow(step):
        with lock:
            state["now"] += 1
            state["peak"] = max(state["peak"], state["now"])
        time.sleep(0.02)
        with lock:
            state["now"] -= 1
        return 200

    res = drive(UserSchedule((2, 3, 1), think_time=0.0), CallableTarget(slow))
    assert state["peak"] <= 3 + 1
    assert all(m <= t + 1 for m, t in zip(res.max_in_flight, (2, 3, 1)))
    assert not res.aborted


def test_unreachable_target_aborts():
    res = drive(UserSchedule((2,) * 5, think_time=0.05), CallableTarget(lambda s: 0), unreachable_timeout=0.5)
    assert res.aborted and "unreachable" in res.diagnostic


def test_http_target(http_fixture):
    http_fixture.route("/ok", {"x": 1})
    target = HttpTarget(http_fixture.url)
    ok = target.execute(ScenarioStep(path="/ok"))
    missing = target.execute(ScenarioStep(path="/missing"))
    assert ok.success and ok.status == 200 and ok.latency > 0
    assert not missing.success and missing.status == 404
    dead = HttpTarget("http://127.0.0.1:9", timeout=0.5).execute(ScenarioStep())
    assert dead.status == 0 and not dead.success
