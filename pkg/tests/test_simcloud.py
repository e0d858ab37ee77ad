import pytest
from hypothesis import given, settings, strategies as st

from evop.errors import NotRunning, PastEvent, UnknownInstance
from evop.library import ModelLibrary
from evop.provider import InstanceState
from evop.simcloud import EventLoop, FaultInjection, FaultKind, LoadModel, SimulatedCloud

from conftest import providers, topmodel


def make_cloud(load=None, interval=10, boot=30):
    lib = ModelLibrary()
    lib.register_image(topmodel())
    return SimulatedCloud(EventLoop(), lib, providers(private_capacity=3, boot=boot), load or LoadModel(), interval)


def test_same_instant_runs_before_next_second():
    loop = EventLoop()
    order = []
    loop.schedule(1, "late", action=lambda: order.append("late"))
    loop.schedule(0, "now", action=lambda: order.append("now"))
    loop.run_until(1)
    assert order == ["now", "late"]


def test_ties_keep_insertion_order():
    loop = EventLoop()
    order = []
    for name in "abc":
        loop.schedule(5, name, action=lambda n=name: order.append(n))
    loop.run_until(5)
    assert order == ["a", "b", "c"]


def test_past_events_rejected():
    loop = EventLoop()
    loop.run_until(10)
    with pytest.raises(PastEvent):
        loop.schedule(9, "x")
    with pytest.raises(PastEvent):
        loop.run_until(3)


def test_run_until_now_keeps_clock():
    loop = EventLoop()
    loop.run_until(7)
    loop.schedule(7, "zero-delay")
    assert loop.run_until(7) == 1
    assert loop.now == 7
    assert loop.run_until(7) == 0


def test_trace_lines_are_tab_separated():
    loop = EventLoop()
    loop.schedule(3, "boot", "x-i0001", detail="a\tb")
    loop.run_until(3)
    assert loop.trace == ["3\tboot\tx-i0001\ta b"]


@given(st.lists(st.integers(0, 50), max_size=30))
def test_clock_never_goes_backwards(times):
    loop = EventLoop()
    seen = []
    for t in times:
        loop.schedule(t, "e", action=lambda: seen.append(loop.now))
    loop.run_until(60)
    assert seen == sorted(times)


def test_boot_delay_boundary():
    cloud = make_cloud(boot=30)
    rec = cloud.launch("private", "topmodel")
    cloud.loop.run_until(29)
    assert rec.state is InstanceState.PENDING
    with pytest.raises(NotRunning):
        cloud.poll_metrics(rec.instance_id)
    cloud.loop.run_until(30)
    assert rec.state is InstanceState.RUNNING


def test_idle_instance_baseline():
    cloud = make_cloud()
    rec = cloud.launch("private", "topmodel")
    cloud.start_monitoring()
    cloud.loop.run_until(60)
    s = cloud.poll_metrics(rec.instance_id)
    assert (s.cpu, s.net_in, s.net_out) == (0.0, 0, 0)


@pytest.mark.parametrize("k", [0, 1, 3, 5, 7])
def test_cpu_follows_load_model(k):
    per_session = 0.2
    cloud = make_cloud(LoadModel(per_session_cpu=per_session))
    rec = cloud.launch("private", "topmodel")
    cloud.gateway(rec.instance_id).session_count = k
    cloud.start_monitoring()
    cloud.loop.run_until(40)
    s = cloud.poll_metrics(rec.instance_id)
    expected = 1.0 if k * per_session >= 1 else k * per_session
    assert s.cpu == pytest.approx(expected)
    assert s.net_in == k * 2048 and s.net_out == k * 8192
    assert s.disk_read == k * 4096 and s.disk_write == k * 1024


def test_polls_within_interval_are_identical():
    cloud = make_cloud()
    rec = cloud.launch("private", "topmodel")
    cloud.gateway(rec.instance_id).session_count = 2
    cloud.start_monitoring()
    cloud.loop.run_until(41)
    a = cloud.poll_metrics(rec.instance_id)
    cloud.loop.run_until(49)
    assert cloud.poll_metrics(rec.instance_id) == a
    cloud.loop.run_until(50)
    assert cloud.poll_metrics(rec.instance_id).at == 50


def test_cpu_saturation_from_first_full_interval():
    cloud = make_cloud()
    rec = cloud.launch("private", "topmodel")
    cloud.start_monitoring()
    cloud.inject_fault(FaultInjection(rec.instance_id, FaultKind.CPU_SATURATION, start=100))
    cloud.loop.run_until(100)
    assert cloud.poll_metrics(rec.instance_id).cpu == 0.0
    for t in range(110, 200, 10):
        cloud.loop.run_until(t)
        assert cloud.poll_metrics(rec.instance_id).cpu == 1.0


def test_fault_with_duration_ends():
    f = FaultInjection("x", FaultKind.CPU_SATURATION, start=100, duration=30)
    assert [t for t in range(90, 160, 10) if f.affects_interval(t, 10)] == [110, 120, 130]


def test_blackhole_keeps_inbound_traffic():
    cloud = make_cloud()
    rec = cloud.launch("private", "topmodel")
    cloud.gateway(rec.instance_id).session_count = 2
    cloud.start_monitoring()
    cloud.inject_fault(FaultInjection(rec.instance_id, FaultKind.NETWORK_BLACKHOLE, start=50))
    cloud.loop.run_until(70)
    s = cloud.poll_metrics(rec.instance_id)
    assert s.net_in > 0 and s.net_out == 0


def test_crash_is_silent_and_poll_fails():
    cloud = make_cloud()
    rec = cloud.launch("private", "topmodel")
    cloud.inject_fault(FaultInjection(rec.instance_id, FaultKind.CRASH, start=60))
    cloud.loop.run_until(60)
    assert rec.state is InstanceState.TERMINATED
    assert any("\tcrashed\t" in line for line in cloud.loop.trace)
    with pytest.raises(NotRunning):
        cloud.poll_metrics(rec.instance_id)
    with pytest.raises(UnknownInstance):
        cloud.inject_fault(FaultInjection("nope", FaultKind.CRASH, 0))


def test_histories_respect_transition_graph():
    from evop.provider import is_valid_history

    cloud = make_cloud()
    a = cloud.launch("private", "topmodel")
    b = cloud.launch("public", "topmodel")
    cloud.loop.run_until(30)
    cloud.set_state(a.instance_id, InstanceState.DEGRADED)
    cloud.set_state(a.instance_id, InstanceState.DRAINING)
    cloud.terminate(a.instance_id)
    cloud.terminate(b.instance_id)
    assert all(is_valid_history(r.history) for r in cloud.all_records())
    assert all((r.terminate_time is not None) == (r.state is InstanceState.TERMINATED) for r in cloud.all_records())


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(st.sampled_from(["launch-private", "launch-public", "terminate", "wait"]),
                          st.integers(0, 4000)), max_size=25))
def test_capacity_and_cost_monotone(ops):
    from evop.errors import CapacityExceeded

    cloud = make_cloud()
    last_cost = 0
    for op, arg in ops:
        if op.startswith("launch"):
            try:
                cloud.launch(op.split("-")[1], "topmodel")
            except CapacityExceeded:
                assert op == "launch-private"
        elif op == "terminate":
            alive = cloud.list_instances()
            if alive:
                cloud.terminate(alive[arg % len(alive)].instance_id)
        else:
            cloud.loop.run_until(cloud.loop.now + arg)
        assert cloud.alive_count("private") <= 3
        cost = cloud.accrued_cost()
        assert cost >= last_cost
        last_cost = cost


def test_requests_queue_until_boot():
    from evop.gateway import ModelRequest

    cloud = make_cloud()
    rec = cloud.launch("private", "topmodel")
    req = ModelRequest("topmodel-stub", {"a": 2, "b": 3}, "r1")
    assert cloud.submit(rec.instance_id, req) is None
    cloud.loop.run_until(30)
    assert cloud.submit(rec.instance_id, req).outputs == {"y": 7.0}
