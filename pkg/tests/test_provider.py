from fractions import Fraction

import pytest
from hypothesis import given, strategies as st

from evop.errors import AlreadyTerminated, CapacityExceeded, UnknownImage, UnknownInstance, UnknownProvider, ValidationError
from evop.library import ModelLibrary
from evop.provider import (
    ALLOWED_TRANSITIONS, HealthSample, InstanceState, ProviderDescriptor, ProviderKind,
    billed_cost, check_catalog, default_catalog, is_valid_history, load_catalog, provider_to_record,
)
from evop.simcloud import EventLoop, SimulatedCloud

from conftest import providers, topmodel

HOUR = 3600


def hand_billing(elapsed, granularity, rate):
    # walk the clock one second at a time, opening a new billing period
    # whenever the meter crosses a period boundary
    periods = 1
    used = 0
    for _ in range(elapsed):
        if used == granularity:
            periods += 1
            used = 0
        used += 1
    return Fraction(periods * granularity, HOUR) * rate


@pytest.fixture
def cloud():
    lib = ModelLibrary()
    lib.register_image(topmodel())
    return SimulatedCloud(EventLoop(), lib, providers(private_capacity=2, boot=30))


def advance(cloud, t):
    cloud.loop.run_until(t)


def test_launch_counts_against_capacity(cloud):
    cloud.launch("private", "topmodel")
    rec = cloud.launch("private", "topmodel")
    assert rec.state is InstanceState.PENDING
    assert cloud.free_capacity("private") == 0
    with pytest.raises(CapacityExceeded):
        cloud.launch("private", "topmodel")


def test_public_is_elastic(cloud):
    for _ in range(50):
        cloud.launch("public", "topmodel")
    assert cloud.launch("public", "topmodel").state is InstanceState.PENDING
    assert cloud.free_capacity("public") is None


def test_launch_errors(cloud):
    with pytest.raises(UnknownProvider):
        cloud.launch("nowhere", "topmodel")
    with pytest.raises(UnknownImage):
        cloud.launch("private", "ghost")


def test_terminate_bills_61_minutes_as_two_hours(cloud):
    rec = cloud.launch("public", "topmodel")
    advance(cloud, 61 * 60)
    cloud.terminate(rec.instance_id)
    assert cloud.instance_cost(rec) == Fraction(2) == hand_billing(61 * 60, HOUR, Fraction(1))


def test_terminate_pending_bills_one_period(cloud):
    rec = cloud.launch("public", "topmodel")
    advance(cloud, 5)
    cloud.terminate(rec.instance_id)
    assert rec.history == [InstanceState.PENDING, InstanceState.TERMINATED]
    assert cloud.instance_cost(rec) == Fraction(1)


def test_terminate_twice(cloud):
    rec = cloud.launch("private", "topmodel")
    cloud.terminate(rec.instance_id)
    with pytest.raises(AlreadyTerminated):
        cloud.terminate(rec.instance_id)
    with pytest.raises(UnknownInstance):
        cloud.terminate("private-i9999")


def test_terminate_frees_capacity(cloud):
    a = cloud.launch("private", "topmodel")
    cloud.launch("private", "topmodel")
    cloud.terminate(a.instance_id)
    assert a.terminate_time == 0
    cloud.launch("private", "topmodel")


def test_private_cost_is_zero(cloud):
    rec = cloud.launch("private", "topmodel")
    advance(cloud, 10 * HOUR)
    cloud.terminate(rec.instance_id)
    assert cloud.accrued_cost() == 0


def test_list_instances_ordering_and_filter(cloud):
    assert cloud.list_instances() == []
    a = cloud.launch("public", "topmodel")
    advance(cloud, 1)
    b = cloud.launch("private", "topmodel")
    assert [r.instance_id for r in cloud.list_instances()] == [a.instance_id, b.instance_id]
    assert cloud.list_instances("private") == [b]
    cloud.terminate(b.instance_id)
    assert cloud.list_instances("private") == []
    with pytest.raises(UnknownProvider):
        cloud.list_instances("nowhere")


@given(st.integers(0, 5 * HOUR), st.sampled_from([60, 600, HOUR]), st.fractions(0, 10))
def test_billing_matches_hand_stepped_meter(elapsed, granularity, rate):
    assert billed_cost(elapsed, granularity, rate) == hand_billing(elapsed, granularity, rate)


@given(st.integers(0, 4 * HOUR), st.integers(0, 4 * HOUR), st.sampled_from([60, HOUR]))
def test_billing_is_monotone(a, b, granularity):
    lo, hi = sorted((a, b))
    assert billed_cost(lo, granularity, Fraction(1)) <= billed_cost(hi, granularity, Fraction(1))


def test_transition_graph_rejects_resurrection():
    assert ALLOWED_TRANSITIONS[InstanceState.TERMINATED] == frozenset()
    assert is_valid_history([InstanceState.PENDING, InstanceState.RUNNING, InstanceState.DEGRADED,
                             InstanceState.DRAINING, InstanceState.TERMINATED])
    assert not is_valid_history([InstanceState.PENDING, InstanceState.TERMINATED, InstanceState.RUNNING])
    assert not is_valid_history([InstanceState.PENDING, InstanceState.DRAINING])


@given(st.lists(st.sampled_from(list(InstanceState)), max_size=8))
def test_history_validity_agrees_with_graph(tail):
    history = [InstanceState.PENDING, *tail]
    expected = all(b in ALLOWED_TRANSITIONS[a] for a, b in zip(history, history[1:]))
    assert is_valid_history(history) == expected


def test_descriptor_invariants():
    with pytest.raises(ValidationError):
        ProviderDescriptor("p", ProviderKind.PRIVATE)
    with pytest.raises(ValidationError):
        ProviderDescriptor("p", ProviderKind.PUBLIC, cost_rate=Fraction(-1))
    with pytest.raises(ValueError):
        HealthSample(0, 1.5)
    with pytest.raises(ValueError):
        HealthSample(0, 0.5, net_in=-1)


def test_catalog_allows_one_free_provider():
    free = ProviderDescriptor("a", ProviderKind.PRIVATE, capacity=1)
    other = ProviderDescriptor("b", ProviderKind.PRIVATE, capacity=1)
    assert check_catalog([free, other]) == ["at most one provider may have a zero cost_rate"]
    assert check_catalog(default_catalog()) == []


def test_catalog_file_round_trip(tmp_path):
    path = tmp_path / "providers.evop"
    lines = ["evop-providers v1"] + [provider_to_record(d) for d in default_catalog()]
    path.write_text("\n".join(lines) + "\n")
    assert load_catalog(path) == default_catalog()
