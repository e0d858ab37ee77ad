import pytest

from evop.balancer import BalancerConfig
from evop.errors import ParseError, ValidationError
from evop.scenario import BUNDLED, bundled_scenario, load_config, parse_scenario, parse_scenario_text
from evop.simcloud import LoadModel

MINIMAL = "evop-scenario v1\nduration 100\nat 0 arrive a model=topmodel-stub\n"


def test_minimal_scenario_gets_defaults(monkeypatch):
    monkeypatch.delenv("EVOP_CONFIG", raising=False)
    spec = parse_scenario_text(MINIMAL)
    assert spec.seed == 0 and spec.duration == 100
    assert spec.balancer == BalancerConfig()
    assert spec.load == LoadModel()
    assert [p.provider_id for p in spec.providers] == ["private", "public"]
    assert "topmodel-stub" in {m for i in spec.images for m in i.model_ids}


def test_unknown_reference_is_named():
    with pytest.raises(ValidationError) as info:
        parse_scenario_text(MINIMAL + "at 10 depart ghost\n")
    assert "'ghost'" in str(info.value)


def test_event_after_duration():
    with pytest.raises(ValidationError) as info:
        parse_scenario_text(MINIMAL + "at 101 depart a\n")
    assert "after duration" in str(info.value)


def test_all_errors_reported_together():
    text = (
        "evop-scenario v1\nduration 50\n"
        "at 0 arrive a model=nobody-serves-this\n"
        "at 0 arrive a model=topmodel-stub\n"
        "at 60 depart b\n"
        "at 5 fault kind=crash\n"
        "at 5 teleport a\n"
        "provider id=x kind=private\n"
        "image id=y models=z bogus=1\n"
    )
    with pytest.raises(ValidationError) as info:
        parse_scenario_text(text)
    assert len(info.value.errors) >= 7


def test_header_required(tmp_path):
    with pytest.raises(ParseError):
        parse_scenario_text("duration 10\n")
    with pytest.raises(ParseError):
        parse_scenario(tmp_path / "missing.evop")


def test_file_name_becomes_scenario_name(tmp_path):
    path = tmp_path / "tiny.evop"
    path.write_text(MINIMAL)
    assert parse_scenario(path).name == "tiny"


def test_events_sorted_stably():
    text = MINIMAL + "at 50 depart a\nat 20 arrive b model=topmodel-stub\nat 20 arrive c model=topmodel-stub\n"
    spec = parse_scenario_text(text)
    assert [(e.at, e.ref) for e in spec.events] == [(0, "a"), (20, "b"), (20, "c"), (50, "a")]


@pytest.mark.parametrize("name", BUNDLED)
def test_bundled_scenarios_round_trip(name):
    spec = bundled_scenario(name)
    again = parse_scenario_text(spec.dumps(), name, None)
    assert again.events == spec.events
    assert again.providers == spec.providers and again.images == spec.images
    assert (again.balancer, again.load, again.seed, again.duration) == (spec.balancer, spec.load, spec.seed, spec.duration)


def test_config_file_via_environment(tmp_path, monkeypatch):
    cfg = tmp_path / "evop.conf"
    cfg.write_text(
        "evop-config v1\n"
        "balancer monitor_interval=5 window=3 policy=model_class_routing\n"
        "load per_session_cpu=0.5\n"
        "provider id=mine kind=private capacity=7 cost_rate=0\n"
        "provider id=aws kind=public cost_rate=2\n"
    )
    monkeypatch.setenv("EVOP_CONFIG", str(cfg))
    loaded = load_config()
    assert loaded.balancer.monitor_interval == 5 and loaded.balancer.sustained_window == 3
    spec = parse_scenario_text(MINIMAL)
    assert spec.load.per_session_cpu == 0.5
    assert [p.capacity for p in spec.providers] == [7, None]
    assert bundled_scenario("overflow").balancer == BalancerConfig()


def test_bad_config_lists_problems(tmp_path):
    cfg = tmp_path / "evop.conf"
    cfg.write_text("evop-config v1\nwidget x=1\nbalancer colour=blue\n")
    with pytest.raises(ValidationError) as info:
        load_config(cfg)
    assert len(info.value.errors) == 2
