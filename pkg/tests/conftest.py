from __future__ import annotations

from fractions import Fraction

import pytest

from evop import channel as ch
from evop.balancer import BalancerConfig, LoadBalancer
from evop.broker import ResourceBroker
from evop.journal import SessionJournal
from evop.library import ImageDescriptor, ModelClass, ModelLibrary
from evop.provider import ProviderDescriptor, ProviderKind
from evop.simcloud import EventLoop, LoadModel, SimulatedCloud


def providers(private_capacity=2, public_capacity=None, boot=30, public_rate=1):
    return [
        ProviderDescriptor("private", ProviderKind.PRIVATE, capacity=private_capacity,
                           cost_rate=Fraction(0), boot_time=boot),
        ProviderDescriptor("public", ProviderKind.PUBLIC, capacity=public_capacity,
                           cost_rate=Fraction(public_rate), boot_time=boot),
    ]


def topmodel(max_sessions=4, model_class=ModelClass.EXPERIMENTAL, image_id="topmodel", models=("topmodel-stub",)):
    return ImageDescriptor(image_id, frozenset(models), max_sessions=max_sessions, model_class=model_class)


class Client:
    """Collects broker frames for one fake user."""

    def __init__(self, name="c"):
        self.frames = []
        self.channel = ch.InProcessChannel(lambda text: self.frames.append(ch.decode(text)), name)

    def reconnect(self):
        self.channel.close()
        self.channel = ch.InProcessChannel(lambda text: self.frames.append(ch.decode(text)), "re")

    @property
    def last(self):
        return self.frames[-1]


class Rig:
    """Cloud + library + broker + balancer on one event loop, no harness."""

    def __init__(self, tmp_path, *, private_capacity=2, public_capacity=None, boot=30, images=None,
                 config=None, load=None):
        self.loop = EventLoop()
        self.library = ModelLibrary()
        for image in images or [topmodel()]:
            self.library.register_image(image)
        self.config = config or BalancerConfig()
        self.cloud = SimulatedCloud(self.loop, self.library, providers(private_capacity, public_capacity, boot),
                                    load or LoadModel(), self.config.monitor_interval)
        self.journal = SessionJournal(tmp_path / "sessions.journal")
        self.balancer = LoadBalancer(self.cloud, self.library, self.config, clock=lambda: self.loop.now,
                                     trace=self.loop.emit)
        self.broker = self._broker()

    def _broker(self, recover=False):
        kwargs = dict(clock=lambda: self.loop.now, trace=self.loop.emit, on_slot_change=self._slot)
        if recover:
            broker, self.recovery = ResourceBroker.recover(self.cloud, self.library, self.journal, **kwargs)
        else:
            broker = ResourceBroker(self.cloud, self.library, self.journal, **kwargs)
        broker.balancer = self.balancer
        self.balancer.broker = broker
        return broker

    def restart_broker(self):
        self.broker = self._broker(recover=True)
        return self.broker

    def _slot(self, iid, delta):
        self.cloud.gateway(iid).session_count += delta

    def hello(self, model="topmodel-stub"):
        c = Client()
        update = self.broker.handle_hello(model, c.channel)
        return c, update

    def count(self, iid):
        return self.cloud.gateway(iid).session_count

    def run(self, t):
        return self.loop.run_until(t)

    def start_monitoring(self):
        self.cloud.start_monitoring()

        def tick():
            self.balancer.monitor_tick(self.loop.now)
            self.loop.schedule(self.loop.now + self.config.monitor_interval, "tick", "", tick)

        self.loop.schedule(self.config.monitor_interval, "tick", "", tick)


@pytest.fixture
def rig(tmp_path):
    return Rig(tmp_path)


@pytest.fixture
def make_rig(tmp_path):
    counter = iter(range(1000))

    def make(**kwargs):
        d = tmp_path / f"rig{next(counter)}"
        d.mkdir()
        return Rig(d, **kwargs)

    return make


# -- acceptance summary ------------------------------------------------------
# Tests marked ``criterion(n, title)`` are folded into one PASS/FAIL line per
# criterion number, printed after the run.

_criteria: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion check")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or (rep.when != "call" and rep.passed):
        return
    number, title = marker.args
    entry = _criteria.setdefault(number, {"title": title, "ok": True, "checks": 0, "seconds": 0.0})
    if rep.when == "call":
        entry["checks"] += 1
        entry["seconds"] += rep.duration
    entry["ok"] = entry["ok"] and rep.passed


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        e = _criteria[number]
        verdict = "PASS" if e["ok"] else "FAIL"
        terminalreporter.write_line(
            f"{verdict}  criterion {number}: {e['title']} ({e['checks']} checks, {e['seconds']:.2f}s)")
