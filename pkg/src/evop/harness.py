"""Scenario runner: wires cloud, library, broker, balancer and clients."""

from __future__ import annotations

import json
import logging
import os
import random
import tempfile
from collections import Counter, deque
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import TextIO

from evop import channel as ch
from evop.balancer import LoadBalancer, group_verdicts
from evop.broker import ResourceBroker, SessionState, UpdateReason
from evop.errors import EvopError, UnreadableTrace
from evop.gateway import ModelRequest
from evop.journal import SessionJournal
from evop.library import ModelLibrary
from evop.provider import ProviderKind
from evop.scenario import ScenarioEvent, ScenarioSpec
from evop.simcloud import EventLoop, FaultInjection, SimulatedCloud

logger = logging.getLogger(__name__)

BACKOFF_BASE = 1
BACKOFF_CAP = 30


def backoff_delay(attempt: int, rng: random.Random) -> int:
    """Exponential backoff with up to 50% additive jitter, in whole seconds."""
    delay = min(BACKOFF_CAP, BACKOFF_BASE * 2 ** attempt)
    return delay + rng.randint(0, delay // 2)


@dataclass
class MetricsReport:
    scenario: str
    seed: int
    sessions_total: int
    sessions_by_first_placement: dict[str, int]
    migrations_by_reason: dict[str, int]
    updates_delivered: int
    instances_launched: dict[str, int]
    instances_terminated: dict[str, int]
    total_cost: str
    cost_by_provider: dict[str, str]
    saturation_events: int
    verdicts_by_rule: dict[str, int]
    max_concurrent_public_instances: int
    placement_failures: int
    requests_served: int
    requests_dropped: int
    broker_crashes: int
    final_sessions: dict[str, str | None]
    trace_lines: int
    trace_hash: str

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"


class SimClient:
    """One end user: a duplex channel to the broker plus model requests."""

    def __init__(self, sim: "Simulation", ref: str, model_id: str):
        self.sim = sim
        self.ref = ref
        self.model_id = model_id
        self.session_id: str | None = None
        self.address: str | None = None
        self.epoch = 0
        self.received: list[ch.Message] = []
        self.outbox: deque[tuple[str, int]] = deque()
        self.attempt = 0
        self.retry_pending = False
        self.failed: str | None = None
        self.done = False
        self.requests_sent = 0
        self.channel = self._new_channel()

    def _new_channel(self) -> ch.InProcessChannel:
        return ch.InProcessChannel(self._on_frame, name=self.ref)

    def _on_frame(self, text: str) -> None:
        msg = ch.decode(text)
        self.received.append(msg)
        if isinstance(msg, (ch.Assign, ch.Update)):
            if self.session_id is not None and msg.session_id != self.session_id:
                raise AssertionError(f"{self.ref}: frame for foreign session {msg.session_id}")
            if msg.epoch < self.epoch:
                raise AssertionError(f"{self.ref}: epoch went back {self.epoch} -> {msg.epoch}")
            self.session_id, self.address, self.epoch = msg.session_id, msg.address, msg.epoch
            if isinstance(msg, ch.Update):
                self.sim.updates_delivered += 1
        elif isinstance(msg, ch.Error):
            self.sim.loop.emit("client_error", self.ref, f"code={msg.code}")
            if self.session_id is None:
                self.failed = msg.code
                self.outbox.clear()

    def enqueue(self, op: str, arg: int = 0) -> None:
        self.outbox.append((op, arg))
        self.flush()

    def on_disconnect(self) -> None:
        self.channel = self._new_channel()
        if self.session_id is not None and not self.done:
            self.outbox.appendleft(("ping", 0))
        self.flush()

    def flush(self) -> None:
        while self.outbox and self.failed is None:
            if self.sim.broker is None:
                self._schedule_retry()
                return
            op, arg = self.outbox.popleft()
            self._send(op, arg)
        self.attempt = 0

    def _schedule_retry(self) -> None:
        if self.retry_pending:
            return
        self.retry_pending = True
        delay = backoff_delay(self.attempt, self.sim.backoff_rng)
        self.attempt += 1

        def fire():
            self.retry_pending = False
            self.flush()

        self.sim.loop.schedule(self.sim.loop.now + delay, "retry", self.ref, fire, f"attempt={self.attempt}")

    def _send(self, op: str, arg: int) -> None:
        broker = self.sim.broker
        if op == "hello":
            broker.receive(ch.encode(ch.Hello(self.model_id)), self.channel)
            if self.session_id is not None:
                self.sim.on_assigned(self)
        elif op == "bye":
            if self.session_id is None:
                return
            broker.receive(ch.encode(ch.Bye(self.session_id)), self.channel)
            self.done = True
        elif op == "ping":
            if self.session_id is not None and not self.done:
                broker.receive(ch.encode(ch.Ping(self.session_id)), self.channel)
        elif op == "burst":
            self._burst(arg)

    def _burst(self, count: int) -> None:
        if self.address is None:
            return
        cloud = self.sim.cloud
        iid = cloud.by_address(self.address).instance_id
        for _ in range(count):
            n = self.requests_sent
            self.requests_sent += 1
            params = {"a": float(n % 7), "b": float(len(self.ref) + n % 3), "rain": 1.0 + n, "coeff": 0.5,
                      "load": 2.0 + n, "area": 4.0}
            try:
                cloud.submit(iid, ModelRequest(self.model_id, params, f"{self.ref}-{n}"))
                self.sim.requests_served += 1
            except EvopError:
                self.sim.requests_dropped += 1


class Simulation:
    """One scenario run. ``run()`` returns the metrics report."""

    def __init__(self, spec: ScenarioSpec, workdir: str | os.PathLike | None = None,
                 trace_sink: TextIO | None = None):
        self.spec = spec
        self.loop = EventLoop(trace_sink)
        self.library = ModelLibrary()
        for image in spec.images:
            self.library.register_image(image)
        self.cloud = SimulatedCloud(self.loop, self.library, list(spec.providers), spec.load,
                                    spec.balancer.monitor_interval)
        self._tmp = None
        if workdir is None:
            self._tmp = tempfile.TemporaryDirectory(prefix="evop-")
            workdir = self._tmp.name
        self.journal = SessionJournal(Path(workdir) / "active-sessions.journal")
        self.balancer = LoadBalancer(self.cloud, self.library, spec.balancer, clock=self._now,
                                     trace=self.loop.emit)
        self.broker: ResourceBroker | None = None
        self._start_broker(recover=False)
        self.backoff_rng = random.Random(f"backoff:{spec.seed}")
        self.clients: dict[str, SimClient] = {}
        self.first_placement: Counter[str] = Counter()
        self.migrations: Counter[str] = Counter()
        self.updates_delivered = 0
        self.requests_served = 0
        self.requests_dropped = 0
        self.broker_crashes = 0
        self.epoch_checks: list[tuple[str, int, int]] = []
        self.final_sessions: dict[str, str | None] = {}
        self.report: MetricsReport | None = None

    def _now(self) -> int:
        return self.loop.now

    def _trace(self, kind: str, subject: str, detail: str) -> None:
        if kind == "update":
            reason = dict(kv.split("=", 1) for kv in detail.split())["reason"]
            self.migrations[reason] += 1
        self.loop.emit(kind, subject, detail)

    def _slot(self, instance_id: str, delta: int) -> None:
        self.cloud.gateway(instance_id).session_count += delta

    def _start_broker(self, recover: bool) -> None:
        kwargs = dict(clock=self._now, trace=self._trace, on_slot_change=self._slot)
        if recover:
            broker, _ = ResourceBroker.recover(self.cloud, self.library, self.journal, **kwargs)
        else:
            self.journal.replay()
            broker = ResourceBroker(self.cloud, self.library, self.journal, **kwargs)
        broker.balancer = self.balancer
        self.balancer.broker = broker
        self.broker = broker

    # -- scenario events ---------------------------------------------------

    def timeline(self) -> list[ScenarioEvent]:
        """Scenario events with seeded arrival jitter applied."""
        rng = random.Random(self.spec.seed)
        shift: dict[str, int] = {}
        out = []
        for ev in self.spec.events:
            if ev.kind == "arrive":
                shift[ev.ref] = rng.randint(0, self.spec.arrival_jitter) if self.spec.arrival_jitter else 0
            at = ev.at
            if ev.ref and ev.kind in ("arrive", "depart", "burst", "fault") and not ev.instance_id:
                at = min(ev.at + shift.get(ev.ref, 0), self.spec.duration)
            out.append(ScenarioEvent(at, ev.kind, ev.ref, ev.model_id, ev.count, ev.fault_kind,
                                     ev.instance_id, ev.duration, ev.restart_delay))
        return out

    def _schedule(self, ev: ScenarioEvent) -> None:
        if ev.kind == "arrive":
            self.loop.schedule(ev.at, "arrive", ev.ref, lambda: self._arrive(ev), f"model={ev.model_id}")
        elif ev.kind == "depart":
            self.loop.schedule(ev.at, "depart", ev.ref, lambda: self.clients[ev.ref].enqueue("bye"))
        elif ev.kind == "burst":
            self.loop.schedule(ev.at, "burst", ev.ref, lambda: self.clients[ev.ref].enqueue("burst", ev.count),
                               f"count={ev.count}")
        elif ev.kind == "fault":
            self.loop.schedule(ev.at, "fault", ev.instance_id or ev.ref, lambda: self._fault(ev),
                               f"kind={ev.fault_kind.value}")
        elif ev.kind == "broker_crash":
            self.loop.schedule(ev.at, "broker_crash", "", lambda: self._crash(ev.restart_delay),
                               f"restart={ev.restart_delay}")

    def _arrive(self, ev: ScenarioEvent) -> None:
        client = SimClient(self, ev.ref, ev.model_id)
        self.clients[ev.ref] = client
        client.enqueue("hello")

    def on_assigned(self, client: SimClient) -> None:
        rec = self.cloud.by_address(client.address)
        self.first_placement[rec.provider_id] += 1
        self.loop.emit("client_assigned", client.ref, f"session={client.session_id} instance={rec.instance_id}")

    def _fault(self, ev: ScenarioEvent) -> None:
        iid = ev.instance_id
        if not iid:
            client = self.clients.get(ev.ref)
            if client is None or client.address is None:
                self.loop.emit("fault_skipped", ev.ref, "no assignment")
                return
            iid = self.cloud.by_address(client.address).instance_id
        try:
            self.cloud.inject_fault(FaultInjection(iid, ev.fault_kind, self.loop.now, ev.duration))
        except EvopError as exc:
            self.loop.emit("fault_skipped", iid, exc.code)
            return
        self.loop.emit("fault_injected", iid, f"kind={ev.fault_kind.value}")

    def _crash(self, restart_delay: int) -> None:
        if self.broker is None:
            return
        self.broker_crashes += 1
        before = {s.session_id: s.epoch for s in self.broker.live_sessions()}
        self.broker = None
        self.balancer.broker = None
        for client in self.clients.values():
            client.channel.close()
        for ref in sorted(self.clients):
            self.clients[ref].on_disconnect()

        def restart():
            self._start_broker(recover=True)
            for sid, epoch in before.items():
                s = self.broker.sessions.get(sid)
                self.epoch_checks.append((sid, epoch, s.epoch if s is not None else -1))

        self.loop.schedule(self.loop.now + restart_delay, "broker_restart", "", restart)

    def _tick(self) -> None:
        self.balancer.monitor_tick(self.loop.now)
        nxt = self.loop.now + self.spec.balancer.monitor_interval
        if nxt <= self.spec.duration:
            self.loop.schedule(nxt, "tick", "", self._tick)

    # -- run ----------------------------------------------------------------

    def run(self) -> MetricsReport:
        for ev in self.timeline():
            self._schedule(ev)
        self.cloud.start_monitoring()
        if self.spec.balancer.monitor_interval <= self.spec.duration:
            self.loop.schedule(self.spec.balancer.monitor_interval, "tick", "", self._tick)
        self.loop.run_until(self.spec.duration)
        self.final_sessions = self.session_mapping()
        self.loop.emit("teardown", "", f"alive={len(self.cloud.list_instances())}")
        for rec in self.cloud.list_instances():
            self.cloud.terminate(rec.instance_id)
        self.report = self._report()
        if self._tmp is not None:
            self._tmp.cleanup()
        return self.report

    def session_mapping(self) -> dict[str, str | None]:
        """Scenario reference -> serving instance (``None`` once closed or never placed)."""
        broker = self.broker
        if broker is None:
            broker, _ = ResourceBroker.recover(self.cloud, self.library, self.journal)
        out: dict[str, str | None] = {}
        for ref in sorted(self.clients):
            c = self.clients[ref]
            s = broker.sessions.get(c.session_id) if c.session_id else None
            out[ref] = s.instance_id if s is not None and s.state is not SessionState.CLOSED else None
        return out

    def _report(self) -> MetricsReport:
        cloud = self.cloud
        pids = sorted(d.provider_id for d in cloud.descriptors())
        total = cloud.accrued_cost()
        by_provider = cloud.cost_by_provider()
        return MetricsReport(
            scenario=self.spec.name,
            seed=self.spec.seed,
            sessions_total=sum(self.first_placement.values()),
            sessions_by_first_placement={p: self.first_placement.get(p, 0) for p in pids},
            migrations_by_reason={r.value: self.migrations.get(r.value, 0)
                                  for r in UpdateReason if r is not UpdateReason.INITIAL},
            updates_delivered=self.updates_delivered,
            instances_launched={p: cloud.launched.get(p, 0) for p in pids},
            instances_terminated={p: cloud.terminated.get(p, 0) for p in pids},
            total_cost=_money(total),
            cost_by_provider={p: _money(by_provider[p]) for p in pids},
            saturation_events=self.balancer.saturation_events,
            verdicts_by_rule=group_verdicts(self.balancer.verdicts),
            max_concurrent_public_instances=cloud.peak_by_kind.get(ProviderKind.PUBLIC, 0),
            placement_failures=self.balancer.placement_failures,
            requests_served=self.requests_served,
            requests_dropped=self.requests_dropped,
            broker_crashes=self.broker_crashes,
            final_sessions=self.final_sessions,
            trace_lines=len(self.loop.trace),
            trace_hash=self.loop.trace_hash(),
        )


def _money(value: Fraction) -> str:
    return f"{float(value):.6f}"


def run_scenario(spec: ScenarioSpec, trace_path: str | os.PathLike | None = None) -> MetricsReport:
    if trace_path is None:
        return Simulation(spec).run()
    with open(trace_path, "w", encoding="utf-8") as sink:
        return Simulation(spec, trace_sink=sink).run()


@dataclass(frozen=True)
class TraceDiff:
    equal: bool
    line: int | None = None
    left: str | None = None
    right: str | None = None


def diff_traces(a: str | os.PathLike, b: str | os.PathLike) -> TraceDiff:
    """First divergent line (1-based) of two trace files, if any."""
    try:
        left = Path(a).read_text(encoding="utf-8").splitlines()
        right = Path(b).read_text(encoding="utf-8").splitlines()
    except (OSError, UnicodeDecodeError) as exc:
        raise UnreadableTrace(str(exc)) from None
    for i, (x, y) in enumerate(zip(left, right), start=1):
        if x != y:
            return TraceDiff(False, i, x, y)
    if len(left) != len(right):
        i = min(len(left), len(right)) + 1
        return TraceDiff(False, i, left[i - 1] if i <= len(left) else None,
                         right[i - 1] if i <= len(right) else None)
    return TraceDiff(True)
