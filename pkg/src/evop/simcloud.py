"""Deterministic discrete-event cloud backend.

Time is integer virtual seconds. Everything that happens in a simulation is
an event popped from one priority queue ordered by (timestamp, insertion
sequence), and every processed event appends one tab-separated line to the
trace. The core is randomness-free; jitter is injected by the scenario
runner when it schedules events.
"""

from __future__ import annotations

import hashlib
import heapq
import logging
from collections import defaultdict
from dataclasses import dataclass, field
from enum import Enum
from fractions import Fraction
from typing import Callable, TextIO

from evop.errors import (
    AlreadyTerminated,
    CapacityExceeded,
    NotRunning,
    PastEvent,
    UnknownInstance,
    UnknownProvider,
)
from evop.gateway import ModelGateway, ModelRequest, ModelResult
from evop.library import ModelLibrary
from evop.provider import (
    OBSERVABLE_STATES,
    HealthSample,
    InstanceRecord,
    InstanceState,
    Provider,
    ProviderDescriptor,
    ProviderKind,
    billed_cost,
)

logger = logging.getLogger(__name__)

DEFAULT_MONITOR_INTERVAL = 10


def _clean(text: object) -> str:
    return str(text).replace("\t", " ").replace("\n", " ")


@dataclass(order=True)
class Event:
    at: int
    seq: int
    kind: str = field(compare=False)
    subject: str = field(compare=False, default="")
    detail: str = field(compare=False, default="")
    action: Callable[[], None] | None = field(compare=False, default=None, repr=False)
    cancelled: bool = field(compare=False, default=False)


class EventLoop:
    """Single-threaded event loop owning the virtual clock and the trace."""

    def __init__(self, trace_sink: TextIO | None = None):
        self.now = 0
        self._queue: list[Event] = []
        self._seq = 0
        self.trace: list[str] = []
        self._sink = trace_sink

    def schedule(self, at: int, kind: str, subject: str = "", action: Callable[[], None] | None = None,
                 detail: str = "") -> Event:
        if at < self.now:
            raise PastEvent(f"{kind} at t={at} is before now={self.now}")
        ev = Event(int(at), self._seq, kind, subject, detail, action)
        self._seq += 1
        heapq.heappush(self._queue, ev)
        return ev

    def emit(self, kind: str, subject: str = "", detail: str = "") -> None:
        line = f"{self.now}\t{_clean(kind)}\t{_clean(subject)}\t{_clean(detail)}"
        self.trace.append(line)
        if self._sink is not None:
            self._sink.write(line + "\n")

    def run_until(self, t: int) -> int:
        if t < self.now:
            raise PastEvent(f"run_until({t}) is before now={self.now}")
        processed = 0
        while self._queue and self._queue[0].at <= t:
            ev = heapq.heappop(self._queue)
            if ev.cancelled:
                continue
            self.now = ev.at
            self.emit(ev.kind, ev.subject, ev.detail)
            processed += 1
            if ev.action is not None:
                ev.action()
        self.now = t
        return processed

    def pending(self) -> int:
        return sum(1 for ev in self._queue if not ev.cancelled)

    def trace_hash(self) -> str:
        h = hashlib.sha256()
        for line in self.trace:
            h.update(line.encode("utf-8"))
            h.update(b"\n")
        return h.hexdigest()


@dataclass(frozen=True)
class LoadModel:
    """Synthetic mapping from sessions and requests to health counters."""

    per_session_cpu: float = 0.2
    per_request_bytes_in: int = 2048
    per_request_bytes_out: int = 8192
    disk_bytes_per_request: int = 4096
    disk_write_bytes_per_request: int = 1024
    session_requests_per_interval: int = 1
    cpu_per_compute_unit: float = 0.0

    def __post_init__(self):
        values = (self.per_session_cpu, self.per_request_bytes_in, self.per_request_bytes_out,
                  self.disk_bytes_per_request, self.disk_write_bytes_per_request,
                  self.session_requests_per_interval, self.cpu_per_compute_unit)
        if min(values) < 0:
            raise ValueError("load model values must be non-negative")

    def cpu(self, sessions: int, compute_units: int = 0) -> float:
        return min(1.0, sessions * self.per_session_cpu + compute_units * self.cpu_per_compute_unit)


class FaultKind(str, Enum):
    CPU_SATURATION = "cpu_saturation"
    NETWORK_BLACKHOLE = "network_blackhole"
    CRASH = "crash"


@dataclass(frozen=True)
class FaultInjection:
    instance_id: str
    kind: FaultKind
    start: int
    duration: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "kind", FaultKind(self.kind))
        if self.start < 0:
            raise ValueError("fault start must be >= 0")
        if self.duration is not None and self.duration < 0:
            raise ValueError("fault duration must be >= 0")

    def affects_interval(self, sample_at: int, interval: int) -> bool:
        """True when the whole interval ending at ``sample_at`` lies inside the fault."""
        begin = sample_at - interval
        if begin < self.start:
            return False
        return self.duration is None or begin < self.start + self.duration


class SimulatedCloud(Provider):
    """Provider implementation backed by the event loop."""

    def __init__(self, loop: EventLoop, library: ModelLibrary, providers: list[ProviderDescriptor],
                 load: LoadModel | None = None, monitor_interval: int = DEFAULT_MONITOR_INTERVAL):
        self.loop = loop
        self.library = library
        self._providers = {p.provider_id: p for p in providers}
        self.load = load or LoadModel()
        self.monitor_interval = monitor_interval
        self._records: dict[str, InstanceRecord] = {}
        self._gateways: dict[str, ModelGateway] = {}
        self._faults: dict[str, list[FaultInjection]] = defaultdict(list)
        self._queued: dict[str, list[ModelRequest]] = defaultdict(list)
        self._serial = 0
        self.on_running: list[Callable[[InstanceRecord], None]] = []
        self.launched: dict[str, int] = defaultdict(int)
        self.terminated: dict[str, int] = defaultdict(int)
        self.peak_alive: dict[str, int] = defaultdict(int)
        self.peak_by_kind: dict[ProviderKind, int] = defaultdict(int)
        self.dropped_requests = 0
        self._sampling = False

    # -- Provider interface -------------------------------------------------

    def descriptors(self) -> list[ProviderDescriptor]:
        return list(self._providers.values())

    def descriptor(self, provider_id: str) -> ProviderDescriptor:
        try:
            return self._providers[provider_id]
        except KeyError:
            raise UnknownProvider(provider_id) from None

    def alive_count(self, provider_id: str) -> int:
        return sum(1 for r in self._records.values() if r.provider_id == provider_id and r.alive)

    def free_capacity(self, provider_id: str) -> int | None:
        d = self.descriptor(provider_id)
        if d.capacity is None:
            return None
        return d.capacity - self.alive_count(provider_id)

    def launch(self, provider_id: str, image_id: str) -> InstanceRecord:
        d = self.descriptor(provider_id)
        image = self.library.get(image_id)
        alive = self.alive_count(provider_id)
        if d.capacity is not None and alive >= d.capacity:
            raise CapacityExceeded(f"{provider_id}: {alive}/{d.capacity} instances in use")
        self._serial += 1
        iid = f"{provider_id}-i{self._serial:04d}"
        rec = InstanceRecord(iid, provider_id, image.image_id, f"{provider_id}-inst{self._serial}:8080",
                             self.loop.now, image_version=image.version)
        self._records[iid] = rec
        self._gateways[iid] = ModelGateway(rec, image)
        self.launched[provider_id] += 1
        self.peak_alive[provider_id] = max(self.peak_alive[provider_id], alive + 1)
        same_kind = sum(1 for r in self._records.values()
                        if r.alive and self._providers[r.provider_id].kind is d.kind)
        self.peak_by_kind[d.kind] = max(self.peak_by_kind[d.kind], same_kind)
        self.loop.emit("launch", iid, f"provider={provider_id} image={image.image_id} version={image.version}")
        self.loop.schedule(self.loop.now + d.boot_time, "boot", iid, lambda: self._boot(iid))
        return rec

    def terminate(self, instance_id: str) -> None:
        rec = self.describe(instance_id)
        if not rec.alive:
            raise AlreadyTerminated(instance_id)
        self._finish(rec)
        self.loop.emit("terminate", instance_id, f"cost={float(self.instance_cost(rec))!r}")

    def poll_metrics(self, instance_id: str) -> HealthSample:
        rec = self.describe(instance_id)
        if rec.state not in OBSERVABLE_STATES:
            raise NotRunning(f"{instance_id} is {rec.state.value}")
        assert rec.last_sample is not None
        return rec.last_sample

    def list_instances(self, provider_id: str | None = None) -> list[InstanceRecord]:
        if provider_id is not None:
            self.descriptor(provider_id)
        out = [r for r in self._records.values()
               if r.alive and (provider_id is None or r.provider_id == provider_id)]
        out.sort(key=lambda r: (r.launch_time, r.instance_id))
        return out

    def describe(self, instance_id: str) -> InstanceRecord:
        try:
            return self._records[instance_id]
        except KeyError:
            raise UnknownInstance(instance_id) from None

    def set_state(self, instance_id: str, state: InstanceState) -> None:
        rec = self.describe(instance_id)
        if state is InstanceState.TERMINATED:
            self.terminate(instance_id)
            return
        rec.transition(state)
        self.loop.emit("state", instance_id, state.value)

    def instance_cost(self, rec: InstanceRecord) -> Fraction:
        d = self._providers[rec.provider_id]
        end = rec.terminate_time if rec.terminate_time is not None else self.loop.now
        return billed_cost(end - rec.launch_time, d.billing_granularity, d.cost_rate)

    def accrued_cost(self) -> Fraction:
        return sum((self.instance_cost(r) for r in self._records.values()), Fraction(0))

    def cost_by_provider(self) -> dict[str, Fraction]:
        out = {pid: Fraction(0) for pid in self._providers}
        for r in self._records.values():
            out[r.provider_id] += self.instance_cost(r)
        return out

    # -- simulation extras ----------------------------------------------------

    def all_records(self) -> list[InstanceRecord]:
        return list(self._records.values())

    def gateway(self, instance_id: str) -> ModelGateway:
        self.describe(instance_id)
        return self._gateways[instance_id]

    def by_address(self, address: str) -> InstanceRecord:
        for rec in self._records.values():
            if rec.address == address:
                return rec
        raise UnknownInstance(address)

    def kind_of(self, instance_id: str) -> ProviderKind:
        return self._providers[self.describe(instance_id).provider_id].kind

    def inject_fault(self, fault: FaultInjection) -> None:
        rec = self.describe(fault.instance_id)
        self._faults[rec.instance_id].append(fault)
        if fault.kind is FaultKind.CRASH:
            at = max(fault.start, self.loop.now)
            self.loop.schedule(at, "crash", rec.instance_id, lambda: self._crash(rec.instance_id))

    def submit(self, instance_id: str, request: ModelRequest) -> ModelResult | None:
        """Deliver a request; requests to a booting instance wait for boot."""
        rec = self.describe(instance_id)
        if rec.state is InstanceState.PENDING:
            self._queued[instance_id].append(request)
            return None
        if not rec.alive:
            self.dropped_requests += 1
            raise NotRunning(f"{instance_id} is terminated")
        return self._gateways[instance_id].run_model(request)

    def start_monitoring(self) -> None:
        if not self._sampling:
            self._sampling = True
            self._schedule_sample(self.loop.now + self.monitor_interval)

    # -- internals ----------------------------------------------------------

    def _schedule_sample(self, at: int) -> None:
        self.loop.schedule(at, "sample", "", self._sample_all)

    def _boot(self, instance_id: str) -> None:
        rec = self._records[instance_id]
        if rec.state is not InstanceState.PENDING:
            return
        rec.transition(InstanceState.RUNNING)
        gw = self._gateways[instance_id]
        rec.last_sample = HealthSample(self.loop.now, self.load.cpu(gw.session_count))
        self._emit_sample(rec)
        for request in self._queued.pop(instance_id, []):
            try:
                gw.run_model(request)
            except Exception as exc:  # stale or malformed requests are the client's problem
                logger.debug("queued request on %s failed: %s", instance_id, exc)
        for callback in list(self.on_running):
            callback(rec)

    def _sample_all(self) -> None:
        now = self.loop.now
        for rec in self._records.values():
            if rec.state in OBSERVABLE_STATES:
                rec.last_sample = self._materialize(rec, now)
                self._emit_sample(rec)
        self._schedule_sample(now + self.monitor_interval)

    def _emit_sample(self, rec: InstanceRecord) -> None:
        s = rec.last_sample
        self.loop.emit("health", rec.instance_id,
                       f"cpu={s.cpu!r} in={s.net_in} out={s.net_out} rd={s.disk_read} wr={s.disk_write}")

    def _materialize(self, rec: InstanceRecord, now: int) -> HealthSample:
        gw = self._gateways[rec.instance_id]
        lm = self.load
        gw.record_traffic(gw.session_count * lm.session_requests_per_interval)
        requests, units = gw.traffic.drain()
        cpu = lm.cpu(gw.session_count, units)
        net_in = requests * lm.per_request_bytes_in
        net_out = requests * lm.per_request_bytes_out
        for fault in self._faults.get(rec.instance_id, ()):
            if not fault.affects_interval(now, self.monitor_interval):
                continue
            if fault.kind is FaultKind.CPU_SATURATION:
                cpu = 1.0
            elif fault.kind is FaultKind.NETWORK_BLACKHOLE:
                net_out = 0
        return HealthSample(now, cpu, requests * lm.disk_bytes_per_request,
                            requests * lm.disk_write_bytes_per_request, net_in, net_out)

    def _finish(self, rec: InstanceRecord) -> None:
        rec.transition(InstanceState.TERMINATED)
        rec.terminate_time = self.loop.now
        self.terminated[rec.provider_id] += 1
        self._queued.pop(rec.instance_id, None)
        live = {(r.image_id, r.image_version) for r in self._records.values() if r.alive}
        self.library.prune(live)

    def _crash(self, instance_id: str) -> None:
        rec = self._records[instance_id]
        if rec.alive:
            self._finish(rec)
            self.loop.emit("crashed", instance_id, f"cost={float(self.instance_cost(rec))!r}")
