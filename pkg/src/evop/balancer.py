"""Load Balancer: placement, health-driven replacement and redistribution.

Two objectives pull against each other here: keep cost down (serve from the
private cloud, return to it when it is underused) and keep instances
responsive (replace the ones whose health samples show sustained trouble).
All decisions happen inside :meth:`LoadBalancer.monitor_tick` or in direct
response to a broker command, and every one of them is written to the trace.
"""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from typing import TYPE_CHECKING, Callable, Iterable, Sequence

from evop.errors import CapacityExceeded, NotRunning, PlacementFailed, UnknownInstance
from evop.library import ImageDescriptor, ModelClass, ModelLibrary
from evop.provider import HealthSample, InstanceRecord, InstanceState, ProviderKind
from evop.textfmt import Record

if TYPE_CHECKING:
    from evop.broker import ResourceBroker
    from evop.simcloud import SimulatedCloud

logger = logging.getLogger(__name__)

_SERVING = (InstanceState.PENDING, InstanceState.RUNNING)


class PlacementPolicy(str, Enum):
    PRIVATE_FIRST = "private_first"
    MODEL_CLASS_ROUTING = "model_class_routing"


class VerdictRule(str, Enum):
    SUSTAINED_CPU = "sustained_cpu"
    BLACKHOLE = "blackhole"
    CRASH_DETECTED = "crash_detected"


@dataclass(frozen=True)
class BalancerConfig:
    monitor_interval: int = 10
    cpu_high_threshold: float = 0.90
    sustained_window: int = 5
    underuse_threshold: float = 0.50
    migration_cooldown: int = 120
    placement_policy: PlacementPolicy = PlacementPolicy.PRIVATE_FIRST

    def __post_init__(self):
        object.__setattr__(self, "placement_policy", PlacementPolicy(self.placement_policy))
        if not 0 < self.cpu_high_threshold < 1 or not 0 < self.underuse_threshold < 1:
            raise ValueError("thresholds must lie in (0, 1)")
        if self.sustained_window < 1:
            raise ValueError("sustained_window must be >= 1")
        if self.migration_cooldown < 0:
            raise ValueError("migration_cooldown must be >= 0")
        if self.monitor_interval < 1:
            raise ValueError("monitor_interval must be positive")

    @classmethod
    def from_record(cls, rec: Record) -> "BalancerConfig":
        d = cls()
        return cls(
            monitor_interval=int(rec.take("monitor_interval", str(d.monitor_interval))),
            cpu_high_threshold=float(rec.take("cpu_high", str(d.cpu_high_threshold))),
            sustained_window=int(rec.take("window", str(d.sustained_window))),
            underuse_threshold=float(rec.take("underuse", str(d.underuse_threshold))),
            migration_cooldown=int(rec.take("cooldown", str(d.migration_cooldown))),
            placement_policy=PlacementPolicy(rec.take("policy", d.placement_policy.value)),
        )


@dataclass(frozen=True)
class DegradationVerdict:
    instance_id: str
    rule: VerdictRule
    evidence: tuple[HealthSample, ...] | str


def cpu_window_degraded(samples: Sequence[HealthSample], window: int, threshold: float) -> bool:
    """Last ``window`` samples all at or above the CPU threshold."""
    return len(samples) >= window and all(s.cpu >= threshold for s in list(samples)[-window:])


def blackhole_window(samples: Sequence[HealthSample], window: int) -> bool:
    """Last ``window`` samples all receive traffic yet send nothing."""
    return len(samples) >= window and all(
        s.net_out == 0 and s.net_in > 0 for s in list(samples)[-window:]
    )


@dataclass
class Replacement:
    old_id: str
    new_id: str
    rule: VerdictRule


@dataclass
class PendingMove:
    """Sessions waiting for a booting private instance (reverse migration)."""

    target_id: str
    session_ids: list[str] = field(default_factory=list)


class LoadBalancer:
    def __init__(
        self,
        cloud: "SimulatedCloud",
        library: ModelLibrary,
        config: BalancerConfig | None = None,
        clock: Callable[[], int] = lambda: 0,
        trace: Callable[[str, str, str], None] | None = None,
        session_count: Callable[[str], int] | None = None,
    ):
        self.cloud = cloud
        self.library = library
        self.config = config or BalancerConfig()
        self.clock = clock
        self._trace = trace or (lambda kind, subject, detail: None)
        self._count = session_count or (lambda iid: cloud.gateway(iid).health()["session_count"])
        self.broker: ResourceBroker | None = None
        self._history: dict[str, deque[HealthSample]] = {}
        self._known: set[str] = set()
        self._replacements: dict[str, Replacement] = {}
        self._reserved: dict[str, int] = {}
        self._moves: dict[str, PendingMove] = {}
        self._last_reverse: int | None = None
        self.saturation_events = 0
        self.placement_failures = 0
        self.verdicts: list[DegradationVerdict] = []
        cloud.on_running.append(self._on_running)

    # -- helpers ------------------------------------------------------------

    def count(self, instance_id: str) -> int:
        return self._count(instance_id)

    def load(self, instance_id: str) -> int:
        return self.count(instance_id) + self._reserved.get(instance_id, 0)

    def _tiers(self, image: ImageDescriptor) -> list[str]:
        private = sorted(d.provider_id for d in self.cloud.descriptors() if d.kind is ProviderKind.PRIVATE)
        public = sorted(d.provider_id for d in self.cloud.descriptors() if d.kind is ProviderKind.PUBLIC)
        if self.config.placement_policy is PlacementPolicy.MODEL_CLASS_ROUTING:
            return public if image.model_class is ModelClass.STREAMLINED else private
        return private + public

    def _is_private(self, provider_id: str) -> bool:
        return self.cloud.descriptor(provider_id).kind is ProviderKind.PRIVATE

    def _serves(self, rec: InstanceRecord, model_id: str) -> bool:
        try:
            return model_id in self.library.get(rec.image_id, rec.image_version).model_ids
        except Exception:
            return False

    def _fill_target(self, provider_id: str, image: ImageDescriptor, model_id: str) -> str | None:
        best = None
        for rec in self.cloud.list_instances(provider_id):
            if rec.image_id != image.image_id or rec.state not in _SERVING:
                continue
            if rec.instance_id in self._replacements or not self._serves(rec, model_id):
                continue
            load = self.load(rec.instance_id)
            if load < image.max_sessions:
                key = (load, rec.instance_id)
                if best is None or key < best:
                    best = key
        return best[1] if best else None

    def _reserve(self, instance_id: str, slots: int) -> None:
        self._reserved[instance_id] = self._reserved.get(instance_id, 0) + slots
        self._trace("reserve", instance_id, f"slots={self._reserved[instance_id]}")

    def _release(self, instance_id: str) -> None:
        if self._reserved.pop(instance_id, None) is not None:
            self._trace("release", instance_id, "")

    def _launch(self, provider_id: str, image: ImageDescriptor) -> InstanceRecord:
        try:
            rec = self.cloud.launch(provider_id, image.image_id)
        except CapacityExceeded:
            victim = self._reclaimable(provider_id, image)
            if victim is None:
                raise
            self._trace("reclaim", victim, f"for={image.image_id}")
            self._retire(victim)
            rec = self.cloud.launch(provider_id, image.image_id)
        self._known.add(rec.instance_id)
        return rec

    def _reclaimable(self, provider_id: str, image: ImageDescriptor) -> str | None:
        """An idle private instance of another image whose slot can be reused."""
        if not self._is_private(provider_id):
            return None
        for rec in self.cloud.list_instances(provider_id):
            if (rec.image_id != image.image_id and rec.state is InstanceState.RUNNING
                    and self.load(rec.instance_id) == 0 and rec.instance_id not in self._replacements):
                return rec.instance_id
        return None

    def _retire(self, instance_id: str) -> None:
        rec = self.cloud.describe(instance_id)
        self._known.discard(instance_id)
        self._history.pop(instance_id, None)
        self._release(instance_id)
        if rec.alive:
            self.cloud.terminate(instance_id)

    # -- placement ----------------------------------------------------------

    def place(self, model_id: str) -> str:
        image = self.library.resolve(model_id)
        private_first = self.config.placement_policy is PlacementPolicy.PRIVATE_FIRST
        for provider_id in self._tiers(image):
            target = self._fill_target(provider_id, image, model_id)
            launched = False
            if target is None:
                try:
                    target = self._launch(provider_id, image).instance_id
                    launched = True
                except CapacityExceeded:
                    if private_first and self._is_private(provider_id):
                        self.saturation_events += 1
                        self._trace("saturation", provider_id, f"model={model_id}")
                    continue
            self._trace("place", model_id,
                        f"instance={target} provider={provider_id} launched={int(launched)}")
            return target
        self.placement_failures += 1
        self._trace("place_failed", model_id, "")
        raise PlacementFailed(f"no provider can host {model_id!r}")

    def _replacement_target(self, old: InstanceRecord, image: ImageDescriptor) -> InstanceRecord:
        order = self._tiers(image)
        if old.provider_id in order:
            order = order[order.index(old.provider_id):]
        else:
            order = [old.provider_id, *order]
        for provider_id in order:
            try:
                return self._launch(provider_id, image)
            except CapacityExceeded:
                continue
        raise PlacementFailed(f"no capacity to replace {old.instance_id}")

    # -- monitoring ---------------------------------------------------------

    def monitor_tick(self, now: int | None = None) -> list[DegradationVerdict]:
        now = self.clock() if now is None else now
        verdicts: list[DegradationVerdict] = []
        alive = {r.instance_id: r for r in self.cloud.list_instances()}
        for iid in sorted(self._known - set(alive)):
            try:
                self.cloud.poll_metrics(iid)
            except (NotRunning, UnknownInstance) as exc:
                verdicts.append(DegradationVerdict(iid, VerdictRule.CRASH_DETECTED, f"poll failed: {exc}"))
            self._known.discard(iid)
            self._history.pop(iid, None)
        for iid, rec in alive.items():
            self._known.add(iid)
            if rec.state is InstanceState.PENDING:
                continue
            sample = self.cloud.poll_metrics(iid)
            hist = self._history.setdefault(iid, deque(maxlen=self.config.sustained_window))
            if not hist or hist[-1].at < sample.at:
                hist.append(sample)
            if rec.state is InstanceState.DRAINING or iid in self._replacements:
                continue
            v = self._judge(iid, hist)
            if v is not None:
                verdicts.append(v)
        for v in verdicts:
            self.verdicts.append(v)
            self._trace("verdict", v.instance_id, f"rule={v.rule.value}")
            try:
                self.replace_instance(v)
            except PlacementFailed as exc:
                self._trace("replace_failed", v.instance_id, str(exc))
        self._sweep()
        if self.broker is not None:
            self.reverse_migrate(now)
            self.rebalance()
        self._scale_in()
        return verdicts

    def _judge(self, iid: str, hist: deque[HealthSample]) -> DegradationVerdict | None:
        w = self.config.sustained_window
        if cpu_window_degraded(hist, w, self.config.cpu_high_threshold):
            return DegradationVerdict(iid, VerdictRule.SUSTAINED_CPU, tuple(hist)[-w:])
        if blackhole_window(hist, w):
            return DegradationVerdict(iid, VerdictRule.BLACKHOLE, tuple(hist)[-w:])
        return None

    # -- replacement --------------------------------------------------------

    def replace_instance(self, verdict: DegradationVerdict) -> tuple[str | None, int]:
        old = self.cloud.describe(verdict.instance_id)
        if old.state is InstanceState.DRAINING:
            return None, 0
        sessions = self.count(old.instance_id)
        if verdict.rule is not VerdictRule.CRASH_DETECTED and old.state is InstanceState.RUNNING:
            self.cloud.set_state(old.instance_id, InstanceState.DEGRADED)
        if sessions == 0:
            if old.alive:
                self._retire(old.instance_id)
            self._trace("replace", old.instance_id, "skipped=empty")
            return None, 0
        image = self.library.get(old.image_id)
        new = self._replacement_target(old, image)
        self._replacements[old.instance_id] = Replacement(old.instance_id, new.instance_id, verdict.rule)
        self._reserve(new.instance_id, sessions)
        self._trace("replace", old.instance_id,
                    f"new={new.instance_id} provider={new.provider_id} reserved={sessions}")
        if verdict.rule is VerdictRule.CRASH_DETECTED:
            self._mark_orphans(old.instance_id)
        moved = self._complete(self._replacements[old.instance_id])
        return new.instance_id, moved

    def _mark_orphans(self, old_id: str) -> None:
        if self.broker is None:
            return
        for s in self.broker.sessions_on(old_id):
            self.broker.mark_migrating(s.session_id)

    def _complete(self, rep: Replacement) -> int:
        """Move sessions once the replacement runs; returns how many moved."""
        target = self.cloud.describe(rep.new_id)
        if target.state is not InstanceState.RUNNING or self.broker is None:
            return 0
        from evop.broker import UpdateReason

        moved = 0
        for s in self.broker.sessions_on(rep.old_id):
            self.broker.push_update(s.session_id, rep.new_id, UpdateReason.DEGRADATION_REPLACEMENT)
            moved += 1
        del self._replacements[rep.old_id]
        self._release(rep.new_id)
        old = self.cloud.describe(rep.old_id)
        if old.alive:
            self.cloud.set_state(rep.old_id, InstanceState.DRAINING)
            if self.count(rep.old_id) == 0:
                self._retire(rep.old_id)
        else:
            self._trace("reconcile", rep.old_id, "terminated")
        return moved

    def _on_running(self, rec: InstanceRecord) -> None:
        for rep in [r for r in self._replacements.values() if r.new_id == rec.instance_id]:
            self._complete(rep)
        move = self._moves.get(rec.instance_id)
        if move is not None:
            self._finish_move(move)

    def _sweep(self) -> None:
        """Retry deferred work and drop plans whose target died."""
        for rep in list(self._replacements.values()):
            target = self.cloud.describe(rep.new_id)
            if not target.alive:
                del self._replacements[rep.old_id]
                self._release(rep.new_id)
                self._trace("replace_lost", rep.old_id, f"target={rep.new_id}")
                if rep.rule is VerdictRule.CRASH_DETECTED and self.count(rep.old_id) > 0:
                    self.replace_instance(DegradationVerdict(rep.old_id, rep.rule, "replacement lost"))
                continue
            if rep.rule is VerdictRule.CRASH_DETECTED:
                self._mark_orphans(rep.old_id)
            self._complete(rep)
        for move in list(self._moves.values()):
            if not self.cloud.describe(move.target_id).alive:
                del self._moves[move.target_id]
                self._release(move.target_id)
            else:
                self._finish_move(move)
        for rec in self.cloud.list_instances():
            if rec.state is InstanceState.DRAINING and self.load(rec.instance_id) == 0:
                self._retire(rec.instance_id)

    # -- session-driven scale in ------------------------------------------

    def on_session_end(self, instance_id: str) -> None:
        rec = self.cloud.describe(instance_id)
        if rec.alive and self.load(instance_id) == 0:
            if rec.state is InstanceState.DRAINING:
                self._retire(instance_id)
            elif rec.state is InstanceState.DEGRADED:
                rep = self._replacements.pop(instance_id, None)
                if rep is not None:
                    self._release(rep.new_id)
                self._retire(instance_id)
            elif not self._is_private(rec.provider_id) and self._idle_public(rec):
                self._trace("scale_in", instance_id, "empty")
                self._retire(instance_id)
        self.reverse_migrate(self.clock())

    def _idle_public(self, rec: InstanceRecord) -> bool:
        return (rec.state in _SERVING and self.load(rec.instance_id) == 0
                and rec.instance_id not in self._replacements
                and all(r.new_id != rec.instance_id for r in self._replacements.values())
                and rec.instance_id not in self._moves)

    def _scale_in(self) -> None:
        for rec in self.cloud.list_instances():
            if not self._is_private(rec.provider_id) and self._idle_public(rec):
                if rec.state is InstanceState.RUNNING:
                    self._trace("scale_in", rec.instance_id, "empty")
                    self._retire(rec.instance_id)

    # -- reverse migration ---------------------------------------------------

    def private_occupancy(self, image: ImageDescriptor) -> float:
        cap = sum(d.capacity or 0 for d in self.cloud.descriptors() if d.kind is ProviderKind.PRIVATE)
        if cap == 0:
            return 1.0
        used = sum(self.count(r.instance_id) for r in self.cloud.list_instances()
                   if self._is_private(r.provider_id))
        return used / (cap * image.max_sessions)

    def _private_room(self, image: ImageDescriptor, model_id: str) -> tuple[list[str], int]:
        """Running private targets with free slots, and how many fresh instances may still launch."""
        running, launchable = [], 0
        for d in self.cloud.descriptors():
            if d.kind is not ProviderKind.PRIVATE:
                continue
            for rec in self.cloud.list_instances(d.provider_id):
                if (rec.image_id == image.image_id and rec.state is InstanceState.RUNNING
                        and rec.instance_id not in self._replacements and self._serves(rec, model_id)):
                    running.append(rec.instance_id)
            launchable += self.cloud.free_capacity(d.provider_id) or 0
        return running, launchable

    def reverse_migrate(self, now: int) -> int:
        if self.broker is None or self.config.placement_policy is not PlacementPolicy.PRIVATE_FIRST:
            return 0
        if self._moves:
            return 0
        if self._last_reverse is not None and now - self._last_reverse < self.config.migration_cooldown:
            return 0
        candidates = []
        for rec in self.cloud.list_instances():
            if self._is_private(rec.provider_id) or rec.state is not InstanceState.RUNNING:
                continue
            if rec.instance_id in self._replacements:
                continue
            n = self.count(rec.instance_id)
            if n > 0:
                candidates.append((n, rec.instance_id, rec))
        for n, _, pub in sorted(candidates):
            image = self.library.get(pub.image_id)
            if self.private_occupancy(image) >= self.config.underuse_threshold:
                continue
            sessions = self.broker.sessions_on(pub.instance_id)
            if not sessions:
                continue
            models = {s.model_id for s in sessions}
            model_id = next(iter(sorted(models)))
            running, launchable = self._private_room(image, model_id)
            free = sum(image.max_sessions - self.load(i) for i in running)
            if free + launchable * image.max_sessions < len(sessions):
                continue
            self._last_reverse = now
            return self._reverse_move(pub, image, sessions, running)
        return 0

    def _reverse_move(self, pub: InstanceRecord, image: ImageDescriptor, sessions, running: list[str]) -> int:
        from evop.broker import UpdateReason

        self._trace("reverse", pub.instance_id, f"sessions={len(sessions)}")
        moved = 0
        leftover = []
        for s in sessions:
            slots = [(self.load(i), i) for i in running if self.load(i) < image.max_sessions]
            if not slots:
                leftover.append(s.session_id)
                continue
            _, target = min(slots)
            self.broker.push_update(s.session_id, target, UpdateReason.REVERSE_MIGRATION)
            moved += 1
        while leftover:
            private = sorted(d.provider_id for d in self.cloud.descriptors() if d.kind is ProviderKind.PRIVATE)
            rec = None
            for pid in private:
                try:
                    rec = self._launch(pid, image)
                    break
                except CapacityExceeded:
                    continue
            if rec is None:
                break
            batch, leftover = leftover[:image.max_sessions], leftover[image.max_sessions:]
            self._moves[rec.instance_id] = PendingMove(rec.instance_id, batch)
            self._reserve(rec.instance_id, len(batch))
        if self.count(pub.instance_id) == 0:
            self.cloud.set_state(pub.instance_id, InstanceState.DRAINING)
            self._retire(pub.instance_id)
        return moved

    def _finish_move(self, move: PendingMove) -> None:
        from evop.broker import UpdateReason

        target = self.cloud.describe(move.target_id)
        if target.state is not InstanceState.RUNNING or self.broker is None:
            return
        del self._moves[move.target_id]
        self._release(move.target_id)
        sources = set()
        for sid in move.session_ids:
            s = self.broker.sessions.get(sid)
            if s is None or not s.live:
                continue
            sources.add(s.instance_id)
            self.broker.push_update(sid, move.target_id, UpdateReason.REVERSE_MIGRATION)
        for src in sorted(sources):
            rec = self.cloud.describe(src)
            if rec.alive and not self._is_private(rec.provider_id) and self.count(src) == 0:
                if rec.state is not InstanceState.DRAINING:
                    self.cloud.set_state(src, InstanceState.DRAINING)
                self._retire(src)

    # -- rebalance ----------------------------------------------------------

    def rebalance(self) -> int:
        if self.broker is None:
            return 0
        from evop.broker import UpdateReason

        groups: dict[str, dict[str, list[str]]] = {}
        for rec in self.cloud.list_instances():
            if rec.state is not InstanceState.RUNNING or rec.instance_id in self._replacements:
                continue
            if rec.instance_id in self._moves:
                continue
            groups.setdefault(rec.image_id, {}).setdefault(rec.provider_id, []).append(rec.instance_id)
        moved = 0
        for image_id in sorted(groups):
            best = None
            for provider_id in sorted(groups[image_id]):
                members = groups[image_id][provider_id]
                if len(members) < 2:
                    continue
                loads = [(self.load(i), i) for i in members]
                full = min(loads, key=lambda x: (-x[0], x[1]))
                empty = min(loads)
                gap = full[0] - empty[0]
                if gap >= 2 and (best is None or gap > best[0]):
                    best = (gap, full[1], empty[1])
            if best is None:
                continue
            _, src, dst = best
            dst_rec = self.cloud.describe(dst)
            movable = [s for s in self.broker.sessions_on(src)
                       if s.state.value == "active" and self._serves(dst_rec, s.model_id)]
            if not movable:
                continue
            s = movable[-1]
            self._trace("rebalance", s.session_id, f"from={src} to={dst}")
            self.broker.push_update(s.session_id, dst, UpdateReason.REBALANCE)
            moved += 1
        return moved


def group_verdicts(verdicts: Iterable[DegradationVerdict]) -> dict[str, int]:
    out: dict[str, int] = {r.value: 0 for r in VerdictRule}
    for v in verdicts:
        out[v.rule.value] += 1
    return out
