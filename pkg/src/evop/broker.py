"""Resource Broker: session assignment over the duplex control channel.

The broker owns the session table and is its only writer. Every mutation
is journalled before any frame describing it leaves the broker, so a broker
restarted from the journal never holds less than what clients were told.
"""

from __future__ import annotations

import logging
import os
from dataclasses import asdict, dataclass, field
from enum import Enum
from typing import TYPE_CHECKING, Callable

from evop import channel as ch
from evop.errors import (
    AlreadyClosed,
    EvopError,
    ProtocolError,
    TargetNotRunning,
    UnknownInstance,
    UnknownSession,
)
from evop.journal import ReplayReport, SessionJournal, scan
from evop.library import ModelLibrary
from evop.provider import InstanceState, Provider

if TYPE_CHECKING:
    from evop.balancer import LoadBalancer

logger = logging.getLogger(__name__)


class SessionState(str, Enum):
    ACTIVE = "active"
    MIGRATING = "migrating"
    CLOSED = "closed"


class UpdateReason(str, Enum):
    INITIAL = "initial"
    DEGRADATION_REPLACEMENT = "degradation_replacement"
    REBALANCE = "rebalance"
    REVERSE_MIGRATION = "reverse_migration"


@dataclass
class Session:
    session_id: str
    model_id: str
    instance_id: str
    epoch: int = 1
    state: SessionState = SessionState.ACTIVE
    created_at: int = 0
    last_activity: int = 0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["state"] = self.state.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Session":
        return cls(
            session_id=d["session_id"],
            model_id=d["model_id"],
            instance_id=d["instance_id"],
            epoch=int(d["epoch"]),
            state=SessionState(d["state"]),
            created_at=int(d.get("created_at", 0)),
            last_activity=int(d.get("last_activity", 0)),
        )

    @property
    def live(self) -> bool:
        return self.state is not SessionState.CLOSED


@dataclass(frozen=True)
class SessionUpdate:
    session_id: str
    new_address: str
    new_instance_id: str
    epoch: int
    reason: UpdateReason


def _serial_of(session_id: str) -> int:
    try:
        return int(session_id.lstrip("s"))
    except ValueError:
        return 0


@dataclass
class RecoveryReport:
    journal: ReplayReport
    sessions: int
    orphans: list[str] = field(default_factory=list)

    @property
    def truncated(self) -> bool:
        return self.journal.truncated


def replay_sessions(payloads: list[dict]) -> tuple[dict[str, Session], int]:
    """Fold journal payloads into the latest state per session."""
    table: dict[str, Session] = {}
    next_serial = 1
    for p in payloads:
        op = p.get("op")
        if op == "put":
            s = Session.from_dict(p["session"])
            prev = table.get(s.session_id)
            # a stale record never rolls an epoch back
            if prev is None or s.epoch >= prev.epoch or s.state is SessionState.CLOSED:
                table[s.session_id] = s
            next_serial = max(next_serial, _serial_of(s.session_id) + 1)
        elif op == "meta":
            next_serial = max(next_serial, int(p.get("next_serial", 1)))
    return table, next_serial


def inspect_cache(path: str | os.PathLike) -> tuple[list[Session], ReplayReport]:
    """Offline, read-only view of an Active Sessions cache."""
    with open(path, "rb") as fh:
        payloads, report = scan(fh.read())
    table, _ = replay_sessions(payloads)
    live = [s for s in table.values() if s.live]
    live.sort(key=lambda s: s.session_id)
    return live, report


class ResourceBroker:
    def __init__(
        self,
        cloud: Provider,
        library: ModelLibrary,
        journal: SessionJournal,
        clock: Callable[[], int] = lambda: 0,
        trace: Callable[[str, str, str], None] | None = None,
        on_slot_change: Callable[[str, int], None] | None = None,
        compact_threshold: int = 256,
    ):
        self.cloud = cloud
        self.library = library
        self.journal = journal
        self.clock = clock
        self._trace = trace or (lambda kind, subject, detail: None)
        self._on_slot_change = on_slot_change or (lambda instance_id, delta: None)
        self.compact_threshold = compact_threshold
        self.balancer: LoadBalancer | None = None
        self.sessions: dict[str, Session] = {}
        self._channels: dict[str, ch.InProcessChannel] = {}
        self._outbox: dict[str, list[ch.Message]] = {}
        self._next_serial = 1
        # test hook, called between persisting a mutation and emitting its frame
        self.after_persist: Callable[[Session], None] | None = None

    # -- persistence --------------------------------------------------------

    def _persist(self, s: Session) -> None:
        self.journal.append({"op": "put", "session": s.to_dict()})
        if self.journal.records > self.compact_threshold + 4 * len(self.sessions):
            self.compact()
        if self.after_persist is not None:
            self.after_persist(s)

    def compact(self) -> None:
        live = [s for s in self.sessions.values() if s.live]
        payloads = [{"op": "meta", "next_serial": self._next_serial}]
        payloads.extend({"op": "put", "session": s.to_dict()} for s in live)
        self.journal.compact(payloads)
        self.sessions = {s.session_id: s for s in live}

    @classmethod
    def recover(cls, cloud: Provider, library: ModelLibrary, journal: SessionJournal,
                **kwargs) -> tuple["ResourceBroker", RecoveryReport]:
        payloads, jreport = journal.replay(repair=True)
        table, next_serial = replay_sessions(payloads)
        broker = cls(cloud, library, journal, **kwargs)
        broker._next_serial = next_serial
        orphans = []
        for sid in sorted(table):
            s = table[sid]
            if not s.live:
                continue
            try:
                cloud.describe(s.instance_id)
            except UnknownInstance:
                orphans.append(sid)
                continue
            broker.sessions[sid] = s
        if jreport.truncated:
            logger.warning("sessions journal truncated: %s, %d bytes discarded",
                           jreport.reason, jreport.discarded_bytes)
        report = RecoveryReport(jreport, len(broker.sessions), orphans)
        broker._trace("recover", "", f"sessions={report.sessions} truncated={int(report.truncated)} "
                                     f"orphans={len(orphans)}")
        return broker, report

    # -- queries ------------------------------------------------------------

    def get(self, session_id: str) -> Session:
        s = self.sessions.get(session_id)
        if s is None or not s.live:
            raise UnknownSession(session_id)
        return s

    def live_sessions(self) -> list[Session]:
        return sorted((s for s in self.sessions.values() if s.live), key=lambda s: s.session_id)

    def sessions_on(self, instance_id: str) -> list[Session]:
        return [s for s in self.live_sessions() if s.instance_id == instance_id]

    def has_channel(self, session_id: str) -> bool:
        chan = self._channels.get(session_id)
        return chan is not None and not chan.closed

    # -- inbound frames -----------------------------------------------------

    def receive(self, frame: str, channel: ch.InProcessChannel) -> None:
        """Entry point for one client->broker frame."""
        try:
            msg = ch.decode(frame)
            if not isinstance(msg, ch.CLIENT_TO_BROKER):
                raise ProtocolError(f"{type(msg).__name__.upper()} is not a client frame")
            if isinstance(msg, ch.Hello):
                self.handle_hello(msg.model_id, channel)
            elif isinstance(msg, ch.Bye):
                self.handle_bye(msg.session_id)
            else:
                self.handle_ping(msg.session_id, channel)
        except EvopError as exc:
            channel.send(ch.Error(exc.code, str(exc)))

    def handle_hello(self, model_id: str, channel: ch.InProcessChannel) -> SessionUpdate:
        self.library.resolve(model_id)
        if self.balancer is None:
            raise RuntimeError("broker has no load balancer attached")
        instance_id = self.balancer.place(model_id)
        rec = self.cloud.describe(instance_id)
        now = self.clock()
        sid = f"s{self._next_serial:06d}"
        self._next_serial += 1
        s = Session(sid, model_id, instance_id, 1, SessionState.ACTIVE, now, now)
        self.sessions[sid] = s
        self._on_slot_change(instance_id, +1)
        self._persist(s)
        self._channels[sid] = channel
        self._trace("assign", sid, f"instance={instance_id} model={model_id} epoch=1")
        channel.send(ch.Assign(sid, rec.address, 1))
        return SessionUpdate(sid, rec.address, instance_id, 1, UpdateReason.INITIAL)

    def handle_bye(self, session_id: str) -> None:
        s = self.sessions.get(session_id)
        if s is None:
            raise UnknownSession(session_id)
        if not s.live:
            raise AlreadyClosed(session_id)
        s.state = SessionState.CLOSED
        s.last_activity = self.clock()
        self._persist(s)
        self._on_slot_change(s.instance_id, -1)
        self._channels.pop(session_id, None)
        self._outbox.pop(session_id, None)
        self._trace("close", session_id, f"instance={s.instance_id}")
        if self.balancer is not None:
            self.balancer.on_session_end(s.instance_id)

    def handle_ping(self, session_id: str, channel: ch.InProcessChannel) -> None:
        s = self.get(session_id)
        s.last_activity = self.clock()
        if self._channels.get(session_id) is channel and not channel.closed:
            return
        # stale channel: rebind and bring the client up to date
        self._channels[session_id] = channel
        self._trace("rebind", session_id, f"epoch={s.epoch}")
        pending = self._outbox.pop(session_id, [])
        if pending:
            for msg in pending:
                channel.send(msg)
        else:
            rec = self.cloud.describe(s.instance_id)
            channel.send(ch.Assign(session_id, rec.address, s.epoch))
        if s.state is SessionState.MIGRATING and self._target_ready(s):
            s.state = SessionState.ACTIVE
            self._persist(s)

    def _target_ready(self, s: Session) -> bool:
        return self.cloud.describe(s.instance_id).state is not InstanceState.TERMINATED

    # -- balancer commands -------------------------------------------------

    def mark_migrating(self, session_id: str) -> None:
        """Flag a session whose instance is gone and which awaits a new home."""
        s = self.get(session_id)
        if s.state is SessionState.ACTIVE:
            s.state = SessionState.MIGRATING
            self._persist(s)
            self._trace("migrating", session_id, f"instance={s.instance_id}")

    def push_update(self, session_id: str, new_instance_id: str, reason: UpdateReason) -> SessionUpdate:
        s = self.get(session_id)
        target = self.cloud.describe(new_instance_id)
        if target.state is not InstanceState.RUNNING:
            raise TargetNotRunning(f"{new_instance_id} is {target.state.value}")
        reason = UpdateReason(reason)
        old = s.instance_id
        s.instance_id = new_instance_id
        s.epoch += 1
        s.state = SessionState.MIGRATING
        s.last_activity = self.clock()
        self._persist(s)
        self._on_slot_change(old, -1)
        self._on_slot_change(new_instance_id, +1)
        self._trace("update", session_id,
                    f"from={old} instance={new_instance_id} epoch={s.epoch} reason={reason.value}")
        msg = ch.Update(session_id, target.address, s.epoch, reason.value)
        if self.has_channel(session_id):
            self._channels[session_id].send(msg)
            s.state = SessionState.ACTIVE
            self._persist(s)
        else:
            self._outbox.setdefault(session_id, []).append(msg)
        return SessionUpdate(session_id, target.address, new_instance_id, s.epoch, reason)
