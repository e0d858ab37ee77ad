"""Cross-cloud provider abstraction.

The broker and balancer only ever talk to :class:`Provider`; which concrete
cloud sits behind a provider id is invisible to them. The simulated backend
in :mod:`evop.simcloud` is the one implementation shipped here.
"""

from __future__ import annotations

import abc
import math
import os
from dataclasses import dataclass, field
from enum import Enum
from fractions import Fraction
from typing import Iterable

from evop.errors import ValidationError
from evop.textfmt import Record, format_record, parse_file

SECONDS_PER_HOUR = 3600
CATALOG_HEADER = "evop-providers v1"


class ProviderKind(str, Enum):
    PRIVATE = "private"
    PUBLIC = "public"


class InstanceState(str, Enum):
    PENDING = "pending"
    RUNNING = "running"
    DEGRADED = "degraded"
    DRAINING = "draining"
    TERMINATED = "terminated"


ALLOWED_TRANSITIONS: dict[InstanceState, frozenset[InstanceState]] = {
    InstanceState.PENDING: frozenset({InstanceState.RUNNING, InstanceState.TERMINATED}),
    InstanceState.RUNNING: frozenset(
        {InstanceState.DEGRADED, InstanceState.DRAINING, InstanceState.TERMINATED}
    ),
    InstanceState.DEGRADED: frozenset({InstanceState.DRAINING, InstanceState.TERMINATED}),
    InstanceState.DRAINING: frozenset({InstanceState.TERMINATED}),
    InstanceState.TERMINATED: frozenset(),
}

# states in which an instance produces health samples
OBSERVABLE_STATES = frozenset(
    {InstanceState.RUNNING, InstanceState.DEGRADED, InstanceState.DRAINING}
)


def is_valid_history(states: Iterable[InstanceState]) -> bool:
    states = list(states)
    if not states or states[0] is not InstanceState.PENDING:
        return False
    return all(b in ALLOWED_TRANSITIONS[a] for a, b in zip(states, states[1:]))


@dataclass(frozen=True)
class ProviderDescriptor:
    provider_id: str
    kind: ProviderKind
    capacity: int | None = None
    cost_rate: Fraction = Fraction(0)
    billing_granularity: int = SECONDS_PER_HOUR
    boot_time: int = 30

    def __post_init__(self):
        object.__setattr__(self, "kind", ProviderKind(self.kind))
        object.__setattr__(self, "cost_rate", Fraction(self.cost_rate))
        problems = []
        if not self.provider_id:
            problems.append("provider_id must be non-empty")
        if self.kind is ProviderKind.PRIVATE and self.capacity is None:
            problems.append(f"private provider {self.provider_id!r} needs a capacity")
        if self.capacity is not None and self.capacity < 1:
            problems.append(f"provider {self.provider_id!r}: capacity must be positive")
        if self.cost_rate < 0:
            problems.append(f"provider {self.provider_id!r}: cost_rate must be >= 0")
        if self.billing_granularity < 1:
            problems.append(f"provider {self.provider_id!r}: billing granularity must be positive")
        if self.boot_time < 0:
            problems.append(f"provider {self.provider_id!r}: boot_time must be >= 0")
        if problems:
            raise ValidationError(problems)

    @property
    def elastic(self) -> bool:
        return self.capacity is None


@dataclass(frozen=True)
class HealthSample:
    at: int
    cpu: float
    disk_read: int = 0
    disk_write: int = 0
    net_in: int = 0
    net_out: int = 0

    def __post_init__(self):
        if not 0.0 <= self.cpu <= 1.0:
            raise ValueError(f"cpu {self.cpu} outside [0, 1]")
        if min(self.disk_read, self.disk_write, self.net_in, self.net_out) < 0:
            raise ValueError("byte counters must be non-negative")


@dataclass
class InstanceRecord:
    instance_id: str
    provider_id: str
    image_id: str
    address: str
    launch_time: int
    image_version: int = 1
    state: InstanceState = InstanceState.PENDING
    terminate_time: int | None = None
    last_sample: HealthSample | None = None
    history: list[InstanceState] = field(default_factory=lambda: [InstanceState.PENDING])

    def transition(self, new: InstanceState) -> None:
        from evop.errors import InvalidTransition

        if new not in ALLOWED_TRANSITIONS[self.state]:
            raise InvalidTransition(f"{self.instance_id}: {self.state.value} -> {new.value}")
        self.state = new
        self.history.append(new)

    @property
    def alive(self) -> bool:
        return self.state is not InstanceState.TERMINATED


def billed_cost(elapsed: int, granularity: int, rate: Fraction) -> Fraction:
    """Charge for an instance alive ``elapsed`` seconds.

    Every started billing period is charged in full, and a launched instance
    always pays for at least one period.
    """
    if elapsed < 0:
        raise ValueError("elapsed must be non-negative")
    periods = max(1, math.ceil(elapsed / granularity))
    return Fraction(periods * granularity, SECONDS_PER_HOUR) * Fraction(rate)


class Provider(abc.ABC):
    """Operations the manager needs from any cloud."""

    @abc.abstractmethod
    def descriptors(self) -> list[ProviderDescriptor]: ...

    @abc.abstractmethod
    def launch(self, provider_id: str, image_id: str) -> InstanceRecord: ...

    @abc.abstractmethod
    def terminate(self, instance_id: str) -> None: ...

    @abc.abstractmethod
    def poll_metrics(self, instance_id: str) -> HealthSample: ...

    @abc.abstractmethod
    def list_instances(self, provider_id: str | None = None) -> list[InstanceRecord]: ...

    @abc.abstractmethod
    def describe(self, instance_id: str) -> InstanceRecord:
        """Return the record for any instance ever launched, terminated included."""

    @abc.abstractmethod
    def set_state(self, instance_id: str, state: InstanceState) -> None:
        """Balancer-driven transitions (degraded, draining)."""

    @abc.abstractmethod
    def accrued_cost(self) -> Fraction: ...

    def descriptor(self, provider_id: str) -> ProviderDescriptor:
        from evop.errors import UnknownProvider

        for d in self.descriptors():
            if d.provider_id == provider_id:
                return d
        raise UnknownProvider(provider_id)


# -- catalog file -----------------------------------------------------------

def _int_field(rec: Record, key: str, default: int | None, problems: list[str]) -> int | None:
    raw = rec.take(key)
    if raw is None:
        return default
    try:
        return int(raw)
    except ValueError:
        problems.append(f"line {rec.lineno}: {key}={raw!r} is not an integer")
        return default


def provider_from_record(rec: Record, problems: list[str]) -> ProviderDescriptor | None:
    pid = rec.take("id")
    kind = rec.take("kind")
    if pid is None or kind is None:
        problems.append(f"line {rec.lineno}: provider needs id= and kind=")
        return None
    if kind not in ("private", "public"):
        problems.append(f"line {rec.lineno}: unknown provider kind {kind!r}")
        return None
    capacity = _int_field(rec, "capacity", None, problems)
    rate_raw = rec.take("cost_rate", "0" if kind == "private" else "1")
    try:
        rate = Fraction(rate_raw)
    except (ValueError, ZeroDivisionError):
        problems.append(f"line {rec.lineno}: cost_rate={rate_raw!r} is not a number")
        return None
    billing = _int_field(rec, "billing", SECONDS_PER_HOUR, problems)
    boot = _int_field(rec, "boot", 30, problems)
    try:
        return ProviderDescriptor(pid, ProviderKind(kind), capacity, rate, billing, boot)
    except ValidationError as exc:
        problems.extend(f"line {rec.lineno}: {e}" for e in exc.errors)
        return None


def provider_to_record(d: ProviderDescriptor) -> str:
    fields: dict[str, object] = {"id": d.provider_id, "kind": d.kind.value}
    if d.capacity is not None:
        fields["capacity"] = d.capacity
    fields.update(cost_rate=d.cost_rate, billing=d.billing_granularity, boot=d.boot_time)
    return format_record("provider", fields=fields)


def check_catalog(providers: list[ProviderDescriptor]) -> list[str]:
    problems = []
    ids = [p.provider_id for p in providers]
    if len(set(ids)) != len(ids):
        problems.append("duplicate provider ids")
    if sum(1 for p in providers if p.cost_rate == 0) > 1:
        problems.append("at most one provider may have a zero cost_rate")
    if not providers:
        problems.append("no providers configured")
    return problems


def load_catalog(path: str | os.PathLike) -> list[ProviderDescriptor]:
    problems: list[str] = []
    providers = []
    for rec in parse_file(path, CATALOG_HEADER):
        if rec.keyword != "provider":
            problems.append(f"line {rec.lineno}: unexpected record {rec.keyword!r}")
            continue
        d = provider_from_record(rec, problems)
        if d is not None:
            providers.append(d)
    problems.extend(check_catalog(providers))
    if problems:
        raise ValidationError(problems)
    return providers


def default_catalog() -> list[ProviderDescriptor]:
    return [
        ProviderDescriptor("private", ProviderKind.PRIVATE, capacity=4, cost_rate=Fraction(0)),
        ProviderDescriptor("public", ProviderKind.PUBLIC, cost_rate=Fraction(1)),
    ]


__all__ = [
    "ALLOWED_TRANSITIONS",
    "CATALOG_HEADER",
    "HealthSample",
    "InstanceRecord",
    "InstanceState",
    "OBSERVABLE_STATES",
    "Provider",
    "ProviderDescriptor",
    "ProviderKind",
    "billed_cost",
    "default_catalog",
    "is_valid_history",
    "load_catalog",
]
