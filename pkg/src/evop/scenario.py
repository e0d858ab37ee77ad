"""Declarative scenario files.

Example::

    evop-scenario v1
    seed 7
    duration 600
    provider id=private kind=private capacity=2 cost_rate=0
    provider id=public kind=public cost_rate=1
    image id=topmodel models=topmodel-stub max_sessions=1
    balancer monitor_interval=10 window=5 policy=private_first
    at 0 arrive s1 model=topmodel-stub
    at 60 burst s1 count=20
    at 120 fault session=s1 kind=cpu_saturation
    at 200 broker_crash restart=5
    at 300 depart s1

Providers, balancer and load settings fall back to the file named by
``EVOP_CONFIG`` and then to built-in defaults.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path

from evop.balancer import BalancerConfig
from evop.errors import ParseError, ValidationError
from evop.library import ImageDescriptor, ModelClass, image_from_record, image_to_record
from evop.provider import (
    ProviderDescriptor,
    check_catalog,
    default_catalog,
    provider_from_record,
    provider_to_record,
)
from evop.simcloud import FaultKind, LoadModel
from evop.textfmt import Record, format_record, parse_file, parse_lines

SCENARIO_HEADER = "evop-scenario v1"
CONFIG_HEADER = "evop-config v1"
EVENT_KINDS = ("arrive", "depart", "burst", "fault", "broker_crash")
DEFAULT_JITTER = 5

_LOAD_KEYS = {
    "per_session_cpu": ("per_session_cpu", float),
    "bytes_in": ("per_request_bytes_in", int),
    "bytes_out": ("per_request_bytes_out", int),
    "disk_read": ("disk_bytes_per_request", int),
    "disk_write": ("disk_write_bytes_per_request", int),
    "requests_per_interval": ("session_requests_per_interval", int),
    "cpu_per_unit": ("cpu_per_compute_unit", float),
}


@dataclass(frozen=True)
class ScenarioEvent:
    at: int
    kind: str
    ref: str = ""
    model_id: str = ""
    count: int = 0
    fault_kind: FaultKind | None = None
    instance_id: str = ""
    duration: int | None = None
    restart_delay: int = 0

    def to_line(self) -> str:
        if self.kind == "arrive":
            return format_record("at", [str(self.at), "arrive", self.ref], {"model": self.model_id})
        if self.kind == "depart":
            return format_record("at", [str(self.at), "depart", self.ref])
        if self.kind == "burst":
            return format_record("at", [str(self.at), "burst", self.ref], {"count": self.count})
        if self.kind == "fault":
            fields: dict[str, object] = {"instance": self.instance_id} if self.instance_id else {"session": self.ref}
            fields["kind"] = self.fault_kind.value
            if self.duration is not None:
                fields["duration"] = self.duration
            return format_record("at", [str(self.at), "fault"], fields)
        return format_record("at", [str(self.at), "broker_crash"], {"restart": self.restart_delay})


@dataclass(frozen=True)
class ScenarioSpec:
    duration: int
    seed: int = 0
    arrival_jitter: int = DEFAULT_JITTER
    providers: tuple[ProviderDescriptor, ...] = field(default_factory=lambda: tuple(default_catalog()))
    images: tuple[ImageDescriptor, ...] = ()
    balancer: BalancerConfig = field(default_factory=BalancerConfig)
    load: LoadModel = field(default_factory=LoadModel)
    events: tuple[ScenarioEvent, ...] = ()
    name: str = ""

    def with_seed(self, seed: int) -> "ScenarioSpec":
        return replace(self, seed=seed)

    def with_broker_crash(self, at: int, restart_delay: int = 5) -> "ScenarioSpec":
        crash = ScenarioEvent(at, "broker_crash", restart_delay=restart_delay)
        return replace(self, events=tuple(sorted((*self.events, crash), key=lambda e: e.at)))

    def dumps(self) -> str:
        lines = [SCENARIO_HEADER, f"seed {self.seed}", f"duration {self.duration}",
                 f"jitter {self.arrival_jitter}"]
        lines.extend(provider_to_record(p) for p in self.providers)
        lines.extend(image_to_record(i) for i in self.images)
        b = self.balancer
        lines.append(format_record("balancer", fields={
            "monitor_interval": b.monitor_interval, "cpu_high": b.cpu_high_threshold,
            "window": b.sustained_window, "underuse": b.underuse_threshold,
            "cooldown": b.migration_cooldown, "policy": b.placement_policy.value}))
        lines.append(format_record("load", fields={
            short: getattr(self.load, attr) for short, (attr, _) in _LOAD_KEYS.items()}))
        lines.extend(e.to_line() for e in self.events)
        return "\n".join(lines) + "\n"


def default_images() -> tuple[ImageDescriptor, ...]:
    return (ImageDescriptor("topmodel", frozenset({"topmodel-stub"}), model_class=ModelClass.EXPERIMENTAL),)


def _load_from_record(rec: Record, base: LoadModel, problems: list[str]) -> LoadModel:
    changes = {}
    for short, (attr, conv) in _LOAD_KEYS.items():
        raw = rec.take(short)
        if raw is None:
            continue
        try:
            changes[attr] = conv(raw)
        except ValueError:
            problems.append(f"line {rec.lineno}: load {short}={raw!r} is not a number")
    try:
        return replace(base, **changes)
    except ValueError as exc:
        problems.append(f"line {rec.lineno}: {exc}")
        return base


def _balancer_from_record(rec: Record, problems: list[str]) -> BalancerConfig | None:
    try:
        return BalancerConfig.from_record(rec)
    except ValueError as exc:
        problems.append(f"line {rec.lineno}: balancer: {exc}")
        return None


@dataclass
class Config:
    """Main configuration (``EVOP_CONFIG``)."""

    providers: list[ProviderDescriptor] = field(default_factory=default_catalog)
    balancer: BalancerConfig = field(default_factory=BalancerConfig)
    load: LoadModel = field(default_factory=LoadModel)
    library_path: str = "evop-library.txt"


def load_config(path: str | os.PathLike | None = None) -> Config:
    if path is None:
        path = os.environ.get("EVOP_CONFIG")
    cfg = Config()
    if not path:
        return cfg
    problems: list[str] = []
    providers = []
    for rec in parse_file(path, CONFIG_HEADER):
        if rec.keyword == "provider":
            d = provider_from_record(rec, problems)
            if d is not None:
                providers.append(d)
        elif rec.keyword == "balancer":
            b = _balancer_from_record(rec, problems)
            if b is not None:
                cfg.balancer = b
        elif rec.keyword == "load":
            cfg.load = _load_from_record(rec, cfg.load, problems)
        elif rec.keyword == "library":
            cfg.library_path = rec.take("path", cfg.library_path)
        else:
            problems.append(f"line {rec.lineno}: unexpected record {rec.keyword!r}")
            continue
        problems.extend(f"line {rec.lineno}: unknown field {k!r}" for k in rec.unknown_keys())
    if providers:
        problems.extend(check_catalog(providers))
        cfg.providers = providers
    if problems:
        raise ValidationError(problems)
    return cfg


def _int(raw: str | None, what: str, lineno: int, problems: list[str], minimum: int = 0) -> int | None:
    if raw is None:
        problems.append(f"line {lineno}: missing {what}")
        return None
    try:
        value = int(raw)
    except ValueError:
        problems.append(f"line {lineno}: {what} {raw!r} is not an integer")
        return None
    if value < minimum:
        problems.append(f"line {lineno}: {what} must be >= {minimum}")
        return None
    return value


def _event_from_record(rec: Record, problems: list[str]) -> ScenarioEvent | None:
    if len(rec.args) < 2:
        problems.append(f"line {rec.lineno}: expected 'at <t> <kind> ...'")
        return None
    at = _int(rec.args[0], "event time", rec.lineno, problems)
    kind = rec.args[1]
    ref = rec.args[2] if len(rec.args) > 2 else ""
    if kind not in EVENT_KINDS:
        problems.append(f"line {rec.lineno}: unknown event kind {kind!r}")
        return None
    if at is None:
        return None
    if kind in ("arrive", "depart", "burst") and not ref:
        problems.append(f"line {rec.lineno}: {kind} needs a session reference")
        return None
    if kind == "arrive":
        model = rec.take("model")
        if not model:
            problems.append(f"line {rec.lineno}: arrive needs model=")
            return None
        return ScenarioEvent(at, kind, ref, model_id=model)
    if kind == "depart":
        return ScenarioEvent(at, kind, ref)
    if kind == "burst":
        count = _int(rec.take("count"), "burst count", rec.lineno, problems, minimum=1)
        return None if count is None else ScenarioEvent(at, kind, ref, count=count)
    if kind == "fault":
        fk = rec.take("kind")
        try:
            fault_kind = FaultKind(fk)
        except ValueError:
            problems.append(f"line {rec.lineno}: unknown fault kind {fk!r}")
            return None
        instance, session = rec.take("instance"), rec.take("session")
        if bool(instance) == bool(session):
            problems.append(f"line {rec.lineno}: fault needs exactly one of instance= or session=")
            return None
        raw_duration = rec.take("duration")
        duration = None
        if raw_duration is not None:
            duration = _int(raw_duration, "fault duration", rec.lineno, problems)
        return ScenarioEvent(at, kind, session or "", fault_kind=fault_kind,
                             instance_id=instance or "", duration=duration)
    delay = _int(rec.take("restart", "5"), "restart delay", rec.lineno, problems)
    return None if delay is None else ScenarioEvent(at, kind, restart_delay=delay)


def parse_scenario_text(text: str, source: str = "<scenario>", config: Config | None = None) -> ScenarioSpec:
    records = parse_lines(text.splitlines(), SCENARIO_HEADER, source)
    cfg = config if config is not None else load_config()
    problems: list[str] = []
    seed, duration, jitter = 0, None, DEFAULT_JITTER
    providers: list[ProviderDescriptor] = []
    images: list[ImageDescriptor] = []
    balancer, load = cfg.balancer, cfg.load
    events: list[tuple[int, ScenarioEvent]] = []
    name = ""
    for rec in records:
        kw = rec.keyword
        if kw in ("seed", "duration", "jitter", "name"):
            if len(rec.args) != 1:
                problems.append(f"line {rec.lineno}: {kw} takes one value")
                continue
            if kw == "name":
                name = rec.args[0]
                continue
            value = _int(rec.args[0], kw, rec.lineno, problems, minimum=1 if kw == "duration" else 0)
            if value is None:
                continue
            if kw == "seed":
                seed = value
            elif kw == "duration":
                duration = value
            else:
                jitter = value
        elif kw == "provider":
            d = provider_from_record(rec, problems)
            if d is not None:
                providers.append(d)
        elif kw == "image":
            d = image_from_record(rec, problems)
            if d is not None:
                images.append(d)
        elif kw == "balancer":
            b = _balancer_from_record(rec, problems)
            if b is not None:
                balancer = b
        elif kw == "load":
            load = _load_from_record(rec, load, problems)
        elif kw == "at":
            ev = _event_from_record(rec, problems)
            if ev is not None:
                events.append((rec.lineno, ev))
        else:
            problems.append(f"line {rec.lineno}: unknown record {kw!r}")
            continue
        problems.extend(f"line {rec.lineno}: unknown field {k!r}" for k in rec.unknown_keys())

    if duration is None:
        problems.append("missing 'duration'")
    if providers:
        problems.extend(check_catalog(providers))
    else:
        providers = list(cfg.providers)
    if not images:
        images = list(default_images())
    served: dict[str, str] = {}
    for img in images:
        for m in img.model_ids:
            if m in served and served[m] != img.image_id:
                problems.append(f"model {m!r} served by images {served[m]!r} and {img.image_id!r}")
            served[m] = img.image_id
    if len({i.image_id for i in images}) != len(images):
        problems.append("duplicate image ids")

    arrived: dict[str, int] = {}
    departed: set[str] = set()
    for lineno, ev in events:
        if duration is not None and ev.at > duration:
            problems.append(f"line {lineno}: event at t={ev.at} is after duration {duration}")
        if ev.kind == "arrive":
            if ev.ref in arrived:
                problems.append(f"line {lineno}: session reference {ev.ref!r} arrives twice")
            if ev.model_id not in served:
                problems.append(f"line {lineno}: model {ev.model_id!r} is not served by any image")
            arrived[ev.ref] = ev.at
        elif ev.ref and ev.kind in ("depart", "burst", "fault"):
            if ev.ref not in arrived:
                problems.append(f"line {lineno}: {ev.kind} references unknown arrival {ev.ref!r}")
            elif ev.at < arrived[ev.ref]:
                problems.append(f"line {lineno}: {ev.kind} of {ev.ref!r} precedes its arrival")
            elif ev.ref in departed:
                problems.append(f"line {lineno}: {ev.kind} of {ev.ref!r} after its departure")
            if ev.kind == "depart":
                departed.add(ev.ref)
    if problems:
        raise ValidationError(problems)
    ordered = tuple(ev for _, ev in sorted(events, key=lambda p: (p[1].at, p[0])))
    return ScenarioSpec(duration, seed, jitter, tuple(providers), tuple(images), balancer, load, ordered, name)


def parse_scenario(path: str | os.PathLike, config: Config | None = None) -> ScenarioSpec:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ParseError(f"{path}: {exc.strerror}") from None
    spec = parse_scenario_text(text, str(path), config)
    return spec if spec.name else replace(spec, name=path.stem)


BUNDLED = (
    "fill",
    "overflow",
    "drain",
    "cpu_fault",
    "blackhole_fault",
    "crash_recovery",
    "model_class_routing",
    "rebalance",
)


def bundled_scenario(name: str) -> ScenarioSpec:
    text = resources.files("evop.scenarios").joinpath(f"{name}.evop").read_text(encoding="utf-8")
    spec = parse_scenario_text(text, f"{name}.evop", Config())
    return replace(spec, name=name)


def bundled_suite() -> list[ScenarioSpec]:
    return [bundled_scenario(n) for n in BUNDLED]
