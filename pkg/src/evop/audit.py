"""Independent invariant checks over a finished run's trace.

The auditor rebuilds instance and session state from trace lines alone
(launches, state changes, assignments, updates, closures) and checks the
run against that reconstruction, so it never trusts the balancer's own
view of what was possible at the time.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction

from evop.balancer import PlacementPolicy
from evop.scenario import ScenarioSpec

LOOP_EVENTS = frozenset({
    "arrive", "depart", "burst", "fault", "broker_crash", "broker_restart",
    "sample", "tick", "boot", "retry", "crash",
})


def parse_line(line: str) -> tuple[int, str, str, dict[str, str]]:
    at, kind, subject, detail = line.split("\t", 3)
    fields = dict(kv.split("=", 1) for kv in detail.split() if "=" in kv)
    return int(at), kind, subject, fields


@dataclass
class _Inst:
    provider: str
    image: str
    state: str = "pending"
    reserved: int = 0
    samples: list[tuple[float, int, int]] = field(default_factory=list)


@dataclass
class _Sess:
    instance: str
    epoch: int = 1
    state: str = "active"


@dataclass
class AuditResult:
    violations: list[str]
    updates: int
    public_placements: int
    cost: Fraction

    @property
    def ok(self) -> bool:
        return not self.violations


def audit_trace(spec: ScenarioSpec, lines: list[str]) -> AuditResult:
    providers = {p.provider_id: p for p in spec.providers}
    images = {i.image_id: i for i in spec.images}
    model_image = {m: i.image_id for i in spec.images for m in i.model_ids}
    private_first = spec.balancer.placement_policy is PlacementPolicy.PRIVATE_FIRST
    window = spec.balancer.sustained_window

    insts: dict[str, _Inst] = {}
    sessions: dict[str, _Sess] = {}
    violations: list[str] = []
    updates = public_placements = 0
    cost = Fraction(0)
    broker_up = True
    in_tick = False

    def load(iid: str) -> int:
        return sum(1 for s in sessions.values() if s.state != "closed" and s.instance == iid)

    def alive(pid: str) -> list[str]:
        return [i for i, x in insts.items() if x.provider == pid and x.state != "terminated"]

    def private_option(image_id: str) -> str | None:
        max_sessions = images[image_id].max_sessions
        for pid, d in providers.items():
            if d.kind.value != "private":
                continue
            live = alive(pid)
            for iid in live:
                x = insts[iid]
                if x.image == image_id and x.state in ("pending", "running") and load(iid) + x.reserved < max_sessions:
                    return f"{iid} had a free slot"
                if (x.image != image_id and x.state == "running" and load(iid) == 0
                        and x.reserved == 0):
                    return f"{iid} was idle and reclaimable"
            if len(live) < (d.capacity or 0):
                return f"{pid} had free capacity"
        return None

    def check_consistency(at: int) -> None:
        for sid, s in sessions.items():
            if s.state == "active" and insts.get(s.instance, _Inst("", "", "terminated")).state in (
                    "terminated", "draining"):
                violations.append(f"t={at}: active session {sid} on {insts[s.instance].state} {s.instance}")

    for raw in lines:
        at, kind, subject, f = parse_line(raw)
        if in_tick and kind in LOOP_EVENTS:
            in_tick = False
            if broker_up:
                check_consistency(at)
        if kind == "tick":
            in_tick = True
        elif kind == "broker_crash":
            broker_up = False
        elif kind == "recover":
            broker_up = True
        elif kind == "launch":
            pid = f["provider"]
            insts[subject] = _Inst(pid, f["image"])
            cap = providers[pid].capacity
            if cap is not None and len(alive(pid)) > cap:
                violations.append(f"t={at}: {pid} exceeds capacity {cap}")
        elif kind == "boot":
            if insts[subject].state == "pending":
                insts[subject].state = "running"
        elif kind == "state":
            insts[subject].state = f.get("state", raw.rsplit("\t", 1)[-1])
        elif kind in ("terminate", "crashed"):
            insts[subject].state = "terminated"
            cost += Fraction(f["cost"])
        elif kind == "reserve":
            insts[subject].reserved = int(f["slots"])
        elif kind == "release":
            insts[subject].reserved = 0
        elif kind == "health":
            insts[subject].samples.append((float(f["cpu"]), int(f["in"]), int(f["out"])))
        elif kind == "place":
            iid = f["instance"]
            image_id = model_image[subject]
            if insts[iid].state not in ("pending", "running"):
                violations.append(f"t={at}: placement on {insts[iid].state} instance {iid}")
            if providers[f["provider"]].kind.value == "public":
                public_placements += 1
                if private_first:
                    why = private_option(image_id)
                    if why is not None:
                        violations.append(f"t={at}: public placement of {subject} while {why}")
        elif kind == "assign":
            iid = f["instance"]
            if insts[iid].state in ("draining", "terminated"):
                violations.append(f"t={at}: {subject} assigned to {insts[iid].state} {iid}")
            sessions[subject] = _Sess(iid)
        elif kind == "update":
            updates += 1
            s = sessions[subject]
            iid = f["instance"]
            epoch = int(f["epoch"])
            if epoch != s.epoch + 1:
                violations.append(f"t={at}: {subject} epoch {s.epoch} -> {epoch}")
            if insts[iid].state != "running":
                violations.append(f"t={at}: {subject} moved to {insts[iid].state} {iid}")
            s.instance, s.epoch, s.state = iid, epoch, "active"
        elif kind == "migrating":
            sessions[subject].state = "migrating"
        elif kind == "close":
            sessions[subject].state = "closed"
        elif kind == "verdict":
            samples = insts[subject].samples[-window:]
            rule = f["rule"]
            if rule == "sustained_cpu":
                if len(samples) < window or any(c < spec.balancer.cpu_high_threshold for c, _, _ in samples):
                    violations.append(f"t={at}: unsound sustained_cpu verdict on {subject}")
            elif rule == "blackhole":
                if len(samples) < window or any(not (o == 0 and i > 0) for _, i, o in samples):
                    violations.append(f"t={at}: unsound blackhole verdict on {subject}")
    leaked = sorted(i for i, x in insts.items() if x.state != "terminated")
    if leaked:
        violations.append(f"instances never terminated: {leaked}")
    return AuditResult(violations, updates, public_placements, cost)


def reconcile(report, audit: AuditResult) -> list[str]:
    """Cross-check the metrics report against the audited trace."""
    problems = []
    migrations = sum(report.migrations_by_reason.values())
    if migrations != audit.updates:
        problems.append(f"migrations {migrations} != UPDATE pushes {audit.updates}")
    if migrations != report.updates_delivered:
        problems.append(f"migrations {migrations} != UPDATE frames delivered {report.updates_delivered}")
    if Fraction(report.total_cost) != Fraction(f"{float(audit.cost):.6f}"):
        problems.append(f"report cost {report.total_cost} != traced cost {float(audit.cost)}")
    return problems
