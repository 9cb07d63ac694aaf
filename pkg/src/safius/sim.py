"""Deterministic simulation plumbing: logical clock, cost metering, the
trace log, the fault plan, and the synchronous message fabric.

Time is integer ticks and only moves when cost is charged.  The fabric
delivers calls between actors synchronously (FIFO per pair holds trivially)
and is the single choke point where traces are recorded and faults fire.
Every named crash point in actor code also routes through here, so crash
enumeration is just "collect the points one clean run touches".
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .errors import ActorCrash, ProtocolError, Unreachable

DEFAULT_COSTS = {
    "sign": 80,     # asymmetric signature generation
    "verify": 80,   # asymmetric signature verification
    "hash": 1,      # content hash per 4 KB
    "message": 5,   # one network hop
}

TICKS_PER_SECOND = 1000


class LogicalClock:
    def __init__(self):
        self.now = 0

    def advance(self, ticks: int) -> None:
        if ticks < 0:
            raise ValueError("clock only moves forward")
        self.now += ticks


class CostMeter:
    def __init__(self, clock: LogicalClock, table: dict[str, int] | None = None):
        self.clock = clock
        self.table = dict(DEFAULT_COSTS)
        if table:
            self.table.update(table)

    def charge(self, kind: str, units: int = 1) -> None:
        self.clock.advance(self.table[kind] * units)

    def charge_hash(self, nbytes: int) -> None:
        self.charge("hash", max(1, (nbytes + 4095) // 4096))


class TraceLog:
    """Append-only event record.  render() is the byte-identical artifact
    the determinism criterion compares, so detail strings must never depend
    on iteration order or machine state."""

    def __init__(self, clock: LogicalClock):
        self.clock = clock
        self.events: list[tuple[int, int, str, str, str]] = []

    def emit(self, actor: str, kind: str, detail: str = "") -> None:
        self.events.append(
            (self.clock.now, len(self.events), actor, kind, detail))

    def render(self) -> str:
        return "\n".join(f"{t:010d} {seq:07d} {actor} {kind} {detail}"
                         for t, seq, actor, kind, detail in self.events)

    def kinds(self, kind: str) -> list[tuple[int, int, str, str, str]]:
        return [e for e in self.events if e[3] == kind]

    def index_of(self, kind: str, detail_substr: str = "") -> int:
        for t, seq, actor, k, detail in self.events:
            if k == kind and detail_substr in detail:
                return seq
        return -1


# Fault actions understood by the fabric and the actors.  DropBlock and
# ForgeClaim are adversarial state mutations applied at step boundaries;
# the rest intercept a named protocol point.
FAULT_KINDS = (
    "DropBlock", "ReturnNotFound", "CorruptBytes", "RefuseGrant",
    "ForgeClaim", "CrashActor", "DelayMessage",
)


@dataclass
class FaultRule:
    point: str                      # named point, e.g. "storage.load"
    kind: str                       # one of FAULT_KINDS
    params: dict = field(default_factory=dict)
    match: dict = field(default_factory=dict)   # ctx equality filters
    nth: int = 0                    # fire on the nth matching hit (1-based); 0 = first
    hits: int = 0
    fired: bool = False

    def wants(self, point: str, ctx: dict) -> bool:
        if self.fired or point != self.point:
            return False
        for k, v in self.match.items():
            if ctx.get(k) != v:
                return False
        self.hits += 1
        want = self.nth if self.nth > 0 else 1
        if self.hits != want:
            return False
        self.fired = True
        return True


class FaultPlan:
    def __init__(self, rules: list[FaultRule] | None = None):
        self.rules: list[FaultRule] = list(rules or ())
        self.fired_log: list[str] = []

    def arm(self, rule: FaultRule) -> None:
        self.rules.append(rule)

    def check(self, point: str, **ctx) -> FaultRule | None:
        for rule in self.rules:
            if rule.wants(point, ctx):
                self.fired_log.append(f"{rule.kind}@{point}")
                return rule
        return None

    @classmethod
    def from_config(cls, specs: list[dict]) -> "FaultPlan":
        rules = []
        for spec in specs:
            kind = spec["action"]
            if kind not in FAULT_KINDS:
                raise ValueError(f"unknown fault action: {kind}")
            rules.append(FaultRule(
                point=spec["point"],
                kind=kind,
                params=dict(spec.get("params", {})),
                match=dict(spec.get("match", {})),
                nth=int(spec.get("nth", 0)),
            ))
        return cls(rules)


class Fabric:
    """Synchronous mediated call network between named actors."""

    def __init__(self, clock: LogicalClock, meter: CostMeter, trace: TraceLog,
                 plan: FaultPlan):
        self.clock = clock
        self.meter = meter
        self.trace = trace
        self.plan = plan
        self.actors: dict[str, object] = {}
        self.crashed: set[str] = set()
        self.collecting: list[str] | None = None
        # Called with (src, dst, msg, reply) after each successful exchange;
        # the harness hangs its independent accounting oracle here.
        self.observers: list = []

    def register(self, name: str, actor) -> None:
        self.actors[name] = actor
        self.crashed.discard(name)

    def mark_crashed(self, name: str) -> None:
        self.crashed.add(name)

    def send(self, src: str, dst: str, msg):
        kind = type(msg).__name__
        self.meter.charge("message")
        self.trace.emit(src, "send", f"{dst} {kind}")
        rule = self.plan.check(f"net.{dst}.{kind}", src=src)
        if rule is not None:
            if rule.kind == "CrashActor":
                self.crash(rule.params.get("actor", dst), f"net.{dst}.{kind}")
            elif rule.kind == "DelayMessage":
                self.clock.advance(int(rule.params.get("ticks", 50)))
                self.trace.emit(dst, "delayed", kind)
        if dst in self.crashed or dst not in self.actors:
            raise Unreachable(dst)
        try:
            reply = self.actors[dst].handle(src, msg)
        except ProtocolError as err:
            self.meter.charge("message")
            self.trace.emit(dst, "err", f"{src} {kind} {err.code}")
            raise
        self.meter.charge("message")
        self.trace.emit(dst, "reply", f"{src} {kind}")
        for obs in self.observers:
            obs(src, dst, msg, reply)
        return reply

    def crashpoint(self, actor: str, name: str, **ctx) -> None:
        """Named durability boundary inside actor code.  The only fault that
        can fire here is a crash; the point list doubles as the crash-suite
        enumeration domain."""
        if self.collecting is not None:
            self.collecting.append(name)
        rule = self.plan.check(name, actor=actor, **ctx)
        if rule is not None and rule.kind == "CrashActor":
            self.crash(rule.params.get("actor", actor), name)

    def crash(self, actor: str, point: str) -> None:
        self.mark_crashed(actor)
        self.trace.emit(actor, "crash", point)
        raise ActorCrash(actor, point)
