"""Declarative scenarios: a JSON config fully determines a run.

A scenario names the deployment shape, a step list (filesystem calls with
optional expectations), fault injections, and a final phase (quiesce,
prune, invariants, dispute resolution).  Running the same config twice
must produce byte-identical traces and reports; every random byte comes
from the config's seed.

The crash suite reuses a scenario: it runs the steps before the marked
step as a prelude, enumerates every named durability point the marked
step crosses, then replays the scenario once per point with a crash
injected there, power-cycles the whole deployment, and requires the
recovered state to equal the clean committed state or the clean
rolled-back state bit for bit.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass, field

from .crypto import derive_seed
from .deploy import Deployment, DeployConfig, FsSpec
from .errors import ActorCrash, ProtocolError, ScenarioError
from .ids import InodeNumber
from .lhash import PruneOutcome
from .sim import FaultPlan, FaultRule


def gen_data(scheme, name: str, spec, idx: int) -> bytes:
    """Resolve a data spec to bytes, deterministically per (scenario, salt)."""
    if isinstance(spec, str):
        return spec.encode()
    if "text" in spec:
        return spec["text"].encode()
    if "pattern" in spec:
        pat = spec["pattern"].encode()
        size = int(spec["size"])
        return (pat * (size // len(pat) + 1))[:size]
    if "rand" in spec:
        salt = str(spec.get("salt", idx))
        rng = random.Random(int.from_bytes(
            derive_seed(scheme, "data", name, salt), "little"))
        return rng.randbytes(int(spec["rand"]))
    raise ScenarioError(f"unintelligible data spec: {spec!r}")


def build_deploy_config(cfg: dict) -> DeployConfig:
    for key in ("fileservers", "filegroups"):
        if key not in cfg:
            raise ScenarioError(f"scenario config: missing {key!r}")
    servers = tuple(FsSpec(s["name"], int(s["node"]),
                           tuple(int(u) for u in s.get("uids", ())))
                    for s in cfg["fileservers"])
    filegroups = {int(fgrp): (tuple(int(u) for u in spec.get("writers", ())),
                              tuple(int(u) for u in spec.get("readers", ())))
                  for fgrp, spec in cfg["filegroups"].items()}
    params = cfg.get("params", {})
    knobs = {k: int(params[k]) for k in
             ("flush_threshold", "flush_timeout", "lock_drop_interval",
              "pending_deadline", "lock_deadline") if k in params}
    return DeployConfig(seed=int(cfg.get("seed", 0)),
                        hash_name=cfg.get("hash", "sha256"),
                        mode=cfg.get("mode", "async"),
                        servers=servers, filegroups=filegroups,
                        root_fgrp=int(cfg.get("root_fgrp", 1)), **knobs)


@dataclass
class StepResult:
    idx: int
    op: str
    ok: bool
    detail: str = ""


@dataclass
class ScenarioReport:
    name: str
    steps: list[StepResult] = field(default_factory=list)
    invariants: list[tuple[str, bool, str]] = field(default_factory=list)
    prune: dict | None = None
    verdicts: list[str] = field(default_factory=list)
    fired: list[str] = field(default_factory=list)
    ticks: int = 0

    def ok(self) -> bool:
        return (all(s.ok for s in self.steps)
                and all(ok for _, ok, _ in self.invariants))

    def to_json(self) -> str:
        return json.dumps({
            "name": self.name,
            "ok": self.ok(),
            "ticks": self.ticks,
            "steps": [{"idx": s.idx, "op": s.op, "ok": s.ok,
                       "detail": s.detail} for s in self.steps],
            "invariants": [{"name": n, "ok": ok, "detail": d}
                           for n, ok, d in self.invariants],
            "prune": self.prune,
            "verdicts": self.verdicts,
            "faults_fired": self.fired,
        }, indent=2, sort_keys=True)

    def to_text(self) -> str:
        lines = [f"scenario {self.name}: "
                 f"{'ok' if self.ok() else 'FAILED'} at t={self.ticks}"]
        for s in self.steps:
            mark = "ok " if s.ok else "FAIL"
            detail = f"  {s.detail}" if s.detail else ""
            lines.append(f"  [{mark}] step {s.idx:03d} {s.op}{detail}")
        for name, ok, detail in self.invariants:
            mark = "ok " if ok else "FAIL"
            lines.append(f"  [{mark}] invariant {name}"
                         f"{'  ' + detail if detail else ''}")
        if self.prune is not None:
            lines.append(f"  prune: {json.dumps(self.prune, sort_keys=True)}")
        for v in self.verdicts:
            lines.append(f"  verdict: {v}")
        for f in self.fired:
            lines.append(f"  fault fired: {f}")
        return "\n".join(lines)


class ScenarioRunner:
    def __init__(self, cfg: dict, plan: FaultPlan | None = None):
        self.cfg = cfg
        self.name = cfg.get("name", "scenario")
        if plan is None:
            plan = FaultPlan.from_config(cfg.get("faults", []))
        self.dep = Deployment(build_deploy_config(cfg), plan)
        self.handles: dict[str, tuple[str, InodeNumber]] = {}
        self.report = ScenarioReport(name=self.name)

    # -- single step ------------------------------------------------------------

    def run_steps(self, steps, start_idx: int = 0) -> None:
        for i, step in enumerate(steps):
            self._run_step(start_idx + i, dict(step))
            self.dep.pump()

    def _run_step(self, idx: int, step: dict) -> None:
        op = step["op"]
        want_err = step.get("expect_error")
        self._apply_adversary(idx)
        try:
            detail = self._do(idx, step) or ""
            if step.get("commit"):
                self.dep.fs(step["fs"]).fs_commit()
        except ProtocolError as err:
            got = type(err).__name__
            if want_err:
                ok = got == want_err
                msg = f"raised {got}" if ok else f"raised {got}, want {want_err}"
                self.report.steps.append(StepResult(idx, op, ok, msg))
            else:
                self.report.steps.append(
                    StepResult(idx, op, False, f"unexpected {got}: {err}"))
            return
        if want_err:
            self.report.steps.append(
                StepResult(idx, op, False, f"no error, want {want_err}"))
        else:
            self.report.steps.append(StepResult(idx, op, True, detail))

    def _apply_adversary(self, idx: int) -> None:
        """Adversarial state mutations fire at step boundaries: a fault spec
        with point "step.N" runs against the server before step N does."""
        while True:
            rule = self.dep.plan.check(f"step.{idx}")
            if rule is None:
                return
            params = rule.params
            fsv = self.dep.fs(params["fs"])
            ino = fsv.fs_lookup(params["path"], int(params.get("uid", 0)))
            inode_blk, leaves = self.dep.file_blocks(ino)
            which = params.get("block", "leaf0")
            blk = inode_blk if which == "inode" else leaves[int(which[4:])]
            if rule.kind == "DropBlock":
                self.dep.storage.adv_drop_block(
                    blk, drop_counts=bool(params.get("drop_counts")))
            elif rule.kind == "ForgeClaim":
                self.dep.storage.adv_forge_charge(
                    blk, ino, int(params["victim"]))
            else:
                raise ScenarioError(
                    f"step-boundary fault must be DropBlock or ForgeClaim, "
                    f"not {rule.kind}")

    def _target(self, step: dict) -> tuple:
        fsv = self.dep.fs(step["fs"])
        uid = int(step["uid"])
        if "handle" in step and step["handle"] in self.handles:
            return fsv, uid, self.handles[step["handle"]][1]
        if "path" in step:
            return fsv, uid, None
        raise ScenarioError(f"step needs a path or a known handle: {step}")

    def _do(self, idx: int, step: dict) -> str | None:
        op = step["op"]
        scheme = self.dep.scheme
        if op == "create":
            fsv = self.dep.fs(step["fs"])
            ino = fsv.fs_create(step["path"], int(step["uid"]),
                                int(step["fgrp"]))
            if "data" in step:
                data = gen_data(scheme, self.name, step["data"], idx)
                fsv.fs_write(ino, 0, data, int(step["uid"]))
            if "handle" in step:
                self.handles[step["handle"]] = (step["fs"], ino)
            return str(ino)
        if op == "lookup":
            # Resolve a path to a handle without opening it: models a client
            # that cached the inode number but holds no open.
            fsv = self.dep.fs(step["fs"])
            ino = fsv.fs_lookup(step["path"], int(step["uid"]))
            self.handles[step["handle"]] = (step["fs"], ino)
            return str(ino)
        if op == "mkdir":
            fsv = self.dep.fs(step["fs"])
            ino = fsv.fs_mkdir(step["path"], int(step["uid"]),
                               int(step["fgrp"]))
            return str(ino)
        if op == "write":
            fsv, uid, ino = self._target(step)
            if ino is None:
                ino = fsv.fs_lookup(step["path"], uid)
            data = gen_data(scheme, self.name, step["data"], idx)
            fsv.fs_write(ino, int(step.get("off", 0)), data, uid)
            return f"{len(data)} bytes"
        if op == "read":
            fsv, uid, ino = self._target(step)
            if ino is None:
                ino = fsv.fs_open(step["path"], uid) if step.get("open") \
                    else fsv.fs_lookup(step["path"], uid)
            got = fsv.fs_read(ino, int(step.get("off", 0)),
                              int(step["len"]), uid)
            if step.get("open"):
                fsv.fs_close(ino, uid)
            if "expect" in step:
                want = gen_data(scheme, self.name, step["expect"],
                                int(step.get("expect_idx", idx)))
                want = want[int(step.get("off", 0)):
                            int(step.get("off", 0)) + int(step["len"])]
                if got != want:
                    raise ScenarioError(
                        f"content mismatch: got {len(got)} bytes "
                        f"{got[:8].hex()}, want {len(want)} {want[:8].hex()}")
            return f"{len(got)} bytes"
        if op == "open":
            fsv = self.dep.fs(step["fs"])
            ino = fsv.fs_open(step["path"], int(step["uid"]))
            self.handles[step["handle"]] = (step["fs"], ino)
            return str(ino)
        if op == "close":
            fs_name, ino = self.handles.pop(step["handle"])
            self.dep.fs(fs_name).fs_close(ino, int(step["uid"]))
            return None
        if op == "unlink":
            fsv = self.dep.fs(step["fs"])
            fsv.fs_unlink(step["path"], int(step["uid"]))
            return None
        if op == "commit":
            self.dep.fs(step["fs"]).fs_commit()
            return None
        if op == "abort":
            self.dep.fs(step["fs"]).fs_abort()
            return None
        if op == "advance":
            self.dep.advance(int(step["ticks"]))
            return None
        if op == "quiesce":
            done = self.dep.quiesce()
            return "quiesced" if done else "did not quiesce"
        if op == "power_cycle":
            self.dep.power_cycle()
            return None
        if op == "prune":
            outcome = self.dep.lhash.prune_round()
            return _prune_dict(outcome, self.dep)["summary"]
        raise ScenarioError(f"unknown step op: {op}")

    # -- full run ----------------------------------------------------------------

    def run(self) -> ScenarioReport:
        try:
            self.run_steps(self.cfg.get("steps", []))
        except ActorCrash as crash:
            # A crash fault without a power_cycle step ends the workload;
            # the final phase then inspects whatever survived.
            self.report.steps.append(StepResult(
                len(self.report.steps), "crash", True, str(crash)))
        final = self.cfg.get("final", {})
        if final.get("quiesce", True):
            self.dep.quiesce()
        if final.get("prune"):
            outcome = self.dep.lhash.prune_round()
            self.report.prune = _prune_dict(outcome, self.dep)
        if final.get("invariants", True):
            # A scenario whose fault destroys server state (dropped blocks)
            # cannot pass the reachability walk; such configs opt out and
            # stand on their verdicts instead.
            strict = final.get("strict_invariants",
                               not self.cfg.get("faults"))
            self.report.invariants = self.dep.invariants(strict=strict)
        if final.get("audit"):
            self.report.verdicts = [v.describe()
                                    for _, v in resolve_disputes(self.dep)]
        self.report.fired = list(self.dep.plan.fired_log)
        self.report.ticks = self.dep.clock.now
        return self.report


def _prune_dict(outcome: PruneOutcome, dep: Deployment) -> dict:
    stats = dep.lhash.vault_stats()
    summary = (f"agreed leaves={outcome.leaves}" if outcome.agreed
               else "diverged" + (f" at {outcome.divergent[:8].hex()}"
                                  if outcome.divergent else ""))
    return {"agreed": outcome.agreed, "leaves": outcome.leaves,
            "divergent": outcome.divergent.hex() if outcome.divergent
            else None,
            "vault_records": stats["records"],
            "vault_leaves": stats["leaves"],
            "summary": summary}


def resolve_disputes(dep: Deployment, extra=()):
    """Resolve every dispute any honest actor recorded, against the vault's
    evidence and whatever the storage server can produce.  `extra` carries
    disputes raised outside the deployment (a denying fileserver, say)."""
    from .audit import ServerEvidence, resolve
    vault = dep.lhash.evidence()
    vms = [dep.lhash.vm] + [dep.fservers[n].vm for n in sorted(dep.fservers)]
    disputes = [d for vm in vms for d in vm.disputes] + list(extra)
    disputed = {d.blknum for d in disputes if d.blknum}
    server = ServerEvidence(
        retained=list(dep.storage.retained),
        per_uid={blk: dict(counts)
                 for blk, counts in dep.storage.per_uid.items()},
        pending_blocks={p.entry.blknum
                        for pend in dep.storage.pending.values()
                        for p in pend},
        has_block={blk: blk in dep.storage.blocks for blk in disputed})
    return [(d, resolve(d, vault, server, dep.scheme, dep.registry))
            for d in disputes]


def run_scenario(cfg: dict,
                 plan: FaultPlan | None = None
                 ) -> tuple[Deployment, ScenarioReport]:
    runner = ScenarioRunner(cfg, plan)
    report = runner.run()
    return runner.dep, report


# -- crash suite ---------------------------------------------------------------

_CRASH_PREFIXES = ("fs.commit.", "lhash.sid.", "storage.store.",
                   "vm.store.", "vm.flush.")


@dataclass
class CrashPointResult:
    point: str
    nth: int
    verdict: str   # committed | rolled-back | never-fired | MISMATCH

    def line(self) -> str:
        return f"{self.point}#{self.nth}: {self.verdict}"


@dataclass
class CrashSuiteReport:
    points: list[CrashPointResult] = field(default_factory=list)

    def ok(self) -> bool:
        return bool(self.points) and all(
            p.verdict in ("committed", "rolled-back") for p in self.points)

    def to_text(self) -> str:
        lines = [f"crash suite: {len(self.points)} injection points, "
                 f"{'all recovered consistently' if self.ok() else 'FAILURES'}"]
        lines += [f"  {p.line()}" for p in self.points]
        return "\n".join(lines)

    def to_json(self) -> str:
        return json.dumps({
            "ok": self.ok(),
            "points": [{"point": p.point, "nth": p.nth, "verdict": p.verdict}
                       for p in self.points],
        }, indent=2, sort_keys=True)


def crash_suite(cfg: dict,
                prefixes: tuple[str, ...] = _CRASH_PREFIXES
                ) -> CrashSuiteReport:
    steps = cfg.get("steps", [])
    marked = [i for i, s in enumerate(steps) if s.get("marked")]
    if len(marked) != 1:
        raise ScenarioError("crash suite needs exactly one marked step")
    cut = marked[0]
    prelude, target = steps[:cut], steps[cut]

    # Clean run: enumerate the durability points the marked step crosses
    # (through the flush that covers it) and freeze the committed oracle.
    r = ScenarioRunner(cfg)
    r.run_steps(prelude)
    collected: list[str] = []
    r.dep.fabric.collecting = collected
    r.run_steps([target], start_idx=cut)
    r.dep.quiesce()
    r.dep.fabric.collecting = None
    committed = r.dep.snapshot_consistency_state()

    occurrences: list[tuple[str, int]] = []
    seen: dict[str, int] = {}
    for name in collected:
        if not name.startswith(prefixes):
            continue
        seen[name] = seen.get(name, 0) + 1
        occurrences.append((name, seen[name]))

    # Second clean run without the marked step: the rolled-back oracle.
    r = ScenarioRunner(cfg)
    r.run_steps(prelude)
    r.dep.quiesce()
    rolled_back = r.dep.snapshot_consistency_state()

    report = CrashSuiteReport()
    for point, nth in occurrences:
        r = ScenarioRunner(cfg)
        r.run_steps(prelude)
        r.dep.plan.arm(FaultRule(point=point, kind="CrashActor", nth=nth))
        crashed = False
        try:
            r.run_steps([target], start_idx=cut)
            r.dep.quiesce()   # flush-time points fire here
        except ActorCrash:
            crashed = True
        if not crashed:
            report.points.append(CrashPointResult(point, nth, "never-fired"))
            continue
        r.dep.power_cycle()
        r.dep.quiesce()
        state = r.dep.snapshot_consistency_state()
        if state == committed:
            verdict = "committed"
        elif state == rolled_back:
            verdict = "rolled-back"
        else:
            verdict = "MISMATCH"
        report.points.append(CrashPointResult(point, nth, verdict))
    return report
