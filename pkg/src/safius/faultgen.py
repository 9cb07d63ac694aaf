"""Seeded adversarial cases whose verdicts are known by construction.

Each case builds a small honest filesystem history across two fileserver
nodes, injects exactly one misbehavior (bytes dropped or corrupted, a load
answered with a lie, a forged charge, a false denial, a refused grant) or
one honest mishap (a crash, a delayed message), runs the detection motions
an honest deployment performs anyway, and resolves every dispute that
surfaced.  The construction dictates the verdict class: misbehavior against
covered operations must pin the guilty party, misbehavior inside the
unsigned window must resolve to an evidence gap rather than an accusation,
and honest mishaps must produce no disputes at all.  A verdict naming a
party that did not misbehave is counted as a false accusation; the suite
tolerates zero.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass, field

from .audit import Accused, Dispute, DisputeKind
from .deploy import Deployment, DeployConfig, FsSpec
from .errors import ActorCrash, BlockNotFound, IntegrityFailure, ProtocolError
from .ids import InodeNumber
from .scenario import resolve_disputes
from .sim import FaultRule

_WRITERS = {1: (101, 102, 103), 2: (102,)}

# Fault kinds whose window variants need asynchronous batching; sync mode
# covers every operation the moment it happens, so only the covered and
# honest variants make sense there.
_ASYNC_KINDS = (
    "drop-covered", "drop-window",
    "notfound-transient", "notfound-covered", "notfound-window",
    "corrupt-covered", "corrupt-window",
    "forge-covered", "forge-window",
    "deny-covered", "deny-window",
    "refuse-persistent", "refuse-transient",
    "crash", "delay",
)
_SYNC_KINDS = (
    "drop-covered", "notfound-transient", "notfound-covered",
    "corrupt-covered", "deny-covered", "crash", "delay",
)

_CRASH_POINTS = (
    "fs.commit.staged", "fs.commit.acked", "fs.commit.committed",
    "fs.commit.frees_issued", "net.lhash.CommitReq", "net.storage.StoreOp",
    "storage.store.recv", "storage.store.applied",
)


@dataclass
class _File:
    fs: str
    uid: int
    fgrp: int
    path: str
    ino: InodeNumber
    data: bytes


@dataclass
class CaseResult:
    idx: int
    kind: str
    mode: str
    expected: list[str]
    got: list[str]
    ok: bool
    false_accusations: int = 0
    note: str = ""

    def line(self) -> str:
        mark = "ok " if self.ok else "FAIL"
        extra = f"  {self.note}" if self.note else ""
        return (f"[{mark}] case {self.idx:04d} {self.kind} ({self.mode}): "
                f"want {self.expected or ['-']} got {self.got or ['-']}{extra}")


@dataclass
class SuiteReport:
    base_seed: int
    cases: list[CaseResult] = field(default_factory=list)

    @property
    def total(self) -> int:
        return len(self.cases)

    @property
    def correct(self) -> int:
        return sum(1 for c in self.cases if c.ok)

    @property
    def false_accusations(self) -> int:
        return sum(c.false_accusations for c in self.cases)

    @property
    def gap_expected(self) -> int:
        return sum(1 for c in self.cases if "gap" in c.expected)

    def by_kind(self) -> dict[str, tuple[int, int]]:
        out: dict[str, tuple[int, int]] = {}
        for c in self.cases:
            n, good = out.get(c.kind, (0, 0))
            out[c.kind] = (n + 1, good + (1 if c.ok else 0))
        return out

    def ok(self) -> bool:
        return (self.total > 0 and self.correct == self.total
                and self.false_accusations == 0)

    def to_text(self) -> str:
        lines = [f"fault suite seed={self.base_seed}: "
                 f"{self.correct}/{self.total} correct verdicts, "
                 f"{self.false_accusations} false accusations, "
                 f"{self.gap_expected} window cases expecting a gap"]
        for kind in sorted(self.by_kind()):
            n, good = self.by_kind()[kind]
            lines.append(f"  {kind:24s} {good}/{n}")
        for c in self.cases:
            if not c.ok:
                lines.append("  " + c.line())
        return "\n".join(lines)

    def to_json(self) -> str:
        return json.dumps({
            "base_seed": self.base_seed,
            "total": self.total,
            "correct": self.correct,
            "false_accusations": self.false_accusations,
            "gap_expected": self.gap_expected,
            "by_kind": {k: {"total": n, "correct": good}
                        for k, (n, good) in self.by_kind().items()},
            "failures": [c.line() for c in self.cases if not c.ok],
        }, indent=2, sort_keys=True)


def _deploy(idx: int, base_seed: int, mode: str) -> Deployment:
    cfg = DeployConfig(
        seed=base_seed * 1_000_003 + idx,
        mode=mode,
        servers=(FsSpec("fs1", 1, (101, 102)), FsSpec("fs2", 2, (102, 103))),
        filegroups={1: ((101, 102, 103), ()), 2: ((102,), (103,))},
        root_fgrp=1,
        # The prelude batches several commits without pumping; the unsigned
        # window must stay open until the case's own quiesce covers them.
        pending_deadline=30_000)
    return Deployment(cfg)


def _prelude(dep: Deployment, rng: random.Random) -> list[_File]:
    files = []
    for i in range(rng.randint(2, 4)):
        fs_name = rng.choice(("fs1", "fs2"))
        fgrp = rng.choice((1, 2))
        uid = rng.choice(_WRITERS[fgrp])
        data = rng.randbytes(rng.randint(64, 6000))
        path = f"/f{i}"
        fsv = dep.fs(fs_name)
        ino = fsv.fs_create(path, uid, fgrp)
        fsv.fs_write(ino, 0, data, uid)
        fsv.fs_commit()
        files.append(_File(fs_name, uid, fgrp, path, ino, data))
    return files


def _pick_block(rng: random.Random, inode_blk: bytes,
                leaves: list[bytes]) -> bytes:
    if leaves and rng.random() >= 0.25:
        return rng.choice(leaves)
    return inode_blk


def _read_expect_error(dep: Deployment, f: _File, want) -> str:
    fsv = dep.fs(f.fs)
    try:
        fsv.fs_read(f.ino, 0, len(f.data), f.uid)
    except want:
        return ""
    except ProtocolError as err:
        return f"read raised {type(err).__name__}, want {want.__name__}"
    return f"read succeeded, want {want.__name__}"


def _verify_reads(dep: Deployment, files: list[_File]) -> str:
    for f in files:
        fsv = dep.fs(f.fs)
        try:
            ino = fsv.fs_lookup(f.path, f.uid)
            got = fsv.fs_read(ino, 0, len(f.data), f.uid)
        except ProtocolError as err:
            return f"{f.path}: {type(err).__name__}: {err}"
        if got != f.data:
            return f"{f.path}: content diverged after recovery"
    return ""


def _tags(pairs) -> list[str]:
    out = []
    for _, verdict in pairs:
        if verdict.accused == Accused.STORAGE_SERVER:
            out.append("storage")
        elif verdict.accused == Accused.FILESERVER:
            out.append(f"fs:{verdict.uid}")
        else:
            out.append("gap" if verdict.evidence_gap else "clean")
    return sorted(out)


def run_case(idx: int, base_seed: int = 11) -> CaseResult:
    rng = random.Random((base_seed << 24) ^ (idx * 2_654_435_761))
    mode = "sync" if rng.random() < 0.2 else "async"
    kind = rng.choice(_SYNC_KINDS if mode == "sync" else _ASYNC_KINDS)
    dep = _deploy(idx, base_seed, mode)
    files = _prelude(dep, rng)
    target = rng.choice(files)

    covered = mode == "sync" or not kind.endswith("-window")
    if covered and mode == "async" and not kind.startswith("refuse"):
        # Refusal targets the live unsigned window; everything else is
        # injected against fully covered state in its covered variant.
        dep.quiesce()

    expected: list[str] = []
    extra: list[Dispute] = []
    guilty = None
    note = ""

    if kind.startswith("drop"):
        inode_blk, leaves = dep.file_blocks(target.ino)
        blk = _pick_block(rng, inode_blk, leaves)
        drop_counts = rng.random() < 0.3
        dep.storage.adv_drop_block(blk, drop_counts=drop_counts)
        if covered and not drop_counts and rng.random() < 0.5:
            dep.lhash.prune_round()
        note = _read_expect_error(dep, target, BlockNotFound)
        expected = ["storage"] if covered else ["gap"]
        guilty = "storage"

    elif kind.startswith("notfound"):
        inode_blk, leaves = dep.file_blocks(target.ino)
        blk = _pick_block(rng, inode_blk, leaves)
        persistent = kind != "notfound-transient"
        nrules = 6 if persistent else 1
        for _ in range(nrules):
            dep.plan.arm(FaultRule(point="storage.load", kind="ReturnNotFound",
                                   match={"blknum": blk.hex()}))
        if persistent:
            note = _read_expect_error(dep, target, BlockNotFound)
            expected = ["storage"] if covered else ["gap"]
            guilty = "storage"
        else:
            # One lie heals on the open-handle retry path; nobody is accused.
            fsv = dep.fs(target.fs)
            ino = fsv.fs_open(target.path, target.uid)
            got = fsv.fs_read(ino, 0, len(target.data), target.uid)
            fsv.fs_close(ino, target.uid)
            if got != target.data:
                note = "retry returned wrong bytes"
            expected = []

    elif kind.startswith("corrupt"):
        inode_blk, leaves = dep.file_blocks(target.ino)
        blk = _pick_block(rng, inode_blk, leaves)
        dep.plan.arm(FaultRule(point="storage.load", kind="CorruptBytes",
                               params={"bit": rng.randrange(1 << 15)},
                               match={"blknum": blk.hex()}))
        note = _read_expect_error(dep, target, IntegrityFailure)
        # A block's name is its digest, so corruption convicts even inside
        # the unsigned window.
        expected = ["storage"]
        guilty = "storage"

    elif kind.startswith("forge"):
        inode_blk, leaves = dep.file_blocks(target.ino)
        victim = rng.choice((101, 102, 103))
        if covered and rng.random() < 0.4:
            blk = dep.scheme.digest(rng.randbytes(32))  # charge for a block nobody stored
        else:
            blk = _pick_block(rng, inode_blk, leaves)
        dep.storage.adv_forge_charge(blk, target.ino, victim)
        outcome = dep.lhash.prune_round()
        if outcome.agreed:
            note = "prune agreed despite forged charge"
        expected = ["storage"] if covered else ["gap"]
        guilty = "storage"

    elif kind.startswith("deny"):
        inode_blk, leaves = dep.file_blocks(target.ino)
        blk = leaves[0] if leaves else inode_blk
        extra.append(Dispute(kind=DisputeKind.UNSOLICITED_STORE,
                             blknum=blk, ino=target.ino, uid=target.uid))
        expected = [f"fs:{target.uid}"] if covered else ["gap"]
        guilty = f"fs:{target.uid}"

    elif kind.startswith("refuse"):
        victim = files[-1].uid  # its prelude stores are still unflushed
        persistent = kind == "refuse-persistent"
        for _ in range(2 if persistent else 1):
            dep.plan.arm(FaultRule(point="storage.grant", kind="RefuseGrant",
                                   match={"uid": victim}))
        dep.advance(dep.config.flush_timeout + 1)
        if persistent:
            expected = ["gap"]
            guilty = "storage"
        else:
            expected = []

    elif kind == "crash":
        point = rng.choice(_CRASH_POINTS)
        params = {}
        if point.startswith("net.") and rng.random() < 0.5:
            params = {"actor": target.fs}  # kill the caller mid-flight
        dep.plan.arm(FaultRule(point=point, kind="CrashActor", params=params))
        crashed = False
        try:
            fsv = dep.fs(target.fs)
            ino = fsv.fs_create("/x", target.uid, target.fgrp)
            fsv.fs_write(ino, 0, rng.randbytes(600), target.uid)
            fsv.fs_commit()
        except ActorCrash:
            crashed = True
        if crashed:
            dep.power_cycle()
        dep.quiesce()
        note = _verify_reads(dep, files)
        bad = [n for n, ok, _ in dep.invariants(strict=False) if not ok]
        if bad and not note:
            note = f"invariants broken after recovery: {bad}"
        expected = []

    elif kind == "delay":
        point = rng.choice(("net.storage.LoadReq", "net.lhash.AcquireLock",
                            "net.storage.StoreOp", "net.lhash.CommitReq"))
        dep.plan.arm(FaultRule(point=point, kind="DelayMessage",
                               params={"ticks": rng.randint(10, 80)}))
        fsv = dep.fs(target.fs)
        ino = fsv.fs_create("/x", target.uid, target.fgrp)
        fsv.fs_write(ino, 0, rng.randbytes(600), target.uid)
        fsv.fs_commit()
        dep.quiesce()
        note = _verify_reads(dep, files)
        bad = [n for n, ok, _ in dep.invariants(strict=True) if not ok]
        if bad and not note:
            note = f"invariants broken after delay: {bad}"
        expected = []

    else:
        raise AssertionError(kind)

    got = _tags(resolve_disputes(dep, extra))
    ok = got == sorted(expected) and not note

    false_acc = 0
    for tag in got:
        if tag in ("gap", "clean"):
            continue
        if tag != guilty:
            false_acc += 1
    return CaseResult(idx=idx, kind=kind, mode=mode,
                      expected=sorted(expected), got=got,
                      ok=ok and false_acc == 0,
                      false_accusations=false_acc, note=note)


def run_suite(count: int = 500, base_seed: int = 11) -> SuiteReport:
    report = SuiteReport(base_seed=base_seed)
    for idx in range(count):
        report.cases.append(run_case(idx, base_seed))
    return report
