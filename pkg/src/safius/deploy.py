"""Deployment: a whole system wired onto one fabric.

Builds the storage server, the lock server, and N fileservers over
per-actor stable stores that the deployment owns, so a power cycle can
throw every process away and reboot the survivors from stable state
alone.  All key material and RNG seeds derive from (config, seed), which
makes a deployment a pure function of its inputs.

The deployment also plays auditor's bookkeeper: a fabric observer keeps
an independent per-uid recount of every acknowledged store and free
(deduplicated by session nonce exactly as the server must), and the
invariant checks compare protocol state against that recount, walk block
reachability, and compare the two refcount tree roots.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from . import blockfile
from .counts import apply_count
from .crypto import BlockCipher, HashScheme, KeyRegistry, derive_seed
from .fs import FileServer
from .ids import (
    ITBL_FGRP,
    LHASH_PRINCIPAL,
    STORAGE_PRINCIPAL,
    InodeNumber,
)
from .lhash import LhashServer
from .sim import CostMeter, Fabric, FaultPlan, LogicalClock, TraceLog
from .stable import StableStore
from .storage import BatchMsg, FreeOp, SingleOpMsg, StorageServer, StoreOp


@dataclass(frozen=True)
class FsSpec:
    name: str
    node: int
    uids: tuple[int, ...] = ()


@dataclass
class DeployConfig:
    seed: int = 0
    hash_name: str = "sha256"
    mode: str = "async"
    servers: tuple[FsSpec, ...] = (FsSpec("fs1", 1, (101,)),)
    # fgrp -> (writers, readers)
    filegroups: dict[int, tuple[tuple[int, ...], tuple[int, ...]]] = field(
        default_factory=lambda: {1: ((101,), ())})
    root_fgrp: int = 1
    flush_threshold: int = 1000
    flush_timeout: int = 1000
    lock_drop_interval: int = 2000
    pending_deadline: int = 2000
    lock_deadline: int = 10_000
    costs: dict[str, int] | None = None


class _RawReader:
    """vm_read over the server's raw block map, for invariant walks that
    must not touch the network or the clock."""

    def __init__(self, blobs: dict[bytes, bytes], cipher: BlockCipher):
        self.blobs = blobs
        self.cipher = cipher

    def vm_read(self, blknum: bytes, fgrp: int) -> bytes:
        return self.cipher.decrypt(fgrp, self.blobs[blknum])


class Deployment:
    def __init__(self, config: DeployConfig, plan: FaultPlan | None = None):
        self.config = config
        self.scheme = HashScheme(config.hash_name)
        self.clock = LogicalClock()
        self.meter = CostMeter(self.clock, config.costs)
        self.trace = TraceLog(self.clock)
        self.plan = plan or FaultPlan()
        self.fabric = Fabric(self.clock, self.meter, self.trace, self.plan)
        self.registry = KeyRegistry()
        self._install_keys()
        self.stables = {"storage": StableStore("storage"),
                        "lhash": StableStore("lhash")}
        for spec in config.servers:
            self.stables[spec.name] = StableStore(spec.name)
        # Independent recount of acknowledged ops: blknum -> {uid: count},
        # deduplicated by (principal, nonce, count) like the server's own.
        self.oracle: dict[bytes, dict[int, int]] = {}
        self._oracle_seen: set[tuple[int, int, int]] = set()
        self.fabric.observers.append(self._observe)
        self.power_cycles = 0
        self._build()
        self._boot()

    # -- construction -------------------------------------------------------

    def _install_keys(self) -> None:
        cfg = self.config
        principals = {LHASH_PRINCIPAL, STORAGE_PRINCIPAL}
        for spec in cfg.servers:
            principals.update(spec.uids)
        for writers, readers in cfg.filegroups.values():
            principals.update(writers)
            principals.update(readers)
        for uid in sorted(principals):
            self.registry.register_signer(
                uid, derive_seed(self.scheme, "signer", str(uid),
                                 str(cfg.seed)))
        self.fgrp_keys = {ITBL_FGRP: derive_seed(self.scheme, "fgrp-key",
                                                 str(ITBL_FGRP),
                                                 str(cfg.seed))}
        for fgrp in sorted(cfg.filegroups):
            self.fgrp_keys[fgrp] = derive_seed(self.scheme, "fgrp-key",
                                               str(fgrp), str(cfg.seed))

    def _new_cipher(self) -> BlockCipher:
        cipher = BlockCipher(self.scheme)
        for fgrp in sorted(self.fgrp_keys):
            cipher.register(fgrp, self.fgrp_keys[fgrp])
        return cipher

    def _build(self) -> None:
        cfg = self.config
        self.storage = StorageServer(self.fabric, self.registry, self.scheme,
                                     self.stables["storage"],
                                     pending_deadline=cfg.pending_deadline)
        self.fabric.register(StorageServer.NAME, self.storage)
        self.lhash = LhashServer(self.fabric, self.registry, self.scheme,
                                 self._new_cipher(), self.stables["lhash"],
                                 root_fgrp=cfg.root_fgrp, mode=cfg.mode,
                                 flush_threshold=cfg.flush_threshold,
                                 flush_timeout=cfg.flush_timeout,
                                 lock_deadline=cfg.lock_deadline)
        self.fabric.register(LhashServer.NAME, self.lhash)
        self.lhash.configure_fgrps(
            {fgrp: (list(w), list(r))
             for fgrp, (w, r) in cfg.filegroups.items()}, {})
        self.fservers: dict[str, FileServer] = {}
        for spec in cfg.servers:
            fsv = FileServer(spec.name, spec.node, self.fabric, self.registry,
                             self.scheme, self._new_cipher(),
                             self.stables[spec.name], mode=cfg.mode,
                             threshold=cfg.flush_threshold,
                             timeout=cfg.flush_timeout,
                             lock_drop_interval=cfg.lock_drop_interval)
            self.fabric.register(spec.name, fsv)
            self.fservers[spec.name] = fsv

    def _boot(self) -> None:
        self.lhash.boot()
        for spec in self.config.servers:
            self.fservers[spec.name].boot()

    def fs(self, name: str) -> FileServer:
        return self.fservers[name]

    def power_cycle(self) -> None:
        """Crash policy is all-or-nothing: any actor going down takes the
        deployment with it, and every actor reboots from stable state."""
        self.power_cycles += 1
        self.trace.emit("deploy", "power-cycle", str(self.power_cycles))
        self._build()
        self._boot()

    # -- background work ------------------------------------------------------

    def pump(self) -> None:
        now = self.clock.now
        self.storage.poll(now)
        self.lhash.vm.run_due(now)
        for name in sorted(self.fservers):
            self.fservers[name].vm.run_due(now)
            self.fservers[name].sweep_locks(now)

    def advance(self, ticks: int) -> None:
        self.clock.advance(ticks)
        self.pump()

    def quiesced(self) -> bool:
        vms = [self.lhash.vm] + [self.fservers[n].vm
                                 for n in sorted(self.fservers)]
        if self.storage.has_pending() \
                and not any(vm.refused for vm in vms):
            return False
        return all(vm.quiesced() or vm.refused for vm in vms)

    def quiesce(self, max_rounds: int = 64) -> bool:
        step = max(self.config.flush_timeout, 1)
        for _ in range(max_rounds):
            if self.quiesced():
                return True
            self.advance(step)
        return self.quiesced()

    # -- accounting oracle -----------------------------------------------------

    def _observe(self, src: str, dst: str, msg, reply) -> None:
        if dst != StorageServer.NAME:
            return
        if isinstance(msg, (StoreOp, FreeOp)):
            e = msg.entry
            self._count(e.nonce.principal, e.nonce.value, e.count,
                        e.blknum, e.op)
        elif isinstance(msg, SingleOpMsg):
            req = msg.signed.req
            self._count(req.nonce.principal, req.nonce.value, req.count,
                        req.blknum, req.op)
        elif isinstance(msg, BatchMsg):
            uid = msg.batch.header.uid
            for e in msg.batch.entries:
                self._count(uid, e.nonce.value, e.count, e.blknum, e.op)

    def _count(self, principal: int, nonce: int, count: int,
               blknum: bytes, op) -> None:
        key = (principal, nonce, count)
        if key in self._oracle_seen:
            return
        self._oracle_seen.add(key)
        counts = self.oracle.setdefault(blknum, {})
        apply_count(counts, principal, op)
        if not counts:
            del self.oracle[blknum]

    # -- invariants ---------------------------------------------------------------

    def reachable_blocks(self) -> tuple[set[bytes], list[str]]:
        """Every block the filesystem can name, walked offline (decrypt the
        server's raw map directly; no messages, no clock movement)."""
        problems: list[str] = []
        reader = _RawReader(self.storage.blocks, self._new_cipher())
        reachable: set[bytes] = set()

        def walk(inode_blk: bytes, fgrp: int, label: str) -> None:
            reachable.add(inode_blk)
            try:
                image = blockfile.load_image(reader, self.scheme,
                                             reader.vm_read(inode_blk, fgrp))
            except KeyError as missing:
                problems.append(f"{label}: block {missing.args[0][:8].hex()} "
                                f"unreachable at the server")
                return
            except Exception as err:
                problems.append(f"{label}: {err}")
                return
            for ptr in image.ptrs:
                if ptr is not None:
                    reachable.add(ptr)
            if image.old_ind1 is not None:
                reachable.add(image.old_ind1)
            if image.old_ind2 is not None:
                reachable.add(image.old_ind2)
            reachable.update(image.old_l1.values())

        if self.lhash.itbl_root is not None:
            walk(self.lhash.itbl_root.inode_hash, ITBL_FGRP, "itbl")
        for packed in sorted(self.lhash.entries):
            entry = self.lhash.entries[packed]
            fgrp = self.lhash.fgrp_assign.get(packed)
            label = str(InodeNumber.unpack(packed))
            if fgrp is None:
                problems.append(f"{label}: committed file without filegroup")
                continue
            walk(entry.idata.inode_hash, fgrp, label)
        for blk in sorted(reachable):
            if blk not in self.storage.blocks:
                problems.append(f"reachable block {blk[:8].hex()} missing")
        return reachable, problems

    def file_blocks(self, ino) -> tuple[bytes, list[bytes]]:
        """(inode block, data leaves) of one committed file, walked offline.
        Adversarial injections use this to aim at a specific block."""
        packed = ino.pack()
        entry = self.lhash.entries[packed]
        fgrp = self.lhash.fgrp_assign[packed]
        reader = _RawReader(self.storage.blocks, self._new_cipher())
        inode_blk = entry.idata.inode_hash
        image = blockfile.load_image(reader, self.scheme,
                                     reader.vm_read(inode_blk, fgrp))
        return inode_blk, [p for p in image.ptrs if p is not None]

    def invariants(self, strict: bool = True) -> list[tuple[str, bool, str]]:
        """(name, ok, detail) triples.  strict adds the honest-run checks
        that faults legitimately break (recount equality, root agreement)."""
        out: list[tuple[str, bool, str]] = []
        _, problems = self.reachable_blocks()
        out.append(("reachable-blocks-referenced", not problems,
                    "; ".join(problems[:4])))
        q = self.quiesced()
        out.append(("quiesced", q, "" if q else "unflushed work remains"))
        if not strict:
            return out

        server = {blk: {u: c for u, c in counts.items() if c}
                  for blk, counts in self.storage.per_uid.items()}
        server = {blk: c for blk, c in server.items() if c}
        ok = server == self.oracle
        detail = ""
        if not ok:
            extra = sorted(set(server) ^ set(self.oracle))
            detail = (f"{len(server)} server vs {len(self.oracle)} oracle "
                      f"blocks; first skew "
                      f"{extra[0][:8].hex() if extra else 'value-level'}")
        out.append(("per-uid-recount", ok, detail))

        lroot = self.lhash.refcnt_tree.root()
        sroot = self.storage.tree.root()
        out.append(("refcount-roots-agree", lroot == sroot,
                    "" if lroot == sroot
                    else f"{lroot[:8].hex()} != {sroot[:8].hex()}"))
        flags = list(self.storage.flags) + list(self.lhash.flags)
        out.append(("no-flags", not flags, "; ".join(flags[:4])))
        disputes = [d for vm in
                    [self.lhash.vm] + [f.vm for f in self.fservers.values()]
                    for d in vm.disputes]
        out.append(("no-disputes", not disputes,
                    f"{len(disputes)} recorded"))
        return out

    def snapshot_consistency_state(self) -> bytes:
        """Canonical bytes of the durable, protocol-visible state: the inode
        table, per-inode references, and per-uid counts.  Soft state (locks,
        opens, caches) and invisible residue (zero-ref garbage, filegroup
        bindings of files that never committed) stay out, so a crash-run
        snapshot can be compared bit-for-bit against a clean run's."""
        lines: list[str] = []
        for fs in sorted(self.lhash.txmem):
            lines.append(f"txid {fs} {self.lhash.txmem[fs]}")
        for packed in sorted(self.lhash.entries):
            e = self.lhash.entries[packed]
            lines.append(f"itbl {packed:016x} {e.idata.inode_hash.hex()} "
                         f"{e.idata.incarnation} {e.flags} {e.origin}")
        for blk in sorted(self.storage.refs):
            by_ino = {ino.pack(): n
                      for ino, n in self.storage.refs[blk].items() if n}
            if not by_ino:
                continue
            body = ",".join(f"{p:016x}:{by_ino[p]}" for p in sorted(by_ino))
            lines.append(f"refs {blk.hex()} {body}")
        for blk in sorted(self.storage.per_uid):
            counts = {u: c for u, c in self.storage.per_uid[blk].items() if c}
            if not counts:
                continue
            body = ",".join(f"{u}:{counts[u]}" for u in sorted(counts))
            lines.append(f"uids {blk.hex()} {body}")
        return ("\n".join(lines) + "\n").encode()
