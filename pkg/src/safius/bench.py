"""Store-path benchmarks in simulated ticks.

Two workloads, both deterministic for a fixed config:

* `run_bench`: a Postmark-shaped stream of block stores driven straight at
  the volume layer, one store per transaction, under one of three signing
  modes.  It reports signing counters and a per-operation latency histogram
  in ticks; in asynchronous mode the histogram is bimodal, with one spike
  per granted batch.

* `run_churn`: repeated store/free traffic over a bounded set of live
  blocks, including the amplification pattern of storing and freeing the
  same block over and over, followed by one pruning round.  It reports the
  receipt vault's size before and after the collapse; the post-prune user
  evidence must track the number of live blocks, not the operation count.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass, field

from .counts import apply_count, pattern_bytes
from .crypto import BlockCipher, HashScheme, KeyRegistry, MerkleMap, derive_seed
from .errors import ScenarioError
from .ids import ITBL_FGRP, LHASH_PRINCIPAL, STORAGE_PRINCIPAL, InodeNumber, OpKind
from .lhash import LhashServer
from .sim import CostMeter, Fabric, FaultPlan, LogicalClock, TraceLog
from .stable import StableStore
from .storage import StorageServer
from .volume import VolumeManager

# CLI spellings of the three signing modes.
MODE_NAMES = {"sync-sign": "sync", "async-sign": "async", "no-sign": "none"}


@dataclass(frozen=True)
class BenchConfig:
    files: int = 1500
    size_min: int = 512
    size_max: int = 10000
    transactions: int = 500
    read_size: int = 512
    write_size: int = 512
    subdirectories: int = 10
    seed: int = 2121
    threshold: int = 1000
    # Continuous load; the timeout must exceed the batch fill time or it
    # preempts the threshold and splinters the batches.
    flush_timeout: int = 50_000

    def validate(self) -> None:
        for name in ("files", "size_min", "size_max", "transactions",
                     "read_size", "write_size", "subdirectories",
                     "threshold", "flush_timeout"):
            if getattr(self, name) <= 0:
                raise ScenarioError(f"bench config: {name} must be positive")
        if self.size_min > self.size_max:
            raise ScenarioError("bench config: size range reversed")

    @classmethod
    def from_dict(cls, raw: dict) -> "BenchConfig":
        d = dict(raw)
        if "size" in d:   # accept the two-number form: "size": [512, 10000]
            lo, hi = d.pop("size")
            d["size_min"], d["size_max"] = int(lo), int(hi)
        d.pop("name", None)
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ScenarioError(f"bench config: unknown keys {sorted(unknown)}")
        cfg = cls(**{k: int(v) for k, v in d.items()})
        cfg.validate()
        return cfg


@dataclass
class BenchReport:
    mode: str
    ops_total: int
    counters: dict[str, int]
    histogram: dict[int, int]
    spike_count: int
    batches_completed: int
    blocks_live: int
    invariants: list[tuple[str, bool, str]] = field(default_factory=list)

    def ok(self) -> bool:
        return all(ok for _, ok, _ in self.invariants)

    def to_text(self) -> str:
        lines = [f"bench mode={self.mode} ops={self.ops_total} "
                 f"blocks_live={self.blocks_live}"]
        for name in sorted(self.counters):
            lines.append(f"  {name:24s} {self.counters[name]}")
        lines.append(f"  latency histogram (ticks -> ops), "
                     f"{self.spike_count} spikes over "
                     f"{self.batches_completed} batches:")
        peak = max(self.histogram.values(), default=1)
        for lat in sorted(self.histogram):
            n = self.histogram[lat]
            bar = "#" * max(1, round(40 * n / peak))
            lines.append(f"  {lat:8d} {n:8d} {bar}")
        for name, ok, detail in self.invariants:
            mark = "ok " if ok else "FAIL"
            lines.append(f"  [{mark}] {name}"
                         f"{'  ' + detail if detail else ''}")
        return "\n".join(lines)

    def to_json(self) -> str:
        return json.dumps({
            "mode": self.mode,
            "ops_total": self.ops_total,
            "counters": self.counters,
            "histogram": {str(k): v for k, v in sorted(self.histogram.items())},
            "spike_count": self.spike_count,
            "batches_completed": self.batches_completed,
            "blocks_live": self.blocks_live,
            "invariants": [{"name": n, "ok": ok, "detail": d}
                           for n, ok, d in self.invariants],
            "ok": self.ok(),
        }, indent=2, sort_keys=True)


def run_bench(config: BenchConfig, mode: str = "async-sign") -> BenchReport:
    vm_mode = MODE_NAMES.get(mode, mode)
    if vm_mode not in ("sync", "async", "none"):
        raise ScenarioError(f"unknown bench mode: {mode}")
    config.validate()
    uid, fgrp = 7, 3
    scheme = HashScheme()
    clock = LogicalClock()
    fabric = Fabric(clock, CostMeter(clock), TraceLog(clock), FaultPlan())
    registry = KeyRegistry()
    registry.register_signer(uid, derive_seed(scheme, "bench-signer",
                                              str(uid), str(config.seed)))
    registry.register_signer(STORAGE_PRINCIPAL,
                             derive_seed(scheme, "bench-signer", "server",
                                         str(config.seed)))
    cipher = BlockCipher(scheme)
    cipher.register(fgrp, derive_seed(scheme, "bench-key", str(fgrp),
                                      str(config.seed)))
    storage = StorageServer(fabric, registry, scheme, StableStore(),
                            lhash=None)
    fabric.register(StorageServer.NAME, storage)
    vm = VolumeManager("bench-fs", fabric, registry, scheme, cipher,
                       StableStore(), seed_label="bench", mode=vm_mode,
                       threshold=config.threshold,
                       timeout=config.flush_timeout, lhash=None)

    rng = random.Random(config.seed)
    # One inode per file, spread over the subdirectories; the store stream
    # appends one write_size block per transaction to a random file.
    slots = [InodeNumber(1, uid,
                         ((i % config.subdirectories) << 24)
                         | (i // config.subdirectories) + 1)
             for i in range(config.files)]
    oracle: dict[bytes, dict[int, int]] = {}
    histogram: dict[int, int] = {}
    spikes = 0
    for _ in range(config.transactions):
        ino = slots[rng.randrange(config.files)]
        payload = rng.randbytes(config.write_size)
        before = clock.now
        granted0 = vm.counters["batches_granted"]
        blknum, ciphertext = vm.prepare_store(payload, fgrp)
        vm.submit_store(blknum, ciphertext, ino, uid)
        vm.run_due(clock.now)
        lat = clock.now - before
        histogram[lat] = histogram.get(lat, 0) + 1
        if vm.counters["batches_granted"] > granted0:
            spikes += 1
        counts = oracle.setdefault(blknum, {})
        apply_count(counts, uid, OpKind.STORE)
    batches_in_loop = vm.counters["batches_granted"]
    if vm_mode == "async":
        vm.flush(uid)   # cover any final partial batch

    invariants = _bench_invariants(vm, storage, oracle, scheme)
    return BenchReport(mode=mode, ops_total=config.transactions,
                       counters=dict(vm.counters), histogram=histogram,
                       spike_count=spikes,
                       batches_completed=batches_in_loop,
                       blocks_live=len(storage.blocks),
                       invariants=invariants)


def _bench_invariants(vm, storage, oracle, scheme) -> list:
    out = []
    server_counts = {blk: dict(c) for blk, c in storage.per_uid.items() if c}
    want = {blk: c for blk, c in oracle.items() if c}
    out.append(("per-uid-counts", server_counts == want,
                f"{len(server_counts)} blocks"))
    tree = MerkleMap(scheme)
    for blk, counts in want.items():
        tree.put(blk, pattern_bytes(counts))
    out.append(("count-tree-root", tree.root() == storage.tree.root(), ""))
    out.append(("quiesced", vm.quiesced() and not storage.has_pending(), ""))
    return out


# -- churn / pruning ------------------------------------------------------------


@dataclass
class ChurnReport:
    blocks: int
    ops_total: int
    agreed: bool
    pre: dict
    post: dict
    blocks_live: int
    vault_bytes_saved: int

    def bound_ok(self) -> bool:
        """Post-prune user evidence is one signed agreement record whose
        user leaves never exceed the live block set."""
        return (self.agreed and self.post["records"] == 1
                and self.post["user_leaves"] <= self.blocks
                and self.post["pending_receipts"] == 0)

    def to_text(self) -> str:
        lines = [f"churn {self.blocks} blocks, {self.ops_total} ops: "
                 f"{'agreement reached' if self.agreed else 'DIVERGED'}"]
        lines.append(f"  pre-prune : {self.pre['records']} vault records, "
                     f"{self.pre['bytes']} bytes, "
                     f"{self.pre['pending_receipts']} receipts")
        lines.append(f"  post-prune: {self.post['records']} record, "
                     f"{self.post['bytes']} bytes, "
                     f"{self.post['user_leaves']} user leaves + "
                     f"{self.post['system_leaves']} system leaves")
        lines.append(f"  bound: user leaves {self.post['user_leaves']} "
                     f"<= {self.blocks} live blocks: "
                     f"{'ok' if self.bound_ok() else 'FAIL'}")
        return "\n".join(lines)

    def to_dict(self) -> dict:
        return {"blocks": self.blocks, "ops_total": self.ops_total,
                "agreed": self.agreed, "pre": self.pre, "post": self.post,
                "blocks_live": self.blocks_live,
                "vault_bytes_saved": self.vault_bytes_saved,
                "bound_ok": self.bound_ok()}


def run_churn(blocks: int = 100, ops: int = 1000,
              seed: int = 7) -> ChurnReport:
    if blocks <= 0 or ops < blocks:
        raise ScenarioError("churn needs ops >= blocks > 0")
    uid, fgrp = 9, 5
    scheme = HashScheme()
    clock = LogicalClock()
    fabric = Fabric(clock, CostMeter(clock), TraceLog(clock), FaultPlan())
    registry = KeyRegistry()
    for principal in (uid, LHASH_PRINCIPAL, STORAGE_PRINCIPAL):
        registry.register_signer(principal,
                                 derive_seed(scheme, "churn-signer",
                                             str(principal), str(seed)))
    lhash_cipher = BlockCipher(scheme)
    lhash_cipher.register(ITBL_FGRP, derive_seed(scheme, "churn-key", "itbl",
                                                 str(seed)))
    lhash_cipher.register(1, derive_seed(scheme, "churn-key", "root",
                                         str(seed)))
    cipher = BlockCipher(scheme)
    cipher.register(fgrp, derive_seed(scheme, "churn-key", str(fgrp),
                                      str(seed)))

    storage = StorageServer(fabric, registry, scheme, StableStore())
    fabric.register(StorageServer.NAME, storage)
    lhash = LhashServer(fabric, registry, scheme, lhash_cipher, StableStore())
    fabric.register(LhashServer.NAME, lhash)
    lhash.configure_fgrps({1: ([], [])}, {})
    lhash.boot()
    vm = VolumeManager("churn-fs", fabric, registry, scheme, cipher,
                       StableStore(), seed_label="churn", mode="async")

    rng = random.Random(seed)
    live: list[tuple[bytes, bytes]] = []   # (blknum, plaintext) per slot
    issued = 0
    for s in range(blocks):
        payload = rng.randbytes(256)
        blknum = vm.vm_write(payload, InodeNumber(1, uid, s + 1), uid, fgrp)
        live.append((blknum, payload))
        vm.run_due(clock.now)
        issued += 1
    pairs = (ops - blocks) // 2
    for _ in range(pairs):
        s = rng.randrange(blocks)
        ino = InodeNumber(1, uid, s + 1)
        blknum, payload = live[s]
        if rng.random() < 0.25:
            # Amplification: store the identical block again, free it again.
            # Convergent naming makes it the same block either time.
            vm.vm_write(payload, ino, uid, fgrp)
            vm.vm_free(blknum, ino, uid)
        else:
            vm.vm_free(blknum, ino, uid)
            fresh = rng.randbytes(256)
            live[s] = (vm.vm_write(fresh, ino, uid, fgrp), fresh)
        issued += 2
        vm.run_due(clock.now)

    _settle(clock, (vm, lhash.vm), storage, timeout=1000)
    pre = lhash.vault_stats()
    outcome = lhash.prune_round()
    post = lhash.vault_stats()
    return ChurnReport(blocks=blocks, ops_total=issued,
                       agreed=outcome.agreed, pre=pre, post=post,
                       blocks_live=len(storage.blocks),
                       vault_bytes_saved=pre["bytes"] - post["bytes"])


def _settle(clock, vms, storage, timeout: int) -> None:
    for _ in range(64):
        if (all(vm.quiesced() for vm in vms)
                and not storage.has_pending()):
            return
        clock.advance(timeout)
        for vm in vms:
            vm.run_due(clock.now)
        storage.poll(clock.now)
    raise ScenarioError("churn run failed to quiesce")
