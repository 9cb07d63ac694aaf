"""Shared builders for protocol-level tests.

Most tests drive one server or a server/client pair without the full
deployment; these helpers wire the fabric, keys and stable stores the same
way the harness does, so behavior under test matches behavior in scenarios.
"""

from __future__ import annotations

from safius.crypto import BlockCipher, HashScheme, KeyRegistry, derive_seed
from safius.ids import LHASH_PRINCIPAL, STORAGE_PRINCIPAL
from safius.lhash import FgrpHashRep, FgrpLookup, FgrpRep
from safius.sim import CostMeter, Fabric, FaultPlan, LogicalClock, TraceLog
from safius.stable import StableStore
from safius.storage import StorageServer
from safius.volume import VolumeManager


def make_fabric(plan: FaultPlan | None = None) -> Fabric:
    clock = LogicalClock()
    return Fabric(clock, CostMeter(clock), TraceLog(clock),
                  plan or FaultPlan())


def make_registry(scheme: HashScheme, uids, label: str) -> KeyRegistry:
    registry = KeyRegistry()
    for uid in (*uids, STORAGE_PRINCIPAL, LHASH_PRINCIPAL):
        registry.register_signer(uid, derive_seed(scheme, label, str(uid)))
    return registry


class FgrpStub:
    """Minimal membership oracle standing in for the l-hash server, so the
    storage server can resolve cross-uid access without the full stack."""

    def __init__(self, scheme: HashScheme,
                 table: dict[int, tuple[set[int], set[int]]]):
        self.scheme = scheme
        self.table = table  # fgrp -> (writers, readers)

    def fgrp_for(self, ino) -> int | None:
        # Inode sequence numbers in these tests carry the fgrp in the low
        # byte; good enough for a stub.
        fgrp = ino.seq & 0xFF
        return fgrp if fgrp in self.table else None

    def handle(self, src: str, msg):
        if isinstance(msg, FgrpLookup):
            fgrp = self.fgrp_for(msg.ino)
            if fgrp is None:
                return FgrpRep(fgrp=None, writers=(), readers=(),
                               incarnation=0)
            writers, readers = self.table[fgrp]
            return FgrpRep(fgrp=fgrp, writers=tuple(sorted(writers)),
                           readers=tuple(sorted(readers)), incarnation=1)
        return FgrpHashRep(fgrphash=self.scheme.digest(b"stub-fgrp"),
                           incarnation=1)


def storage_kit(uids=(7,), fgrps=None, label="kit", deadline=2000,
                plan=None, mode="async", threshold=1000, timeout=1000):
    """Standalone storage server plus one volume manager per uid.

    With `fgrps` given ({fgrp: (writers, readers)}) an FgrpStub is wired in
    and cross-uid access checks resolve against it; without it the server
    only admits owners.
    """
    scheme = HashScheme()
    fabric = make_fabric(plan)
    registry = make_registry(scheme, uids, label)
    cipher = BlockCipher(scheme)
    keyed = set(fgrps) if fgrps else {3}
    for fgrp in keyed:
        cipher.register(fgrp, derive_seed(scheme, label, "key", str(fgrp)))
    lhash_name = "lhash" if fgrps else None
    server = StorageServer(fabric, registry, scheme, StableStore(),
                           lhash=lhash_name, pending_deadline=deadline)
    fabric.register(StorageServer.NAME, server)
    if fgrps:
        fabric.register("lhash", FgrpStub(scheme, fgrps))
    vms = {uid: VolumeManager(f"fs{uid}", fabric, registry, scheme, cipher,
                              StableStore(), seed_label=f"{label}.{uid}",
                              mode=mode, threshold=threshold,
                              timeout=timeout, lhash=None)
           for uid in uids}
    return fabric, server, vms
