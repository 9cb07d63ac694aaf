"""The lock and hash server: the small trusted core of the system.

It keeps four things, and only four, in trusted stable storage: the lock
table's durable side (nothing -- locks are soft state), the root Idata of
the inode table file, filegroup membership plus key material, and the
receipt vault with its signature-pruning refcount tree.  The inode table's
*contents* live on the untrusted store as an ordinary copy-on-write file;
the server reads them back through the same integrity gate every
fileserver uses, so its trusted footprint stays a few hundred bytes.

Commits arrive as multi-inode version switches and are made atomic with a
write-ahead log: stage the new table blocks (intent records first), flip
root plus transaction memory plus freed-inode lists in one stable write,
then issue the frees with idempotency tags.  Recovery replays that dance
from whichever point it died at.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

from . import blockfile
from .audit import Dispute, DisputeKind, VaultEvidence
from .counts import apply_count, decode_pattern, pattern_bytes
from .crypto import BlockCipher, HashScheme, KeyRegistry, MerkleMap
from .errors import (
    BadSignature,
    Busy,
    DeadlockTimeout,
    LockNotHeld,
    PermissionDenied,
    ProtocolError,
    StaleFileHandle,
    StaleTxid,
)
from .ids import (
    ITBL_FGRP,
    ITBL_INO,
    LHASH_PRINCIPAL,
    ROOT_INO,
    STORAGE_PRINCIPAL,
    Idata,
    InodeNumber,
    OpKind,
    PairOp,
)
from .messages import (
    ByteReader,
    ByteWriter,
    GrantBatch,
    SignedGrant,
    StoreInodeDataMsg,
    decode,
)
from .sim import Fabric
from .stable import StableStore
from .storage import PruneAgree, PruneDivergent, PruneLeaves, PruneRequest
from .volume import VolumeManager

LOCK_S, LOCK_X = 1, 2

_ITBL_REC = 64          # fixed-width inode table record
_FLAG_UNLINKED = 0x01

WAL = "lh.wal"
VAULT = "lh.vault"

# WAL record kinds.
_W_BEGIN, _W_STAGED, _W_DONE, _W_INTENT = 1, 2, 3, 4
# Vault record kinds.
_V_GRANT, _V_AGREEMENT = 1, 2


# -- wire types (plain objects over the fabric) -------------------------------

@dataclass(frozen=True)
class Ack:
    pass


@dataclass(frozen=True)
class AcquireLock:
    ino: InodeNumber
    mode: int
    uid: int
    open: bool = False     # register an open handle alongside the lock


@dataclass(frozen=True)
class LockRep:
    idata: Idata | None    # None: no committed version exists
    unlinked: bool = False


@dataclass(frozen=True)
class CloseNotice:
    ino: InodeNumber


@dataclass(frozen=True)
class CloseRep:
    # True: the closer was the last holder of an unlinked file and must now
    # run the deletion transaction.
    delete_now: bool = False


@dataclass(frozen=True)
class ReleaseLock:
    ino: InodeNumber


@dataclass(frozen=True)
class DowngradeReq:
    """Sent by the lock server to a holder; the holder commits dirty state
    and releases, or refuses because the inode is mid-operation."""

    ino: InodeNumber


@dataclass(frozen=True)
class DowngradeRep:
    released: bool


@dataclass(frozen=True)
class Mount:
    node: int


@dataclass(frozen=True)
class MountRep:
    root: Idata
    freed: tuple[int, ...]    # packed inode numbers returned to this node
    orphans: tuple[int, ...]  # unlinked inodes this node must finish deleting


@dataclass(frozen=True)
class LastTxid:
    pass


@dataclass(frozen=True)
class TxidRep:
    txid: int


@dataclass(frozen=True)
class CommitReq:
    uid: int
    msg: StoreInodeDataMsg


@dataclass(frozen=True)
class CommitRep:
    replay: bool = False
    # Unlinked inodes with no registered opens anywhere: the committing
    # fileserver must run their deletion transactions itself.
    delete_now: tuple[int, ...] = ()


@dataclass(frozen=True)
class PersistGrant:
    envelope: bytes


@dataclass(frozen=True)
class FgrpLookup:
    ino: InodeNumber


@dataclass(frozen=True)
class FgrpRep:
    fgrp: int | None
    writers: tuple[int, ...]
    readers: tuple[int, ...]
    incarnation: int


@dataclass(frozen=True)
class FgrpHashReq:
    pass


@dataclass(frozen=True)
class FgrpHashRep:
    fgrphash: bytes
    incarnation: int


@dataclass(frozen=True)
class FgrpUpdate:
    ino: InodeNumber
    fgrp: int
    uid: int


# -- lock table ---------------------------------------------------------------

@dataclass
class _Lock:
    mode: int
    holders: set[str] = field(default_factory=set)
    waiting_since: dict[str, int] = field(default_factory=dict)


class LockTable:
    """Soft-state shared/exclusive locks.  Contended acquires ask current
    holders to downgrade through a callback the server routes; a refusal
    parks the requester (Busy) until its deadline expires (DeadlockTimeout)."""

    def __init__(self, ask_downgrade, deadline: int = 10_000):
        self.locks: dict[int, _Lock] = {}
        self.ask_downgrade = ask_downgrade   # (holder, ino) -> bool
        self.deadline = deadline

    def acquire(self, ino: InodeNumber, mode: int, fs: str, now: int) -> None:
        key = ino.pack()
        lk = self.locks.get(key)
        if lk is None:
            self.locks[key] = _Lock(mode=mode, holders={fs})
            return
        if fs in lk.holders and len(lk.holders) == 1:
            lk.mode = max(lk.mode, mode)   # upgrade, or already sufficient
            lk.waiting_since.pop(fs, None)
            return
        if mode == LOCK_S and lk.mode == LOCK_S:
            lk.holders.add(fs)
            lk.waiting_since.pop(fs, None)
            return
        # Contended: every other holder must let go first.
        for other in sorted(lk.holders - {fs}):
            if self.ask_downgrade(other, ino):
                lk.holders.discard(other)
        if not lk.holders or lk.holders == {fs}:
            lk.holders.add(fs)
            lk.mode = mode
            lk.waiting_since.pop(fs, None)
            return
        first = lk.waiting_since.setdefault(fs, now)
        if now - first >= self.deadline:
            lk.waiting_since.pop(fs, None)
            raise DeadlockTimeout(f"ino {ino} mode {mode} after {now - first}")
        raise Busy(f"ino {ino} held by {sorted(lk.holders)}")

    def release(self, ino: InodeNumber, fs: str) -> None:
        key = ino.pack()
        lk = self.locks.get(key)
        if lk is None or fs not in lk.holders:
            return
        lk.holders.discard(fs)
        if not lk.holders:
            del self.locks[key]

    def require_x(self, ino: InodeNumber, fs: str) -> None:
        lk = self.locks.get(ino.pack())
        if lk is None or lk.mode != LOCK_X or lk.holders != {fs}:
            raise LockNotHeld(f"{fs} lacks exclusive lock on {ino}")


# -- inode table records -------------------------------------------------------

def _encode_itbl_record(ino: InodeNumber, idata: Idata, flags: int,
                        origin: int) -> bytes:
    w = ByteWriter()
    w.u64(ino.pack())
    w.raw(idata.inode_hash.ljust(32, b"\x00"))
    w.u64(idata.incarnation)
    w.u8(flags)
    w.u16(origin)
    raw = w.bytes()
    return raw.ljust(_ITBL_REC, b"\x00")


def _decode_itbl_record(raw: bytes, width: int):
    r = ByteReader(raw, "itbl_record")
    packed = r.u64("itbl.ino")
    if packed == 0:
        return None
    padded = r.take(32, "itbl.hash")
    inc = r.u64("itbl.incarnation")
    flags = r.u8("itbl.flags")
    origin = r.u16("itbl.origin")
    return (InodeNumber.unpack(packed),
            Idata(inode_hash=padded[:width], incarnation=inc), flags, origin)


@dataclass
class _Entry:
    idata: Idata
    flags: int = 0
    origin: int = 0


# -- the server -----------------------------------------------------------------

class LhashServer:
    NAME = "lhash"

    def __init__(self, fabric: Fabric, registry: KeyRegistry,
                 scheme: HashScheme, cipher: BlockCipher, stable: StableStore,
                 root_fgrp: int = 1, mode: str = "async",
                 flush_threshold: int = 1000, flush_timeout: int = 1000,
                 lock_deadline: int = 10_000, storage: str = "storage"):
        self.fabric = fabric
        self.registry = registry
        self.scheme = scheme
        self.cipher = cipher
        self.stable = stable
        self.storage = storage
        self.root_fgrp = root_fgrp
        self.vm = VolumeManager(self.NAME, fabric, registry, scheme, cipher,
                                stable, seed_label="lhash", mode=mode,
                                threshold=flush_threshold,
                                timeout=flush_timeout, storage=storage,
                                lhash=self.NAME)
        self.locks = LockTable(self._ask_downgrade, deadline=lock_deadline)
        self.node_of: dict[str, int] = {}
        self.opens: dict[int, set[int]] = {}   # packed ino -> open nodes

        # Inode table working state, rebuilt at boot from the pinned root.
        self.entries: dict[int, _Entry] = {}
        self.slot_of: dict[int, int] = {}
        self.free_slots: list[int] = []
        self.nslots = 0
        self.itbl_image: blockfile.FileImage | None = None
        self.itbl_root: Idata | None = None

        self.txmem: dict[str, int] = {}
        self.freed: dict[int, list[int]] = {}   # node -> packed inos

        # Filegroup state: definitions, assignments, one incarnation counter.
        self.fgrp_defs: dict[int, tuple[frozenset, frozenset]] = {}
        self.fgrp_assign: dict[int, int] = {}   # packed ino -> fgrp
        self.fgrp_inc = 0
        self.fgrp_tree = MerkleMap(scheme)

        # Vault working state.
        self.refcnt_tree = MerkleMap(scheme)
        self.vault_per_uid: dict[bytes, dict[int, int]] = {}
        self.baseline: dict[bytes, bytes] = {}   # leaves at last agreement
        self.deltas: list[tuple[int, bytes, OpKind]] = []  # applied since
        self.hwm: dict[tuple[int, int], int] = {}  # (principal, nonce) -> count
        self.flags: list[str] = []
        self.disputes = self.vm.disputes   # shared dispute list
        self._pending_cfg: dict[int, tuple[list[int], list[int]]] = {}

    # -- boot ------------------------------------------------------------------

    def boot(self) -> None:
        self._load_meta()
        # The receipt vault must be live before anything can flush a grant,
        # or recovery-time grants would be replayed onto themselves.
        self._load_vault()
        # Configured groups are defaults; persisted state (which may hold
        # later redefinitions) wins on reboot.
        changed = False
        for fgrp in sorted(self._pending_cfg):
            if fgrp not in self.fgrp_defs:
                writers, readers = self._pending_cfg[fgrp]
                self.fgrp_defs[fgrp] = (frozenset(writers), frozenset(readers))
                self.fgrp_inc += 1
                changed = True
        if changed:
            self._persist_fgrp()
        self.vm.recover()
        self._wal_recover()
        if self.stable.get("lh.itbl.root") is None:
            self._mkfs()
        else:
            self._load_itbl()
        if ROOT_INO.pack() not in self.entries:
            self._mkfs_rootdir()   # resumes a first boot cut short

    def _load_meta(self) -> None:
        for key in self.stable.keys("lh.txmem."):
            self.txmem[key.rsplit(".", 1)[-1]] = self.stable.get_int(key)
        for key in self.stable.keys("lh.freed."):
            node = int(key.rsplit(".", 1)[-1])
            self.freed[node] = _decode_ino_list(self.stable.get(key))
        raw = self.stable.get("lh.fgrp")
        if raw is not None:
            self._decode_fgrp(raw)
        raw = self.stable.get("lh.hwm")
        if raw is not None:
            r = ByteReader(raw, "hwm")
            for _ in range(r.u32("hwm.n")):
                value = r.u64("hwm.value")
                principal = r.u32("hwm.principal")
                count = r.u64("hwm.count")
                self.hwm[(principal, value)] = count
            r.done()

    def configure_fgrps(self, defs: dict[int, tuple[list[int], list[int]]],
                        keys: dict[int, bytes]) -> None:
        """Stage filegroup definitions and keys before boot().  Keys install
        now; definitions merge at boot so persisted redefinitions survive a
        restart.  Installing a new definition bumps the sharing incarnation."""
        self._pending_cfg.update(defs)
        for fgrp in sorted(keys):
            self.cipher.register(fgrp, keys[fgrp])

    def redefine_fgrp(self, fgrp: int, writers: list[int],
                      readers: list[int]) -> None:
        self.fgrp_defs[fgrp] = (frozenset(writers), frozenset(readers))
        self.fgrp_inc += 1
        self._persist_fgrp()
        self.fabric.trace.emit(self.NAME, "fgrp",
                               f"redefine {fgrp} inc={self.fgrp_inc}")

    # -- fabric dispatch ---------------------------------------------------------

    def handle(self, src: str, msg):
        if isinstance(msg, AcquireLock):
            return self._acquire(src, msg)
        if isinstance(msg, ReleaseLock):
            self.locks.release(msg.ino, src)
            return Ack()
        if isinstance(msg, CloseNotice):
            return self._close(src, msg)
        if isinstance(msg, Mount):
            return self._mount(src, msg)
        if isinstance(msg, LastTxid):
            return TxidRep(txid=self.txmem.get(src, 0))
        if isinstance(msg, CommitReq):
            return self._store_inode_data(src, msg)
        if isinstance(msg, PersistGrant):
            return self._persist_grant(msg.envelope)
        if isinstance(msg, FgrpLookup):
            return self._fgrp_lookup(msg.ino)
        if isinstance(msg, FgrpHashReq):
            return FgrpHashRep(fgrphash=self.fgrphash(),
                               incarnation=self.fgrp_inc)
        if isinstance(msg, FgrpUpdate):
            return self._fgrp_update(msg)
        raise ProtocolError(f"lhash cannot handle {type(msg).__name__}")

    # -- locks --------------------------------------------------------------------

    def _ask_downgrade(self, holder: str, ino: InodeNumber) -> bool:
        try:
            rep = self.fabric.send(self.NAME, holder, DowngradeReq(ino=ino))
        except ProtocolError:
            return True   # a dead holder keeps no locks
        return bool(rep.released)

    def _acquire(self, fs: str, msg: AcquireLock) -> LockRep:
        key = msg.ino.pack()
        node = self.node_of.get(fs)
        entry = self.entries.get(key)
        unlinked = entry is not None and bool(entry.flags & _FLAG_UNLINKED)
        if unlinked:
            holders = self.opens.get(key, set())
            # An unlinked file stays reachable for whoever still holds it
            # open (snapshot semantics) and for the node that must reap it.
            if holders and node not in holders and node != entry.origin:
                raise StaleFileHandle(f"{msg.ino} unlinked")
        self._check_lock_perm(msg.ino, msg.uid, msg.mode)
        self.locks.acquire(msg.ino, msg.mode, fs, self.fabric.clock.now)
        if msg.open and node is not None:
            self.opens.setdefault(key, set()).add(node)
        self.fabric.trace.emit(self.NAME, "lock",
                               f"{fs} {'S' if msg.mode == LOCK_S else 'X'} "
                               f"{msg.ino}")
        return LockRep(idata=entry.idata if entry else None,
                       unlinked=unlinked)

    def _close(self, fs: str, msg: CloseNotice) -> CloseRep:
        key = msg.ino.pack()
        node = self.node_of.get(fs)
        holders = self.opens.get(key)
        if holders is not None:
            holders.discard(node)
            if not holders:
                del self.opens[key]
        entry = self.entries.get(key)
        delete_now = (entry is not None
                      and bool(entry.flags & _FLAG_UNLINKED)
                      and not self.opens.get(key))
        return CloseRep(delete_now=delete_now)

    def _check_lock_perm(self, ino: InodeNumber, uid: int, mode: int) -> None:
        if uid == ino.owner or uid == LHASH_PRINCIPAL:
            return
        fgrp = self.fgrp_assign.get(ino.pack())
        if fgrp is None:
            raise PermissionDenied(f"uid {uid} on unshared {ino}")
        writers, readers = self.fgrp_defs.get(fgrp, (frozenset(), frozenset()))
        entry = self.entries.get(ino.pack())
        if entry is not None and entry.flags & _FLAG_UNLINKED:
            # Reaping an unlinked file is finalization, not authorship: the
            # last closer may be a reader, and it needs the exclusive lock.
            allowed = writers | readers
        else:
            allowed = writers if mode == LOCK_X else (writers | readers)
        if uid not in allowed:
            raise PermissionDenied(f"uid {uid} mode {mode} on {ino}")

    # -- mount / filegroups ----------------------------------------------------------

    def _mount(self, fs: str, msg: Mount) -> MountRep:
        self.node_of[fs] = msg.node
        root = self.entries.get(ROOT_INO.pack())
        if root is None:
            raise ProtocolError("no root directory; mkfs has not run")
        freed = tuple(self.freed.pop(msg.node, []))
        if freed:
            self.stable.delete(f"lh.freed.{msg.node}")
        # Unlinked files whose reaper died before deleting: the open handles
        # died with the node, so deletion falls to it at mount.
        orphans = tuple(sorted(
            key for key, e in self.entries.items()
            if e.flags & _FLAG_UNLINKED and e.origin == msg.node
            and not self.opens.get(key)))
        self.fabric.trace.emit(self.NAME, "mount",
                               f"{fs} node={msg.node} freed={len(freed)} "
                               f"orphans={len(orphans)}")
        return MountRep(root=root.idata, freed=freed, orphans=orphans)

    def _fgrp_lookup(self, ino: InodeNumber) -> FgrpRep:
        fgrp = self.fgrp_assign.get(ino.pack())
        if fgrp is None:
            return FgrpRep(fgrp=None, writers=(), readers=(),
                           incarnation=self.fgrp_inc)
        writers, readers = self.fgrp_defs.get(fgrp, (frozenset(), frozenset()))
        return FgrpRep(fgrp=fgrp, writers=tuple(sorted(writers)),
                       readers=tuple(sorted(readers)),
                       incarnation=self.fgrp_inc)

    def _fgrp_update(self, msg: FgrpUpdate) -> Ack:
        if msg.uid != msg.ino.owner:
            raise PermissionDenied(f"uid {msg.uid} cannot assign {msg.ino}")
        if msg.fgrp not in self.fgrp_defs:
            raise ProtocolError(f"unknown filegroup {msg.fgrp}")
        current = self.fgrp_assign.get(msg.ino.pack())
        if current == msg.fgrp:
            return Ack()
        if current is not None:
            # The group fixes the cipher key; a file never changes groups.
            raise ProtocolError(f"{msg.ino} already in filegroup {current}")
        self._assign_fgrp(msg.ino, msg.fgrp)
        return Ack()

    def _assign_fgrp(self, ino: InodeNumber, fgrp: int) -> None:
        self.fgrp_assign[ino.pack()] = fgrp
        self.fgrp_tree.put(ino.pack().to_bytes(8, "little"),
                           fgrp.to_bytes(4, "little"))
        self.fgrp_inc += 1
        self._persist_fgrp()

    def fgrphash(self) -> bytes:
        return self.scheme.digest_parts(self.fgrp_tree.root(),
                                        self.fgrp_inc.to_bytes(8, "little"))

    def _persist_fgrp(self) -> None:
        w = ByteWriter()
        w.u64(self.fgrp_inc)
        w.u32(len(self.fgrp_defs))
        for fgrp in sorted(self.fgrp_defs):
            writers, readers = self.fgrp_defs[fgrp]
            w.u32(fgrp)
            w.u32(len(writers))
            for u in sorted(writers):
                w.u32(u)
            w.u32(len(readers))
            for u in sorted(readers):
                w.u32(u)
        w.u32(len(self.fgrp_assign))
        for packed in sorted(self.fgrp_assign):
            w.u64(packed)
            w.u32(self.fgrp_assign[packed])
        self.stable.put("lh.fgrp", w.bytes())

    def _decode_fgrp(self, raw: bytes) -> None:
        r = ByteReader(raw, "fgrp")
        self.fgrp_inc = r.u64("fgrp.inc")
        for _ in range(r.u32("fgrp.ndefs")):
            fgrp = r.u32("fgrp.id")
            writers = frozenset(r.u32("fgrp.w") for _ in range(r.u32("fgrp.nw")))
            readers = frozenset(r.u32("fgrp.r") for _ in range(r.u32("fgrp.nr")))
            self.fgrp_defs[fgrp] = (writers, readers)
        for _ in range(r.u32("fgrp.nassign")):
            packed = r.u64("fgrp.ino")
            fgrp = r.u32("fgrp.fgrp")
            self.fgrp_assign[packed] = fgrp
            self.fgrp_tree.put(packed.to_bytes(8, "little"),
                               fgrp.to_bytes(4, "little"))
        r.done()

    # -- inode table ------------------------------------------------------------------

    def _itbl_store_fn(self, new_blocks: list[bytes]):
        def store(plain: bytes) -> bytes:
            blknum, ct = self.vm.prepare_store(plain, ITBL_FGRP)
            w = ByteWriter()
            w.digest(blknum)
            self.stable.append(WAL, _wal_rec(_W_INTENT, w.bytes()))
            self.vm.submit_store(blknum, ct, ITBL_INO, LHASH_PRINCIPAL)
            new_blocks.append(blknum)
            return blknum
        return store

    def _alloc_slot(self) -> int:
        if self.free_slots:
            self.free_slots.sort()
            return self.free_slots.pop(0)
        slot = self.nslots
        self.nslots += 1
        return slot

    def _store_inode_data(self, fs: str, req: CommitReq) -> CommitRep:
        msg = req.msg
        last = self.txmem.get(fs, 0)
        if msg.txid <= last:
            return CommitRep(replay=True)
        if msg.txid != last + 1:
            raise StaleTxid(f"{fs} sent {msg.txid}, expected {last + 1}")
        node = self.node_of.get(fs)
        if node is None:
            raise ProtocolError(f"{fs} committed before mounting")
        for pair in msg.pairs:
            self.locks.require_x(pair.ino, fs)
            self._check_pair_perm(pair.ino, req.uid, pair.op)
            entry = self.entries.get(pair.ino.pack())
            prev_inc = entry.idata.incarnation if entry else 0
            if pair.idata.incarnation != prev_inc + 1:
                raise ProtocolError(
                    f"incarnation skew on {pair.ino}: "
                    f"{pair.idata.incarnation} after {prev_inc}")
            if pair.op in (PairOp.UNLINK, PairOp.DELETE) and entry is None:
                raise ProtocolError(f"{pair.op.name} of unknown {pair.ino}")
            if pair.op == PairOp.UNLINK \
                    and pair.idata.inode_hash != entry.idata.inode_hash:
                raise ProtocolError("unlink must carry the committed version")
        # Pin each unlink's reaper: the lowest node holding the file open,
        # or the committer when nobody does (it then deletes immediately).
        rewritten = []
        delete_now = []
        for pair in msg.pairs:
            if pair.op == PairOp.UNLINK:
                holders = self.opens.get(pair.ino.pack())
                origin = min(holders) if holders else node
                rewritten.append(replace(pair, origin=origin))
                if not holders:
                    delete_now.append(pair.ino.pack())
            else:
                rewritten.append(pair)
        self._sid_apply(fs, StoreInodeDataMsg(txid=msg.txid,
                                              pairs=tuple(rewritten)))
        return CommitRep(replay=False, delete_now=tuple(delete_now))

    def _check_pair_perm(self, ino: InodeNumber, uid: int,
                         op: PairOp) -> None:
        if uid == ino.owner or uid == LHASH_PRINCIPAL:
            return
        fgrp = self.fgrp_assign.get(ino.pack())
        writers, readers = (self.fgrp_defs.get(fgrp,
                                               (frozenset(), frozenset()))
                            if fgrp is not None
                            else (frozenset(), frozenset()))
        entry = self.entries.get(ino.pack())
        if (op == PairOp.DELETE and entry is not None
                and entry.flags & _FLAG_UNLINKED):
            allowed = writers | readers   # reader reaping its last close
        else:
            allowed = writers
        if uid not in allowed:
            raise PermissionDenied(f"uid {uid} cannot update {ino}")

    def _sid_apply(self, fs: str, msg: StoreInodeDataMsg) -> None:
        w = ByteWriter()
        _w_str(w, fs)
        w.u64(msg.txid)
        w.blob(msg.encode())
        self.stable.append(WAL, _wal_rec(_W_BEGIN, w.bytes()))
        self.fabric.crashpoint(self.NAME, "lhash.sid.wal",
                               fs=fs, txid=msg.txid)

        new_blocks: list[bytes] = []
        store = self._itbl_store_fn(new_blocks)
        commit_frees: list[bytes] = []
        freed_nodes: list[tuple[int, int]] = []
        image = self.itbl_image
        assert image is not None

        for pair in sorted(msg.pairs, key=lambda p: p.ino.pack()):
            key = pair.ino.pack()
            if pair.op == PairOp.DELETE:
                slot = self.slot_of.pop(key)
                self.entries.pop(key)
                self.opens.pop(key, None)
                self.free_slots.append(slot)
                freed_nodes.append((pair.ino.node, key))
                record = b"\x00" * _ITBL_REC
            else:
                slot = self.slot_of.get(key)
                if slot is None:
                    slot = self._alloc_slot()
                    self.slot_of[key] = slot
                flags = _FLAG_UNLINKED if pair.op == PairOp.UNLINK else 0
                self.entries[key] = _Entry(idata=pair.idata, flags=flags,
                                           origin=pair.origin)
                record = _encode_itbl_record(pair.ino, pair.idata, flags,
                                             pair.origin)
            replaced = blockfile.write_range(self.vm, self.scheme, image,
                                             slot * _ITBL_REC, record, store)
            for old, _new in replaced:
                if old is not None:
                    commit_frees.append(old)
        self.fabric.crashpoint(self.NAME, "lhash.sid.blocks_stored",
                               fs=fs, txid=msg.txid)

        inode_bytes, interior_frees = blockfile.build(self.scheme, image, store)
        commit_frees.extend(interior_frees)
        new_root_blk = store(inode_bytes)
        old_root = self.itbl_root
        assert old_root is not None
        commit_frees.append(old_root.inode_hash)
        new_root = Idata(inode_hash=new_root_blk,
                         incarnation=old_root.incarnation + 1)

        w = ByteWriter()
        _w_str(w, fs)
        w.u64(msg.txid)
        w.digest(new_root.inode_hash)
        w.u64(new_root.incarnation)
        w.u32(len(commit_frees))
        for b in commit_frees:
            w.digest(b)
        w.u32(len(new_blocks))
        for b in new_blocks:
            w.digest(b)
        w.u32(len(freed_nodes))
        for node, packed in freed_nodes:
            w.u16(node)
            w.u64(packed)
        self.stable.append(WAL, _wal_rec(_W_STAGED, w.bytes()))
        self.fabric.crashpoint(self.NAME, "lhash.sid.staged",
                               fs=fs, txid=msg.txid)

        flips: dict[str, bytes] = {
            "lh.itbl.root": _encode_idata(new_root),
            f"lh.txmem.{fs}": msg.txid.to_bytes(8, "little"),
        }
        touched_nodes = sorted({node for node, _ in freed_nodes})
        for node in touched_nodes:
            lst = self.freed.setdefault(node, [])
            lst.extend(p for n, p in freed_nodes if n == node)
            flips[f"lh.freed.{node}"] = _encode_ino_list(lst)
        self.fabric.crashpoint(self.NAME, "lhash.sid.preflip",
                               fs=fs, txid=msg.txid)
        self.stable.put_many(flips)
        self.itbl_root = new_root
        self.txmem[fs] = msg.txid
        self.fabric.crashpoint(self.NAME, "lhash.sid.postflip",
                               fs=fs, txid=msg.txid)

        self._issue_frees(fs, msg.txid, commit_frees)
        self.fabric.crashpoint(self.NAME, "lhash.sid.frees",
                               fs=fs, txid=msg.txid)

        w = ByteWriter()
        _w_str(w, fs)
        w.u64(msg.txid)
        self.stable.append(WAL, _wal_rec(_W_DONE, w.bytes()))
        self.vm.forget_tags(f"lh:{fs}:{msg.txid}:".encode())
        self.stable.replace_log(WAL, [])
        self.fabric.crashpoint(self.NAME, "lhash.sid.done",
                               fs=fs, txid=msg.txid)
        self.fabric.trace.emit(self.NAME, "sid",
                               f"{fs} txid={msg.txid} pairs={len(msg.pairs)} "
                               f"root={new_root.inode_hash[:8].hex()}")

    def _issue_frees(self, fs: str, txid: int, frees: list[bytes]) -> None:
        for i, blk in enumerate(frees):
            tag = f"lh:{fs}:{txid}:{i}".encode()
            self.vm.vm_free(blk, ITBL_INO, LHASH_PRINCIPAL, tag=tag)

    # -- boot paths -----------------------------------------------------------------

    def _wal_recover(self) -> None:
        records = self.stable.records(WAL)
        if not records:
            return
        begun: dict[tuple[str, int], None] = {}
        staged: dict[tuple[str, int], dict] = {}
        done: set[tuple[str, int]] = set()
        intents: list[bytes] = []
        for raw in records:
            kind, body = _wal_parse(raw)
            r = ByteReader(body, "wal")
            if kind == _W_INTENT:
                intents.append(r.digest("wal.blknum"))
                continue
            fs = _r_str(r, "wal.fs")
            txid = r.u64("wal.txid")
            if kind == _W_BEGIN:
                begun[(fs, txid)] = None
            elif kind == _W_STAGED:
                staged[(fs, txid)] = {
                    "root": Idata(inode_hash=r.digest("wal.root"),
                                  incarnation=r.u64("wal.inc")),
                    "commit_frees": [r.digest("wal.cf")
                                     for _ in range(r.u32("wal.ncf"))],
                    "new_blocks": [r.digest("wal.nb")
                                   for _ in range(r.u32("wal.nnb"))],
                }
            elif kind == _W_DONE:
                done.add((fs, txid))
        if not begun and intents:
            # A first boot died between staging and pinning the table root;
            # nothing references these blocks.
            for i, blk in enumerate(intents):
                self.vm.vm_free(blk, ITBL_INO, LHASH_PRINCIPAL,
                                tag=f"lh-orphan:{i}".encode())
            self.vm.forget_tags(b"lh-orphan:")
        for (fs, txid) in sorted(begun):
            if (fs, txid) in done:
                continue
            flipped = self.stable.get_int(f"lh.txmem.{fs}", 0) >= txid
            if flipped:
                frees = staged[(fs, txid)]["commit_frees"]
            elif (fs, txid) in staged:
                frees = staged[(fs, txid)]["new_blocks"]
            else:
                frees = intents   # aborted mid-staging; intents name them all
            for i, blk in enumerate(frees):
                tag = (f"lh:{fs}:{txid}:{i}" if flipped
                       else f"lh-abort:{fs}:{txid}:{i}").encode()
                self.vm.vm_free(blk, ITBL_INO, LHASH_PRINCIPAL, tag=tag)
            self.fabric.trace.emit(
                self.NAME, "recover",
                f"{'finish' if flipped else 'abort'} {fs} txid={txid}")
            self.vm.forget_tags(f"lh:{fs}:{txid}:".encode())
            self.vm.forget_tags(f"lh-abort:{fs}:{txid}:".encode())
        self.stable.replace_log(WAL, [])

    def _mkfs(self) -> None:
        """First boot, step one: materialize an empty inode table.  The WAL
        is cleared before the root is pinned; dying in between strands the
        stored block (harmless garbage) rather than freeing a live one."""
        self.itbl_image = blockfile.new_image(
            blockfile.InodeMeta(kind=blockfile.KIND_FILE, fgrp=ITBL_FGRP))
        new_blocks: list[bytes] = []
        store = self._itbl_store_fn(new_blocks)
        inode_bytes, _ = blockfile.build(self.scheme, self.itbl_image, store)
        root_blk = store(inode_bytes)
        self.stable.replace_log(WAL, [])
        self.itbl_root = Idata(inode_hash=root_blk, incarnation=1)
        self.stable.put("lh.itbl.root", _encode_idata(self.itbl_root))

    def _mkfs_rootdir(self) -> None:
        """First boot, step two (idempotent): commit an empty root directory
        through the ordinary staged path."""
        root_dir = blockfile.new_image(
            blockfile.InodeMeta(kind=blockfile.KIND_DIR, fgrp=self.root_fgrp))
        dir_bytes, _ = blockfile.build(self.scheme, root_dir, lambda b: b"")
        dir_blk = self.vm.vm_write(dir_bytes, ROOT_INO, LHASH_PRINCIPAL,
                                   self.root_fgrp)
        if self.fgrp_assign.get(ROOT_INO.pack()) is None:
            self._assign_fgrp(ROOT_INO, self.root_fgrp)
        txid = self.txmem.get("@mkfs", 0) + 1
        sid = StoreInodeDataMsg(txid=txid, pairs=(
            _pair(ROOT_INO, Idata(inode_hash=dir_blk, incarnation=1)),))
        self._sid_apply("@mkfs", sid)
        self.fabric.trace.emit(self.NAME, "mkfs",
                               f"root={dir_blk[:8].hex()}")

    def _load_itbl(self) -> None:
        self.itbl_root = _decode_idata(self.stable.get("lh.itbl.root"))
        inode_block = self.vm.vm_read(self.itbl_root.inode_hash, ITBL_FGRP)
        self.itbl_image = blockfile.load_image(self.vm, self.scheme,
                                               inode_block)
        content = blockfile.read_range(self.vm, self.itbl_image, 0,
                                       self.itbl_image.meta.size)
        self.nslots = len(content) // _ITBL_REC
        for slot in range(self.nslots):
            raw = content[slot * _ITBL_REC:(slot + 1) * _ITBL_REC]
            parsed = _decode_itbl_record(raw, self.scheme.width)
            if parsed is None:
                self.free_slots.append(slot)
                continue
            ino, idata, flags, origin = parsed
            self.entries[ino.pack()] = _Entry(idata=idata, flags=flags,
                                              origin=origin)
            self.slot_of[ino.pack()] = slot

    # -- receipt vault -----------------------------------------------------------------

    def _persist_grant(self, envelope: bytes) -> Ack:
        msg = decode(envelope)
        if isinstance(msg, GrantBatch):
            if not self.registry.verify(
                    STORAGE_PRINCIPAL, msg.signing_digest(self.scheme),
                    msg.sig):
                self.flags.append("bad-server-sig")
                raise BadSignature("grant batch: server signature")
            inner = msg.inner
            if not self.registry.verify(
                    inner.header.uid, inner.signing_digest(self.scheme),
                    inner.sig):
                self.flags.append(f"bad-user-sig:{inner.header.uid}")
                raise BadSignature(f"batch request: uid {inner.header.uid}")
            uid = inner.header.uid
            entries = inner.entries
        elif isinstance(msg, SignedGrant):
            digest = self.scheme.digest(msg.grant.encode())
            if not self.registry.verify(STORAGE_PRINCIPAL, digest, msg.sig):
                self.flags.append("bad-server-sig")
                raise BadSignature("single grant: server signature")
            uid = msg.grant.inner.uid
            entries = (msg.grant.inner,)
        else:
            raise ProtocolError(f"not a grant: {type(msg).__name__}")

        applied: list[tuple[int, bytes, OpKind]] = []
        for entry in entries:
            skey = (entry.nonce.principal, entry.nonce.value)
            if entry.count <= self.hwm.get(skey, 0):
                continue   # duplicate of an already-persisted receipt
            self.hwm[skey] = entry.count
            counts = self.vault_per_uid.setdefault(entry.blknum, {})
            apply_count(counts, uid, entry.op)
            if counts:
                self.refcnt_tree.put(entry.blknum, pattern_bytes(counts))
            else:
                self.vault_per_uid.pop(entry.blknum)
                self.refcnt_tree.delete(entry.blknum)
            applied.append((uid, entry.blknum, entry.op))

        if applied:
            w = ByteWriter()
            w.blob(envelope)
            w.u32(len(applied))
            for auid, blknum, op in applied:
                w.u32(auid)
                w.digest(blknum)
                w.u8(int(op))
            self.stable.append(VAULT, _vault_rec(_V_GRANT, w.bytes()))
            self.deltas.extend(applied)
            self._persist_hwm()
        return Ack()

    def _persist_hwm(self) -> None:
        w = ByteWriter()
        w.u32(len(self.hwm))
        for (principal, value) in sorted(self.hwm):
            w.u64(value)
            w.u32(principal)
            w.u64(self.hwm[(principal, value)])
        self.stable.put("lh.hwm", w.bytes())

    def _load_vault(self) -> None:
        for raw in self.stable.records(VAULT):
            kind, body = _vault_parse(raw)
            r = ByteReader(body, "vault")
            if kind == _V_AGREEMENT:
                r.digest("vault.root")
                r.sig_bytes("vault.sig")
                self.baseline = {}
                for _ in range(r.u32("vault.nleaves")):
                    blknum = r.digest("vault.blknum")
                    self.baseline[blknum] = r.blob("vault.pattern")
                self.deltas = []
                self.refcnt_tree = MerkleMap(self.scheme)
                self.vault_per_uid = {}
                for blknum, pattern in self.baseline.items():
                    self.refcnt_tree.put(blknum, pattern)
                    self.vault_per_uid[blknum] = decode_pattern(pattern)
            else:
                r.blob("vault.envelope")
                for _ in range(r.u32("vault.napplied")):
                    uid = r.u32("vault.uid")
                    blknum = r.digest("vault.blknum")
                    op = OpKind(r.u8("vault.op"))
                    counts = self.vault_per_uid.setdefault(blknum, {})
                    apply_count(counts, uid, op)
                    if counts:
                        self.refcnt_tree.put(blknum, pattern_bytes(counts))
                    else:
                        self.vault_per_uid.pop(blknum)
                        self.refcnt_tree.delete(blknum)
                    self.deltas.append((uid, blknum, op))

    # -- signature pruning ------------------------------------------------------------

    def prune_round(self):
        """One root-agreement attempt with the storage server.  On agreement
        the vault collapses to a single co-signed snapshot; per-op receipts
        before it are discarded on both sides."""
        root = self.refcnt_tree.root()
        rep = self.fabric.send(self.NAME, self.storage, PruneRequest(root=root))
        if isinstance(rep, PruneAgree):
            if rep.root != root or not self.registry.verify(
                    STORAGE_PRINCIPAL, rep.root, rep.sig):
                self.flags.append("bad-prune-sig")
                raise BadSignature("prune agreement signature")
            leaves = self.refcnt_tree.items_sorted()
            w = ByteWriter()
            w.digest(root)
            w.sig_bytes(rep.sig.data)
            w.u32(len(leaves))
            for blknum, pattern in leaves:
                w.digest(blknum)
                w.blob(pattern)
            self.stable.replace_log(VAULT, [_vault_rec(_V_AGREEMENT,
                                                       w.bytes())])
            self.baseline = dict(leaves)
            self.deltas = []
            self.fabric.trace.emit(self.NAME, "prune",
                                   f"agree leaves={len(leaves)}")
            return PruneOutcome(agreed=True, leaves=len(leaves))
        rep2 = self.fabric.send(self.NAME, self.storage,
                                PruneLeaves(items=self.refcnt_tree.items_sorted()))
        assert isinstance(rep2, PruneDivergent)
        self.disputes.append(Dispute(kind=DisputeKind.REFCNT_MISMATCH,
                                     blknum=rep2.blknum))
        self.fabric.trace.emit(self.NAME, "prune",
                               f"diverge {rep2.blknum[:8].hex()}")
        return PruneOutcome(agreed=False, divergent=rep2.blknum,
                            leaves=len(self.refcnt_tree))

    def vault_stats(self) -> dict:
        records = self.stable.records(VAULT)
        # Leaves naming only this server's principal are bookkeeping for the
        # inode table's own blocks: a constant-size floor, not per-user
        # evidence.  Reported separately so space bounds can be stated
        # against the user-visible evidence.
        user = sum(1 for counts in self.vault_per_uid.values()
                   if any(uid != LHASH_PRINCIPAL for uid in counts))
        return {
            "records": len(records),
            "bytes": sum(len(r) for r in records),
            "leaves": len(self.refcnt_tree),
            "user_leaves": user,
            "system_leaves": len(self.refcnt_tree) - user,
            "pending_receipts": len(self.deltas),
        }

    def evidence(self) -> VaultEvidence:
        return VaultEvidence(
            agreement_leaves={blknum: decode_pattern(pattern)
                              for blknum, pattern in self.baseline.items()},
            grant_entries=list(self.deltas),
        )


@dataclass
class PruneOutcome:
    agreed: bool
    leaves: int = 0
    divergent: bytes | None = None


# -- small encodings ------------------------------------------------------------

def _pair(ino: InodeNumber, idata: Idata):
    from .messages import IdataPair
    return IdataPair(ino=ino, idata=idata, op=PairOp.UPDATE, origin=0)


def _encode_idata(idata: Idata) -> bytes:
    w = ByteWriter()
    w.digest(idata.inode_hash)
    w.u64(idata.incarnation)
    return w.bytes()


def _decode_idata(raw: bytes) -> Idata:
    r = ByteReader(raw, "idata")
    out = Idata(inode_hash=r.digest("idata.hash"),
                incarnation=r.u64("idata.incarnation"))
    r.done()
    return out


def _encode_ino_list(inos: list[int]) -> bytes:
    w = ByteWriter()
    w.u32(len(inos))
    for packed in inos:
        w.u64(packed)
    return w.bytes()


def _decode_ino_list(raw: bytes | None) -> list[int]:
    if raw is None:
        return []
    r = ByteReader(raw, "inolist")
    out = [r.u64("inolist.ino") for _ in range(r.u32("inolist.n"))]
    r.done()
    return out


def _wal_rec(kind: int, body: bytes) -> bytes:
    w = ByteWriter()
    w.u8(kind)
    w.blob(body)
    return w.bytes()


def _wal_parse(raw: bytes) -> tuple[int, bytes]:
    r = ByteReader(raw, "walrec")
    kind = r.u8("walrec.kind")
    body = r.blob("walrec.body")
    r.done()
    return kind, body


_vault_rec = _wal_rec
_vault_parse = _wal_parse


def _w_str(w: ByteWriter, s: str) -> None:
    raw = s.encode()
    w.u16(len(raw))
    w.raw(raw)


def _r_str(r: ByteReader, field: str) -> str:
    n = r.u16(field + ".len")
    return r.take(n, field).decode()
