"""Fileserver: one node's filesystem engine.

All file and directory state is copy-on-write data on the untrusted store;
the only trusted inputs are lock grants and Idata from the lock server.
Updates accumulate in an open transaction (dirty images, staged blocks)
and become visible in a single multi-inode version switch.  A stable undo
log brackets every commit: per-block intent records go down before any
block leaves the node, the full free-list record goes down before the
switch is requested, and verdict markers follow it, so recovery can always
roll the transaction forward or back and issue each free exactly once
(frees carry idempotency tags).

Consistency is close-to-open: an open handle reads its open-time snapshot
and refreshes it when the snapshot's blocks have been superseded, path
reads see the latest committed version, and locks are dropped lazily
(committing dirty state first) by a background sweep or a downgrade
callback from the lock server.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from . import blockfile
from .audit import DisputeKind
from .crypto import BlockCipher, HashScheme, KeyRegistry
from .errors import (
    BlockNotFound,
    Exists,
    LockNotHeld,
    NoSuchPath,
    ProtocolError,
    StaleFileHandle,
)
from .ids import ROOT_INO, Idata, InodeNumber, PairOp
from .lhash import (
    LOCK_S,
    LOCK_X,
    AcquireLock,
    CloseNotice,
    CommitReq,
    DowngradeRep,
    DowngradeReq,
    FgrpLookup,
    FgrpUpdate,
    LastTxid,
    Mount,
    ReleaseLock,
)
from .messages import ByteReader, ByteWriter, IdataPair, StoreInodeDataMsg
from .sim import Fabric
from .stable import StableStore
from .volume import VolumeManager

UNDO = "fs.undo"

# Undo record kinds.
_U_INTENT, _U_RECORD, _U_COMMIT, _U_ABORT, _U_DONE = 1, 2, 3, 4, 5

_NAME_MAX = 255


# -- directory content ---------------------------------------------------------

def encode_dir(entries: dict[bytes, int]) -> bytes:
    w = ByteWriter()
    w.u32(len(entries))
    for name in sorted(entries):
        w.u16(len(name))
        w.raw(name)
        w.u64(entries[name])
    return w.bytes()


def decode_dir(raw: bytes) -> dict[bytes, int]:
    if not raw:
        return {}   # a never-written directory reads back empty
    r = ByteReader(raw, "dir")
    out: dict[bytes, int] = {}
    for _ in range(r.u32("dir.n")):
        n = r.u16("dir.namelen")
        name = r.take(n, "dir.name")
        out[name] = r.u64("dir.ino")
    r.done()
    return out


# -- transaction state ---------------------------------------------------------

@dataclass
class _Txn:
    serial: int
    uid: int
    # packed ino -> working image; None marks an unlink/delete in this txn
    images: dict[int, blockfile.FileImage | None] = field(default_factory=dict)
    base: dict[int, Idata | None] = field(default_factory=dict)
    # flat, in store order; order fixes the idempotency-tag indexes
    new_blocks: list[tuple[bytes, int]] = field(default_factory=list)
    commit_frees: list[tuple[bytes, int]] = field(default_factory=list)
    created: dict[int, int] = field(default_factory=dict)   # packed -> fgrp
    marks: dict[int, tuple[PairOp, int]] = field(default_factory=dict)


class FileServer:
    def __init__(self, name: str, node: int, fabric: Fabric,
                 registry: KeyRegistry, scheme: HashScheme,
                 cipher: BlockCipher, stable: StableStore,
                 mode: str = "async", threshold: int = 1000,
                 timeout: int = 1000, lock_drop_interval: int = 2000,
                 storage: str = "storage", lhash: str = "lhash"):
        self.name = name
        self.node = node
        self.fabric = fabric
        self.scheme = scheme
        self.stable = stable
        self.lhash = lhash
        self.vm = VolumeManager(name, fabric, registry, scheme, cipher,
                                stable, seed_label=name, mode=mode,
                                threshold=threshold, timeout=timeout,
                                storage=storage, lhash=lhash)
        self.locks: dict[int, int] = {}
        self.lock_idata: dict[int, Idata | None] = {}
        self.clean_images: dict[int, tuple[Idata, blockfile.FileImage]] = {}
        self.open_count: dict[int, int] = {}
        self.open_snapshot: dict[int, Idata] = {}
        self.fgrp_cache: dict[int, int] = {}
        self.txn: _Txn | None = None
        self.lock_drop_interval = lock_drop_interval
        self._last_sweep = 0
        self._in_op = 0

    # -- boot / recovery ---------------------------------------------------------

    def boot(self) -> None:
        rep = self.fabric.send(self.name, self.lhash, Mount(node=self.node))
        self.root_idata = rep.root
        self.vm.recover()
        self._undo_recover()
        for packed in rep.orphans:
            ino = InodeNumber.unpack(packed)
            # Derelict unlinked files are reclaimed in the owner's name.
            self._delete_ino(ino, uid=ino.owner)

    def _undo_recover(self) -> None:
        records = self.stable.records(UNDO)
        if not records:
            return
        intents: dict[int, list[tuple[bytes, int]]] = {}
        uid_of: dict[int, int] = {}
        recorded: dict[int, dict] = {}
        committed: set[int] = set()
        aborted: set[int] = set()
        done: set[int] = set()
        for raw in records:
            r = ByteReader(raw, "undo")
            kind = r.u8("undo.kind")
            serial = r.u64("undo.serial")
            if kind == _U_INTENT:
                uid_of[serial] = r.u32("undo.uid")
                packed = r.u64("undo.ino")
                blknum = r.digest("undo.blknum")
                intents.setdefault(serial, []).append((blknum, packed))
            elif kind == _U_RECORD:
                uid_of[serial] = r.u32("undo.uid")
                txid = r.u64("undo.txid")
                cf = [(r.digest("undo.cf"), r.u64("undo.cfino"))
                      for _ in range(r.u32("undo.ncf"))]
                af = [(r.digest("undo.af"), r.u64("undo.afino"))
                      for _ in range(r.u32("undo.naf"))]
                recorded[serial] = {"txid": txid, "cf": cf, "af": af}
            elif kind == _U_COMMIT:
                committed.add(serial)
            elif kind == _U_ABORT:
                aborted.add(serial)
            elif kind == _U_DONE:
                done.add(serial)
        last_txid = None
        for serial in sorted(set(intents) | set(recorded)
                             | committed | aborted):
            if serial in done:
                continue
            rec = recorded.get(serial)
            uid = uid_of[serial]
            if serial in committed or serial in aborted:
                verdict = "commit" if serial in committed else "abort"
            elif rec is not None:
                # The verdict is whatever the lock server decided: the switch
                # either flipped before the crash or it never will.
                if last_txid is None:
                    rep = self.fabric.send(self.name, self.lhash, LastTxid())
                    last_txid = rep.txid
                verdict = "commit" if last_txid >= rec["txid"] else "abort"
                self._append_marker(
                    _U_COMMIT if verdict == "commit" else _U_ABORT,
                    serial, rec["txid"])
            else:
                verdict = "abort"
                self._append_marker(_U_ABORT, serial, 0)
            if verdict == "commit":
                frees = rec["cf"]
                prefix = f"C:{serial}:"
            else:
                frees = rec["af"] if rec else intents.get(serial, [])
                prefix = f"A:{serial}:"
            for i, (blknum, packed) in enumerate(frees):
                self.vm.vm_free(blknum, InodeNumber.unpack(packed), uid,
                                tag=f"{prefix}{i}".encode())
            self._append_marker(_U_DONE, serial, 0)
            self.vm.forget_tags(prefix.encode())
            self.fabric.trace.emit(self.name, "recover",
                                   f"{verdict} serial={serial}")
        self.stable.replace_log(UNDO, [])

    def _append_marker(self, kind: int, serial: int, txid: int) -> None:
        w = ByteWriter()
        w.u8(kind)
        w.u64(serial)
        if kind == _U_COMMIT:
            w.u64(txid)
        self.stable.append(UNDO, w.bytes())

    # -- fabric callbacks --------------------------------------------------------

    def handle(self, src: str, msg):
        if isinstance(msg, DowngradeReq):
            return self._downgrade(msg.ino)
        raise ProtocolError(f"{self.name} cannot handle {type(msg).__name__}")

    def _downgrade(self, ino: InodeNumber) -> DowngradeRep:
        packed = ino.pack()
        if self._in_op:
            return DowngradeRep(released=False)
        if self.txn is not None and packed in self.txn.images:
            self.fs_commit()
        self._forget_lock(packed, tell_lhash=False)
        return DowngradeRep(released=True)

    # -- locks --------------------------------------------------------------------

    def _lock(self, ino: InodeNumber, mode: int, uid: int,
              open_handle: bool = False) -> Idata | None:
        packed = ino.pack()
        held = self.locks.get(packed)
        if held is not None and held >= mode and not open_handle:
            return self.lock_idata.get(packed)
        rep = self.fabric.send(self.name, self.lhash,
                               AcquireLock(ino=ino, mode=mode, uid=uid,
                                           open=open_handle))
        self.locks[packed] = max(held or 0, mode)
        if self.lock_idata.get(packed) != rep.idata:
            self.clean_images.pop(packed, None)
        self.lock_idata[packed] = rep.idata
        return rep.idata

    def _forget_lock(self, packed: int, tell_lhash: bool = True) -> None:
        if packed not in self.locks:
            return
        if tell_lhash:
            self.fabric.send(self.name, self.lhash,
                             ReleaseLock(ino=InodeNumber.unpack(packed)))
        self.locks.pop(packed, None)
        self.lock_idata.pop(packed, None)
        self.clean_images.pop(packed, None)

    def sweep_locks(self, now: int) -> None:
        """The lazy lock dropper: commit dirty state, then release every
        held lock.  Open handles survive; they re-fetch Idata on demand."""
        if now - self._last_sweep < self.lock_drop_interval:
            return
        self._last_sweep = now
        if self.txn is not None and self.txn.images:
            self.fs_commit()
        for packed in sorted(self.locks):
            self._forget_lock(packed)

    # -- filegroups -----------------------------------------------------------------

    def _fgrp_of(self, ino: InodeNumber) -> int:
        packed = ino.pack()
        cached = self.fgrp_cache.get(packed)
        if cached is not None:
            return cached
        if self.txn is not None and packed in self.txn.created:
            return self.txn.created[packed]
        rep = self.fabric.send(self.name, self.lhash, FgrpLookup(ino=ino))
        if rep.fgrp is None:
            raise NoSuchPath(f"{ino} has no filegroup")
        self.fgrp_cache[packed] = rep.fgrp
        return rep.fgrp

    # -- inode numbers -----------------------------------------------------------

    def _alloc_ino(self, owner: int) -> InodeNumber:
        # Sequence numbers are never reused: a recycled number could inherit
        # the dead file's filegroup binding from other nodes' caches.
        seq = self.stable.get_int(f"fs.seq.{owner}", 0) + 1
        self.stable.put_int(f"fs.seq.{owner}", seq)
        return InodeNumber(node=self.node, owner=owner, seq=seq)

    # -- transaction plumbing --------------------------------------------------------

    def _ensure_txn(self, uid: int) -> _Txn:
        if self.txn is not None and self.txn.uid != uid:
            # One signer per transaction; a second user's op closes the
            # first user's batch of work.
            self.fs_commit()
        if self.txn is None:
            serial = self.stable.get_int("fs.serial", 0) + 1
            self.stable.put_int("fs.serial", serial)
            self.txn = _Txn(serial=serial, uid=uid)
        return self.txn

    def _store_block(self, packed: int, fgrp: int, plain: bytes) -> bytes:
        txn = self.txn
        assert txn is not None
        blknum, ct = self.vm.prepare_store(plain, fgrp)
        w = ByteWriter()
        w.u8(_U_INTENT)
        w.u64(txn.serial)
        w.u32(txn.uid)
        w.u64(packed)
        w.digest(blknum)
        self.stable.append(UNDO, w.bytes())
        self.vm.submit_store(blknum, ct, InodeNumber.unpack(packed), txn.uid)
        txn.new_blocks.append((blknum, packed))
        return blknum

    def _load_clean(self, packed: int, idata: Idata) -> blockfile.FileImage:
        cached = self.clean_images.get(packed)
        if cached is not None and cached[0] == idata:
            return cached[1]
        fgrp = self._fgrp_of(InodeNumber.unpack(packed))
        inode_bytes = self.vm.vm_read(idata.inode_hash, fgrp)
        image = blockfile.load_image(self.vm, self.scheme, inode_bytes)
        self.clean_images[packed] = (idata, image)
        return image

    def _dirty_image(self, ino: InodeNumber, uid: int) -> blockfile.FileImage:
        """Exclusive-lock the inode and give the transaction a private
        working copy of its committed state."""
        packed = ino.pack()
        idata = self._lock(ino, LOCK_X, uid)
        txn = self._ensure_txn(uid)
        image = txn.images.get(packed)
        if image is not None:
            return image
        if packed in txn.images:
            raise StaleFileHandle(f"{ino} unlinked in open transaction")
        if idata is None:
            raise NoSuchPath(f"{ino} has no committed version")
        base = self._load_clean(packed, idata)
        # The clean cache keeps its own instance; the txn works on a copy.
        image = blockfile.FileImage(
            meta=blockfile.InodeMeta(kind=base.meta.kind, fgrp=base.meta.fgrp,
                                     link_count=base.meta.link_count,
                                     size=base.meta.size),
            ptrs=list(base.ptrs), old_ind1=base.old_ind1,
            old_ind2=base.old_ind2, old_l1=dict(base.old_l1))
        txn.images[packed] = image
        txn.base[packed] = idata
        return image

    # -- reads / writes -----------------------------------------------------------

    def fs_read(self, ino: InodeNumber, off: int, length: int,
                uid: int) -> bytes:
        self._in_op += 1
        try:
            packed = ino.pack()
            if self.txn is not None and self.txn.images.get(packed) is not None:
                return blockfile.read_range(self.vm, self.txn.images[packed],
                                            off, length)
            snap = self.open_snapshot.get(packed)
            if snap is not None:
                try:
                    return blockfile.read_range(
                        self.vm, self._load_clean(packed, snap), off, length)
                except BlockNotFound:
                    # The snapshot outlived its blocks: another node committed
                    # a newer version and freed these.  The miss is staleness,
                    # not server misbehavior, so withdraw the accusation and
                    # read the current version instead.
                    disputes = self.vm.disputes
                    if disputes and disputes[-1].kind == DisputeKind.LOAD_MISS:
                        disputes.pop()
                    self.clean_images.pop(packed, None)
                    self.locks.pop(packed, None)
                    idata = self._lock(ino, LOCK_S, uid)
                    if idata is None:
                        raise NoSuchPath(f"{ino} has no committed version")
                    self.open_snapshot[packed] = idata
                    return blockfile.read_range(
                        self.vm, self._load_clean(packed, idata), off, length)
            idata = self._lock(ino, LOCK_S, uid)
            if idata is None:
                raise NoSuchPath(f"{ino} has no committed version")
            return blockfile.read_range(self.vm,
                                        self._load_clean(packed, idata),
                                        off, length)
        finally:
            self._in_op -= 1

    def fs_write(self, ino: InodeNumber, off: int, data: bytes,
                 uid: int) -> None:
        self._in_op += 1
        try:
            packed = ino.pack()
            image = self._dirty_image(ino, uid)
            txn = self.txn
            assert txn is not None
            store = lambda plain: self._store_block(packed, image.meta.fgrp,
                                                    plain)
            for old, _new in blockfile.write_range(self.vm, self.scheme,
                                                   image, off, data, store):
                if old is not None:
                    txn.commit_frees.append((old, packed))
        finally:
            self._in_op -= 1

    # -- namespace ----------------------------------------------------------------------

    def _read_dir(self, ino: InodeNumber, uid: int) -> dict[bytes, int]:
        packed = ino.pack()
        if self.txn is not None and self.txn.images.get(packed) is not None:
            image = self.txn.images[packed]
        else:
            idata = self._lock(ino, LOCK_S, uid)
            if idata is None:
                raise NoSuchPath(f"directory {ino}")
            image = self._load_clean(packed, idata)
        if image.meta.kind != blockfile.KIND_DIR:
            raise NoSuchPath(f"{ino} is not a directory")
        return decode_dir(blockfile.read_range(self.vm, image, 0,
                                               image.meta.size))

    def _write_dir(self, ino: InodeNumber, uid: int,
                   entries: dict[bytes, int]) -> None:
        packed = ino.pack()
        image = self._dirty_image(ino, uid)
        data = encode_dir(entries)
        txn = self.txn
        assert txn is not None
        store = lambda plain: self._store_block(packed, image.meta.fgrp, plain)
        for old, _new in blockfile.write_range(self.vm, self.scheme, image,
                                               0, data, store):
            if old is not None:
                txn.commit_frees.append((old, packed))
        for blknum, staged in blockfile.truncate(image, len(data)):
            if not staged:
                txn.commit_frees.append((blknum, packed))

    def _split(self, path: str) -> tuple[list[bytes], bytes]:
        parts = [p.encode() for p in path.strip("/").split("/") if p]
        if not parts:
            raise NoSuchPath("empty path")
        for p in parts:
            if len(p) > _NAME_MAX:
                raise ProtocolError(f"name too long: {len(p)} bytes")
        return parts[:-1], parts[-1]

    def _resolve_dir(self, parts: list[bytes], uid: int) -> InodeNumber:
        cur = ROOT_INO
        for name in parts:
            entries = self._read_dir(cur, uid)
            if name not in entries:
                raise NoSuchPath(name.decode(errors="replace"))
            cur = InodeNumber.unpack(entries[name])
        return cur

    def fs_lookup(self, path: str, uid: int) -> InodeNumber:
        dirs, name = self._split(path)
        parent = self._resolve_dir(dirs, uid)
        entries = self._read_dir(parent, uid)
        if name not in entries:
            raise NoSuchPath(path)
        return InodeNumber.unpack(entries[name])

    def fs_create(self, path: str, uid: int, fgrp: int,
                  kind: int = blockfile.KIND_FILE) -> InodeNumber:
        self._in_op += 1
        try:
            dirs, name = self._split(path)
            parent = self._resolve_dir(dirs, uid)
            self._lock(parent, LOCK_X, uid)
            entries = self._read_dir(parent, uid)
            if name in entries:
                raise Exists(path)
            ino = self._alloc_ino(uid)
            packed = ino.pack()
            self._lock(ino, LOCK_X, uid)   # fresh inode, granted empty
            entries[name] = packed
            self._write_dir(parent, uid, entries)
            txn = self._ensure_txn(uid)
            txn.images[packed] = blockfile.new_image(
                blockfile.InodeMeta(kind=kind, fgrp=fgrp))
            txn.base[packed] = None
            txn.created[packed] = fgrp
            self.fabric.trace.emit(self.name, "create",
                                   f"{path} -> {ino} fgrp={fgrp}")
            return ino
        finally:
            self._in_op -= 1

    def fs_mkdir(self, path: str, uid: int, fgrp: int) -> InodeNumber:
        return self.fs_create(path, uid, fgrp, kind=blockfile.KIND_DIR)

    def fs_open(self, path: str, uid: int) -> InodeNumber:
        self._in_op += 1
        try:
            ino = self.fs_lookup(path, uid)
            packed = ino.pack()
            idata = self._lock(ino, LOCK_S, uid, open_handle=True)
            if idata is not None:
                self.open_snapshot[packed] = idata
            self.open_count[packed] = self.open_count.get(packed, 0) + 1
            return ino
        finally:
            self._in_op -= 1

    def fs_close(self, ino: InodeNumber, uid: int) -> None:
        packed = ino.pack()
        count = self.open_count.get(packed, 0)
        if count == 0:
            return
        if count > 1:
            self.open_count[packed] = count - 1
            return
        if self.txn is not None and self.txn.images.get(packed) is not None:
            self.fs_commit()
        self.open_count.pop(packed, None)
        self.open_snapshot.pop(packed, None)
        rep = self.fabric.send(self.name, self.lhash, CloseNotice(ino=ino))
        if rep.delete_now:
            self._delete_ino(ino, uid)

    def fs_unlink(self, path: str, uid: int) -> None:
        """Remove the name now; the file itself dies when its last open
        handle anywhere goes away (the lock server picks the reaper)."""
        self._in_op += 1
        try:
            dirs, name = self._split(path)
            parent = self._resolve_dir(dirs, uid)
            self._lock(parent, LOCK_X, uid)
            entries = self._read_dir(parent, uid)
            if name not in entries:
                raise NoSuchPath(path)
            ino = InodeNumber.unpack(entries[name])
            packed = ino.pack()
            base = self._lock(ino, LOCK_X, uid)
            del entries[name]
            self._write_dir(parent, uid, entries)
            txn = self._ensure_txn(uid)
            if txn.images.get(packed) is not None:
                # Blocks staged for a file dying in its own transaction are
                # garbage the moment the switch lands; free them with it.
                for blknum, owner in txn.new_blocks:
                    if owner == packed:
                        txn.commit_frees.append((blknum, packed))
            if base is None:
                # Created and unlinked inside one transaction: the pair
                # vanishes, only the directory update commits.
                txn.images.pop(packed, None)
                txn.base.pop(packed, None)
                txn.created.pop(packed, None)
                txn.marks.pop(packed, None)
            else:
                txn.images[packed] = None
                txn.base[packed] = base
                txn.marks[packed] = (PairOp.UNLINK, self.node)
        finally:
            self._in_op -= 1
        self.fs_commit()

    def _delete_ino(self, ino: InodeNumber, uid: int) -> None:
        """The deletion transaction: free every committed block of the
        unlinked file and drop its inode table entry."""
        packed = ino.pack()
        self._in_op += 1
        try:
            idata = self._lock(ino, LOCK_X, uid)
            if idata is None:
                return   # already reaped
            image = self._load_clean(packed, idata)
            txn = self._ensure_txn(uid)
            for ptr in image.ptrs:
                if ptr is not None:
                    txn.commit_frees.append((ptr, packed))
            if image.old_ind1 is not None:
                txn.commit_frees.append((image.old_ind1, packed))
            for g in sorted(image.old_l1):
                txn.commit_frees.append((image.old_l1[g], packed))
            if image.old_ind2 is not None:
                txn.commit_frees.append((image.old_ind2, packed))
            txn.commit_frees.append((idata.inode_hash, packed))
            txn.images[packed] = None
            txn.base[packed] = idata
            txn.marks[packed] = (PairOp.DELETE, 0)
        finally:
            self._in_op -= 1
        self.fs_commit()
        self.fgrp_cache.pop(packed, None)
        self._forget_lock(packed)

    # -- commit / abort ------------------------------------------------------------------

    def fs_commit(self) -> None:
        """Turn the open transaction into one atomic version switch, then
        run any deletions the lock server hands back."""
        txn = self.txn
        if txn is None or not txn.images:
            self.txn = None
            return
        self._in_op += 1
        try:
            pairs = []
            for packed in sorted(txn.images):
                ino = InodeNumber.unpack(packed)
                op, origin = txn.marks.get(packed, (PairOp.UPDATE, 0))
                base = txn.base.get(packed)
                inc = (base.incarnation if base else 0) + 1
                if op != PairOp.UPDATE:
                    assert base is not None
                    pairs.append(IdataPair(
                        ino=ino, idata=Idata(base.inode_hash, inc),
                        op=op, origin=origin))
                    continue
                image = txn.images[packed]
                assert image is not None
                store = lambda plain, p=packed, f=image.meta.fgrp: \
                    self._store_block(p, f, plain)
                inode_bytes, interior = blockfile.build(self.scheme, image,
                                                        store)
                txn.commit_frees.extend((b, packed) for b in interior)
                inode_blk = store(inode_bytes)
                if base is not None:
                    txn.commit_frees.append((base.inode_hash, packed))
                pairs.append(IdataPair(ino=ino,
                                       idata=Idata(inode_blk, inc), op=op))

            rep = self.fabric.send(self.name, self.lhash, LastTxid())
            txid = rep.txid + 1
            self._append_record(txn, txid)
            self.fabric.crashpoint(self.name, "fs.commit.staged",
                                   serial=txn.serial)
            try:
                # Filegroup bindings must exist before the switch: a crash
                # right after it must leave every committed file readable.
                for packed in sorted(txn.created):
                    self.fabric.send(self.name, self.lhash, FgrpUpdate(
                        ino=InodeNumber.unpack(packed),
                        fgrp=txn.created[packed],
                        uid=InodeNumber.unpack(packed).owner))
                self.fabric.crashpoint(self.name, "fs.commit.fgrp_registered",
                                       serial=txn.serial)
                msg = StoreInodeDataMsg(txid=txid, pairs=tuple(pairs))
                try:
                    crep = self.fabric.send(self.name, self.lhash,
                                            CommitReq(uid=txn.uid, msg=msg))
                except LockNotHeld:
                    # The lock server restarted and its soft locks are gone;
                    # reclaim them once and retry the identical message.
                    for pair in pairs:
                        self.locks.pop(pair.ino.pack(), None)
                        self._lock(pair.ino, LOCK_X, txn.uid)
                    crep = self.fabric.send(self.name, self.lhash,
                                            CommitReq(uid=txn.uid, msg=msg))
            except ProtocolError:
                # Refused without applying anything (a crashed server raises
                # ActorCrash instead, which deliberately does not land here).
                self.fs_abort()
                raise
            self.fabric.crashpoint(self.name, "fs.commit.acked",
                                   serial=txn.serial)
            self._append_marker(_U_COMMIT, txn.serial, txid)
            self.fabric.crashpoint(self.name, "fs.commit.committed",
                                   serial=txn.serial)
            for i, (blknum, packed) in enumerate(txn.commit_frees):
                self.vm.vm_free(blknum, InodeNumber.unpack(packed), txn.uid,
                                tag=f"C:{txn.serial}:{i}".encode())
            self.fabric.crashpoint(self.name, "fs.commit.frees_issued",
                                   serial=txn.serial)
            self._append_marker(_U_DONE, txn.serial, 0)
            self.vm.forget_tags(f"C:{txn.serial}:".encode())
            self.stable.replace_log(UNDO, [])
            self.fabric.crashpoint(self.name, "fs.commit.done",
                                   serial=txn.serial)

            for pair in pairs:
                packed = pair.ino.pack()
                self.clean_images.pop(packed, None)
                if pair.op == PairOp.DELETE:
                    self.lock_idata[packed] = None
                else:
                    # Unlinked entries keep their final version pinned; the
                    # reaper's delete transaction builds on exactly this Idata.
                    self.lock_idata[packed] = pair.idata
                if pair.op == PairOp.UPDATE and packed in self.open_snapshot:
                    self.open_snapshot[packed] = pair.idata
            self.fabric.trace.emit(self.name, "commit",
                                   f"txid={txid} pairs={len(pairs)}")
        finally:
            self._in_op -= 1
        self.txn = None
        for packed in crep.delete_now:
            self._delete_ino(InodeNumber.unpack(packed), txn.uid)

    def fs_abort(self) -> None:
        """Throw the open transaction away and free everything it staged."""
        txn = self.txn
        if txn is None:
            return
        self._in_op += 1
        try:
            self._append_marker(_U_ABORT, txn.serial, 0)
            for i, (blknum, packed) in enumerate(txn.new_blocks):
                self.vm.vm_free(blknum, InodeNumber.unpack(packed), txn.uid,
                                tag=f"A:{txn.serial}:{i}".encode())
            self._append_marker(_U_DONE, txn.serial, 0)
            self.vm.forget_tags(f"A:{txn.serial}:".encode())
            self.stable.replace_log(UNDO, [])
            self.fabric.trace.emit(self.name, "abort",
                                   f"serial={txn.serial}")
            self.txn = None
        finally:
            self._in_op -= 1

    def _append_record(self, txn: _Txn, txid: int) -> None:
        w = ByteWriter()
        w.u8(_U_RECORD)
        w.u64(txn.serial)
        w.u32(txn.uid)
        w.u64(txid)
        w.u32(len(txn.commit_frees))
        for blknum, packed in txn.commit_frees:
            w.digest(blknum)
            w.u64(packed)
        w.u32(len(txn.new_blocks))
        for blknum, packed in txn.new_blocks:
            w.digest(blknum)
            w.u64(packed)
        self.stable.append(UNDO, w.bytes())
