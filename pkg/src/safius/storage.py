"""The untrusted storage server: a content-addressed block store that keeps
per-inode and per-user reference counts and issues signed grants.

Two ingest paths exist.  The synchronous path verifies a per-op signature
before touching state.  The asynchronous path applies operations immediately
and holds them in a per-user pending window; a later signed batch must cover
every pending op in order, or the whole batch is rejected.  Pending ops that
miss their coverage deadline are rolled back and flagged for audit.

Everything the server accepts is appended to a stable oplog, so a crashed
server rebuilds bit-identical state (lies included -- a byzantine server
remembers its own forged charges).
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .counts import apply_count, pattern_bytes
from .crypto import HashScheme, KeyRegistry, MerkleMap, Signature
from .errors import (
    AccessDenied,
    BadSignature,
    BlockNotFound,
    DigestMismatch,
    NoSuchReference,
    ProtocolError,
    RejectedBatch,
    Replay,
    UnknownSession,
)
from .ids import OpKind, STORAGE_PRINCIPAL, InodeNumber
from .messages import (
    BatchEntry,
    ByteReader,
    ByteWriter,
    GrantBatch,
    GrantSingle,
    RequestBatch,
    SignedGrant,
    SignedRequest,
    decode,
    payload_digest,
)
from .sim import Fabric
from .stable import StableStore

# Entry lifecycle inside the unsigned window.
_PENDING, _COVERED, _ROLLED_BACK = 0, 1, 2

# Oplog record kinds.
_R_HELLO, _R_OP, _R_COVER, _R_ROLLBACK, _R_RETAIN = 1, 2, 3, 4, 5
_R_GRANT_CACHE, _R_PRUNE, _R_FORGE, _R_DROP = 6, 7, 8, 9

OPLOG = "oplog"


@dataclass(frozen=True)
class SessionHello:
    uid: int
    nonce_value: int


@dataclass(frozen=True)
class LoadReq:
    blknum: bytes


@dataclass(frozen=True)
class LoadRep:
    data: bytes


@dataclass(frozen=True)
class StoreOp:
    entry: BatchEntry
    data: bytes
    accountable: bool = True  # False only in the no-signature baseline mode


@dataclass(frozen=True)
class FreeOp:
    entry: BatchEntry
    accountable: bool = True


@dataclass(frozen=True)
class OpAck:
    dup: bool = False


@dataclass(frozen=True)
class SingleOpMsg:
    signed: SignedRequest
    data: bytes | None = None


@dataclass(frozen=True)
class BatchMsg:
    batch: RequestBatch
    # ciphertext for entries the server has not seen yet, keyed by blknum
    data: tuple[tuple[bytes, bytes], ...] = ()


@dataclass(frozen=True)
class PruneRequest:
    root: bytes


@dataclass(frozen=True)
class PruneAgree:
    root: bytes
    sig: Signature


@dataclass(frozen=True)
class PruneMismatch:
    pass


@dataclass(frozen=True)
class PruneLeaves:
    items: tuple[tuple[bytes, bytes], ...]


@dataclass(frozen=True)
class PruneDivergent:
    blknum: bytes


@dataclass
class _Pending:
    entry: BatchEntry
    born: int  # tick when accepted; drives the coverage deadline
    # Bytes removed when this free zeroed the last reference.  Held until
    # coverage so a deadline rollback can restore the block.
    saved: bytes | None = None
    seq: int = 0  # global acceptance order, for cross-uid rollback


class StorageServer:
    NAME = "storage"

    def __init__(self, fabric: Fabric, registry: KeyRegistry,
                 scheme: HashScheme, stable: StableStore,
                 lhash: str | None = "lhash",
                 pending_deadline: int = 2000):
        self.fabric = fabric
        self.registry = registry
        self.scheme = scheme
        self.stable = stable
        self.lhash = lhash
        self.pending_deadline = pending_deadline

        self.blocks: dict[bytes, bytes] = {}
        self.refs: dict[bytes, dict[InodeNumber, int]] = {}
        self.per_uid: dict[bytes, dict[int, int]] = {}
        self.tree = MerkleMap(scheme)
        self.sessions: set[tuple[int, int]] = set()
        # (uid, nonce, count) -> [entry payload digest, lifecycle state]
        self.seen: dict[tuple[int, int, int], list] = {}
        # Unsigned-window ops keyed by (uid, session nonce): one principal
        # may act through several clients at once, and a batch can only
        # cover the sessions it was built from.
        self.pending: dict[tuple[int, int], list[_Pending]] = {}
        self._op_seq = 0
        self.retained: list[bytes] = []          # signed request envelopes
        self.grant_cache: dict[bytes, bytes] = {}  # batch digest -> grant bytes
        self.agreement_root: bytes | None = None
        self.flags: list[str] = []               # audit-relevant local notes

        self._fgrp_cache: dict[InodeNumber, tuple[int, frozenset, int]] = {}
        self._fgrp_incarnation = -1

        if self.stable.log_len(OPLOG):
            self._replay()

    # -- dispatch ------------------------------------------------------------

    def handle(self, src: str, msg):
        if isinstance(msg, SessionHello):
            return self.hello(msg)
        if isinstance(msg, LoadReq):
            return self.load(msg.blknum)
        if isinstance(msg, StoreOp):
            return self.handle_store(msg)
        if isinstance(msg, FreeOp):
            return self.handle_free(msg)
        if isinstance(msg, SingleOpMsg):
            return self.handle_signed(msg)
        if isinstance(msg, BatchMsg):
            return self.verify_and_grant(msg)
        if isinstance(msg, PruneRequest):
            return self.prune_root(msg.root)
        if isinstance(msg, PruneLeaves):
            return self.prune_leaves(msg.items)
        raise TypeError(f"storage server cannot handle {type(msg).__name__}")

    # -- sessions ------------------------------------------------------------

    def hello(self, msg: SessionHello) -> OpAck:
        key = (msg.uid, msg.nonce_value)
        if key not in self.sessions:
            self.sessions.add(key)
            self._log_hello(msg.uid, msg.nonce_value)
        return OpAck()

    # -- load ----------------------------------------------------------------

    def load(self, blknum: bytes) -> LoadRep:
        rule = self.fabric.plan.check("storage.load", blknum=blknum.hex())
        if rule is not None:
            if rule.kind == "ReturnNotFound":
                raise BlockNotFound(blknum.hex())
            if rule.kind == "CorruptBytes":
                data = self.blocks.get(blknum)
                if data is not None:
                    bit = int(rule.params.get("bit", 0)) % (len(data) * 8)
                    flipped = bytearray(data)
                    flipped[bit // 8] ^= 1 << (bit % 8)
                    return LoadRep(bytes(flipped))
        data = self.blocks.get(blknum)
        if data is None:
            raise BlockNotFound(blknum.hex())
        return LoadRep(data)

    # -- validation helpers ----------------------------------------------------

    def _check_session(self, entry: BatchEntry) -> None:
        if (entry.nonce.principal, entry.nonce.value) not in self.sessions:
            raise UnknownSession(f"uid {entry.nonce.principal}")

    def _check_access(self, uid: int, ino: InodeNumber, op: OpKind) -> None:
        if uid == ino.owner:
            return
        info = self._fgrp_of(ino)
        if info is None:
            raise AccessDenied(f"uid {uid} ino {ino}")
        # Stores need write access.  Frees also admit readers: whoever holds
        # the last open handle of an unlinked file finalizes it, and every
        # free is signed, so misuse stays attributable.
        allowed = info[1] if op == OpKind.STORE else (info[1] | info[2])
        if uid not in allowed:
            raise AccessDenied(f"uid {uid} ino {ino}")

    def _fgrp_of(self, ino: InodeNumber):
        cached = self._fgrp_cache.get(ino)
        if cached is not None:
            return cached
        if self.lhash is None:
            return None
        from .lhash import FgrpLookup  # local import breaks the module cycle
        try:
            rep = self.fabric.send(self.NAME, self.lhash, FgrpLookup(ino=ino))
        except ProtocolError:
            return None
        if rep.fgrp is None:
            return None
        info = (rep.fgrp, frozenset(rep.writers), frozenset(rep.readers),
                rep.incarnation)
        self._fgrp_cache[ino] = info
        return info

    def _current_fgrphash(self) -> bytes:
        if self.lhash is None:
            return self.scheme.digest(b"fgrp-standalone")
        from .lhash import FgrpHashReq
        rep = self.fabric.send(self.NAME, self.lhash, FgrpHashReq())
        if rep.incarnation != self._fgrp_incarnation:
            # Sharing changed somewhere; cached writer sets may be stale.
            self._fgrp_cache.clear()
            self._fgrp_incarnation = rep.incarnation
        return rep.fgrphash

    # -- unsigned (asynchronous) path ---------------------------------------

    def handle_store(self, msg: StoreOp) -> OpAck:
        entry, uid = msg.entry, msg.entry.nonce.principal
        self.fabric.crashpoint(self.NAME, "storage.store.recv",
                               blknum=entry.blknum.hex())
        dup = self._precheck(entry)
        if dup:
            return OpAck(dup=True)
        if entry.op != OpKind.STORE:
            raise RejectedBatch("store message carrying a free entry")
        if self.scheme.digest(msg.data) != entry.blknum:
            raise DigestMismatch(entry.blknum.hex())
        self._check_access(uid, entry.ino, entry.op)
        self._apply(entry, uid, msg.data, msg.accountable)
        self._log_op(entry, msg.accountable, msg.data)
        self.fabric.crashpoint(self.NAME, "storage.store.applied",
                               blknum=entry.blknum.hex())
        return OpAck()

    def handle_free(self, msg: FreeOp) -> OpAck:
        entry, uid = msg.entry, msg.entry.nonce.principal
        dup = self._precheck(entry)
        if dup:
            return OpAck(dup=True)
        if entry.op != OpKind.FREE:
            raise RejectedBatch("free message carrying a store entry")
        if self.refs.get(entry.blknum, {}).get(entry.ino, 0) <= 0:
            raise NoSuchReference(f"{entry.blknum.hex()} ino {entry.ino}")
        self._check_access(uid, entry.ino, entry.op)
        self._apply(entry, uid, None, msg.accountable)
        self._log_op(entry, msg.accountable, None)
        return OpAck()

    def _precheck(self, entry: BatchEntry) -> bool:
        """Session and replay checks shared by both directions.  Returns True
        for a benign retransmission (identical entry already applied)."""
        self._check_session(entry)
        prior = self.seen.get(entry.key())
        if prior is None:
            return False
        if prior[0] == payload_digest(self.scheme, entry) and prior[1] != _ROLLED_BACK:
            return True
        raise Replay(f"nonce {entry.nonce.value}#{entry.count}")

    def _apply(self, entry: BatchEntry, uid: int, data: bytes | None,
               accountable: bool) -> bytes | None:
        saved = None
        if entry.op == OpKind.STORE:
            self.blocks[entry.blknum] = data
            by_ino = self.refs.setdefault(entry.blknum, {})
            by_ino[entry.ino] = by_ino.get(entry.ino, 0) + 1
        else:
            by_ino = self.refs[entry.blknum]
            by_ino[entry.ino] -= 1
            if by_ino[entry.ino] == 0:
                del by_ino[entry.ino]
            if not by_ino:
                del self.refs[entry.blknum]
                saved = self.blocks.pop(entry.blknum)
        counts = self.per_uid.setdefault(entry.blknum, {})
        apply_count(counts, uid, entry.op)
        if not counts:
            del self.per_uid[entry.blknum]
        self._retree(entry.blknum)
        state = _PENDING if accountable else _COVERED
        self.seen[entry.key()] = [payload_digest(self.scheme, entry), state]
        if accountable:
            self._op_seq += 1
            self.pending.setdefault((uid, entry.nonce.value), []).append(
                _Pending(entry, self.fabric.clock.now, saved, self._op_seq))
        return saved

    def _unapply(self, entry: BatchEntry, uid: int,
                 saved: bytes | None = None) -> None:
        if entry.op == OpKind.STORE:
            by_ino = self.refs.get(entry.blknum)
            if by_ino is not None and by_ino.get(entry.ino, 0) > 0:
                by_ino[entry.ino] -= 1
                if by_ino[entry.ino] == 0:
                    del by_ino[entry.ino]
                if not by_ino:
                    del self.refs[entry.blknum]
                    self.blocks.pop(entry.blknum, None)
            # else a covered free from another window already consumed the
            # reference; only the charge reverses.
        else:
            by_ino = self.refs.setdefault(entry.blknum, {})
            by_ino[entry.ino] = by_ino.get(entry.ino, 0) + 1
            if saved is not None and entry.blknum not in self.blocks:
                self.blocks[entry.blknum] = saved
        counts = self.per_uid.setdefault(entry.blknum, {})
        apply_count(counts, uid, entry.op, sign=-1)
        if not counts:
            del self.per_uid[entry.blknum]
        self._retree(entry.blknum)

    def _retree(self, blknum: bytes) -> None:
        counts = self.per_uid.get(blknum)
        if counts:
            self.tree.put(blknum, pattern_bytes(counts))
        else:
            self.tree.delete(blknum)

    # -- synchronous signed path ----------------------------------------------

    def handle_signed(self, msg: SingleOpMsg) -> SignedGrant:
        req = msg.signed.req
        digest = payload_digest(self.scheme, req)
        if not self.registry.verify(req.uid, digest, msg.signed.sig):
            raise BadSignature(f"uid {req.uid}")
        if req.uid != req.nonce.principal:
            raise BadSignature("uid / nonce principal mismatch")
        entry = BatchEntry(blknum=req.blknum, ino=req.ino, op=req.op,
                           nonce=req.nonce, count=req.count)
        if entry.op == OpKind.STORE:
            self.handle_store(StoreOp(entry=entry, data=msg.data or b"",
                                      accountable=False))
        else:
            self.handle_free(FreeOp(entry=entry, accountable=False))
        self.retained.append(msg.signed.encode())
        self.stable.append(OPLOG, self._rec(_R_RETAIN, msg.signed.encode()))
        grant = GrantSingle(inner=req, fgrphash=self._current_fgrphash())
        sig = self.registry.sign(STORAGE_PRINCIPAL,
                                 payload_digest(self.scheme, grant))
        return SignedGrant(grant=grant, sig=sig)

    # -- batch verification ------------------------------------------------

    def verify_and_grant(self, msg: BatchMsg) -> GrantBatch:
        rule = self.fabric.plan.check("storage.grant",
                                      uid=msg.batch.header.uid)
        if rule is not None and rule.kind == "RefuseGrant":
            raise RejectedBatch("grant refused")
        if rule is not None and rule.kind == "CrashActor":
            self.fabric.crash(rule.params.get("actor", self.NAME),
                              "storage.grant")
        batch = msg.batch
        uid = batch.header.uid
        batch_digest = payload_digest(self.scheme, batch)
        cached = self.grant_cache.get(batch_digest)
        if cached is not None:
            return decode(cached)
        if len(batch.entries) != batch.header.count:
            raise RejectedBatch("header count mismatch")
        if not self.registry.verify(uid, batch.signing_digest(self.scheme),
                                    batch.sig):
            raise RejectedBatch("bad batch signature")

        data_map = dict(msg.data)
        # Coverage runs per session: position of the next uncovered pending
        # op in each session the batch names.
        ptr: dict[int, int] = {}
        # Entries this batch newly applied, with any bytes their frees
        # removed; atomic rejection unwinds them and their pending records.
        journal: list[tuple[BatchEntry, int, bytes | None]] = []

        def undo():
            for entry, euid, saved in reversed(journal):
                self._unapply(entry, euid, saved)
                self.seen.pop(entry.key(), None)
                key = (euid, entry.nonce.value)
                if self.pending.get(key):
                    self.pending[key] = self.pending[key][:-1]

        for i, entry in enumerate(batch.entries):
            if entry.nonce.principal != uid:
                undo()
                raise RejectedBatch("entry principal mismatch", i)
            sess = entry.nonce.value
            pend = self.pending.get((uid, sess), [])
            k = ptr.setdefault(sess, 0)
            if k < len(pend) and pend[k].entry == entry:
                ptr[sess] = k + 1
                continue
            prior = self.seen.get(entry.key())
            if prior is not None:
                if prior[0] != payload_digest(self.scheme, entry):
                    undo()
                    raise RejectedBatch("equivocating entry", i)
                if prior[1] == _ROLLED_BACK:
                    undo()
                    raise RejectedBatch("entry expired before coverage", i)
                continue  # historical entry, already covered by an earlier grant
            # A batch may carry ops never sent individually; validate fully.
            try:
                self._check_session(entry)
                if entry.op == OpKind.STORE:
                    data = data_map.get(entry.blknum)
                    if data is None:
                        raise RejectedBatch("store entry without data", i)
                    if self.scheme.digest(data) != entry.blknum:
                        raise DigestMismatch(entry.blknum.hex())
                    self._check_access(uid, entry.ino, entry.op)
                    saved = self._apply(entry, uid, data, accountable=True)
                else:
                    if self.refs.get(entry.blknum, {}).get(entry.ino, 0) <= 0:
                        raise NoSuchReference(entry.blknum.hex())
                    self._check_access(uid, entry.ino, entry.op)
                    saved = self._apply(entry, uid, None, accountable=True)
                self._log_op(entry, True, data_map.get(entry.blknum)
                             if entry.op == OpKind.STORE else None)
                ptr[sess] = k + 1
                journal.append((entry, uid, saved))
            except RejectedBatch:
                undo()
                raise
            except ProtocolError as err:
                undo()
                raise RejectedBatch(f"{err.code}: {err.detail}", i) from err

        short = {sess: len(self.pending.get((uid, sess), [])) - k
                 for sess, k in ptr.items()
                 if k < len(self.pending.get((uid, sess), []))}
        if short:
            undo()
            raise RejectedBatch(
                f"batch leaves {sum(short.values())} pending ops uncovered")

        sessions = sorted(ptr)
        for sess in sessions:
            for p in self.pending.get((uid, sess), []):
                self.seen[p.entry.key()][1] = _COVERED
            self.pending[(uid, sess)] = []
        self.stable.append(OPLOG, self._rec_cover(uid, sessions))
        self.retained.append(batch.encode())
        self.stable.append(OPLOG, self._rec(_R_RETAIN, batch.encode()))

        grant = GrantBatch(inner=batch, fgrphash=self._current_fgrphash(),
                           sig=Signature(b"", STORAGE_PRINCIPAL))
        sig = self.registry.sign(STORAGE_PRINCIPAL,
                                 grant.signing_digest(self.scheme))
        grant = GrantBatch(inner=batch, fgrphash=grant.fgrphash, sig=sig)
        self.grant_cache[batch_digest] = grant.encode()
        self.stable.append(OPLOG, self._rec_grant_cache(batch_digest,
                                                        grant.encode()))
        self.fabric.trace.emit(self.NAME, "grant",
                               f"uid={uid} n={len(batch.entries)}")
        return grant

    # -- deadline enforcement -------------------------------------------------

    def poll(self, now: int) -> None:
        """Roll back accountable ops that outlived the coverage deadline."""
        strip: list[tuple[int, int, int]] = []
        for key in sorted(self.pending):
            pend = self.pending[key]
            n = sum(1 for p in pend if now - p.born > self.pending_deadline)
            if n:
                strip.append((key[0], key[1], n))
        if not strip:
            return
        self._rollback(strip)
        self.stable.append(OPLOG, self._rec_rollback(strip))
        for uid, _, n in strip:
            note = f"rolled-back uid={uid} n={n}"
            self.flags.append(note)
            self.fabric.trace.emit(self.NAME, "flag", note)

    def _rollback(self, strip: list[tuple[int, int, int]]) -> None:
        # Separate windows interleave on shared blocks (one session stores,
        # another frees), so unwinding each in isolation would trip over
        # state a later op already removed.  Undo strictly in reverse global
        # acceptance order.
        doomed = [(uid, p) for uid, sess, n in strip
                  for p in self.pending.get((uid, sess), [])[:n]]
        for uid, p in sorted(doomed, key=lambda t: t[1].seq, reverse=True):
            self._unapply(p.entry, uid, p.saved)
            self.seen[p.entry.key()][1] = _ROLLED_BACK
        for uid, sess, n in strip:
            self.pending[(uid, sess)] = self.pending[(uid, sess)][n:]

    def has_pending(self) -> bool:
        return any(self.pending.get(k) for k in self.pending)

    # -- signature pruning ---------------------------------------------------

    def prune_root(self, lhash_root: bytes):
        if self.tree.root() != lhash_root:
            return PruneMismatch()
        sig = self.registry.sign(STORAGE_PRINCIPAL, self.tree.root())
        self.retained = []
        self.grant_cache = {}
        self.agreement_root = self.tree.root()
        self.stable.append(OPLOG, self._rec(_R_PRUNE, self.tree.root()))
        self.fabric.trace.emit(self.NAME, "prune",
                               f"agree root={lhash_root[:8].hex()}")
        return PruneAgree(root=self.tree.root(), sig=sig)

    def prune_leaves(self, items) -> PruneDivergent:
        diverging = MerkleMap.first_divergence(list(items),
                                               self.tree.items_sorted())
        if diverging is None:
            # Equal leaf sets hash to equal roots; only a stale caller lands here.
            raise ProtocolError("leaf sets agree, no divergence to report")
        return PruneDivergent(blknum=diverging)

    # -- adversarial surface (driven by the fault plan only) -----------------

    def adv_drop_block(self, blknum: bytes, drop_counts: bool = False) -> None:
        self.blocks.pop(blknum, None)
        if drop_counts:
            self.refs.pop(blknum, None)
            self.per_uid.pop(blknum, None)
            self.tree.delete(blknum)
        self.stable.append(OPLOG, self._rec_drop(blknum, drop_counts))
        self.fabric.trace.emit(self.NAME, "adv",
                               f"drop {blknum[:8].hex()} counts={drop_counts}")

    def adv_forge_charge(self, blknum: bytes, ino: InodeNumber, uid: int) -> None:
        by_ino = self.refs.setdefault(blknum, {})
        by_ino[ino] = by_ino.get(ino, 0) + 1
        counts = self.per_uid.setdefault(blknum, {})
        apply_count(counts, uid, OpKind.STORE)
        self._retree(blknum)
        self.stable.append(OPLOG, self._rec_forge(blknum, ino, uid))
        self.fabric.trace.emit(self.NAME, "adv",
                               f"forge {blknum[:8].hex()} uid={uid}")

    # -- oplog ----------------------------------------------------------------

    def _rec(self, kind: int, body: bytes) -> bytes:
        w = ByteWriter()
        w.u8(kind)
        w.blob(body)
        return w.bytes()

    def _log_hello(self, uid: int, nonce: int) -> None:
        w = ByteWriter()
        w.u32(uid)
        w.u64(nonce)
        self.stable.append(OPLOG, self._rec(_R_HELLO, w.bytes()))

    def _log_op(self, entry: BatchEntry, accountable: bool,
                data: bytes | None) -> None:
        w = ByteWriter()
        w.blob(entry.encode())
        w.u8(1 if accountable else 0)
        w.u8(1 if data is not None else 0)
        if data is not None:
            w.blob(data)
        w.u64(self.fabric.clock.now)
        self.stable.append(OPLOG, self._rec(_R_OP, w.bytes()))

    def _rec_cover(self, uid: int, sessions: list[int]) -> bytes:
        w = ByteWriter()
        w.u32(uid)
        w.u32(len(sessions))
        for sess in sessions:
            w.u64(sess)
        return self._rec(_R_COVER, w.bytes())

    def _rec_rollback(self, strip: list[tuple[int, int, int]]) -> bytes:
        w = ByteWriter()
        w.u32(len(strip))
        for uid, sess, n in strip:
            w.u32(uid)
            w.u64(sess)
            w.u32(n)
        return self._rec(_R_ROLLBACK, w.bytes())

    def _rec_grant_cache(self, digest: bytes, grant: bytes) -> bytes:
        w = ByteWriter()
        w.blob(digest)
        w.blob(grant)
        return self._rec(_R_GRANT_CACHE, w.bytes())

    def _rec_forge(self, blknum: bytes, ino: InodeNumber, uid: int) -> bytes:
        w = ByteWriter()
        w.digest(blknum)
        w.u64(ino.pack())
        w.u32(uid)
        return self._rec(_R_FORGE, w.bytes())

    def _rec_drop(self, blknum: bytes, drop_counts: bool) -> bytes:
        w = ByteWriter()
        w.digest(blknum)
        w.u8(1 if drop_counts else 0)
        return self._rec(_R_DROP, w.bytes())

    def _replay(self) -> None:
        for raw in self.stable.records(OPLOG):
            r = ByteReader(raw, "oplog")
            kind = r.u8("kind")
            body = ByteReader(r.blob("body"), "oplog.body")
            if kind == _R_HELLO:
                self.sessions.add((body.u32("uid"), body.u64("nonce")))
            elif kind == _R_OP:
                entry = decode(body.blob("entry"))
                accountable = body.u8("accountable") == 1
                data = body.blob("data") if body.u8("has_data") == 1 else None
                born = body.u64("born")
                self._apply(entry, entry.nonce.principal, data, accountable)
                if accountable:
                    key = (entry.nonce.principal, entry.nonce.value)
                    self.pending[key][-1].born = born
            elif kind == _R_COVER:
                uid = body.u32("uid")
                for _ in range(body.u32("nsess")):
                    key = (uid, body.u64("sess"))
                    for p in self.pending.get(key, []):
                        self.seen[p.entry.key()][1] = _COVERED
                    self.pending[key] = []
            elif kind == _R_ROLLBACK:
                ntriples = body.u32("ntriples")
                self._rollback([(body.u32("uid"), body.u64("sess"),
                                 body.u32("n"))
                                for _ in range(ntriples)])
            elif kind == _R_RETAIN:
                self.retained.append(body.data)
            elif kind == _R_GRANT_CACHE:
                self.grant_cache[body.blob("digest")] = body.blob("grant")
            elif kind == _R_PRUNE:
                self.retained = []
                self.grant_cache = {}
                self.agreement_root = body.data
            elif kind == _R_FORGE:
                blknum = body.digest("blknum")
                ino = InodeNumber.unpack(body.u64("ino"))
                uid = body.u32("uid")
                by_ino = self.refs.setdefault(blknum, {})
                by_ino[ino] = by_ino.get(ino, 0) + 1
                counts = self.per_uid.setdefault(blknum, {})
                apply_count(counts, uid, OpKind.STORE)
                self._retree(blknum)
            elif kind == _R_DROP:
                blknum = body.digest("blknum")
                drop_counts = body.u8("flag") == 1
                self.blocks.pop(blknum, None)
                if drop_counts:
                    self.refs.pop(blknum, None)
                    self.per_uid.pop(blknum, None)
                    self.tree.delete(blknum)
            else:
                raise ValueError(f"unknown oplog record kind {kind}")
