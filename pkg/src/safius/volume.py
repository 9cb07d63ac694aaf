"""Volume manager: the per-node client of the storage server.

Owns encryption, block naming, the local ungranted-op log, and signature
batching.  The hot path (vm_write / vm_read / vm_free) performs zero
asymmetric crypto in async mode: ops are logged, sent unsigned, and covered
later by one signed RequestBatch per ~threshold ops.  The local log holds
ciphertext and the original nonce/count, so recovery can retransmit the
exact same operations and the server's replay detection keeps everything
exactly-once.

Order discipline, load-bearing: append to the log before transmitting;
persist the grant at the l-hash server before reclaiming log space.  Between
any two of those writes a crash loses nothing.
"""

from __future__ import annotations

import random
from dataclasses import dataclass

from .audit import Dispute, DisputeKind
from .crypto import BlockCipher, HashScheme, KeyRegistry, derive_seed
from .errors import (
    BlockNotFound,
    IntegrityFailure,
    NoSuchReference,
    ProtocolError,
    RejectedBatch,
    Unreachable,
)
from .ids import STORAGE_PRINCIPAL, InodeNumber, OpKind
from .messages import (
    BatchEntry,
    BatchHeader,
    ByteReader,
    ByteWriter,
    GrantBatch,
    RequestBatch,
    RequestSingle,
    SessionNonce,
    SignedGrant,
    SignedRequest,
    decode,
    payload_digest,
)
from .sim import Fabric
from .stable import StableStore
from .storage import BatchMsg, FreeOp, LoadReq, SessionHello, SingleOpMsg, StoreOp

MODES = ("async", "sync", "none")


@dataclass
class _Logged:
    entry: BatchEntry
    data: bytes | None
    tag: bytes


def _encode_logged(rec: _Logged) -> bytes:
    w = ByteWriter()
    w.u16(len(rec.tag))
    w.raw(rec.tag)
    w.blob(rec.entry.encode())
    w.u8(1 if rec.data is not None else 0)
    if rec.data is not None:
        w.blob(rec.data)
    return w.bytes()


def _decode_logged(raw: bytes) -> _Logged:
    r = ByteReader(raw, "vmlog")
    tag = r.take(r.u16("tag_len"), "tag")
    entry = decode(r.blob("entry"))
    data = r.blob("data") if r.u8("has_data") == 1 else None
    r.done()
    return _Logged(entry=entry, data=data, tag=tag)


class VolumeManager:
    def __init__(self, actor: str, fabric: Fabric, registry: KeyRegistry,
                 scheme: HashScheme, cipher: BlockCipher, stable: StableStore,
                 seed_label: str, mode: str = "async", threshold: int = 1000,
                 timeout: int = 1000, storage: str = "storage",
                 lhash: str | None = "lhash"):
        if mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        self.actor = actor
        self.fabric = fabric
        self.registry = registry
        self.scheme = scheme
        self.cipher = cipher
        self.stable = stable
        self.mode = mode
        self.threshold = threshold
        self.timeout = timeout
        self.storage = storage
        self.lhash = lhash

        # A new boot number per construction keeps session nonces unique
        # across crashes while staying a pure function of (seed, boot).
        boot = stable.get_int("vm.boot", 0)
        stable.put_int("vm.boot", boot + 1)
        self.boot = boot
        self.rng = random.Random(int.from_bytes(
            derive_seed(scheme, "vm", seed_label, str(boot)), "little"))

        self.counters = {
            "sign_calls": 0, "verify_calls": 0, "hotpath_crypto_calls": 0,
            "retransmits": 0, "stores": 0, "frees": 0, "reads": 0,
            "batches_granted": 0, "decrypts": 0, "integrity_failures": 0,
        }
        self.disputes: list[Dispute] = []
        self.sessions: dict[int, list] = {}      # uid -> [SessionNonce, count]
        self.pending: dict[int, list[_Logged]] = {}
        self.first_pending_tick: dict[int, int] = {}
        self.refused: set[int] = set()           # uids whose flush was refused
        self._hot = False
        registry.observers.append(self._on_crypto)

    def _on_crypto(self, kind: str) -> None:
        if self._hot:
            self.counters["hotpath_crypto_calls"] += 1

    # -- sessions ----------------------------------------------------------

    def _session(self, uid: int) -> list:
        sess = self.sessions.get(uid)
        if sess is None:
            nonce = SessionNonce(value=self.rng.getrandbits(64), principal=uid)
            self.fabric.send(self.actor, self.storage,
                             SessionHello(uid=uid, nonce_value=nonce.value))
            sess = [nonce, 0]
            self.sessions[uid] = sess
        return sess

    def _next_entry(self, blknum: bytes, ino: InodeNumber, uid: int,
                    op: OpKind) -> BatchEntry:
        sess = self._session(uid)
        if sess[1] >= (1 << 64) - 1:
            # Counter exhaustion forces a fresh session nonce.
            del self.sessions[uid]
            sess = self._session(uid)
        sess[1] += 1
        return BatchEntry(blknum=blknum, ino=ino, op=op, nonce=sess[0],
                          count=sess[1])

    # -- log -----------------------------------------------------------------

    def _log_name(self, uid: int) -> str:
        return f"vm.log.{uid}"

    def _append_log(self, uid: int, rec: _Logged) -> None:
        self.stable.append(self._log_name(uid), _encode_logged(rec))

    def _drop_last_log(self, uid: int) -> None:
        # Only for an op the server provably never applied (NoSuchReference).
        records = self.stable.records(self._log_name(uid))
        self.stable.replace_log(self._log_name(uid), records[:-1])

    def tag_done(self, tag: bytes) -> bool:
        if self.stable.get(f"vm.tagdone.{tag.hex()}") is not None:
            return True
        for uid in self.pending:
            for rec in self.pending[uid]:
                if rec.tag == tag:
                    return True
        return False

    def forget_tags(self, prefix: bytes) -> None:
        for key in self.stable.keys("vm.tagdone."):
            if bytes.fromhex(key.rsplit(".", 1)[-1]).startswith(prefix):
                self.stable.delete(key)

    # -- hot-path operations --------------------------------------------------

    def prepare_store(self, plaintext: bytes, fgrp: int) -> tuple[bytes, bytes]:
        """Encrypt and name a block without transmitting anything.  Callers
        that must persist intent before transmission split the write in two."""
        ciphertext = self.cipher.encrypt(fgrp, plaintext)
        self.fabric.meter.charge_hash(len(ciphertext))
        return self.scheme.digest(ciphertext), ciphertext

    def submit_store(self, blknum: bytes, ciphertext: bytes, ino: InodeNumber,
                     uid: int, tag: bytes = b"") -> None:
        was_hot = self._hot
        self._hot = True
        try:
            entry = self._next_entry(blknum, ino, uid, OpKind.STORE)
            rec = _Logged(entry=entry, data=ciphertext, tag=tag)
            self._append_log(uid, rec)
            self.fabric.crashpoint(self.actor, "vm.store.logged",
                                   blknum=blknum.hex())
            if self.mode == "sync":
                self._sync_exchange(rec, uid)
            else:
                self.fabric.send(self.actor, self.storage,
                                 StoreOp(entry=entry, data=ciphertext,
                                         accountable=self.mode == "async"))
                self._track_pending(uid, rec)
            self.counters["stores"] += 1
        finally:
            self._hot = was_hot

    def vm_write(self, plaintext: bytes, ino: InodeNumber, uid: int, fgrp: int,
                 tag: bytes = b"") -> bytes:
        blknum, ciphertext = self.prepare_store(plaintext, fgrp)
        self.submit_store(blknum, ciphertext, ino, uid, tag)
        return blknum

    def vm_read(self, blknum: bytes, fgrp: int) -> bytes:
        was_hot = self._hot
        self._hot = True
        try:
            try:
                rep = self.fabric.send(self.actor, self.storage,
                                       LoadReq(blknum=blknum))
            except BlockNotFound:
                self.disputes.append(Dispute(kind=DisputeKind.LOAD_MISS,
                                             blknum=blknum))
                self.fabric.trace.emit(self.actor, "dispute",
                                       f"load-miss {blknum[:8].hex()}")
                raise
            self.fabric.meter.charge_hash(len(rep.data))
            if self.scheme.digest(rep.data) != blknum:
                # Integrity gate runs strictly before any decryption.
                self.counters["integrity_failures"] += 1
                self.disputes.append(Dispute(kind=DisputeKind.BAD_BLOCK_BYTES,
                                             blknum=blknum, served=rep.data))
                self.fabric.trace.emit(self.actor, "dispute",
                                       f"bad-bytes {blknum[:8].hex()}")
                raise IntegrityFailure(blknum.hex())
            self.counters["decrypts"] += 1
            self.counters["reads"] += 1
            return self.cipher.decrypt(fgrp, rep.data)
        finally:
            self._hot = was_hot

    def vm_free(self, blknum: bytes, ino: InodeNumber, uid: int,
                tag: bytes = b"") -> bool:
        """Returns False when the tag shows this free was already issued, or
        the server holds no such reference (nothing to undo)."""
        if tag and self.tag_done(tag):
            return False
        was_hot = self._hot
        self._hot = True
        try:
            entry = self._next_entry(blknum, ino, uid, OpKind.FREE)
            rec = _Logged(entry=entry, data=None, tag=tag)
            self._append_log(uid, rec)
            try:
                if self.mode == "sync":
                    self._sync_exchange(rec, uid)
                else:
                    self.fabric.send(self.actor, self.storage,
                                     FreeOp(entry=entry,
                                            accountable=self.mode == "async"))
                    self._track_pending(uid, rec)
            except NoSuchReference:
                self._drop_last_log(uid)
                if tag:
                    self.stable.put(f"vm.tagdone.{tag.hex()}", b"\x01")
                return False
            self.counters["frees"] += 1
            return True
        finally:
            self._hot = was_hot

    # -- batching ---------------------------------------------------------------

    def _track_pending(self, uid: int, rec: _Logged) -> None:
        # The timeout clock starts at the oldest uncovered op: it has to
        # reach the server inside the coverage deadline even when a slow
        # trickle never fills the threshold.
        if not self.pending.get(uid):
            self.first_pending_tick[uid] = self.fabric.clock.now
        self.pending.setdefault(uid, []).append(rec)

    def run_due(self, now: int) -> None:
        """Flush trigger, called between operations: threshold or timeout."""
        if self.mode != "async":
            return
        for uid in sorted(self.pending):
            pend = self.pending[uid]
            if not pend or uid in self.refused:
                continue
            if (len(pend) >= self.threshold
                    or now - self.first_pending_tick[uid] >= self.timeout):
                self.flush(uid)

    def flush(self, uid: int) -> bool:
        pend = self.pending.get(uid)
        if not pend:
            return True
        entries = tuple(rec.entry for rec in pend)
        header = BatchHeader(uid=uid, count=len(entries))
        unsigned = RequestBatch(header=header, entries=entries,
                                sig=None)  # type: ignore[arg-type]
        self.fabric.meter.charge_hash(len(unsigned.unsigned_bytes()))
        self.counters["sign_calls"] += 1
        sig = self.registry.sign(uid, unsigned.signing_digest(self.scheme))
        batch = RequestBatch(header=header, entries=entries, sig=sig)
        self.fabric.crashpoint(self.actor, "vm.flush.batch_built", uid=uid)
        grant = None
        for attempt in (1, 2):
            try:
                grant = self.fabric.send(self.actor, self.storage,
                                         BatchMsg(batch=batch))
                break
            except (RejectedBatch, Unreachable) as err:
                if attempt == 2:
                    self.disputes.append(Dispute(
                        kind=DisputeKind.GRANT_REFUSAL, uid=uid,
                        batch=batch.encode(), detail=err.detail))
                    self.refused.add(uid)
                    self.fabric.trace.emit(self.actor, "dispute",
                                           f"grant-refusal uid={uid}")
                    return False
                self._retransmit_entries(pend)
        self.fabric.crashpoint(self.actor, "vm.flush.granted", uid=uid)
        if not self._grant_ok(grant, batch):
            self.disputes.append(Dispute(
                kind=DisputeKind.GRANT_REFUSAL, uid=uid, batch=batch.encode(),
                detail="grant failed verification"))
            self.refused.add(uid)
            self.fabric.trace.emit(self.actor, "dispute", f"bad-grant uid={uid}")
            return False
        if not self._persist_grant(grant.encode()):
            return False  # grant obtained but not persisted; the log keeps all
        self.fabric.crashpoint(self.actor, "vm.flush.persisted", uid=uid)
        self._reclaim_log(uid, len(pend))
        self.pending[uid] = []
        self.refused.discard(uid)
        self.counters["batches_granted"] += 1
        self.fabric.crashpoint(self.actor, "vm.flush.log_freed", uid=uid)
        return True

    def _grant_ok(self, grant, batch: RequestBatch) -> bool:
        if not isinstance(grant, GrantBatch):
            return False
        if grant.inner.encode() != batch.encode():
            return False  # echo must be byte-identical, signature included
        self.counters["verify_calls"] += 1
        return self.registry.verify(STORAGE_PRINCIPAL,
                                    grant.signing_digest(self.scheme),
                                    grant.sig)

    def _persist_grant(self, envelope: bytes) -> bool:
        if self.lhash is None:
            return True
        from .lhash import PersistGrant  # lazy import breaks the module cycle
        try:
            self.fabric.send(self.actor, self.lhash,
                             PersistGrant(envelope=envelope))
            return True
        except ProtocolError:
            return False

    def _reclaim_log(self, uid: int, n: int) -> None:
        """Granted-and-persisted prefix leaves the log; tags of reclaimed
        records are remembered so recovered callers never re-issue them."""
        records = self.stable.records(self._log_name(uid))
        for raw in records[:n]:
            rec = _decode_logged(raw)
            if rec.tag:
                self.stable.put(f"vm.tagdone.{rec.tag.hex()}", b"\x01")
        self.stable.replace_log(self._log_name(uid), records[n:])

    def _retransmit_entries(self, pend: list[_Logged]) -> None:
        for rec in pend:
            self.counters["retransmits"] += 1
            try:
                if rec.entry.op == OpKind.STORE:
                    self.fabric.send(self.actor, self.storage,
                                     StoreOp(entry=rec.entry, data=rec.data,
                                             accountable=self.mode == "async"))
                else:
                    self.fabric.send(self.actor, self.storage,
                                     FreeOp(entry=rec.entry,
                                            accountable=self.mode == "async"))
            except ProtocolError:
                continue

    # -- synchronous path -----------------------------------------------------

    def _sync_exchange(self, rec: _Logged, uid: int) -> None:
        entry = rec.entry
        req = RequestSingle(blknum=entry.blknum, ino=entry.ino, uid=uid,
                            op=entry.op, nonce=entry.nonce, count=entry.count)
        self.counters["sign_calls"] += 1
        sig = self.registry.sign(uid, payload_digest(self.scheme, req))
        signed = SignedRequest(req=req, sig=sig)
        reply = self.fabric.send(self.actor, self.storage,
                                 SingleOpMsg(signed=signed, data=rec.data))
        if not self._single_grant_ok(reply, req):
            self.disputes.append(Dispute(
                kind=DisputeKind.GRANT_REFUSAL, uid=uid, batch=signed.encode(),
                detail="single grant failed verification"))
            raise ProtocolError("grant failed verification")
        # Reclaim strictly from the head: a receipt that cannot be persisted
        # must stop the pipeline or later reclaims would drop the wrong record.
        if not self._persist_grant(reply.encode()):
            raise ProtocolError("grant persistence failed")
        self._reclaim_log(uid, 1)

    def _single_grant_ok(self, reply, req: RequestSingle) -> bool:
        if not isinstance(reply, SignedGrant):
            return False
        if reply.grant.inner.encode() != req.encode():
            return False
        self.counters["verify_calls"] += 1
        return self.registry.verify(STORAGE_PRINCIPAL,
                                    payload_digest(self.scheme, reply.grant),
                                    reply.sig)

    # -- recovery -----------------------------------------------------------

    def recover(self) -> int:
        """Retransmit every logged-but-ungranted entry with its original
        nonce and count.  The server's replay detection makes this safe to
        run any number of times; duplicates come back as benign acks."""
        resent = 0
        for name in self.stable.log_names("vm.log."):
            uid = int(name.rsplit(".", 1)[-1])
            resent += self._recover_uid(uid)
        return resent

    def _recover_uid(self, uid: int) -> int:
        name = self._log_name(uid)
        records = self.stable.records(name)
        if not records:
            return 0
        self.pending[uid] = []
        kept: list[bytes] = []
        resent = 0
        for raw in records:
            rec = _decode_logged(raw)
            self.counters["retransmits"] += 1
            resent += 1
            try:
                if self.mode == "sync":
                    # The exchange reclaims its own log head on success, so
                    # sync records never enter `kept`.
                    self._sync_exchange(rec, uid)
                    continue
                if rec.entry.op == OpKind.STORE:
                    self.fabric.send(self.actor, self.storage,
                                     StoreOp(entry=rec.entry, data=rec.data,
                                             accountable=self.mode == "async"))
                else:
                    self.fabric.send(self.actor, self.storage,
                                     FreeOp(entry=rec.entry,
                                            accountable=self.mode == "async"))
            except NoSuchReference:
                # A free that was logged but provably never applied; nothing
                # to undo, so retire its tag and drop the record.
                if self.mode == "sync":
                    self.stable.replace_log(name, self.stable.records(name)[1:])
                if rec.tag:
                    self.stable.put(f"vm.tagdone.{rec.tag.hex()}", b"\x01")
                continue
            kept.append(raw)
            self._track_pending(uid, rec)
        if self.mode != "sync":
            self.stable.replace_log(name, kept)
        return resent

    def quiesced(self) -> bool:
        if self.mode == "none":
            return True  # the baseline mode never grants, by construction
        if any(self.pending.get(u) for u in self.pending):
            return False
        return all(self.stable.log_len(name) == 0
                   for name in self.stable.log_names("vm.log."))
