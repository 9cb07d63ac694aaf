"""Canonical wire encodings for every signed or persisted protocol message.

Encoding rules, fixed forever: little-endian fixed-width integers, length
prefixes for variable bytes (u8 for digests, u16 for signatures, u32 for
data), a one-byte type tag in front of every message, fields in declaration
order, no optional fields.  A value has exactly one encoding, so byte
equality of encodings is value equality -- the grant echo check and the
golden fixtures both lean on that.
"""

from __future__ import annotations

from dataclasses import dataclass

from .crypto import HashScheme, Signature
from .errors import DecodeError
from .ids import Idata, InodeNumber, OpKind, PairOp

TAG_REQUEST_SINGLE = 1
TAG_GRANT_SINGLE = 2
TAG_BATCH_ENTRY = 3
TAG_BATCH_HEADER = 4
TAG_REQUEST_BATCH = 5
TAG_GRANT_BATCH = 6
TAG_STORE_INODE_DATA = 7
TAG_SIGNED_REQUEST = 8
TAG_SIGNED_GRANT = 9


class ByteWriter:
    def __init__(self):
        self.buf = bytearray()

    def u8(self, v: int):
        self.buf += v.to_bytes(1, "little")

    def u16(self, v: int):
        self.buf += v.to_bytes(2, "little")

    def u32(self, v: int):
        self.buf += v.to_bytes(4, "little")

    def u64(self, v: int):
        self.buf += v.to_bytes(8, "little")

    def digest(self, v: bytes):
        if len(v) > 255:
            raise ValueError("digest too wide")
        self.u8(len(v))
        self.buf += v

    def sig_bytes(self, v: bytes):
        self.u16(len(v))
        self.buf += v

    def blob(self, v: bytes):
        self.u32(len(v))
        self.buf += v

    def raw(self, v: bytes):
        self.buf += v

    def bytes(self) -> bytes:
        return bytes(self.buf)


class ByteReader:
    """Tracks the absolute offset so decode failures can name the field and
    the byte position that broke."""

    def __init__(self, data: bytes, label: str = "message"):
        self.data = data
        self.off = 0
        self.label = label

    def _take(self, n: int, field: str) -> bytes:
        if self.off + n > len(self.data):
            raise DecodeError(
                f"{self.label}.{field}: need {n} bytes at offset {self.off}, "
                f"have {len(self.data) - self.off}")
        out = self.data[self.off:self.off + n]
        self.off += n
        return out

    def take(self, n: int, field: str) -> bytes:
        return self._take(n, field)

    def u8(self, field: str) -> int:
        return self._take(1, field)[0]

    def u16(self, field: str) -> int:
        return int.from_bytes(self._take(2, field), "little")

    def u32(self, field: str) -> int:
        return int.from_bytes(self._take(4, field), "little")

    def u64(self, field: str) -> int:
        return int.from_bytes(self._take(8, field), "little")

    def digest(self, field: str) -> bytes:
        n = self.u8(field)
        return self._take(n, field)

    def sig_bytes(self, field: str) -> bytes:
        n = self.u16(field)
        return self._take(n, field)

    def blob(self, field: str) -> bytes:
        n = self.u32(field)
        return self._take(n, field)

    def expect_tag(self, tag: int, field: str):
        got = self.u8(field)
        if got != tag:
            raise DecodeError(
                f"{self.label}.{field}: tag {got} != {tag} at offset {self.off - 1}")

    def done(self):
        if self.off != len(self.data):
            raise DecodeError(
                f"{self.label}: {len(self.data) - self.off} trailing bytes "
                f"at offset {self.off}")


def _w_sig(w: ByteWriter, sig: Signature):
    w.sig_bytes(sig.data)
    w.u32(sig.signer)


def _r_sig(r: ByteReader, field: str) -> Signature:
    data = r.sig_bytes(field)
    signer = r.u32(field + ".signer")
    return Signature(data=data, signer=signer)


@dataclass(frozen=True)
class SessionNonce:
    """Session identity for replay protection: a fresh 64-bit value per
    (principal, session), paired with a per-session monotone counter."""

    value: int
    principal: int

    def write(self, w: ByteWriter):
        w.u64(self.value)
        w.u32(self.principal)

    @classmethod
    def read(cls, r: ByteReader, field: str) -> "SessionNonce":
        return cls(value=r.u64(field + ".value"),
                   principal=r.u32(field + ".principal"))


@dataclass(frozen=True)
class RequestSingle:
    """Per-operation request signed by the user: binds the block, the inode,
    the user, the direction (store/free) and the replay coordinates."""

    blknum: bytes
    ino: InodeNumber
    uid: int
    op: OpKind
    nonce: SessionNonce
    count: int

    def encode(self) -> bytes:
        w = ByteWriter()
        w.u8(TAG_REQUEST_SINGLE)
        w.digest(self.blknum)
        w.u64(self.ino.pack())
        w.u32(self.uid)
        w.u8(int(self.op))
        self.nonce.write(w)
        w.u64(self.count)
        return w.bytes()

    @classmethod
    def read(cls, r: ByteReader) -> "RequestSingle":
        r.expect_tag(TAG_REQUEST_SINGLE, "request_single.tag")
        return cls(
            blknum=r.digest("request_single.blknum"),
            ino=InodeNumber.unpack(r.u64("request_single.ino")),
            uid=r.u32("request_single.uid"),
            op=OpKind(r.u8("request_single.op")),
            nonce=SessionNonce.read(r, "request_single.nonce"),
            count=r.u64("request_single.count"),
        )


@dataclass(frozen=True)
class GrantSingle:
    """Storage server's receipt for one request: echoes the request verbatim
    and pins the filegroup-sharing state it was granted under."""

    inner: RequestSingle
    fgrphash: bytes

    def encode(self) -> bytes:
        w = ByteWriter()
        w.u8(TAG_GRANT_SINGLE)
        w.raw(self.inner.encode())
        w.digest(self.fgrphash)
        return w.bytes()

    @classmethod
    def read(cls, r: ByteReader) -> "GrantSingle":
        r.expect_tag(TAG_GRANT_SINGLE, "grant_single.tag")
        inner = RequestSingle.read(r)
        return cls(inner=inner, fgrphash=r.digest("grant_single.fgrphash"))


@dataclass(frozen=True)
class BatchEntry:
    """One operation inside a batch.  Deliberately carries no uid: the
    batch header binds the user once for all entries."""

    blknum: bytes
    ino: InodeNumber
    op: OpKind
    nonce: SessionNonce
    count: int

    def encode(self) -> bytes:
        w = ByteWriter()
        w.u8(TAG_BATCH_ENTRY)
        w.digest(self.blknum)
        w.u64(self.ino.pack())
        w.u8(int(self.op))
        self.nonce.write(w)
        w.u64(self.count)
        return w.bytes()

    @classmethod
    def read(cls, r: ByteReader) -> "BatchEntry":
        r.expect_tag(TAG_BATCH_ENTRY, "batch_entry.tag")
        return cls(
            blknum=r.digest("batch_entry.blknum"),
            ino=InodeNumber.unpack(r.u64("batch_entry.ino")),
            op=OpKind(r.u8("batch_entry.op")),
            nonce=SessionNonce.read(r, "batch_entry.nonce"),
            count=r.u64("batch_entry.count"),
        )

    def key(self) -> tuple:
        return (self.nonce.principal, self.nonce.value, self.count)


@dataclass(frozen=True)
class BatchHeader:
    uid: int
    count: int  # number of entries that follow; validated on decode

    def encode(self) -> bytes:
        w = ByteWriter()
        w.u8(TAG_BATCH_HEADER)
        w.u32(self.uid)
        w.u32(self.count)
        return w.bytes()

    @classmethod
    def read(cls, r: ByteReader) -> "BatchHeader":
        r.expect_tag(TAG_BATCH_HEADER, "batch_header.tag")
        return cls(uid=r.u32("batch_header.uid"),
                   count=r.u32("batch_header.count"))


@dataclass(frozen=True)
class RequestBatch:
    """Batched request: header + entries under a single user signature."""

    header: BatchHeader
    entries: tuple[BatchEntry, ...]
    sig: Signature

    def unsigned_bytes(self) -> bytes:
        w = ByteWriter()
        w.u8(TAG_REQUEST_BATCH)
        w.raw(self.header.encode())
        for e in self.entries:
            w.raw(e.encode())
        return w.bytes()

    def signing_digest(self, scheme: HashScheme) -> bytes:
        return scheme.digest(self.unsigned_bytes())

    def encode(self) -> bytes:
        w = ByteWriter()
        w.raw(self.unsigned_bytes())
        _w_sig(w, self.sig)
        return w.bytes()

    @classmethod
    def read(cls, r: ByteReader) -> "RequestBatch":
        r.expect_tag(TAG_REQUEST_BATCH, "request_batch.tag")
        header = BatchHeader.read(r)
        entries = tuple(BatchEntry.read(r) for _ in range(header.count))
        sig = _r_sig(r, "request_batch.sig")
        return cls(header=header, entries=entries, sig=sig)


@dataclass(frozen=True)
class GrantBatch:
    """Batched receipt.  `inner` must be byte-identical to the RequestBatch
    the client sent, signature included; the client enforces that."""

    inner: RequestBatch
    fgrphash: bytes
    sig: Signature

    def unsigned_bytes(self) -> bytes:
        w = ByteWriter()
        w.u8(TAG_GRANT_BATCH)
        w.raw(self.inner.encode())
        w.digest(self.fgrphash)
        return w.bytes()

    def signing_digest(self, scheme: HashScheme) -> bytes:
        return scheme.digest(self.unsigned_bytes())

    def encode(self) -> bytes:
        w = ByteWriter()
        w.raw(self.unsigned_bytes())
        _w_sig(w, self.sig)
        return w.bytes()

    @classmethod
    def read(cls, r: ByteReader) -> "GrantBatch":
        r.expect_tag(TAG_GRANT_BATCH, "grant_batch.tag")
        inner = RequestBatch.read(r)
        fgrphash = r.digest("grant_batch.fgrphash")
        sig = _r_sig(r, "grant_batch.sig")
        return cls(inner=inner, fgrphash=fgrphash, sig=sig)


@dataclass(frozen=True)
class IdataPair:
    ino: InodeNumber
    idata: Idata
    op: PairOp = PairOp.UPDATE
    origin: int = 0  # unlinking node, meaningful for UNLINK only

    def write(self, w: ByteWriter):
        w.u64(self.ino.pack())
        w.digest(self.idata.inode_hash)
        w.u64(self.idata.incarnation)
        w.u8(int(self.op))
        w.u16(self.origin)

    @classmethod
    def read(cls, r: ByteReader, field: str) -> "IdataPair":
        return cls(
            ino=InodeNumber.unpack(r.u64(field + ".ino")),
            idata=Idata(inode_hash=r.digest(field + ".hash"),
                        incarnation=r.u64(field + ".incarnation")),
            op=PairOp(r.u8(field + ".op")),
            origin=r.u16(field + ".origin"),
        )


@dataclass(frozen=True)
class StoreInodeDataMsg:
    """Atomic multi-inode version switch, the filesystem commit message."""

    txid: int
    pairs: tuple[IdataPair, ...]

    def encode(self) -> bytes:
        w = ByteWriter()
        w.u8(TAG_STORE_INODE_DATA)
        w.u64(self.txid)
        w.u32(len(self.pairs))
        for p in self.pairs:
            p.write(w)
        return w.bytes()

    @classmethod
    def read(cls, r: ByteReader) -> "StoreInodeDataMsg":
        r.expect_tag(TAG_STORE_INODE_DATA, "store_inode_data.tag")
        txid = r.u64("store_inode_data.txid")
        n = r.u32("store_inode_data.npairs")
        pairs = tuple(IdataPair.read(r, f"store_inode_data.pair{i}")
                      for i in range(n))
        return cls(txid=txid, pairs=pairs)


@dataclass(frozen=True)
class SignedRequest:
    """Transport envelope for the synchronous single-op path."""

    req: RequestSingle
    sig: Signature

    def encode(self) -> bytes:
        w = ByteWriter()
        w.u8(TAG_SIGNED_REQUEST)
        w.raw(self.req.encode())
        _w_sig(w, self.sig)
        return w.bytes()

    @classmethod
    def read(cls, r: ByteReader) -> "SignedRequest":
        r.expect_tag(TAG_SIGNED_REQUEST, "signed_request.tag")
        req = RequestSingle.read(r)
        sig = _r_sig(r, "signed_request.sig")
        return cls(req=req, sig=sig)


@dataclass(frozen=True)
class SignedGrant:
    grant: GrantSingle
    sig: Signature

    def encode(self) -> bytes:
        w = ByteWriter()
        w.u8(TAG_SIGNED_GRANT)
        w.raw(self.grant.encode())
        _w_sig(w, self.sig)
        return w.bytes()

    @classmethod
    def read(cls, r: ByteReader) -> "SignedGrant":
        r.expect_tag(TAG_SIGNED_GRANT, "signed_grant.tag")
        grant = GrantSingle.read(r)
        sig = _r_sig(r, "signed_grant.sig")
        return cls(grant=grant, sig=sig)


_READERS = {
    TAG_REQUEST_SINGLE: RequestSingle.read,
    TAG_GRANT_SINGLE: GrantSingle.read,
    TAG_BATCH_ENTRY: BatchEntry.read,
    TAG_BATCH_HEADER: BatchHeader.read,
    TAG_REQUEST_BATCH: RequestBatch.read,
    TAG_GRANT_BATCH: GrantBatch.read,
    TAG_STORE_INODE_DATA: StoreInodeDataMsg.read,
    TAG_SIGNED_REQUEST: SignedRequest.read,
    TAG_SIGNED_GRANT: SignedGrant.read,
}

ALL_TYPES = (RequestSingle, GrantSingle, BatchEntry, BatchHeader, RequestBatch,
             GrantBatch, StoreInodeDataMsg, SignedRequest, SignedGrant)


def decode(data: bytes):
    """Decode a tagged message, requiring the buffer to be consumed exactly."""
    if not data:
        raise DecodeError("message.tag: need 1 byte at offset 0, have 0")
    reader = _READERS.get(data[0])
    if reader is None:
        raise DecodeError(f"message.tag: unknown tag {data[0]} at offset 0")
    r = ByteReader(data)
    msg = reader(r)
    r.done()
    return msg


def payload_digest(scheme: HashScheme, msg) -> bytes:
    return scheme.digest(msg.encode())
