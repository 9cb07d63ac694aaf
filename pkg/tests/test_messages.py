"""Wire format: roundtrips, canonical bytes, and decode failure reporting.

The golden fixtures freeze the byte layout.  A failing golden test means the
format changed: stored grants and retained evidence from older runs would
stop verifying, so bump deliberately, never casually.
"""

import pathlib

import pytest

from safius.crypto import HashScheme, Signature
from safius.errors import DecodeError
from safius.ids import Idata, InodeNumber, OpKind, PairOp
from safius.messages import (ALL_TYPES, BatchEntry, BatchHeader, GrantBatch,
                             GrantSingle, IdataPair, RequestBatch,
                             RequestSingle, SessionNonce, SignedGrant,
                             SignedRequest, StoreInodeDataMsg, decode,
                             payload_digest)

GOLDEN = pathlib.Path(__file__).parent / "data" / "golden"
SCHEME = HashScheme()


def _blk(label: bytes) -> bytes:
    return SCHEME.digest(label)


def _samples() -> dict[str, object]:
    nonce = SessionNonce(value=0x1122334455667788, principal=0x0A0B)
    ino = InodeNumber(node=3, owner=0x0A0B, seq=0x0102)
    req = RequestSingle(blknum=_blk(b"blk-one"), ino=ino, uid=0x0A0B,
                        op=OpKind.STORE, nonce=nonce, count=5)
    entry = BatchEntry(blknum=_blk(b"blk-two"), ino=ino, op=OpKind.FREE,
                       nonce=nonce, count=6)
    header = BatchHeader(uid=0x0A0B, count=2)
    usig = Signature(data=bytes(range(64)), signer=0x0A0B)
    ssig = Signature(data=bytes(reversed(range(64))), signer=0xFFFF_FFFF)
    batch = RequestBatch(header=header,
                         entries=(entry,
                                  BatchEntry(blknum=_blk(b"blk-three"),
                                             ino=ino, op=OpKind.STORE,
                                             nonce=nonce, count=7)),
                         sig=usig)
    pairs = (IdataPair(ino=ino,
                       idata=Idata(inode_hash=_blk(b"inode"), incarnation=9)),
             IdataPair(ino=InodeNumber(3, 0x0A0B, 0x0103),
                       idata=Idata(inode_hash=_blk(b"gone"), incarnation=2),
                       op=PairOp.UNLINK, origin=3))
    return {
        "request_single": req,
        "grant_single": GrantSingle(inner=req, fgrphash=_blk(b"fgrp")),
        "batch_entry": entry,
        "batch_header": header,
        "request_batch": batch,
        "grant_batch": GrantBatch(inner=batch, fgrphash=_blk(b"fgrp"),
                                  sig=ssig),
        "store_inode_data": StoreInodeDataMsg(txid=41, pairs=pairs),
        "signed_request": SignedRequest(req=req, sig=usig),
        "signed_grant": SignedGrant(grant=GrantSingle(inner=req,
                                                      fgrphash=_blk(b"fgrp")),
                                    sig=ssig),
    }


def test_samples_cover_every_type():
    built = {type(m) for m in _samples().values()}
    assert built == set(ALL_TYPES)


@pytest.mark.parametrize("name", sorted(_samples()))
def test_roundtrip(name):
    msg = _samples()[name]
    assert decode(msg.encode()) == msg


@pytest.mark.parametrize("name", sorted(_samples()))
def test_golden_bytes(name):
    msg = _samples()[name]
    path = GOLDEN / f"{name}.hex"
    assert path.exists(), f"golden fixture missing: {path}"
    assert msg.encode().hex() == path.read_text().strip()


def test_encode_is_canonical():
    # Equal messages encode identically; payload digests key dedup caches.
    a, b = _samples()["request_batch"], _samples()["request_batch"]
    assert a is not b and a.encode() == b.encode()
    assert payload_digest(SCHEME, a) == payload_digest(SCHEME, b)


def test_any_entry_mutation_changes_batch_digest():
    batch = _samples()["request_batch"]
    base = payload_digest(SCHEME, batch)
    e = batch.entries[0]
    variants = [
        BatchEntry(_blk(b"other"), e.ino, e.op, e.nonce, e.count),
        BatchEntry(e.blknum, InodeNumber(4, e.ino.owner, e.ino.seq), e.op,
                   e.nonce, e.count),
        BatchEntry(e.blknum, e.ino,
                   OpKind.STORE if e.op == OpKind.FREE else OpKind.FREE,
                   e.nonce, e.count),
        BatchEntry(e.blknum, e.ino, e.op,
                   SessionNonce(e.nonce.value + 1, e.nonce.principal),
                   e.count),
        BatchEntry(e.blknum, e.ino, e.op, e.nonce, e.count + 1),
    ]
    digests = {base}
    for v in variants:
        mutated = RequestBatch(header=batch.header,
                               entries=(v, batch.entries[1]), sig=batch.sig)
        digests.add(payload_digest(SCHEME, mutated))
    assert len(digests) == len(variants) + 1


def test_signing_digest_excludes_signature():
    batch = _samples()["request_batch"]
    resigned = RequestBatch(header=batch.header, entries=batch.entries,
                            sig=Signature(data=b"\x7f" * 64, signer=0x0A0B))
    assert batch.signing_digest(SCHEME) == resigned.signing_digest(SCHEME)
    assert batch.encode() != resigned.encode()


@pytest.mark.parametrize("name", sorted(_samples()))
def test_every_truncation_is_rejected_with_location(name):
    data = _samples()[name].encode()
    for cut in range(len(data)):
        with pytest.raises(DecodeError) as err:
            decode(data[:cut])
        assert "offset" in str(err.value)


def test_trailing_garbage_rejected():
    data = _samples()["request_single"].encode()
    with pytest.raises(DecodeError):
        decode(data + b"\x00")


def test_unknown_tag_rejected():
    with pytest.raises(DecodeError):
        decode(b"\xee" + b"\x00" * 8)
    with pytest.raises(DecodeError):
        decode(b"")


def test_batch_header_count_binds_entry_list():
    batch = _samples()["request_batch"]
    lying = RequestBatch(header=BatchHeader(uid=batch.header.uid, count=3),
                         entries=batch.entries, sig=batch.sig)
    with pytest.raises(DecodeError):
        decode(lying.encode())
