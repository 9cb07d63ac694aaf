"""Storage server behavior: counts, sessions, batches, deadlines, replay.

The randomized oracle run is the load-bearing test: the server's reference
counts and count tree must match a naive replay of the same op stream no
matter how ops interleave across users and filegroups.
"""

import random

import pytest

from conftest import storage_kit
from safius.counts import apply_count, pattern_bytes
from safius.crypto import MerkleMap
from safius.errors import (AccessDenied, BlockNotFound, NoSuchReference,
                           RejectedBatch, Replay, UnknownSession)
from safius.ids import ITBL_FGRP, InodeNumber, OpKind
from safius.messages import BatchEntry, SessionNonce
from safius.stable import StableStore
from safius.storage import FreeOp, StorageServer, StoreOp

UIDS = (101, 102, 103)
FGRPS = {0x11: ({101, 102}, {103}), 0x12: ({102, 103}, set())}


def _ino(owner: int, k: int, fgrp: int) -> InodeNumber:
    # The FgrpStub reads the filegroup from the low byte of seq.
    return InodeNumber(1, owner, (k << 8) | fgrp)


def _store(vm, uid, ino, payload, fgrp):
    blknum, ciphertext = vm.prepare_store(payload, fgrp)
    vm.submit_store(blknum, ciphertext, ino, uid)
    return blknum


def test_counts_match_naive_oracle_over_random_stream():
    rng = random.Random(1009)
    fabric, server, vms = storage_kit(uids=UIDS, fgrps=FGRPS, label="oracle")
    refs: dict[bytes, dict[InodeNumber, int]] = {}
    per_uid: dict[bytes, dict[int, int]] = {}
    live: list[tuple[bytes, InodeNumber, int]] = []  # (blk, ino, fgrp)
    payloads: list[tuple[bytes, int]] = []

    def oracle_apply(blk, ino, uid, op):
        by_ino = refs.setdefault(blk, {})
        by_ino[ino] = by_ino.get(ino, 0) + (1 if op == OpKind.STORE else -1)
        if by_ino[ino] == 0:
            del by_ino[ino]
        if not by_ino:
            del refs[blk]
        counts = per_uid.setdefault(blk, {})
        apply_count(counts, uid, op)
        if not counts:
            del per_uid[blk]

    for step in range(10_000):
        if live and rng.random() < 0.45:
            blk, ino, fgrp = live[rng.randrange(len(live))]
            writers, readers = FGRPS[fgrp]
            uid = rng.choice(sorted(writers | readers | {ino.owner}))
            assert vms[uid].vm_free(blk, ino, uid)
            oracle_apply(blk, ino, uid, OpKind.FREE)
            live.remove((blk, ino, fgrp))
        else:
            fgrp = rng.choice(sorted(FGRPS))
            writers, _ = FGRPS[fgrp]
            owner = rng.choice(sorted(writers))
            ino = _ino(owner, rng.randrange(1, 40), fgrp)
            if payloads and rng.random() < 0.3:
                payload, fgrp_prev = payloads[rng.randrange(len(payloads))]
                if fgrp_prev != fgrp:
                    payload = rng.randbytes(rng.randrange(16, 200))
            else:
                payload = rng.randbytes(rng.randrange(16, 200))
            payloads.append((payload, fgrp))
            blk = _store(vms[owner], owner, ino, payload, fgrp)
            oracle_apply(blk, ino, owner, OpKind.STORE)
            live.append((blk, ino, fgrp))
        if rng.random() < 0.002:
            vms[rng.choice(UIDS)].flush(rng.choice(UIDS))

    for uid in UIDS:
        assert vms[uid].flush(uid)
    assert not server.has_pending()

    assert server.refs == refs
    assert server.per_uid == per_uid
    expected = MerkleMap(server.scheme)
    for blk, counts in per_uid.items():
        expected.put(blk, pattern_bytes(counts))
    assert server.tree.root() == expected.root()


# -- sessions and replay ------------------------------------------------------


def test_op_without_session_rejected():
    fabric, server, vms = storage_kit(uids=(7,), label="sess")
    entry = BatchEntry(blknum=server.scheme.digest(b"x"),
                       ino=InodeNumber(1, 7, 1), op=OpKind.STORE,
                       nonce=SessionNonce(value=99, principal=7), count=1)
    with pytest.raises(UnknownSession):
        server.handle_store(StoreOp(entry=entry, data=b"x", accountable=True))


def test_retransmission_is_benign_but_mutation_is_replay():
    fabric, server, vms = storage_kit(uids=(7,), label="replay")
    vm = vms[7]
    ino = InodeNumber(1, 7, 1)
    blk = _store(vm, 7, ino, b"payload", 3)
    entry = server.pending[(7, vm.sessions[7][0].value)][0].entry
    data = vm.cipher.encrypt(3, b"payload")
    before = dict(server.refs[blk])
    server.handle_store(StoreOp(entry=entry, data=data, accountable=True))
    assert server.refs[blk] == before, "duplicate must not double count"
    forged = BatchEntry(blknum=server.scheme.digest(b"other"), ino=ino,
                        op=OpKind.STORE, nonce=entry.nonce, count=entry.count)
    with pytest.raises(Replay):
        server.handle_store(StoreOp(entry=forged, data=b"other",
                                    accountable=True))


# -- access control -------------------------------------------------------------


def test_non_writer_store_denied_reader_free_allowed():
    fabric, server, vms = storage_kit(uids=UIDS, fgrps=FGRPS, label="acl")
    ino = _ino(101, 1, 0x11)   # writers {101,102}, readers {103}
    blk = _store(vms[101], 101, ino, b"shared", 0x11)
    # 103 is a reader: store denied, free allowed (last-closer finalization).
    entry = vms[103]._next_entry(blk, ino, 103, OpKind.STORE)
    data = vms[103].cipher.encrypt(0x11, b"more")
    with pytest.raises(AccessDenied):
        server.handle_store(StoreOp(entry=BatchEntry(
            blknum=server.scheme.digest(data), ino=ino, op=OpKind.STORE,
            nonce=entry.nonce, count=entry.count), data=data,
            accountable=True))
    assert vms[103].vm_free(blk, ino, 103)
    assert blk not in server.blocks


def test_outsider_free_denied():
    extra = dict(FGRPS)
    fabric, server, vms = storage_kit(uids=(101, 102, 104), fgrps=extra,
                                      label="acl2")
    ino = _ino(101, 1, 0x11)
    blk = _store(vms[101], 101, ino, b"shared", 0x11)
    entry = vms[104]._next_entry(blk, ino, 104, OpKind.FREE)
    with pytest.raises(AccessDenied):
        server.handle_free(FreeOp(entry=entry, accountable=True))


def test_free_of_dead_reference_rejected():
    fabric, server, vms = storage_kit(uids=(7,), label="dead")
    assert not vms[7].vm_free(server.scheme.digest(b"never"),
                              InodeNumber(1, 7, 1), 7)


# -- batch coverage -------------------------------------------------------------


def _snapshot(server):
    return (dict(server.blocks),
            {k: dict(v) for k, v in server.refs.items()},
            {k: dict(v) for k, v in server.per_uid.items()},
            {k: list(v) for k, v in server.seen.items()},
            {k: [p.entry for p in v] for k, v in server.pending.items()},
            server.tree.root())


def test_rejected_batch_leaves_state_bitwise_unchanged():
    fabric, server, vms = storage_kit(uids=(7,), label="atomic")
    vm = vms[7]
    ino = InodeNumber(1, 7, 1)
    _store(vm, 7, ino, b"one", 3)
    _store(vm, 7, ino, b"two", 3)
    before = _snapshot(server)
    # A batch that covers the window then trips on a bad new op must undo
    # its own applications and restore the pending records it consumed.
    entries = [rec.entry for rec in vm.pending[7]]
    bad = vm._next_entry(server.scheme.digest(b"ghost"), ino, 7, OpKind.FREE)
    batch = vm._build_batch(7, entries + [bad])
    from safius.storage import BatchMsg
    with pytest.raises(RejectedBatch):
        server.verify_and_grant(BatchMsg(batch=batch, data=()))
    assert _snapshot(server) == before


def test_batch_must_cover_whole_window_in_order():
    fabric, server, vms = storage_kit(uids=(7,), label="cover")
    vm = vms[7]
    ino = InodeNumber(1, 7, 1)
    _store(vm, 7, ino, b"one", 3)
    _store(vm, 7, ino, b"two", 3)
    entries = [rec.entry for rec in vm.pending[7]]
    from safius.storage import BatchMsg
    with pytest.raises(RejectedBatch, match="uncovered"):
        server.verify_and_grant(
            BatchMsg(batch=vm._build_batch(7, entries[1:]), data=()))
    with pytest.raises(RejectedBatch, match="uncovered"):
        server.verify_and_grant(
            BatchMsg(batch=vm._build_batch(7, entries[::-1]), data=()))
    assert vm.flush(7), "well-formed flush still goes through"


def test_two_sessions_one_uid_cover_independently():
    # One principal acting through two clients: each batch covers only the
    # session it names; the other window stays open.
    fabric, server, vms = storage_kit(uids=(7,), label="twosess")
    vm1 = vms[7]
    from safius.volume import VolumeManager
    vm2 = VolumeManager("fs7b", fabric, vm1.registry, vm1.scheme, vm1.cipher,
                        StableStore(), seed_label="twosess.b", mode="async",
                        lhash=None)
    ino = InodeNumber(1, 7, 1)
    _store(vm1, 7, ino, b"from-client-one", 3)
    _store(vm2, 7, ino, b"from-client-two", 3)
    assert len(server.pending) == 2
    assert vm1.flush(7)
    sess2 = (7, vm2.sessions[7][0].value)
    assert [p.entry for p in server.pending[sess2]], \
        "client two's window must survive client one's grant"
    assert vm2.flush(7)
    assert not server.has_pending()


# -- deadline rollback ----------------------------------------------------------


def test_deadline_rollback_restores_state_and_rejects_late_batch():
    fabric, server, vms = storage_kit(uids=(7,), label="deadline",
                                      deadline=100)
    vm = vms[7]
    ino = InodeNumber(1, 7, 1)
    before = _snapshot(server)
    blk = _store(vm, 7, ino, b"doomed", 3)
    fabric.clock.advance(101)
    server.poll(fabric.clock.now)
    assert server.flags and "rolled-back" in server.flags[0]
    after = _snapshot(server)
    # seen keeps the tombstone; everything else returns to the prior state.
    assert after[0] == before[0] and after[1] == before[1]
    assert after[2] == before[2] and after[5] == before[5]
    assert blk not in server.blocks
    with pytest.raises(RejectedBatch, match="expired"):
        vm.flush(7)


def test_rollback_restores_bytes_freed_inside_the_window():
    fabric, server, vms = storage_kit(uids=(7,), label="savebytes",
                                      deadline=100)
    vm = vms[7]
    ino = InodeNumber(1, 7, 1)
    blk = _store(vm, 7, ino, b"keep me", 3)
    assert vm.flush(7)                       # store is covered and final
    payload = server.blocks[blk]
    assert vm.vm_free(blk, ino, 7)           # free sits in the new window
    assert blk not in server.blocks
    fabric.clock.advance(101)
    server.poll(fabric.clock.now)
    assert server.blocks[blk] == payload, "expired free must restore bytes"
    assert server.refs[blk] == {ino: 1}


def test_cross_session_rollback_unwinds_in_reverse_acceptance_order():
    fabric, server, vms = storage_kit(uids=UIDS, fgrps=FGRPS,
                                      label="xroll", deadline=100)
    ino = _ino(101, 1, 0x11)
    blk = _store(vms[101], 101, ino, b"contested", 0x11)
    assert vms[102].vm_free(blk, ino, 102)   # both ops pending, freer second
    fabric.clock.advance(101)
    server.poll(fabric.clock.now)
    assert blk not in server.blocks and blk not in server.refs
    assert blk not in server.per_uid
    assert not server.has_pending()


def test_covered_free_consuming_pending_store_survives_rollback():
    # 102 frees a block whose only reference is 101's still-unsigned store,
    # and 102's batch is granted.  When 101's window expires the server can
    # only reverse the charge; the signed free already consumed the bytes.
    fabric, server, vms = storage_kit(uids=UIDS, fgrps=FGRPS,
                                      label="consumed", deadline=100)
    ino = _ino(101, 1, 0x11)
    blk = _store(vms[101], 101, ino, b"taken", 0x11)
    assert vms[102].vm_free(blk, ino, 102)
    assert vms[102].flush(102)
    fabric.clock.advance(101)
    server.poll(fabric.clock.now)
    assert blk not in server.blocks
    assert blk not in server.refs
    assert server.per_uid.get(blk) == {102: -1}, \
        "the granted free remains on the books; the unsigned store does not"


# -- durability -----------------------------------------------------------------


def test_replay_rebuilds_identical_state():
    fabric, server, vms = storage_kit(uids=UIDS, fgrps=FGRPS, label="dur",
                                      deadline=150)
    rng = random.Random(77)
    live = []
    for k in range(1, 30):
        fgrp = rng.choice(sorted(FGRPS))
        owner = rng.choice(sorted(FGRPS[fgrp][0]))
        ino = _ino(owner, k, fgrp)
        blk = _store(vms[owner], owner, ino, rng.randbytes(48), fgrp)
        live.append((blk, ino, fgrp, owner))
    for blk, ino, fgrp, owner in live[:8]:
        assert vms[owner].vm_free(blk, ino, owner)
    assert vms[101].flush(101)
    assert vms[102].flush(102)
    # 103's window expires instead of being covered; the rollback is logged.
    blk, ino, fgrp, _ = live[10]
    assert vms[103].vm_free(blk, ino, 103)
    fabric.clock.advance(151)
    server.poll(fabric.clock.now)
    server.adv_drop_block(live[3][0])
    server.adv_forge_charge(server.scheme.digest(b"forged"),
                            _ino(101, 39, 0x11), 101)

    reborn = StorageServer(fabric, server.registry, server.scheme,
                           server.stable, lhash="lhash",
                           pending_deadline=150)
    assert reborn.blocks == server.blocks
    assert reborn.refs == server.refs
    assert reborn.per_uid == server.per_uid
    assert reborn.seen == server.seen
    assert reborn.sessions == server.sessions
    assert reborn.tree.root() == server.tree.root()
    assert ({k: [(p.entry, p.born) for p in v]
             for k, v in reborn.pending.items() if v}
            == {k: [(p.entry, p.born) for p in v]
                for k, v in server.pending.items() if v})
    assert reborn.retained == server.retained
    assert reborn.grant_cache == server.grant_cache


def test_grant_cache_returns_identical_grant_without_resigning():
    fabric, server, vms = storage_kit(uids=(7,), label="cache")
    vm = vms[7]
    ino = InodeNumber(1, 7, 1)
    _store(vm, 7, ino, b"cached", 3)
    entries = [rec.entry for rec in vm.pending[7]]
    batch = vm._build_batch(7, entries)
    from safius.storage import BatchMsg
    data = tuple((rec.entry.blknum, rec.data) for rec in vm.pending[7])
    first = server.verify_and_grant(BatchMsg(batch=batch, data=data))
    signs = [0]
    server.registry.observers.append(
        lambda kind: signs.__setitem__(0, signs[0] + (kind == "sign")))
    again = server.verify_and_grant(BatchMsg(batch=batch, data=data))
    assert again.encode() == first.encode()
    assert signs[0] == 0, "replayed batch must come from the grant cache"


# -- pruning --------------------------------------------------------------------


def test_prune_requires_matching_root():
    fabric, server, vms = storage_kit(uids=(7,), label="prune")
    vm = vms[7]
    _store(vm, 7, InodeNumber(1, 7, 1), b"evidence", 3)
    assert vm.flush(7)
    assert server.retained
    from safius.storage import PruneMismatch
    assert isinstance(server.prune_root(server.scheme.digest(b"wrong")),
                      PruneMismatch)
    assert server.retained, "mismatch must not discard evidence"
    outcome = server.prune_root(server.tree.root())
    assert not isinstance(outcome, PruneMismatch)
    assert not server.retained and not server.grant_cache
    assert server.agreement_root == server.tree.root()
