"""Reference-count bookkeeping shared by the storage server and the l-hash
server.  Both sides must build bit-identical refcount-tree leaves from the
same op stream, so the leaf encoding lives here and nowhere else."""

from __future__ import annotations

from .ids import OpKind
from .messages import ByteReader, ByteWriter


def pattern_bytes(per_uid: dict[int, int]) -> bytes:
    """Canonical leaf value for one block: sorted (uid, signed count) pairs,
    zero counts omitted.  Counts go negative when one writer frees what
    another stored; both entries stay signature-backed."""
    items = sorted((u, c) for u, c in per_uid.items() if c != 0)
    w = ByteWriter()
    w.u16(len(items))
    for uid, count in items:
        w.u32(uid)
        w.u64(count & 0xFFFF_FFFF_FFFF_FFFF)  # two's complement i64
    return w.bytes()


def decode_pattern(raw: bytes) -> dict[int, int]:
    r = ByteReader(raw, "pattern")
    out: dict[int, int] = {}
    for _ in range(r.u16("pattern.n")):
        uid = r.u32("pattern.uid")
        count = r.u64("pattern.count")
        if count >= 1 << 63:
            count -= 1 << 64
        out[uid] = count
    r.done()
    return out


def apply_count(per_uid: dict[int, int], uid: int, op: OpKind, sign: int = 1) -> None:
    """Apply (or with sign=-1, undo) one op's effect on a per-uid count map."""
    delta = (1 if op == OpKind.STORE else -1) * sign
    new = per_uid.get(uid, 0) + delta
    if new == 0:
        per_uid.pop(uid, None)
    else:
        per_uid[uid] = new
