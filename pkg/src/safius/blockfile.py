"""Copy-on-write file layout over the content-addressed store.

A file is an inode block holding metadata plus twelve direct pointers, one
single-indirect pointer and one double-indirect pointer; indirect nodes are
flat arrays of block names (fanout = block size / digest width).  Nothing is
ever overwritten: changing one leaf stores a new leaf, new nodes along its
pointer path, and a new inode block.  FileImage is the in-memory working
copy that tracks exactly which committed blocks each change supersedes, so
transaction code can free them on commit (or free the new ones on abort).
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .crypto import HashScheme
from .errors import FileTooLarge
from .ids import BLOCK_SIZE
from .messages import ByteReader, ByteWriter

NDIRECT = 12

KIND_FILE = 1
KIND_DIR = 2

_INODE_MAGIC = 0x49


def fanout(scheme: HashScheme) -> int:
    return BLOCK_SIZE // scheme.width


def max_leaves(scheme: HashScheme) -> int:
    f = fanout(scheme)
    return NDIRECT + f + f * f


@dataclass
class InodeMeta:
    kind: int
    fgrp: int
    link_count: int = 1
    size: int = 0


def encode_inode(meta: InodeMeta, direct: list[bytes | None],
                 ind1: bytes | None, ind2: bytes | None) -> bytes:
    w = ByteWriter()
    w.u8(_INODE_MAGIC)
    w.u8(meta.kind)
    w.u32(meta.link_count)
    w.u32(meta.fgrp)
    w.u64(meta.size)
    for i in range(NDIRECT):
        ptr = direct[i] if i < len(direct) else None
        w.digest(ptr or b"")
    w.digest(ind1 or b"")
    w.digest(ind2 or b"")
    return w.bytes()


def decode_inode(raw: bytes) -> tuple[InodeMeta, list[bytes | None],
                                      bytes | None, bytes | None]:
    r = ByteReader(raw, "inode")
    if r.u8("magic") != _INODE_MAGIC:
        raise ValueError("not an inode block")
    meta = InodeMeta(kind=r.u8("kind"), link_count=r.u32("link_count"),
                     fgrp=r.u32("fgrp"), size=r.u64("size"))
    direct = [r.digest(f"direct{i}") or None for i in range(NDIRECT)]
    ind1 = r.digest("ind1") or None
    ind2 = r.digest("ind2") or None
    r.done()
    return meta, direct, ind1, ind2


def _node_bytes(ptrs: list[bytes | None], scheme: HashScheme) -> bytes:
    zero = b"\x00" * scheme.width
    out = bytearray()
    for i in range(fanout(scheme)):
        ptr = ptrs[i] if i < len(ptrs) else None
        out += ptr if ptr else zero
    return bytes(out)


def _node_ptrs(raw: bytes, scheme: HashScheme) -> list[bytes | None]:
    zero = b"\x00" * scheme.width
    w = scheme.width
    return [None if raw[i:i + w] == zero else raw[i:i + w]
            for i in range(0, fanout(scheme) * w, w)]


@dataclass
class FileImage:
    """One file's working copy: metadata, the materialized leaf pointer
    list, and bookkeeping about the committed intermediates it came from."""

    meta: InodeMeta
    ptrs: list[bytes | None] = field(default_factory=list)
    dirty: set[int] = field(default_factory=set)
    staged_plain: dict[int, bytes] = field(default_factory=dict)
    old_ind1: bytes | None = None
    old_ind2: bytes | None = None
    old_l1: dict[int, bytes] = field(default_factory=dict)  # group -> blknum
    meta_dirty: bool = False

    def is_dirty(self) -> bool:
        return bool(self.dirty) or self.meta_dirty


def new_image(meta: InodeMeta) -> FileImage:
    return FileImage(meta=meta, meta_dirty=True)


def load_image(vm, scheme: HashScheme, inode_block: bytes) -> FileImage:
    """Materialize the pointer list, reading whatever indirect nodes exist.
    Their block names are remembered so a later build can free them."""
    meta, direct, ind1, ind2 = decode_inode(inode_block)
    f = fanout(scheme)
    ptrs: list[bytes | None] = list(direct)
    old_l1: dict[int, bytes] = {}
    if ind1 is not None:
        ptrs += _node_ptrs(vm.vm_read(ind1, meta.fgrp), scheme)
    else:
        ptrs += [None] * f
    if ind2 is not None:
        l2 = _node_ptrs(vm.vm_read(ind2, meta.fgrp), scheme)
        for g, l1_blk in enumerate(l2):
            if l1_blk is None:
                ptrs += [None] * f
            else:
                old_l1[g] = l1_blk
                ptrs += _node_ptrs(vm.vm_read(l1_blk, meta.fgrp), scheme)
    nleaves = (meta.size + BLOCK_SIZE - 1) // BLOCK_SIZE
    ptrs = ptrs[:max(nleaves, NDIRECT)]
    while len(ptrs) > nleaves and ptrs and ptrs[-1] is None:
        ptrs.pop()
    return FileImage(meta=meta, ptrs=ptrs, old_ind1=ind1, old_ind2=ind2,
                     old_l1=old_l1)


def read_range(vm, image: FileImage, off: int, length: int) -> bytes:
    """Read through the working copy: staged leaves first, then committed
    blocks, holes as zeros.  Reads past size are truncated."""
    if off >= image.meta.size:
        return b""
    length = min(length, image.meta.size - off)
    out = bytearray()
    idx = off // BLOCK_SIZE
    pos = off % BLOCK_SIZE
    while length > 0:
        chunk = min(BLOCK_SIZE - pos, length)
        plain = image.staged_plain.get(idx)
        if plain is None:
            ptr = image.ptrs[idx] if idx < len(image.ptrs) else None
            plain = vm.vm_read(ptr, image.meta.fgrp) if ptr else b"\x00" * BLOCK_SIZE
        out += plain[pos:pos + chunk]
        idx += 1
        pos = 0
        length -= chunk
    return bytes(out)


def write_range(vm, scheme: HashScheme, image: FileImage, off: int,
                data: bytes, store) -> list[tuple[bytes | None, bytes]]:
    """Stage a write.  Affected leaves are stored immediately through the
    injected `store(plaintext) -> blknum` callable (which is where intent
    logging and transmission happen); pointer-path nodes wait for build().
    Returns (replaced, new) block name pairs, one per touched leaf."""
    if not data:
        return []
    end = off + len(data)
    if (end + BLOCK_SIZE - 1) // BLOCK_SIZE > max_leaves(scheme):
        raise FileTooLarge(f"{end} bytes")
    replaced: list[tuple[bytes | None, bytes]] = []
    idx = off // BLOCK_SIZE
    pos = off % BLOCK_SIZE
    dpos = 0
    while dpos < len(data):
        chunk = min(BLOCK_SIZE - pos, len(data) - dpos)
        old_plain = image.staged_plain.get(idx)
        old_ptr = image.ptrs[idx] if idx < len(image.ptrs) else None
        if chunk < BLOCK_SIZE:
            if old_plain is None:
                old_plain = (vm.vm_read(old_ptr, image.meta.fgrp) if old_ptr
                             else b"\x00" * BLOCK_SIZE)
            merged = bytearray(old_plain.ljust(BLOCK_SIZE, b"\x00"))
            merged[pos:pos + chunk] = data[dpos:dpos + chunk]
            plain = bytes(merged)
        else:
            plain = data[dpos:dpos + chunk]
        new_blk = store(plain)
        while len(image.ptrs) <= idx:
            image.ptrs.append(None)
        replaced.append((old_ptr, new_blk))
        image.ptrs[idx] = new_blk
        image.staged_plain[idx] = plain
        image.dirty.add(idx)
        idx += 1
        pos = 0
        dpos += chunk
    image.meta.size = max(image.meta.size, end)
    image.meta_dirty = True
    return replaced


def truncate(image: FileImage, new_size: int) -> list[tuple[bytes, bool]]:
    """Shrink the file, returning (block name, was_staged) for each leaf
    that fell off.  Staged leaves were stored this transaction and must be
    freed either way; committed ones are freed only on commit.  Only
    directories shrink in practice (whole-content rewrites)."""
    removed: list[tuple[bytes, bool]] = []
    nleaves = (new_size + BLOCK_SIZE - 1) // BLOCK_SIZE
    for idx in range(nleaves, len(image.ptrs)):
        if image.ptrs[idx] is not None:
            removed.append((image.ptrs[idx], idx in image.staged_plain))
        image.staged_plain.pop(idx, None)
        image.dirty.add(idx)
    del image.ptrs[nleaves:]
    image.meta.size = new_size
    image.meta_dirty = True
    return removed


def build(scheme: HashScheme, image: FileImage, store) \
        -> tuple[bytes, list[bytes]]:
    """Rebuild the pointer path for every dirty leaf and encode the new
    inode block.  Returns (inode block plaintext, committed intermediate
    blocks this version supersedes).  The caller stores the inode block
    itself and frees the old one; build only handles the interior."""
    f = fanout(scheme)
    frees: list[bytes] = []
    direct = image.ptrs[:NDIRECT]
    single = image.ptrs[NDIRECT:NDIRECT + f]
    double = image.ptrs[NDIRECT + f:]

    ind1 = image.old_ind1
    if any(idx in image.dirty for idx in range(NDIRECT, NDIRECT + f)) \
            or (ind1 is not None and not any(single)):
        if image.old_ind1 is not None:
            frees.append(image.old_ind1)
        ind1 = store(_node_bytes(single, scheme)) if any(single) else None

    ind2 = image.old_ind2
    dirty_groups = sorted({(idx - NDIRECT - f) // f for idx in image.dirty
                           if idx >= NDIRECT + f})
    if dirty_groups or (ind2 is not None and not any(double)):
        ngroups = (len(double) + f - 1) // f
        l2_ptrs: list[bytes | None] = []
        for g in range(ngroups):
            slice_ = double[g * f:(g + 1) * f]
            if g in dirty_groups:
                if g in image.old_l1:
                    frees.append(image.old_l1.pop(g))
                if any(slice_):
                    blk = store(_node_bytes(slice_, scheme))
                    image.old_l1[g] = blk
                    l2_ptrs.append(blk)
                else:
                    l2_ptrs.append(None)
            else:
                l2_ptrs.append(image.old_l1.get(g))
        for g in sorted(image.old_l1):
            if g >= ngroups:
                frees.append(image.old_l1.pop(g))
        if image.old_ind2 is not None:
            frees.append(image.old_ind2)
        ind2 = store(_node_bytes(l2_ptrs, scheme)) if any(l2_ptrs) else None

    image.old_ind1 = ind1
    image.old_ind2 = ind2
    image.dirty.clear()
    image.staged_plain.clear()
    image.meta_dirty = False
    return encode_inode(image.meta, direct, ind1, ind2), frees
