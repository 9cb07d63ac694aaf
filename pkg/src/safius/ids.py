"""Small value types and reserved identifiers used by every service."""

from __future__ import annotations

from dataclasses import dataclass
from enum import IntEnum

BLOCK_SIZE = 4096

# Signing principals.  User ids live in 1..65535 so they fit the owner field
# of an inode number; the two reserved principals sit outside that range or
# at its floor.
LHASH_PRINCIPAL = 0
STORAGE_PRINCIPAL = 0xFFFF_FFFF

LHASH_NODE = 0

# Filegroup 0 is reserved for the l-hash server's own metadata file.
ITBL_FGRP = 0


class OpKind(IntEnum):
    STORE = 0
    FREE = 1


class PairOp(IntEnum):
    """What a store-inode-data pair does to the inode table entry."""

    UPDATE = 0
    UNLINK = 1
    DELETE = 2


@dataclass(frozen=True, order=True)
class InodeNumber:
    """Globally unique inode number: allocating node, owning user, local
    sequence.  The packing lets fileservers allocate autonomously."""

    node: int
    owner: int
    seq: int

    def __post_init__(self):
        if not (0 <= self.node < 1 << 16):
            raise ValueError(f"node out of range: {self.node}")
        if not (0 <= self.owner < 1 << 16):
            raise ValueError(f"owner out of range: {self.owner}")
        if not (1 <= self.seq < 1 << 32):
            raise ValueError(f"seq out of range: {self.seq}")

    def pack(self) -> int:
        return (self.node << 48) | (self.owner << 32) | self.seq

    @classmethod
    def unpack(cls, value: int) -> "InodeNumber":
        return cls(node=(value >> 48) & 0xFFFF,
                   owner=(value >> 32) & 0xFFFF,
                   seq=value & 0xFFFF_FFFF)

    def __str__(self) -> str:
        return f"{self.pack():016x}"


# The l-hash server's inode table lives in a regular file; only the table's
# own idata is pinned in local stable storage.  The root directory is the
# second reserved inode.
ITBL_INO = InodeNumber(LHASH_NODE, LHASH_PRINCIPAL, 1)
ROOT_INO = InodeNumber(LHASH_NODE, LHASH_PRINCIPAL, 2)


@dataclass(frozen=True)
class Idata:
    """Pointer to the current version of an inode: content hash of its inode
    block plus a strictly increasing incarnation number."""

    inode_hash: bytes
    incarnation: int

    def short(self) -> str:
        return f"{self.inode_hash[:6].hex()}#{self.incarnation}"
