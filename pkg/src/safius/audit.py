"""Dispute resolution over signed evidence.

A dispute names a block and a complaint; the resolver sees two evidence
views -- the trusted vault (verified grants plus co-signed refcount-tree
agreements) and whatever the storage server can produce (retained request
signatures, its tree, its pending window) -- and must blame exactly the
misbehaving party or admit the evidence gap.  False accusations are worse
than unresolved disputes: anything inside the pre-signature window resolves
to NoViolation with the gap flagged, never to a guess.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

from .crypto import HashScheme, KeyRegistry
from .ids import InodeNumber, OpKind
from .messages import RequestBatch, SignedRequest, decode


class DisputeKind(Enum):
    LOAD_MISS = "load-miss"
    UNSOLICITED_STORE = "unsolicited-store"
    REFCNT_MISMATCH = "refcnt-mismatch"
    GRANT_REFUSAL = "grant-refusal"
    BAD_BLOCK_BYTES = "bad-block-bytes"


class Accused(Enum):
    STORAGE_SERVER = "storage-server"
    FILESERVER = "fileserver"
    NO_VIOLATION = "no-violation"


@dataclass(frozen=True)
class Dispute:
    kind: DisputeKind
    blknum: bytes | None = None
    ino: InodeNumber | None = None
    uid: int | None = None
    served: bytes | None = None   # bytes as served, for BAD_BLOCK_BYTES
    batch: bytes | None = None    # retained request envelope, for refusals
    detail: str = ""


@dataclass(frozen=True)
class Verdict:
    accused: Accused
    uid: int | None = None
    evidence_gap: bool = False
    rationale: str = ""

    def describe(self) -> str:
        who = self.accused.value
        if self.accused is Accused.FILESERVER:
            who = f"fileserver(uid={self.uid})"
        gap = " [insufficient-evidence]" if self.evidence_gap else ""
        return f"{who}{gap}: {self.rationale}"


@dataclass
class VaultEvidence:
    """What the trusted side can put on the table: per-uid counts at the last
    co-signed agreement, plus every verified grant entry accepted since."""

    agreement_leaves: dict[bytes, dict[int, int]] = field(default_factory=dict)
    # (uid, blknum, op) tuples from verified grants after the agreement
    grant_entries: list[tuple[int, bytes, OpKind]] = field(default_factory=list)

    def uid_counts(self, blknum: bytes) -> dict[int, int]:
        counts = dict(self.agreement_leaves.get(blknum, {}))
        for uid, blk, op in self.grant_entries:
            if blk != blknum:
                continue
            delta = 1 if op == OpKind.STORE else -1
            new = counts.get(uid, 0) + delta
            if new == 0:
                counts.pop(uid, None)
            else:
                counts[uid] = new
        return counts

    def net_refs(self, blknum: bytes) -> tuple[int, bool]:
        """(net stores minus frees, any evidence at all for this block)."""
        seen = blknum in self.agreement_leaves
        net = sum(self.agreement_leaves.get(blknum, {}).values())
        for uid, blk, op in self.grant_entries:
            if blk == blknum:
                seen = True
                net += 1 if op == OpKind.STORE else -1
        return net, seen


@dataclass
class ServerEvidence:
    """What the storage server can produce in its own defense."""

    retained: list[bytes] = field(default_factory=list)
    per_uid: dict[bytes, dict[int, int]] = field(default_factory=dict)
    pending_blocks: set[bytes] = field(default_factory=set)
    has_block: dict[bytes, bool] = field(default_factory=dict)

    def signed_store_by(self, uid: int, blknum: bytes, scheme: HashScheme,
                        registry: KeyRegistry) -> bool:
        """Does any retained, correctly signed request show uid storing
        blknum?  Unverifiable envelopes prove nothing."""
        for raw in self.retained:
            try:
                msg = decode(raw)
            except Exception:
                continue
            if isinstance(msg, SignedRequest):
                req = msg.req
                if (req.uid == uid and req.blknum == blknum
                        and req.op == OpKind.STORE
                        and registry.verify(uid, scheme.digest(req.encode()),
                                            msg.sig)):
                    return True
            elif isinstance(msg, RequestBatch):
                if msg.header.uid != uid:
                    continue
                if not any(e.blknum == blknum and e.op == OpKind.STORE
                           for e in msg.entries):
                    continue
                if registry.verify(uid, msg.signing_digest(scheme), msg.sig):
                    return True
        return False


def resolve(dispute: Dispute, vault: VaultEvidence, server: ServerEvidence,
            scheme: HashScheme, registry: KeyRegistry) -> Verdict:
    if dispute.kind is DisputeKind.LOAD_MISS:
        return _resolve_load_miss(dispute, vault, server)
    if dispute.kind is DisputeKind.UNSOLICITED_STORE:
        return _resolve_unsolicited(dispute, vault, server, scheme, registry)
    if dispute.kind is DisputeKind.REFCNT_MISMATCH:
        return _resolve_refcnt(dispute, vault, server)
    if dispute.kind is DisputeKind.GRANT_REFUSAL:
        return Verdict(
            accused=Accused.NO_VIOLATION, evidence_gap=True,
            rationale="refusal precedes signature coverage; request signature "
                      "retained, exposure recorded")
    if dispute.kind is DisputeKind.BAD_BLOCK_BYTES:
        if dispute.served is None or scheme.digest(dispute.served) != dispute.blknum:
            return Verdict(accused=Accused.STORAGE_SERVER,
                           rationale="served bytes fail the content hash")
        return Verdict(accused=Accused.NO_VIOLATION,
                       rationale="served bytes match the block name")
    raise ValueError(f"unknown dispute kind {dispute.kind}")


def _resolve_load_miss(dispute: Dispute, vault: VaultEvidence,
                       server: ServerEvidence) -> Verdict:
    blknum = dispute.blknum
    if blknum in server.pending_blocks:
        return Verdict(accused=Accused.NO_VIOLATION, evidence_gap=True,
                       rationale="ops touching this block are inside the "
                                 "unsigned window")
    net, seen = vault.net_refs(blknum)
    if not seen:
        return Verdict(accused=Accused.NO_VIOLATION, evidence_gap=True,
                       rationale="no signed evidence mentions this block")
    if net > 0:
        return Verdict(accused=Accused.STORAGE_SERVER,
                       rationale=f"signed evidence shows {net} live "
                                 f"reference(s); NotFound is a violation")
    return Verdict(accused=Accused.NO_VIOLATION,
                   rationale="signature-backed frees account for the block's "
                             "absence")


def _resolve_unsolicited(dispute: Dispute, vault: VaultEvidence,
                         server: ServerEvidence, scheme: HashScheme,
                         registry: KeyRegistry) -> Verdict:
    uid, blknum = dispute.uid, dispute.blknum
    if server.signed_store_by(uid, blknum, scheme, registry):
        return Verdict(accused=Accused.FILESERVER, uid=uid,
                       rationale="server holds the user's request signature "
                                 "for the disputed store")
    if vault.uid_counts(blknum).get(uid, 0) > 0:
        return Verdict(accused=Accused.FILESERVER, uid=uid,
                       rationale="co-signed refcount agreement covers the "
                                 "disputed charge")
    if blknum in server.pending_blocks:
        # Inside the unsigned window neither side can prove anything: the
        # charge may be real (denier lying) or fabricated.  Declining to
        # accuse is the only verdict that can never frame an honest party.
        return Verdict(accused=Accused.NO_VIOLATION, evidence_gap=True,
                       rationale="disputed charge sits in the unsigned "
                                 "window; nothing is provable either way")
    return Verdict(accused=Accused.STORAGE_SERVER,
                   rationale="charge is backed by no signature and no "
                             "agreement leaf")


def _resolve_refcnt(dispute: Dispute, vault: VaultEvidence,
                    server: ServerEvidence) -> Verdict:
    blknum = dispute.blknum
    if blknum in server.pending_blocks:
        return Verdict(accused=Accused.NO_VIOLATION, evidence_gap=True,
                       rationale="counts for this block are inside the "
                                 "unsigned window")
    expected = vault.uid_counts(blknum)
    actual = {u: c for u, c in server.per_uid.get(blknum, {}).items() if c != 0}
    if actual != expected:
        return Verdict(accused=Accused.STORAGE_SERVER,
                       rationale=f"server counts {_fmt(actual)} diverge from "
                                 f"signature recount {_fmt(expected)}")
    return Verdict(accused=Accused.NO_VIOLATION,
                   rationale="server counts match the signature recount")


def _fmt(counts: dict[int, int]) -> str:
    return "{" + ", ".join(f"{u}:{c}" for u, c in sorted(counts.items())) + "}"
