"""Failure types shared across the block store, the l-hash server and clients.

ProtocolError subclasses travel between actors like ordinary error replies:
the fabric re-raises them on the caller's side.  ActorCrash is different --
it models a process dying mid-operation and is only caught by the harness.
"""

from __future__ import annotations


class ProtocolError(Exception):
    """Base for failures visible at a protocol boundary."""

    code = "protocol-error"

    def __init__(self, detail: str = ""):
        super().__init__(detail or self.code)
        self.detail = detail


class AccessDenied(ProtocolError):
    code = "access-denied"


class DigestMismatch(ProtocolError):
    code = "digest-mismatch"


class Replay(ProtocolError):
    code = "replay"


class NoSuchReference(ProtocolError):
    code = "no-such-reference"


class UnknownSession(ProtocolError):
    code = "unknown-session"


class BlockNotFound(ProtocolError):
    code = "not-found"


class RejectedBatch(ProtocolError):
    """Whole-batch refusal; the server applied none of the entries."""

    code = "rejected-batch"

    def __init__(self, reason: str, index: int = -1):
        super().__init__(f"{reason} (entry {index})" if index >= 0 else reason)
        self.reason = reason
        self.index = index


class BadSignature(ProtocolError):
    code = "bad-signature"


class RegistryError(ProtocolError):
    code = "unknown-principal"


class DecodeError(ProtocolError):
    code = "decode-error"


class DecryptFailure(ProtocolError):
    code = "decrypt-failure"


class IntegrityFailure(ProtocolError):
    code = "integrity-failure"


class PermissionDenied(ProtocolError):
    code = "permission-denied"


class LockNotHeld(ProtocolError):
    code = "lock-not-held"


class StaleTxid(ProtocolError):
    code = "stale-txid"


class StaleFileHandle(ProtocolError):
    code = "stale-file-handle"


class DeadlockTimeout(ProtocolError):
    code = "deadlock-timeout"


class Busy(ProtocolError):
    code = "busy"


class NoSuchPath(ProtocolError):
    code = "no-such-path"


class Exists(ProtocolError):
    code = "exists"


class FileTooLarge(ProtocolError):
    code = "file-too-large"


class Unreachable(ProtocolError):
    code = "unreachable"


class ScenarioError(ProtocolError):
    code = "scenario-error"


class ActorCrash(Exception):
    """A simulated process died at a named point.  Not a ProtocolError on
    purpose: nothing in the protocol stack may swallow it."""

    def __init__(self, actor: str, point: str):
        super().__init__(f"{actor} crashed at {point}")
        self.actor = actor
        self.point = point
