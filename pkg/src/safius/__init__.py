"""Accountable filesystem protocols over an untrusted block store,
with a deterministic simulation harness."""

from .audit import Dispute, DisputeKind, Verdict, resolve
from .crypto import BlockCipher, HashScheme, KeyRegistry, MerkleMap
from .deploy import Deployment, DeployConfig
from .errors import ProtocolError
from .ids import BLOCK_SIZE, Idata, InodeNumber
from .sim import Fabric, FaultPlan, FaultRule, TraceLog

__all__ = [
    "BLOCK_SIZE",
    "BlockCipher",
    "DeployConfig",
    "Deployment",
    "Dispute",
    "DisputeKind",
    "Fabric",
    "FaultPlan",
    "FaultRule",
    "HashScheme",
    "Idata",
    "InodeNumber",
    "KeyRegistry",
    "MerkleMap",
    "ProtocolError",
    "TraceLog",
    "Verdict",
    "resolve",
]
