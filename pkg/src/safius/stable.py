"""Per-actor stable storage: what survives a simulated crash.

A StableStore owns named key-value cells and named append-only logs.  The
harness keeps the store; actor instances only borrow it, so power-cycling an
actor means constructing a new instance over the same store.  put_many is
the atomicity primitive: all cells flip together or not at all, which is
exactly the commit point the recovery protocols are built on.
"""

from __future__ import annotations


class StableStore:
    def __init__(self, name: str = ""):
        self.name = name
        self._kv: dict[str, bytes] = {}
        self._logs: dict[str, list[bytes]] = {}

    # -- key-value cells ---------------------------------------------------

    def get(self, key: str, default: bytes | None = None) -> bytes | None:
        return self._kv.get(key, default)

    def put(self, key: str, value: bytes) -> None:
        self._kv[key] = value

    def put_many(self, items: dict[str, bytes]) -> None:
        # Single-threaded dict update: all keys land atomically w.r.t. any
        # crash point, because crash points only exist between calls.
        self._kv.update(items)

    def delete(self, key: str) -> None:
        self._kv.pop(key, None)

    def keys(self, prefix: str = "") -> list[str]:
        return sorted(k for k in self._kv if k.startswith(prefix))

    def get_int(self, key: str, default: int = 0) -> int:
        raw = self._kv.get(key)
        return default if raw is None else int.from_bytes(raw, "little")

    def put_int(self, key: str, value: int) -> None:
        self._kv[key] = value.to_bytes(8, "little")

    # -- append-only logs --------------------------------------------------

    def append(self, log: str, record: bytes) -> int:
        records = self._logs.setdefault(log, [])
        records.append(record)
        return len(records) - 1

    def records(self, log: str) -> list[bytes]:
        return list(self._logs.get(log, ()))

    def log_names(self, prefix: str = "") -> list[str]:
        return sorted(name for name in self._logs if name.startswith(prefix))

    def log_len(self, log: str) -> int:
        return len(self._logs.get(log, ()))

    def replace_log(self, log: str, records: list[bytes]) -> None:
        """Whole-log compaction; callers use it only after the information
        has been superseded by something else already persisted."""
        self._logs[log] = list(records)

    # -- external file form ------------------------------------------------

    def dump_log(self, log: str) -> bytes:
        """Length-prefixed record stream, the on-disk export format."""
        out = bytearray()
        for rec in self._logs.get(log, ()):
            out += len(rec).to_bytes(4, "little")
            out += rec
        return bytes(out)

    def load_log(self, log: str, data: bytes) -> int:
        records = []
        off = 0
        while off < len(data):
            if off + 4 > len(data):
                raise ValueError(f"truncated length prefix at offset {off}")
            n = int.from_bytes(data[off:off + 4], "little")
            off += 4
            if off + n > len(data):
                raise ValueError(f"truncated record at offset {off}")
            records.append(bytes(data[off:off + n]))
            off += n
        self._logs[log] = records
        return len(records)
