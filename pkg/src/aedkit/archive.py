"""WTAR1: a single-file named-tensor archive.

Layout (all integers little-endian)::

    offset 0   b"WTAR1\\0\\0\\0"            8-byte magic
    offset 8   uint64 index_length
    offset 16  UTF-8 JSON index, space-padded to a multiple of 8 bytes
    ...        tensor payloads, f32 little-endian, each 8-byte aligned

The JSON index is ``{"metadata": {str: str}, "tensors": [{"name", "dtype",
"shape", "offset", "nbytes"}]}``; ``offset`` counts from the start of the
payload section. Tensors are written in insertion order.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"WTAR1\0\0\0"
_ALIGN = 8


class ArchiveError(Exception):
    pass


def _pad(n: int) -> int:
    return (-n) % _ALIGN


@dataclass(eq=False)
class WeightArchive:
    """Ordered name -> float32 tensor map plus string metadata.

    Metadata keys ``surgery.<n>`` form the audit trail of applied surgeries.
    """

    entries: dict[str, np.ndarray] = field(default_factory=dict)
    metadata: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        fixed = {}
        for name, tensor in self.entries.items():
            arr = np.array(tensor, dtype=np.float32)
            if not np.all(np.isfinite(arr)):
                raise ArchiveError(f"tensor {name!r} has non-finite values")
            arr.setflags(write=False)
            fixed[str(name)] = arr
        self.entries = fixed
        self.metadata = {str(k): str(v) for k, v in self.metadata.items()}

    def __len__(self):
        return len(self.entries)

    def __contains__(self, name):
        return name in self.entries

    def __getitem__(self, name):
        return self.entries[name]

    def shapes(self) -> dict[str, tuple[int, ...]]:
        return {name: tuple(t.shape) for name, t in self.entries.items()}

    def audit_trail(self) -> list[str]:
        keys = sorted((k for k in self.metadata if k.startswith("surgery.")), key=lambda k: int(k.split(".")[1]))
        return [self.metadata[k] for k in keys]

    def with_audit(self, entries: dict, note: str) -> "WeightArchive":
        metadata = dict(self.metadata)
        metadata[f"surgery.{len(self.audit_trail())}"] = note
        return WeightArchive(entries, metadata)

    def to_bytes(self) -> bytes:
        index, payloads, offset = [], [], 0
        for name, tensor in self.entries.items():
            raw = tensor.astype("<f4").tobytes()
            index.append({"name": name, "dtype": "f32", "shape": list(tensor.shape), "offset": offset, "nbytes": len(raw)})
            payloads.append(raw + b"\0" * _pad(len(raw)))
            offset += len(raw) + _pad(len(raw))
        head = json.dumps({"metadata": self.metadata, "tensors": index}, sort_keys=True).encode("utf-8")
        head += b" " * _pad(len(head))
        return MAGIC + struct.pack("<Q", len(head)) + head + b"".join(payloads)

    @classmethod
    def from_bytes(cls, data: bytes) -> "WeightArchive":
        if data[:8] != MAGIC:
            raise ArchiveError("not a WTAR1 archive (bad magic)")
        if len(data) < 16:
            raise ArchiveError("truncated WTAR1 header")
        (n,) = struct.unpack("<Q", data[8:16])
        try:
            index = json.loads(data[16:16 + n].decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise ArchiveError(f"corrupt WTAR1 index: {exc}") from exc
        base = 16 + n
        entries = {}
        for item in index["tensors"]:
            if item["dtype"] != "f32":
                raise ArchiveError(f"unsupported dtype {item['dtype']!r} for {item['name']!r}")
            start = base + item["offset"]
            count = int(np.prod(item["shape"], dtype=np.int64))
            if start + 4 * count > len(data):
                raise ArchiveError(f"truncated payload for {item['name']!r}")
            entries[item["name"]] = np.frombuffer(data, dtype="<f4", count=count, offset=start).reshape(item["shape"])
        return cls(entries, index.get("metadata", {}))

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "WeightArchive":
        try:
            data = Path(path).read_bytes()
        except OSError as exc:
            raise ArchiveError(f"cannot read {path}: {exc}") from exc
        return cls.from_bytes(data)
