"""Versioned binary checkpoints.

Layout::

    b"ADVRCKPT" | u32 version | u32 header length | JSON header | payload

The header lists every entry (group, name, kind, shape, offset) in payload
order, the payload size and CRC-32, plus PRNG and optimizer state. The payload
is the concatenation of little-endian float32 arrays. Saving what was loaded
reproduces the file byte for byte.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .optim import ParamSet

MAGIC = b"ADVRCKPT"
VERSION = 1
_F32 = np.dtype("<f4")


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    # group -> name -> array (params and buffers alike)
    tensors: dict[str, dict[str, np.ndarray]] = field(default_factory=dict)
    kinds: dict[tuple[str, str], str] = field(default_factory=dict)
    rng: dict = field(default_factory=dict)
    optimizer: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    @classmethod
    def from_paramsets(cls, paramsets: Iterable[ParamSet], rng=None, optimizer=None, meta=None):
        ck = cls(rng=dict(rng or {}), optimizer=dict(optimizer or {}), meta=dict(meta or {}))
        for ps in paramsets:
            grp = ck.tensors.setdefault(ps.group, {})
            for name, t in ps.items():
                grp[name] = t.data.astype(_F32)
                ck.kinds[(ps.group, name)] = "param"
            for name, b in ps.buffers.items():
                grp[name] = np.asarray(b).astype(_F32)
                ck.kinds[(ps.group, name)] = "buffer"
        return ck

    def apply(self, paramsets: Iterable[ParamSet]) -> None:
        for ps in paramsets:
            stored = self.tensors.get(ps.group)
            if stored is None:
                raise CheckpointError(f"checkpoint has no group {ps.group}")
            expected = set(ps.params) | set(ps.buffers)
            if expected != set(stored):
                missing = sorted(expected - set(stored))
                extra = sorted(set(stored) - expected)
                raise CheckpointError(f"{ps.group}: missing {missing}, unexpected {extra}")
            for name, arr in stored.items():
                target = ps.params[name].data if name in ps.params else ps.buffers[name]
                if target.shape != arr.shape:
                    raise CheckpointError(f"{ps.group}.{name}: shape {arr.shape} != {target.shape}")
                target[...] = arr

    def to_bytes(self) -> bytes:
        entries, chunks, offset = [], [], 0
        for group in sorted(self.tensors):
            for name in sorted(self.tensors[group]):
                arr = np.ascontiguousarray(self.tensors[group][name], dtype=_F32)
                entries.append(
                    {
                        "group": group,
                        "name": name,
                        "kind": self.kinds.get((group, name), "param"),
                        "shape": list(arr.shape),
                        "offset": offset,
                    }
                )
                chunks.append(arr.tobytes())
                offset += arr.size
        payload = b"".join(chunks)
        header = {
            "version": VERSION,
            "crc32": zlib.crc32(payload),
            "n_values": offset,
            "entries": entries,
            "rng": self.rng,
            "optimizer": self.optimizer,
            "meta": self.meta,
        }
        hb = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
        return MAGIC + struct.pack("<II", VERSION, len(hb)) + hb + payload

    @classmethod
    def from_bytes(cls, blob: bytes) -> "Checkpoint":
        if blob[: len(MAGIC)] != MAGIC:
            raise CheckpointError("not a checkpoint file (bad magic)")
        version, hlen = struct.unpack_from("<II", blob, len(MAGIC))
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        start = len(MAGIC) + 8
        try:
            header = json.loads(blob[start : start + hlen].decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointError(f"unreadable checkpoint header: {exc}") from exc
        raw = blob[start + hlen :]
        if len(raw) != 4 * header["n_values"]:
            raise CheckpointError(f"truncated checkpoint: {len(raw)} payload bytes, expected {4 * header['n_values']}")
        if zlib.crc32(raw) != header["crc32"]:
            raise CheckpointError("checkpoint payload checksum mismatch")
        payload = np.frombuffer(raw, dtype=_F32)
        ck = cls(rng=header["rng"], optimizer=header["optimizer"], meta=header["meta"])
        for e in header["entries"]:
            n = int(np.prod(e["shape"], dtype=np.int64))
            arr = payload[e["offset"] : e["offset"] + n].reshape(e["shape"]).copy()
            ck.tensors.setdefault(e["group"], {})[e["name"]] = arr
            ck.kinds[(e["group"], e["name"])] = e["kind"]
        return ck


def save_checkpoint(path, ck: Checkpoint) -> None:
    Path(path).write_bytes(ck.to_bytes())


def load_checkpoint(path) -> Checkpoint:
    return Checkpoint.from_bytes(Path(path).read_bytes())
