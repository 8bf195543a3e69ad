"""Tagged parameter sets and their binary container format.

A :class:`ParameterSet` is an ordered map from stable string ids (e.g.
``blocks.3.attn.w_q.weight``) to float64 tensors, each annotated with the
:class:`LayerTag` of the layer it belongs to.  Sets serialize to a flat
binary container: header (magic ``PFXP``, version u32), then one record per
entry (id length u32, id utf-8 bytes, tag u8, rank u32, dims u32 each,
float64 payload little-endian).
"""

from __future__ import annotations

import enum
import struct
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np
import torch

from .errors import InputError, SelectorError

MAGIC = b"PFXP"
VERSION = 1


class LayerTag(enum.IntEnum):
    """Functional group of a model parameter. Every parameter carries exactly one."""

    patch_embedding = 0
    position_embedding = 1
    layernorm = 2
    attention = 3
    mlp = 4
    classification_head = 5
    plugin = 6


@dataclass
class ParamEntry:
    value: torch.Tensor  # float64, detached
    tag: LayerTag

    def numel(self) -> int:
        return self.value.numel()


class ParameterSet:
    """Ordered id -> (float64 tensor, tag) map with shape-checked writes."""

    def __init__(self) -> None:
        self._entries: "OrderedDict[str, ParamEntry]" = OrderedDict()

    def __len__(self) -> int:
        return len(self._entries)

    def __contains__(self, pid: str) -> bool:
        return pid in self._entries

    def __iter__(self) -> Iterator[str]:
        return iter(self._entries)

    def ids(self) -> list[str]:
        return list(self._entries)

    def items(self) -> Iterable[tuple[str, ParamEntry]]:
        return self._entries.items()

    def get(self, pid: str) -> ParamEntry:
        try:
            return self._entries[pid]
        except KeyError:
            raise SelectorError(f"unknown parameter id {pid!r}") from None

    def tag(self, pid: str) -> LayerTag:
        return self.get(pid).tag

    def value(self, pid: str) -> torch.Tensor:
        return self.get(pid).value

    def set(self, pid: str, value: torch.Tensor, tag: LayerTag | None = None) -> None:
        value = torch.as_tensor(value, dtype=torch.float64).detach().clone()
        if pid in self._entries:
            entry = self._entries[pid]
            if tuple(entry.value.shape) != tuple(value.shape):
                raise InputError(
                    f"shape mismatch for {pid!r}: have {tuple(entry.value.shape)}, "
                    f"got {tuple(value.shape)}"
                )
            entry.value = value
            if tag is not None:
                entry.tag = tag
        else:
            if tag is None:
                raise InputError(f"new entry {pid!r} requires a tag")
            self._entries[pid] = ParamEntry(value, tag)

    def subset(self, ids: Iterable[str]) -> "ParameterSet":
        out = ParameterSet()
        for pid in ids:
            entry = self.get(pid)
            out.set(pid, entry.value, entry.tag)
        return out

    def element_count(self, ids: Iterable[str] | None = None) -> int:
        if ids is None:
            return sum(e.numel() for e in self._entries.values())
        return sum(self.get(pid).numel() for pid in ids)

    def clone(self) -> "ParameterSet":
        return self.subset(self.ids())

    def allclose(self, other: "ParameterSet", rtol: float = 0.0, atol: float = 0.0) -> bool:
        if self.ids() != other.ids():
            return False
        return all(
            torch.allclose(self.value(pid), other.value(pid), rtol=rtol, atol=atol)
            for pid in self.ids()
        )

    def equal(self, other: "ParameterSet") -> bool:
        """Bit-exact equality including id order and tags."""
        if self.ids() != other.ids():
            return False
        for pid, entry in self.items():
            o = other.get(pid)
            if o.tag != entry.tag or not torch.equal(o.value, entry.value):
                return False
        return True

    # -- binary container ---------------------------------------------------

    def to_bytes(self) -> bytes:
        chunks = [MAGIC, struct.pack("<I", VERSION)]
        for pid, entry in self._entries.items():
            raw = pid.encode("utf-8")
            arr = entry.value.numpy()
            dims = arr.shape
            chunks.append(struct.pack("<I", len(raw)))
            chunks.append(raw)
            chunks.append(struct.pack("<BI", int(entry.tag), len(dims)))
            chunks.append(struct.pack(f"<{len(dims)}I", *dims))
            chunks.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        return b"".join(chunks)

    @classmethod
    def from_bytes(cls, blob: bytes) -> "ParameterSet":
        if blob[:4] != MAGIC:
            raise InputError("not a PFXP container (bad magic)")
        (version,) = struct.unpack_from("<I", blob, 4)
        if version != VERSION:
            raise InputError(f"unsupported PFXP version {version}")
        out = cls()
        off = 8
        while off < len(blob):
            (id_len,) = struct.unpack_from("<I", blob, off)
            off += 4
            pid = blob[off : off + id_len].decode("utf-8")
            off += id_len
            tag_u8, rank = struct.unpack_from("<BI", blob, off)
            off += 5
            dims = struct.unpack_from(f"<{rank}I", blob, off)
            off += 4 * rank
            count = int(np.prod(dims, dtype=np.int64)) if rank else 1
            arr = np.frombuffer(blob, dtype="<f8", count=count, offset=off).reshape(dims)
            off += 8 * count
            out.set(pid, torch.from_numpy(arr.copy()), LayerTag(tag_u8))
        return out

    def save(self, path: str | Path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path: str | Path) -> "ParameterSet":
        return cls.from_bytes(Path(path).read_bytes())
