"""Named, ordered collections of trainable tensors and their on-disk format."""
from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from .errors import HybOptError
from .tensor import Tensor

MAGIC = b"HYBOPT01"


class ParameterSet:
    """Ordered mapping ``name -> Tensor``.

    Insertion order is the canonical flattening order used by seed replay and
    by :meth:`flatten`. ``copies`` counts every full-set copy ever made, so
    tests can check that an optimizer allocated none.
    """

    copies = 0

    def __init__(self, arrays: dict[str, np.ndarray] | None = None, trainable: bool = True):
        self._tensors: dict[str, Tensor] = {}
        for name, arr in (arrays or {}).items():
            self.add(name, arr, trainable=trainable)

    def add(self, name: str, array, trainable: bool = True, dtype=np.float32) -> Tensor:
        """Register a parameter; model state is float32, float64 is for gradient checks."""
        if name in self._tensors:
            raise KeyError(f"parameter {name!r} already exists")
        t = Tensor(np.array(array, dtype=dtype), requires_grad=trainable, name=name, dtype=dtype)
        self._tensors[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __iter__(self) -> Iterator[str]:
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def items(self):
        return self._tensors.items()

    def names(self) -> list[str]:
        return list(self._tensors)

    def trainable_names(self) -> list[str]:
        return [n for n, t in self._tensors.items() if t.requires_grad]

    def trainable(self) -> list[Tensor]:
        return [t for t in self._tensors.values() if t.requires_grad]

    def set_trainable(self, names: Iterable[str]) -> None:
        keep = set(names)
        missing = keep - set(self._tensors)
        if missing:
            raise KeyError(f"unknown parameters: {sorted(missing)}")
        for n, t in self._tensors.items():
            t.requires_grad = n in keep

    def n_elements(self, trainable_only: bool = False) -> int:
        return sum(t.size for t in self._tensors.values() if t.requires_grad or not trainable_only)

    def census(self) -> dict[str, tuple[int, ...]]:
        return {n: t.shape for n, t in self._tensors.items()}

    def copy(self) -> "ParameterSet":
        ParameterSet.copies += 1
        out = ParameterSet()
        for n, t in self._tensors.items():
            out.add(n, t.data.copy(), trainable=t.requires_grad, dtype=t.data.dtype)
        return out

    def flatten(self, trainable_only: bool = True) -> np.ndarray:
        parts = [t.data.ravel() for t in self._tensors.values() if t.requires_grad or not trainable_only]
        return np.concatenate(parts) if parts else np.zeros(0, np.float32)

    def assign_flat(self, vector: np.ndarray, trainable_only: bool = True) -> None:
        off = 0
        for t in self._tensors.values():
            if trainable_only and not t.requires_grad:
                continue
            t.data[...] = vector[off:off + t.size].reshape(t.shape)
            off += t.size
        if off != vector.size:
            raise ValueError(f"vector has {vector.size} elements, expected {off}")

    def equal(self, other: "ParameterSet") -> bool:
        """Bit-exact comparison of names, shapes and values."""
        if self.names() != other.names():
            return False
        return all(np.array_equal(self[n].data, other[n].data) for n in self)


def save_checkpoint(params: ParameterSet, path) -> None:
    """Write ``params`` as magic, manifest length, JSON manifest, raw float32 LE data."""
    entries, offset = [], 0
    for name, t in params.items():
        entries.append({"name": name, "shape": list(t.shape), "offset": offset})
        offset += t.size * 4
    manifest = json.dumps(entries, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(manifest)))
        fh.write(manifest)
        for _, t in params.items():
            fh.write(t.data.astype("<f4", copy=False).tobytes(order="C"))


def load_checkpoint(path) -> ParameterSet:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    raw = path.read_bytes()
    if raw[:8] != MAGIC:
        raise HybOptError(f"{path} is not a checkpoint (bad magic)")
    (mlen,) = struct.unpack("<I", raw[8:12])
    entries = json.loads(raw[12:12 + mlen])
    base = 12 + mlen
    params = ParameterSet()
    for e in entries:
        count = int(np.prod(e["shape"], dtype=np.int64))
        start = base + e["offset"]
        arr = np.frombuffer(raw, dtype="<f4", count=count, offset=start).reshape(e["shape"])
        params.add(e["name"], arr.astype(np.float32))
    return params
