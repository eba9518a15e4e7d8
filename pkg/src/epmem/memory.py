"""Episodic key-value memory with exact nearest-neighbor retrieval.

Keys are fixed-size float32 vectors produced by a frozen key network;
values are whole training examples. Retrieval is an exact scan: squared
euclidean distances in float64, ties broken by insertion order, so results
are reproducible bit for bit and checkable against a naive full sort.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .data import Example
from .errors import CapacityError, DataError, InputError, RetrievalUnavailableError

SNAPSHOT_MAGIC = b"EPMEMSNP"
SNAPSHOT_VERSION = 1

_GROWTH = 256  # key matrix grows in blocks to keep writes amortized O(1)


class EpisodicMemory:
    """Append-only store of (key, example) pairs.

    `capacity` is an optional hard limit; writes beyond it raise
    CapacityError. Sparsity of writes is the caller's business (the trainer
    flips the coin), so `write` itself is unconditional.
    """

    def __init__(self, d_key: int, capacity: int | None = None):
        if d_key < 1:
            raise InputError("d_key must be >= 1")
        if capacity is not None and capacity < 1:
            raise InputError("capacity must be >= 1 when set")
        self.d_key = d_key
        self.capacity = capacity
        self._keys = np.empty((0, d_key), dtype=np.float32)
        self._values: list[Example] = []
        self._indices: list[int] = []  # insertion counter per entry
        self._next_index = 0

    def __len__(self):
        return len(self._values)

    def write(self, key: np.ndarray, value: Example) -> int:
        key = np.asarray(key, dtype=np.float32).reshape(-1)
        if key.shape != (self.d_key,):
            raise InputError(f"key must have {self.d_key} dimensions, got {key.shape}")
        if not np.all(np.isfinite(key)):
            raise InputError("non-finite key")
        if self.capacity is not None and len(self._values) >= self.capacity:
            raise CapacityError(f"memory full at {self.capacity} entries")
        n = len(self._values)
        if n == self._keys.shape[0]:
            grown = np.empty((n + _GROWTH, self.d_key), dtype=np.float32)
            grown[:n] = self._keys
            self._keys = grown
        self._keys[n] = key
        self._values.append(value)
        self._indices.append(self._next_index)
        self._next_index += 1
        return self._next_index - 1

    @property
    def keys(self) -> np.ndarray:
        return self._keys[: len(self._values)]

    def value(self, position: int) -> Example:
        return self._values[position]

    def neighbors(self, query: np.ndarray, k: int) -> list[tuple[Example, float]]:
        """The k nearest entries by squared distance, nearest first.

        Equal distances resolve by insertion order. Raises when empty.
        """
        if k < 1:
            raise InputError("k must be >= 1")
        n = len(self._values)
        if n == 0:
            raise RetrievalUnavailableError("memory is empty")
        query = np.asarray(query, dtype=np.float64).reshape(-1)
        if query.shape != (self.d_key,):
            raise InputError(f"query must have {self.d_key} dimensions")
        diff = self.keys.astype(np.float64) - query
        d2 = np.einsum("ij,ij->i", diff, diff)
        idx = np.asarray(self._indices)
        if k >= n:
            chosen = np.lexsort((idx, d2))
        else:
            kth = np.partition(d2, k - 1)[k - 1]
            cand = np.flatnonzero(d2 <= kth)
            order = np.lexsort((idx[cand], d2[cand]))
            chosen = cand[order[:k]]
        return [(self._values[i], float(d2[i])) for i in chosen]

    def sample(self, k: int, rng: np.random.Generator) -> list[Example]:
        """Uniform sample without replacement, at most the whole store."""
        n = len(self._values)
        if n == 0:
            return []
        take = min(k, n)
        picks = rng.choice(n, size=take, replace=False)
        return [self._values[i] for i in picks]

    def clone(self) -> "EpisodicMemory":
        other = EpisodicMemory(self.d_key, self.capacity)
        other._keys = self.keys.copy()
        other._values = list(self._values)
        other._indices = list(self._indices)
        other._next_index = self._next_index
        return other

    # ------------------------------------------------------------ disk

    def save(self, path) -> None:
        """Little-endian binary snapshot; see load for the inverse."""
        with open(path, "wb") as f:
            f.write(SNAPSHOT_MAGIC)
            f.write(struct.pack("<IIQ", SNAPSHOT_VERSION, self.d_key, len(self._values)))
            for i in range(len(self._values)):
                f.write(self._keys[i].astype("<f4").tobytes())
                payload = json.dumps(self._values[i].to_dict()).encode("utf-8")
                f.write(struct.pack("<I", len(payload)))
                f.write(payload)
                f.write(struct.pack("<Q", self._indices[i]))

    @classmethod
    def load(cls, path, capacity: int | None = None) -> "EpisodicMemory":
        try:
            blob = Path(path).read_bytes()
        except OSError as e:
            raise DataError(f"cannot read memory snapshot {path}: {e}") from e
        if blob[:8] != SNAPSHOT_MAGIC:
            raise DataError(f"{path}: not a memory snapshot")
        try:
            version, d_key, count = struct.unpack_from("<IIQ", blob, 8)
            if version != SNAPSHOT_VERSION:
                raise DataError(f"{path}: unsupported snapshot version {version}")
            mem = cls(d_key, capacity)
            mem._keys = np.empty((max(count, 1), d_key), dtype=np.float32)
            off = 8 + 16
            key_bytes = 4 * d_key
            for i in range(count):
                mem._keys[i] = np.frombuffer(blob, dtype="<f4", count=d_key, offset=off)
                off += key_bytes
                (n_payload,) = struct.unpack_from("<I", blob, off)
                off += 4
                record = json.loads(blob[off : off + n_payload].decode("utf-8"))
                off += n_payload
                mem._values.append(Example.from_dict(record))
                (index,) = struct.unpack_from("<Q", blob, off)
                off += 8
                mem._indices.append(index)
        except (struct.error, json.JSONDecodeError, UnicodeDecodeError) as e:
            raise DataError(f"{path}: truncated or corrupt snapshot: {e}") from e
        if off != len(blob):
            raise DataError(f"{path}: trailing bytes after snapshot payload")
        mem._next_index = (max(mem._indices) + 1) if mem._indices else 0
        return mem
