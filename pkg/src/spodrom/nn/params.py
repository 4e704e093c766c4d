"""Named parameter tensors, Glorot initialization and the SNNP bundle format."""

from __future__ import annotations

import json
import struct
from collections import OrderedDict
from pathlib import Path

import numpy as np

from ..errors import CorruptFileError, FormatError

MAGIC = b"SNNP"
VERSION = 1


class ParamStore:
    """Ordered mapping ``name -> float64 array`` with frozen shapes.

    Parameters
    ----------
    tensors : mapping of name to array
    seed : int, optional
        Seed used by the initializer, kept for provenance.
    init : str
        Name of the initializer.
    """

    def __init__(self, tensors=None, seed=None, init="glorot_uniform"):
        self._t = OrderedDict()
        self.seed = seed
        self.init = init
        for name, arr in (tensors or {}).items():
            arr = np.array(arr, dtype=np.float64)
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"parameter {name!r} is not finite")
            self._t[name] = arr

    def __getitem__(self, name):
        return self._t[name]

    def __setitem__(self, name, value):
        value = np.asarray(value, dtype=np.float64)
        if name not in self._t:
            raise KeyError(f"unknown parameter {name!r}; shapes are fixed at construction")
        if value.shape != self._t[name].shape:
            raise ValueError(f"shape of {name!r} is {self._t[name].shape}, got {value.shape}")
        self._t[name][...] = value

    def __contains__(self, name):
        return name in self._t

    def __iter__(self):
        return iter(self._t)

    def __len__(self):
        return len(self._t)

    def items(self):
        return self._t.items()

    def names(self):
        return list(self._t)

    def shapes(self):
        return {k: v.shape for k, v in self._t.items()}

    def size(self):
        return int(sum(v.size for v in self._t.values()))

    def copy(self):
        return ParamStore({k: v.copy() for k, v in self._t.items()}, self.seed, self.init)

    def snapshot(self):
        return {k: v.copy() for k, v in self._t.items()}

    def restore(self, snap):
        for k, v in snap.items():
            self[k] = v

    def prefixed(self, prefix):
        """Sub-store view sharing memory for names that start with ``prefix``."""
        sub = ParamStore(seed=self.seed, init=self.init)
        for k, v in self._t.items():
            if k.startswith(prefix):
                sub._t[k[len(prefix):]] = v
        return sub

    def add(self, name, arr):
        if name in self._t:
            raise KeyError(f"duplicate parameter {name!r}")
        self._t[name] = np.array(arr, dtype=np.float64)

    def equal(self, other):
        return self.names() == other.names() and all(
            np.array_equal(self[k], other[k]) for k in self)


def glorot_uniform(rng, shape, fan_in, fan_out):
    lim = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=shape)


def write_params(path, store: ParamStore, meta=None):
    """Write a SNNP bundle; ``meta`` is an optional JSON-serializable record."""
    seed = -1 if store.seed is None else int(store.seed)
    blob = json.dumps(meta or {}, sort_keys=True).encode()
    init = store.init.encode()
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4sIIq", MAGIC, VERSION, len(store), seed))
        fh.write(struct.pack("<H", len(init)) + init)
        for name, arr in store.items():
            nb = name.encode()
            fh.write(struct.pack("<H", len(nb)) + nb)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        fh.write(struct.pack("<Q", len(blob)) + blob)


class _Reader:
    def __init__(self, raw):
        self.raw, self.pos = raw, 0

    def take(self, n):
        if self.pos + n > len(self.raw):
            raise CorruptFileError("parameter bundle is truncated")
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_params(path):
    """Read a SNNP bundle; returns ``(store, meta)``."""
    r = _Reader(Path(path).read_bytes())
    magic, version, count, seed = r.unpack("<4sIIq")
    if magic != MAGIC:
        raise FormatError(f"{path}: not a parameter bundle")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    (ln,) = r.unpack("<H")
    init = r.take(ln).decode()
    tensors = OrderedDict()
    for _ in range(count):
        (ln,) = r.unpack("<H")
        name = r.take(ln).decode()
        (ndim,) = r.unpack("<I")
        shape = r.unpack(f"<{ndim}Q")
        n = int(np.prod(shape, dtype=np.int64))
        tensors[name] = np.frombuffer(r.take(8 * n), dtype="<f8").reshape(shape).copy()
    (ln,) = r.unpack("<Q")
    meta = json.loads(r.take(ln).decode())
    if r.pos != len(r.raw):
        raise CorruptFileError(f"{path}: trailing bytes after parameter bundle")
    return ParamStore(tensors, None if seed < 0 else seed, init), meta
