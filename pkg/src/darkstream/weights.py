"""Immutable named-tensor bundles, the DSTW file format and seeded init.

DSTW layout (little-endian)::

    b"DSTW"  u32 version=1  u32 count
    count x { u16 name_len, name (UTF-8), u8 rank, rank x u32 dim, float32 payload }
"""

from __future__ import annotations

import os
import struct
import tempfile
from collections.abc import Iterable, Mapping
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import BadMagic, DuplicateName, MalformedFile, TruncatedFile, VersionMismatch

MAGIC = b"DSTW"
VERSION = 1


class WeightBundle(Mapping):
    """Read-only mapping from tensor name to float32 array."""

    def __init__(self, entries: Mapping[str, np.ndarray] | Iterable = (), version: int = VERSION):
        items = entries.items() if isinstance(entries, Mapping) else entries
        store = {}
        for name, arr in items:
            if name in store:
                raise DuplicateName(name)
            a = np.asarray(arr, dtype="<f4")
            if a.flags.writeable:
                a = a.copy()
                a.setflags(write=False)
            store[name] = a
        self._store = store
        self.version = version

    def __getitem__(self, name):
        return self._store[name]

    def __iter__(self):
        return iter(self._store)

    def __len__(self):
        return len(self._store)

    def __repr__(self):
        n = sum(a.size for a in self._store.values())
        return f"WeightBundle({len(self)} tensors, {n} values)"

    def merged(self, other: Mapping) -> "WeightBundle":
        """New bundle holding the union of both; names must not collide."""
        return WeightBundle(list(self.items()) + list(other.items()))

    def equals(self, other: Mapping) -> bool:
        if set(self) != set(other):
            return False
        return all(
            self[k].shape == other[k].shape and self[k].tobytes() == np.asarray(other[k], "<f4").tobytes()
            for k in self
        )


def atomic_write_bytes(path, data: bytes) -> None:
    """Write ``data`` to a temp file next to ``path`` and rename it into place."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def serialize(bundle: Mapping) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(bundle))]
    for name, arr in bundle.items():
        a = np.asarray(arr, dtype="<f4")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<B", a.ndim))
        parts.append(struct.pack(f"<{a.ndim}I", *a.shape))
        parts.append(a.tobytes())
    return b"".join(parts)


def save_weights(bundle: Mapping, path) -> None:
    atomic_write_bytes(path, serialize(bundle))


def deserialize(data: bytes) -> WeightBundle:
    view = memoryview(data)
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(view):
            raise TruncatedFile(f"needed {n} bytes at offset {pos}, file has {len(view)}")
        out = view[pos : pos + n]
        pos += n
        return out

    if len(view) < 4 or bytes(view[:4]) != MAGIC:
        raise BadMagic(f"expected {MAGIC!r}, got {bytes(view[:4])!r}")
    take(4)
    version, count = struct.unpack("<II", take(8))
    if version != VERSION:
        raise VersionMismatch(f"bundle version {version}, reader supports {VERSION}")
    entries = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        try:
            name = bytes(take(name_len)).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise MalformedFile("tensor name is not UTF-8") from exc
        (rank,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        n = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(take(4 * n), dtype="<f4").reshape(shape)
        if name in entries:
            raise DuplicateName(name)
        entries[name] = arr
    if pos != len(view):
        raise MalformedFile(f"{len(view) - pos} trailing bytes after last tensor")
    return WeightBundle(entries, version=version)


def load_weights(path) -> WeightBundle:
    return deserialize(Path(path).read_bytes())


@dataclass(frozen=True)
class ParamSpec:
    """Shape and init rule for one tensor.

    ``kind`` is ``"uniform"`` (bounded by sqrt(1/fan_in)), ``"ones"`` or ``"zeros"``.
    """

    name: str
    shape: tuple
    kind: str = "uniform"
    fan_in: int = 1


def init_random(model_config, seed: int) -> WeightBundle:
    """Draw every tensor listed by ``model_config.param_specs()`` from a seeded generator.

    Conv/linear weights and biases are uniform in +-sqrt(1/fan_in); norm
    gains are 1 and norm biases 0.
    """
    specs = model_config.param_specs() if hasattr(model_config, "param_specs") else list(model_config)
    rng = np.random.default_rng(seed)
    out = {}
    for s in specs:
        if s.kind == "ones":
            out[s.name] = np.ones(s.shape, dtype="<f4")
        elif s.kind == "zeros":
            out[s.name] = np.zeros(s.shape, dtype="<f4")
        else:
            bound = float(np.sqrt(1.0 / s.fan_in))
            a = rng.uniform(-bound, bound, size=s.shape).astype("<f4")
            out[s.name] = np.clip(a, -bound, bound)
    return WeightBundle(out)


def check_shapes(bundle: Mapping, specs: Iterable[ParamSpec], error=ValueError) -> None:
    """Raise ``error`` if ``bundle`` lacks a tensor in ``specs`` or has the wrong shape."""
    for s in specs:
        if s.name not in bundle:
            raise error(f"missing tensor {s.name!r}")
        if tuple(bundle[s.name].shape) != tuple(s.shape):
            raise error(f"tensor {s.name!r} has shape {bundle[s.name].shape}, expected {s.shape}")
