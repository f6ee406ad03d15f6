"""Layer-wise kernel pools and nearest-neighbour kernel search.

A pool is an indexed lookup table of ``n`` kernels. Searching maps every
query kernel to the index of its nearest entry under squared L2 distance,
with ties resolved towards the lowest index. Encoding keeps only the
indices; decoding gathers the entries back.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from .errors import CorruptModelError, DimensionError, FrozenPoolError, InvalidInputError
from .tensor import Tensor, get_default_dtype

# max number of float elements materialised per distance chunk
_CHUNK_ELEMS = 1 << 22


@dataclass(frozen=True)
class IndexVector:
    """Integer encoding of one layer's selected kernels."""

    layer_id: int
    indices: np.ndarray
    d_in: int
    d_out: int

    def __post_init__(self):
        idx = np.asarray(self.indices)
        if idx.ndim != 1 or idx.dtype.kind not in "iu":
            raise InvalidInputError("indices must be a 1-D integer vector")
        if idx.size != self.d_in * self.d_out:
            raise DimensionError(
                f"layer {self.layer_id}: {idx.size} indices for d_in*d_out = {self.d_in * self.d_out}")
        if idx.size and idx.min() < 0:
            pos = int(np.argmin(idx))
            raise CorruptModelError(f"layer {self.layer_id}: negative index at position {pos}")
        object.__setattr__(self, "indices", idx.astype(np.int64))

    def __len__(self) -> int:
        return int(self.indices.size)

    def __eq__(self, other) -> bool:
        if not isinstance(other, IndexVector):
            return NotImplemented
        return (self.layer_id, self.d_in, self.d_out) == (other.layer_id, other.d_in, other.d_out) \
            and np.array_equal(self.indices, other.indices)

    def validate(self, n: int) -> None:
        bad = np.flatnonzero(self.indices >= n)
        if bad.size:
            pos = int(bad[0])
            raise CorruptModelError(
                f"layer {self.layer_id}: index {int(self.indices[pos])} at position {pos} "
                f"outside pool of {n} entries")


@dataclass
class SearchResult:
    kernels: np.ndarray
    indices: IndexVector
    diff: float


class KernelPool:
    """Lookup table of ``n`` kernels for one layer.

    While unfrozen the entries live in a trainable :class:`Tensor`
    (``weight``); :meth:`freeze` makes the storage read-only for good.
    """

    def __init__(self, entries, layer_id: int = 0, frozen: bool = False, dtype=None):
        arr = np.array(entries, dtype=dtype or get_default_dtype())
        if arr.ndim < 2 or arr.shape[0] < 1:
            raise DimensionError(f"pool entries must be [n, ...] with n >= 1, got {arr.shape}")
        self.layer_id = int(layer_id)
        self.weight = Tensor(arr, requires_grad=not frozen, dtype=arr.dtype)
        self._frozen = False
        if frozen:
            self.freeze()

    @property
    def entries(self) -> np.ndarray:
        return self.weight.data

    @property
    def n(self) -> int:
        return self.entries.shape[0]

    @property
    def kernel_shape(self) -> tuple:
        return self.entries.shape[1:]

    @property
    def kernel_size(self) -> int:
        return self.kernel_shape[0]

    @property
    def frozen(self) -> bool:
        return self._frozen

    def freeze(self) -> "KernelPool":
        self.weight.requires_grad = False
        self.weight.grad = None
        self.weight.data.flags.writeable = False
        self._frozen = True
        return self

    def set_entries(self, entries) -> None:
        if self._frozen:
            raise FrozenPoolError(f"pool of layer {self.layer_id} is frozen")
        self.weight.data[...] = entries

    def canonical_bytes(self) -> bytes:
        """Layer record used for fingerprints and the pool file."""
        arr = np.ascontiguousarray(self.entries)
        kshape = self.kernel_shape
        head = struct.pack("<IBI", self.layer_id, len(kshape), self.n)
        head += struct.pack(f"<{len(kshape)}I", *kshape)
        head += struct.pack("<B", 8 if arr.dtype == np.float64 else 4)
        return head + arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()

    def __repr__(self) -> str:
        state = "frozen" if self._frozen else "trainable"
        return f"KernelPool(layer_id={self.layer_id}, n={self.n}, kernel={self.kernel_shape}, {state})"


class PoolSet(Sequence):
    """One pool per searched layer, in layer order."""

    def __init__(self, pools: Sequence[KernelPool], arch=None):
        self.pools = list(pools)
        self.arch = arch

    @property
    def arch_fingerprint(self) -> str:
        return self.arch.fingerprint() if self.arch is not None else ""

    def __getitem__(self, i) -> KernelPool:
        return self.pools[i]

    def __len__(self) -> int:
        return len(self.pools)

    def __iter__(self) -> Iterator[KernelPool]:
        return iter(self.pools)

    @property
    def frozen(self) -> bool:
        return all(p.frozen for p in self.pools)

    def freeze(self) -> "PoolSet":
        for p in self.pools:
            p.freeze()
        return self

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for p in self.pools:
            h.update(p.canonical_bytes())
        return h.hexdigest()


def _flatten_queries(pool: KernelPool, w: np.ndarray) -> np.ndarray:
    kshape = pool.kernel_shape
    w = np.asarray(w)
    if w.shape[-len(kshape):] != kshape:
        raise DimensionError(f"query kernel shape {w.shape[-len(kshape):]} does not match pool {kshape}")
    flat = w.reshape(-1, int(np.prod(kshape))).astype(pool.entries.dtype, copy=False)
    if np.isnan(flat).any():
        raise InvalidInputError(f"NaN in query kernels for layer {pool.layer_id}")
    return flat


def _nearest_flat(entries: np.ndarray, queries: np.ndarray):
    """Exhaustive scan. Returns (indices, squared distances)."""
    n, m = entries.shape
    q = queries.shape[0]
    idx = np.empty(q, dtype=np.int64)
    dist = np.empty(q, dtype=entries.dtype)
    step = max(1, _CHUNK_ELEMS // max(1, n * m))
    for start in range(0, q, step):
        block = queries[start:start + step]
        delta = block[:, None, :] - entries[None, :, :]
        d2 = (delta * delta).sum(axis=-1)
        best = d2.argmin(axis=1)  # first minimum = lowest index
        idx[start:start + step] = best
        dist[start:start + step] = d2[np.arange(len(block)), best]
    return idx, dist


def nearest(pool: KernelPool, w) -> tuple:
    """Index of the pool entry closest to kernel ``w`` and its squared L2 distance."""
    flat = _flatten_queries(pool, w)
    if flat.shape[0] != 1:
        raise DimensionError(f"nearest expects a single kernel, got {flat.shape[0]}")
    entries = pool.entries.reshape(pool.n, -1)
    idx, dist = _nearest_flat(entries, flat)
    return int(idx[0]), float(dist[0])


def search_layer(pool: KernelPool, temps) -> SearchResult:
    """Replace each temporary kernel by its nearest pool entry.

    ``temps`` is ``[d_out, d_in, *kernel]`` (a :class:`Tensor` or array).
    ``diff`` is the summed squared distance over all kernels.
    """
    w = temps.data if isinstance(temps, Tensor) else np.asarray(temps)
    if w.ndim != 2 + len(pool.kernel_shape):
        raise DimensionError(f"temps must be [d_out, d_in, *{pool.kernel_shape}], got {w.shape}")
    d_out, d_in = w.shape[:2]
    flat = _flatten_queries(pool, w)
    entries = pool.entries.reshape(pool.n, -1)
    idx, dist = _nearest_flat(entries, flat)
    kernels = pool.entries[idx].reshape(w.shape)
    return SearchResult(kernels, IndexVector(pool.layer_id, idx, d_in, d_out), float(dist.sum()))


def encode(pool: KernelPool, temps) -> IndexVector:
    return search_layer(pool, temps).indices


def decode(pool: KernelPool, code: IndexVector) -> np.ndarray:
    """Gather the kernels named by ``code`` into a ``[d_out, d_in, *kernel]`` block."""
    code.validate(pool.n)
    return pool.entries[code.indices].reshape((code.d_out, code.d_in) + pool.kernel_shape)
