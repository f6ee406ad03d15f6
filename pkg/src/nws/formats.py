"""Binary pool and task-model files.

Both formats are little-endian, versioned and end with a CRC32 over every
preceding byte.

PoolFile::

    "NWSP" u16 version u16 flags
    32B   architecture fingerprint (sha256 of the canonical arch JSON)
    u32   arch JSON length, arch JSON bytes
    u32   layer count
    per layer: u32 layer_id, u8 ndim, u32 n, u32 dims[ndim], u8 float bytes, n*prod(dims) floats
    u32   CRC32

TaskModelFile::

    "NWSM" u16 version u16 flags
    32B   architecture fingerprint, 32B pool-set fingerprint
    u32   task_id, u32 v_t                       (head metadata)
    u32   layer count, u32 batch-norm count
    u32   index payload bytes, u32 BN payload bytes, u32 overhead bytes
    per layer: u32 layer_id, u32 d_in, u32 d_out, u32 n, u8 bits, packed indices
    per BN:    u32 channels, u8 float bytes, f64 momentum, f64 eps,
               running mean, running var, gamma, beta
    u32   metadata JSON length, metadata JSON bytes
    u32   CRC32

Indices are packed LSB-first at ``bits`` bits each. The overhead field
counts every byte that is not index payload, BN arrays or the 8 bytes of
head metadata, so ``file size = index + BN + 8 + overhead``.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .analysis import bits_for
from .arch import ArchSpec
from .data import atomic_write
from .errors import CorruptFileError, CorruptModelError, IncompatibleArtifactError
from .harness import TaskModel
from .nn import BatchNormState
from .pool import IndexVector, KernelPool, PoolSet
from .tensor import Tensor

POOL_MAGIC = b"NWSP"
MODEL_MAGIC = b"NWSM"
VERSION = 1
_FLOATS = {4: np.dtype("<f4"), 8: np.dtype("<f8")}


class _Reader:
    def __init__(self, raw: bytes, name: str):
        self.raw, self.pos, self.name = raw, 0, name

    def take(self, size: int) -> bytes:
        if self.pos + size > len(self.raw):
            raise CorruptFileError(f"{self.name}: truncated at byte offset {len(self.raw)}")
        chunk = self.raw[self.pos:self.pos + size]
        self.pos += size
        return chunk

    def unpack(self, fmt: str):
        values = struct.unpack("<" + fmt, self.take(struct.calcsize("<" + fmt)))
        return values if len(values) > 1 else values[0]

    def floats(self, count: int, width: int) -> np.ndarray:
        if width not in _FLOATS:
            raise CorruptFileError(f"{self.name}: bad float width {width} at byte offset {self.pos - 1}")
        return np.frombuffer(self.take(count * width), _FLOATS[width]).astype(_FLOATS[width].newbyteorder("="))


def _open(raw: bytes, magic: bytes, name: str) -> _Reader:
    if len(raw) < 12 or raw[:4] != magic:
        raise CorruptFileError(f"{name}: bad magic at byte offset 0")
    stored = struct.unpack("<I", raw[-4:])[0]
    if zlib.crc32(raw[:-4]) != stored:
        raise CorruptFileError(f"{name}: checksum mismatch")
    version = struct.unpack("<H", raw[4:6])[0]
    if version != VERSION:
        raise IncompatibleArtifactError(f"{name}: format version {version}, expected {VERSION}")
    reader = _Reader(raw[:-4], name)
    reader.pos = 8
    return reader


def _seal(body: bytes) -> bytes:
    return body + struct.pack("<I", zlib.crc32(body))


def _floats_bytes(arr: np.ndarray) -> bytes:
    return arr.astype(_FLOATS[arr.dtype.itemsize], copy=False).tobytes()


# -- pools -------------------------------------------------------------------

def pools_to_bytes(pools: PoolSet) -> bytes:
    if pools.arch is None:
        raise IncompatibleArtifactError("pools carry no architecture")
    arch_json = pools.arch.canonical_json().encode()
    body = [POOL_MAGIC, struct.pack("<HH", VERSION, 0), bytes.fromhex(pools.arch.fingerprint()),
            struct.pack("<I", len(arch_json)), arch_json, struct.pack("<I", len(pools))]
    body += [p.canonical_bytes() for p in pools]
    return _seal(b"".join(body))


def pools_from_bytes(raw: bytes, name: str = "pool file") -> PoolSet:
    r = _open(raw, POOL_MAGIC, name)
    fingerprint = r.take(32).hex()
    arch_json = r.take(r.unpack("I")).decode()
    try:
        arch = ArchSpec.from_dict(json.loads(arch_json))
    except ValueError as exc:
        raise CorruptFileError(f"{name}: bad architecture record ({exc})") from None
    if arch.fingerprint() != fingerprint:
        raise CorruptFileError(f"{name}: architecture fingerprint does not match its record")
    pools = []
    for _ in range(r.unpack("I")):
        layer_id, ndim, n = r.unpack("IBI")
        dims = r.unpack(f"{ndim}I") if ndim else ()
        dims = (dims,) if isinstance(dims, int) else tuple(dims)
        width = r.unpack("B")
        entries = r.floats(n * int(np.prod(dims)), width).reshape((n,) + dims)
        pools.append(KernelPool(entries, layer_id, frozen=True, dtype=entries.dtype))
    if r.pos != len(r.raw):
        raise CorruptFileError(f"{name}: trailing bytes at byte offset {r.pos}")
    return PoolSet(pools, arch=arch)


def save_pools(path, pools: PoolSet) -> int:
    raw = pools_to_bytes(pools)
    atomic_write(path, raw)
    return len(raw)


def load_pools(path) -> PoolSet:
    return pools_from_bytes(_read(path), str(path))


# -- task models -------------------------------------------------------------

def pack_indices(indices: np.ndarray, bits: int) -> bytes:
    idx = np.asarray(indices, dtype=np.uint64)
    if idx.size and int(idx.max()) >> bits:
        raise CorruptModelError(f"index {int(idx.max())} does not fit in {bits} bits")
    planes = ((idx[:, None] >> np.arange(bits, dtype=np.uint64)) & 1).astype(np.uint8)
    return np.packbits(planes.ravel(), bitorder="little").tobytes()


def unpack_indices(raw: bytes, count: int, bits: int) -> np.ndarray:
    planes = np.unpackbits(np.frombuffer(raw, np.uint8), count=count * bits, bitorder="little")
    weights = np.left_shift(np.int64(1), np.arange(bits, dtype=np.int64))
    return planes.reshape(count, bits).astype(np.int64) @ weights


@dataclass
class Section:
    offset: int
    length: int
    kind: str  # header | head | index-meta | indices | bn-meta | bn-arrays | metadata | checksum
    layer: int = -1


def _model_sections(model: TaskModel, policy: str) -> list:
    """``(kind, layer, bytes)`` chunks of the file body, header excluded."""
    chunks = []
    for code, n in zip(model.indices, model.pool_sizes):
        bits = bits_for(n, policy)
        chunks.append(("index-meta", code.layer_id,
                       struct.pack("<IIIIB", code.layer_id, code.d_in, code.d_out, n, bits)))
        chunks.append(("indices", code.layer_id, pack_indices(code.indices, bits)))
    for i, st in enumerate(model.bn_states):
        width = st.running_mean.dtype.itemsize
        chunks.append(("bn-meta", i, struct.pack("<IBdd", st.channels, width, st.momentum, st.eps)))
        chunks.append(("bn-arrays", i, b"".join(_floats_bytes(a) for a in st.arrays().values())))
    meta = json.dumps({"classes": model.classes}, sort_keys=True, separators=(",", ":")).encode()
    chunks.append(("metadata", -1, struct.pack("<I", len(meta)) + meta))
    return chunks


_MODEL_HEADER = struct.Struct("<4sHH32s32sIIIIIII")


def model_to_bytes(model: TaskModel, index_bits: str = "packed") -> bytes:
    chunks = _model_sections(model, index_bits)
    index_bytes = sum(len(c) for k, _, c in chunks if k == "indices")
    bn_bytes = sum(len(c) for k, _, c in chunks if k == "bn-arrays")
    total = _MODEL_HEADER.size + sum(len(c) for _, _, c in chunks) + 4
    overhead = total - index_bytes - bn_bytes - 8
    header = _MODEL_HEADER.pack(MODEL_MAGIC, VERSION, 0, bytes.fromhex(model.arch_fingerprint),
                                bytes.fromhex(model.pool_fingerprint), model.task_id, model.num_classes,
                                len(model.indices), len(model.bn_states), index_bytes, bn_bytes, overhead)
    return _seal(header + b"".join(c for _, _, c in chunks))


def _parse_model(raw: bytes, name: str):
    r = _open(raw, MODEL_MAGIC, name)
    sections = [Section(0, 72, "header"), Section(72, 8, "head"), Section(80, _MODEL_HEADER.size - 80, "header")]
    r.pos = 0
    (_, _, _, arch_fp, pool_fp, task_id, v, n_layers, n_bn,
     index_bytes, bn_bytes, overhead) = _MODEL_HEADER.unpack(r.take(_MODEL_HEADER.size))
    codes, sizes = [], []
    for _ in range(n_layers):
        start = r.pos
        layer_id, d_in, d_out, n, bits = r.unpack("IIIIB")
        sections.append(Section(start, r.pos - start, "index-meta", layer_id))
        count = d_in * d_out
        nbytes = (count * bits + 7) // 8
        start = r.pos
        idx = unpack_indices(r.take(nbytes), count, bits)
        sections.append(Section(start, nbytes, "indices", layer_id))
        code = IndexVector(layer_id, idx, d_in, d_out)
        code.validate(n)
        codes.append(code)
        sizes.append(n)
    states = []
    for i in range(n_bn):
        start = r.pos
        channels, width, momentum, eps = r.unpack("IBdd")
        sections.append(Section(start, r.pos - start, "bn-meta", i))
        start = r.pos
        arr = r.floats(4 * channels, width).reshape(4, channels)
        sections.append(Section(start, r.pos - start, "bn-arrays", i))
        try:
            states.append(BatchNormState(arr[0].copy(), arr[1].copy(), Tensor(arr[2].copy()),
                                         Tensor(arr[3].copy()), momentum, eps))
        except ValueError as exc:
            raise CorruptModelError(f"{name}: batch-norm record {i}: {exc}") from None
    start = r.pos
    meta = json.loads(r.take(r.unpack("I")).decode())
    sections.append(Section(start, r.pos - start, "metadata"))
    if r.pos != len(r.raw):
        raise CorruptFileError(f"{name}: trailing bytes at byte offset {r.pos}")
    sections.append(Section(len(r.raw), 4, "checksum"))
    model = TaskModel(task_id=task_id, num_classes=v, indices=codes, bn_states=states, pool_sizes=sizes,
                      arch_fingerprint=arch_fp.hex(), pool_fingerprint=pool_fp.hex(),
                      classes=[int(c) for c in meta.get("classes", [])])
    header = {"task_id": task_id, "num_classes": v, "layers": n_layers, "bn_layers": n_bn,
              "index_bytes": index_bytes, "bn_bytes": bn_bytes, "head_bytes": 8,
              "overhead_bytes": overhead, "file_bytes": len(raw)}
    return model, header, sections


def model_from_bytes(raw: bytes, name: str = "model file") -> TaskModel:
    return _parse_model(raw, name)[0]


def scan_model(raw: bytes, name: str = "model file") -> dict:
    """Section map of a model file: every byte is attributed to one typed section."""
    _, header, sections = _parse_model(raw, name)
    return {"header": header, "sections": [s.__dict__ for s in sections]}


def save_model(path, model: TaskModel, index_bits: str = "packed") -> int:
    raw = model_to_bytes(model, index_bits)
    atomic_write(path, raw)
    return len(raw)


def load_model(path, pools: PoolSet = None) -> TaskModel:
    """Load a task model; with ``pools`` its fingerprint and index range are checked too."""
    model = model_from_bytes(_read(path), str(path))
    if pools is not None:
        if model.pool_fingerprint != pools.fingerprint():
            raise IncompatibleArtifactError(f"{path}: model was built on different pools")
        if model.pool_sizes != [p.n for p in pools]:
            raise IncompatibleArtifactError(f"{path}: pool sizes differ")
    return model


def _read(path) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        raise CorruptFileError(f"{path}: cannot read ({exc.strerror})") from None
