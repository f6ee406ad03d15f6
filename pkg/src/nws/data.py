"""Image datasets: IDX-style binaries, class-folder raw blobs, and a synthetic generator.

IDX files follow the classic layout: two zero bytes, a type code, the number
of dimensions, then one big-endian uint32 per dimension and the payload.
A dataset directory holds ``images.idx`` (N, C, H, W) and ``labels.idx`` (N).

The class-folder layout is a root with ``header.json`` (``height``,
``width``, ``channels``) and one sub-directory per class named ``<label>``
or ``<label>_<name>``; every ``*.raw`` file inside is an HWC uint8 blob.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np

from .errors import DatasetError

_IDX_TYPES = {0x08: np.uint8, 0x09: np.int8, 0x0B: np.dtype(">i2"), 0x0C: np.dtype(">i4"),
              0x0D: np.dtype(">f4"), 0x0E: np.dtype(">f8")}
_IDX_CODES = {np.dtype(np.uint8): 0x08, np.dtype(np.int8): 0x09, np.dtype(np.int16): 0x0B,
              np.dtype(np.int32): 0x0C, np.dtype(np.float32): 0x0D, np.dtype(np.float64): 0x0E}


@dataclass
class ImageDataset:
    images: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.images = np.asarray(self.images)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise DatasetError(f"images must be (N, C, H, W), got {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise DatasetError(f"{len(self.images)} images but {len(self.labels)} labels")

    def __len__(self) -> int:
        return len(self.labels)

    def __getitem__(self, i):
        return self.images[i], int(self.labels[i])

    def __iter__(self) -> Iterator:
        for i in range(len(self)):
            yield self[i]

    @property
    def image_shape(self) -> tuple:
        return self.images.shape[1:]

    @property
    def classes(self) -> np.ndarray:
        return np.unique(self.labels)

    def label_counts(self) -> dict:
        values, counts = np.unique(self.labels, return_counts=True)
        return {int(v): int(c) for v, c in zip(values, counts)}

    def shuffled(self, seed: int) -> "ImageDataset":
        order = np.random.default_rng(seed).permutation(len(self))
        return ImageDataset(self.images[order], self.labels[order])

    def select(self, classes: Sequence[int], remap: bool = True) -> "ImageDataset":
        """Keep only ``classes``; with ``remap`` labels become positions in ``classes``."""
        classes = [int(c) for c in classes]
        mask = np.isin(self.labels, classes)
        labels = self.labels[mask]
        if remap:
            lookup = {c: i for i, c in enumerate(classes)}
            labels = np.array([lookup[int(l)] for l in labels], dtype=np.int64)
        return ImageDataset(self.images[mask], labels)

    def batches(self, batch_size: int, rng: Optional[np.random.Generator] = None) -> Iterator:
        order = np.arange(len(self)) if rng is None else rng.permutation(len(self))
        for start in range(0, len(self), batch_size):
            idx = order[start:start + batch_size]
            yield self.images[idx], self.labels[idx]


# -- IDX ---------------------------------------------------------------------

def read_idx(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise DatasetError(f"{path}: truncated header at byte offset {len(raw)}")
    if raw[0] != 0 or raw[1] != 0:
        raise DatasetError(f"{path}: bad magic at byte offset 0")
    code, ndim = raw[2], raw[3]
    if code not in _IDX_TYPES:
        raise DatasetError(f"{path}: unknown type code 0x{code:02x} at byte offset 2")
    header_end = 4 + 4 * ndim
    if len(raw) < header_end:
        raise DatasetError(f"{path}: truncated dimension list at byte offset {len(raw)}")
    dims = struct.unpack(f">{ndim}I", raw[4:header_end])
    dtype = np.dtype(_IDX_TYPES[code])
    expected = header_end + int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
    if len(raw) != expected:
        raise DatasetError(f"{path}: payload size mismatch, expected {expected} bytes, "
                           f"file ends at byte offset {len(raw)}")
    arr = np.frombuffer(raw, dtype=dtype, offset=header_end).reshape(dims)
    return arr.astype(dtype.newbyteorder("="))


def write_idx(path, array: np.ndarray) -> None:
    array = np.asarray(array)
    code = _IDX_CODES.get(array.dtype)
    if code is None:
        raise DatasetError(f"cannot store dtype {array.dtype} in IDX")
    header = bytes([0, 0, code, array.ndim]) + struct.pack(f">{array.ndim}I", *array.shape)
    atomic_write(path, header + array.astype(array.dtype.newbyteorder(">")).tobytes())


def _to_float(images: np.ndarray) -> np.ndarray:
    if images.dtype == np.uint8:
        return images.astype(np.float32) / 255.0
    return images.astype(np.float32)


def load_idx(path) -> ImageDataset:
    path = Path(path)
    img_path = path / "images.idx" if path.is_dir() else path
    lbl_path = img_path.with_name(img_path.name.replace("images", "labels"))
    if img_path == lbl_path or not lbl_path.exists():
        raise DatasetError(f"{path}: no labels file next to {img_path.name}")
    images, labels = read_idx(img_path), read_idx(lbl_path)
    if images.ndim == 3:
        images = images[:, None]
    return ImageDataset(_to_float(images), labels.astype(np.int64))


def save_idx_dataset(directory, dataset: ImageDataset) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_idx(directory / "images.idx", dataset.images.astype(np.float32))
    write_idx(directory / "labels.idx", dataset.labels.astype(np.int32))


# -- class folders -------------------------------------------------------------

def load_class_folders(root) -> ImageDataset:
    root = Path(root)
    try:
        header = json.loads((root / "header.json").read_text())
        h, w, c = int(header["height"]), int(header["width"]), int(header["channels"])
    except (OSError, ValueError, KeyError) as exc:
        raise DatasetError(f"{root}: unreadable header.json at byte offset 0 ({exc})") from None
    size = h * w * c
    images, labels = [], []
    for sub in sorted(p for p in root.iterdir() if p.is_dir()):
        try:
            label = int(sub.name.split("_", 1)[0])
        except ValueError:
            raise DatasetError(f"{sub}: class folder must start with an integer label") from None
        for blob in sorted(sub.glob("*.raw")):
            raw = blob.read_bytes()
            if len(raw) != size:
                raise DatasetError(f"{blob}: expected {size} bytes, data ends at byte offset {len(raw)}")
            images.append(np.frombuffer(raw, np.uint8).reshape(h, w, c).transpose(2, 0, 1))
            labels.append(label)
    if not images:
        return ImageDataset(np.zeros((0, c, h, w), np.float32), np.zeros(0, np.int64))
    return ImageDataset(_to_float(np.stack(images)), np.array(labels))


def save_class_folders(root, dataset: ImageDataset) -> None:
    """Write ``dataset`` (values in [0, 1]) as uint8 class-folder blobs."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    c, h, w = dataset.image_shape
    (root / "header.json").write_text(json.dumps({"height": h, "width": w, "channels": c}))
    pixels = np.clip(np.rint(dataset.images * 255), 0, 255).astype(np.uint8)
    for i, (img, label) in enumerate(zip(pixels, dataset.labels)):
        folder = root / str(int(label))
        folder.mkdir(exist_ok=True)
        (folder / f"{i:06d}.raw").write_bytes(img.transpose(1, 2, 0).tobytes())


def load_dataset(path, format: Optional[str] = None) -> ImageDataset:
    """Load ``path`` as ``"idx"`` or ``"folders"``; detected from its contents when omitted."""
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"{path}: no such dataset")
    if format is None:
        format = "folders" if (path / "header.json").exists() else "idx"
    if format == "idx":
        return load_idx(path)
    if format == "folders":
        return load_class_folders(path)
    raise DatasetError(f"unknown dataset format {format!r}")


def atomic_write(path, payload: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(payload)
    os.replace(tmp, path)


# -- synthetic images ------------------------------------------------------------

@dataclass(frozen=True)
class SyntheticSpec:
    """Class-conditional Gabor textures.

    Every class is a mixture of ``components`` oriented gratings with its
    own orientation, frequency, colour and position; samples jitter all of
    these, draw a random phase and add Gaussian pixel noise.
    """

    num_classes: int = 16
    image_size: int = 16
    channels: int = 3
    components: int = 2
    noise: float = 0.35
    orientation_jitter: float = 0.25
    shift: int = 2
    seed: int = 0


def _class_params(spec: SyntheticSpec) -> list:
    rng = np.random.default_rng([spec.seed, 7])
    params = []
    for _ in range(spec.num_classes):
        comps = []
        for _ in range(spec.components):
            comps.append(dict(
                theta=rng.uniform(0, np.pi),
                freq=rng.uniform(0.12, 0.32),
                color=rng.normal(size=spec.channels),
                center=rng.uniform(0.3, 0.7, size=2) * spec.image_size,
                sigma=rng.uniform(0.2, 0.35) * spec.image_size,
            ))
        params.append(comps)
    return params


def make_synthetic(spec: SyntheticSpec, samples_per_class: int, classes: Optional[Sequence[int]] = None,
                   split_seed: int = 0) -> ImageDataset:
    """Draw ``samples_per_class`` images for each class in ``classes`` (default: all).

    ``split_seed`` separates independent draws of the same classes, e.g.
    train versus test.
    """
    classes = list(range(spec.num_classes)) if classes is None else [int(c) for c in classes]
    params = _class_params(spec)
    s = spec.image_size
    yy, xx = np.mgrid[0:s, 0:s].astype(np.float64)
    images = np.empty((len(classes) * samples_per_class, spec.channels, s, s), np.float32)
    labels = np.repeat(np.array(classes, dtype=np.int64), samples_per_class)
    for ci, cls in enumerate(classes):
        rng = np.random.default_rng([spec.seed, split_seed, cls])
        for j in range(samples_per_class):
            img = np.zeros((spec.channels, s, s))
            for comp in params[cls]:
                theta = comp["theta"] + rng.normal(0, spec.orientation_jitter)
                cy, cx = comp["center"] + rng.integers(-spec.shift, spec.shift + 1, size=2)
                env = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * comp["sigma"] ** 2))
                wave = np.cos(2 * np.pi * comp["freq"] * (xx * np.cos(theta) + yy * np.sin(theta))
                              + rng.uniform(0, 2 * np.pi))
                amp = rng.uniform(0.7, 1.3)
                img += amp * comp["color"][:, None, None] * (env * wave)[None]
            img += rng.normal(0, spec.noise, size=img.shape)
            images[ci * samples_per_class + j] = img
    return ImageDataset(images, labels)
