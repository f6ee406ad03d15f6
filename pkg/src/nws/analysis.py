"""Post-hoc metrics over stored task models and the memory accountant.

Everything here is computed from index vectors and architecture
descriptors alone, so it works on models loaded from disk.

CSV exports use fixed columns:

* usage: ``task_id,layer_id,d,n,unique,kur,layer_sparsity``
* selection rates: ``task_id,layer_id,index,count,rate``
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence, Union

import numpy as np

from .arch import ArchSpec, get_arch, index_bits as packed_bits
from .errors import ConfigError

MB = 1_000_000
BN_ARRAYS = 4  # running mean, running var, gamma, beta
HEAD_METADATA_BYTES = 8  # task_id and v_t as uint32
BIT_POLICIES = ("packed", "aligned16")

USAGE_COLUMNS = ("task_id", "layer_id", "d", "n", "unique", "kur", "layer_sparsity")
RATE_COLUMNS = ("task_id", "layer_id", "index", "count", "rate")


@dataclass
class LayerUsage:
    layer_id: int
    d: int
    n: int
    counts: dict  # unique index -> selection count h_u

    @classmethod
    def from_indices(cls, layer_id: int, indices, n: int) -> "LayerUsage":
        values, counts = np.unique(np.asarray(indices), return_counts=True)
        return cls(layer_id, int(np.sum(counts)), int(n),
                   {int(v): int(c) for v, c in zip(values, counts)})

    @property
    def unique(self) -> int:
        return len(self.counts)

    @property
    def kur(self) -> float:
        return self.unique / self.n

    @property
    def layer_sparsity(self) -> float:
        threshold = math.sqrt(self.d)
        return sum(h for h in self.counts.values() if h < threshold) / self.d

    def selection_rates(self) -> list:
        """``(index, rate)`` pairs sorted by index."""
        return [(u, h / self.d) for u, h in sorted(self.counts.items())]


def layer_usage(model) -> list:
    return [LayerUsage.from_indices(code.layer_id, code.indices, n)
            for code, n in zip(model.indices, model.pool_sizes)]


def kur(model) -> list:
    """Per-layer kernel utilisation ratio: distinct indices over pool size."""
    return [u.kur for u in layer_usage(model)]


def layer_sparsity(model) -> list:
    """Per-layer share of kernel slots filled by indices chosen fewer than sqrt(d) times."""
    return [u.layer_sparsity for u in layer_usage(model)]


def selection_rate_hist(model) -> list:
    return [u.selection_rates() for u in layer_usage(model)]


def usage_rows(models) -> list:
    rows = []
    for m in models:
        for u in layer_usage(m):
            rows.append({"task_id": m.task_id, "layer_id": u.layer_id, "d": u.d, "n": u.n,
                         "unique": u.unique, "kur": u.kur, "layer_sparsity": u.layer_sparsity})
    return rows


def rate_rows(models) -> list:
    rows = []
    for m in models:
        for u in layer_usage(m):
            for index, rate in u.selection_rates():
                rows.append({"task_id": m.task_id, "layer_id": u.layer_id, "index": index,
                             "count": u.counts[index], "rate": rate})
    return rows


def to_csv(rows: list, columns: Sequence[str]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(columns), lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({c: repr(v) if isinstance(v, float) else v for c, v in row.items()})
    return buf.getvalue()


def analyze(models) -> dict:
    """JSON-ready summary of usage metrics for ``models``."""
    return {"tasks": [{"task_id": m.task_id, "num_classes": m.num_classes,
                       "kur": kur(m), "layer_sparsity": layer_sparsity(m)} for m in models]}


# -- memory ------------------------------------------------------------------

def bits_for(n: int, policy: str) -> int:
    if policy == "packed":
        return packed_bits(n)
    if policy == "aligned16":
        return 16 if packed_bits(n) <= 16 else 32
    raise ConfigError(f"unknown index bit policy {policy!r}; choose from {BIT_POLICIES}")


@dataclass
class MemoryReport:
    arch: str
    index_bits: str
    float_bytes: int
    per_task_bytes: list
    assist_bytes: int
    layers: list = field(default_factory=list)

    @property
    def tasks(self) -> int:
        return len(self.per_task_bytes)

    @property
    def total_bytes(self) -> int:
        return self.assist_bytes + sum(self.per_task_bytes)

    @property
    def mean_per_task_bytes(self) -> float:
        return sum(self.per_task_bytes) / self.tasks if self.tasks else 0.0

    def to_dict(self) -> dict:
        d = asdict(self)
        d.update(tasks=self.tasks, total_bytes=self.total_bytes,
                 per_task_mb=self.mean_per_task_bytes / MB, assist_mb=self.assist_bytes / MB,
                 total_mb=self.total_bytes / MB)
        return d


def task_bytes(arch: ArchSpec, num_classes: int, policy: str = "packed", float_bytes: int = 4) -> dict:
    """Byte breakdown of one stored task: packed indices, batch-norm state, head metadata."""
    index = sum(math.ceil(l.kernel_count(num_classes) * bits_for(l.n, policy) / 8)
                for l in arch.searched_layers)
    bn = sum(arch.bn_channels()) * BN_ARRAYS * float_bytes
    return {"index": index, "bn": bn, "head": HEAD_METADATA_BYTES, "total": index + bn + HEAD_METADATA_BYTES}


def memory_report(arch, tasks: Union[int, Sequence[int]], num_classes: Optional[int] = None,
                  index_bits: str = "packed", pools=None, float_bytes: int = 4) -> MemoryReport:
    """Storage cost of ``tasks`` task models plus the shared pools.

    ``tasks`` is either a list of per-task class counts or a task count
    combined with ``num_classes``. Pool bytes use the element size of
    ``pools`` when given, ``float_bytes`` otherwise.
    """
    arch = get_arch(arch)
    if isinstance(tasks, int):
        if num_classes is None:
            raise ConfigError("num_classes is required when tasks is a count")
        tasks = [num_classes] * tasks
    tasks = [int(v) for v in tasks]
    if pools is not None:
        pool_bytes = [p.n * int(np.prod(p.kernel_shape)) * p.entries.dtype.itemsize for p in pools]
        float_bytes = pools[0].entries.dtype.itemsize if len(pools) else float_bytes
    else:
        pool_bytes = [l.n * l.k * l.k * float_bytes for l in arch.searched_layers]
    ref_v = tasks[0] if tasks else (num_classes or 1)
    layers = []
    for i, (l, pb) in enumerate(zip(arch.searched_layers, pool_bytes)):
        bits = bits_for(l.n, index_bits)
        d = l.kernel_count(ref_v)
        layers.append({"layer_id": i, "role": "head" if l.type == "head" else l.role, "k": l.k,
                       "n": l.n, "d": d, "bits": bits, "index_bytes": math.ceil(d * bits / 8),
                       "pool_bytes": pb})
    per_task = [task_bytes(arch, v, index_bits, float_bytes)["total"] for v in tasks]
    return MemoryReport(arch.name, index_bits, float_bytes, per_task, int(sum(pool_bytes)), layers)


@dataclass(frozen=True)
class Profile:
    arch: str
    tasks: tuple  # class count per task
    pool_size: int = 512
    reference: dict = field(default_factory=dict)  # expected MB figures


_SPLIT_CIFAR = (5,) * 20

PROFILES = {
    "resnet18-split-cifar100": Profile("resnet18", _SPLIT_CIFAR,
                                       reference={"per_task_mb": 1.6, "assist_mb": 1.3, "total_mb": 33.9}),
    "resnet18-cub-sketches": Profile("resnet18", (200, 196, 102, 195, 250), reference={"total_mb": 9.9}),
    "resnet34-split-cifar100": Profile("resnet34", _SPLIT_CIFAR, reference={"total_mb": 59.6}),
    "vgg16-split-cifar100": Profile("vgg16", _SPLIT_CIFAR, reference={"total_mb": 28.0}),
    "mobilenetv2-split-cifar100": Profile("mobilenetv2", _SPLIT_CIFAR, reference={"total_mb": 52.6}),
}

TOLERANCES = {"total_mb": 0.10, "per_task_mb": 0.15, "assist_mb": 0.15}


def profile_report(name: str, tasks: Optional[int] = None, float_bytes: int = 4) -> dict:
    """Memory report of a named reference configuration under both bit policies.

    ``tasks`` truncates or extends the profile's task list (extra tasks
    repeat the last class count). The policy whose figures land closest
    to the expected ones is marked ``selected``.
    """
    if name not in PROFILES:
        raise ConfigError(f"unknown profile {name!r}; choose from {sorted(PROFILES)}")
    prof = PROFILES[name]
    counts = list(prof.tasks)
    if tasks is not None:
        if tasks < 1:
            raise ConfigError("tasks must be >= 1")
        counts = (counts + [counts[-1]] * tasks)[:tasks]
    arch = get_arch(prof.arch, prof.pool_size)
    scale_ref = tasks is None or tasks == len(prof.tasks)
    policies = {}
    for policy in BIT_POLICIES:
        rep = memory_report(arch, counts, index_bits=policy, float_bytes=float_bytes).to_dict()
        checks = {}
        if scale_ref:
            for key, ref in prof.reference.items():
                rel = abs(rep[key] - ref) / ref
                checks[key] = {"reference": ref, "value": rep[key], "relative_error": rel,
                               "tolerance": TOLERANCES[key], "within": rel <= TOLERANCES[key]}
        policies[policy] = {"report": rep, "checks": checks,
                            "distance": sum(c["relative_error"] for c in checks.values())}
    selected = min(BIT_POLICIES, key=lambda p: policies[p]["distance"])
    return {"profile": name, "arch": prof.arch, "pool_size": prof.pool_size, "tasks": len(counts),
            "selected_policy": selected, "policies": policies}
