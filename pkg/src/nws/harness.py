"""Sequential task-incremental learning over frozen pools.

Each task starts its temporary kernels from the kernels named by the
previous task's indices, trains them with the search loss, and is stored
as indices plus batch-norm state. Old tasks are never touched again, so
their predictions cannot drift.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .arch import ArchSpec, build, get_arch
from .data import ImageDataset
from .errors import DatasetError, DimensionError, IncompatibleArtifactError, InvalidInputError, NWSError, StateError
from .pool import PoolSet, decode
from .training import TrainConfig, train_network


@dataclass
class TaskModel:
    """A stored task: indices per searched layer, batch-norm state, head size."""

    task_id: int
    num_classes: int
    indices: list
    bn_states: list
    pool_sizes: list
    arch_fingerprint: str
    pool_fingerprint: str
    classes: list = field(default_factory=list)

    def __post_init__(self):
        if len(self.indices) != len(self.pool_sizes):
            raise DimensionError("one pool size per index vector required")
        for code, n in zip(self.indices, self.pool_sizes):
            code.validate(n)

    @classmethod
    def from_network(cls, net, pools: PoolSet, task_id: int, classes: Sequence[int] = ()) -> "TaskModel":
        return cls(task_id=int(task_id), num_classes=net.num_classes, indices=net.encode(),
                   bn_states=net.bn_snapshot(), pool_sizes=[p.n for p in pools],
                   arch_fingerprint=net.spec.fingerprint(), pool_fingerprint=pools.fingerprint(),
                   classes=[int(c) for c in classes])

    def __eq__(self, other) -> bool:
        if not isinstance(other, TaskModel):
            return NotImplemented
        same_bn = len(self.bn_states) == len(other.bn_states) and all(
            all(np.array_equal(a, b) for a, b in zip(x.arrays().values(), y.arrays().values()))
            for x, y in zip(self.bn_states, other.bn_states))
        return (self.task_id, self.num_classes, self.pool_sizes, self.arch_fingerprint,
                self.pool_fingerprint, self.classes, self.indices) == \
               (other.task_id, other.num_classes, other.pool_sizes, other.arch_fingerprint,
                other.pool_fingerprint, other.classes, other.indices) and same_bn


@dataclass
class TaskSpec:
    """One v-way task; labels of ``train``/``test`` are already in [0, v)."""

    task_id: int
    classes: list
    train: ImageDataset
    test: ImageDataset
    val: Optional[ImageDataset] = None

    def __post_init__(self):
        v = len(self.classes)
        for name in ("train", "test", "val"):
            ds = getattr(self, name)
            if ds is not None and len(ds) and (ds.labels.min() < 0 or ds.labels.max() >= v):
                raise InvalidInputError(f"task {self.task_id}: {name} labels outside [0, {v})")

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    @classmethod
    def from_datasets(cls, task_id: int, classes: Sequence[int], train: ImageDataset,
                      test: ImageDataset) -> "TaskSpec":
        return cls(task_id, [int(c) for c in classes], train.select(classes), test.select(classes))


def make_tasks(train: ImageDataset, test: ImageDataset, splits: Sequence[Sequence[int]]) -> list:
    """One task per class list, numbered from 1, with labels remapped to positions."""
    tasks = [TaskSpec.from_datasets(t + 1, classes, train, test) for t, classes in enumerate(splits)]
    for task in tasks:
        if len(task.train) == 0:
            raise DatasetError(f"task {task.task_id}: no training samples for classes {task.classes}")
    return tasks


# -- checks ------------------------------------------------------------------

def check_compatible(pools: PoolSet, model: TaskModel, arch: ArchSpec) -> None:
    if model.pool_fingerprint != pools.fingerprint():
        raise IncompatibleArtifactError(
            f"task {model.task_id} was built on pools {model.pool_fingerprint[:12]}, "
            f"given pools are {pools.fingerprint()[:12]}")
    if model.arch_fingerprint != arch.fingerprint():
        raise IncompatibleArtifactError(f"task {model.task_id} was built for another architecture")
    if model.pool_sizes != [p.n for p in pools]:
        raise IncompatibleArtifactError(f"task {model.task_id}: pool sizes differ")


def _resolve_arch(pools: PoolSet, arch) -> ArchSpec:
    if arch is None:
        if pools.arch is None:
            raise InvalidInputError("no architecture given and pools carry none")
        return pools.arch
    return get_arch(arch)


def _rng(seed: int, task_id: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(task_id)])


# -- training ----------------------------------------------------------------

def init_network(arch: ArchSpec, pools: PoolSet, prev: Optional[TaskModel], num_classes: int,
                 cfg: TrainConfig, rng: np.random.Generator):
    """Build a search-mode network with temporary kernels initialised for a new task.

    With ``temp_init="decode"`` every layer starts from the kernels of
    ``prev``; the head does so only when the class count matches and is
    drawn fresh otherwise. ``"random"`` draws all temporary kernels fresh.
    Batch-norm state is inherited from ``prev`` either way.
    """
    net = build(arch, pools, num_classes, rng=rng, similarity_reduction=cfg.similarity_reduction)
    if prev is None:
        return net
    check_compatible(pools, prev, arch)
    if cfg.temp_init == "decode":
        layers = net.nws_layers
        for layer, code in zip(layers[:-1], prev.indices[:-1]):
            layer.set_temps(decode(layer.pool, code))
        if prev.num_classes == num_classes:
            layers[-1].set_temps(decode(layers[-1].pool, prev.indices[-1]))
    net.load_bn(prev.bn_states)
    return net


def fit_task(pools: PoolSet, prev: Optional[TaskModel], train: ImageDataset, num_classes: int,
             cfg: TrainConfig, seed: int = 0, task_id: int = 1, classes: Sequence[int] = (),
             arch=None):
    """Train one task; returns ``(model, network, history)``.

    The returned network has its temporary kernels discarded.
    """
    arch = _resolve_arch(pools, arch)
    if not pools.frozen:
        raise StateError("pools must be frozen before task training")
    rng = _rng(seed, task_id)
    net = init_network(arch, pools, prev, num_classes, cfg, rng)
    history = train_network(net, train, cfg, rng)
    model = TaskModel.from_network(net, pools, task_id, classes or range(num_classes))
    net.discard_temps()
    net.eval()
    return model, net, history


def train_task(pools: PoolSet, prev: Optional[TaskModel], spec: TaskSpec, cfg: TrainConfig,
               seed: int = 0, arch=None) -> TaskModel:
    model, _, _ = fit_task(pools, prev, spec.train, spec.num_classes, cfg, seed, spec.task_id,
                           spec.classes, arch)
    return model


# -- inference ---------------------------------------------------------------

def assemble(pools: PoolSet, model: TaskModel, arch=None):
    """Rebuild the inference network of ``model`` from pools alone."""
    arch = _resolve_arch(pools, arch)
    check_compatible(pools, model, arch)
    net = build(arch, pools, model.num_classes)
    net.set_indices(model.indices)
    net.load_bn(model.bn_states)
    return net.eval()


def task_logits(pools: PoolSet, model: TaskModel, inputs: np.ndarray, arch=None) -> np.ndarray:
    return assemble(pools, model, arch).predict_logits(np.asarray(inputs))


def infer_task(pools: PoolSet, model: TaskModel, inputs: np.ndarray, arch=None) -> np.ndarray:
    """Predicted class positions in ``[0, v)`` for ``inputs``."""
    return task_logits(pools, model, inputs, arch).argmax(axis=1)


def evaluate(pools: PoolSet, model: TaskModel, data: ImageDataset, arch=None) -> tuple:
    """``(accuracy, logits)`` on ``data``."""
    logits = task_logits(pools, model, data.images, arch)
    acc = float((logits.argmax(axis=1) == data.labels).mean()) if len(data) else 0.0
    return acc, logits


def logits_digest(logits: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(logits).tobytes()).hexdigest()


# -- sequences ---------------------------------------------------------------

def run_sequence(pools: PoolSet, c0: Optional[TaskModel], tasks: Sequence[TaskSpec], cfg: TrainConfig,
                 seed: int = 0, arch=None, index_bits: str = "packed"):
    """Train ``tasks`` in order and evaluate each one again once all are done.

    Returns ``(report, models)``. If a task fails the report is marked
    incomplete and holds the tasks finished so far.
    """
    from .analysis import kur, layer_sparsity, memory_report

    arch = _resolve_arch(pools, arch)
    ids = [t.task_id for t in tasks]
    if any(b <= a for a, b in zip(ids, ids[1:])):
        raise InvalidInputError(f"task ids must be strictly increasing, got {ids}")
    report = {"complete": True, "seed": int(seed), "config": cfg.to_dict(),
              "arch": arch.name, "arch_fingerprint": arch.fingerprint(),
              "pool_fingerprint": pools.fingerprint(), "tasks": []}
    models, prev = [], c0
    for spec in tasks:
        try:
            model, _, history = fit_task(pools, prev, spec.train, spec.num_classes, cfg, seed,
                                         spec.task_id, spec.classes, arch)
            acc, logits = evaluate(pools, model, spec.test, arch)
        except NWSError as exc:
            report["complete"] = False
            report["error"] = {"task_id": spec.task_id, "type": type(exc).__name__, "message": str(exc),
                               "exit_code": exc.exit_code}
            break
        models.append(model)
        report["tasks"].append({
            "task_id": spec.task_id, "classes": list(spec.classes), "accuracy": acc,
            "logits_sha256": logits_digest(logits),
            "final_train_ce": history[-1]["ce"] if history else None,
            "kur": kur(model), "layer_sparsity": layer_sparsity(model),
        })
        prev = model

    for spec, model, record in zip(tasks, models, report["tasks"]):
        acc, logits = evaluate(pools, model, spec.test, arch)
        record["accuracy_after_all_tasks"] = acc
        record["logits_sha256_after_all_tasks"] = logits_digest(logits)
        record["unchanged"] = (acc == record["accuracy"]
                               and record["logits_sha256"] == record["logits_sha256_after_all_tasks"])
    accs = [r["accuracy"] for r in report["tasks"]]
    report["average_accuracy"] = float(np.mean(accs)) if accs else 0.0
    report["memory"] = memory_report(arch, [m.num_classes for m in models], index_bits=index_bits,
                                     pools=pools).to_dict()
    return report, models


def fit_dense(pools: PoolSet, init: TaskModel, train: ImageDataset, num_classes: int, cfg: TrainConfig,
              seed: int = 0, task_id: int = 1, arch=None):
    """Finetune free convolution weights starting from the kernels ``init`` decodes to.

    The head is drawn fresh when the class count differs; batch-norm state
    comes from ``init``. Returns ``(network, history)``.
    """
    arch = _resolve_arch(pools, arch)
    check_compatible(pools, init, arch)
    rng = _rng(seed, task_id)
    net = build(arch, None, num_classes, rng=rng, dense=True)
    convs = net.conv_layers
    for i, (layer, pool, code) in enumerate(zip(convs, pools, init.indices)):
        if i < len(convs) - 1 or init.num_classes == num_classes:
            layer.weight.data[...] = decode(pool, code)
    net.load_bn(init.bn_states)
    history = train_network(net, train, cfg, rng)
    return net, history


def finetune_baseline(pools: PoolSet, c0: TaskModel, tasks: Sequence[TaskSpec], cfg: TrainConfig,
                      seed: int = 0, arch=None) -> dict:
    """Dense reference: every task finetunes its own copy of the pretrained model."""
    results = []
    for spec in tasks:
        net, _ = fit_dense(pools, c0, spec.train, spec.num_classes, cfg, seed, spec.task_id, arch)
        logits = net.predict_logits(spec.test.images)
        acc = float((logits.argmax(axis=1) == spec.test.labels).mean())
        results.append({"task_id": spec.task_id, "classes": list(spec.classes), "accuracy": acc})
    return {"tasks": results, "average_accuracy": float(np.mean([r["accuracy"] for r in results]))}
