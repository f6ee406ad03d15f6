"""Building the search space: joint pretraining of temporary kernels and pools.

Temporary kernels follow the search loss (cross-entropy through the
straight-through copy plus the similarity term); the selected pool entries
follow ``beta * ||sg[W] - K||^2``. Both are driven by one backward pass per
batch. Pools are frozen at the end and the final selection becomes the
initial index model for the first task.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .arch import ArchSpec, build, get_arch
from .data import ImageDataset
from .errors import ConfigError, FrozenPoolError, InvalidInputError
from .harness import TaskModel
from .pool import KernelPool, PoolSet
from .tensor import get_default_dtype
from .training import TrainConfig, compute_loss, train_network


@dataclass
class DistillConfig(TrainConfig):
    beta: float = 0.5
    pool_size: Optional[int] = None
    seed: int = 0

    def __post_init__(self):
        super().__post_init__()
        if self.beta <= 0:
            raise ConfigError("beta must be > 0")
        if self.pool_size is not None and self.pool_size < 1:
            raise ConfigError("pool_size must be >= 1")


def init_pools(spec: ArchSpec, rng: np.random.Generator) -> PoolSet:
    """Random pools with He-normal scale matching each layer's fan-in."""
    pools = []
    for i, layer in enumerate(spec.searched_layers):
        std = np.sqrt(2.0 / (layer.d_in * layer.k * layer.k))
        entries = (rng.standard_normal((layer.n, layer.k, layer.k)) * std).astype(get_default_dtype())
        pools.append(KernelPool(entries, layer_id=i))
    return PoolSet(pools, arch=spec)


def distill_step(net, x: np.ndarray, y: np.ndarray, beta: float, optimizer=None) -> dict:
    """One joint update on a batch. Returns the loss parts (ce, diff, wd).

    Gradients are left in place; pass ``optimizer`` to also apply them.
    """
    for layer in net.nws_layers:
        if layer.pool.frozen:
            raise FrozenPoolError(f"layer {layer.layer_id}: pool is frozen")
    if optimizer is not None:
        optimizer.zero_grad()
    loss, parts = compute_loss(net, x, y, beta)
    loss.backward()
    if optimizer is not None:
        optimizer.step()
    return {k: parts[k] for k in ("ce", "diff", "wd")}


def quantisation_error(net) -> float:
    """Mean per-layer ``||W - NWS(W)||^2`` over the current temporary kernels."""
    errs = []
    for layer in net.nws_layers:
        w = layer.temps.data
        errs.append(float(((w - layer.selected_kernels()) ** 2).sum()))
    return float(np.mean(errs))


def pretrain_pools(arch, dataset: ImageDataset, config: DistillConfig):
    """Distil frozen pools from ``dataset``.

    Returns ``(pools, c0, history)`` where ``c0`` is the pretrained model
    encoded as indices (``task_id`` 0).
    """
    if len(dataset) == 0:
        raise InvalidInputError("pretraining dataset is empty")
    spec = get_arch(arch, config.pool_size)
    classes = [int(c) for c in dataset.classes]
    data = dataset.select(classes)
    rng = np.random.default_rng(config.seed)
    pools = init_pools(spec, rng)
    net = build(spec, pools, len(classes), rng=rng, mode="distill",
                similarity_reduction=config.similarity_reduction)
    history = [{"epoch": 0, "quantisation_error": quantisation_error(net)}]

    def log(net, record):
        record["quantisation_error"] = quantisation_error(net)

    history += train_network(net, data, config, rng, beta=config.beta, on_epoch=log)
    pools.freeze()
    for layer in net.nws_layers:
        layer.mode = "search"
    c0 = TaskModel.from_network(net, pools, task_id=0, classes=classes)
    return pools, c0, history
