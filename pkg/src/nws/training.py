"""Shared mini-batch training loop."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from . import functional as F
from .errors import ConfigError
from .optim import MultiStepLR, make_optimizer
from .tensor import Tensor


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 32
    optimizer: str = "sgd"
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-5
    nesterov: bool = False
    milestones: tuple = ()
    gamma: float = 0.1
    similarity_reduction: str = "sum"
    temp_init: str = "decode"

    def __post_init__(self):
        self.milestones = tuple(int(m) for m in self.milestones)
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")
        if self.temp_init not in ("decode", "random"):
            raise ConfigError("temp_init must be 'decode' or 'random'")
        if self.similarity_reduction not in ("sum", "mean"):
            raise ConfigError("similarity_reduction must be 'sum' or 'mean'")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["milestones"] = list(self.milestones)
        return d


def make_optimizer_for(net, cfg: TrainConfig, pool_params: Optional[list] = None):
    groups = [{"params": net.parameters()}]
    if pool_params:
        groups.append({"params": pool_params, "row_sparse": True, "weight_decay": 0.0})
    return make_optimizer(cfg.optimizer, groups, cfg.lr, cfg.momentum, cfg.weight_decay, cfg.nesterov)


def compute_loss(net, x: np.ndarray, y: np.ndarray, beta: Optional[float] = None):
    """Forward one batch; returns ``(total, parts)`` with ``parts`` as floats."""
    logits, diff = net(Tensor(x))
    ce = F.softmax_cross_entropy(logits, y)
    total = ce
    parts = {"ce": ce.item(), "diff": 0.0, "wd": 0.0}
    if diff is not None:
        total = total + diff
        parts["diff"] = diff.item()
    if beta is not None:
        wd = net.wd_loss()
        if wd is not None:
            total = total + wd * beta
            parts["wd"] = wd.item()
    parts["correct"] = int((logits.data.argmax(axis=1) == y).sum())
    return total, parts


def train_network(net, data, cfg: TrainConfig, rng: np.random.Generator,
                  beta: Optional[float] = None, on_epoch=None) -> list:
    """Run ``cfg.epochs`` epochs of SGD/Adam on ``data``; returns per-epoch means.

    With ``beta`` set, pool entries of distill-mode layers are trained too.
    ``on_epoch(net, record)`` may add fields to each epoch's record.
    """
    pool_params = net.pool_parameters() if beta is not None else None
    opt = make_optimizer_for(net, cfg, pool_params)
    sched = MultiStepLR(opt, cfg.milestones, cfg.gamma)
    history = []
    net.train()
    for epoch in range(cfg.epochs):
        sums = {"ce": 0.0, "diff": 0.0, "wd": 0.0, "correct": 0}
        batches = 0
        for xb, yb in data.batches(cfg.batch_size, rng):
            opt.zero_grad()
            loss, parts = compute_loss(net, xb, yb, beta)
            loss.backward()
            opt.step()
            for key in sums:
                sums[key] += parts[key]
            batches += 1
        sched.step()
        history.append({"epoch": epoch + 1,
                        "ce": sums["ce"] / max(batches, 1),
                        "diff": sums["diff"] / max(batches, 1),
                        "wd": sums["wd"] / max(batches, 1),
                        "train_accuracy": sums["correct"] / max(len(data), 1)})
        if on_epoch is not None:
            on_epoch(net, history[-1])
    net.eval()
    return history
