"""SGD / Adam with parameter groups and a milestone learning-rate schedule.

A group created with ``row_sparse=True`` only touches rows (index along
axis 0) whose gradient is non-zero in the current step, momentum and decay
included; kernel pools are trained this way so that entries nobody
selected stay bit-identical.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigError, FrozenPoolError


def _as_groups(params, defaults: dict) -> list:
    params = list(params)
    if params and isinstance(params[0], dict):
        groups = [dict(defaults, **g) for g in params]
    else:
        groups = [dict(defaults, params=params)]
    for g in groups:
        g["params"] = list(g["params"])
        g.setdefault("row_sparse", False)
        g["initial_lr"] = g["lr"]
    return groups


class Optimizer:
    def __init__(self, params, defaults: dict):
        self.param_groups = _as_groups(params, defaults)
        self.state: dict = {}

    def zero_grad(self) -> None:
        for group in self.param_groups:
            for p in group["params"]:
                p.grad = None

    def step(self) -> None:
        for group in self.param_groups:
            for p in group["params"]:
                if p.grad is None:
                    continue
                if not p.data.flags.writeable:
                    raise FrozenPoolError("optimizer step on read-only (frozen) storage")
                if group["row_sparse"]:
                    rows = np.flatnonzero(np.any(p.grad.reshape(len(p.grad), -1) != 0, axis=1))
                    if rows.size == 0:
                        continue
                else:
                    rows = None
                self._update(p, group, rows)

    def _update(self, p, group, rows) -> None:
        raise NotImplementedError


class SGD(Optimizer):
    def __init__(self, params, lr: float, momentum: float = 0.0, weight_decay: float = 0.0,
                 nesterov: bool = False):
        if lr <= 0:
            raise ConfigError("learning rate must be positive")
        if nesterov and momentum <= 0:
            raise ConfigError("nesterov needs momentum > 0")
        super().__init__(params, dict(lr=lr, momentum=momentum, weight_decay=weight_decay,
                                      nesterov=nesterov))

    def _update(self, p, group, rows) -> None:
        dt = p.data.dtype.type
        sel = slice(None) if rows is None else rows
        w = p.data[sel]
        g = p.grad[sel]
        if group["weight_decay"]:
            g = g + dt(group["weight_decay"]) * w
        mom = group["momentum"]
        if mom:
            buf = self.state.get(id(p))
            if buf is None:
                buf = self.state[id(p)] = np.zeros_like(p.data)
                buf[sel] = g
            else:
                buf[sel] = dt(mom) * buf[sel] + g
            g = g + dt(mom) * buf[sel] if group["nesterov"] else buf[sel]
        p.data[sel] = w - dt(group["lr"]) * g


class Adam(Optimizer):
    def __init__(self, params, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0):
        if lr <= 0:
            raise ConfigError("learning rate must be positive")
        super().__init__(params, dict(lr=lr, betas=tuple(betas), eps=eps, weight_decay=weight_decay))

    def _update(self, p, group, rows) -> None:
        dt = p.data.dtype.type
        sel = slice(None) if rows is None else rows
        st = self.state.setdefault(id(p), {"m": np.zeros_like(p.data), "v": np.zeros_like(p.data),
                                           "t": np.zeros(len(p.data), dtype=np.int64)})
        b1, b2 = group["betas"]
        g = p.grad[sel]
        if group["weight_decay"]:
            g = g + dt(group["weight_decay"]) * p.data[sel]
        st["t"][sel] += 1
        t = st["t"][sel].reshape((-1,) + (1,) * (p.data.ndim - 1)) if p.data.ndim else st["t"][sel]
        st["m"][sel] = dt(b1) * st["m"][sel] + dt(1 - b1) * g
        st["v"][sel] = dt(b2) * st["v"][sel] + dt(1 - b2) * g * g
        m_hat = st["m"][sel] / (1 - b1 ** t).astype(p.data.dtype)
        v_hat = st["v"][sel] / (1 - b2 ** t).astype(p.data.dtype)
        p.data[sel] = p.data[sel] - dt(group["lr"]) * m_hat / (np.sqrt(v_hat) + dt(group["eps"]))


class MultiStepLR:
    """Multiply every group's learning rate by ``gamma`` at each milestone epoch."""

    def __init__(self, optimizer: Optimizer, milestones=(), gamma: float = 0.1):
        self.optimizer = optimizer
        self.milestones = sorted(int(m) for m in milestones)
        self.gamma = gamma
        self.epoch = 0

    def step(self) -> None:
        self.epoch += 1
        drops = sum(1 for m in self.milestones if m <= self.epoch)
        for group in self.optimizer.param_groups:
            group["lr"] = group["initial_lr"] * self.gamma ** drops


def make_optimizer(name: str, params, lr: float, momentum: float = 0.9, weight_decay: float = 0.0,
                   nesterov: bool = False) -> Optimizer:
    if name == "sgd":
        return SGD(params, lr, momentum=momentum, weight_decay=weight_decay, nesterov=nesterov)
    if name == "adam":
        return Adam(params, lr, weight_decay=weight_decay)
    raise ConfigError(f"unknown optimizer {name!r}")
