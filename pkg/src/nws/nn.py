"""Plain (non-searched) layers and their state containers."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import functional as F
from .errors import DimensionError
from .tensor import Tensor, get_default_dtype


@dataclass
class BatchNormState:
    """Running statistics and affine parameters of one batch-norm layer."""

    running_mean: np.ndarray
    running_var: np.ndarray
    gamma: Tensor
    beta: Tensor
    momentum: float = 0.1
    eps: float = 1e-5

    def __post_init__(self):
        c = self.running_mean.shape[0]
        for name, arr in (("running_var", self.running_var), ("gamma", self.gamma.data),
                          ("beta", self.beta.data)):
            if arr.shape != (c,):
                raise DimensionError(f"{name} has shape {arr.shape}, expected ({c},)")
        if np.any(self.running_var < 0):
            raise DimensionError("running variance must be non-negative")

    @classmethod
    def fresh(cls, channels: int, momentum: float = 0.1, eps: float = 1e-5) -> "BatchNormState":
        dt = get_default_dtype()
        return cls(np.zeros(channels, dt), np.ones(channels, dt),
                   Tensor(np.ones(channels, dt), requires_grad=True),
                   Tensor(np.zeros(channels, dt), requires_grad=True), momentum, eps)

    @property
    def channels(self) -> int:
        return self.running_mean.shape[0]

    def snapshot(self) -> "BatchNormState":
        """Detached deep copy; the copy's affine parameters do not require grad."""
        return BatchNormState(self.running_mean.copy(), self.running_var.copy(),
                              Tensor(self.gamma.data.copy()), Tensor(self.beta.data.copy()),
                              self.momentum, self.eps)

    def load(self, other: "BatchNormState") -> None:
        if other.channels != self.channels:
            raise DimensionError(f"cannot load {other.channels}-channel state into {self.channels}")
        dt = self.running_mean.dtype
        self.running_mean[...] = other.running_mean.astype(dt)
        self.running_var[...] = other.running_var.astype(dt)
        self.gamma.data[...] = other.gamma.data.astype(dt)
        self.beta.data[...] = other.beta.data.astype(dt)
        self.momentum, self.eps = other.momentum, other.eps

    def arrays(self) -> dict:
        return {"running_mean": self.running_mean, "running_var": self.running_var,
                "gamma": self.gamma.data, "beta": self.beta.data}


class Module:
    training = True

    def parameters(self) -> list:
        return []

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)


class BatchNorm2d(Module):
    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        self.state = BatchNormState.fresh(channels, momentum, eps)

    def __call__(self, x: Tensor) -> Tensor:
        return F.batch_norm(x, self.state, self.training)

    def parameters(self) -> list:
        return [self.state.gamma, self.state.beta]


class ReLU(Module):
    def __call__(self, x: Tensor) -> Tensor:
        return F.relu(x)


class GlobalAvgPool(Module):
    def __call__(self, x: Tensor) -> Tensor:
        return F.global_avg_pool(x)


class DenseConv2d(Module):
    """Ordinary learnable convolution (the finetune baseline's layer)."""

    def __init__(self, weight: np.ndarray, stride: int = 1, padding: int = 0):
        self.weight = Tensor(np.array(weight, dtype=get_default_dtype()), requires_grad=True)
        self.stride, self.padding = stride, padding

    def __call__(self, x: Tensor):
        return F.conv2d(x, self.weight, self.stride, self.padding), None

    def parameters(self) -> list:
        return [self.weight]


def kaiming_normal(shape: tuple, rng: np.random.Generator) -> np.ndarray:
    """He-normal init for ``[out, in, k, k]`` kernels (fan-in mode)."""
    fan_in = int(np.prod(shape[1:]))
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(get_default_dtype())
