from __future__ import annotations

from typing import Optional

import numpy as np

from .layers import NWSConv2d
from .nn import BatchNorm2d, BatchNormState, DenseConv2d, Module
from .pool import IndexVector
from .tensor import Tensor, no_grad


class Network(Module):
    """Sequential network; ``__call__`` returns ``(logits [N, V], total similarity loss)``."""

    def __init__(self, spec, modules: list, num_classes: int):
        self.spec = spec
        self.modules = list(modules)
        self.num_classes = int(num_classes)

    def __call__(self, x: Tensor):
        if not isinstance(x, Tensor):
            x = Tensor(x)
        diff_total: Optional[Tensor] = None
        for module in self.modules:
            if isinstance(module, (NWSConv2d, DenseConv2d)):
                x, diff = module(x)
                if diff is not None:
                    diff_total = diff if diff_total is None else diff_total + diff
            else:
                x = module(x)
        return x.reshape(x.shape[0], -1), diff_total

    # -- introspection ----------------------------------------------------
    @property
    def nws_layers(self) -> list:
        return [m for m in self.modules if isinstance(m, NWSConv2d)]

    @property
    def conv_layers(self) -> list:
        return [m for m in self.modules if isinstance(m, (NWSConv2d, DenseConv2d))]

    @property
    def bn_layers(self) -> list:
        return [m for m in self.modules if isinstance(m, BatchNorm2d)]

    @property
    def head(self):
        return self.conv_layers[-1]

    def parameters(self) -> list:
        params = []
        for module in self.modules:
            params.extend(module.parameters())
        return params

    def pool_parameters(self) -> list:
        return [layer.pool.weight for layer in self.nws_layers]

    def train(self, mode: bool = True) -> "Network":
        self.training = mode
        for module in self.modules:
            module.train(mode)
        return self

    def wd_loss(self) -> Optional[Tensor]:
        """Sum of the per-layer weight-distillation terms from the last forward."""
        total = None
        for layer in self.nws_layers:
            if layer.wd_loss is not None:
                total = layer.wd_loss if total is None else total + layer.wd_loss
        return total

    # -- state ------------------------------------------------------------
    def encode(self) -> list:
        return [layer.encode() for layer in self.nws_layers]

    def discard_temps(self) -> list:
        return [layer.discard_temps() for layer in self.nws_layers]

    def set_indices(self, codes: list) -> None:
        for layer, code in zip(self.nws_layers, codes, strict=True):
            layer.set_indices(code)

    def bn_snapshot(self) -> list:
        return [bn.state.snapshot() for bn in self.bn_layers]

    def load_bn(self, states: list) -> None:
        for bn, state in zip(self.bn_layers, states, strict=True):
            bn.state.load(state)

    def kernels(self) -> list:
        """The convolution weights actually used in forward, per conv layer."""
        out = []
        for layer in self.conv_layers:
            out.append(layer.selected_kernels() if isinstance(layer, NWSConv2d) else layer.weight.data)
        return out

    def predict_logits(self, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
        was_training = self.training
        self.eval()
        try:
            with no_grad():
                chunks = [self(Tensor(x[i:i + batch_size]))[0].data
                          for i in range(0, len(x), batch_size)]
        finally:
            self.train(was_training)
        return np.concatenate(chunks) if chunks else np.empty((0, self.num_classes))
