"""Convolution layers whose kernels are searched from a pool."""

from __future__ import annotations

from typing import Optional

import numpy as np

from . import functional as F
from .errors import DimensionError, FrozenPoolError, InvalidInputError, StateError
from .nn import Module
from .pool import IndexVector, KernelPool, SearchResult, decode, encode, search_layer
from .tensor import Tensor, get_default_dtype

MODES = ("search", "distill")
REDUCTIONS = ("sum", "mean")


class NWSConv2d(Module):
    """Convolution built from pool entries picked by learnable temporary kernels.

    Forward always convolves with the selected entries. In training the
    temporary kernels receive the classification gradient through a
    straight-through copy plus the gradient of the similarity term
    ``||sg[K] - W||^2``. In ``distill`` mode the selected pool rows also
    receive ``||sg[W] - K||^2`` through ``wd_loss`` (scaled by the caller).

    Once :meth:`discard_temps` has run, the layer holds only indices.
    """

    def __init__(self, pool: KernelPool, d_in: int, d_out: int, stride: int = 1, padding: int = 0,
                 temps: Optional[np.ndarray] = None, mode: str = "search",
                 similarity_reduction: str = "sum", layer_id: Optional[int] = None):
        if mode not in MODES:
            raise InvalidInputError(f"mode must be one of {MODES}")
        if similarity_reduction not in REDUCTIONS:
            raise InvalidInputError(f"similarity_reduction must be one of {REDUCTIONS}")
        self.pool = pool
        self.d_in, self.d_out = int(d_in), int(d_out)
        self.stride, self.padding = stride, padding
        self.mode = mode
        self.similarity_reduction = similarity_reduction
        self.layer_id = pool.layer_id if layer_id is None else layer_id
        self.temps: Optional[Tensor] = None
        self.indices: Optional[IndexVector] = None
        self.last_search: Optional[SearchResult] = None
        self.wd_loss: Optional[Tensor] = None
        if temps is not None:
            self.set_temps(temps)

    @property
    def kernel_shape(self) -> tuple:
        return (self.d_out, self.d_in) + tuple(self.pool.kernel_shape)

    @property
    def d(self) -> int:
        return self.d_in * self.d_out

    def set_temps(self, temps: np.ndarray) -> None:
        temps = np.array(temps, dtype=get_default_dtype())
        if temps.shape != self.kernel_shape:
            raise DimensionError(f"layer {self.layer_id}: temps {temps.shape} != {self.kernel_shape}")
        self.temps = Tensor(temps, requires_grad=True)
        self.indices = None

    def set_indices(self, code: IndexVector) -> None:
        if (code.d_in, code.d_out) != (self.d_in, self.d_out):
            raise DimensionError(f"layer {self.layer_id}: index vector is {code.d_in}x{code.d_out}, "
                                 f"layer is {self.d_in}x{self.d_out}")
        code.validate(self.pool.n)
        self.indices = code
        self.temps = None

    def encode(self) -> IndexVector:
        if self.temps is None:
            return self.indices
        return encode(self.pool, self.temps)

    def discard_temps(self) -> IndexVector:
        """Freeze the current selection as indices and drop the temporary kernels."""
        code = self.encode()
        self.set_indices(code)
        return code

    def selected_kernels(self) -> np.ndarray:
        if self.temps is None:
            if self.indices is None:
                raise StateError(f"layer {self.layer_id} has neither temps nor indices")
            return decode(self.pool, self.indices)
        return search_layer(self.pool, self.temps).kernels

    def parameters(self) -> list:
        return [] if self.temps is None else [self.temps]

    def _reduce(self, sq: Tensor) -> Tensor:
        return sq.sum() if self.similarity_reduction == "sum" else sq.mean()

    def __call__(self, x: Tensor):
        """Return ``(output, similarity loss)``; the loss is ``None`` without temps."""
        self.wd_loss = None
        if self.temps is None:
            kernels = Tensor(self.selected_kernels())
            return F.conv2d(x, kernels, self.stride, self.padding), None

        result = search_layer(self.pool, self.temps)
        self.last_search = result
        out = F.conv2d(x, F.straight_through(self.temps, result.kernels), self.stride, self.padding)
        diff = self._reduce((Tensor(result.kernels) - self.temps) ** 2)
        if self.mode == "distill":
            if self.pool.frozen:
                raise FrozenPoolError(f"layer {self.layer_id}: cannot distill into a frozen pool")
            picked = F.gather_rows(self.pool.weight, result.indices.indices).reshape(self.kernel_shape)
            self.wd_loss = self._reduce((self.temps.detach() - picked) ** 2)
        return out, diff

    def __repr__(self) -> str:
        return (f"NWSConv2d(layer_id={self.layer_id}, {self.d_in}->{self.d_out}, "
                f"k={self.pool.kernel_shape}, n={self.pool.n}, mode={self.mode})")
