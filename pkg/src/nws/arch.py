"""Architecture descriptors and the network builder.

``desk`` is the small ConvNet actually trained here. ``resnet18``,
``resnet34``, ``vgg16`` and ``mobilenetv2`` are accounting-only descriptors
consumed by :func:`nws.analysis.memory_report`; they describe the searched
layers (including shortcut convolutions and the 1x1 classifier head) and
the batch-norm layers, and cannot be built.

The ResNet shortcut positions follow the standard torchvision layout: a
1x1 projection after the second conv of the first block of stages 2-4.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Optional

import numpy as np

from .errors import ConfigError, IncompatibleArtifactError
from .layers import NWSConv2d
from .nn import BatchNorm2d, DenseConv2d, GlobalAvgPool, ReLU, kaiming_normal
from .pool import PoolSet

LAYER_TYPES = ("nws-conv", "bn", "relu", "avgpool", "maxpool", "head")


@dataclass(frozen=True)
class LayerSpec:
    type: str
    d_in: Optional[int] = None
    d_out: Optional[int] = None
    k: Optional[int] = None
    stride: int = 1
    padding: int = 0
    n: Optional[int] = None
    groups: int = 1
    role: str = "main"
    channels: Optional[int] = None

    @property
    def searched(self) -> bool:
        return self.type in ("nws-conv", "head")

    def kernel_count(self, num_classes: Optional[int] = None) -> int:
        """Number of k x k kernels (d^l) this layer needs."""
        d_out = self.d_out if self.d_out is not None else num_classes
        if d_out is None:
            raise ConfigError("head output size needs num_classes")
        return (self.d_in // self.groups) * d_out

    def to_dict(self) -> dict:
        default = LayerSpec(self.type)
        return {k: v for k, v in asdict(self).items() if k == "type" or v != getattr(default, k)}


@dataclass(frozen=True)
class ArchSpec:
    name: str
    layers: tuple
    trainable: bool = True

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(
            l if isinstance(l, LayerSpec) else LayerSpec(**l) for l in self.layers))
        self.validate()

    def validate(self) -> None:
        current: Optional[int] = None
        seen_head = False
        for pos, layer in enumerate(self.layers):
            where = f"{self.name} layer {pos} ({layer.type})"
            if layer.type not in LAYER_TYPES:
                raise ConfigError(f"{where}: unknown layer type")
            if seen_head:
                raise ConfigError(f"{where}: nothing may follow the head")
            if layer.searched:
                for attr in ("d_in", "k", "n"):
                    if getattr(layer, attr) is None:
                        raise ConfigError(f"{where}: missing {attr}")
                if layer.n < 1:
                    raise ConfigError(f"{where}: pool size must be >= 1")
                if layer.type == "nws-conv" and layer.d_out is None:
                    raise ConfigError(f"{where}: missing d_out")
                if layer.d_in % layer.groups:
                    raise ConfigError(f"{where}: d_in not divisible by groups")
                if layer.role == "shortcut":
                    if layer.d_out != current:
                        raise ConfigError(f"{where}: shortcut d_out {layer.d_out} != {current}")
                    continue
                if current is not None and layer.d_in != current:
                    raise ConfigError(f"{where}: d_in {layer.d_in} does not chain from {current}")
                current = layer.d_out
                seen_head = layer.type == "head"
            elif layer.type == "bn":
                if layer.channels != current:
                    raise ConfigError(f"{where}: {layer.channels} channels, expected {current}")
        if self.trainable:
            for layer in self.layers:
                if layer.type == "maxpool" or layer.role != "main" or layer.groups != 1:
                    raise ConfigError(f"{self.name}: trainable specs must be plain sequential nets")
        if not any(l.type == "head" for l in self.layers):
            raise ConfigError(f"{self.name}: missing head layer")

    # -- views ------------------------------------------------------------
    @property
    def searched_layers(self) -> list:
        return [l for l in self.layers if l.searched]

    @property
    def head(self) -> LayerSpec:
        return self.searched_layers[-1]

    def kernel_counts(self, num_classes: Optional[int] = None) -> list:
        return [l.kernel_count(num_classes) for l in self.searched_layers]

    def conv_parameter_count(self, num_classes: Optional[int] = None, include_head: bool = True) -> int:
        layers = self.searched_layers if include_head else self.searched_layers[:-1]
        return sum(l.kernel_count(num_classes) * l.k * l.k for l in layers)

    def bn_channels(self) -> list:
        return [l.channels for l in self.layers if l.type == "bn"]

    def with_pool_size(self, n: int) -> "ArchSpec":
        return replace(self, layers=tuple(replace(l, n=n) if l.searched else l for l in self.layers))

    # -- serialisation ----------------------------------------------------
    def to_dict(self) -> dict:
        return {"name": self.name, "trainable": self.trainable,
                "layers": [l.to_dict() for l in self.layers]}

    @classmethod
    def from_dict(cls, data: dict) -> "ArchSpec":
        try:
            return cls(data["name"], tuple(LayerSpec(**l) for l in data["layers"]),
                       data.get("trainable", True))
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"malformed architecture spec: {exc}") from None

    def canonical_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def fingerprint(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()


# -- descriptors -----------------------------------------------------------

def _conv(d_in, d_out, k, stride=1, n=512, role="main", groups=1):
    return LayerSpec("nws-conv", d_in, d_out, k, stride, k // 2, n, groups, role)


def _bn(c):
    return LayerSpec("bn", channels=c)


_RELU = LayerSpec("relu")
_GAP = LayerSpec("avgpool")


def desk_convnet(n: int = 64, in_channels: int = 3, widths=(16, 32, 32)) -> ArchSpec:
    """conv(3->16)-bn-relu-conv(16->32, s2)-bn-relu-conv(32->32)-bn-relu-gap-head(1x1)."""
    c1, c2, c3 = widths
    layers = [
        _conv(in_channels, c1, 3, n=n), _bn(c1), _RELU,
        _conv(c1, c2, 3, 2, n=n), _bn(c2), _RELU,
        _conv(c2, c3, 3, n=n), _bn(c3), _RELU,
        _GAP,
        LayerSpec("head", c3, None, 1, n=n),
    ]
    return ArchSpec("desk", tuple(layers))


def _resnet(name: str, blocks, n: int) -> ArchSpec:
    layers = [_conv(3, 64, 7, 2, n=n), _bn(64), _RELU, LayerSpec("maxpool", k=3, stride=2)]
    c_in = 64
    for stage, (width, count) in enumerate(zip((64, 128, 256, 512), blocks)):
        for b in range(count):
            stride = 2 if stage > 0 and b == 0 else 1
            layers += [_conv(c_in, width, 3, stride, n=n), _bn(width), _RELU,
                       _conv(width, width, 3, n=n), _bn(width)]
            if stride != 1 or c_in != width:
                layers += [_conv(c_in, width, 1, stride, n=n, role="shortcut"), _bn(width)]
            layers.append(_RELU)
            c_in = width
    layers += [_GAP, LayerSpec("head", 512, None, 1, n=n)]
    return ArchSpec(name, tuple(layers), trainable=False)


def resnet18(n: int = 512) -> ArchSpec:
    return _resnet("resnet18", (2, 2, 2, 2), n)


def resnet34(n: int = 512) -> ArchSpec:
    return _resnet("resnet34", (3, 4, 6, 3), n)


def vgg16(n: int = 512) -> ArchSpec:
    """VGG-16 with batch norm; the three FC layers become one 1x1 head."""
    cfg = [64, 64, "M", 128, 128, "M", 256, 256, 256, "M", 512, 512, 512, "M", 512, 512, 512, "M"]
    layers, c_in = [], 3
    for item in cfg:
        if item == "M":
            layers.append(LayerSpec("maxpool", k=2, stride=2))
            continue
        layers += [_conv(c_in, item, 3, n=n), _bn(item), _RELU]
        c_in = item
    layers += [_GAP, LayerSpec("head", 512, None, 1, n=n)]
    return ArchSpec("vgg16", tuple(layers), trainable=False)


def mobilenetv2(n: int = 512) -> ArchSpec:
    settings = [(1, 16, 1, 1), (6, 24, 2, 2), (6, 32, 3, 2), (6, 64, 4, 2),
                (6, 96, 3, 1), (6, 160, 3, 2), (6, 320, 1, 1)]
    layers = [_conv(3, 32, 3, 2, n=n), _bn(32), _RELU]
    c_in = 32
    for t, c, count, s in settings:
        for i in range(count):
            hidden = c_in * t
            if t != 1:
                layers += [_conv(c_in, hidden, 1, n=n), _bn(hidden), _RELU]
            layers += [_conv(hidden, hidden, 3, s if i == 0 else 1, n=n, groups=hidden),
                       _bn(hidden), _RELU, _conv(hidden, c, 1, n=n), _bn(c)]
            c_in = c
    layers += [_conv(320, 1280, 1, n=n), _bn(1280), _RELU, _GAP, LayerSpec("head", 1280, None, 1, n=n)]
    return ArchSpec("mobilenetv2", tuple(layers), trainable=False)


ARCHITECTURES = {
    "desk": desk_convnet,
    "resnet18": resnet18,
    "resnet34": resnet34,
    "vgg16": vgg16,
    "mobilenetv2": mobilenetv2,
}


def get_arch(name_or_spec, n: Optional[int] = None) -> ArchSpec:
    """Resolve a zoo name, a JSON file path, a dict or an ``ArchSpec``."""
    if isinstance(name_or_spec, ArchSpec):
        spec = name_or_spec
    elif isinstance(name_or_spec, dict):
        spec = ArchSpec.from_dict(name_or_spec)
    elif name_or_spec in ARCHITECTURES:
        spec = ARCHITECTURES[name_or_spec]()
    else:
        try:
            with open(name_or_spec) as fh:
                spec = ArchSpec.from_dict(json.load(fh))
        except OSError as exc:
            raise ConfigError(f"unknown architecture {name_or_spec!r}: {exc}") from None
    return spec.with_pool_size(n) if n is not None else spec


# -- builder ----------------------------------------------------------------

def check_pools(spec: ArchSpec, pools: PoolSet) -> None:
    searched = spec.searched_layers
    if len(pools) != len(searched):
        raise IncompatibleArtifactError(
            f"{spec.name} has {len(searched)} searched layers but {len(pools)} pools were given")
    for i, (layer, pool) in enumerate(zip(searched, pools)):
        if pool.kernel_shape != (layer.k, layer.k) or pool.n != layer.n:
            raise IncompatibleArtifactError(
                f"layer {i}: spec wants n={layer.n}, k={layer.k}; pool has n={pool.n}, "
                f"kernel {pool.kernel_shape}")
    if pools.arch_fingerprint and pools.arch_fingerprint != spec.fingerprint():
        raise IncompatibleArtifactError("pools were distilled for a different architecture")


def build(spec: ArchSpec, pools: Optional[PoolSet], num_classes: int, *,
          rng: Optional[np.random.Generator] = None, mode: str = "search",
          similarity_reduction: str = "sum", dense: bool = False):
    """Instantiate ``spec`` as a runnable :class:`~nws.network.Network`.

    NWS layers get He-normal temporary kernels from ``rng``; ``dense=True``
    builds ordinary convolutions instead (the finetune baseline) and needs
    no pools.
    """
    from .network import Network

    if not spec.trainable:
        raise ConfigError(f"{spec.name} is an accounting-only descriptor")
    if not dense:
        check_pools(spec, pools)
    rng = np.random.default_rng(0) if rng is None else rng
    modules, slot = [], 0
    for layer in spec.layers:
        if layer.searched:
            d_out = layer.d_out if layer.d_out is not None else num_classes
            shape = (d_out, layer.d_in, layer.k, layer.k)
            init = kaiming_normal(shape, rng)
            if dense:
                modules.append(DenseConv2d(init, layer.stride, layer.padding))
            else:
                modules.append(NWSConv2d(pools[slot], layer.d_in, d_out, layer.stride, layer.padding,
                                         temps=init, mode=mode,
                                         similarity_reduction=similarity_reduction, layer_id=slot))
            slot += 1
        elif layer.type == "bn":
            modules.append(BatchNorm2d(layer.channels))
        elif layer.type == "relu":
            modules.append(ReLU())
        elif layer.type == "avgpool":
            modules.append(GlobalAvgPool())
    return Network(spec, modules, num_classes)


def index_bits(n: int) -> int:
    """Packed width of one index into a pool of ``n`` entries (at least 1 bit)."""
    return max(1, math.ceil(math.log2(n)))
