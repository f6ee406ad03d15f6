"""JSON run configuration.

Example (the defaults, i.e. the desk benchmark)::

    {
      "seed": 0,
      "precision": "float32",
      "arch": "desk",
      "pool_size": 64,
      "index_bits": "packed",
      "pretrain": {"epochs": 6, "lr": 0.05, "beta": 0.5, "milestones": [4], ...},
      "train": {"epochs": 15, "lr": 0.01, "temp_init": "decode", ...},
      "data": {"kind": "synthetic", "synthetic": {"noise": 0.35, ...},
               "pretrain_classes": [0, ..., 9], "pretrain_samples": 60,
               "train_samples": 150, "test_samples": 100},
      "tasks": [[10, 11], [12, 13], [14, 15]]
    }

For file datasets ``data`` is ``{"kind": "idx" | "folders", "pretrain": path,
"train": path, "test": path}``; relative paths resolve against the
config file's directory.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

from .arch import get_arch
from .data import ImageDataset, SyntheticSpec, load_dataset, make_synthetic
from .distill import DistillConfig
from .errors import ConfigError
from .harness import make_tasks
from .training import TrainConfig

PRECISIONS = ("float32", "float64")


def _section(cls, data: dict, name: str):
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"{name}: unknown keys {sorted(unknown)}")
    try:
        return cls(**data)
    except TypeError as exc:
        raise ConfigError(f"{name}: {exc}") from None


def _default_pretrain() -> DistillConfig:
    return DistillConfig(epochs=6, lr=0.05, beta=0.5, milestones=(4,))


def _default_train() -> TrainConfig:
    return TrainConfig(epochs=15, lr=0.01)


def _default_data() -> dict:
    return {"kind": "synthetic", "synthetic": asdict(SyntheticSpec()),
            "pretrain_classes": list(range(10)), "pretrain_samples": 60,
            "train_samples": 150, "test_samples": 100}


@dataclass
class RunConfig:
    seed: int = 0
    precision: str = "float32"
    arch: object = "desk"
    pool_size: Optional[int] = 64
    index_bits: str = "packed"
    pretrain: DistillConfig = field(default_factory=_default_pretrain)
    train: TrainConfig = field(default_factory=_default_train)
    data: dict = field(default_factory=_default_data)
    tasks: list = field(default_factory=lambda: [[10, 11], [12, 13], [14, 15]])
    base_dir: Path = field(default=Path("."), repr=False, compare=False)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.precision not in PRECISIONS:
            raise ConfigError(f"precision must be one of {PRECISIONS}")
        if self.index_bits not in ("packed", "aligned16"):
            raise ConfigError("index_bits must be 'packed' or 'aligned16'")
        if self.pool_size is not None and self.pool_size < 1:
            raise ConfigError("pool_size must be >= 1")
        if self.pretrain.beta <= 0:
            raise ConfigError("beta must be > 0")
        self.arch_spec()
        if not self.tasks or any(len(t) < 1 for t in self.tasks):
            raise ConfigError("tasks must be a non-empty list of non-empty class lists")
        kind = self.data.get("kind")
        if kind == "synthetic":
            _section(SyntheticSpec, self.data.get("synthetic", {}), "data.synthetic")
            n = self.data.get("synthetic", {}).get("num_classes", SyntheticSpec.num_classes)
            used = [c for t in self.tasks for c in t] + list(self.data.get("pretrain_classes", []))
            if any(not 0 <= c < n for c in used):
                raise ConfigError(f"class ids must lie in [0, {n})")
        elif kind in ("idx", "folders"):
            missing = [key for key in ("pretrain", "train", "test") if key not in self.data]
            if missing:
                raise ConfigError(f"data.{missing[0]} path is required")
            for key in ("pretrain", "train", "test"):
                if not self.path(key).exists():
                    raise ConfigError(f"data.{key}: {self.path(key)} does not exist")
        else:
            raise ConfigError("data.kind must be 'synthetic', 'idx' or 'folders'")

    def path(self, key: str) -> Path:
        p = Path(self.data[key])
        return p if p.is_absolute() else self.base_dir / p

    def arch_spec(self):
        arch = self.arch
        if isinstance(arch, str) and not Path(arch).is_absolute() and (self.base_dir / arch).exists():
            arch = str(self.base_dir / arch)
        return get_arch(arch, self.pool_size)

    # -- (de)serialisation ------------------------------------------------------
    @classmethod
    def from_dict(cls, data: dict, base_dir=".") -> "RunConfig":
        data = dict(data)
        known = {f.name for f in fields(cls)} - {"base_dir"}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        given_pre = data.pop("pretrain", {})
        if {"seed", "pool_size"} & set(given_pre):
            raise ConfigError("pretrain: seed and pool_size are set at the top level")
        pretrain = {**asdict(_default_pretrain()), **given_pre}
        train = {**asdict(_default_train()), **data.pop("train", {})}
        defaults = _default_data()
        given = data.pop("data", {})
        if given.get("kind", "synthetic") == "synthetic":
            given = {**defaults, **given, "synthetic": {**defaults["synthetic"], **given.get("synthetic", {})}}
        try:
            return cls(pretrain=_section(DistillConfig, pretrain, "pretrain"),
                       train=_section(TrainConfig, train, "train"), data=given,
                       base_dir=Path(base_dir), **data)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        try:
            data = json.loads(path.read_text())
        except OSError as exc:
            raise ConfigError(f"{path}: {exc.strerror}") from None
        except ValueError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be an object")
        return cls.from_dict(data, path.parent)

    def to_dict(self) -> dict:
        arch = self.arch if isinstance(self.arch, (str, dict)) else self.arch_spec().to_dict()
        pretrain = {k: v for k, v in self.pretrain.to_dict().items() if k not in ("seed", "pool_size")}
        return {"seed": self.seed, "precision": self.precision, "arch": arch,
                "pool_size": self.pool_size, "index_bits": self.index_bits,
                "pretrain": pretrain, "train": self.train.to_dict(),
                "data": self.data, "tasks": [list(t) for t in self.tasks]}

    def distill_config(self) -> DistillConfig:
        """Pretraining settings with the run's seed and pool size applied."""
        return DistillConfig(**{**asdict(self.pretrain), "seed": self.seed, "pool_size": self.pool_size})

    # -- data ---------------------------------------------------------------------
    def synthetic_spec(self) -> SyntheticSpec:
        return SyntheticSpec(**self.data["synthetic"])

    def pretrain_data(self) -> ImageDataset:
        if self.data["kind"] == "synthetic":
            return make_synthetic(self.synthetic_spec(), self.data["pretrain_samples"],
                                  self.data["pretrain_classes"], split_seed=1)
        return load_dataset(self.path("pretrain"), self.data["kind"])

    def task_data(self) -> tuple:
        """``(train, test)`` datasets holding every class used by the tasks."""
        if self.data["kind"] == "synthetic":
            spec = self.synthetic_spec()
            classes = sorted({c for t in self.tasks for c in t})
            return (make_synthetic(spec, self.data["train_samples"], classes, split_seed=2),
                    make_synthetic(spec, self.data["test_samples"], classes, split_seed=3))
        return (load_dataset(self.path("train"), self.data["kind"]),
                load_dataset(self.path("test"), self.data["kind"]))

    def task_specs(self) -> list:
        train, test = self.task_data()
        return make_tasks(train, test, self.tasks)
