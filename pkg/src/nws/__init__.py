"""Neural weight search: assemble task networks from frozen, shared kernel pools."""

__version__ = "0.1.0"

from .analysis import kur, layer_sparsity, memory_report, profile_report, selection_rate_hist
from .arch import ArchSpec, LayerSpec, build, get_arch
from .data import ImageDataset, SyntheticSpec, load_dataset, make_synthetic
from .distill import DistillConfig, distill_step, pretrain_pools
from .errors import (ConfigError, CorruptFileError, CorruptModelError, DatasetError, DimensionError,
                     FrozenPoolError, IncompatibleArtifactError, InvalidInputError, NWSError, StateError)
from .estimators import DenseFinetuneClassifier, NWSClassifier, PoolDistiller
from .formats import load_model, load_pools, save_model, save_pools
from .harness import TaskModel, TaskSpec, infer_task, make_tasks, run_sequence, train_task
from .pool import IndexVector, KernelPool, PoolSet, decode, encode, nearest, search_layer
from .tensor import Tensor, get_default_dtype, no_grad, precision, set_default_dtype
from .training import TrainConfig
