"""Gated low-rank adapters with l0-constrained adapter selection and rank reallocation."""

from .adapters import (AdapterState, FrozenBase, adapter_param_count, expand_rank_gaussian,
                       expand_rank_qr, load_adapters, lora_forward, save_adapters,
                       weighted_forward)
from .catalog import ShapeCatalog, get_catalog, load_catalog
from .diagnostics import (ImportanceProfile, MemoryModel, count_catalog, count_trainable,
                          estimate_memory, importance_probe)
from .errors import ContractError, DegeneracyError, DimensionError, StateError, WeightLoRAError
from .models import ToyMLP, ToyTransformer, attach_adapters
from .sparsifier import (GateVector, freeze_and_disconnect, gate_step, hard_threshold_topk,
                         random_select_rlora)
from .tasks import SyntheticTask, make_planted_task, parse_task_spec
from .tensor import Tensor, backward
from .trainer import (RunReport, TrainSchedule, run_baseline, run_method, run_weightlora,
                      run_weightlora_plus)

__version__ = "0.1.0"

__all__ = [
    "adapter_param_count",
    "AdapterState",
    "attach_adapters",
    "backward",
    "ContractError",
    "count_catalog",
    "count_trainable",
    "DegeneracyError",
    "DimensionError",
    "estimate_memory",
    "expand_rank_gaussian",
    "expand_rank_qr",
    "freeze_and_disconnect",
    "FrozenBase",
    "gate_step",
    "GateVector",
    "get_catalog",
    "hard_threshold_topk",
    "importance_probe",
    "ImportanceProfile",
    "load_adapters",
    "load_catalog",
    "lora_forward",
    "make_planted_task",
    "MemoryModel",
    "parse_task_spec",
    "random_select_rlora",
    "run_baseline",
    "run_method",
    "run_weightlora",
    "run_weightlora_plus",
    "RunReport",
    "save_adapters",
    "ShapeCatalog",
    "StateError",
    "SyntheticTask",
    "Tensor",
    "ToyMLP",
    "ToyTransformer",
    "TrainSchedule",
    "weighted_forward",
    "WeightLoRAError",
]
