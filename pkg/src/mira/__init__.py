"""Per-layer associative memories of LoRA adapters over a frozen transformer."""

from .backbone import AdapterVector, Backbone, BackboneConfig, Head
from .errors import ConfigError, ContractError, NumericError, ShapeError
from .memory import MemoryUnit, Separation
from .metrics import EvalReport, avg_accuracy, forgetting
from .pipeline import ModelState, TrainConfig, make_stream, run_mira, run_naive
from .retrieval import QueryModule, inference_forward, modulated_forward

__version__ = "0.1.0"

__all__ = [
    "AdapterVector", "Backbone", "BackboneConfig", "Head", "ConfigError", "ContractError", "NumericError",
    "ShapeError", "MemoryUnit", "Separation", "EvalReport", "avg_accuracy", "forgetting", "ModelState",
    "TrainConfig", "make_stream", "run_mira", "run_naive", "QueryModule", "inference_forward",
    "modulated_forward",
]
