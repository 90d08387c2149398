"""Quantized neural-network training with per-tensor adaptive bitwidths.

Weights exist only as integer codes with an affine ``(scale, zero_point)``
pair per tensor.  A controller watches how large each tensor's gradients are
relative to its resolution and grows or shrinks its bitwidth during
training.
"""

from .accounting import EnergyLedger, MemoryReport, gemm_energy, movement_energy, param_memory
from .controller import (BitwidthHistory, LayerStats, PolicyConfig, adjust_bitwidth,
                         compute_gavg, policy_tick, train_step)
from .data import Dataset, generate_synthetic, load_idx
from .estimator import RCTClassifier
from .exceptions import (ConfigError, DomainError, IDXParseError, InvalidInputError,
                         UsageError)
from .harness import (RunReport, TrainConfig, load_config, run, run_float, sweep_batch_size,
                      sweep_init_bitwidth, sweep_tmin, training_energy_report)
from .nn import Model, backward, forward
from .quant import (QuantizedTensor, QuantParams, RoundingMode, apply_update, compute_params,
                    dequantize, epsilon, quantize, requantize)

__version__ = "0.1.0"

__all__ = [
    "BitwidthHistory", "ConfigError", "Dataset", "DomainError", "EnergyLedger",
    "IDXParseError", "InvalidInputError", "LayerStats", "MemoryReport", "Model",
    "PolicyConfig", "QuantParams", "QuantizedTensor", "RCTClassifier", "RoundingMode",
    "RunReport", "TrainConfig", "UsageError", "adjust_bitwidth", "apply_update", "backward",
    "compute_gavg", "compute_params", "dequantize", "epsilon", "forward", "gemm_energy",
    "generate_synthetic", "load_config", "load_idx", "movement_energy", "param_memory",
    "policy_tick", "quantize", "requantize", "run", "run_float", "sweep_batch_size",
    "sweep_init_bitwidth", "sweep_tmin", "train_step", "training_energy_report",
]
