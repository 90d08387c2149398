"""JSON Schemas for every file the harness and CLI write.

CSV files are described by a schema for one row after each cell has been
converted with the matching entry of ``*_COLUMN_TYPES``.
"""

_BITS = {"type": "integer", "minimum": 2, "maximum": 32}
_NONNEG = {"type": "number", "minimum": 0}
_FRACTION = {"type": "number", "minimum": 0, "maximum": 1}

ENERGY_SCHEMA = {
    "type": "object",
    "required": ["gemm_fp32_mac_equiv", "movement_fp32_param_equiv", "forward_only_gemm",
                 "total_macs", "forward_macs", "gemm_ratio_vs_fp32", "forward_ratio_vs_fp32",
                 "movement_ratio_vs_fp32", "steps", "act_bits", "grad_bits",
                 "backward_costing", "per_layer"],
    "properties": {
        "gemm_fp32_mac_equiv": _NONNEG,
        "movement_fp32_param_equiv": _NONNEG,
        "forward_only_gemm": _NONNEG,
        "total_macs": {"type": "integer", "minimum": 0},
        "forward_macs": {"type": "integer", "minimum": 0},
        "gemm_ratio_vs_fp32": _NONNEG,
        "forward_ratio_vs_fp32": _NONNEG,
        "movement_ratio_vs_fp32": _NONNEG,
        "steps": {"type": "integer", "minimum": 0},
        "act_bits": {"anyOf": [_BITS, {"type": "null"}]},
        "grad_bits": _BITS,
        "backward_costing": {"type": "string"},
        "per_layer": {
            "type": "object",
            "additionalProperties": {
                "type": "object",
                "required": ["macs", "forward", "backward"],
                "properties": {"macs": {"type": "integer", "minimum": 0},
                               "forward": _NONNEG, "backward": _NONNEG},
            },
        },
    },
}

MEMORY_SCHEMA = {
    "type": "object",
    "required": ["total_bits", "weighted_avg_bitwidth", "normalized_vs_fp32"],
    "properties": {
        "total_bits": {"type": "integer", "minimum": 0},
        "weighted_avg_bitwidth": {"type": "number", "minimum": 2, "maximum": 32},
        "normalized_vs_fp32": _FRACTION,
    },
    "additionalProperties": False,
}

REPORT_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "report.json",
    "type": "object",
    "required": ["config", "seed", "final_accuracy", "train_accuracy", "per_layer_bitwidth",
                 "weighted_avg_bitwidth", "energy", "memory", "loss_per_epoch", "n_train",
                 "input_shape", "initial_bitwidths"],
    "properties": {
        "config": {"type": "object", "required": ["dataset", "model", "lr", "batch_size",
                                                  "epochs", "seed", "policy"]},
        "seed": {"type": "integer", "minimum": 0},
        "final_accuracy": _FRACTION,
        "train_accuracy": _FRACTION,
        "per_layer_bitwidth": {"type": "object", "additionalProperties": _BITS, "minProperties": 1},
        "weighted_avg_bitwidth": {"type": "number", "minimum": 2, "maximum": 32},
        "energy": ENERGY_SCHEMA,
        "memory": MEMORY_SCHEMA,
        "loss_per_epoch": {"type": "array", "items": _NONNEG},
        "n_train": {"type": "integer", "minimum": 1},
        "input_shape": {"type": "array", "items": {"type": "integer", "minimum": 1}, "minItems": 1},
        "initial_bitwidths": {"type": "object", "additionalProperties": _BITS},
    },
    "additionalProperties": False,
}

TIMING_SCHEMA = {
    "type": "object",
    "required": ["wall_clock_seconds"],
    "properties": {"wall_clock_seconds": _NONNEG},
    "additionalProperties": False,
}

HISTORY_COLUMN_TYPES = {"step": int, "layer": str, "bitwidth": int, "gavg": float}
HISTORY_ROW_SCHEMA = {
    "type": "object",
    "required": list(HISTORY_COLUMN_TYPES),
    "properties": {"step": {"type": "integer", "minimum": 0},
                   "layer": {"type": "string", "minLength": 1},
                   "bitwidth": _BITS,
                   "gavg": _NONNEG},
    "additionalProperties": False,
}

SWEEP_COLUMN_TYPES = {
    "tmin": {"t_min": float, "accuracy": float, "gemm_fp32_mac_equiv": float,
             "movement_fp32_param_equiv": float, "weighted_avg_bitwidth": float,
             "normalized_memory": float},
    "init": {"k_init": int, "final_accuracy": float, "weighted_avg_bitwidth": float},
    "batch": {"batch_size": int, "final_avg_bitwidth": float, "accuracy": float},
}

_RUN_METRICS = {"seed": int, "accuracy": float, "weighted_avg_bitwidth": float,
                "gemm_fp32_mac_equiv": float, "movement_fp32_param_equiv": float}
SWEEP_RUNS_COLUMN_TYPES = {
    "tmin": {"t_min": float, **_RUN_METRICS},
    "init": {"k_init": int, **_RUN_METRICS},
    "batch": {"batch_size": int, **_RUN_METRICS},
}

_CELL = {int: {"type": "integer"}, float: {"type": "number"}, str: {"type": "string"}}


def row_schema(column_types):
    """Schema for one CSV row whose cells were converted per ``column_types``."""
    return {
        "type": "object",
        "required": list(column_types),
        "properties": {name: _CELL[t] for name, t in column_types.items()},
        "additionalProperties": False,
    }


SWEEP_SUMMARY_SCHEMA = {
    "type": "object",
    "required": ["kind"],
    "properties": {"kind": {"enum": list(SWEEP_COLUMN_TYPES)}},
    "additionalProperties": {"type": "number"},
}
