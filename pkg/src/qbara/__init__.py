"""Block-wise weight quantization with balanced-rank (BaRA) and higher-rank (HiRA) adapters."""

from .adapters import (BaraAdapter, HiraAdapter, LoraAdapter, ScaleOperator, adapter_param_count,
                       bara_backward, bara_delta_weight, bara_forward, compress_features, expand_features,
                       hira_backward, hira_delta_beta_grid, hira_forward, lora_backward, lora_forward,
                       merge_bara, merge_hira)
from .errors import (CapabilityError, DataError, FormatError, NumericError, ParameterError, QbaraError,
                     ShapeError, StateError)
from .model import Model, QuantizedLinear, layer_forward, model_backward, model_forward
from .quantizer import (QuantConfig, QuantizedMatrix, QuantMode, dequantize_matrix, dequantize_tile,
                        pack_codes, quantization_stats, quantize_matrix, quantize_tile, unpack_codes)

__version__ = "0.1.0"

__all__ = [
    "BaraAdapter", "HiraAdapter", "LoraAdapter", "ScaleOperator", "adapter_param_count",
    "bara_backward", "bara_delta_weight", "bara_forward", "compress_features", "expand_features",
    "hira_backward", "hira_delta_beta_grid", "hira_forward", "lora_backward", "lora_forward",
    "merge_bara", "merge_hira",
    "CapabilityError", "DataError", "FormatError", "NumericError", "ParameterError", "QbaraError",
    "ShapeError", "StateError",
    "Model", "QuantizedLinear", "layer_forward", "model_backward", "model_forward",
    "QuantConfig", "QuantizedMatrix", "QuantMode", "dequantize_matrix", "dequantize_tile",
    "pack_codes", "quantization_stats", "quantize_matrix", "quantize_tile", "unpack_codes",
]
