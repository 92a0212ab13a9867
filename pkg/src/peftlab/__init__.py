"""Parameter-efficient fine-tuning on a desk-scale transformer.

A numpy autodiff core, LoRA and AdaLoRA adapters, affine and NF4
quantization with a binary format, quantized linear layers, a toy
encoder-decoder, summarization/ASR metrics and a seeded experiment harness.
"""

from .adapters import AdaLoraAdapter, BudgetSchedule, LoraAdapter, orthogonality_penalty, prune_step
from .harness import ExperimentConfig, RunReport, compare_modes, run_experiment
from .qlora import QloraLinear
from .quant import QuantizedTensor, QuantScheme, dequantize, quantize
from .tensor import Tensor, backward, sgd_step
from .transformer import ToyTransformer, attach_adapters

__version__ = "0.1.0"

__all__ = [
    "AdaLoraAdapter",
    "BudgetSchedule",
    "ExperimentConfig",
    "LoraAdapter",
    "QloraLinear",
    "QuantScheme",
    "QuantizedTensor",
    "RunReport",
    "Tensor",
    "ToyTransformer",
    "attach_adapters",
    "backward",
    "compare_modes",
    "dequantize",
    "orthogonality_penalty",
    "prune_step",
    "quantize",
    "run_experiment",
    "sgd_step",
]
