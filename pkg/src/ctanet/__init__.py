"""Hybrid conv/transformer image classifier with an analytic cost model.

The package is self-contained: tensors, reverse-mode autodiff, layers,
the model, dataset handling, training and the CLI all live here, backed
only by numpy buffers.
"""

from .errors import ConfigError, ContractError, DataError, NumericsError, ShapeError
from .model import (CtaNet, ModelConfig, baseline_twin, ct_block, fuse_tokens,
                    lmf_mhsa, mhsa, model_forward, model_init, multi_scale_fuse,
                    paper_config, patch_embed, reconstruct, reverse_embed,
                    rrcv_forward, tiny_config)
from .tensor import Tensor, backward, grad_check, no_grad

__all__ = [
    "ConfigError", "ContractError", "DataError", "NumericsError", "ShapeError",
    "CtaNet", "ModelConfig", "baseline_twin", "ct_block", "fuse_tokens",
    "lmf_mhsa", "mhsa", "model_forward", "model_init", "multi_scale_fuse",
    "paper_config", "patch_embed", "reconstruct", "reverse_embed",
    "rrcv_forward", "tiny_config",
    "Tensor", "backward", "grad_check", "no_grad",
]

__version__ = "0.1.0"
