"""Two-stream SAR/optical fusion network for cloud removal.

A numpy-based library: reverse-mode autodiff core, windowed attention with
cross-stream guidance, dynamic-filter local fusion, synthetic scene
generation, image-quality metrics, and a deterministic training loop.
"""

__version__ = "0.1.0"

from .engine import (Node, ParamStore, backward, leaf, set_strict,
                     strict_enabled, ShapeError, ConfigError, ContractError)
from .model import GlfcrModel, ModelConfig, count_params, glfcr_forward, sfe_forward

__all__ = [
    "Node", "ParamStore", "backward", "leaf", "set_strict", "strict_enabled",
    "ShapeError", "ConfigError", "ContractError",
    "GlfcrModel", "ModelConfig", "count_params", "glfcr_forward", "sfe_forward",
    "__version__",
]
