"""Vision transformer with skip-attention blocks: model, analysis, cost model,
and a desk-scale training/benchmark harness."""

from . import _threads  # noqa: F401  (must run before numpy loads BLAS)

from .config import (ModelConfig, load_config, vit_base, vit_small, vit_tiny,
                     with_skip)
from .errors import CheckpointError, ConfigError, ShapeError, SkipAtError
from .rng import RngState, rand_normal, rand_trunc_normal
from .vit import (ForwardTrace, LayerTrace, census, forward, forward_batch,
                  init_params, param_count)

__all__ = [
    "CheckpointError", "ConfigError", "ForwardTrace", "LayerTrace",
    "ModelConfig", "RngState", "ShapeError", "SkipAtError", "census",
    "forward", "forward_batch", "init_params", "load_config", "param_count",
    "rand_normal", "rand_trunc_normal", "vit_base", "vit_small", "vit_tiny",
    "with_skip",
]
