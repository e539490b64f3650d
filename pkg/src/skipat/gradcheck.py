"""Finite-difference verification of the whole-model backward pass.

Runs in float64: the analytic gradient of the cross-entropy loss w.r.t. every
parameter element is compared against central differences. The five-point
central stencil is used so that at step 1e-3 the oracle's own truncation error
(O(h^4)) sits far below the tolerance even through chained skip layers, whose
third derivatives are large enough to push a two-point stencil's O(h^2) error
above it. An element passes when
|analytic - numeric| <= tol * max(1, |analytic|, |numeric|).
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from .config import ModelConfig
from .rng import RngState, rand_uniform01
from .train import cross_entropy
from .vit import backward_batch, forward_batch, init_params

GRADCHECK_LIMITS = {"num_patches": 16, "embed_dim": 16, "depth": 3}


def shrink_for_gradcheck(config: ModelConfig) -> tuple[ModelConfig, bool]:
    """Clamp a config to gradcheck-safe sizes (n <= 16, d <= 16, L <= 3).

    Returns (config, shrunk). Skip schedules are remapped onto the reduced
    depth, preserving a chained pair when the original skipped anything.
    """
    c = config
    if (c.num_patches <= 16 and c.embed_dim <= 16 and c.depth <= 3
            and c.num_classes <= 10):
        return c, False
    heads = c.heads if 16 % c.heads == 0 and c.heads <= 4 else 2
    depth = min(c.depth, 3)
    skip = ()
    if c.skip_layers:
        skip = tuple(l for l in (2, 3) if l <= depth and len(c.skip_layers) > 1
                     ) or (2,)
    fields_now = {f.name: getattr(c, f.name) for f in fields(c)}
    fields_now.update(image_size=16, patch_size=4, embed_dim=16, heads=heads,
                      depth=depth, num_classes=min(c.num_classes, 4),
                      skip_layers=skip)
    return ModelConfig(**fields_now), True


@dataclass
class GradCheckResult:
    passed: bool
    checked: int
    failures: int
    worst_name: str
    worst_index: tuple
    worst_analytic: float
    worst_numeric: float
    worst_error: float

    def summary(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"{status}: {self.checked} gradient elements checked, "
                f"{self.failures} violations; worst {self.worst_name}"
                f"{list(self.worst_index)}: analytic {self.worst_analytic:.6e}, "
                f"numeric {self.worst_numeric:.6e}, err {self.worst_error:.3e}")


def gradcheck_model(config: ModelConfig, seed: int = 0, eps: float = 1e-3,
                    tol: float = 1e-4) -> GradCheckResult:
    """Exhaustive finite-difference check over all parameters in float64."""
    rng = RngState(seed)
    image = rand_uniform01(
        rng, (config.in_channels, config.image_size, config.image_size),
        dtype=np.float64)
    label = rng.randint_below(config.num_classes)
    params = init_params(config, seed=seed + 1, dtype=np.float64)

    def loss_value() -> float:
        logits, _, _ = forward_batch(image[None], params, config)
        return cross_entropy(logits, [label])[0]

    logits, _, cache = forward_batch(image[None], params, config,
                                     keep_cache=True)
    _, dlogits = cross_entropy(logits, [label])
    grads = backward_batch(dlogits, cache, params, config)

    checked = failures = 0
    worst = (0.0, "", (), 0.0, 0.0)  # (error, name, index, analytic, numeric)
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            # e.g. a skipped layer's unused pre-attention norm: the loss does
            # not depend on it, so the analytic gradient is identically zero.
            g = np.zeros_like(p)
        it = np.nditer(p, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            orig = p[idx]
            p[idx] = orig + 2.0 * eps
            f_p2 = loss_value()
            p[idx] = orig + eps
            f_p1 = loss_value()
            p[idx] = orig - eps
            f_m1 = loss_value()
            p[idx] = orig - 2.0 * eps
            f_m2 = loss_value()
            p[idx] = orig
            numeric = (-f_p2 + 8.0 * f_p1 - 8.0 * f_m1 + f_m2) / (12.0 * eps)
            analytic = float(g[idx])
            err = abs(analytic - numeric)
            rel = err / max(1.0, abs(analytic), abs(numeric))
            checked += 1
            if rel > worst[0]:
                worst = (rel, name, idx, analytic, numeric)
            if rel > tol:
                failures += 1
    return GradCheckResult(
        passed=failures == 0, checked=checked, failures=failures,
        worst_name=worst[1], worst_index=worst[2], worst_analytic=worst[3],
        worst_numeric=worst[4], worst_error=worst[0])
