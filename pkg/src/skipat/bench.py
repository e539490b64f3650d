"""Forward-only throughput measurement on synthetic batches."""

from __future__ import annotations

import json
import statistics
import time
from dataclasses import dataclass

import numpy as np

from .config import ModelConfig
from .data import synthetic_batch
from .rng import RngState
from .vit import forward_batch, init_params


@dataclass
class BenchResult:
    images_per_sec: float
    per_iter_seconds: list[float]
    warmup_seconds: list[float]
    batch: int
    warmup: int
    iters: int
    config_fingerprint: str
    dtype: str

    def to_json(self) -> str:
        return json.dumps({
            "images_per_sec": self.images_per_sec,
            "per_iter_seconds": self.per_iter_seconds,
            "warmup_seconds": self.warmup_seconds,
            "batch": self.batch,
            "warmup": self.warmup,
            "iters": self.iters,
            "config_fingerprint": self.config_fingerprint,
            "dtype": self.dtype,
        }, indent=2)


def run_bench(config: ModelConfig, batch: int = 8, iters: int = 20,
              warmup: int = 5, seed: int = 0,
              params: dict | None = None) -> BenchResult:
    """Median forward throughput; warmup iterations never enter the median."""
    if params is None:
        params = init_params(config, seed=seed, dtype=np.float32)
    rng = RngState(seed + 1)
    images = synthetic_batch(rng, batch, config).images
    warmup_times = []
    for _ in range(warmup):
        t0 = time.perf_counter()
        forward_batch(images, params, config)
        warmup_times.append(time.perf_counter() - t0)
    iter_times = []
    for _ in range(iters):
        t0 = time.perf_counter()
        forward_batch(images, params, config)
        iter_times.append(time.perf_counter() - t0)
    median = statistics.median(iter_times)
    return BenchResult(
        images_per_sec=batch / median,
        per_iter_seconds=iter_times,
        warmup_seconds=warmup_times,
        batch=batch, warmup=warmup, iters=iters,
        config_fingerprint=config.fingerprint(), dtype="f32")
