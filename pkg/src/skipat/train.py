"""Desk-scale supervised training: cross-entropy, AdamW, deterministic loop.

The loop is fully determined by (seed, configs, data): parameter init, epoch
shuffles, and augmentation draws all come from the package RNG, and numeric
work stays single-threaded when SKAT_THREADS=1.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .config import ModelConfig
from .data import Cifar10Dataset, batch_from_dataset
from .errors import ConfigError
from .rng import RngState
from .vit import backward_batch, forward_batch, init_params


@dataclass
class TrainConfig:
    epochs: int = 5
    batch_size: int = 64
    lr: float = 5e-4
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    subset_size: int | None = None
    flip: bool = True
    crop: bool = True
    eval_subset_size: int | None = None

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be at least 1")


@dataclass
class TrainLog:
    train_loss: list[float] = field(default_factory=list)
    eval_accuracy: list[float] = field(default_factory=list)
    seconds: list[float] = field(default_factory=list)

    def to_csv(self) -> str:
        lines = ["epoch,loss,acc,seconds"]
        for i, (loss, acc, sec) in enumerate(
                zip(self.train_loss, self.eval_accuracy, self.seconds), start=1):
            lines.append(f"{i},{loss:.6f},{acc:.4f},{sec:.3f}")
        return "\n".join(lines) + "\n"


def cross_entropy(logits: np.ndarray, labels) -> tuple[float, np.ndarray]:
    """Mean negative log-likelihood plus its gradient w.r.t. the logits.

    Stable log-sum-exp; gradient is (softmax - onehot) / batch.
    """
    b, k = logits.shape
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (b,):
        raise ConfigError(f"expected {b} labels, got shape {labels.shape}")
    if labels.min() < 0 or labels.max() >= k:
        raise ConfigError(
            f"label {labels[np.argmax((labels < 0) | (labels >= k))]} "
            f"outside [0, {k})")
    m = logits.max(axis=1, keepdims=True)
    shifted = logits - m
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True)) + m
    logp = logits - lse
    loss = float(-logp[np.arange(b), labels].mean())
    dlogits = np.exp(logp)
    dlogits[np.arange(b), labels] -= 1.0
    dlogits = (dlogits / b).astype(logits.dtype)
    return loss, dlogits


# ---------------------------------------------------------------------------
# AdamW

NO_DECAY_LEAVES = ("bias", "beta", "gamma", "bq", "bk", "bv", "bo")
NO_DECAY_NAMES = ("cls_token", "pos_embed")


def decays_weight(name: str) -> bool:
    if name in NO_DECAY_NAMES:
        return False
    return name.rsplit(".", 1)[-1] not in NO_DECAY_LEAVES


def adamw_init(params: dict) -> dict:
    return {
        "t": 0,
        "m": {k: np.zeros_like(v) for k, v in params.items()},
        "v": {k: np.zeros_like(v) for k, v in params.items()},
    }


def adamw_step(params: dict, grads: dict, state: dict,
               hyper: TrainConfig) -> None:
    """One bias-corrected AdamW update in place.

    p <- p - lr*wd*p (decayed tensors only) - lr * m_hat / (sqrt(v_hat) + eps).
    Layer-norm affines, biases, the class token, and the positional table are
    excluded from weight decay.
    """
    state["t"] += 1
    t = state["t"]
    b1, b2 = hyper.beta1, hyper.beta2
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise ConfigError(
                f"gradient for {name!r} has shape {g.shape}, expected {p.shape}")
        m = state["m"][name]
        v = state["v"][name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        update = (m / bc1) / (np.sqrt(v / bc2) + hyper.eps)
        if hyper.weight_decay != 0.0 and decays_weight(name):
            p -= hyper.lr * hyper.weight_decay * p
        p -= hyper.lr * update


# ---------------------------------------------------------------------------
# Loop

def evaluate(params: dict, config: ModelConfig, dataset: Cifar10Dataset,
             limit: int | None = None, batch_size: int = 128) -> float:
    total = len(dataset) if limit is None else min(limit, len(dataset))
    correct = 0
    for start in range(0, total, batch_size):
        idx = range(start, min(start + batch_size, total))
        batch = batch_from_dataset(dataset, idx)
        logits, _, _ = forward_batch(batch.images.astype(np.float32), params,
                                     config)
        correct += int((logits.argmax(axis=1) ==
                        np.asarray(batch.labels)).sum())
    return correct / total


@dataclass
class TrainResult:
    params: dict
    optimizer_state: dict
    log: TrainLog


def train_loop(config: ModelConfig, tcfg: TrainConfig, data_dir,
               progress=print) -> TrainResult:
    train_set = Cifar10Dataset(data_dir, "train")
    test_set = Cifar10Dataset(data_dir, "test")
    n_train = len(train_set)
    if tcfg.subset_size is not None:
        n_train = min(tcfg.subset_size, n_train)

    params = init_params(config, seed=tcfg.seed, dtype=np.float32)
    state = adamw_init(params)
    loop_rng = RngState(tcfg.seed + 0x9E3779B9)
    log = TrainLog()
    for epoch in range(1, tcfg.epochs + 1):
        t0 = time.perf_counter()
        order = list(range(n_train))
        loop_rng.shuffle(order)
        losses = []
        for start in range(0, n_train, tcfg.batch_size):
            idx = order[start:start + tcfg.batch_size]
            batch = batch_from_dataset(train_set, idx, rng=loop_rng,
                                       flip=tcfg.flip, crop=tcfg.crop)
            logits, _, cache = forward_batch(batch.images, params, config,
                                             keep_cache=True)
            loss, dlogits = cross_entropy(logits, batch.labels)
            if not np.isfinite(loss):
                raise FloatingPointError(f"non-finite loss at epoch {epoch}")
            grads = backward_batch(dlogits, cache, params, config)
            adamw_step(params, grads, state, tcfg)
            losses.append(loss)
        acc = evaluate(params, config, test_set, limit=tcfg.eval_subset_size)
        seconds = time.perf_counter() - t0
        log.train_loss.append(float(np.mean(losses)))
        log.eval_accuracy.append(acc)
        log.seconds.append(seconds)
        if progress is not None:
            progress(f"{epoch},{log.train_loss[-1]:.6f},{acc:.4f},{seconds:.3f}")
    return TrainResult(params=params, optimizer_state=state, log=log)
