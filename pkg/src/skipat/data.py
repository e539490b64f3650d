"""Dataset and artifact IO.

CIFAR-10 binary batches (3073-byte records: label byte + 3072 pixel bytes,
R then G then B planes, row-major 32x32), a deterministic synthetic stand-in
corpus in the same format, per-image augmentation, and the SKAT checkpoint
container (embedded config JSON + named SKTN1 tensors + CRC32 trailer).
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .config import ModelConfig
from .errors import CheckpointError, ConfigError
from .rng import RngState, rand_uniform01
from .vit import census

CIFAR_MEAN = np.array([0.4914, 0.4822, 0.4465], dtype=np.float32)
CIFAR_STD = np.array([0.2470, 0.2435, 0.2616], dtype=np.float32)
RECORD_BYTES = 3073
CIFAR_CLASSES = 10
CIFAR_SIDE = 32


@dataclass
class LabeledBatch:
    images: np.ndarray  # (b, c, h, w), normalized float32
    labels: list[int]

    def __post_init__(self):
        if self.images.shape[0] != len(self.labels):
            raise ConfigError(
                f"batch size {self.images.shape[0]} != label count {len(self.labels)}")


class Cifar10Dataset:
    """Streaming view over CIFAR-10 binary batch files in a directory.

    Train split reads data_batch_*.bin in name order; test split reads
    test_batch.bin. Records are decoded on demand in a deterministic order.
    """

    def __init__(self, directory, split: str = "train"):
        directory = Path(directory)
        if split == "train":
            files = sorted(directory.glob("data_batch_*.bin"))
        elif split == "test":
            files = [directory / "test_batch.bin"]
        else:
            raise ConfigError(f"unknown split {split!r}")
        if not files or not all(f.exists() for f in files):
            raise CheckpointError(
                f"no CIFAR-10 {split} batch files found under {directory}")
        chunks = []
        for path in files:
            raw = path.read_bytes()
            if len(raw) == 0 or len(raw) % RECORD_BYTES != 0:
                expected = RECORD_BYTES * max(1, round(len(raw) / RECORD_BYTES))
                raise CheckpointError(
                    f"{path} is not a whole number of {RECORD_BYTES}-byte "
                    f"records: expected {expected} bytes, found {len(raw)}")
            chunks.append(np.frombuffer(raw, dtype=np.uint8)
                          .reshape(-1, RECORD_BYTES))
        self.records = np.concatenate(chunks, axis=0)
        labels = self.records[:, 0]
        bad = np.nonzero(labels >= CIFAR_CLASSES)[0]
        if bad.size:
            raise CheckpointError(
                f"record {bad[0]} has label {labels[bad[0]]} >= {CIFAR_CLASSES}")
        self.split = split

    def __len__(self) -> int:
        return self.records.shape[0]

    def label(self, index: int) -> int:
        return int(self.records[index, 0])

    def image_raw01(self, index: int) -> np.ndarray:
        """Pixels scaled to [0, 1], shape (3, 32, 32); no normalization."""
        pixels = self.records[index, 1:].reshape(3, CIFAR_SIDE, CIFAR_SIDE)
        return pixels.astype(np.float32) / 255.0


def normalize_images(raw01: np.ndarray) -> np.ndarray:
    """Per-channel standardization with the fixed CIFAR-10 constants."""
    return (raw01 - CIFAR_MEAN[:, None, None]) / CIFAR_STD[:, None, None]


def augment_raw01(raw01: np.ndarray, rng: RngState, flip: bool,
                  crop: bool) -> np.ndarray:
    """Horizontal flip (p=0.5) and random crop from 4-pixel zero padding.

    Draw order per image: one flip draw (if enabled), then two offset draws
    (if enabled); applied to the unnormalized [0,1] image.
    """
    out = raw01
    if flip and rng.uniform01() < 0.5:
        out = out[:, :, ::-1]
    if crop:
        c, h, w = out.shape
        padded = np.zeros((c, h + 8, w + 8), dtype=out.dtype)
        padded[:, 4:4 + h, 4:4 + w] = out
        oy = rng.randint_below(9)
        ox = rng.randint_below(9)
        out = padded[:, oy:oy + h, ox:ox + w]
    return np.ascontiguousarray(out)


def batch_from_dataset(dataset: Cifar10Dataset, indices,
                       rng: RngState | None = None, flip: bool = False,
                       crop: bool = False) -> LabeledBatch:
    images = []
    labels = []
    for idx in indices:
        raw = dataset.image_raw01(idx)
        if rng is not None and (flip or crop):
            raw = augment_raw01(raw, rng, flip, crop)
        images.append(normalize_images(raw))
        labels.append(dataset.label(idx))
    return LabeledBatch(images=np.stack(images), labels=labels)


def synthetic_batch(rng: RngState, b: int, config: ModelConfig) -> LabeledBatch:
    """Uniform [0,1) pixels and uniform labels, fully seed-determined."""
    images = rand_uniform01(
        rng, (b, config.in_channels, config.image_size, config.image_size))
    labels = [rng.randint_below(config.num_classes) for _ in range(b)]
    return LabeledBatch(images=images, labels=labels)


def write_synthetic_cifar_dir(directory, train_records: int = 10_000,
                              test_records: int = 10_000, seed: int = 0,
                              noise_std: float = 24.0,
                              records_per_file: int = 10_000) -> None:
    """Class-separable corpus in the CIFAR-10 binary format.

    Each class gets a fixed random template image; samples are the template
    plus Gaussian pixel noise, clipped to bytes. Labels cycle 0..9 so every
    split is exactly balanced. Useful wherever the real dataset is absent.
    Generation is vectorized with numpy's seeded generator (fixture plumbing;
    the package stream contract stays with RngState).
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    gen = np.random.default_rng(seed)
    templates = gen.uniform(0.0, 255.0, size=(CIFAR_CLASSES, 3072))

    def make_records(count: int) -> bytes:
        labels = (np.arange(count) % CIFAR_CLASSES).astype(np.uint8)
        noise = gen.normal(0.0, noise_std, size=(count, 3072))
        pixels = np.clip(templates[labels] + noise, 0, 255).astype(np.uint8)
        records = np.empty((count, RECORD_BYTES), dtype=np.uint8)
        records[:, 0] = labels
        records[:, 1:] = pixels
        return records.tobytes()

    remaining = train_records
    batch_no = 1
    while remaining > 0:
        take = min(records_per_file, remaining)
        (directory / f"data_batch_{batch_no}.bin").write_bytes(make_records(take))
        remaining -= take
        batch_no += 1
    (directory / "test_batch.bin").write_bytes(make_records(test_records))


# ---------------------------------------------------------------------------
# SKAT checkpoint container

_CKPT_MAGIC = b"SKAT"
_CKPT_VERSION = 1


def _pack_named_tensors(items: list[tuple[str, np.ndarray]]) -> bytes:
    out = bytearray(struct.pack("<I", len(items)))
    for name, arr in items:
        encoded = name.encode("utf-8")
        out += struct.pack("<H", len(encoded))
        out += encoded
        out += T.tensor_to_bytes(arr)
    return bytes(out)


def _unpack_named_tensors(buf: bytes, pos: int):
    (count,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    items = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        name = buf[pos:pos + name_len].decode("utf-8")
        pos += name_len
        arr, pos = T.tensor_from_bytes(buf, pos)
        items[name] = arr
    return items, pos


def checkpoint_bytes(params: dict, config: ModelConfig,
                     optimizer_state: dict | None = None) -> bytes:
    """Serialize a parameter store (census order) with its config."""
    names = [name for name, _ in census(config)]
    missing = [n for n in names if n not in params]
    if missing:
        raise CheckpointError(f"cannot save: missing tensor {missing[0]!r}")
    body = bytearray()
    body += _CKPT_MAGIC
    body += struct.pack("<B", _CKPT_VERSION)
    cfg_json = config.to_json().encode("utf-8")
    body += struct.pack("<I", len(cfg_json))
    body += cfg_json
    body += _pack_named_tensors([(n, params[n]) for n in names])
    if optimizer_state is None:
        body += struct.pack("<B", 0)
    else:
        body += struct.pack("<B", 1)
        body += struct.pack("<Q", int(optimizer_state["t"]))
        items = [("m:" + n, optimizer_state["m"][n]) for n in names]
        items += [("v:" + n, optimizer_state["v"][n]) for n in names]
        body += _pack_named_tensors(items)
    crc = zlib.crc32(bytes(body)) & 0xFFFFFFFF
    body += struct.pack("<I", crc)
    return bytes(body)


def save_checkpoint(path, params: dict, config: ModelConfig,
                    optimizer_state: dict | None = None) -> None:
    Path(path).write_bytes(checkpoint_bytes(params, config, optimizer_state))


def load_checkpoint(path, target_config: ModelConfig | None = None):
    """Load a checkpoint; returns (params, config, optimizer_state | None).

    With `target_config`, the stored tensors are checked against (and filtered
    to) that config's census: every required tensor must be present with the
    right shape. A checkpoint saved without skip parameters therefore loads
    under parameter-free skip configs (identity, attn_reuse) but is rejected
    under parametric ones.
    """
    buf = Path(path).read_bytes()
    return checkpoint_from_bytes(buf, target_config)


def checkpoint_from_bytes(buf: bytes, target_config: ModelConfig | None = None):
    if len(buf) < 13:
        raise CheckpointError(f"checkpoint too small ({len(buf)} bytes)")
    stored_crc = struct.unpack_from("<I", buf, len(buf) - 4)[0]
    actual_crc = zlib.crc32(buf[:-4]) & 0xFFFFFFFF
    if stored_crc != actual_crc:
        raise CheckpointError(
            f"checkpoint CRC mismatch: stored {stored_crc:#010x}, "
            f"computed {actual_crc:#010x}")
    if buf[:4] != _CKPT_MAGIC:
        raise CheckpointError("bad checkpoint magic (expected SKAT)")
    (version,) = struct.unpack_from("<B", buf, 4)
    if version != _CKPT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (cfg_len,) = struct.unpack_from("<I", buf, 5)
    pos = 9
    stored_config = ModelConfig.from_json(buf[pos:pos + cfg_len].decode("utf-8"))
    pos += cfg_len
    tensors, pos = _unpack_named_tensors(buf, pos)
    (has_opt,) = struct.unpack_from("<B", buf, pos)
    pos += 1
    optimizer_state = None
    if has_opt:
        (t_step,) = struct.unpack_from("<Q", buf, pos)
        pos += 8
        items, pos = _unpack_named_tensors(buf, pos)
        optimizer_state = {
            "t": int(t_step),
            "m": {k[2:]: v for k, v in items.items() if k.startswith("m:")},
            "v": {k[2:]: v for k, v in items.items() if k.startswith("v:")},
        }

    config = target_config if target_config is not None else stored_config
    params = {}
    for name, shape in census(config):
        if name not in tensors:
            raise CheckpointError(f"missing tensor {name!r} for target config")
        if tuple(tensors[name].shape) != tuple(shape):
            raise CheckpointError(
                f"tensor {name!r} has shape {tensors[name].shape}, "
                f"target config requires {shape}")
        params[name] = tensors[name]
    return params, config, optimizer_state
