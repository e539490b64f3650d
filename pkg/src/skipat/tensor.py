"""Dense-tensor primitives and their vector-Jacobian (backward) counterparts.

Tensors are plain C-contiguous numpy arrays in float32 or float64; every
operation is out-of-place and dtype-preserving. There is no autodiff graph:
each `*_backward` implements the documented contract and callers compose them
explicitly. Multiply-accumulate counting for the cost model hooks into the
handful of MAC-bearing ops (matmul and the convolutions) through a
context-local counter.
"""

from __future__ import annotations

import contextlib
import contextvars
import struct
from dataclasses import dataclass

import numba
import numpy as np
import scipy.special

from .errors import CheckpointError, ShapeError

FLOAT_DTYPES = (np.float32, np.float64)


@dataclass
class GradPair:
    """A value tensor paired with its (optional) gradient of identical shape."""

    value: np.ndarray
    grad: np.ndarray | None = None

    def __post_init__(self):
        if self.grad is not None and self.grad.shape != self.value.shape:
            raise ShapeError(
                f"grad shape {self.grad.shape} != value shape {self.value.shape}")


# ---------------------------------------------------------------------------
# MAC counting

class MacCounter:
    """Per-pass accumulator attributing MACs to named blocks."""

    def __init__(self):
        self.entries: dict[str, dict] = {}
        self._block: tuple[str, str] | None = None

    @contextlib.contextmanager
    def block(self, block_id: str, kind: str):
        prev = self._block
        self._block = (block_id, kind)
        try:
            yield
        finally:
            self._block = prev

    def add(self, macs: int) -> None:
        if self._block is None:
            block_id, kind = "(unattributed)", "other"
        else:
            block_id, kind = self._block
        entry = self.entries.setdefault(block_id, {"kind": kind, "macs": 0})
        entry["macs"] += int(macs)

    @property
    def total(self) -> int:
        return sum(e["macs"] for e in self.entries.values())


_active_counter: contextvars.ContextVar[MacCounter | None] = \
    contextvars.ContextVar("skipat_mac_counter", default=None)


@contextlib.contextmanager
def mac_scope(counter: MacCounter):
    """Activate `counter` for MAC-bearing ops on this thread/context."""
    token = _active_counter.set(counter)
    try:
        yield counter
    finally:
        _active_counter.reset(token)


def current_counter() -> MacCounter | None:
    return _active_counter.get()


def _count(macs: int) -> None:
    counter = _active_counter.get()
    if counter is not None:
        counter.add(macs)


# ---------------------------------------------------------------------------
# Core operations

def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product a @ b; leading dims broadcast as stacked matrices.

    Backward: d a = dC @ b^T, d b = a^T @ dC (see matmul_backward).
    """
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs matrices, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner-dim mismatch: {a.shape} @ {b.shape}")
    out = np.matmul(a, b)
    batch = int(np.prod(out.shape[:-2])) if out.ndim > 2 else 1
    _count(batch * a.shape[-2] * a.shape[-1] * b.shape[-1])
    return out


def matmul_backward(d_out: np.ndarray, a: np.ndarray, b: np.ndarray):
    da = np.matmul(d_out, np.swapaxes(b, -1, -2))
    db = np.matmul(np.swapaxes(a, -1, -2), d_out)
    # Stacked matmuls broadcast over leading dims; fold those back down.
    while da.ndim > a.ndim:
        da = da.sum(axis=0)
    while db.ndim > b.ndim:
        db = db.sum(axis=0)
    return da, db


def softmax_rows(x: np.ndarray) -> np.ndarray:
    """Row-wise softmax over the last axis, overflow-safe via max subtraction."""
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_rows_backward(d_out: np.ndarray, y: np.ndarray) -> np.ndarray:
    # dx = y * (dy - <dy, y> per row)
    dot = (d_out * y).sum(axis=-1, keepdims=True)
    return y * (d_out - dot)


@numba.njit(cache=True, fastmath=True)
def _normal_cdf_from_exp_f32(x, expmhalf, out):
    # Phi(x) = 0.5*(1+erf(x/sqrt(2))); erf via the Abramowitz-Stegun 7.1.26
    # rational polynomial (|error| < 1.5e-7, i.e. float32 resolution), reusing
    # the vectorized exp(-x^2/2) computed by the caller.
    one = np.float32(1.0)
    for i in range(x.size):
        v = x[i]
        a = abs(v) * np.float32(0.7071067811865476)
        t = one / (one + np.float32(0.3275911) * a)
        poly = t * (np.float32(0.254829592) + t * (np.float32(-0.284496736)
               + t * (np.float32(1.421413741) + t * (np.float32(-1.453152027)
               + t * np.float32(1.061405429)))))
        tail = poly * expmhalf[i]
        erf = one - tail if v >= np.float32(0.0) else tail - one
        out[i] = np.float32(0.5) * (one + erf)


def normal_cdf(x: np.ndarray) -> np.ndarray:
    """Standard normal CDF, elementwise.

    float64 uses scipy's exact erf; float32 uses a float32-resolution rational
    approximation of the same erf form (absolute error below 4e-7).
    """
    if x.dtype == np.float64:
        return scipy.special.ndtr(x)
    flat = np.ascontiguousarray(x, dtype=np.float32).reshape(-1)
    e = np.exp(-0.5 * flat * flat)
    out = np.empty_like(flat)
    _normal_cdf_from_exp_f32(flat, e, out)
    return out.reshape(x.shape)


def gelu(x: np.ndarray) -> np.ndarray:
    """Erf-form GELU: x * Phi(x) with Phi the standard normal CDF."""
    return x * normal_cdf(x)


_INV_SQRT_2PI = 0.3989422804014327


def gelu_backward(d_out: np.ndarray, x: np.ndarray,
                  cdf: np.ndarray | None = None) -> np.ndarray:
    if cdf is None:
        cdf = normal_cdf(x)
    pdf = np.exp(-0.5 * x * x) * _INV_SQRT_2PI
    return d_out * (cdf + x * pdf)


@numba.njit(cache=True, fastmath=True)
def _layer_norm_f32(x, gamma, beta, eps, out, xhat, inv_std):
    rows, d = x.shape
    for i in range(rows):
        row = x[i]
        s = np.float32(0.0)
        for j in range(d):
            s += row[j]
        mu = s / np.float32(d)
        sq = np.float32(0.0)
        for j in range(d):
            c = row[j] - mu
            sq += c * c
        istd = np.float32(1.0) / np.sqrt(sq / np.float32(d) + eps)
        inv_std[i] = istd
        for j in range(d):
            h = (row[j] - mu) * istd
            xhat[i, j] = h
            out[i, j] = h * gamma[j] + beta[j]


def layer_norm(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray,
               eps: float = 1e-6):
    """Standardize over the last axis then apply the affine (gamma, beta).

    Returns (out, cache) where cache feeds layer_norm_backward.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    if x.shape[-1] != gamma.shape[0] or x.shape[-1] != beta.shape[0]:
        raise ShapeError(
            f"layer_norm affine dims {gamma.shape}/{beta.shape} "
            f"do not match input {x.shape}")
    if x.dtype == np.float32:
        d = x.shape[-1]
        flat = np.ascontiguousarray(x).reshape(-1, d)
        out = np.empty_like(flat)
        xhat = np.empty_like(flat)
        inv_std = np.empty(flat.shape[0], dtype=np.float32)
        _layer_norm_f32(flat, gamma, beta, np.float32(eps), out, xhat, inv_std)
        shape = x.shape
        return out.reshape(shape), (xhat.reshape(shape),
                                    inv_std.reshape(shape[:-1] + (1,)))
    mu = x.mean(axis=-1, keepdims=True)
    centered = x - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + np.asarray(eps, dtype=x.dtype))
    xhat = centered * inv_std
    out = xhat * gamma + beta
    return out, (xhat, inv_std)


def layer_norm_backward(d_out: np.ndarray, cache, gamma: np.ndarray):
    xhat, inv_std = cache
    d = xhat.shape[-1]
    dgamma = (d_out * xhat).reshape(-1, d).sum(axis=0)
    dbeta = d_out.reshape(-1, d).sum(axis=0)
    g = d_out * gamma
    dx = inv_std * (g - g.mean(axis=-1, keepdims=True)
                    - xhat * (g * xhat).mean(axis=-1, keepdims=True))
    return dx.astype(d_out.dtype), dgamma, dbeta


def depthwise_conv2d(x: np.ndarray, kernels: np.ndarray,
                     bias: np.ndarray) -> np.ndarray:
    """Per-channel 2D correlation, zero "same" padding, stride 1.

    x is (c, h, w) or batched (b, c, h, w); kernels (c, r, r) with odd r.
    Accumulation order is row-major over kernel offsets with the bias added
    last, matching the naive nested-loop reference term for term.
    """
    r = kernels.shape[-1]
    if kernels.ndim != 3 or kernels.shape[1] != r:
        raise ShapeError(f"kernels must be (c, r, r), got {kernels.shape}")
    if r % 2 == 0:
        raise ShapeError(f"kernel size must be odd, got {r}")
    batched = x.ndim == 4
    xb = x if batched else x[None]
    b, c, h, w = xb.shape
    if kernels.shape[0] != c or bias.shape != (c,):
        raise ShapeError(
            f"channel mismatch: input {x.shape}, kernels {kernels.shape}, "
            f"bias {bias.shape}")
    pad = (r - 1) // 2
    xp = np.zeros((b, c, h + r - 1, w + r - 1), dtype=x.dtype)
    xp[:, :, pad:pad + h, pad:pad + w] = xb
    out = np.zeros((b, c, h, w), dtype=x.dtype)
    for di in range(r):
        for dj in range(r):
            out += xp[:, :, di:di + h, dj:dj + w] * kernels[:, di, dj][:, None, None]
    out += bias[:, None, None]
    _count(b * c * h * w * r * r)
    return out if batched else out[0]


def depthwise_conv2d_backward(d_out: np.ndarray, x: np.ndarray,
                              kernels: np.ndarray):
    r = kernels.shape[-1]
    batched = x.ndim == 4
    xb = x if batched else x[None]
    db_out = d_out if batched else d_out[None]
    b, c, h, w = xb.shape
    pad = (r - 1) // 2
    xp = np.zeros((b, c, h + r - 1, w + r - 1), dtype=x.dtype)
    xp[:, :, pad:pad + h, pad:pad + w] = xb
    dxp = np.zeros_like(xp)
    dk = np.zeros_like(kernels)
    for di in range(r):
        for dj in range(r):
            dxp[:, :, di:di + h, dj:dj + w] += \
                db_out * kernels[:, di, dj][:, None, None]
            dk[:, di, dj] = (xp[:, :, di:di + h, dj:dj + w] * db_out) \
                .sum(axis=(0, 2, 3))
    dx = dxp[:, :, pad:pad + h, pad:pad + w]
    dbias = db_out.sum(axis=(0, 2, 3))
    if not batched:
        dx = dx[0]
    return dx.astype(x.dtype), dk.astype(kernels.dtype), dbias.astype(x.dtype)


@numba.njit(cache=True)
def _dwc_cl_forward_f32(xp, kern, bias, out):
    # channels-last (b, hp, wp, c) with kern (r, r, c); accumulation order is
    # row-major over kernel offsets with the bias added last, matching the
    # channels-first reference term for term (no fastmath: order preserved).
    b, hp, wp, c = xp.shape
    r = kern.shape[0]
    h = hp - r + 1
    w = wp - r + 1
    for bi in range(b):
        for i in range(h):
            for j in range(w):
                o = out[bi, i, j]
                for ci in range(c):
                    o[ci] = np.float32(0.0)
                for di in range(r):
                    for dj in range(r):
                        kv = kern[di, dj]
                        xv = xp[bi, i + di, j + dj]
                        for ci in range(c):
                            o[ci] += xv[ci] * kv[ci]
                for ci in range(c):
                    o[ci] += bias[ci]


@numba.njit(cache=True)
def _dwc_cl_backward_f32(d_out, xp, kern, dxp, dk):
    b, hp, wp, c = xp.shape
    r = kern.shape[0]
    h = hp - r + 1
    w = wp - r + 1
    for bi in range(b):
        for i in range(h):
            for j in range(w):
                g = d_out[bi, i, j]
                for di in range(r):
                    for dj in range(r):
                        kv = kern[di, dj]
                        xv = xp[bi, i + di, j + dj]
                        dxv = dxp[bi, i + di, j + dj]
                        dkv = dk[di, dj]
                        for ci in range(c):
                            dxv[ci] += g[ci] * kv[ci]
                            dkv[ci] += xv[ci] * g[ci]


def depthwise_conv2d_cl(x: np.ndarray, kernels: np.ndarray,
                        bias: np.ndarray):
    """Channels-last depthwise conv: x (b, h, w, c), kernels (r, r, c).

    Same semantics (zero "same" padding, stride 1, odd r, row-major offset
    accumulation, bias last) as depthwise_conv2d; layout suits token grids.
    Returns (out, padded_input) where the padded input feeds the backward.
    """
    r = kernels.shape[0]
    if r % 2 == 0:
        raise ShapeError(f"kernel size must be odd, got {r}")
    b, h, w, c = x.shape
    if kernels.shape != (r, r, c) or bias.shape != (c,):
        raise ShapeError(
            f"channel mismatch: input {x.shape}, kernels {kernels.shape}, "
            f"bias {bias.shape}")
    pad = (r - 1) // 2
    xp = np.zeros((b, h + r - 1, w + r - 1, c), dtype=x.dtype)
    xp[:, pad:pad + h, pad:pad + w, :] = x
    out = np.empty_like(x)
    if x.dtype == np.float32:
        _dwc_cl_forward_f32(xp, kernels, bias, out)
    else:
        acc = np.zeros_like(x)
        for di in range(r):
            for dj in range(r):
                acc += xp[:, di:di + h, dj:dj + w, :] * kernels[di, dj]
        out = acc + bias
    _count(b * c * h * w * r * r)
    return out, xp


def depthwise_conv2d_cl_backward(d_out: np.ndarray, xp: np.ndarray,
                                 kernels: np.ndarray):
    r = kernels.shape[0]
    b, h, w, c = d_out.shape
    pad = (r - 1) // 2
    dk = np.zeros_like(kernels)
    dxp = np.zeros_like(xp)
    if d_out.dtype == np.float32:
        _dwc_cl_backward_f32(np.ascontiguousarray(d_out), xp, kernels, dxp, dk)
    else:
        for di in range(r):
            for dj in range(r):
                dxp[:, di:di + h, dj:dj + w, :] += d_out * kernels[di, dj]
                dk[di, dj] = (xp[:, di:di + h, dj:dj + w, :] * d_out) \
                    .sum(axis=(0, 1, 2))
    dx = dxp[:, pad:pad + h, pad:pad + w, :]
    dbias = d_out.sum(axis=(0, 1, 2))
    return dx, dk, dbias


def conv1d_same(x: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """1D correlation along a vector with zero "same" padding, odd kernel."""
    k = kernel.shape[0]
    if k % 2 == 0:
        raise ShapeError(f"conv1d kernel length must be odd, got {k}")
    n = x.shape[0]
    pad = (k - 1) // 2
    xp = np.zeros(n + k - 1, dtype=x.dtype)
    xp[pad:pad + n] = x
    out = np.zeros(n, dtype=x.dtype)
    for i in range(k):
        out += xp[i:i + n] * kernel[i]
    _count(n * k)
    return out


def conv1d_same_backward(d_out: np.ndarray, x: np.ndarray, kernel: np.ndarray):
    k = kernel.shape[0]
    n = x.shape[0]
    pad = (k - 1) // 2
    xp = np.zeros(n + k - 1, dtype=x.dtype)
    xp[pad:pad + n] = x
    dxp = np.zeros_like(xp)
    dk = np.zeros_like(kernel)
    for i in range(k):
        dxp[i:i + n] += d_out * kernel[i]
        dk[i] = (xp[i:i + n] * d_out).sum()
    return dxp[pad:pad + n], dk


# ---------------------------------------------------------------------------
# Elementwise / structural suite

def add(a, b):
    if a.shape != b.shape:
        raise ShapeError(f"add shape mismatch: {a.shape} vs {b.shape}")
    return a + b


def sub(a, b):
    if a.shape != b.shape:
        raise ShapeError(f"sub shape mismatch: {a.shape} vs {b.shape}")
    return a - b


def hadamard(a, b):
    if a.shape != b.shape:
        raise ShapeError(f"hadamard shape mismatch: {a.shape} vs {b.shape}")
    return a * b


def scale(a, s: float):
    return a * a.dtype.type(s)


def sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid_backward(d_out, y):
    return d_out * y * (1.0 - y)


def transpose(a):
    if a.ndim != 2:
        raise ShapeError(f"transpose expects a matrix, got {a.shape}")
    return np.ascontiguousarray(a.T)


def reshape(a, dims):
    dims = tuple(int(d) for d in dims)
    if int(np.prod(dims)) != a.size:
        raise ShapeError(f"cannot reshape {a.shape} ({a.size} elements) to {dims}")
    return a.reshape(dims)


def concat_rows(a, b):
    if a.shape[1:] != b.shape[1:]:
        raise ShapeError(f"concat_rows trailing dims differ: {a.shape} vs {b.shape}")
    return np.concatenate([a, b], axis=0)


def slice_rows(a, start: int, stop: int):
    if not (0 <= start <= stop <= a.shape[0]):
        raise ShapeError(f"row slice [{start}:{stop}] out of range for {a.shape}")
    return a[start:stop].copy()


def mean_all(a) -> float:
    return float(a.mean())


def mean_all_backward(d_out: float, a):
    return np.full_like(a, d_out / a.size)


# ---------------------------------------------------------------------------
# SKTN1 tensor serialization: magic "SKTN", u8 version, u8 dtype, u8 rank,
# rank x u64 little-endian dims, raw little-endian scalars.

_SKTN_MAGIC = b"SKTN"
_DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODE_FOR_KIND = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


def tensor_to_bytes(arr: np.ndarray) -> bytes:
    dt = np.dtype(arr.dtype)
    if dt not in _CODE_FOR_KIND:
        raise CheckpointError(f"unsupported tensor dtype {arr.dtype}")
    code = _CODE_FOR_KIND[dt]
    header = _SKTN_MAGIC + struct.pack("<BBB", 1, code, arr.ndim)
    dims = struct.pack(f"<{arr.ndim}Q", *arr.shape) if arr.ndim else b""
    payload = np.ascontiguousarray(arr).astype(_DTYPE_CODES[code]).tobytes()
    return header + dims + payload


def tensor_from_bytes(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Decode one SKTN1 record; returns (tensor, offset past the record)."""
    if buf[offset:offset + 4] != _SKTN_MAGIC:
        raise CheckpointError("bad tensor magic (expected SKTN)")
    version, code, rank = struct.unpack_from("<BBB", buf, offset + 4)
    if version != 1:
        raise CheckpointError(f"unsupported tensor format version {version}")
    if code not in _DTYPE_CODES:
        raise CheckpointError(f"unknown tensor dtype code {code}")
    pos = offset + 7
    dims = struct.unpack_from(f"<{rank}Q", buf, pos) if rank else ()
    pos += 8 * rank
    count = int(np.prod(dims)) if rank else 1
    dt = _DTYPE_CODES[code]
    nbytes = count * dt.itemsize
    if len(buf) < pos + nbytes:
        raise CheckpointError(
            f"truncated tensor payload: expected {nbytes} bytes, "
            f"found {len(buf) - pos}")
    arr = np.frombuffer(buf, dtype=dt, count=count, offset=pos).reshape(dims)
    return arr.copy(), pos + nbytes


def save_tensor(path, arr: np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(tensor_to_bytes(arr))


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        buf = fh.read()
    arr, end = tensor_from_bytes(buf)
    if end != len(buf):
        raise CheckpointError(f"{end} bytes decoded but file has {len(buf)}")
    return arr
