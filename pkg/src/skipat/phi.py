"""Approximations of the attention-block output at skipped layers.

The full parametric variant maps the previous layer's attention-branch output
through FC1 -> GeLU -> depthwise conv over the patch grid -> GeLU -> FC2 ->
efficient channel attention, with the CLS row bypassed untouched. Lighter
variants (identity, one full conv, depthwise conv only) and the
attention-matrix reuse mode live here too, together with the skip schedule.

Forward functions return (output, cache); the matching *_backward consumes the
cache and writes parameter gradients into a dict keyed like the parameter
store.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from . import tensor as T
from .config import ModelConfig
from .errors import ConfigError, ShapeError


def eca_kernel_size(d_channels: int) -> int:
    """Adaptive odd 1D-conv length for `d_channels` channels.

    Nearest odd integer to (log2(C) + 1) / 2, ties rounded up, minimum 1.
    """
    if d_channels < 1:
        raise ValueError("channel count must be >= 1")
    v = (math.log2(d_channels) + 1.0) / 2.0
    lower = 2 * math.floor((v - 1.0) / 2.0) + 1
    upper = lower + 2
    k = upper if (v - lower) >= (upper - v) else lower
    return max(1, k)


def phi_param_names(kind: str, d: int, phi_dim: int, r: int) -> list[tuple[str, tuple]]:
    """(suffix, shape) pairs for one skip-function instance."""
    if kind == "skipat":
        k = eca_kernel_size(d)
        return [
            ("fc1.weight", (d, phi_dim)),
            ("fc1.bias", (phi_dim,)),
            ("dwc.kernels", (phi_dim, r, r)),
            ("dwc.bias", (phi_dim,)),
            ("fc2.weight", (phi_dim, d)),
            ("fc2.bias", (d,)),
            ("eca.kernel", (k,)),
        ]
    if kind == "conv":
        return [("conv.weight", (d, d, r, r)), ("conv.bias", (d,))]
    if kind == "dwc":
        return [("dwc.kernels", (d, r, r)), ("dwc.bias", (d,))]
    return []  # identity / attn_reuse are parameter-free


# ---------------------------------------------------------------------------
# Skip schedule

@dataclass(frozen=True)
class SkipSchedule:
    """Skipped layer indices and, per skipped layer, its input provider.

    The provider of layer l is always layer l-1's attention-branch output;
    `real` records whether that output was genuinely computed (True) or is
    itself an approximation from a contiguous skipped run (False).
    """

    skipped: tuple[int, ...]
    providers: dict[int, tuple[int, bool]]

    def provider(self, layer: int) -> tuple[int, bool]:
        return self.providers[layer]


def build_schedule(config: ModelConfig) -> SkipSchedule:
    skipped = config.skip_layers
    providers = {}
    for l in skipped:
        if l - 1 < 1:
            raise ConfigError(f"skipped layer {l} would need a layer-0 provider")
        providers[l] = (l - 1, (l - 1) not in skipped)
    return SkipSchedule(skipped=skipped, providers=providers)


# ---------------------------------------------------------------------------
# Efficient channel attention

def _eca_core(x: np.ndarray, kernel: np.ndarray):
    """Gate (b, n, d) tokens per channel; returns (out, cache)."""
    k = kernel.shape[0]
    if k % 2 == 0:
        raise ShapeError(f"channel-attention kernel must be odd, got {k}")
    b, n, d = x.shape
    gap = x.mean(axis=1)  # (b, d)
    pad = (k - 1) // 2
    gp = np.zeros((b, d + k - 1), dtype=x.dtype)
    gp[:, pad:pad + d] = gap
    conv = np.zeros((b, d), dtype=x.dtype)
    for i in range(k):
        conv += gp[:, i:i + d] * kernel[i]
    T._count(b * d * k)
    gate = T.sigmoid(conv)
    out = x * gate[:, None, :]
    return out, (x, gp, gate)


def _eca_core_backward(d_out: np.ndarray, cache, kernel: np.ndarray):
    x, gp, gate = cache
    b, n, d = x.shape
    k = kernel.shape[0]
    pad = (k - 1) // 2
    dx = d_out * gate[:, None, :]
    dgate = (d_out * x).sum(axis=1)  # (b, d)
    dconv = dgate * gate * (1.0 - gate)
    dk = np.zeros_like(kernel)
    dgp = np.zeros_like(gp)
    for i in range(k):
        dk[i] = (gp[:, i:i + d] * dconv).sum()
        dgp[:, i:i + d] += dconv * kernel[i]
    dgap = dgp[:, pad:pad + d]
    dx += dgap[:, None, :] / x.dtype.type(n)
    return dx, dk


def eca(x: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Channel gating of an (n, d) token matrix: GAP over tokens, 1D conv
    across channels, sigmoid, per-channel multiply. Gate is shared by all
    tokens of a channel."""
    out, _ = _eca_core(x[None], kernel)
    return out[0]


# ---------------------------------------------------------------------------
# Grid helpers: token matrices are patch-major with channels last, so the
# (b, n, c) <-> (b, side, side, c) conversion is a pure reshape.

def _tokens_to_grid(p: np.ndarray, side: int) -> np.ndarray:
    b, n, c = p.shape
    return p.reshape(b, side, side, c)


def _grid_to_tokens(g: np.ndarray) -> np.ndarray:
    b, side, _, c = g.shape
    return g.reshape(b, side * side, c)


def _split_cls(m: np.ndarray, use_cls: bool):
    if use_cls:
        return m[:, :1, :], m[:, 1:, :]
    return None, m


def _join_cls(cls_rows, patches):
    if cls_rows is None:
        return patches
    return np.concatenate([cls_rows, patches], axis=1)


def _require_square(n: int) -> int:
    side = math.isqrt(n)
    if side * side != n:
        raise ShapeError(f"patch count {n} is not a perfect square")
    return side


# ---------------------------------------------------------------------------
# Phi variants (batched cores + single-sample convenience wrappers)

def phi_skipat_forward(m_prev: np.ndarray, p: dict, prefix: str, use_cls: bool):
    cls_rows, patches = _split_cls(m_prev, use_cls)
    b, n, d = patches.shape
    side = _require_square(n)
    w1, b1 = p[prefix + "fc1.weight"], p[prefix + "fc1.bias"]
    kern, kb = p[prefix + "dwc.kernels"], p[prefix + "dwc.bias"]
    w2, b2 = p[prefix + "fc2.weight"], p[prefix + "fc2.bias"]
    ek = p[prefix + "eca.kernel"]
    ed = w1.shape[1]

    flat = np.ascontiguousarray(patches).reshape(b * n, d)
    x1 = T.matmul(flat, w1) + b1
    cdf1 = T.normal_cdf(x1)
    grid = _tokens_to_grid((x1 * cdf1).reshape(b, n, ed), side)
    kern_cl = np.ascontiguousarray(kern.transpose(1, 2, 0))  # (r, r, ed)
    x2, xp = T.depthwise_conv2d_cl(grid, kern_cl, kb)
    cdf2 = T.normal_cdf(x2)
    h2 = _grid_to_tokens(x2 * cdf2).reshape(b * n, ed)
    y = (T.matmul(h2, w2) + b2).reshape(b, n, d)
    out, eca_cache = _eca_core(y, ek)
    cache = (cls_rows, flat, x1, cdf1, xp, x2, cdf2, h2, eca_cache, side)
    return _join_cls(cls_rows, out), cache


def phi_skipat_backward(d_out: np.ndarray, cache, p: dict, prefix: str,
                        grads: dict, use_cls: bool) -> np.ndarray:
    cls_rows, flat, x1, cdf1, xp, x2, cdf2, h2, eca_cache, side = cache
    w1 = p[prefix + "fc1.weight"]
    kern = p[prefix + "dwc.kernels"]
    w2 = p[prefix + "fc2.weight"]
    ek = p[prefix + "eca.kernel"]
    d_cls, d_patches = _split_cls(d_out, use_cls)
    b, n, d = d_patches.shape

    dy, dek = _eca_core_backward(d_patches, eca_cache, ek)
    _accumulate(grads, prefix + "eca.kernel", dek)
    dy_flat = dy.reshape(b * n, d)
    dw2, db2 = h2.T @ dy_flat, dy_flat.sum(axis=0)
    _accumulate(grads, prefix + "fc2.weight", dw2)
    _accumulate(grads, prefix + "fc2.bias", db2)
    dh2 = dy_flat @ w2.T

    ed = x2.shape[-1]
    dx2 = T.gelu_backward(_tokens_to_grid(dh2.reshape(b, n, ed), side), x2,
                          cdf2)
    kern_cl = np.ascontiguousarray(kern.transpose(1, 2, 0))
    dgrid, dkern_cl, dkb = T.depthwise_conv2d_cl_backward(dx2, xp, kern_cl)
    _accumulate(grads, prefix + "dwc.kernels", dkern_cl.transpose(2, 0, 1))
    _accumulate(grads, prefix + "dwc.bias", dkb)

    dh1 = _grid_to_tokens(dgrid).reshape(b * n, ed)
    dx1 = T.gelu_backward(dh1, x1, cdf1)
    dw1, db1 = flat.T @ dx1, dx1.sum(axis=0)
    _accumulate(grads, prefix + "fc1.weight", dw1)
    _accumulate(grads, prefix + "fc1.bias", db1)
    d_flat = dx1 @ w1.T
    return _join_cls(d_cls, d_flat.reshape(b, n, d))


def _im2col(grid: np.ndarray, r: int):
    """(b, g, g, c) -> column matrix (b*g*g, r*r*c) with zero 'same' padding.

    Column order per output pixel is (di, dj, channel)."""
    b, g, _, c = grid.shape
    pad = (r - 1) // 2
    gp = np.zeros((b, g + r - 1, g + r - 1, c), dtype=grid.dtype)
    gp[:, pad:pad + g, pad:pad + g, :] = grid
    win = np.lib.stride_tricks.sliding_window_view(gp, (r, r), axis=(1, 2))
    cols = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3))
    return cols.reshape(b * g * g, r * r * c)


def _col2im(dcols: np.ndarray, b: int, c: int, g: int, r: int) -> np.ndarray:
    pad = (r - 1) // 2
    dgp = np.zeros((b, g + r - 1, g + r - 1, c), dtype=dcols.dtype)
    dview = dcols.reshape(b, g, g, r, r, c)
    for di in range(r):
        for dj in range(r):
            dgp[:, di:di + g, dj:dj + g, :] += dview[:, :, :, di, dj, :]
    return dgp[:, pad:pad + g, pad:pad + g, :]


def phi_conv_forward(m_prev: np.ndarray, p: dict, prefix: str, use_cls: bool):
    cls_rows, patches = _split_cls(m_prev, use_cls)
    b, n, d = patches.shape
    side = _require_square(n)
    w, bias = p[prefix + "conv.weight"], p[prefix + "conv.bias"]
    r = w.shape[-1]
    cols = _im2col(_tokens_to_grid(np.ascontiguousarray(patches), side), r)
    wmat = w.transpose(2, 3, 1, 0).reshape(r * r * d, d)  # (di, dj, c) rows
    out = (T.matmul(cols, wmat) + bias).reshape(b, n, d)
    return _join_cls(cls_rows, out), (cls_rows, cols, side, r)


def phi_conv_backward(d_out: np.ndarray, cache, p: dict, prefix: str,
                      grads: dict, use_cls: bool) -> np.ndarray:
    cls_rows, cols, side, r = cache
    w = p[prefix + "conv.weight"]
    d = w.shape[0]
    d_cls, d_patches = _split_cls(d_out, use_cls)
    b, n, _ = d_patches.shape
    dflat = np.ascontiguousarray(d_patches).reshape(b * n, d)
    wmat = w.transpose(2, 3, 1, 0).reshape(r * r * d, d)
    dwmat = cols.T @ dflat
    _accumulate(grads, prefix + "conv.weight",
                dwmat.reshape(r, r, d, d).transpose(3, 2, 0, 1))
    _accumulate(grads, prefix + "conv.bias", dflat.sum(axis=0))
    dcols = dflat @ wmat.T
    dgrid = _col2im(dcols, b, d, side, r)
    return _join_cls(d_cls, _grid_to_tokens(dgrid))


def phi_dwc_forward(m_prev: np.ndarray, p: dict, prefix: str, use_cls: bool):
    cls_rows, patches = _split_cls(m_prev, use_cls)
    b, n, d = patches.shape
    side = _require_square(n)
    kern, kb = p[prefix + "dwc.kernels"], p[prefix + "dwc.bias"]
    kern_cl = np.ascontiguousarray(kern.transpose(1, 2, 0))
    grid = _tokens_to_grid(np.ascontiguousarray(patches), side)
    out, xp = T.depthwise_conv2d_cl(grid, kern_cl, kb)
    return _join_cls(cls_rows, _grid_to_tokens(out)), (cls_rows, xp, side)


def phi_dwc_backward(d_out: np.ndarray, cache, p: dict, prefix: str,
                     grads: dict, use_cls: bool) -> np.ndarray:
    cls_rows, xp, side = cache
    kern = p[prefix + "dwc.kernels"]
    kern_cl = np.ascontiguousarray(kern.transpose(1, 2, 0))
    d_cls, d_patches = _split_cls(d_out, use_cls)
    dgrid, dkern_cl, dkb = T.depthwise_conv2d_cl_backward(
        _tokens_to_grid(np.ascontiguousarray(d_patches), side), xp, kern_cl)
    _accumulate(grads, prefix + "dwc.kernels", dkern_cl.transpose(2, 0, 1))
    _accumulate(grads, prefix + "dwc.bias", dkb)
    return _join_cls(d_cls, _grid_to_tokens(dgrid))


def phi_identity_forward(m_prev: np.ndarray, p: dict, prefix: str, use_cls: bool):
    return m_prev, None


def phi_identity_backward(d_out: np.ndarray, cache, p: dict, prefix: str,
                          grads: dict, use_cls: bool) -> np.ndarray:
    return d_out


_PHI_FORWARD = {
    "skipat": phi_skipat_forward,
    "conv": phi_conv_forward,
    "dwc": phi_dwc_forward,
    "identity": phi_identity_forward,
}
_PHI_BACKWARD = {
    "skipat": phi_skipat_backward,
    "conv": phi_conv_backward,
    "dwc": phi_dwc_backward,
    "identity": phi_identity_backward,
}


def phi_forward(kind: str, m_prev: np.ndarray, p: dict, prefix: str, use_cls: bool):
    return _PHI_FORWARD[kind](m_prev, p, prefix, use_cls)


def phi_backward(kind: str, d_out: np.ndarray, cache, p: dict, prefix: str,
                 grads: dict, use_cls: bool) -> np.ndarray:
    return _PHI_BACKWARD[kind](d_out, cache, p, prefix, grads, use_cls)


def _accumulate(grads: dict, name: str, value: np.ndarray) -> None:
    if name in grads:
        grads[name] = grads[name] + value
    else:
        grads[name] = value


# -- single-sample convenience wrappers (the documented per-token-matrix form)

def phi_skipat(zmsa_prev: np.ndarray, p: dict, prefix: str = "",
               use_cls: bool = True) -> np.ndarray:
    out, _ = phi_skipat_forward(zmsa_prev[None], p, prefix, use_cls)
    return out[0]


def phi_conv(zmsa_prev: np.ndarray, p: dict, prefix: str = "",
             use_cls: bool = True) -> np.ndarray:
    out, _ = phi_conv_forward(zmsa_prev[None], p, prefix, use_cls)
    return out[0]


def phi_dwc(zmsa_prev: np.ndarray, p: dict, prefix: str = "",
            use_cls: bool = True) -> np.ndarray:
    out, _ = phi_dwc_forward(zmsa_prev[None], p, prefix, use_cls)
    return out[0]


def phi_identity(zmsa_prev: np.ndarray) -> np.ndarray:
    return zmsa_prev
