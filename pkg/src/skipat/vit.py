"""Vision transformer with optional attention-skip layers.

Pre-norm blocks: LN -> multi-head self-attention -> residual, then
LN -> MLP -> residual. At a skipped layer the attention branch is replaced by
the configured skip function applied to the previous layer's attention-branch
output (chained through contiguous skipped runs), or by reusing the previous
layer's attention matrix while still computing values and the output
projection.

The forward/backward engine is batched over images; the documented
single-image `forward` wraps it. Backward passes are composed explicitly from
the tensor-module contracts (no autodiff graph).
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass

import numpy as np

from . import phi as phi_mod
from . import tensor as T
from .config import PARAMETRIC_PHI_KINDS, ModelConfig
from .errors import ConfigError, ShapeError
from .rng import RngState, rand_trunc_normal

INIT_STD = 0.02


# ---------------------------------------------------------------------------
# Parameter census and initialization

def phi_prefix(config: ModelConfig, layer: int) -> str:
    return "phi.shared." if config.phi_shared else f"layers.{layer}.phi."


def census(config: ModelConfig) -> list[tuple[str, tuple]]:
    """Ordered (name, shape) list; a pure function of the configuration."""
    c = config
    d = c.embed_dim
    names: list[tuple[str, tuple]] = [
        ("patch_embed.weight", (c.patch_size ** 2 * c.in_channels, d)),
        ("patch_embed.bias", (d,)),
        ("pos_embed", (c.num_tokens, d)),
    ]
    if c.use_cls_token:
        names.append(("cls_token", (d,)))
    shared_emitted = False
    for l in range(1, c.depth + 1):
        pre = f"layers.{l}."
        names += [(pre + "ln1.gamma", (d,)), (pre + "ln1.beta", (d,))]
        if not c.is_skipped(l):
            for w in ("q", "k", "v", "o"):
                names += [(pre + f"attn.w{w}", (d, d)), (pre + f"attn.b{w}", (d,))]
        elif c.phi_kind == "attn_reuse":
            for w in ("v", "o"):
                names += [(pre + f"attn.w{w}", (d, d)), (pre + f"attn.b{w}", (d,))]
        elif c.phi_kind in PARAMETRIC_PHI_KINDS:
            if not (c.phi_shared and shared_emitted):
                prefix = phi_prefix(c, l)
                names += [(prefix + suffix, shape) for suffix, shape in
                          phi_mod.phi_param_names(c.phi_kind, d, c.phi_dim,
                                                  c.dwc_kernel)]
                shared_emitted = True
        names += [(pre + "ln2.gamma", (d,)), (pre + "ln2.beta", (d,))]
        names += [(pre + "mlp.fc1.weight", (d, c.mlp_dim)),
                  (pre + "mlp.fc1.bias", (c.mlp_dim,)),
                  (pre + "mlp.fc2.weight", (c.mlp_dim, d)),
                  (pre + "mlp.fc2.bias", (d,))]
    names += [("final_ln.gamma", (d,)), ("final_ln.beta", (d,)),
              ("head.weight", (d, c.num_classes)), ("head.bias", (c.num_classes,))]
    return names


def param_count(config: ModelConfig) -> int:
    return sum(int(np.prod(shape)) for _, shape in census(config))


def init_params(config: ModelConfig, seed: int = 0,
                dtype=np.float32) -> dict[str, np.ndarray]:
    """Fresh parameter store: truncated normal (std 0.02, +-2 sigma) for
    weights, zeros for biases, ones/zeros for layer norms."""
    rng = RngState(seed)
    params: dict[str, np.ndarray] = {}
    for name, shape in census(config):
        leaf = name.rsplit(".", 1)[-1]
        if leaf in ("bias", "beta", "bq", "bk", "bv", "bo"):
            params[name] = np.zeros(shape, dtype=dtype)
        elif leaf == "gamma":
            params[name] = np.ones(shape, dtype=dtype)
        else:
            params[name] = rand_trunc_normal(
                rng, shape, mean=0.0, std=INIT_STD,
                lo=-2.0 * INIT_STD, hi=2.0 * INIT_STD, dtype=dtype)
    return params


def check_params(params: dict, config: ModelConfig) -> None:
    for name, shape in census(config):
        if name not in params:
            raise ConfigError(f"missing parameter tensor {name!r}")
        if tuple(params[name].shape) != tuple(shape):
            raise ShapeError(
                f"parameter {name!r} has shape {params[name].shape}, "
                f"config requires {shape}")


# ---------------------------------------------------------------------------
# Traces

@dataclass
class LayerTrace:
    attn: np.ndarray | None  # (h, N, N); present unless the layer skipped MSA
    zmsa: np.ndarray         # attention-branch output (or its approximation)
    z: np.ndarray            # residual stream after the MLP block
    skipped: bool


@dataclass
class ForwardTrace:
    z0: np.ndarray
    layers: list[LayerTrace]
    logits: np.ndarray


def _block(block_id: str, kind: str):
    counter = T.current_counter()
    if counter is None:
        return contextlib.nullcontext()
    return counter.block(block_id, kind)


# ---------------------------------------------------------------------------
# Blocks

def _tokenize_batch(images: np.ndarray, params: dict, c: ModelConfig):
    b = images.shape[0]
    if images.shape[1:] != (c.in_channels, c.image_size, c.image_size):
        raise ShapeError(
            f"image batch {images.shape} does not match config "
            f"({c.in_channels}x{c.image_size}x{c.image_size})")
    g, p = c.grid_side, c.patch_size
    # (b, c, gi, pi, gj, pj) -> (b, gi, gj, pi, pj, c): patch pixels row-major,
    # channel last.
    patches = images.reshape(b, c.in_channels, g, p, g, p) \
        .transpose(0, 2, 4, 3, 5, 1) \
        .reshape(b, c.num_patches, p * p * c.in_channels)
    patches = np.ascontiguousarray(patches)
    flat = patches.reshape(b * c.num_patches, -1)
    with _block("patch_embed", "patch_embed"):
        emb = T.matmul(flat, params["patch_embed.weight"])
    emb = (emb + params["patch_embed.bias"]).reshape(b, c.num_patches, c.embed_dim)
    if c.use_cls_token:
        cls = np.broadcast_to(params["cls_token"], (b, 1, c.embed_dim))
        z = np.concatenate([cls.astype(emb.dtype), emb], axis=1)
    else:
        z = emb
    z = z + params["pos_embed"]
    return z, flat


def _tokenize_backward(dz: np.ndarray, flat: np.ndarray, c: ModelConfig,
                       grads: dict) -> None:
    _acc(grads, "pos_embed", dz.sum(axis=0))
    if c.use_cls_token:
        _acc(grads, "cls_token", dz[:, 0, :].sum(axis=0))
        demb = dz[:, 1:, :]
    else:
        demb = dz
    dflat = demb.reshape(flat.shape[0], -1)
    _acc(grads, "patch_embed.weight", flat.T @ dflat)
    _acc(grads, "patch_embed.bias", dflat.sum(axis=0))


def _split_heads(x: np.ndarray, h: int) -> np.ndarray:
    b, n, d = x.shape
    return np.ascontiguousarray(x.reshape(b, n, h, d // h).transpose(0, 2, 1, 3))


def _merge_heads(x: np.ndarray) -> np.ndarray:
    b, h, n, dh = x.shape
    return np.ascontiguousarray(x.transpose(0, 2, 1, 3)).reshape(b, n, h * dh)


def msa_forward(z: np.ndarray, params: dict, l: int, c: ModelConfig):
    """Attention branch of layer l; returns (branch output, A, cache)."""
    pre = f"layers.{l}."
    b, n, d = z.shape
    zn, ln_cache = T.layer_norm(z, params[pre + "ln1.gamma"], params[pre + "ln1.beta"])
    flat = zn.reshape(b * n, d)
    with _block(f"layer{l:02d}.msa", "msa"):
        q = (T.matmul(flat, params[pre + "attn.wq"]) + params[pre + "attn.bq"])
        k = (T.matmul(flat, params[pre + "attn.wk"]) + params[pre + "attn.bk"])
        v = (T.matmul(flat, params[pre + "attn.wv"]) + params[pre + "attn.bv"])
        qh = _split_heads(q.reshape(b, n, d), c.heads)
        kh = _split_heads(k.reshape(b, n, d), c.heads)
        vh = _split_heads(v.reshape(b, n, d), c.heads)
        scale = 1.0 / np.sqrt(c.head_dim)
        scores = T.matmul(qh, np.swapaxes(kh, -1, -2)) * z.dtype.type(scale)
        attn = T.softmax_rows(scores)
        merged = _merge_heads(T.matmul(attn, vh))
        out = (T.matmul(merged.reshape(b * n, d), params[pre + "attn.wo"])
               + params[pre + "attn.bo"]).reshape(b, n, d)
    cache = (ln_cache, zn, qh, kh, vh, attn, merged)
    return out, attn, cache


def msa_backward(dm: np.ndarray, dattn_extra, cache, params: dict, l: int,
                 c: ModelConfig, grads: dict) -> np.ndarray:
    pre = f"layers.{l}."
    ln_cache, zn, qh, kh, vh, attn, merged = cache
    b, n, d = dm.shape
    dm_flat = dm.reshape(b * n, d)
    _acc(grads, pre + "attn.wo", merged.reshape(b * n, d).T @ dm_flat)
    _acc(grads, pre + "attn.bo", dm_flat.sum(axis=0))
    dctx = _split_heads((dm_flat @ params[pre + "attn.wo"].T).reshape(b, n, d),
                        c.heads)
    dattn = np.matmul(dctx, np.swapaxes(vh, -1, -2))
    dvh = np.matmul(np.swapaxes(attn, -1, -2), dctx)
    if dattn_extra is not None:
        dattn = dattn + dattn_extra
    dscores = T.softmax_rows_backward(dattn, attn) * dm.dtype.type(
        1.0 / np.sqrt(c.head_dim))
    dqh = np.matmul(dscores, kh)
    dkh = np.matmul(np.swapaxes(dscores, -1, -2), qh)
    dzn_flat = np.zeros((b * n, d), dtype=dm.dtype)
    for name, dproj in (("q", dqh), ("k", dkh), ("v", dvh)):
        dflat = _merge_heads(dproj).reshape(b * n, d)
        _acc(grads, pre + f"attn.w{name}", zn.reshape(b * n, d).T @ dflat)
        _acc(grads, pre + f"attn.b{name}", dflat.sum(axis=0))
        dzn_flat += dflat @ params[pre + f"attn.w{name}"].T
    dz, dgamma, dbeta = T.layer_norm_backward(
        dzn_flat.reshape(b, n, d), ln_cache, params[pre + "ln1.gamma"])
    _acc(grads, pre + "ln1.gamma", dgamma)
    _acc(grads, pre + "ln1.beta", dbeta)
    return dz


def attn_reuse_forward(z: np.ndarray, attn_prev: np.ndarray, params: dict,
                       l: int, c: ModelConfig):
    """Attention branch that reuses a prior attention matrix; only the value
    projection, the A @ V product, and the output projection are computed."""
    if attn_prev is None:
        raise ConfigError(f"layer {l} reuses attention but none is available")
    pre = f"layers.{l}."
    b, n, d = z.shape
    zn, ln_cache = T.layer_norm(z, params[pre + "ln1.gamma"], params[pre + "ln1.beta"])
    flat = zn.reshape(b * n, d)
    with _block(f"layer{l:02d}.msa", "attn_reuse_msa"):
        v = (T.matmul(flat, params[pre + "attn.wv"]) + params[pre + "attn.bv"])
        vh = _split_heads(v.reshape(b, n, d), c.heads)
        merged = _merge_heads(T.matmul(attn_prev, vh))
        out = (T.matmul(merged.reshape(b * n, d), params[pre + "attn.wo"])
               + params[pre + "attn.bo"]).reshape(b, n, d)
    cache = (ln_cache, zn, vh, attn_prev, merged)
    return out, cache


def attn_reuse_backward(dm: np.ndarray, cache, params: dict, l: int,
                        c: ModelConfig, grads: dict):
    """Returns (dz, dattn) where dattn flows back to the attention provider."""
    pre = f"layers.{l}."
    ln_cache, zn, vh, attn_prev, merged = cache
    b, n, d = dm.shape
    dm_flat = dm.reshape(b * n, d)
    _acc(grads, pre + "attn.wo", merged.reshape(b * n, d).T @ dm_flat)
    _acc(grads, pre + "attn.bo", dm_flat.sum(axis=0))
    dctx = _split_heads((dm_flat @ params[pre + "attn.wo"].T).reshape(b, n, d),
                        c.heads)
    dattn = np.matmul(dctx, np.swapaxes(vh, -1, -2))
    dvh = np.matmul(np.swapaxes(attn_prev, -1, -2), dctx)
    dv_flat = _merge_heads(dvh).reshape(b * n, d)
    _acc(grads, pre + "attn.wv", zn.reshape(b * n, d).T @ dv_flat)
    _acc(grads, pre + "attn.bv", dv_flat.sum(axis=0))
    dzn = (dv_flat @ params[pre + "attn.wv"].T).reshape(b, n, d)
    dz, dgamma, dbeta = T.layer_norm_backward(dzn, ln_cache,
                                              params[pre + "ln1.gamma"])
    _acc(grads, pre + "ln1.gamma", dgamma)
    _acc(grads, pre + "ln1.beta", dbeta)
    return dz, dattn


def mlp_forward(z: np.ndarray, params: dict, l: int, c: ModelConfig):
    pre = f"layers.{l}."
    b, n, d = z.shape
    zn, ln_cache = T.layer_norm(z, params[pre + "ln2.gamma"], params[pre + "ln2.beta"])
    flat = zn.reshape(b * n, d)
    with _block(f"layer{l:02d}.mlp", "mlp"):
        x1 = T.matmul(flat, params[pre + "mlp.fc1.weight"]) + params[pre + "mlp.fc1.bias"]
        cdf = T.normal_cdf(x1)
        h = x1 * cdf
        out = (T.matmul(h, params[pre + "mlp.fc2.weight"])
               + params[pre + "mlp.fc2.bias"]).reshape(b, n, d)
    return out, (ln_cache, zn, x1, cdf, h)


def mlp_backward(dm: np.ndarray, cache, params: dict, l: int, c: ModelConfig,
                 grads: dict) -> np.ndarray:
    pre = f"layers.{l}."
    ln_cache, zn, x1, cdf, h = cache
    b, n, d = dm.shape
    dm_flat = dm.reshape(b * n, d)
    _acc(grads, pre + "mlp.fc2.weight", h.T @ dm_flat)
    _acc(grads, pre + "mlp.fc2.bias", dm_flat.sum(axis=0))
    dh = dm_flat @ params[pre + "mlp.fc2.weight"].T
    dx1 = T.gelu_backward(dh, x1, cdf)
    _acc(grads, pre + "mlp.fc1.weight", zn.reshape(b * n, d).T @ dx1)
    _acc(grads, pre + "mlp.fc1.bias", dx1.sum(axis=0))
    dzn = (dx1 @ params[pre + "mlp.fc1.weight"].T).reshape(b, n, d)
    dz, dgamma, dbeta = T.layer_norm_backward(dzn, ln_cache,
                                              params[pre + "ln2.gamma"])
    _acc(grads, pre + "ln2.gamma", dgamma)
    _acc(grads, pre + "ln2.beta", dbeta)
    return dz


# ---------------------------------------------------------------------------
# Whole-model forward / backward

def forward_batch(images: np.ndarray, params: dict, config: ModelConfig,
                  want_trace: bool = False, keep_cache: bool = False):
    """Run the model on an image batch.

    Returns (logits, traces, cache): `traces` is a per-sample list when
    `want_trace`, else None; `cache` feeds backward_batch when `keep_cache`.
    """
    c = config
    z, flat_patches = _tokenize_batch(images, params, c)
    z0 = z
    m_prev = None       # previous layer's attention-branch output
    attn_prev = None    # previous layer's attention matrix (real or reused)
    layer_caches = []
    trace_layers = []
    for l in range(1, c.depth + 1):
        if c.is_skipped(l) and c.phi_kind != "attn_reuse":
            if m_prev is None:
                raise ConfigError(f"skipped layer {l} has no provider output")
            prefix = phi_prefix(c, l)
            with _block(f"layer{l:02d}.phi", "phi"):
                m, cache = phi_mod.phi_forward(c.phi_kind, m_prev, params,
                                               prefix, c.use_cls_token)
            attn = None
            kind_tag = "phi"
        elif c.is_skipped(l):  # attn_reuse
            m, cache = attn_reuse_forward(z, attn_prev, params, l, c)
            attn = attn_prev
            kind_tag = "reuse"
        else:
            m, attn, cache = msa_forward(z, params, l, c)
            kind_tag = "msa"
        z_mid = z + m
        mlp_out, mlp_cache = mlp_forward(z_mid, params, l, c)
        z = z_mid + mlp_out
        if keep_cache:
            layer_caches.append((kind_tag, cache, mlp_cache))
        if want_trace:
            trace_layers.append((attn, m, z, c.is_skipped(l)))
        m_prev, attn_prev = m, attn
    zf, ln_cache = T.layer_norm(z, params["final_ln.gamma"], params["final_ln.beta"])
    pooled = zf[:, 0, :] if c.use_cls_token else zf.mean(axis=1)
    with _block("head", "head"):
        logits = T.matmul(pooled, params["head.weight"]) + params["head.bias"]

    traces = None
    if want_trace:
        traces = []
        for i in range(images.shape[0]):
            layers = [LayerTrace(attn=None if a is None else a[i].copy(),
                                 zmsa=m[i].copy(), z=zz[i].copy(), skipped=sk)
                      for (a, m, zz, sk) in trace_layers]
            traces.append(ForwardTrace(z0=z0[i].copy(), layers=layers,
                                       logits=logits[i].copy()))
    cache = None
    if keep_cache:
        cache = {"flat_patches": flat_patches, "layers": layer_caches,
                 "final_ln": ln_cache, "zf": zf, "pooled": pooled}
    return logits, traces, cache


def backward_batch(dlogits: np.ndarray, cache: dict, params: dict,
                   config: ModelConfig) -> dict[str, np.ndarray]:
    """Vector-Jacobian pass over a cached forward; returns parameter grads."""
    c = config
    grads: dict[str, np.ndarray] = {}
    b = dlogits.shape[0]
    n = c.num_tokens
    _acc(grads, "head.weight", cache["pooled"].T @ dlogits)
    _acc(grads, "head.bias", dlogits.sum(axis=0))
    dpooled = dlogits @ params["head.weight"].T
    dzf = np.zeros((b, n, c.embed_dim), dtype=dlogits.dtype)
    if c.use_cls_token:
        dzf[:, 0, :] = dpooled
    else:
        dzf += dpooled[:, None, :] / dlogits.dtype.type(n)
    dz, dgamma, dbeta = T.layer_norm_backward(dzf, cache["final_ln"],
                                              params["final_ln.gamma"])
    _acc(grads, "final_ln.gamma", dgamma)
    _acc(grads, "final_ln.beta", dbeta)

    pending_dm: dict[int, np.ndarray] = {}
    pending_dattn: dict[int, np.ndarray] = {}
    for l in range(c.depth, 0, -1):
        kind_tag, branch_cache, mlp_cache = cache["layers"][l - 1]
        dz_mid = dz + mlp_backward(dz, mlp_cache, params, l, c, grads)
        dm = dz_mid
        if l in pending_dm:
            dm = dm + pending_dm.pop(l)
        dz = dz_mid  # residual path to the previous layer's stream
        if kind_tag == "phi":
            prefix = phi_prefix(c, l)
            dm_prev = phi_mod.phi_backward(c.phi_kind, dm, branch_cache,
                                           params, prefix, grads,
                                           c.use_cls_token)
            _merge_pending(pending_dm, l - 1, dm_prev)
        elif kind_tag == "reuse":
            dz_contrib, dattn = attn_reuse_backward(dm, branch_cache, params,
                                                    l, c, grads)
            if l in pending_dattn:
                dattn = dattn + pending_dattn.pop(l)
            _merge_pending(pending_dattn, l - 1, dattn)
            dz = dz + dz_contrib
        else:
            dattn_extra = pending_dattn.pop(l, None)
            dz = dz + msa_backward(dm, dattn_extra, branch_cache, params, l,
                                   c, grads)
    if pending_dm or pending_dattn:
        raise AssertionError("unconsumed skip gradients; schedule is broken")
    _tokenize_backward(dz, cache["flat_patches"], c, grads)
    return grads


def forward(image: np.ndarray, params: dict, config: ModelConfig,
            want_trace: bool = False):
    """Single-image forward: returns logits (num_classes,) and optionally the
    per-layer trace."""
    logits, traces, _ = forward_batch(image[None], params, config,
                                      want_trace=want_trace)
    return (logits[0], traces[0]) if want_trace else (logits[0], None)


# -- single-sample block wrappers (documented contracts) --------------------

def tokenize(image: np.ndarray, params: dict, config: ModelConfig) -> np.ndarray:
    z, _ = _tokenize_batch(image[None], params, config)
    return z[0]


def msa_block(z: np.ndarray, params: dict, layer: int, config: ModelConfig):
    out, attn, _ = msa_forward(z[None], params, layer, config)
    return out[0], attn[0]


def mlp_block(z: np.ndarray, params: dict, layer: int, config: ModelConfig):
    out, _ = mlp_forward(z[None], params, layer, config)
    return out[0]


def _acc(grads: dict, name: str, value: np.ndarray) -> None:
    if name in grads:
        grads[name] = grads[name] + value
    else:
        grads[name] = value


def _merge_pending(pending: dict, key: int, value: np.ndarray) -> None:
    if key in pending:
        pending[key] = pending[key] + value
    else:
        pending[key] = value
