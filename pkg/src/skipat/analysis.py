"""Representation-similarity analysis and attention-mass segmentation.

Linear centered kernel alignment between layer representations collected from
forward traces, cosine similarity of adjacent CLS attention maps, greedy
attention-mass masks, and Jaccard scoring of binary masks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .config import ModelConfig
from .errors import ConfigError, ShapeError
from .vit import ForwardTrace

CKA_TARGETS = ("attn_cls", "attn_all", "zmsa")


def linear_cka(x: np.ndarray, y: np.ndarray) -> float:
    """Linear CKA between sample-by-feature matrices x (m,p) and y (m,q).

    ||Y_c^T X_c||_F^2 / (||X_c^T X_c||_F * ||Y_c^T Y_c||_F) after column
    centering. Degenerate inputs (a zero denominator factor) score 1 when the
    two matrices are elementwise identical and 0 otherwise.
    """
    if x.ndim != 2 or y.ndim != 2:
        raise ShapeError(f"expected matrices, got {x.shape} and {y.shape}")
    if x.shape[0] != y.shape[0]:
        raise ShapeError(
            f"sample counts differ: {x.shape[0]} vs {y.shape[0]}")
    if x.shape[0] < 2:
        raise ShapeError("need at least 2 samples")
    xc = x - x.mean(axis=0, keepdims=True)
    yc = y - y.mean(axis=0, keepdims=True)
    cross = float(np.linalg.norm(yc.T @ xc) ** 2)
    nx = float(np.linalg.norm(xc.T @ xc))
    ny = float(np.linalg.norm(yc.T @ yc))
    if nx == 0.0 or ny == 0.0:
        same = x.shape == y.shape and np.array_equal(x, y)
        return 1.0 if same else 0.0
    return cross / (nx * ny)


@dataclass
class CkaMatrix:
    values: np.ndarray  # (L, L); NaN where a layer's representation is absent
    target: str
    sample_count: int
    config_fingerprint: str

    @property
    def depth(self) -> int:
        return self.values.shape[0]

    def to_csv(self) -> str:
        depth = self.depth
        lines = ["layer," + ",".join(str(i) for i in range(1, depth + 1))]
        for i in range(depth):
            cells = []
            for j in range(depth):
                v = self.values[i, j]
                cells.append("nan" if not np.isfinite(v) else f"{v:.9g}")
            lines.append(f"{i + 1}," + ",".join(cells))
        return "\n".join(lines) + "\n"

    def to_svg(self, cell: int = 28, margin: int = 34) -> str:
        """Standalone heatmap: blue-to-yellow linear colormap, grid, ticks."""
        depth = self.depth
        size = margin + depth * cell + 8

        def color(v: float) -> str:
            if not np.isfinite(v):
                return "rgb(180,180,180)"
            v = min(max(float(v), 0.0), 1.0)
            r = round(255 * v)
            g = round(255 * v)
            b = round(255 * (1.0 - v))
            return f"rgb({r},{g},{b})"

        parts = [
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" '
            f'height="{size}" font-family="monospace" font-size="10">',
            f'<title>linear CKA ({self.target}), {self.sample_count} samples'
            f'</title>',
        ]
        for i in range(depth):
            for j in range(depth):
                x = margin + j * cell
                y = margin + i * cell
                parts.append(
                    f'<rect x="{x}" y="{y}" width="{cell}" height="{cell}" '
                    f'fill="{color(self.values[i, j])}" stroke="white" '
                    f'stroke-width="1"/>')
        for i in range(depth):
            cx = margin + i * cell + cell // 2
            parts.append(f'<text x="{cx}" y="{margin - 6}" '
                         f'text-anchor="middle">{i + 1}</text>')
            cy = margin + i * cell + cell // 2 + 4
            parts.append(f'<text x="{margin - 6}" y="{cy}" '
                         f'text-anchor="end">{i + 1}</text>')
        parts.append("</svg>")
        return "\n".join(parts)


def _layer_representation(trace: ForwardTrace, layer_idx: int, target: str,
                          use_cls: bool) -> np.ndarray | None:
    rec = trace.layers[layer_idx]
    if target == "zmsa":
        return rec.zmsa.reshape(-1)
    if rec.attn is None:
        return None
    head_mean = rec.attn.mean(axis=0)  # (N, N)
    if target == "attn_cls":
        if not use_cls:
            raise ConfigError("attn_cls target needs a CLS token")
        return head_mean[0, 1:].copy()  # attention of CLS onto the n patches
    if target == "attn_all":
        if use_cls:
            head_mean = head_mean[1:, 1:]
        return head_mean.reshape(-1).copy()
    raise ConfigError(f"unknown CKA target {target!r} (choose from {CKA_TARGETS})")


def cka_matrix(traces: list[ForwardTrace], target: str,
               config: ModelConfig) -> CkaMatrix:
    """Layer-by-layer linear CKA over a batch of forward traces.

    Rows of each layer's design matrix are samples. Layers whose attention was
    never computed (skipped, non-reuse) yield NaN rows/columns for attention
    targets.
    """
    if target not in CKA_TARGETS:
        raise ConfigError(f"unknown CKA target {target!r} (choose from {CKA_TARGETS})")
    if len(traces) < 2:
        raise ConfigError("CKA needs at least 2 samples")
    depth = config.depth
    reps: list[np.ndarray | None] = []
    for layer_idx in range(depth):
        rows = [_layer_representation(t, layer_idx, target, config.use_cls_token)
                for t in traces]
        reps.append(None if any(r is None for r in rows)
                    else np.stack([r.astype(np.float64) for r in rows]))
    values = np.full((depth, depth), np.nan)
    for i in range(depth):
        if reps[i] is None:
            continue
        for j in range(i, depth):
            if reps[j] is None:
                continue
            v = linear_cka(reps[i], reps[j])
            values[i, j] = v
            values[j, i] = v
    return CkaMatrix(values=values, target=target, sample_count=len(traces),
                     config_fingerprint=config.fingerprint())


def adjacent_cosine(trace: ForwardTrace, use_cls: bool = True) -> list[float]:
    """Cosine similarity of consecutive layers' head-mean CLS attention rows.

    Zero-norm vectors score 0 by declaration.
    """
    vectors = []
    for idx, rec in enumerate(trace.layers):
        if rec.attn is None:
            raise ConfigError(
                f"layer {idx + 1} has no attention map; adjacent cosine needs "
                f"attention at every layer")
        head_mean = rec.attn.mean(axis=0)
        vectors.append(head_mean[0, 1:] if use_cls else head_mean.reshape(-1))
    out = []
    for a, b in zip(vectors, vectors[1:]):
        na, nb = float(np.linalg.norm(a)), float(np.linalg.norm(b))
        if na == 0.0 or nb == 0.0:
            out.append(0.0)
        else:
            out.append(float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0)))
    return out


@dataclass
class MaskResult:
    mask: np.ndarray  # boolean (sqrt(n), sqrt(n)) grid
    mass_kept: float
    source: str = ""


def mass_threshold_mask(attn_cls: np.ndarray, threshold: float,
                        source: str = "") -> MaskResult:
    """Smallest set of attention cells holding >= threshold of the total mass.

    Cells are taken in descending-weight order, ties broken by ascending
    token index; the mask is reshaped to the square patch grid.
    """
    a = np.asarray(attn_cls, dtype=np.float64).reshape(-1)
    if np.any(a < 0):
        raise ShapeError("attention weights must be nonnegative")
    total = float(a.sum())
    if total == 0.0:
        raise ShapeError("all-zero attention row has no mass to threshold")
    if not (0.0 < threshold <= 1.0):
        raise ConfigError(f"threshold must be in (0, 1], got {threshold}")
    side = math.isqrt(a.size)
    if side * side != a.size:
        raise ShapeError(f"attention length {a.size} is not a perfect square")
    order = np.argsort(-a, kind="stable")  # descending, ties by ascending index
    csum = np.cumsum(a[order])
    need = threshold * total * (1.0 - 1e-9)  # slack for float association
    take = int(np.searchsorted(csum, need) + 1)
    mask = np.zeros(a.size, dtype=bool)
    mask[order[:take]] = True
    return MaskResult(mask=mask.reshape(side, side),
                      mass_kept=float(csum[take - 1] / total), source=source)


def jaccard(pred: np.ndarray, gt: np.ndarray) -> float:
    """|P intersect G| / |P union G|; two empty masks count as identical."""
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise ShapeError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    union = int(np.logical_or(pred, gt).sum())
    if union == 0:
        return 1.0
    return int(np.logical_and(pred, gt).sum()) / union
