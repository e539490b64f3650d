"""Analytic cost model (MACs and parameters per block) plus a runtime counter.

"FLOPs" are reported as multiply-accumulates (1 MAC = 1 FLOP), the convention
under which the usual ViT-T/16 figure of ~1.2 G is reproduced. Elementwise and
normalization work is excluded from totals; an opt-in "minor ops" column
estimates it per block.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .config import ModelConfig
from .phi import eca_kernel_size
from .vit import census, forward_batch


@dataclass
class BlockCost:
    block: str
    kind: str  # patch_embed | msa | attn_reuse_msa | phi | mlp | head
    macs: int
    params: int
    minor_ops: int = 0


@dataclass
class FlopsReport:
    entries: list[BlockCost]
    config_fingerprint: str
    mac_convention: str = "1 MAC = 1 FLOP; elementwise/normalization excluded"

    @property
    def total_macs(self) -> int:
        return sum(e.macs for e in self.entries)

    @property
    def total_params(self) -> int:
        return sum(e.params for e in self.entries)

    def to_json(self, include_minor: bool = False) -> str:
        entries = []
        for e in self.entries:
            row = {"block": e.block, "kind": e.kind, "macs": e.macs,
                   "params": e.params}
            if include_minor:
                row["minor_ops"] = e.minor_ops
            entries.append(row)
        return json.dumps({
            "convention": self.mac_convention,
            "config_fingerprint": self.config_fingerprint,
            "entries": entries,
            "total_macs": self.total_macs,
            "total_gmacs": self.total_macs / 1e9,
            "total_params": self.total_params,
        }, indent=2)

    def to_text(self, include_minor: bool = False) -> str:
        header = f"{'block':<16} {'kind':<16} {'macs':>14} {'params':>12}"
        if include_minor:
            header += f" {'minor_ops':>12}"
        lines = [header, "-" * len(header)]
        for e in self.entries:
            row = f"{e.block:<16} {e.kind:<16} {e.macs:>14,} {e.params:>12,}"
            if include_minor:
                row += f" {e.minor_ops:>12,}"
            lines.append(row)
        lines.append("-" * len(header))
        lines.append(f"{'total':<33} {self.total_macs:>14,} "
                     f"{self.total_params:>12,}")
        lines.append(f"total: {self.total_macs / 1e9:.4f} GMACs, "
                     f"{self.total_params / 1e6:.3f} M params "
                     f"({self.mac_convention})")
        return "\n".join(lines)


def _param_subtotals(config: ModelConfig) -> dict[str, int]:
    """Census element counts grouped by report block id."""
    subtotals: dict[str, int] = {}
    shared_owner = min(config.skip_layers) if (
        config.phi_shared and config.skip_layers) else None
    for name, shape in census(config):
        count = int(np.prod(shape))
        if name.startswith(("patch_embed.", "pos_embed", "cls_token")):
            block = "patch_embed"
        elif name.startswith(("final_ln.", "head.")):
            block = "head"
        elif name.startswith("phi.shared."):
            block = f"layer{shared_owner:02d}.phi"
        else:
            layer = int(name.split(".")[1])
            if ".mlp." in name or ".ln2." in name:
                block = f"layer{layer:02d}.mlp"
            elif ".phi." in name:
                block = f"layer{layer:02d}.phi"
            elif config.is_skipped(layer) and config.phi_kind != "attn_reuse":
                block = f"layer{layer:02d}.phi"  # the layer's ln1
            else:
                block = f"layer{layer:02d}.msa"
        subtotals[block] = subtotals.get(block, 0) + count
    return subtotals


def _phi_macs(config: ModelConfig) -> int:
    c = config
    n, d, r = c.num_patches, c.embed_dim, c.dwc_kernel
    if c.phi_kind == "skipat":
        ed = c.phi_dim
        return 2 * n * d * ed + n * ed * r * r + d * eca_kernel_size(d)
    if c.phi_kind == "conv":
        return n * d * d * r * r
    if c.phi_kind == "dwc":
        return n * d * r * r
    return 0  # identity


def block_skeleton(config: ModelConfig) -> list[tuple[str, str]]:
    """(block id, kind) in forward order for this config."""
    blocks = [("patch_embed", "patch_embed")]
    for l in range(1, config.depth + 1):
        if config.is_skipped(l):
            if config.phi_kind == "attn_reuse":
                blocks.append((f"layer{l:02d}.msa", "attn_reuse_msa"))
            else:
                blocks.append((f"layer{l:02d}.phi", "phi"))
        else:
            blocks.append((f"layer{l:02d}.msa", "msa"))
        blocks.append((f"layer{l:02d}.mlp", "mlp"))
    blocks.append(("head", "head"))
    return blocks


def _minor_ops(kind: str, config: ModelConfig) -> int:
    """Rough elementwise tally (adds, exp/erf, divisions) per block."""
    c = config
    n_tok, d, n = c.num_tokens, c.embed_dim, c.num_patches
    ln = 8 * n_tok * d
    if kind == "patch_embed":
        return n * d + n_tok * d  # bias add + positional add
    if kind == "msa":
        softmax = 4 * c.heads * n_tok * n_tok
        return ln + 4 * n_tok * d + softmax + n_tok * d
    if kind == "attn_reuse_msa":
        return ln + 2 * n_tok * d + n_tok * d
    if kind == "phi":
        if c.phi_kind == "skipat":
            ed = c.phi_dim
            return 2 * 8 * n * ed + 2 * n * ed + n * d + 4 * d
        if c.phi_kind in ("conv", "dwc"):
            return n * d
        return 0
    if kind == "mlp":
        return ln + 8 * n_tok * c.mlp_dim + n_tok * c.mlp_dim + n_tok * d
    if kind == "head":
        return 8 * n_tok * d + c.num_classes
    return 0


def analytic_flops(config: ModelConfig) -> FlopsReport:
    """Closed-form per-block MACs and parameter counts for a configuration."""
    c = config
    n, n_tok, d = c.num_patches, c.num_tokens, c.embed_dim
    params = _param_subtotals(c)
    entries = []
    for block, kind in block_skeleton(c):
        if kind == "patch_embed":
            macs = n * d * c.patch_size ** 2 * c.in_channels
        elif kind == "msa":
            macs = 4 * n_tok * d * d + 2 * n_tok * n_tok * d
        elif kind == "attn_reuse_msa":
            macs = 2 * n_tok * d * d + n_tok * n_tok * d
        elif kind == "phi":
            macs = _phi_macs(c)
        elif kind == "mlp":
            macs = 2 * n_tok * d * c.mlp_dim
        else:  # head
            macs = d * c.num_classes
        entries.append(BlockCost(block=block, kind=kind, macs=macs,
                                 params=params.get(block, 0),
                                 minor_ops=_minor_ops(kind, c)))
    return FlopsReport(entries=entries, config_fingerprint=c.fingerprint())


def runtime_mac_count(config: ModelConfig, params: dict,
                      image: np.ndarray) -> FlopsReport:
    """Exact MACs executed by one forward pass, attributed to blocks."""
    counter = T.MacCounter()
    with T.mac_scope(counter):
        forward_batch(image[None], params, config)
    param_totals = _param_subtotals(config)
    entries = []
    for block, kind in block_skeleton(config):
        macs = counter.entries.get(block, {"macs": 0})["macs"]
        entries.append(BlockCost(block=block, kind=kind, macs=int(macs),
                                 params=param_totals.get(block, 0)))
    counted_blocks = set(counter.entries)
    known_blocks = {b for b, _ in block_skeleton(config)}
    stray = counted_blocks - known_blocks
    if stray:
        raise AssertionError(f"MACs counted outside known blocks: {stray}")
    return FlopsReport(entries=entries, config_fingerprint=config.fingerprint())


def crossover_sweep(d: int, r: int, e: float, n_range) -> dict:
    """Per-token-count MACs of one attention block vs one skip-function block.

    Both blocks are costed at the same token count n so the sweep exposes the
    structural scaling law (4nd^2 + 2n^2d, quadratic in n, against
    2nd*ed + r^2*n*ed + dk, linear in n) rather than the one-token CLS
    bookkeeping difference.
    """
    ed = max(1, int(np.ceil(e * d)))
    k = eca_kernel_size(d)
    rows = []
    crossover = None
    for n in n_range:
        msa = 4 * n * d * d + 2 * n * n * d
        phi = 2 * n * d * ed + n * ed * r * r + d * k
        rows.append({"n": int(n), "msa_macs": int(msa), "phi_macs": int(phi),
                     "phi_cheaper": phi < msa})
        if crossover is None and phi < msa:
            crossover = int(n)
    return {"d": d, "r": r, "expansion": e, "rows": rows,
            "crossover_n": crossover}


def sweep_to_csv(sweep: dict) -> str:
    lines = ["n,msa_macs,phi_macs,phi_cheaper"]
    for row in sweep["rows"]:
        lines.append(f"{row['n']},{row['msa_macs']},{row['phi_macs']},"
                     f"{int(row['phi_cheaper'])}")
    return "\n".join(lines) + "\n"
