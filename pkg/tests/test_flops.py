import numpy as np
import pytest

from skipat import ModelConfig, init_params, with_skip
from skipat.config import vit_tiny
from skipat.flops import (analytic_flops, crossover_sweep, runtime_mac_count,
                          sweep_to_csv)
from skipat.rng import RngState, rand_uniform01
from skipat.vit import param_count

TOY = ModelConfig(image_size=16, patch_size=4, embed_dim=16, depth=4, heads=2,
                  num_classes=5)


def grid_configs():
    """Toy grid covering every phi kind and both skip schedule styles."""
    configs = {"vanilla": TOY,
               "depth0": ModelConfig(image_size=16, patch_size=4, embed_dim=16,
                                     depth=0, heads=2, num_classes=5),
               "nocls": ModelConfig(image_size=16, patch_size=4, embed_dim=16,
                                    depth=2, heads=2, num_classes=5,
                                    use_cls_token=False)}
    for kind in ("identity", "conv", "dwc", "skipat", "attn_reuse"):
        configs[f"{kind}-run"] = with_skip(TOY, skip_layers=(3, 4),
                                           phi_kind=kind, dwc_kernel=3)
        configs[f"{kind}-alt"] = with_skip(TOY, skip_layers=(2, 4),
                                           phi_kind=kind, dwc_kernel=3)
    configs["skipat-e05-shared"] = with_skip(
        TOY, skip_layers=(2, 3, 4), phi_kind="skipat", dwc_kernel=5,
        expansion=0.5, phi_shared=True)
    return configs


def test_analytic_equals_runtime_exactly_on_grid():
    for name, cfg in grid_configs().items():
        params = init_params(cfg, seed=0)
        image = rand_uniform01(RngState(1),
                               (cfg.in_channels, cfg.image_size,
                                cfg.image_size))
        analytic = analytic_flops(cfg)
        runtime = runtime_mac_count(cfg, params, image)
        assert len(analytic.entries) == len(runtime.entries), name
        for ea, er in zip(analytic.entries, runtime.entries):
            assert (ea.block, ea.kind, ea.macs) == (er.block, er.kind, er.macs), \
                f"{name}: {ea} vs {er}"
        assert analytic.total_macs == runtime.total_macs


def test_param_totals_equal_store_element_count():
    for name, cfg in grid_configs().items():
        params = init_params(cfg, seed=0)
        report = analytic_flops(cfg)
        assert report.total_params == sum(p.size for p in params.values()), name
        assert report.total_params == param_count(cfg), name


def test_vit_tiny_gmacs_near_published_values():
    vanilla = analytic_flops(vit_tiny()).total_macs / 1e9
    skipat = analytic_flops(with_skip(vit_tiny())).total_macs / 1e9
    assert abs(vanilla - 1.2) <= 0.12
    assert abs(skipat - 1.1) <= 0.11
    assert skipat < vanilla


def test_depth_zero_exact_value():
    cfg = ModelConfig(image_size=224, patch_size=16, embed_dim=192, depth=0,
                      heads=3, num_classes=1000)
    report = analytic_flops(cfg)
    # patch embed 196*192*768 plus head 192*1000
    assert report.total_macs == 29_093_376
    params = init_params(cfg, seed=0)
    image = rand_uniform01(RngState(0), (3, 224, 224))
    assert runtime_mac_count(cfg, params, image).total_macs == 29_093_376


def test_identity_skip_strictly_cheaper_and_monotone():
    base = vit_tiny()
    totals = []
    for count in range(0, 7):
        layers = tuple(range(3, 3 + count))
        cfg = base if count == 0 else with_skip(base, skip_layers=layers,
                                                phi_kind="identity")
        totals.append(analytic_flops(cfg).total_macs)
    assert all(a > b for a, b in zip(totals, totals[1:]))


def test_attn_reuse_layer_cheaper_than_full_msa():
    base = vit_tiny()
    reuse = with_skip(base, skip_layers=(3,), phi_kind="attn_reuse")
    a = {e.block: e for e in analytic_flops(base).entries}
    b = {e.block: e for e in analytic_flops(reuse).entries}
    assert b["layer03.msa"].kind == "attn_reuse_msa"
    assert b["layer03.msa"].macs < a["layer03.msa"].macs
    n_tok, d = base.num_tokens, base.embed_dim
    assert b["layer03.msa"].macs == 2 * n_tok * d * d + n_tok * n_tok * d


def test_phi_identity_blocks_report_zero_macs():
    cfg = with_skip(vit_tiny(), skip_layers=(3, 4), phi_kind="identity")
    report = analytic_flops(cfg)
    phi_entries = [e for e in report.entries if e.kind == "phi"]
    assert len(phi_entries) == 2
    assert all(e.macs == 0 for e in phi_entries)


def test_crossover_phi_linear_msa_quadratic():
    sweep = crossover_sweep(d=192, r=5, e=2.0, n_range=range(16, 512, 16))
    rows = sweep["rows"]
    # phi grows linearly: second differences vanish
    phi = [r["phi_macs"] for r in rows]
    msa = [r["msa_macs"] for r in rows]
    phi_diffs = {b - a for a, b in zip(phi, phi[1:])}
    assert len(phi_diffs) == 1
    msa_diffs = [b - a for a, b in zip(msa, msa[1:])]
    assert all(b > a for a, b in zip(msa_diffs, msa_diffs[1:]))


def test_crossover_point_for_vit_tiny_width():
    sweep = crossover_sweep(d=192, r=5, e=2.0, n_range=range(1, 300))
    # one skip block beats one attention block once 2n^2 d > r^2 n ed + dk:
    # n^2 > 25 n + k/2 with k=5 -> first integer n is 26
    assert sweep["crossover_n"] == 26
    at196 = next(r for r in sweep["rows"] if r["n"] == 196)
    assert at196["msa_macs"] > at196["phi_macs"]


def test_sweep_csv_shape():
    sweep = crossover_sweep(d=32, r=3, e=1.0, n_range=range(4, 20, 4))
    csv = sweep_to_csv(sweep)
    lines = csv.strip().splitlines()
    assert lines[0] == "n,msa_macs,phi_macs,phi_cheaper"
    assert len(lines) == 5


def test_report_json_and_text_render():
    report = analytic_flops(TOY)
    js = report.to_json(include_minor=True)
    import json
    parsed = json.loads(js)
    assert parsed["total_macs"] == report.total_macs
    assert all("minor_ops" in e for e in parsed["entries"])
    text = report.to_text()
    assert "GMACs" in text and "patch_embed" in text
