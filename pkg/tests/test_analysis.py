import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from skipat import ModelConfig, init_params, forward_batch
from skipat.analysis import (CkaMatrix, adjacent_cosine, cka_matrix, jaccard,
                             linear_cka, mass_threshold_mask)
from skipat.errors import ConfigError, ShapeError
from skipat.rng import RngState, rand_normal, rand_uniform01
from skipat.vit import ForwardTrace, LayerTrace

RNG = np.random.default_rng(77)


# ---------------------------------------------------------------------------
# linear CKA

def test_cka_self_similarity_is_one():
    x = RNG.normal(size=(10, 5))
    assert abs(linear_cka(x, x) - 1.0) < 1e-6


def test_cka_isotropic_scaling_invariance():
    x = RNG.normal(size=(8, 4))
    y = RNG.normal(size=(8, 6))
    base = linear_cka(x, y)
    assert abs(linear_cka(x, 3.0 * x) - 1.0) < 1e-6
    for alpha, beta in [(2.0, 0.5), (-1.5, 4.0), (1e-3, 1e3)]:
        assert abs(linear_cka(alpha * x, beta * y) - base) < 1e-6


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_cka_orthogonal_transform_invariance(seed):
    gen = np.random.default_rng(seed)
    x = gen.normal(size=(9, 4))
    q, _ = np.linalg.qr(gen.normal(size=(4, 4)))
    assert abs(linear_cka(x, x @ q) - 1.0) < 1e-6


def test_cka_hand_computed_value():
    x = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
    y = np.array([[1.0], [0.0], [1.0]])
    # direct formula with exact fractions: (5/9) / sqrt((10/9)*(4/9)) = 5/sqrt(40)
    assert abs(linear_cka(x, y) - 5.0 / np.sqrt(40.0)) < 1e-12


def test_cka_zero_denominator_policy():
    const = np.ones((4, 3))
    other = RNG.normal(size=(4, 2))
    assert linear_cka(const, const) == 1.0    # X == Y elementwise
    assert linear_cka(const, other) == 0.0    # degenerate and different
    with pytest.raises(ShapeError):
        linear_cka(RNG.normal(size=(4, 2)), RNG.normal(size=(5, 2)))
    with pytest.raises(ShapeError):
        linear_cka(np.ones((1, 2)), np.ones((1, 2)))  # single sample


# ---------------------------------------------------------------------------
# cka_matrix over traces

TOY = ModelConfig(image_size=16, patch_size=4, embed_dim=16, depth=3, heads=2,
                  num_classes=4)


def toy_traces(cfg=TOY, samples=8, seed=0):
    params = init_params(cfg, seed=seed)
    images = rand_uniform01(RngState(seed + 1),
                            (samples, cfg.in_channels, cfg.image_size,
                             cfg.image_size))
    _, traces, _ = forward_batch(images, params, cfg, want_trace=True)
    return traces


@pytest.mark.parametrize("target,rep_len", [
    ("attn_cls", 16), ("attn_all", 256), ("zmsa", 17 * 16)])
def test_cka_matrix_matches_pairwise_oracle(target, rep_len):
    traces = toy_traces()
    matrix = cka_matrix(traces, target, TOY)
    assert matrix.values.shape == (3, 3)
    assert matrix.sample_count == 8

    def rep(trace, layer):
        rec = trace.layers[layer]
        if target == "zmsa":
            return rec.zmsa.reshape(-1)
        mean = rec.attn.mean(axis=0)
        if target == "attn_cls":
            return mean[0, 1:]
        return mean[1:, 1:].reshape(-1)

    for i in range(3):
        for j in range(3):
            x = np.stack([rep(t, i) for t in traces]).astype(np.float64)
            y = np.stack([rep(t, j) for t in traces]).astype(np.float64)
            assert x.shape[1] == rep_len if i == j else True
            assert abs(matrix.values[i, j] - linear_cka(x, y)) < 1e-6


def test_cka_matrix_symmetric_unit_diagonal_in_range():
    matrix = cka_matrix(toy_traces(), "zmsa", TOY)
    v = matrix.values
    assert np.allclose(v, v.T, atol=1e-6)
    assert np.allclose(np.diag(v), 1.0, atol=1e-6)
    assert np.all(v >= 0.0) and np.all(v <= 1.0 + 1e-6)


def test_cka_matrix_identical_samples_defined_entries_are_one():
    traces = toy_traces(samples=2)
    traces[1] = traces[0]  # duplicate sample
    matrix = cka_matrix(traces, "zmsa", TOY)
    # centering kills every design matrix; entries follow the X==Y policy
    assert np.allclose(np.diag(matrix.values), 1.0)
    off = matrix.values[~np.eye(3, dtype=bool)]
    assert set(np.unique(off)) <= {0.0, 1.0}


def test_cka_matrix_requires_two_samples():
    with pytest.raises(ConfigError):
        cka_matrix(toy_traces(samples=1), "zmsa", TOY)


def test_cka_matrix_marks_skipped_layers_absent():
    from skipat import with_skip
    cfg = with_skip(TOY, skip_layers=(2,), phi_kind="identity")
    traces = toy_traces(cfg=cfg, samples=4)
    matrix = cka_matrix(traces, "attn_cls", cfg)
    assert np.isnan(matrix.values[1]).all()
    assert np.isnan(matrix.values[:, 1]).all()
    assert np.isfinite(matrix.values[0, 2])
    zm = cka_matrix(traces, "zmsa", cfg)
    assert np.isfinite(zm.values).all()


# ---------------------------------------------------------------------------
# adjacent cosine

def fake_trace(cls_rows):
    """Trace with given per-layer CLS attention rows (single head)."""
    layers = []
    n = cls_rows[0].shape[0]
    for row in cls_rows:
        attn = np.zeros((1, n + 1, n + 1))
        attn[0, 0, 1:] = row
        layers.append(LayerTrace(attn=attn, zmsa=np.zeros((n + 1, 2)),
                                 z=np.zeros((n + 1, 2)), skipped=False))
    return ForwardTrace(z0=np.zeros((n + 1, 2)), layers=layers,
                        logits=np.zeros(2))


def test_adjacent_cosine_identical_maps():
    row = np.array([0.4, 0.3, 0.2, 0.1])
    assert adjacent_cosine(fake_trace([row, row])) == [1.0]


def test_adjacent_cosine_orthogonal_one_hot():
    a = np.array([1.0, 0.0, 0.0, 0.0])
    b = np.array([0.0, 1.0, 0.0, 0.0])
    assert adjacent_cosine(fake_trace([a, b])) == [0.0]


def test_adjacent_cosine_random_pair_oracle():
    a = np.array([0.1, 0.5, 0.2, 0.2])
    b = np.array([0.3, 0.1, 0.4, 0.2])
    dot = sum(x * y for x, y in zip(a, b))
    expect = dot / (np.sqrt(sum(x * x for x in a)) * np.sqrt(sum(y * y for y in b)))
    got = adjacent_cosine(fake_trace([a, b]))[0]
    assert abs(got - expect) < 1e-12


def test_adjacent_cosine_zero_vector_scores_zero():
    a = np.zeros(4)
    b = np.array([0.5, 0.5, 0.0, 0.0])
    assert adjacent_cosine(fake_trace([a, b])) == [0.0]


def test_adjacent_cosine_needs_attention():
    trace = fake_trace([np.ones(4), np.ones(4)])
    trace.layers[1].attn = None
    with pytest.raises(ConfigError):
        adjacent_cosine(trace)


# ---------------------------------------------------------------------------
# mass thresholding

def test_mass_mask_analytically_forced_case():
    result = mass_threshold_mask(np.array([0.5, 0.3, 0.1, 0.1]), 0.8)
    assert result.mask.shape == (2, 2)
    assert result.mask.reshape(-1).tolist() == [True, True, False, False]
    assert abs(result.mass_kept - 0.8) < 1e-9


def test_mass_mask_uniform_selects_all():
    result = mass_threshold_mask(np.array([0.25, 0.25, 0.25, 0.25]), 0.8)
    assert result.mask.all()
    assert abs(result.mass_kept - 1.0) < 1e-12


def test_mass_mask_threshold_one_selects_positive_cells_only():
    result = mass_threshold_mask(np.array([0.6, 0.0, 0.4, 0.0]), 1.0)
    assert result.mask.reshape(-1).tolist() == [True, False, True, False]


def test_mass_mask_tie_break_by_ascending_index():
    result = mass_threshold_mask(np.array([0.25, 0.25, 0.25, 0.25]), 0.5)
    assert result.mask.reshape(-1).tolist() == [True, True, False, False]


def test_mass_mask_monotone_in_threshold():
    a = rand_normal(RngState(3), (16,), dtype=np.float64) ** 2
    prev = np.zeros(16, dtype=bool)
    for thr in (0.1, 0.3, 0.5, 0.7, 0.9, 1.0):
        mask = mass_threshold_mask(a, thr).mask.reshape(-1)
        assert np.all(prev <= mask)  # raising threshold never drops a cell
        prev = mask


def test_mass_mask_rejects_all_zero():
    with pytest.raises(ShapeError):
        mass_threshold_mask(np.zeros(4), 0.8)


# ---------------------------------------------------------------------------
# jaccard

def test_jaccard_identical_nonempty():
    m = np.array([[True, False], [True, True]])
    assert jaccard(m, m) == 1.0


def test_jaccard_disjoint():
    a = np.array([[True, False], [False, False]])
    b = np.array([[False, True], [False, False]])
    assert jaccard(a, b) == 0.0


def test_jaccard_one_third():
    a = np.array([True, True, False, False])
    b = np.array([False, True, True, False])
    assert jaccard(a, b) == pytest.approx(1.0 / 3.0)


def test_jaccard_both_empty_is_one():
    z = np.zeros((2, 2), dtype=bool)
    assert jaccard(z, z) == 1.0


def test_jaccard_dim_mismatch():
    with pytest.raises(ShapeError):
        jaccard(np.zeros((2, 2), bool), np.zeros((2, 3), bool))


# ---------------------------------------------------------------------------
# export formats

def test_cka_csv_layout():
    values = np.array([[1.0, 0.5], [0.5, 1.0]])
    matrix = CkaMatrix(values=values, target="zmsa", sample_count=4,
                       config_fingerprint="deadbeef")
    lines = matrix.to_csv().strip().splitlines()
    assert lines[0] == "layer,1,2"
    assert lines[1].startswith("1,1,") or lines[1].startswith("1,1.0")
    cells = lines[2].split(",")
    assert cells[0] == "2" and float(cells[1]) == 0.5


def test_cka_csv_nine_significant_digits():
    values = np.array([[1.0, 0.123456789123], [0.123456789123, 1.0]])
    matrix = CkaMatrix(values=values, target="zmsa", sample_count=4,
                       config_fingerprint="deadbeef")
    assert "0.123456789" in matrix.to_csv()


def test_cka_svg_smoke():
    values = np.array([[1.0, np.nan], [np.nan, 1.0]])
    matrix = CkaMatrix(values=values, target="attn_cls", sample_count=2,
                       config_fingerprint="deadbeef")
    svg = matrix.to_svg()
    assert svg.startswith("<svg") and svg.endswith("</svg>")
    assert svg.count("<rect") == 4
    assert "rgb(255,255,0)" in svg  # value 1.0 maps to yellow
    assert "rgb(180,180,180)" in svg  # NaN cells are gray
