import numpy as np
import pytest

from rana_compress.adapters import DenseLinear
from rana_compress.allocation import FlopAllocator
from rana_compress.config import MaskerSettings
from rana_compress.decomposition import CalibrationSet, ContributionStats, decompose, rank_contributions
from rana_compress.errors import InfeasibleBudgetError
from rana_compress.evaluation import (
    AdapterComparison,
    build_sparsity_histogram,
    compare_adapters,
    measure_layer_error,
    mlp_only_budget,
    normalized_contributions,
    toy_model_divergence,
)
from rana_compress.flop_model import dense_linear_flops, dense_mlp_flops
from rana_compress.toy import make_toy_transformer, token_sequences, train_toy_swiglu


def _stats(contributions):
    contributions = np.asarray(contributions, dtype=np.float64)
    return ContributionStats(
        contributions=contributions,
        rank_energy=contributions.mean(axis=1),
        output_energy=contributions.sum(axis=0),
    )


def _naive_histogram(values, edges):
    counts = [0] * (len(edges) - 1)
    for v in values:
        v = min(max(v, edges[0]), edges[-1])
        index = len(edges) - 2
        for j in range(len(edges) - 1):
            if edges[j] <= v < edges[j + 1]:
                index = j
                break
        counts[index] += 1
    return counts


@pytest.fixture(scope="module")
def toy_mlp():
    toy = train_toy_swiglu(d=16, h=32, samples=500, seed=1, steps=60)
    calib, held = CalibrationSet(toy.inputs).split(seed=0, holdout_fraction=0.2)
    return toy.mlp, calib, held


def test_identical_layer_has_zero_error():
    layer = DenseLinear(np.random.default_rng(0).standard_normal((5, 4)))
    x = np.random.default_rng(1).standard_normal((4, 30))

    report = measure_layer_error(layer, layer, x)

    assert report.mean_error == 0.0
    assert report.max_error == 0.0
    assert report.evaluated == 30


def test_zero_predictor_has_unit_error():
    weight = np.random.default_rng(2).standard_normal((5, 4))
    x = np.random.default_rng(3).standard_normal((4, 30))

    report = measure_layer_error(DenseLinear(weight), DenseLinear(np.zeros_like(weight)), x)

    assert report.mean_error == pytest.approx(1.0)
    assert report.median_error == pytest.approx(1.0)


def test_zero_reference_outputs_are_skipped(capsys):
    weight = np.random.default_rng(4).standard_normal((5, 4))
    x = np.random.default_rng(5).standard_normal((4, 6))
    x[:, 2] = 0.0

    report = measure_layer_error(DenseLinear(weight), DenseLinear(weight * 0.5), x)

    assert report.skipped == 1
    assert report.evaluated == 5
    assert report.mean_error == pytest.approx(0.25)
    assert "skipped 1 inputs" in capsys.readouterr().err


def test_histogram_of_equal_contributions():
    hist = build_sparsity_histogram(_stats(np.ones((4, 10))), bins=16)

    assert sum(hist.counts) == 40
    assert max(hist.counts) == 40
    assert hist.top_half_mass == pytest.approx(0.5)


def test_histogram_top_half_of_odd_rank_count_excludes_middle():
    hist = build_sparsity_histogram(_stats(np.ones((5, 10))), bins=16)

    assert hist.top_half_mass == pytest.approx(0.4)

    single = build_sparsity_histogram(_stats(np.ones((1, 4))), bins=4)
    assert single.top_half_mass == pytest.approx(1.0)


def test_histogram_of_one_dominant_rank():
    contributions = np.zeros((6, 12))
    contributions[np.arange(12) % 6, np.arange(12)] = 3.0

    hist = build_sparsity_histogram(_stats(contributions), bins=8)

    assert hist.top_half_mass == pytest.approx(1.0)
    assert sum(hist.counts) == hist.total_entries == 72


@pytest.mark.parametrize("scale", ["log", "linear"])
def test_histogram_matches_naive_binning(scale):
    rng = np.random.default_rng(6)
    weight = rng.standard_normal((12, 8))
    calib = CalibrationSet(rng.standard_normal((8, 100)))
    stats = rank_contributions(decompose(weight, calib), calib)

    hist = build_sparsity_histogram(stats, bins=32, scale=scale)
    values = normalized_contributions(stats).ravel()

    assert len(hist.counts) == 32
    assert hist.counts == _naive_histogram(values, hist.bin_edges)


def test_histogram_needs_two_bins():
    with pytest.raises(ValueError):
        build_sparsity_histogram(_stats(np.ones((2, 2))), bins=1)


@pytest.mark.parametrize("seed", range(5))
def test_oracle_topk_never_loses_to_fixed_svd(seed):
    rng = np.random.default_rng(seed)
    layer = DenseLinear(rng.standard_normal((12, 8)))
    calib = CalibrationSet(rng.standard_normal((8, 200)))
    held = rng.standard_normal((8, 100))
    budget = 0.5 * dense_linear_flops(12, 8).total

    table = compare_adapters(layer, 0.5, ["fixed_svd", "oracle_topk"], calib, held, seed=seed)

    fixed, oracle = table.row("fixed_svd"), table.row("oracle_topk")
    assert fixed.achieved_flops == oracle.achieved_flops <= budget
    assert oracle.mean_error <= fixed.mean_error + 1e-12


def test_linear_rows_at_full_budget():
    rng = np.random.default_rng(7)
    layer = DenseLinear(rng.standard_normal((10, 6)))
    calib = CalibrationSet(rng.standard_normal((6, 100)))
    held = rng.standard_normal((6, 40))

    table = compare_adapters(layer, 1.0, ["rana", "fixed_svd"], calib, held)

    assert table.row("rana").mean_error <= 1e-8
    assert table.row("rana").compression == 0.0
    assert table.row("fixed_svd").achieved_flops <= dense_linear_flops(10, 6).total


def test_llra_row_uses_sigmoid_masker():
    rng = np.random.default_rng(8)
    layer = DenseLinear(rng.standard_normal((12, 8)))
    calib = CalibrationSet(rng.standard_normal((8, 300)))
    held = rng.standard_normal((8, 60))
    allocator = FlopAllocator(masker=MaskerSettings(epochs=5))

    table = compare_adapters(layer, 0.6, ["llra"], calib, held, allocator=allocator)

    row = table.row("llra")
    assert row.feasible
    assert 0.0 <= row.mean_error
    assert row.achieved_flops is not None


def test_mlp_comparison_rows(toy_mlp):
    mlp, calib, held = toy_mlp
    budget = 0.5 * dense_mlp_flops(mlp.shape).total
    allocator = FlopAllocator(masker=MaskerSettings(epochs=5))

    table = compare_adapters(
        mlp, 0.5, ["rana", "cats", "neuron", "fixed_svd", "oracle_topk"], calib, held.x, allocator=allocator
    )

    assert [row.kind for row in table.rows] == ["rana", "cats", "neuron", "fixed_svd", "oracle_topk"]
    assert abs(table.row("rana").achieved_flops - budget) <= 0.01 * budget
    for kind in ("rana", "cats", "neuron", "fixed_svd"):
        row = table.row(kind)
        assert row.feasible, row.note
        assert np.isfinite(row.mean_error) and row.mean_error >= 0.0
        assert row.achieved_flops <= 1.05 * budget
    assert not table.row("oracle_topk").feasible


def test_cats_budget_below_gate_cost_is_reported(toy_mlp):
    mlp, calib, held = toy_mlp
    dense = dense_mlp_flops(mlp.shape).total

    row = AdapterComparison().mlp_row("cats", mlp, calib, held.x, 0.2 * dense, "mlp")

    assert not row.feasible
    assert "gate" in row.note


def test_mlp_only_budget():
    assert mlp_only_budget(0.0, 10.0, 30.0) == pytest.approx(1.0)
    assert mlp_only_budget(0.25, 10.0, 30.0) == pytest.approx((0.75 * 40 - 10) / 30)


def _toy_model():
    model = make_toy_transformer(blocks=1, width=8, vocab=16, seed=0)
    calib = token_sequences(model.vocab, 8, 12, seed=1)
    held = token_sequences(model.vocab, 3, 12, seed=2)
    return model, calib, held


def test_divergence_without_compression_is_zero():
    model, calib, held = _toy_model()

    report = toy_model_divergence(model, 0.0, calib, held)

    assert report.mean_relative_deviation <= 1e-8
    assert report.achieved_compression == 0.0


def test_divergence_under_compression():
    model, calib, held = _toy_model()

    report = toy_model_divergence(model, 0.5, calib, held, mode="mlp_qkv")

    assert report.mean_relative_deviation > 0.0
    assert len(report.block_errors) == 1
    assert report.achieved_compression >= 0.49


def test_mlp_only_mode_leaves_qkv_dense():
    model, calib, held = _toy_model()

    report = toy_model_divergence(model, 0.3, calib, held, mode="mlp_only")

    assert report.qkv_budget_fraction == 1.0
    assert 0.0 < report.mlp_budget_fraction < 0.7
    with pytest.raises(InfeasibleBudgetError):
        toy_model_divergence(model, 0.95, calib, held, mode="mlp_only")


@pytest.mark.parametrize("seed", range(4))
def test_qkv_and_mlp_split_drifts_no_more_than_mlp_only(seed):
    model = make_toy_transformer(blocks=1, width=8, vocab=16, seed=seed)
    calib = token_sequences(model.vocab, 16, 12, seed=seed + 1)

    both = toy_model_divergence(model, 0.3, calib, calib, mode="mlp_qkv")
    mlp_only = toy_model_divergence(model, 0.3, calib, calib, mode="mlp_only")

    assert both.block_errors[0] <= mlp_only.block_errors[0] + 1e-12
    assert len(both.qkv_fractions) == 1
    assert 0.0 < both.qkv_fractions[0] <= 1.0
    assert both.achieved_compression >= 0.29


@pytest.mark.parametrize("seed", range(3))
def test_divergence_grows_with_compression(seed):
    model = make_toy_transformer(blocks=1, width=8, vocab=16, seed=seed)
    calib = token_sequences(model.vocab, 12, 12, seed=seed + 1)

    deviations = [
        toy_model_divergence(model, c, calib, calib).mean_relative_deviation for c in (0.1, 0.3, 0.5)
    ]

    assert deviations == sorted(deviations)


def test_neuron_baseline_beats_dropping_the_mlp(toy_mlp):
    mlp, calib, held = toy_mlp
    allocator = FlopAllocator(masker=MaskerSettings(epochs=20))

    row = compare_adapters(mlp, 0.5, ["neuron"], calib, held.x, allocator=allocator).row("neuron")

    assert row.feasible, row.note
    assert row.mean_error < 1.0


def test_rana_matches_or_beats_mlp_baselines_in_most_seeds():
    allocator = FlopAllocator(masker=MaskerSettings(epochs=20))
    wins = 0
    for seed in range(50):
        toy = train_toy_swiglu(d=16, h=32, samples=300, seed=seed, steps=60)
        calib, held = CalibrationSet(toy.inputs).split(seed=seed, holdout_fraction=0.2)
        table = compare_adapters(toy.mlp, 0.5, ["rana", "cats", "neuron"], calib, held.x, seed=seed, allocator=allocator)
        rana = table.row("rana").mean_error
        baselines = [table.row(kind) for kind in ("cats", "neuron")]
        wins += all(not row.feasible or rana <= row.mean_error for row in baselines)

    assert wins >= 40
