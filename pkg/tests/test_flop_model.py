import numpy as np
import pytest

from rana_compress.flop_model import (
    FlopCount,
    MlpShape,
    compression_rate,
    compression_table,
    dense_linear_flops,
    dense_mlp_flops,
    fixed_svd_flops,
    mlp_flops,
    neuron_threshold_flops,
    rank_adapted_flops,
)


def _naive_gemv_ops(o, i):
    ops = 0
    y = np.zeros(o)
    w = np.ones((o, i))
    x = np.ones(i)
    for r in range(o):
        for c in range(i):
            y[r] += w[r, c] * x[c]
            ops += 2
    return ops


def test_dense_linear_flops():
    assert dense_linear_flops(4, 3).total == 24
    assert dense_linear_flops(1, 1).total == 2
    assert dense_linear_flops(7, 5).total == _naive_gemv_ops(7, 5)


def test_dense_linear_rejects_empty_shape():
    with pytest.raises(ValueError):
        dense_linear_flops(0, 3)


def test_rank_adapted_worked_example():
    flops = rank_adapted_flops(10, 100, 10, 2)

    assert flops.breakdown == {"b_product": 200.0, "masker": 20.0, "a_product": 400.0}
    assert flops.total == 620
    assert dense_linear_flops(100, 10).total == 2000


def test_full_rank_adapter_saves_nothing():
    o, i = 12, 8
    assert rank_adapted_flops(8, o, i, 8).total >= dense_linear_flops(o, i).total


def test_zero_active_costs_only_the_masker():
    flops = rank_adapted_flops(6, 10, 4, 0)
    assert flops.total == 2 * 6 * 4 + 2 * 6


def test_sigmoid_masker_flops():
    flops = rank_adapted_flops(6, 10, 4, 3, masker_kind="sigmoid", inner_dim=2)

    assert flops.breakdown["masker"] == 2 * 2 * 4 + 2 * 6 * 2 + 6
    assert flops.breakdown["b_product"] == 2 * 3 * 4
    assert flops.breakdown["a_product"] == 2 * 10 * 3
    with pytest.raises(ValueError):
        rank_adapted_flops(6, 10, 4, 3, masker_kind="sigmoid")


def test_expected_active_must_fit_kept_ranks():
    with pytest.raises(ValueError):
        rank_adapted_flops(4, 10, 10, 5)


def test_flop_count_addition_merges_breakdown():
    total = FlopCount.of(a=1, b=2) + FlopCount.of(b=3)
    assert total.breakdown == {"a": 1.0, "b": 5.0}
    assert total.total == 6.0


def test_flop_count_rejects_inconsistent_total():
    with pytest.raises(ValueError):
        FlopCount(total=10.0, breakdown={"a": 1.0, "b": 2.0})
    assert FlopCount(total=3.0, breakdown={"a": 1.0, "b": 2.0}).total == 3.0
    assert FlopCount(total=5.0).total == 5.0


def test_dense_mlp_breakdown():
    swiglu = dense_mlp_flops(MlpShape(d=4, h=8))
    gelu = dense_mlp_flops(MlpShape(d=4, h=8, kind="gelu"))

    assert swiglu.total == 3 * 2 * 4 * 8 + 8 + 8
    assert gelu.total == 2 * 2 * 4 * 8 + 8
    assert set(swiglu.breakdown) == {"up.dense", "gate.dense", "down.dense", "activation", "product"}


def test_dense_components_compress_nothing():
    shape = MlpShape(d=4, h=8)
    part = dense_linear_flops(8, 4)
    adapted = mlp_flops(shape, up=part, gate=part, down=dense_linear_flops(4, 8))

    assert compression_rate(adapted, dense_mlp_flops(shape)) == 0.0
    with pytest.raises(ValueError):
        mlp_flops(shape, up=part, down=part)


def test_neuron_threshold_and_fixed_svd():
    assert neuron_threshold_flops(4, 8, 3).total == 3 * 8 + 2 * 4 * 3
    assert fixed_svd_flops(2, 6, 5).total == 2 * 2 * 5 + 2 * 6 * 2


def test_compression_table_rows():
    mlp = [(FlopCount.of(x=50.0), FlopCount.of(x=100.0))]
    qkv = [(FlopCount.of(x=30.0), FlopCount.of(x=40.0))]

    table = compression_table(mlp, qkv)

    assert [row.scope for row in table.rows] == ["total", "mlp", "qkv"]
    assert table.row("mlp").compression == pytest.approx(0.5)
    assert table.row("qkv").compression == pytest.approx(0.25)
    assert table.row("total").compression == pytest.approx(1 - 80 / 140)

    with_census = compression_table(mlp, qkv, model_flop_census=60.0)
    assert with_census.row("total").compression == pytest.approx(1 - 140 / 200)
