import numpy as np
import pytest

from rana_compress.adapters import DenseLinear, RankAdaptedLinear
from rana_compress.allocation import AllocationPlan, FlopAllocator, realize_layer
from rana_compress.bundle import (
    load_adapted_layer,
    load_manifest,
    load_model_bundle,
    load_plan,
    save_adapted_layer,
    split_search_logs,
    write_json,
    write_model_bundle,
)
from rana_compress.config import MaskerSettings
from rana_compress.decomposition import CalibrationSet, decompose, rank_contributions
from rana_compress.errors import BundleNotFoundError
from rana_compress.flop_model import dense_linear_flops
from rana_compress.toy import random_toy_mlp


def _plan(**layers):
    return AllocationPlan(
        toolkit_version="0.1.0", config_hash="x", seed=0, budget=0.5, grid_step=0.1, masker_kind="b", layers=layers
    )


def test_model_bundle_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    linear = DenseLinear(rng.standard_normal((6, 4)))
    mlp = random_toy_mlp(4, 8, seed=1)
    layers = {"proj": (linear, rng.standard_normal((4, 20))), "ffn": (mlp, rng.standard_normal((4, 30)))}

    write_model_bundle(tmp_path, layers, seed=3)
    manifest, loaded = load_model_bundle(tmp_path)

    assert manifest.seed == 3
    assert [layer.entry.kind for layer in loaded] == ["linear", "swiglu"]
    assert np.array_equal(loaded[0].target.weight, linear.weight)
    assert np.array_equal(loaded[1].target.gate, mlp.gate)
    assert loaded[1].calibration.sample_count == 30


def test_missing_bundle_and_plan(tmp_path):
    with pytest.raises(BundleNotFoundError):
        load_manifest(tmp_path)
    with pytest.raises(BundleNotFoundError):
        load_plan(tmp_path)


@pytest.mark.parametrize("masker_kind", ["b", "sigmoid"])
def test_adapted_layer_round_trip(tmp_path, masker_kind):
    rng = np.random.default_rng(2)
    weight = rng.standard_normal((12, 8))
    calib = CalibrationSet(rng.standard_normal((8, 300)))
    dec = decompose(weight, calib)
    alloc = FlopAllocator().line_search_layer(
        dec, rank_contributions(dec, calib), 0.5 * dense_linear_flops(12, 8).total, masker_kind=masker_kind
    )
    layer = realize_layer(dec, alloc, calib, MaskerSettings(epochs=3))
    plan = _plan(proj=alloc)

    entry = save_adapted_layer(tmp_path, "proj", "linear", layer)
    loaded = load_adapted_layer(tmp_path, entry, plan, DenseLinear(weight))

    assert isinstance(loaded, RankAdaptedLinear)
    x = rng.standard_normal((8, 10))
    assert np.allclose(loaded.forward_batch(x), layer.forward_batch(x))


def test_plan_json_round_trip_and_log_split(tmp_path):
    rng = np.random.default_rng(3)
    weight = rng.standard_normal((10, 6))
    calib = CalibrationSet(rng.standard_normal((6, 100)))
    dec = decompose(weight, calib)
    alloc = FlopAllocator().line_search_layer(dec, rank_contributions(dec, calib), 80.0, component="proj")
    plan = _plan(proj=alloc)

    data, logs = split_search_logs(plan)
    write_json(tmp_path / "plan.json", data)

    assert "search_log" not in data["layers"]["proj"]
    assert len(logs["proj"]) == len(alloc.search_log)
    assert load_plan(tmp_path).layers["proj"].threshold == alloc.threshold
    assert (tmp_path / "plan.json").read_text(encoding="utf-8").endswith("}\n")
