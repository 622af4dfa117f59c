import os

import numpy as np
import pytest

from rana_compress.errors import ShapeMismatchError
from rana_compress.flop_model import FlopCounter
from rana_compress.kernels import MaskedGemvPlan, bench_masked_gemv, masked_gemv


def test_full_mask_equals_dense_gemv():
    rng = np.random.default_rng(0)
    m = rng.standard_normal((9, 7))
    v = rng.standard_normal(7)

    assert np.allclose(masked_gemv(m, np.ones(7), v), m @ v, atol=1e-12)


def test_zero_mask_reads_nothing():
    counter = FlopCounter()
    out = masked_gemv(np.ones((4, 5)), np.zeros(5), np.ones(5), counter=counter)

    assert np.array_equal(out, np.zeros(4))
    assert counter.columns_read == 0


def test_sparse_mask_matches_dense_oracle():
    rng = np.random.default_rng(1)
    m = rng.standard_normal((512, 512))
    v = rng.standard_normal(512)
    mask = (rng.random(512) < 0.25).astype(np.uint8)
    counter = FlopCounter()

    out = MaskedGemvPlan.from_matrix(m).apply(mask, v, counter=counter)

    assert np.allclose(out, m @ (mask * v), atol=1e-12, rtol=0)
    assert counter.columns_read == int(mask.sum())


def test_mask_length_must_match():
    with pytest.raises(ShapeMismatchError):
        masked_gemv(np.ones((3, 4)), np.ones(3), np.ones(4))


def test_bench_reports_unit_speedup_at_full_density():
    rows = bench_masked_gemv(sizes=[32], densities=[0.5], repetitions=5, warmup=10, seed=0)

    assert {row.density for row in rows} == {1.0, 0.5}
    dense = next(row for row in rows if row.density == 1.0)
    assert dense.speedup == 1.0
    assert all(row.p10_ns <= row.median_ns <= row.p90_ns for row in rows)


def test_bench_requires_warmup():
    with pytest.raises(ValueError):
        bench_masked_gemv(sizes=[8], densities=[1.0], warmup=2)


@pytest.mark.skipif(not os.getenv("RANA_SLOW_TESTS"), reason="timing test; set RANA_SLOW_TESTS=1")
def test_sparse_gemv_is_faster_at_full_size():
    rows = bench_masked_gemv(sizes=[4096], densities=[0.5, 0.25, 0.1], repetitions=30, warmup=10, seed=0)

    by_density = {row.density: row for row in rows}
    assert by_density[0.1].speedup >= 3.0
    medians = [by_density[d].median_ns for d in (1.0, 0.5, 0.25, 0.1)]
    assert medians == sorted(medians, reverse=True)
