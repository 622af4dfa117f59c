"""
CPU masked matrix-vector product and its latency benchmark.

``y = sum_{j : mask_j = 1} v_j * M[:, j]``. The matrix is stored column-major so
each active column is a contiguous read, and inactive columns are never touched.
"""

import time
from dataclasses import dataclass
from typing import Iterable, Optional

import numpy as np
from numba import njit
from pydantic import BaseModel

from .errors import ShapeMismatchError
from .flop_model import FlopCounter

MIN_WARMUP = 10


@njit(cache=True)
def _masked_gemv_kernel(matrix, mask, vector, out):
    rows = matrix.shape[0]
    reads = 0
    for j in range(matrix.shape[1]):
        if mask[j] != 0:
            vj = vector[j]
            for r in range(rows):
                out[r] += vj * matrix[r, j]
            reads += 1
    return reads


@dataclass(frozen=True)
class MaskedGemvPlan:
    matrix: np.ndarray  # o x n, Fortran (column-major) order

    @classmethod
    def from_matrix(cls, matrix: np.ndarray) -> "MaskedGemvPlan":
        return cls(matrix=np.asfortranarray(matrix, dtype=np.float64))

    @property
    def shape(self) -> tuple[int, int]:
        return int(self.matrix.shape[0]), int(self.matrix.shape[1])

    def apply(
        self, mask: np.ndarray, vector: np.ndarray, counter: Optional[FlopCounter] = None
    ) -> np.ndarray:
        n = self.matrix.shape[1]
        if mask.shape[0] != n or vector.shape[0] != n:
            raise ShapeMismatchError(
                "mask and vector must match the matrix columns", (mask.shape[0], vector.shape[0]), self.shape
            )
        out = np.zeros(self.matrix.shape[0])
        reads = _masked_gemv_kernel(
            self.matrix,
            np.ascontiguousarray(mask != 0, dtype=np.uint8),
            np.ascontiguousarray(vector, dtype=np.float64),
            out,
        )
        if counter is not None:
            counter.columns_read += reads
        return out


def masked_gemv(
    matrix: np.ndarray,
    mask: np.ndarray,
    vector: np.ndarray,
    counter: Optional[FlopCounter] = None,
) -> np.ndarray:
    return MaskedGemvPlan.from_matrix(matrix).apply(
        np.asarray(mask), np.asarray(vector, dtype=np.float64), counter=counter
    )


class BenchRow(BaseModel):
    size: int
    density: float
    median_ns: float
    p10_ns: float
    p90_ns: float
    speedup: float


BENCH_FIELDS = ["size", "density", "median_ns", "p10_ns", "p90_ns", "speedup"]


def _random_mask(rng: np.random.Generator, n: int, density: float) -> np.ndarray:
    active = int(round(density * n))
    mask = np.zeros(n, dtype=np.uint8)
    mask[rng.permutation(n)[:active]] = 1
    return mask


def bench_masked_gemv(
    sizes: Iterable[int],
    densities: Iterable[float],
    repetitions: int = 50,
    warmup: int = MIN_WARMUP,
    seed: int = 0,
) -> list[BenchRow]:
    """
    Median and p10/p90 wall-clock latency per (size, density) on square matrices.
    Speedup is relative to density 1.0 at the same size, which is always measured.
    """
    if warmup < MIN_WARMUP:
        raise ValueError(f"at least {MIN_WARMUP} warmup iterations are required")
    rng = np.random.default_rng(seed)
    densities = sorted(set(float(d) for d in densities) | {1.0}, reverse=True)
    rows = []
    for size in sizes:
        plan = MaskedGemvPlan.from_matrix(rng.standard_normal((size, size)))
        vector = rng.standard_normal(size)
        timings = {}
        for density in densities:
            mask = _random_mask(rng, size, density)
            out = np.zeros(size)
            for _ in range(warmup):
                out[:] = 0.0
                _masked_gemv_kernel(plan.matrix, mask, vector, out)
            samples = np.empty(repetitions)
            for rep in range(repetitions):
                out[:] = 0.0
                start = time.perf_counter_ns()
                _masked_gemv_kernel(plan.matrix, mask, vector, out)
                samples[rep] = time.perf_counter_ns() - start
            timings[density] = samples
        dense_median = float(np.median(timings[1.0]))
        for density in densities:
            samples = timings[density]
            median = float(np.median(samples))
            rows.append(
                BenchRow(
                    size=size,
                    density=density,
                    median_ns=median,
                    p10_ns=float(np.percentile(samples, 10)),
                    p90_ns=float(np.percentile(samples, 90)),
                    speedup=1.0 if density == 1.0 else dense_median / median,
                )
            )
    return rows
