"""
Activation-aware low-rank factorisation of a linear layer.

Given a layer ``W`` (o x i) and calibration inputs ``X`` (i x k, one sample per
column), ``A`` holds the leading left singular vectors of ``W X`` and
``B = Aᵀ W``. Truncating both to ``r`` ranks gives the rank-``r`` map that best
reproduces the layer's outputs on the calibration set.

Activations are used as given; the toolkit does not normalise ``X``.
"""

import sys
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import DecompositionError, ShapeMismatchError
from .tensor_core import (
    DEFAULT_RANK_CUTOFF,
    as_matrix,
    left_singular_vectors,
    matmul,
    numerical_rank,
)

# Number of calibration samples used per layer when collecting activations
DEFAULT_CALIBRATION_SAMPLES = 32_000

ORTHONORMALITY_TOLERANCE = 1e-8


@dataclass(frozen=True)
class CalibrationSet:
    x: np.ndarray  # i x k, each column one observed input

    def __post_init__(self):
        object.__setattr__(self, "x", as_matrix(self.x, "calibration inputs"))

    @property
    def width(self) -> int:
        return int(self.x.shape[0])

    @property
    def sample_count(self) -> int:
        return int(self.x.shape[1])

    def columns(self, index: np.ndarray) -> "CalibrationSet":
        return CalibrationSet(self.x[:, index])

    def split(self, seed: int, holdout_fraction: float = 0.2) -> tuple["CalibrationSet", "CalibrationSet"]:
        """Seeded shuffle into (calibration, held-out) parts."""
        k = self.sample_count
        order = np.random.default_rng(seed).permutation(k)
        held = int(round(k * holdout_fraction))
        held = min(max(held, 1), k - 1) if k > 1 else 0
        if held == 0:
            return self, self
        return self.columns(np.sort(order[held:])), self.columns(np.sort(order[:held]))


@dataclass(frozen=True)
class RankDecomposition:
    a: np.ndarray  # o x D, orthonormal columns
    b: np.ndarray  # D x i, equal to aᵀ weight
    singular_values: np.ndarray  # D, descending
    weight: np.ndarray  # the o x i layer the factors were built from
    dropped_ranks: int = 0
    notes: list[str] = field(default_factory=list)

    @property
    def kept_ranks(self) -> int:
        return int(self.a.shape[1])

    @property
    def source_shape(self) -> tuple[int, int]:
        return int(self.weight.shape[0]), int(self.weight.shape[1])

    def truncate(self, ranks: int) -> "RankDecomposition":
        if ranks < 1 or ranks > self.kept_ranks:
            raise ValueError(f"cannot truncate {self.kept_ranks} ranks to {ranks}")
        return RankDecomposition(
            a=self.a[:, :ranks],
            b=self.b[:ranks, :],
            singular_values=self.singular_values[:ranks],
            weight=self.weight,
            dropped_ranks=self.dropped_ranks,
            notes=list(self.notes),
        )


@dataclass(frozen=True)
class ContributionStats:
    contributions: np.ndarray  # D x k, entry (j, s) = (B x_s)_j ** 2
    rank_energy: np.ndarray  # D, mean contribution of each rank over samples
    output_energy: np.ndarray  # k, ||W x_s||^2 of the original layer

    @property
    def rank_count(self) -> int:
        return int(self.contributions.shape[0])

    @property
    def sample_count(self) -> int:
        return int(self.contributions.shape[1])

    def truncate(self, ranks: int) -> "ContributionStats":
        return ContributionStats(
            contributions=self.contributions[:ranks, :],
            rank_energy=self.rank_energy[:ranks],
            output_energy=self.output_energy,
        )


def decompose(
    weight: np.ndarray,
    calib: CalibrationSet,
    keep_ranks: Optional[int] = None,
    rank_cutoff: float = DEFAULT_RANK_CUTOFF,
) -> RankDecomposition:
    weight = as_matrix(weight, "weight")
    o, i = weight.shape
    if calib.width != i:
        raise ShapeMismatchError(
            "calibration width does not match the layer input", weight.shape, calib.x.shape
        )
    max_ranks = min(o, i)
    if keep_ranks is None:
        keep_ranks = max_ranks
    if keep_ranks < 1 or keep_ranks > max_ranks:
        raise ValueError(f"keep_ranks must be in [1, {max_ranks}], got {keep_ranks}")
    if not np.any(calib.x):
        raise DecompositionError("calibration has no signal")

    outputs = matmul(weight, calib.x)
    u, s = left_singular_vectors(outputs)
    rank = numerical_rank(s, rank_cutoff)
    if rank == 0:
        raise DecompositionError("calibration has no signal")

    notes = []
    kept = min(keep_ranks, rank)
    dropped = keep_ranks - kept
    if dropped:
        note = (
            f"dropped {dropped} ranks with singular values below "
            f"{rank_cutoff:g} x sigma_max"
        )
        notes.append(note)
        print(f"Warning: {note}", file=sys.stderr)

    a = np.ascontiguousarray(u[:, :kept])
    b = matmul(a.T, weight)
    deviation = np.max(np.abs(a.T @ a - np.eye(kept)))
    if deviation > ORTHONORMALITY_TOLERANCE:
        raise DecompositionError(
            f"left singular vectors are not orthonormal (max deviation {deviation:.2e})"
        )
    return RankDecomposition(
        a=a,
        b=b,
        singular_values=s[:kept].copy(),
        weight=weight,
        dropped_ranks=dropped,
        notes=notes,
    )


def rank_contributions(dec: RankDecomposition, calib: CalibrationSet) -> ContributionStats:
    """Per-sample output energy carried by each rank, ``(B x)_j ** 2``."""
    if calib.width != dec.b.shape[1]:
        raise ShapeMismatchError(
            "calibration width does not match the decomposition", dec.b.shape, calib.x.shape
        )
    projected = matmul(dec.b, calib.x)
    contributions = projected**2
    outputs = matmul(dec.weight, calib.x)
    return ContributionStats(
        contributions=contributions,
        rank_energy=contributions.mean(axis=1),
        output_energy=np.sum(outputs**2, axis=0),
    )


def truncation_residual(dec: RankDecomposition, calib: CalibrationSet, ranks: int) -> float:
    """``||W X - A_r B_r X||_F^2`` for the first ``ranks`` ranks."""
    part = dec.truncate(ranks)
    outputs = matmul(dec.weight, calib.x)
    approx = matmul(part.a, matmul(part.b, calib.x))
    return float(np.sum((outputs - approx) ** 2))
