"""
FLOP accounting for dense layers, rank adapters, neuron thresholding and whole
MLP / QKV blocks.

Convention: one multiply-add is 2 FLOPs; comparisons, absolute values and
elementwise activations are 1 FLOP each.
"""

import math
from typing import Dict, Iterable, Literal, Optional

from pydantic import BaseModel, Field, model_validator

MaskerKind = Literal["b", "sigmoid", "none", "dense"]
MlpKind = Literal["swiglu", "gelu", "relu"]


class FlopCount(BaseModel):
    total: float = 0.0
    breakdown: Dict[str, float] = Field(default_factory=dict)

    @model_validator(mode="after")
    def _total_matches_breakdown(self):
        if not self.breakdown:
            return self
        parts = sum(self.breakdown.values())
        if not math.isclose(parts, self.total, rel_tol=1e-9, abs_tol=1e-9):
            raise ValueError(f"total {self.total} disagrees with its breakdown, which sums to {parts}")
        return self

    @classmethod
    def of(cls, **parts: float) -> "FlopCount":
        breakdown = {name: float(value) for name, value in parts.items()}
        return cls(total=sum(breakdown.values()), breakdown=breakdown)

    def prefixed(self, prefix: str) -> "FlopCount":
        return FlopCount.of(
            **{f"{prefix}.{name}": value for name, value in self.breakdown.items()}
        )

    def __add__(self, other: "FlopCount") -> "FlopCount":
        merged = dict(self.breakdown)
        for name, value in other.breakdown.items():
            merged[name] = merged.get(name, 0.0) + value
        return FlopCount.of(**merged)


def combine(counts: Iterable[FlopCount]) -> FlopCount:
    result = FlopCount()
    for count in counts:
        result = result + count
    return result


class FlopCounter:
    """Accumulates executed FLOPs (and column reads) when forwards run instrumented."""

    def __init__(self):
        self.breakdown: Dict[str, float] = {}
        self.columns_read = 0

    def add(self, component: str, flops: float):
        self.breakdown[component] = self.breakdown.get(component, 0.0) + float(flops)

    def as_flop_count(self) -> FlopCount:
        return FlopCount.of(**self.breakdown)


class MlpShape(BaseModel):
    d: int = Field(gt=0, description="model (input/output) width")
    h: int = Field(gt=0, description="hidden width")
    kind: MlpKind = "swiglu"

    @property
    def gated(self) -> bool:
        return self.kind == "swiglu"


def dense_linear_flops(o: int, i: int) -> FlopCount:
    if o < 1 or i < 1:
        raise ValueError(f"invalid layer shape ({o}, {i})")
    return FlopCount.of(dense=2 * o * i)


def b_masker_cost(d_kept: int, i: int) -> float:
    """Cost of deciding a B-mask: computing Bx plus squaring and comparing each rank."""
    return 2.0 * d_kept * i + 2.0 * d_kept


def rank_adapted_flops(
    d_kept: int,
    o: int,
    i: int,
    expected_active: float,
    masker_kind: MaskerKind = "b",
    inner_dim: Optional[int] = None,
) -> FlopCount:
    if expected_active < 0 or expected_active > d_kept:
        raise ValueError(
            f"expected active ranks {expected_active} outside [0, {d_kept}]"
        )
    if masker_kind == "dense":
        return dense_linear_flops(o, i)
    if masker_kind == "b":
        return FlopCount.of(
            b_product=2.0 * d_kept * i,
            masker=2.0 * d_kept,
            a_product=2.0 * o * expected_active,
        )
    if masker_kind == "sigmoid":
        if not inner_dim:
            raise ValueError("sigmoid masker FLOPs need the masker inner dimension")
        return FlopCount.of(
            masker=2.0 * inner_dim * i + 2.0 * d_kept * inner_dim + d_kept,
            b_product=2.0 * expected_active * i,
            a_product=2.0 * o * expected_active,
        )
    # static truncation, every kept rank is used
    return FlopCount.of(
        b_product=2.0 * d_kept * i,
        a_product=2.0 * o * d_kept,
    )


def neuron_threshold_flops(o: int, h: int, expected_active: float) -> FlopCount:
    """Down-projection with neuron thresholding: |h_i|, scaling by the norm, compare."""
    return FlopCount.of(masker=3.0 * h, down=2.0 * o * expected_active)


def activation_flops(shape: MlpShape, active: Optional[float] = None) -> FlopCount:
    """Elementwise work between the projections, counted once per op."""
    width = shape.h if active is None else active
    if shape.gated:
        return FlopCount.of(activation=width, product=width)
    return FlopCount.of(activation=width)


def dense_mlp_flops(shape: MlpShape) -> FlopCount:
    parts = dense_linear_flops(shape.h, shape.d).prefixed("up")
    if shape.gated:
        parts = parts + dense_linear_flops(shape.h, shape.d).prefixed("gate")
    parts = parts + activation_flops(shape)
    return parts + dense_linear_flops(shape.d, shape.h).prefixed("down")


def mlp_flops(
    shape: MlpShape,
    up: FlopCount,
    down: FlopCount,
    gate: Optional[FlopCount] = None,
) -> FlopCount:
    if shape.gated and gate is None:
        raise ValueError("gated MLPs need a gate FLOP count")
    parts = up.prefixed("up")
    if gate is not None:
        parts = parts + gate.prefixed("gate")
    parts = parts + activation_flops(shape)
    return parts + down.prefixed("down")


def compression_rate(adapted: FlopCount, dense: FlopCount) -> float:
    if dense.total <= 0:
        return 0.0
    return 1.0 - adapted.total / dense.total


class CompressionRow(BaseModel):
    scope: str
    dense_flops: float
    adapted_flops: float
    compression: float


class CompressionTable(BaseModel):
    """Total / MLP / QKV compression rates, the layout used for model-level reports."""

    rows: list[CompressionRow]

    def row(self, scope: str) -> CompressionRow:
        for row in self.rows:
            if row.scope == scope:
                return row
        raise KeyError(scope)


def compression_table(
    mlp: Iterable[tuple[FlopCount, FlopCount]],
    qkv: Iterable[tuple[FlopCount, FlopCount]] = (),
    model_flop_census: Optional[float] = None,
) -> CompressionTable:
    """
    Builds the table from ``(adapted, dense)`` pairs. Without a census the total
    covers the adapted blocks only; with one, the unadapted remainder of the
    model is added to both sides.
    """
    rows = []
    totals = [0.0, 0.0]
    for scope, pairs in (("mlp", list(mlp)), ("qkv", list(qkv))):
        adapted = sum(pair[0].total for pair in pairs)
        dense = sum(pair[1].total for pair in pairs)
        totals[0] += dense
        totals[1] += adapted
        rows.append(
            CompressionRow(
                scope=scope,
                dense_flops=dense,
                adapted_flops=adapted,
                compression=1.0 - adapted / dense if dense > 0 else 0.0,
            )
        )
    dense_total, adapted_total = totals
    if model_flop_census is not None:
        dense_total += model_flop_census
        adapted_total += model_flop_census
    rows.insert(
        0,
        CompressionRow(
            scope="total",
            dense_flops=dense_total,
            adapted_flops=adapted_total,
            compression=1.0 - adapted_total / dense_total if dense_total > 0 else 0.0,
        ),
    )
    return CompressionTable(rows=rows)


def cats_mlp_flops(shape: MlpShape, expected_active: float) -> FlopCount:
    """Full gate and its activation, |g| and compare, then Up/product/Down on kept neurons."""
    return FlopCount.of(
        gate=2.0 * shape.h * shape.d,
        activation=shape.h,
        masker=2.0 * shape.h,
        up=2.0 * shape.d * expected_active,
        product=expected_active,
        down=2.0 * shape.d * expected_active,
    )


def neuron_adapter_flops(shape: MlpShape, expected_active: float, inner_dim: int) -> FlopCount:
    parts = dict(
        masker=2.0 * inner_dim * shape.d + 2.0 * shape.h * inner_dim + shape.h,
        up=2.0 * shape.d * expected_active,
        activation=expected_active,
        down=2.0 * shape.d * expected_active,
    )
    if shape.gated:
        parts["gate"] = 2.0 * shape.d * expected_active
        parts["product"] = expected_active
    return FlopCount.of(**parts)


def fixed_svd_flops(ranks: int, o: int, i: int) -> FlopCount:
    return rank_adapted_flops(ranks, o, i, ranks, masker_kind="none")
