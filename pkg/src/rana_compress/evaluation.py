"""
Measurements: normalized output error of adapted layers, sparsity histograms of
rank contributions, matched-FLOP comparisons against baseline adapters, and the
toy-transformer divergence harness.
"""

import sys
from typing import Dict, List, Literal, NamedTuple, Optional, Protocol, Tuple, Union

import numpy as np
from pydantic import BaseModel, Field

from .adapters import (
    CatsMlp,
    DenseLinear,
    DenseMlp,
    FixedSvdLinear,
    FixedSvdMlp,
    NeuronAdapterMlp,
    RankAdaptedLinear,
    silu,
)
from .allocation import FlopAllocator, realize_layer, realize_mlp, settle_layer
from .config import MaskerSettings
from .decomposition import CalibrationSet, ContributionStats, decompose, rank_contributions
from .errors import InfeasibleBudgetError, RanaError
from .flop_model import (
    activation_flops,
    cats_mlp_flops,
    dense_linear_flops,
    dense_mlp_flops,
    fixed_svd_flops,
    neuron_adapter_flops,
)
from .maskers import (
    OracleTopKMasker,
    calibrate_cutoff,
    calibrate_neuron_masker,
    default_inner_dim,
    fit_sigmoid_masker,
    mean_active,
    sigmoid_inner_dim,
)
from .tensor_core import as_matrix, keep_threshold
from .toy import BlockTrace, ToyTransformer

LINEAR_KINDS = ("rana", "llra", "fixed_svd", "oracle_topk")
MLP_KINDS = ("rana", "cats", "neuron", "fixed_svd")

# Histogram edges for contributions that are all zero
EMPTY_HISTOGRAM_FLOOR = 1e-12


class BatchForward(Protocol):
    def forward_batch(self, x: np.ndarray) -> np.ndarray: ...


class ErrorReport(BaseModel):
    layer: str = "layer"
    kind: str = "rana"
    mean_error: Optional[float] = None
    median_error: Optional[float] = None
    max_error: Optional[float] = None
    evaluated: int = 0
    skipped: int = 0  # inputs whose reference output is zero
    achieved_flops: Optional[float] = None
    dense_flops: Optional[float] = None
    compression: Optional[float] = None
    feasible: bool = True
    note: str = ""


ERROR_FIELDS = [
    "layer",
    "kind",
    "mean_error",
    "median_error",
    "max_error",
    "evaluated",
    "skipped",
    "achieved_flops",
    "dense_flops",
    "compression",
    "feasible",
    "note",
]


class ComparisonTable(BaseModel):
    rows: List[ErrorReport] = Field(default_factory=list)

    def row(self, kind: str) -> ErrorReport:
        for row in self.rows:
            if row.kind == kind:
                return row
        raise KeyError(kind)

    def mean_error(self, kind: str) -> Optional[float]:
        errors = [r.mean_error for r in self.rows if r.kind == kind and r.mean_error is not None]
        return float(np.mean(errors)) if errors else None


class SparsityHistogram(BaseModel):
    scale: Literal["log", "linear"]
    bin_edges: List[float]
    counts: List[int]
    top_half_mass: float  # share of each sample's energy carried by its top floor(D / 2) ranks
    total_entries: int


HISTOGRAM_FIELDS = ["layer", "bin", "lower", "upper", "count"]


class DivergenceReport(BaseModel):
    compression: float
    mode: Literal["mlp_qkv", "mlp_only"]
    mean_relative_deviation: float
    block_errors: List[float]
    qkv_budget_fraction: float  # mean over blocks
    mlp_budget_fraction: float
    qkv_fractions: List[float] = Field(default_factory=list)  # per block
    achieved_compression: float


# --- Normalized error ---


def measure_layer_error(
    original: BatchForward,
    adapted: BatchForward,
    eval_inputs: np.ndarray,
    kind: str = "rana",
    layer: str = "layer",
) -> ErrorReport:
    """Per-input ``||y - y'||^2 / ||y||^2`` summarised by mean, median and max."""
    x = as_matrix(eval_inputs, "evaluation inputs")
    reference = original.forward_batch(x)
    approx = adapted.forward_batch(x)
    norms = np.sum(reference**2, axis=0)
    valid = norms > 0
    skipped = int(np.count_nonzero(~valid))
    if skipped:
        print(
            f"Warning: {layer}/{kind}: skipped {skipped} inputs with zero reference output",
            file=sys.stderr,
        )
    if not np.any(valid):
        return ErrorReport(layer=layer, kind=kind, skipped=skipped, note="no input has a nonzero output")
    errors = np.sum((reference[:, valid] - approx[:, valid]) ** 2, axis=0) / norms[valid]
    return ErrorReport(
        layer=layer,
        kind=kind,
        mean_error=float(np.mean(errors)),
        median_error=float(np.median(errors)),
        max_error=float(np.max(errors)),
        evaluated=int(errors.size),
        skipped=skipped,
    )


# --- Sparsity histogram ---


def normalized_contributions(stats: ContributionStats) -> np.ndarray:
    """Each sample's contributions divided by their sum; all-zero samples stay zero."""
    c = stats.contributions
    sums = c.sum(axis=0)
    return np.divide(c, sums, out=np.zeros_like(c), where=sums > 0)


def histogram_edges(values: np.ndarray, bins: int, scale: str = "log") -> np.ndarray:
    if scale == "log":
        positive = values[values > 0]
        lo = float(positive.min()) if positive.size else EMPTY_HISTOGRAM_FLOOR
        hi = float(values.max())
        if hi <= lo:
            lo, hi = lo / 2.0, lo * 2.0
        return np.geomspace(lo, hi, bins + 1)
    lo, hi = float(values.min()), float(values.max())
    if hi <= lo:
        lo, hi = lo - 0.5, hi + 0.5
    return np.linspace(lo, hi, bins + 1)


def build_sparsity_histogram(
    stats: ContributionStats, bins: int = 128, scale: Literal["log", "linear"] = "log"
) -> SparsityHistogram:
    """
    Histogram of pooled normalized contributions. Values below the first edge
    (zeros on a log scale) are counted in the first bin so every entry lands
    somewhere.
    """
    if bins < 2:
        raise ValueError("a histogram needs at least 2 bins")
    normalized = normalized_contributions(stats)
    values = normalized.ravel()
    edges = histogram_edges(values, bins, scale)
    counts, _ = np.histogram(np.clip(values, edges[0], edges[-1]), bins=edges)

    d = normalized.shape[0]
    # odd counts leave the middle rank out of the top half
    top = max(d // 2, 1)
    live = normalized[:, normalized.sum(axis=0) > 0]
    if live.size:
        ranked = -np.sort(-live, axis=0)
        top_half = float(np.mean(ranked[:top].sum(axis=0)))
    else:
        top_half = 0.0
    return SparsityHistogram(
        scale=scale,
        bin_edges=[float(e) for e in edges],
        counts=[int(c) for c in counts],
        top_half_mass=top_half,
        total_entries=int(values.size),
    )


# --- Matched-FLOP comparisons ---


def _infeasible_row(layer: str, kind: str, dense: float, reason: str) -> ErrorReport:
    return ErrorReport(layer=layer, kind=kind, dense_flops=dense, feasible=False, note=reason)


def _finish(report: ErrorReport, achieved: float, dense: float, note: str = "") -> ErrorReport:
    return report.model_copy(
        update={
            "achieved_flops": achieved,
            "dense_flops": dense,
            "compression": 1.0 - achieved / dense,
            "note": note,
        }
    )


def _fixed_rank(budget: float, o: int, i: int, available: int) -> int:
    return min(int(budget // (2 * (o + i))), available)


class AdapterComparison:
    """Builds each adapter kind at a shared FLOP budget and measures it on held-out inputs."""

    def __init__(
        self,
        allocator: Optional[FlopAllocator] = None,
        masker: Optional[MaskerSettings] = None,
        seed: int = 0,
    ):
        self.allocator = allocator or FlopAllocator()
        self.masker = masker or self.allocator.masker
        self.seed = seed

    # linear layers

    def linear_row(
        self, kind: str, layer: DenseLinear, calib: CalibrationSet, eval_inputs: np.ndarray, budget: float, name: str
    ) -> ErrorReport:
        o, i = layer.shape
        dense = dense_linear_flops(o, i).total
        if kind not in LINEAR_KINDS:
            return _infeasible_row(name, kind, dense, f"{kind} does not apply to a linear layer")
        dec = decompose(layer.weight, calib)
        stats = rank_contributions(dec, calib)

        if kind == "rana":
            alloc = self.allocator.line_search_layer(dec, stats, budget, component=name)
            adapted = realize_layer(dec, alloc)
            report = measure_layer_error(layer, adapted, eval_inputs, kind, name)
            return _finish(report, alloc.achieved_flops.total, dense)

        if kind == "llra":
            alloc = self.allocator.line_search_layer(
                dec, stats, budget, masker_kind="sigmoid", component=name
            )
            adapted = realize_layer(dec, alloc, calib, self.masker, self.seed)
            settled = settle_layer(dec, alloc, adapted, calib)
            report = measure_layer_error(layer, adapted, eval_inputs, kind, name)
            return _finish(report, settled.achieved_flops.total, dense)

        ranks = _fixed_rank(budget, o, i, dec.kept_ranks)
        if ranks < 1:
            return _infeasible_row(name, kind, dense, "budget below a rank-1 factorization")
        flops = fixed_svd_flops(ranks, o, i).total
        if kind == "fixed_svd":
            adapted = FixedSvdLinear.from_decomposition(dec, ranks)
            report = measure_layer_error(layer, adapted, eval_inputs, kind, name)
            return _finish(report, flops, dense)
        # per-input best k ranks; a reference, not a deployable adapter
        adapted = RankAdaptedLinear.from_decomposition(dec, OracleTopKMasker(ranks))
        report = measure_layer_error(layer, adapted, eval_inputs, kind, name)
        return _finish(report, flops, dense, note=f"reference at k={ranks}")

    # MLP blocks

    def mlp_row(
        self, kind: str, mlp: DenseMlp, calib: CalibrationSet, eval_inputs: np.ndarray, budget: float, name: str
    ) -> ErrorReport:
        shape = mlp.shape
        dense = dense_mlp_flops(shape).total
        if kind not in MLP_KINDS:
            return _infeasible_row(name, kind, dense, f"{kind} does not apply to an MLP")

        if kind == "rana":
            decs = {"up": decompose(mlp.up, calib)}
            if mlp.gate is not None:
                decs["gate"] = decompose(mlp.gate, calib)
            alloc = self.allocator.grid_search_mlp(mlp, calib, budget, decompositions=decs)
            adapted = realize_mlp(mlp, decs, alloc, calib, self.masker, self.seed)
            report = measure_layer_error(mlp, adapted, eval_inputs, kind, name)
            return _finish(report, alloc.achieved_flops.total, dense)

        if kind == "cats":
            if mlp.gate is None:
                return _infeasible_row(name, kind, dense, "the CATS-like baseline needs a gated MLP")
            magnitude = np.abs(silu(mlp.gate @ calib.x))
            per_neuron = cats_mlp_flops(shape, 1.0).total - cats_mlp_flops(shape, 0.0).total
            expected = (budget - cats_mlp_flops(shape, 0.0).total) / per_neuron
            if expected <= 0:
                return _infeasible_row(name, kind, dense, "budget does not cover the full gate projection")
            expected = min(expected, float(shape.h))
            threshold = keep_threshold(magnitude, expected / shape.h)
            active = mean_active(magnitude >= threshold)
            adapted = CatsMlp(mlp, threshold)
            report = measure_layer_error(mlp, adapted, eval_inputs, kind, name)
            return _finish(report, cats_mlp_flops(shape, active).total, dense)

        if kind == "neuron":
            # never narrower than the default sigmoid width
            inner = max(
                sigmoid_inner_dim(self.masker.masker_flop_fraction * dense, shape.h, shape.d),
                default_inner_dim(shape.h, shape.d, self.masker.inner_dim),
            )
            fixed = neuron_adapter_flops(shape, 0.0, inner).total
            per_neuron = neuron_adapter_flops(shape, 1.0, inner).total - fixed
            expected = (budget - fixed) / per_neuron
            if expected <= 0:
                return _infeasible_row(name, kind, dense, "budget does not cover the neuron masker")
            expected = min(expected, float(shape.h))
            hidden = mlp.hidden_batch(calib.x)
            labels = calibrate_neuron_masker(mlp.down, hidden, expected).mask(hidden)
            sig = fit_sigmoid_masker(
                calib.x,
                labels,
                inner,
                epochs=self.masker.epochs,
                lr=self.masker.lr,
                momentum=self.masker.momentum,
                batch_size=self.masker.batch_size,
                seed=self.seed,
            )
            sig = calibrate_cutoff(sig, calib.x, expected)
            active = mean_active(sig.mask(calib.x))
            adapted = NeuronAdapterMlp(mlp, sig)
            report = measure_layer_error(mlp, adapted, eval_inputs, kind, name)
            return _finish(report, neuron_adapter_flops(shape, active, inner).total, dense)

        # fixed SVD: every projection truncated at the same compression rate
        share = (budget - activation_flops(shape).total) / (3 if shape.gated else 2)
        hidden = CalibrationSet(mlp.hidden_batch(calib.x))
        parts = {}
        for part_name, weight, part_calib in (
            ("up", mlp.up, calib),
            ("gate", mlp.gate, calib),
            ("down", mlp.down, hidden),
        ):
            if weight is None:
                continue
            dec = decompose(weight, part_calib)
            ranks = _fixed_rank(share, *weight.shape, dec.kept_ranks)
            if ranks < 1:
                return _infeasible_row(name, kind, dense, f"{part_name} budget below a rank-1 factorization")
            parts[part_name] = FixedSvdLinear.from_decomposition(dec, ranks)
        adapted = FixedSvdMlp(up=parts["up"], down=parts["down"], gate=parts.get("gate"), mlp_kind=shape.kind)
        flops = activation_flops(shape).total + sum(
            fixed_svd_flops(p.rank_count, p.a.shape[0], p.b.shape[1]).total for p in parts.values()
        )
        report = measure_layer_error(mlp, adapted, eval_inputs, kind, name)
        return _finish(report, flops, dense)


def compare_adapters(
    target: Union[DenseLinear, DenseMlp],
    budget: float,
    kinds: List[str],
    calib: CalibrationSet,
    eval_inputs: np.ndarray,
    seed: int = 0,
    allocator: Optional[FlopAllocator] = None,
    layer: str = "layer",
) -> ComparisonTable:
    """
    One row per adapter kind at ``budget`` (a fraction of the dense FLOPs).
    Kinds that cannot meet the budget, or fail to build, are reported as
    infeasible rows with the reason.
    """
    comparison = AdapterComparison(allocator=allocator, seed=seed)
    is_mlp = isinstance(target, DenseMlp)
    dense = dense_mlp_flops(target.shape).total if is_mlp else dense_linear_flops(*target.shape).total
    rows = []
    for kind in kinds:
        try:
            if is_mlp:
                row = comparison.mlp_row(kind, target, calib, eval_inputs, budget * dense, layer)
            else:
                row = comparison.linear_row(kind, target, calib, eval_inputs, budget * dense, layer)
        except InfeasibleBudgetError as e:
            row = _infeasible_row(layer, kind, dense, str(e))
        except RanaError as e:
            row = _infeasible_row(layer, kind, dense, f"failed: {e}")
        rows.append(row)
    return ComparisonTable(rows=rows)


# --- Toy transformer divergence ---


def mlp_only_budget(compression: float, qkv_flops: float, mlp_flops: float) -> float:
    """MLP budget fraction that matches ``compression`` of QKV + MLP with QKV left dense."""
    return ((1.0 - compression) * (qkv_flops + mlp_flops) - qkv_flops) / mlp_flops


def _relative_errors(reference: np.ndarray, approx: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(reference, axis=0)
    diffs = np.linalg.norm(reference - approx, axis=0)
    return np.divide(diffs, norms, out=np.zeros_like(diffs), where=norms > 0)


class _BlockChoice(NamedTuple):
    error: float
    qkv_fraction: float
    mlp_fraction: float
    qkv_layer: Optional[object]
    mlp_layer: Optional[object]
    spent: float


def _qkv_candidates(mode: str, step: float) -> List[float]:
    """QKV budget fractions to try, dense first; MLP-only mode tries nothing else."""
    if mode == "mlp_only":
        return [1.0]
    steps = round(1.0 / step)
    return [round(1.0 - j * step, 12) for j in range(steps)]


def _adapt_block(
    model: ToyTransformer,
    index: int,
    trace: BlockTrace,
    qkv_fraction: float,
    mlp_fraction: float,
    allocator: FlopAllocator,
    qkv_dense: float,
    mlp_dense: float,
) -> Tuple[Optional[object], Optional[object], float]:
    block = model.blocks[index]
    qkv_layer, spent = None, qkv_dense
    if qkv_fraction < 1.0:
        calib = CalibrationSet(trace.qkv_inputs[index])
        dec = decompose(block.qkv, calib)
        alloc = allocator.line_search_layer(
            dec, rank_contributions(dec, calib), qkv_fraction * qkv_dense, component=f"block{index}.qkv"
        )
        qkv_layer = realize_layer(dec, alloc)
        spent = alloc.achieved_flops.total
    mlp_layer = None
    if mlp_fraction < 1.0:
        calib = CalibrationSet(trace.mlp_inputs[index])
        decs = {"up": decompose(block.mlp.up, calib), "gate": decompose(block.mlp.gate, calib)}
        alloc = allocator.grid_search_mlp(block.mlp, calib, mlp_fraction * mlp_dense, decompositions=decs)
        mlp_layer = realize_mlp(block.mlp, decs, alloc)
        spent += alloc.achieved_flops.total
    else:
        spent += mlp_dense
    return qkv_layer, mlp_layer, spent


def toy_model_divergence(
    model: ToyTransformer,
    compression: float,
    calib_sequences: List[np.ndarray],
    eval_sequences: List[np.ndarray],
    mode: Literal["mlp_qkv", "mlp_only"] = "mlp_qkv",
    allocator: Optional[FlopAllocator] = None,
) -> DivergenceReport:
    """
    Adapts the QKV projection (unless ``mode`` is ``mlp_only``) and MLP of every
    block, calibrating each on the dense model's activations, then measures how
    far the logits and the residual stream after each block drift.

    Each block's budget is split between QKV and MLP by trying QKV fractions on
    the allocation grid (keeping QKV dense included) and keeping the split whose
    block output drifts least on the calibration sequences.
    """
    if not 0.0 <= compression < 1.0:
        raise ValueError(f"compression must be in [0, 1), got {compression}")
    allocator = allocator or FlopAllocator()
    w = model.width
    qkv_dense = dense_linear_flops(3 * w, w).total
    mlp_dense = dense_mlp_flops(model.blocks[0].mlp.shape).total
    if mode == "mlp_only" and mlp_only_budget(compression, qkv_dense, mlp_dense) <= 0:
        raise InfeasibleBudgetError(
            f"compression {compression:.2f} cannot be reached by the MLPs alone"
        )

    _, trace = model.collect(calib_sequences)
    layers: Dict[int, tuple] = {}
    choices: List[_BlockChoice] = []
    for index in range(len(model.blocks)):
        best: Optional[_BlockChoice] = None
        reasons = []
        for qkv_fraction in _qkv_candidates(mode, allocator.settings.grid_step):
            mlp_fraction = ((1.0 - compression) * (qkv_dense + mlp_dense) - qkv_fraction * qkv_dense) / mlp_dense
            if mlp_fraction <= 0 or mlp_fraction > 1.0 + 1e-9:
                continue
            mlp_fraction = min(mlp_fraction, 1.0)
            try:
                qkv_layer, mlp_layer, spent = _adapt_block(
                    model, index, trace, qkv_fraction, mlp_fraction, allocator, qkv_dense, mlp_dense
                )
            except InfeasibleBudgetError as e:
                reasons.append(str(e))
                continue
            _, adapted = model.collect(calib_sequences, layers={index: (qkv_layer, mlp_layer)})
            error = float(np.mean(_relative_errors(trace.outputs[index], adapted.outputs[index])))
            if best is None or error < best.error:
                best = _BlockChoice(error, qkv_fraction, mlp_fraction, qkv_layer, mlp_layer, spent)
        if best is None:
            detail = f": {reasons[-1]}" if reasons else ""
            raise InfeasibleBudgetError(
                f"block {index}: no QKV/MLP split reaches compression {compression:.2f}{detail}"
            )
        choices.append(best)
        layers[index] = (best.qkv_layer, best.mlp_layer)

    dense_logits, dense_trace = model.collect(eval_sequences)
    adapted_logits, adapted_trace = model.collect(eval_sequences, layers=layers)
    deviation = _relative_errors(np.concatenate(dense_logits, axis=1), np.concatenate(adapted_logits, axis=1))
    block_errors = [
        float(np.mean(_relative_errors(ref, approx)))
        for ref, approx in zip(dense_trace.outputs, adapted_trace.outputs)
    ]
    total_dense = len(model.blocks) * (qkv_dense + mlp_dense)
    return DivergenceReport(
        compression=compression,
        mode=mode,
        mean_relative_deviation=float(np.mean(deviation)),
        block_errors=block_errors,
        qkv_budget_fraction=float(np.mean([c.qkv_fraction for c in choices])),
        mlp_budget_fraction=float(np.mean([c.mlp_fraction for c in choices])),
        qkv_fractions=[c.qkv_fraction for c in choices],
        achieved_compression=1.0 - sum(c.spent for c in choices) / total_dense,
    )
