"""
FLOP allocation for rank adapters.

For one linear layer, ``line_search_layer`` walks a schedule of kept-rank counts
``D``. Each ``D`` fixes the masker cost, the rest of the budget buys an expected
number of active ranks ``E``, and a B-masker is calibrated to ``E``. The
candidate with the lowest calibration error wins.

For an MLP, ``grid_search_mlp`` splits the budget between Up, Gate and Down on a
simplex grid, line-searches Up and Gate for each share, calibrates a neuron
threshold on Down, and keeps the split with the lowest end-to-end output error.

Every evaluated candidate is recorded in a search log so the choice can be
replayed.
"""

import itertools
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Dict, Iterable, List, Literal, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, Field

from .adapters import DenseLinear, DenseMlp, RanaMlp, RankAdaptedLinear
from .config import AllocationSettings, MaskerSettings
from .decomposition import (
    CalibrationSet,
    ContributionStats,
    RankDecomposition,
    decompose,
    rank_contributions,
)
from .errors import InfeasibleBudgetError, RanaError
from .flop_model import (
    FlopCount,
    MlpShape,
    activation_flops,
    dense_linear_flops,
    dense_mlp_flops,
    mlp_flops,
    neuron_threshold_flops,
    rank_adapted_flops,
)
from .maskers import (
    BMasker,
    NeuronThresholdMasker,
    SigmoidMlpMasker,
    calibrate_cutoff,
    calibrate_neuron_masker,
    default_inner_dim,
    down_row_norms,
    mean_active,
    train_sigmoid_masker,
)
from .tensor_core import keep_threshold

# A budget at least this close to the dense cost may keep the layer dense
DENSE_SLACK = 1e-9

LayerMaskerKind = Literal["b", "sigmoid", "dense"]
Budget = Union[FlopCount, float]


def _budget_total(budget: Budget) -> float:
    return float(budget.total if isinstance(budget, FlopCount) else budget)


class SearchCandidate(BaseModel):
    component: str
    kind: Literal["rank", "dense", "grid"]
    kept_ranks: Optional[int] = None
    expected_active: Optional[float] = None
    fractions: Optional[List[float]] = None
    flops: Optional[float] = None
    error: Optional[float] = None
    feasible: bool = True
    note: str = ""


class LayerAllocation(BaseModel):
    component: str = "layer"
    masker_kind: LayerMaskerKind
    kept_ranks: int
    target_expected_active: float
    threshold: Optional[float] = None
    calibrated_mean_active: float
    inner_dim: Optional[int] = None
    clamped: bool = False  # every kept rank active, spending less than the budget
    budget_flops: float
    dense_flops: float
    achieved_flops: FlopCount
    calib_error: float
    search_log: List[SearchCandidate] = Field(default_factory=list)

    def b_masker(self) -> BMasker:
        return BMasker(
            threshold=float(self.threshold),
            target_expected_active=self.target_expected_active,
            calibrated_mean_active=self.calibrated_mean_active,
        )


class DownAllocation(BaseModel):
    masker_kind: Literal["neuron", "dense"]
    target_expected_active: float
    threshold: Optional[float] = None
    calibrated_mean_active: float
    budget_flops: float
    achieved_flops: FlopCount


class MlpAllocation(BaseModel):
    mlp_kind: str
    fractions: List[float]
    grid_step: float
    up: LayerAllocation
    gate: Optional[LayerAllocation] = None
    down: DownAllocation
    budget_flops: float
    dense_flops: float
    achieved_flops: FlopCount
    calib_error: float
    search_log: List[SearchCandidate] = Field(default_factory=list)

    @property
    def compression(self) -> float:
        return 1.0 - self.achieved_flops.total / self.dense_flops


class AllocationPlan(BaseModel):
    """Everything ``compress`` decided, serialised as the plan JSON."""

    schema_version: int = 1
    toolkit_version: str
    config_hash: str
    seed: int
    budget: float
    grid_step: float
    masker_kind: str
    layers: Dict[str, LayerAllocation] = Field(default_factory=dict)
    mlps: Dict[str, MlpAllocation] = Field(default_factory=dict)
    compression: Dict[str, float] = Field(default_factory=dict)


def rank_schedule(d_max: int, settings: AllocationSettings) -> List[int]:
    """Every D up to the exhaustive limit, otherwise geometric samples (1 and D_max included)."""
    if d_max <= settings.exhaustive_rank_limit:
        return list(range(1, d_max + 1))
    points = np.geomspace(1, d_max, settings.geometric_schedule_size)
    return sorted({int(round(p)) for p in points} | {1, d_max})


def simplex_grid(parts: int, step: float) -> List[Tuple[float, ...]]:
    n = int(round(1.0 / step))
    points = []
    for head in itertools.product(range(n + 1), repeat=parts - 1):
        if sum(head) <= n:
            counts = head + (n - sum(head),)
            points.append(tuple(round(c / n, 12) for c in counts))
    return sorted(points)


def uniform_fractions(shape: MlpShape) -> Tuple[float, ...]:
    """The split that compresses every projection at the same rate (dense cost ratio)."""
    parts = 3 if shape.gated else 2
    return tuple(round(1.0 / parts, 12) for _ in range(parts))


def _masker_overhead(kind: str, d_kept: int, o: int, i: int, inner_dim: Optional[int]) -> float:
    return rank_adapted_flops(d_kept, o, i, 0.0, masker_kind=kind, inner_dim=inner_dim).total


def _active_cost(kind: str, o: int, i: int) -> float:
    # FLOPs per expected active rank
    return 2.0 * o if kind == "b" else 2.0 * (o + i)


def minimum_layer_flops(o: int, i: int, masker_kind: str = "b", inner_dim: Optional[int] = None) -> float:
    """Cost of a one-rank adapter with nothing active; budgets must exceed it."""
    return _masker_overhead(masker_kind, 1, o, i, inner_dim)


@dataclass(frozen=True)
class _MlpContext:
    mlp: DenseMlp
    calib: CalibrationSet
    shape: MlpShape
    decompositions: Dict[str, RankDecomposition]
    stats: Dict[str, ContributionStats]
    budget: float
    distributable: float
    reference: np.ndarray  # dense MLP outputs on the calibration inputs
    grid_step: float


class FlopAllocator:
    def __init__(
        self,
        settings: Optional[AllocationSettings] = None,
        masker: Optional[MaskerSettings] = None,
        threads: int = 1,
    ):
        self.settings = settings or AllocationSettings()
        self.masker = masker or MaskerSettings()
        self.threads = max(int(threads), 1)

    def _map(self, fn: Callable, items: Iterable) -> list:
        items = list(items)
        if self.threads == 1 or len(items) < 2:
            return [fn(item) for item in items]
        with ThreadPoolExecutor(max_workers=self.threads) as pool:
            return list(pool.map(fn, items))

    # --- Single layer ---

    def line_search_layer(
        self,
        dec: RankDecomposition,
        stats: ContributionStats,
        budget: Budget,
        masker_kind: Literal["b", "sigmoid"] = "b",
        inner_dim: Optional[int] = None,
        component: str = "layer",
    ) -> LayerAllocation:
        budget = _budget_total(budget)
        o, i = dec.source_shape
        dense = dense_linear_flops(o, i)
        if masker_kind == "sigmoid" and not inner_dim:
            inner_dim = default_inner_dim(o, i, self.masker.inner_dim)
        minimum = minimum_layer_flops(o, i, masker_kind, inner_dim)
        if budget <= minimum and budget < dense.total * (1.0 - DENSE_SLACK):
            raise InfeasibleBudgetError(
                f"{component}: budget of {budget:.0f} FLOPs cannot pay for a one-rank masker",
                minimum_flops=minimum,
            )

        log: List[SearchCandidate] = []
        best: Optional[LayerAllocation] = None
        if budget >= dense.total * (1.0 - DENSE_SLACK):
            best = LayerAllocation(
                component=component,
                masker_kind="dense",
                kept_ranks=dec.kept_ranks,
                target_expected_active=float(dec.kept_ranks),
                calibrated_mean_active=float(dec.kept_ranks),
                budget_flops=budget,
                dense_flops=dense.total,
                achieved_flops=dense,
                calib_error=0.0,
            )
            log.append(
                SearchCandidate(component=component, kind="dense", flops=dense.total, error=0.0)
            )

        per_active = _active_cost(masker_kind, o, i)
        for d_kept in rank_schedule(dec.kept_ranks, self.settings):
            overhead = _masker_overhead(masker_kind, d_kept, o, i, inner_dim)
            expected = (budget - overhead) / per_active
            if expected <= 0:
                # larger D only costs more
                break
            clamped = expected > d_kept
            expected = min(expected, float(d_kept))
            contributions = stats.contributions[:d_kept]
            threshold = keep_threshold(contributions, expected / d_kept)
            kept = contributions >= threshold
            mean_active = float(np.mean(np.sum(kept, axis=0)))
            achieved = rank_adapted_flops(
                d_kept, o, i, min(mean_active, d_kept), masker_kind=masker_kind, inner_dim=inner_dim
            )
            residual = stats.output_energy - np.sum(np.where(kept, contributions, 0.0), axis=0)
            error = float(np.mean(np.maximum(residual, 0.0)))
            feasible = achieved.total <= budget * (1.0 + self.settings.budget_tolerance)
            log.append(
                SearchCandidate(
                    component=component,
                    kind="rank",
                    kept_ranks=d_kept,
                    expected_active=expected,
                    flops=achieved.total,
                    error=error,
                    feasible=feasible,
                    note="clamped" if clamped else "",
                )
            )
            if feasible and (best is None or error < best.calib_error):
                best = LayerAllocation(
                    component=component,
                    masker_kind=masker_kind,
                    kept_ranks=d_kept,
                    target_expected_active=expected,
                    threshold=threshold,
                    calibrated_mean_active=mean_active,
                    inner_dim=inner_dim if masker_kind == "sigmoid" else None,
                    clamped=clamped,
                    budget_flops=budget,
                    dense_flops=dense.total,
                    achieved_flops=achieved,
                    calib_error=error,
                )

        if best is None:
            raise InfeasibleBudgetError(
                f"{component}: no rank count fits a budget of {budget:.0f} FLOPs",
                minimum_flops=minimum,
            )
        return best.model_copy(update={"search_log": log})

    # --- MLP block ---

    def _context(
        self,
        mlp: DenseMlp,
        calib: CalibrationSet,
        budget: float,
        decompositions: Optional[Dict[str, RankDecomposition]] = None,
        grid_step: Optional[float] = None,
    ) -> _MlpContext:
        shape = mlp.shape
        weights = {"up": mlp.up}
        if mlp.gate is not None:
            weights["gate"] = mlp.gate
        decs = dict(decompositions or {})
        for name, weight in weights.items():
            if name not in decs:
                decs[name] = decompose(weight, calib)
        stats = {name: rank_contributions(dec, calib) for name, dec in decs.items()}
        overhead = activation_flops(shape).total
        return _MlpContext(
            mlp=mlp,
            calib=calib,
            shape=shape,
            decompositions=decs,
            stats=stats,
            budget=budget,
            distributable=budget - overhead,
            reference=mlp.forward_batch(calib.x),
            grid_step=self.settings.grid_step if grid_step is None else grid_step,
        )

    def _component_names(self, shape: MlpShape) -> List[str]:
        return ["up", "gate", "down"] if shape.gated else ["up", "down"]

    def _line_search_share(self, ctx: _MlpContext, name: str, fraction: float) -> Union[LayerAllocation, RanaError]:
        try:
            return self.line_search_layer(
                ctx.decompositions[name],
                ctx.stats[name],
                fraction * ctx.distributable,
                masker_kind=self.masker.kind,
                component=name,
            )
        except RanaError as e:
            return e

    def _allocate_down(self, ctx: _MlpContext, hidden: np.ndarray, budget: float) -> DownAllocation:
        d, h = ctx.shape.d, ctx.shape.h
        dense = dense_linear_flops(d, h)
        if budget >= dense.total * (1.0 - DENSE_SLACK):
            return DownAllocation(
                masker_kind="dense",
                target_expected_active=float(h),
                calibrated_mean_active=float(h),
                budget_flops=budget,
                achieved_flops=dense,
            )
        expected = (budget - 3.0 * h) / (2.0 * d)
        if expected <= 0:
            raise InfeasibleBudgetError(
                f"down: budget of {budget:.0f} FLOPs cannot pay for neuron thresholding",
                minimum_flops=3.0 * h,
            )
        expected = min(expected, float(h))
        masker = calibrate_neuron_masker(ctx.mlp.down, hidden, expected)
        return DownAllocation(
            masker_kind="neuron",
            target_expected_active=expected,
            threshold=masker.threshold,
            calibrated_mean_active=masker.calibrated_mean_active,
            budget_flops=budget,
            achieved_flops=neuron_threshold_flops(d, h, masker.calibrated_mean_active),
        )

    def _evaluate_point(
        self,
        ctx: _MlpContext,
        fractions: Tuple[float, ...],
        layers: Dict[Tuple[str, float], Union[LayerAllocation, RanaError]],
    ) -> Tuple[SearchCandidate, Optional[MlpAllocation]]:
        names = self._component_names(ctx.shape)
        shares = dict(zip(names, fractions))
        chosen: Dict[str, LayerAllocation] = {}
        for name in names[:-1]:
            result = layers[(name, shares[name])]
            if isinstance(result, RanaError):
                return self._infeasible(fractions, str(result)), None
            chosen[name] = result

        proxy = RanaMlp(
            up=realize_layer(ctx.decompositions["up"], chosen["up"]),
            down_weights=ctx.mlp.down,
            down_masker=None,
            gate=realize_layer(ctx.decompositions["gate"], chosen["gate"]) if "gate" in chosen else None,
            kind=ctx.shape.kind,
        )
        hidden = proxy.hidden_batch(ctx.calib.x)
        # Down's share plus whatever Up/Gate left unspent
        spent = sum(alloc.achieved_flops.total for alloc in chosen.values())
        leftover = ctx.distributable - spent
        try:
            down = self._allocate_down(ctx, hidden, leftover)
        except RanaError as e:
            return self._infeasible(fractions, str(e)), None

        adapted = RanaMlp(
            up=proxy.up,
            down_weights=ctx.mlp.down,
            down_masker=realize_down(ctx.mlp.down, down),
            gate=proxy.gate,
            kind=ctx.shape.kind,
        )
        outputs = adapted.forward_batch(ctx.calib.x)
        error = float(np.mean(np.sum((ctx.reference - outputs) ** 2, axis=0)))
        achieved = mlp_flops(
            ctx.shape,
            up=chosen["up"].achieved_flops,
            down=down.achieved_flops,
            gate=chosen["gate"].achieved_flops if "gate" in chosen else None,
        )
        feasible = abs(achieved.total - ctx.budget) <= self.settings.budget_tolerance * ctx.budget
        candidate = SearchCandidate(
            component="mlp",
            kind="grid",
            fractions=list(fractions),
            flops=achieved.total,
            error=error,
            feasible=feasible,
            note="" if feasible else "achieved FLOPs outside the budget tolerance",
        )
        allocation = MlpAllocation(
            mlp_kind=ctx.shape.kind,
            fractions=list(fractions),
            grid_step=ctx.grid_step,
            up=chosen["up"],
            gate=chosen.get("gate"),
            down=down,
            budget_flops=ctx.budget,
            dense_flops=dense_mlp_flops(ctx.shape).total,
            achieved_flops=achieved,
            calib_error=error,
        )
        return candidate, allocation

    def _infeasible(self, fractions: Tuple[float, ...], reason: str) -> SearchCandidate:
        return SearchCandidate(
            component="mlp", kind="grid", fractions=list(fractions), feasible=False, note=reason
        )

    def _search(
        self, ctx: _MlpContext, points: List[Tuple[float, ...]]
    ) -> Tuple[List[SearchCandidate], List[Optional[MlpAllocation]]]:
        names = self._component_names(ctx.shape)
        keys = sorted({(name, point[idx]) for point in points for idx, name in enumerate(names[:-1])})
        results = self._map(lambda key: self._line_search_share(ctx, *key), keys)
        layers = dict(zip(keys, results))
        evaluated = self._map(lambda point: self._evaluate_point(ctx, point, layers), points)
        return [c for c, _ in evaluated], [a for _, a in evaluated]

    def _minimum_mlp_flops(self, ctx: _MlpContext) -> float:
        d, h = ctx.shape.d, ctx.shape.h
        layers = 2 if ctx.shape.gated else 1
        return activation_flops(ctx.shape).total + layers * minimum_layer_flops(h, d) + 3.0 * h

    def allocate_mlp_at(
        self,
        mlp: DenseMlp,
        calib: CalibrationSet,
        budget: Budget,
        fractions: Tuple[float, ...],
        decompositions: Optional[Dict[str, RankDecomposition]] = None,
    ) -> MlpAllocation:
        """Evaluates a single budget split, e.g. the uniform one."""
        ctx = self._context(mlp, calib, _budget_total(budget), decompositions)
        fractions = tuple(round(f, 12) for f in fractions)
        candidates, allocations = self._search(ctx, [fractions])
        if allocations[0] is None:
            raise InfeasibleBudgetError(
                f"split {list(fractions)} is infeasible: {candidates[0].note}",
                minimum_flops=self._minimum_mlp_flops(ctx),
            )
        return allocations[0].model_copy(update={"search_log": candidates})

    def grid_search_mlp(
        self,
        mlp: DenseMlp,
        calib: CalibrationSet,
        budget: Budget,
        grid_step: Optional[float] = None,
        decompositions: Optional[Dict[str, RankDecomposition]] = None,
    ) -> MlpAllocation:
        if grid_step is not None:
            grid_step = AllocationSettings(grid_step=grid_step).grid_step
        ctx = self._context(mlp, calib, _budget_total(budget), decompositions, grid_step)
        points = simplex_grid(len(self._component_names(ctx.shape)), ctx.grid_step)
        uniform = uniform_fractions(ctx.shape)
        if uniform not in points:
            points.append(uniform)
        candidates, allocations = self._search(ctx, points)

        best: Optional[MlpAllocation] = None
        best_key = None
        for candidate, allocation in zip(candidates, allocations):
            if allocation is None or not candidate.feasible:
                continue
            key = (allocation.calib_error, tuple(allocation.fractions))
            if best_key is None or key < best_key:
                best, best_key = allocation, key
        if best is None:
            raise InfeasibleBudgetError(
                f"no grid point meets the MLP budget of {ctx.budget:.0f} FLOPs",
                minimum_flops=self._minimum_mlp_flops(ctx),
            )
        skipped = sum(1 for c in candidates if not c.feasible)
        if skipped:
            print(
                f"Grid search: {len(candidates) - skipped} of {len(candidates)} splits feasible",
                file=sys.stderr,
            )
        return best.model_copy(update={"search_log": candidates})


def line_search_layer(
    dec: RankDecomposition,
    stats: ContributionStats,
    budget: Budget,
    settings: Optional[AllocationSettings] = None,
) -> LayerAllocation:
    return FlopAllocator(settings).line_search_layer(dec, stats, budget)


def grid_search_mlp(
    mlp: DenseMlp,
    calib: CalibrationSet,
    budget: Budget,
    grid_step: float = 0.1,
    settings: Optional[AllocationSettings] = None,
    threads: int = 1,
) -> MlpAllocation:
    return FlopAllocator(settings, threads=threads).grid_search_mlp(mlp, calib, budget, grid_step)


# --- Turning allocations back into layers ---


def realize_layer(
    dec: RankDecomposition,
    allocation: LayerAllocation,
    calib: Optional[CalibrationSet] = None,
    masker: Optional[MaskerSettings] = None,
    seed: int = 0,
) -> Union[RankAdaptedLinear, DenseLinear]:
    """
    Builds the adapter an allocation describes. Sigmoid allocations train their
    masker here, imitating the B-masker the search calibrated, and move its
    cutoff so it keeps as many ranks on ``calib`` as the plan paid for (unless a
    fixed ``decision_cutoff`` is configured). Without calibration inputs they
    fall back to that B-masker.
    """
    if allocation.masker_kind == "dense":
        return DenseLinear(dec.weight)
    part = dec.truncate(allocation.kept_ranks)
    label_masker = allocation.b_masker()
    if allocation.masker_kind == "sigmoid" and calib is not None:
        masker = masker or MaskerSettings()
        trained = train_sigmoid_masker(
            label_masker,
            part,
            calib,
            allocation.inner_dim or default_inner_dim(*dec.source_shape, masker.inner_dim),
            epochs=masker.epochs,
            lr=masker.lr,
            seed=seed,
            momentum=masker.momentum,
            batch_size=masker.batch_size,
        )
        if masker.decision_cutoff is not None:
            sigmoid = trained.with_cutoff(masker.decision_cutoff)
        else:
            sigmoid = calibrate_cutoff(trained, calib.x, allocation.calibrated_mean_active)
        return RankAdaptedLinear.from_decomposition(part, sigmoid)
    return RankAdaptedLinear.from_decomposition(part, label_masker)


def settle_layer(
    dec: RankDecomposition,
    allocation: LayerAllocation,
    adapted: Union[RankAdaptedLinear, DenseLinear],
    calib: CalibrationSet,
) -> LayerAllocation:
    """
    Restates a sigmoid allocation with what the realized masker does on ``calib``:
    its mean active count, FLOPs and calibration error. Other kinds already
    describe their adapter exactly and come back unchanged.
    """
    if not isinstance(adapted, RankAdaptedLinear) or not isinstance(adapted.masker, SigmoidMlpMasker):
        return allocation
    o, i = dec.source_shape
    active = mean_active(adapted.masks_batch(calib.x))
    achieved = rank_adapted_flops(
        adapted.rank_count, o, i, active, masker_kind="sigmoid", inner_dim=adapted.masker.inner_dim
    )
    residual = dec.weight @ calib.x - adapted.forward_batch(calib.x)
    return allocation.model_copy(
        update={
            "calibrated_mean_active": active,
            "achieved_flops": achieved,
            "calib_error": float(np.mean(np.sum(residual**2, axis=0))),
        }
    )


def realize_down(w_down: np.ndarray, allocation: DownAllocation) -> Optional[NeuronThresholdMasker]:
    if allocation.masker_kind == "dense":
        return None
    return NeuronThresholdMasker(
        threshold=float(allocation.threshold),
        row_norms=down_row_norms(w_down),
        target_expected_active=allocation.target_expected_active,
        calibrated_mean_active=allocation.calibrated_mean_active,
    )


def realize_mlp(
    mlp: DenseMlp,
    decompositions: Dict[str, RankDecomposition],
    allocation: MlpAllocation,
    calib: Optional[CalibrationSet] = None,
    masker: Optional[MaskerSettings] = None,
    seed: int = 0,
) -> RanaMlp:
    gate = None
    if allocation.gate is not None:
        gate = realize_layer(decompositions["gate"], allocation.gate, calib, masker, seed)
    return RanaMlp(
        up=realize_layer(decompositions["up"], allocation.up, calib, masker, seed),
        down_weights=mlp.down,
        down_masker=realize_down(mlp.down, allocation.down),
        gate=gate,
        kind=allocation.mlp_kind,
    )


def settle_mlp(
    mlp: DenseMlp,
    decompositions: Dict[str, RankDecomposition],
    allocation: MlpAllocation,
    adapted: RanaMlp,
    calib: CalibrationSet,
) -> MlpAllocation:
    """``settle_layer`` for Up and Gate, then the block's FLOPs and error recomputed."""
    up = settle_layer(decompositions["up"], allocation.up, adapted.up, calib)
    gate = allocation.gate
    if gate is not None:
        gate = settle_layer(decompositions["gate"], gate, adapted.gate, calib)
    if up is allocation.up and gate is allocation.gate:
        return allocation
    shape = mlp.shape
    down = allocation.down
    if adapted.down_masker is not None:
        active = mean_active(adapted.down_mask(adapted.hidden_batch(calib.x)))
        down = down.model_copy(
            update={
                "calibrated_mean_active": active,
                "achieved_flops": neuron_threshold_flops(shape.d, shape.h, active),
            }
        )
    residual = mlp.forward_batch(calib.x) - adapted.forward_batch(calib.x)
    return allocation.model_copy(
        update={
            "up": up,
            "gate": gate,
            "down": down,
            "achieved_flops": mlp_flops(
                shape,
                up=up.achieved_flops,
                down=down.achieved_flops,
                gate=gate.achieved_flops if gate is not None else None,
            ),
            "calib_error": float(np.mean(np.sum(residual**2, axis=0))),
        }
    )
