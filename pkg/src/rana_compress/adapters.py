"""
Compressed layers and the dense computations they replace.

Every layer exposes ``forward(x, counter=None)`` for a single input vector and
``forward_batch(X)`` for a matrix whose columns are inputs. Passing a
``FlopCounter`` to ``forward`` records the FLOPs actually executed, which must
agree with ``flop_model`` once the expected active count is replaced by the
realised one.
"""

from dataclasses import dataclass
from enum import Enum
from typing import Literal, Optional, Protocol, Union

import numpy as np
from scipy.special import expit

from .decomposition import RankDecomposition
from .errors import ShapeMismatchError
from .flop_model import (
    FlopCounter,
    MlpKind,
    MlpShape,
    dense_linear_flops,
)
from .kernels import MaskedGemvPlan
from .maskers import (
    AllOnesMasker,
    BMasker,
    NeuronThresholdMasker,
    OracleTopKMasker,
    SigmoidMlpMasker,
)

# tanh approximation of GeLU
GELU_COEFF = 0.044715
GELU_SCALE = float(np.sqrt(2.0 / np.pi))


def silu(x: np.ndarray) -> np.ndarray:
    return x * expit(x)


def gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + np.tanh(GELU_SCALE * (x + GELU_COEFF * x**3)))


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


ACTIVATIONS = {"swiglu": silu, "gelu": gelu, "relu": relu}


class Masker(Protocol):
    def mask(self, values: np.ndarray) -> np.ndarray: ...


def _check_input(x: np.ndarray, width: int, name: str) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[0] != width:
        raise ShapeMismatchError(f"{name} input has the wrong width", x.shape, (width,))
    return x


def _count(counter: Optional[FlopCounter], component: str, flops: float):
    if counter is not None:
        counter.add(component, flops)


# --- Dense references ---


@dataclass(frozen=True)
class DenseLinear:
    weight: np.ndarray

    @property
    def shape(self) -> tuple[int, int]:
        return int(self.weight.shape[0]), int(self.weight.shape[1])

    @property
    def in_dim(self) -> int:
        return int(self.weight.shape[1])

    @property
    def out_dim(self) -> int:
        return int(self.weight.shape[0])

    def forward(self, x: np.ndarray, counter: Optional[FlopCounter] = None) -> np.ndarray:
        x = _check_input(x, self.weight.shape[1], "dense layer")
        _count(counter, "dense", dense_linear_flops(*self.shape).total)
        return self.weight @ x

    def forward_batch(self, x: np.ndarray) -> np.ndarray:
        return self.weight @ _check_input(x, self.weight.shape[1], "dense layer")


@dataclass(frozen=True)
class DenseMlp:
    """``down(act(gate x) * up x)`` for SwiGLU, ``down(act(up x))`` otherwise."""

    up: np.ndarray  # h x d
    down: np.ndarray  # d x h
    gate: Optional[np.ndarray] = None  # h x d, SwiGLU only
    kind: MlpKind = "swiglu"

    def __post_init__(self):
        if (self.kind == "swiglu") != (self.gate is not None):
            raise ShapeMismatchError("a gate projection is required exactly for SwiGLU MLPs")
        if self.down.shape[1] != self.up.shape[0] or self.down.shape[0] != self.up.shape[1]:
            raise ShapeMismatchError("up/down projections disagree", self.up.shape, self.down.shape)

    @property
    def shape(self) -> MlpShape:
        return MlpShape(d=int(self.up.shape[1]), h=int(self.up.shape[0]), kind=self.kind)

    def hidden_batch(self, x: np.ndarray) -> np.ndarray:
        x = _check_input(x, self.up.shape[1], "MLP")
        if self.gate is not None:
            return silu(self.gate @ x) * (self.up @ x)
        return ACTIVATIONS[self.kind](self.up @ x)

    def forward(self, x: np.ndarray, counter: Optional[FlopCounter] = None) -> np.ndarray:
        shape = self.shape
        _count(counter, "dense", 2.0 * shape.h * shape.d * (3 if shape.gated else 2))
        _count(counter, "activation", shape.h)
        if shape.gated:
            _count(counter, "product", shape.h)
        return self.down @ self.hidden_batch(x)

    def forward_batch(self, x: np.ndarray) -> np.ndarray:
        return self.down @ self.hidden_batch(x)


# --- Rank adapters ---


@dataclass(frozen=True)
class RankAdaptedLinear:
    """
    ``A (m(x) * B x)``. Rank maskers (B-masker, oracle, all-ones) look at ``B x``;
    input maskers (sigmoid) look at ``x`` first so only the active rows of ``B``
    are multiplied.
    """

    a: np.ndarray  # o x D
    b: np.ndarray  # D x i
    masker: Masker
    original_shape: tuple[int, int]
    masker_source: Literal["projection", "input"] = "projection"

    def __post_init__(self):
        if self.a.shape[1] != self.b.shape[0]:
            raise ShapeMismatchError("A and B disagree on rank count", self.a.shape, self.b.shape)
        if isinstance(self.masker, SigmoidMlpMasker):
            if self.masker.output_dim != self.rank_count:
                raise ShapeMismatchError(
                    "sigmoid masker width does not match the kept ranks",
                    self.masker.c.shape,
                    self.b.shape,
                )
            object.__setattr__(self, "masker_source", "input")

    @classmethod
    def from_decomposition(
        cls, dec: RankDecomposition, masker: Optional[Masker] = None, ranks: Optional[int] = None
    ) -> "RankAdaptedLinear":
        if ranks is not None:
            dec = dec.truncate(ranks)
        return cls(
            a=dec.a,
            b=dec.b,
            masker=masker if masker is not None else AllOnesMasker(),
            original_shape=dec.source_shape,
        )

    @property
    def rank_count(self) -> int:
        return int(self.b.shape[0])

    @property
    def in_dim(self) -> int:
        return int(self.b.shape[1])

    @property
    def out_dim(self) -> int:
        return int(self.a.shape[0])

    def forward(
        self,
        x: np.ndarray,
        counter: Optional[FlopCounter] = None,
        mask: Optional[np.ndarray] = None,
        kernel: Optional[MaskedGemvPlan] = None,
    ) -> np.ndarray:
        x = _check_input(x, self.in_dim, "rank-adapted layer")
        d, o, i = self.rank_count, self.out_dim, self.in_dim
        if mask is not None or self.masker_source == "input":
            if mask is None:
                mask = self.masker.mask(x)
                sig = self.masker
                _count(
                    counter,
                    "masker",
                    2.0 * sig.inner_dim * i + 2.0 * d * sig.inner_dim + d,
                )
            active = np.flatnonzero(mask)
            projected = np.zeros(d)
            projected[active] = self.b[active] @ x
            _count(counter, "b_product", 2.0 * active.size * i)
        else:
            projected = self.b @ x
            _count(counter, "b_product", 2.0 * d * i)
            if isinstance(self.masker, AllOnesMasker):
                mask = np.ones(d)
            else:
                mask = self.masker.mask(projected)
                _count(counter, "masker", 2.0 * d)
        active_count = int(np.count_nonzero(mask))
        _count(counter, "a_product", 2.0 * o * active_count)
        if kernel is not None:
            return kernel.apply(mask, projected, counter=counter)
        return self.a @ (mask * projected)

    def masks_batch(self, x: np.ndarray) -> np.ndarray:
        x = _check_input(x, self.in_dim, "rank-adapted layer")
        if self.masker_source == "input":
            return self.masker.mask(x)
        return self.masker.mask(self.b @ x)

    def forward_batch(self, x: np.ndarray) -> np.ndarray:
        x = _check_input(x, self.in_dim, "rank-adapted layer")
        if self.masker_source == "input":
            return self.a @ (self.masker.mask(x) * (self.b @ x))
        projected = self.b @ x
        return self.a @ (self.masker.mask(projected) * projected)

    def materialized(self, mask: np.ndarray) -> np.ndarray:
        """``A diag(mask) B`` as an explicit o x i matrix."""
        return (self.a * mask) @ self.b


def forward_rank_adapted(
    layer: RankAdaptedLinear, x: np.ndarray, counter: Optional[FlopCounter] = None
) -> np.ndarray:
    return layer.forward(x, counter=counter)


@dataclass(frozen=True)
class RanaMlp:
    """
    Rank adapters on Up (and Gate) feeding a neuron-thresholded Down projection.
    The down masker sees the hidden vector ``h`` that enters Down.
    """

    up: Union[RankAdaptedLinear, DenseLinear]
    down_weights: np.ndarray  # d x h
    down_masker: Optional[NeuronThresholdMasker]
    gate: Optional[Union[RankAdaptedLinear, DenseLinear]] = None
    kind: MlpKind = "swiglu"

    def __post_init__(self):
        if (self.kind == "swiglu") != (self.gate is not None):
            raise ShapeMismatchError("a gate adapter is required exactly for SwiGLU MLPs")
        h = self.up.out_dim
        if self.down_weights.shape[1] != h:
            raise ShapeMismatchError(
                "down projection input width differs from the up output", self.down_weights.shape, (h,)
            )
        if self.gate is not None and self.gate.out_dim != h:
            raise ShapeMismatchError("gate and up output widths differ", (self.gate.out_dim,), (h,))

    @property
    def shape(self) -> MlpShape:
        return MlpShape(d=self.up.in_dim, h=self.up.out_dim, kind=self.kind)

    def hidden(self, x: np.ndarray, counter: Optional[FlopCounter] = None) -> np.ndarray:
        up_counter = FlopCounter() if counter is not None else None
        up = self.up.forward(x, counter=up_counter)
        h = up.shape[0]
        if self.gate is not None:
            gate_counter = FlopCounter() if counter is not None else None
            gate = self.gate.forward(x, counter=gate_counter)
            hidden = silu(gate) * up
            if counter is not None:
                _merge(counter, gate_counter, "gate")
                counter.add("activation", h)
                counter.add("product", h)
        else:
            hidden = ACTIVATIONS[self.kind](up)
            _count(counter, "activation", h)
        if counter is not None:
            _merge(counter, up_counter, "up")
        return hidden

    def hidden_batch(self, x: np.ndarray) -> np.ndarray:
        up = self.up.forward_batch(x)
        if self.gate is not None:
            return silu(self.gate.forward_batch(x)) * up
        return ACTIVATIONS[self.kind](up)

    def down_mask(self, hidden: np.ndarray) -> np.ndarray:
        if self.down_masker is None:
            return np.ones_like(hidden)
        return self.down_masker.mask(hidden)

    def forward(self, x: np.ndarray, counter: Optional[FlopCounter] = None) -> np.ndarray:
        x = _check_input(x, self.up.in_dim, "RaNA MLP")
        hidden = self.hidden(x, counter=counter)
        mask = self.down_mask(hidden)
        active = np.flatnonzero(mask)
        if self.down_masker is not None:
            _count(counter, "down.masker", 3.0 * hidden.shape[0])
            _count(counter, "down.down", 2.0 * self.down_weights.shape[0] * active.size)
        else:
            _count(counter, "down.dense", 2.0 * self.down_weights.size)
        return self.down_weights[:, active] @ hidden[active]

    def forward_batch(self, x: np.ndarray) -> np.ndarray:
        hidden = self.hidden_batch(x)
        return self.down_weights @ (self.down_mask(hidden) * hidden)


def _merge(counter: FlopCounter, part: FlopCounter, prefix: str):
    for name, value in part.breakdown.items():
        counter.add(f"{prefix}.{name}", value)
    counter.columns_read += part.columns_read


def forward_rana_mlp(
    mlp: RanaMlp, x: np.ndarray, counter: Optional[FlopCounter] = None
) -> np.ndarray:
    return mlp.forward(x, counter=counter)


# --- Rank adaptation generalises neuron adaptation ---


@dataclass(frozen=True)
class RankAdaptedMlp:
    """
    An MLP whose Up and Down projections are both rank adapters; the Down router
    is driven by the MLP input ``x``.
    """

    up: RankAdaptedLinear
    down: RankAdaptedLinear
    router: Optional[Masker] = None
    kind: MlpKind = "relu"

    def forward(self, x: np.ndarray, mask: Optional[np.ndarray] = None) -> np.ndarray:
        hidden = ACTIVATIONS[self.kind](self.up.forward(x))
        if mask is None:
            mask = self.router.mask(x) if self.router is not None else np.ones(self.down.rank_count)
        return self.down.forward(hidden, mask=mask)


def build_prop1_equivalent(
    w_up: np.ndarray, w_down: np.ndarray, neuron_masker: Optional[Masker] = None
) -> RankAdaptedMlp:
    """
    Rank-adapted ReLU MLP reproducing the neuron adapter
    ``W_down (m(x) * relu(W_up x))``: Up keeps ``A = I, B = W_up`` with every rank
    on, Down uses ``A = W_down, B = I`` routed by the neuron masker.
    """
    h, d = w_up.shape
    if w_down.shape != (d, h):
        raise ShapeMismatchError("down weights must be the transpose shape of up", w_down.shape, (d, h))
    up = RankAdaptedLinear(a=np.eye(h), b=w_up, masker=AllOnesMasker(), original_shape=(h, d))
    down = RankAdaptedLinear(
        a=w_down, b=np.eye(h), masker=AllOnesMasker(), original_shape=(d, h)
    )
    return RankAdaptedMlp(up=up, down=down, router=neuron_masker, kind="relu")


def neuron_adapted_relu_mlp(
    w_up: np.ndarray, w_down: np.ndarray, x: np.ndarray, mask: np.ndarray
) -> np.ndarray:
    """Direct neuron-adapter evaluation ``W_down (m * relu(W_up x))``."""
    return w_down @ (mask * relu(w_up @ x))


# --- Baselines ---


class BaselineKind(str, Enum):
    NEURON_ADAPTER = "neuron"
    CATS_LIKE = "cats"
    FIXED_SVD = "fixed_svd"
    LLRA = "llra"


@dataclass(frozen=True)
class NeuronAdapterMlp:
    """Neuron adapter: a sigmoid masker over hidden neurons picks which to compute."""

    mlp: DenseMlp
    masker: SigmoidMlpMasker
    kind: BaselineKind = BaselineKind.NEURON_ADAPTER

    def forward(self, x: np.ndarray, counter: Optional[FlopCounter] = None) -> np.ndarray:
        x = _check_input(x, self.mlp.up.shape[1], "neuron adapter")
        shape = self.mlp.shape
        active = np.flatnonzero(self.masker.mask(x))
        sig = self.masker
        _count(counter, "masker", 2.0 * sig.inner_dim * shape.d + 2.0 * shape.h * sig.inner_dim + shape.h)
        up = self.mlp.up[active] @ x
        if self.mlp.gate is not None:
            hidden = silu(self.mlp.gate[active] @ x) * up
            _count(counter, "gate", 2.0 * shape.d * active.size)
            _count(counter, "product", active.size)
        else:
            hidden = ACTIVATIONS[self.mlp.kind](up)
        _count(counter, "up", 2.0 * shape.d * active.size)
        _count(counter, "activation", active.size)
        _count(counter, "down", 2.0 * shape.d * active.size)
        return self.mlp.down[:, active] @ hidden

    def forward_batch(self, x: np.ndarray) -> np.ndarray:
        mask = self.masker.mask(x)
        return self.mlp.down @ (mask * self.mlp.hidden_batch(x))


@dataclass(frozen=True)
class CatsMlp:
    """Computes the full gate activation, then keeps neurons with ``|silu(g_i)| >= t``."""

    mlp: DenseMlp
    threshold: float
    kind: BaselineKind = BaselineKind.CATS_LIKE

    def __post_init__(self):
        if self.mlp.gate is None:
            raise ShapeMismatchError("the CATS-like baseline needs a gated MLP")

    def forward(self, x: np.ndarray, counter: Optional[FlopCounter] = None) -> np.ndarray:
        x = _check_input(x, self.mlp.up.shape[1], "CATS-like adapter")
        shape = self.mlp.shape
        gate = silu(self.mlp.gate @ x)
        _count(counter, "gate", 2.0 * shape.h * shape.d)
        _count(counter, "activation", shape.h)
        active = np.flatnonzero(np.abs(gate) >= self.threshold)
        _count(counter, "masker", 2.0 * shape.h)
        hidden = gate[active] * (self.mlp.up[active] @ x)
        _count(counter, "up", 2.0 * shape.d * active.size)
        _count(counter, "product", active.size)
        _count(counter, "down", 2.0 * shape.d * active.size)
        return self.mlp.down[:, active] @ hidden

    def forward_batch(self, x: np.ndarray) -> np.ndarray:
        gate = silu(self.mlp.gate @ x)
        keep = (np.abs(gate) >= self.threshold).astype(np.float64)
        return self.mlp.down @ (keep * gate * (self.mlp.up @ x))


@dataclass(frozen=True)
class FixedSvdLinear:
    """Static rank-r truncation ``A_r B_r x``."""

    a: np.ndarray
    b: np.ndarray
    kind: BaselineKind = BaselineKind.FIXED_SVD

    @classmethod
    def from_decomposition(cls, dec: RankDecomposition, ranks: int) -> "FixedSvdLinear":
        part = dec.truncate(ranks)
        return cls(a=part.a, b=part.b)

    @property
    def rank_count(self) -> int:
        return int(self.b.shape[0])

    def forward(self, x: np.ndarray, counter: Optional[FlopCounter] = None) -> np.ndarray:
        x = _check_input(x, self.b.shape[1], "fixed SVD layer")
        _count(counter, "b_product", 2.0 * self.b.shape[0] * self.b.shape[1])
        _count(counter, "a_product", 2.0 * self.a.shape[0] * self.a.shape[1])
        return self.a @ (self.b @ x)

    def forward_batch(self, x: np.ndarray) -> np.ndarray:
        return self.a @ (self.b @ x)


@dataclass(frozen=True)
class FixedSvdMlp:
    up: FixedSvdLinear
    down: FixedSvdLinear
    gate: Optional[FixedSvdLinear] = None
    mlp_kind: MlpKind = "swiglu"
    kind: BaselineKind = BaselineKind.FIXED_SVD

    def forward(self, x: np.ndarray, counter: Optional[FlopCounter] = None) -> np.ndarray:
        x = _check_input(x, self.up.b.shape[1], "fixed SVD MLP")
        parts = {name: FlopCounter() if counter is not None else None for name in ("up", "gate", "down")}
        up = self.up.forward(x, counter=parts["up"])
        h = up.shape[0]
        if self.gate is not None:
            hidden = silu(self.gate.forward(x, counter=parts["gate"])) * up
            _count(counter, "product", h)
        else:
            hidden = ACTIVATIONS[self.mlp_kind](up)
        _count(counter, "activation", h)
        out = self.down.forward(hidden, counter=parts["down"])
        if counter is not None:
            for name, part in parts.items():
                _merge(counter, part, name)
        return out

    def forward_batch(self, x: np.ndarray) -> np.ndarray:
        up = self.up.forward_batch(x)
        if self.gate is not None:
            hidden = silu(self.gate.forward_batch(x)) * up
        else:
            hidden = ACTIVATIONS[self.mlp_kind](up)
        return self.down.forward_batch(hidden)


BaselineAdapter = Union[NeuronAdapterMlp, CatsMlp, FixedSvdLinear, FixedSvdMlp, RankAdaptedLinear]


def forward_baseline(
    adapter: BaselineAdapter, x: np.ndarray, counter: Optional[FlopCounter] = None
) -> np.ndarray:
    return adapter.forward(x, counter=counter)


def masker_for_rank(
    layer: RankAdaptedLinear, masker: Union[BMasker, OracleTopKMasker, AllOnesMasker]
) -> RankAdaptedLinear:
    return RankAdaptedLinear(
        a=layer.a, b=layer.b, masker=masker, original_shape=layer.original_shape
    )
