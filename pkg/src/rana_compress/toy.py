"""
Small deterministic models used as fixtures: a SwiGLU MLP briefly trained on
anisotropic inputs, and a pre-norm toy transformer whose QKV and MLP layers can
be swapped for adapted ones.
"""

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np
from scipy.special import expit, softmax

from .adapters import DenseMlp, silu
from .errors import ConfigError, ShapeMismatchError

MAX_TOY_BLOCKS = 4
MAX_TOY_WIDTH = 128
RMS_EPS = 1e-6

# Input spectrum decays by this factor per direction
INPUT_DECAY = 0.7


def anisotropic_inputs(
    width: int, samples: int, seed: int, decay: float = INPUT_DECAY
) -> np.ndarray:
    """``width x samples`` Gaussian inputs whose covariance has a geometric spectrum."""
    rng = np.random.default_rng(seed)
    basis, _ = np.linalg.qr(rng.standard_normal((width, width)))
    scales = decay ** np.arange(width)
    return basis @ (scales[:, None] * rng.standard_normal((width, samples)))


def decaying_matrix(rows: int, cols: int, rng: np.random.Generator, decay: float = 0.85) -> np.ndarray:
    """
    Random matrix with singular values proportional to ``decay ** j``. The
    Frobenius norm matches an i.i.d. init with variance ``1 / cols``.
    """
    u, _ = np.linalg.qr(rng.standard_normal((rows, rows)))
    v, _ = np.linalg.qr(rng.standard_normal((cols, cols)))
    p = min(rows, cols)
    s = decay ** np.arange(p)
    s *= np.sqrt(rows) / np.linalg.norm(s)
    return (u[:, :p] * s) @ v[:, :p].T


# --- Trained toy SwiGLU MLP ---


@dataclass(frozen=True)
class ToyMlp:
    mlp: DenseMlp
    inputs: np.ndarray  # d x k activations the MLP was trained on
    loss_history: List[float] = field(default_factory=list)


def _swiglu_gradients(mlp: DenseMlp, x: np.ndarray, target: np.ndarray):
    gate = mlp.gate @ x
    up = mlp.up @ x
    act = silu(gate)
    hidden = act * up
    y = mlp.down @ hidden
    n = x.shape[1]
    residual = y - target
    loss = float(np.sum(residual**2) / (2 * n))
    dy = residual / n
    d_down = dy @ hidden.T
    dh = mlp.down.T @ dy
    d_up = (dh * act) @ x.T
    sig = expit(gate)
    d_gate = (dh * up * sig * (1.0 + gate * (1.0 - sig))) @ x.T
    return loss, d_up, d_gate, d_down


def train_toy_swiglu(
    d: int = 16,
    h: int = 32,
    samples: int = 512,
    seed: int = 0,
    steps: int = 200,
    lr: float = 0.05,
    clip: float = 1.0,
) -> ToyMlp:
    """
    Fits a SwiGLU MLP to a fixed random nonlinear target on anisotropic inputs
    with clipped full-batch gradient descent.
    """
    rng = np.random.default_rng(seed)
    x = anisotropic_inputs(d, samples, seed + 1)
    mixing = rng.standard_normal((d, d)) / np.sqrt(d)
    target = np.tanh(mixing @ x) + 0.5 * mixing @ x

    mlp = DenseMlp(
        up=rng.standard_normal((h, d)) / np.sqrt(d),
        down=rng.standard_normal((d, h)) / np.sqrt(h),
        gate=rng.standard_normal((h, d)) / np.sqrt(d),
        kind="swiglu",
    )
    history = []
    for _ in range(steps):
        loss, d_up, d_gate, d_down = _swiglu_gradients(mlp, x, target)
        history.append(loss)
        norm = np.sqrt(sum(np.sum(g**2) for g in (d_up, d_gate, d_down)))
        scale = lr * min(1.0, clip / norm) if norm > 0 else 0.0
        mlp = DenseMlp(
            up=mlp.up - scale * d_up,
            down=mlp.down - scale * d_down,
            gate=mlp.gate - scale * d_gate,
            kind="swiglu",
        )
    return ToyMlp(mlp=mlp, inputs=x, loss_history=history)


def random_toy_mlp(d: int, h: int, seed: int, kind: str = "swiglu") -> DenseMlp:
    rng = np.random.default_rng(seed)
    return DenseMlp(
        up=decaying_matrix(h, d, rng),
        down=decaying_matrix(d, h, rng),
        gate=decaying_matrix(h, d, rng) if kind == "swiglu" else None,
        kind=kind,
    )


# --- Toy transformer ---


def rms_norm(x: np.ndarray, gain: np.ndarray) -> np.ndarray:
    scale = np.sqrt(np.mean(x**2, axis=0, keepdims=True) + RMS_EPS)
    return gain[:, None] * x / scale


def causal_attention(q: np.ndarray, k: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Single-head causal attention over the columns (positions) of one sequence."""
    width, length = q.shape
    scores = (q.T @ k) / np.sqrt(width)
    scores = np.where(np.tril(np.ones((length, length), dtype=bool)), scores, -np.inf)
    return v @ softmax(scores, axis=1).T


@dataclass(frozen=True)
class ToyBlock:
    attn_norm: np.ndarray  # w
    qkv: np.ndarray  # 3w x w, fused
    out: np.ndarray  # w x w
    mlp_norm: np.ndarray  # w
    mlp: DenseMlp


@dataclass
class BlockTrace:
    """Per-block inputs of the adaptable layers and the residual stream after the block."""

    qkv_inputs: List[np.ndarray] = field(default_factory=list)
    mlp_inputs: List[np.ndarray] = field(default_factory=list)
    outputs: List[np.ndarray] = field(default_factory=list)


@dataclass(frozen=True)
class ToyTransformer:
    embed: np.ndarray  # vocab x w
    blocks: List[ToyBlock]
    final_norm: np.ndarray
    head: np.ndarray  # vocab x w

    @property
    def width(self) -> int:
        return int(self.embed.shape[1])

    @property
    def vocab(self) -> int:
        return int(self.embed.shape[0])

    def forward(
        self,
        tokens: np.ndarray,
        layers: Optional[Dict[int, Tuple[object, object]]] = None,
        trace: Optional[BlockTrace] = None,
    ) -> np.ndarray:
        """
        Logits (vocab x length) for one token sequence. ``layers`` maps a block
        index to replacement ``(qkv, mlp)`` objects exposing ``forward_batch``;
        either entry may be None to keep the dense one.
        """
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.ndim != 1:
            raise ShapeMismatchError("token sequence must be 1-D", tokens.shape, None)
        w = self.width
        x = self.embed[tokens].T
        layers = layers or {}
        for index, block in enumerate(self.blocks):
            qkv_layer, mlp_layer = layers.get(index, (None, None))
            normed = rms_norm(x, block.attn_norm)
            qkv = qkv_layer.forward_batch(normed) if qkv_layer is not None else block.qkv @ normed
            x = x + block.out @ causal_attention(qkv[:w], qkv[w : 2 * w], qkv[2 * w :])
            normed_mlp = rms_norm(x, block.mlp_norm)
            mlp_out = mlp_layer.forward_batch(normed_mlp) if mlp_layer is not None else block.mlp.forward_batch(normed_mlp)
            x = x + mlp_out
            if trace is not None:
                trace.qkv_inputs.append(normed)
                trace.mlp_inputs.append(normed_mlp)
                trace.outputs.append(x)
        return self.head @ rms_norm(x, self.final_norm)

    def collect(
        self, sequences: List[np.ndarray], layers: Optional[Dict[int, Tuple[object, object]]] = None
    ) -> Tuple[List[np.ndarray], BlockTrace]:
        """Runs every sequence and concatenates per-block traces along the sample axis."""
        logits = []
        traces = []
        for tokens in sequences:
            trace = BlockTrace()
            logits.append(self.forward(tokens, layers=layers, trace=trace))
            traces.append(trace)
        merged = BlockTrace()
        for index in range(len(self.blocks)):
            merged.qkv_inputs.append(np.concatenate([t.qkv_inputs[index] for t in traces], axis=1))
            merged.mlp_inputs.append(np.concatenate([t.mlp_inputs[index] for t in traces], axis=1))
            merged.outputs.append(np.concatenate([t.outputs[index] for t in traces], axis=1))
        return logits, merged


def make_toy_transformer(
    blocks: int = 2,
    width: int = 32,
    hidden: Optional[int] = None,
    vocab: int = 64,
    seed: int = 0,
) -> ToyTransformer:
    if not 1 <= blocks <= MAX_TOY_BLOCKS:
        raise ConfigError(f"toy transformer needs 1 to {MAX_TOY_BLOCKS} blocks, got {blocks}")
    if not 1 <= width <= MAX_TOY_WIDTH:
        raise ConfigError(f"toy transformer width must be at most {MAX_TOY_WIDTH}, got {width}")
    hidden = hidden or 4 * width
    rng = np.random.default_rng(seed)
    layer_list = []
    for _ in range(blocks):
        mlp = DenseMlp(
            up=decaying_matrix(hidden, width, rng),
            down=decaying_matrix(width, hidden, rng) * 0.5,
            gate=decaying_matrix(hidden, width, rng),
            kind="swiglu",
        )
        layer_list.append(
            ToyBlock(
                attn_norm=np.ones(width),
                qkv=decaying_matrix(3 * width, width, rng),
                out=decaying_matrix(width, width, rng) * 0.5,
                mlp_norm=np.ones(width),
                mlp=mlp,
            )
        )
    return ToyTransformer(
        embed=rng.standard_normal((vocab, width)),
        blocks=layer_list,
        final_norm=np.ones(width),
        head=rng.standard_normal((vocab, width)) / np.sqrt(width),
    )


def token_sequences(vocab: int, count: int, length: int, seed: int) -> List[np.ndarray]:
    rng = np.random.default_rng(seed)
    return [rng.integers(0, vocab, size=length) for _ in range(count)]
