"""
Input-adaptive maskers deciding which ranks (or neurons) a given input uses.

- ``BMasker``: keeps rank j when ``(B x)_j ** 2 >= t``.
- ``NeuronThresholdMasker``: keeps hidden neuron i when ``|h_i| * ||w_i|| >= t``,
  where ``w_i`` are the down-projection weights fed by neuron i.
- ``SigmoidMlpMasker``: a learned predictor ``sigmoid(C D x)``, trained with binary
  cross-entropy to imitate a B-masker so masked rows of B never need computing.
- ``oracle_topk``: the per-sample best k ranks, used as a reference.

Thresholds are calibrated so that the mean number of active entries over the
calibration set matches a target, which fixes the expected FLOPs.
"""

import sys
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.special import expit

from .decomposition import CalibrationSet, ContributionStats, RankDecomposition
from .errors import CalibrationError, MaskerTrainingError, ShapeMismatchError
from .tensor_core import as_matrix, keep_threshold, matmul

# Calibrated mean active counts must land within this relative band of the target
CALIBRATION_TOLERANCE = 0.02

DEFAULT_DECISION_CUTOFF = 0.5


def _check_calibration(kind: str, mean_active: float, target: float):
    if target > 0 and abs(mean_active - target) > CALIBRATION_TOLERANCE * target:
        print(
            f"Warning: {kind} calibrated to {mean_active:.3f} active on average "
            f"(target {target:.3f}); ties in the statistic prevent an exact match",
            file=sys.stderr,
        )


@dataclass(frozen=True)
class BMasker:
    threshold: float
    target_expected_active: float
    calibrated_mean_active: float

    def mask(self, bx: np.ndarray) -> np.ndarray:
        """Binary mask over ranks; accepts one vector or a D x n batch."""
        return (bx**2 >= self.threshold).astype(np.float64)


@dataclass(frozen=True)
class NeuronThresholdMasker:
    threshold: float
    row_norms: np.ndarray  # per hidden neuron
    target_expected_active: float
    calibrated_mean_active: float = 0.0

    def mask(self, hidden: np.ndarray) -> np.ndarray:
        norms = self.row_norms if hidden.ndim == 1 else self.row_norms[:, None]
        return (np.abs(hidden) * norms >= self.threshold).astype(np.float64)


@dataclass(frozen=True)
class SigmoidMlpMasker:
    c: np.ndarray  # D x r'
    d: np.ndarray  # r' x i
    decision_cutoff: float = DEFAULT_DECISION_CUTOFF
    loss_history: list[float] = field(default_factory=list)

    @property
    def inner_dim(self) -> int:
        return int(self.d.shape[0])

    @property
    def output_dim(self) -> int:
        return int(self.c.shape[0])

    def probabilities(self, x: np.ndarray) -> np.ndarray:
        return expit(self.c @ (self.d @ x))

    def mask(self, x: np.ndarray) -> np.ndarray:
        return (self.probabilities(x) >= self.decision_cutoff).astype(np.float64)

    def with_cutoff(self, cutoff: float) -> "SigmoidMlpMasker":
        return SigmoidMlpMasker(
            c=self.c, d=self.d, decision_cutoff=cutoff, loss_history=self.loss_history
        )


@dataclass(frozen=True)
class OracleTopKMasker:
    k: int

    def mask(self, bx: np.ndarray) -> np.ndarray:
        if bx.ndim == 1:
            return oracle_topk(bx, self.k)
        return np.stack([oracle_topk(col, self.k) for col in bx.T], axis=1)


class AllOnesMasker:
    """Keeps every rank; the unmasked low-rank product."""

    def mask(self, values: np.ndarray) -> np.ndarray:
        return np.ones_like(values, dtype=np.float64)


def calibrate_b_masker(stats: ContributionStats, target_r: float) -> BMasker:
    d = stats.rank_count
    if not 0 < target_r <= d:
        raise CalibrationError(f"target expected rank {target_r} outside (0, {d}]")
    pooled = stats.contributions
    threshold = keep_threshold(pooled, target_r / d)
    mean_active = float(np.mean(np.sum(pooled >= threshold, axis=0)))
    _check_calibration("B-masker", mean_active, target_r)
    return BMasker(
        threshold=threshold,
        target_expected_active=float(target_r),
        calibrated_mean_active=mean_active,
    )


def apply_b_masker(masker: BMasker, bx: np.ndarray) -> np.ndarray:
    return masker.mask(np.asarray(bx, dtype=np.float64))


def down_row_norms(w_down: np.ndarray) -> np.ndarray:
    """Norm of the down-projection weights each hidden neuron feeds (columns of d x h)."""
    return np.linalg.norm(as_matrix(w_down, "down weights"), axis=0)


def calibrate_neuron_masker(
    w_down: np.ndarray, calib_hidden: np.ndarray, target_active: float
) -> NeuronThresholdMasker:
    w_down = as_matrix(w_down, "down weights")
    calib_hidden = as_matrix(calib_hidden, "calibration hidden states")
    h = w_down.shape[1]
    if calib_hidden.shape[0] != h:
        raise ShapeMismatchError(
            "hidden calibration rows must match the down-projection input width",
            calib_hidden.shape,
            w_down.shape,
        )
    if not 0 < target_active <= h:
        raise CalibrationError(f"target active neurons {target_active} outside (0, {h}]")
    norms = down_row_norms(w_down)
    if not np.any(norms):
        raise CalibrationError("all row norms zero")
    statistic = np.abs(calib_hidden) * norms[:, None]
    threshold = keep_threshold(statistic, target_active / h)
    mean_active = float(np.mean(np.sum(statistic >= threshold, axis=0)))
    _check_calibration("neuron masker", mean_active, target_active)
    return NeuronThresholdMasker(
        threshold=threshold,
        row_norms=norms,
        target_expected_active=float(target_active),
        calibrated_mean_active=mean_active,
    )


def oracle_topk(bx: np.ndarray, k: int) -> np.ndarray:
    """Keeps the k largest ``bx_j ** 2``; ties go to the lower index."""
    bx = np.asarray(bx, dtype=np.float64)
    if k > bx.shape[0]:
        raise ValueError(f"k={k} exceeds the {bx.shape[0]} available ranks")
    mask = np.zeros_like(bx)
    order = np.argsort(-(bx**2), kind="stable")
    mask[order[:k]] = 1.0
    return mask


# --- Sigmoid masker training ---


def bce_loss_and_gradients(
    c: np.ndarray, d: np.ndarray, x: np.ndarray, labels: np.ndarray
) -> tuple[float, np.ndarray, np.ndarray]:
    """
    Mean binary cross-entropy of ``sigmoid(C D X)`` against ``labels`` and its
    analytic gradients with respect to ``C`` and ``D``.
    """
    hidden = d @ x
    logits = c @ hidden
    count = labels.size
    # log(1 + e^z) - y z, stable for large |z|
    loss = float(np.sum(np.logaddexp(0.0, logits) - labels * logits) / count)
    dlogits = (expit(logits) - labels) / count
    grad_c = dlogits @ hidden.T
    grad_d = (c.T @ dlogits) @ x.T
    return loss, grad_c, grad_d


def fit_sigmoid_masker(
    x: np.ndarray,
    labels: np.ndarray,
    inner_dim: int,
    epochs: int = 100,
    lr: float = 0.1,
    momentum: float = 0.9,
    batch_size: int = 32,
    seed: int = 0,
) -> SigmoidMlpMasker:
    """
    Trains ``sigmoid(C D x)`` on (input column, binary label column) pairs with
    mini-batch SGD plus momentum. Returns the weights with the lowest full-set
    loss seen; raises ``MaskerTrainingError`` if no epoch beat the initial loss.
    """
    x = as_matrix(x, "masker inputs")
    labels = as_matrix(labels, "masker labels")
    if inner_dim < 1:
        raise ValueError("masker inner dimension must be at least 1")
    if labels.shape[1] != x.shape[1]:
        raise ShapeMismatchError("labels and inputs disagree on sample count", labels.shape, x.shape)
    rng = np.random.default_rng(seed)
    in_dim, samples = x.shape
    out_dim = labels.shape[0]
    d = rng.normal(0.0, 1.0 / np.sqrt(in_dim), size=(inner_dim, in_dim))
    c = rng.normal(0.0, 1.0 / np.sqrt(inner_dim), size=(out_dim, inner_dim))
    vel_c = np.zeros_like(c)
    vel_d = np.zeros_like(d)

    best_loss, _, _ = bce_loss_and_gradients(c, d, x, labels)
    best = (c.copy(), d.copy())
    history = [best_loss]
    for epoch in range(epochs):
        order = rng.permutation(samples)
        for start in range(0, samples, batch_size):
            batch = order[start : start + batch_size]
            _, grad_c, grad_d = bce_loss_and_gradients(c, d, x[:, batch], labels[:, batch])
            vel_c = momentum * vel_c - lr * grad_c
            vel_d = momentum * vel_d - lr * grad_d
            c = c + vel_c
            d = d + vel_d
        loss, _, _ = bce_loss_and_gradients(c, d, x, labels)
        if not np.isfinite(loss):
            raise MaskerTrainingError("sigmoid masker training diverged", epoch)
        history.append(loss)
        if loss < best_loss:
            best_loss = loss
            best = (c.copy(), d.copy())
    if not best_loss < history[0]:
        raise MaskerTrainingError(
            f"sigmoid masker training never improved on the initial loss {history[0]:.6g}", epochs
        )
    return SigmoidMlpMasker(c=best[0], d=best[1], loss_history=history)


def train_sigmoid_masker(
    label_masker: BMasker,
    dec: RankDecomposition,
    calib: CalibrationSet,
    inner_dim: int,
    epochs: int = 100,
    lr: float = 0.1,
    seed: int = 0,
    momentum: float = 0.9,
    batch_size: int = 32,
) -> SigmoidMlpMasker:
    """Fits a sigmoid masker to the B-masker's decisions on the calibration inputs."""
    labels = label_masker.mask(matmul(dec.b, calib.x))
    return fit_sigmoid_masker(
        calib.x,
        labels,
        inner_dim,
        epochs=epochs,
        lr=lr,
        momentum=momentum,
        batch_size=batch_size,
        seed=seed,
    )


def apply_sigmoid_masker(masker: SigmoidMlpMasker, x: np.ndarray) -> np.ndarray:
    return masker.mask(np.asarray(x, dtype=np.float64))


def calibrate_cutoff(
    masker: SigmoidMlpMasker, x: np.ndarray, target_active: float
) -> SigmoidMlpMasker:
    """Moves the decision cutoff so the mean active count on ``x`` meets the target."""
    probs = masker.probabilities(as_matrix(x, "calibration inputs"))
    cutoff = keep_threshold(probs, target_active / masker.output_dim)
    return masker.with_cutoff(cutoff)


def mean_active(mask: np.ndarray) -> float:
    return float(np.mean(np.sum(mask, axis=0)))


def sigmoid_inner_dim(flop_budget: float, out_dim: int, in_dim: int) -> int:
    """Largest r' whose masker cost ``2 r' i + 2 D r' + D`` fits the budget (at least 1)."""
    return max(int((flop_budget - out_dim) // (2 * (in_dim + out_dim))), 1)


def default_inner_dim(out_dim: int, in_dim: int, inner_dim: Optional[int] = None) -> int:
    if inner_dim:
        return inner_dim
    return max(min(out_dim, in_dim) // 4, 1)
