"""Class-weighted softmax cross-entropy, class-weighted center loss, and the
running class-center bank.

Labels are 0-based class indices throughout the package.

With per-sample weights ``w_i = omega[y_i]`` and ``W = sum_i w_i``::

    L_s = -(1/W) sum_i w_i log softmax(logits_i)[y_i]
    L_c =  (1/W) sum_i w_i ||z_i - c_{y_i}||^2
    L   = L_s + lambda * L_c

Centers are constants for differentiation; they move only through
:func:`update_centers`, an exponential moving average toward the per-class
mean of each mini-batch.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class LossError(ValueError):
    pass


class LabelError(LossError):
    pass


@dataclass(frozen=True)
class ClassWeights:
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 1 or v.size < 1 or np.any(v <= 0) or not np.all(np.isfinite(v)):
            raise LossError(f"class weights must be positive and finite, got {v}")
        object.__setattr__(self, "values", v / v.mean())

    @classmethod
    def uniform(cls, n_classes: int) -> "ClassWeights":
        return cls(np.ones(n_classes))

    @property
    def n_classes(self) -> int:
        return self.values.size


@dataclass
class CenterBank:
    centers: np.ndarray
    alpha: float = 0.5
    t: int = 0

    def __post_init__(self):
        self.centers = np.asarray(self.centers, dtype=np.float64)
        if self.centers.ndim != 2:
            raise LossError("centers must be an (n_classes, d) matrix")
        if not 0.0 <= self.alpha <= 1.0:
            raise LossError(f"alpha must lie in [0, 1], got {self.alpha}")

    @classmethod
    def zeros(cls, n_classes: int, dim: int, alpha: float = 0.5) -> "CenterBank":
        return cls(np.zeros((n_classes, dim)), alpha, 0)

    def copy(self) -> "CenterBank":
        return CenterBank(self.centers.copy(), self.alpha, self.t)


@dataclass(frozen=True)
class JointLossConfig:
    lam: float = 0.3

    def __post_init__(self):
        if self.lam < 0:
            raise LossError("lambda must be nonnegative")


@dataclass
class BatchCenters:
    centers: np.ndarray
    counts: np.ndarray
    present: np.ndarray = field(init=False)

    def __post_init__(self):
        self.present = self.counts > 0


def _check_labels(labels, n_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.ndim != 1 or not np.issubdtype(labels.dtype, np.integer):
        raise LabelError("labels must be a 1-D integer array")
    bad = (labels < 0) | (labels >= n_classes)
    if np.any(bad):
        i = int(np.argmax(bad))
        raise LabelError(f"label {labels[i]} at position {i} outside 0..{n_classes - 1}")
    return labels


def _sample_weights(labels, weights: ClassWeights | None, n_classes: int) -> np.ndarray:
    if weights is None:
        return np.ones(len(labels))
    if weights.n_classes != n_classes:
        raise LossError(f"{weights.n_classes} class weights for {n_classes} classes")
    return weights.values[labels]


def log_softmax(logits: np.ndarray) -> np.ndarray:
    m = logits.max(axis=1, keepdims=True)
    shifted = logits - m
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def weighted_softmax_ce(logits, labels, weights: ClassWeights | None = None) -> float:
    logits = np.asarray(logits, dtype=np.float64)
    labels = _check_labels(labels, logits.shape[1])
    w = _sample_weights(labels, weights, logits.shape[1])
    picked = log_softmax(logits)[np.arange(len(labels)), labels]
    return float(-(w @ picked) / w.sum())


def weighted_center_loss(z, labels, bank: CenterBank, weights: ClassWeights | None = None) -> float:
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 2 or z.shape[1] != bank.centers.shape[1]:
        raise LossError(f"features {z.shape} do not match centers {bank.centers.shape}")
    labels = _check_labels(labels, bank.centers.shape[0])
    w = _sample_weights(labels, weights, bank.centers.shape[0])
    sq = np.sum((z - bank.centers[labels]) ** 2, axis=1)
    return float((w @ sq) / w.sum())


def joint_loss(l_s: float, l_c: float, cfg: JointLossConfig | float) -> float:
    lam = cfg.lam if isinstance(cfg, JointLossConfig) else float(cfg)
    return l_s + lam * l_c


def batch_class_centers(z, labels, n_classes: int) -> BatchCenters:
    """Per-class mean of the batch features; absent classes keep a zero row and count 0."""
    z = np.asarray(z, dtype=np.float64)
    labels = _check_labels(labels, n_classes)
    counts = np.bincount(labels, minlength=n_classes)
    sums = np.zeros((n_classes, z.shape[1]))
    np.add.at(sums, labels, z)
    centers = np.zeros_like(sums)
    present = counts > 0
    centers[present] = sums[present] / counts[present, None]
    return BatchCenters(centers, counts)


def update_centers(bank: CenterBank, batch: BatchCenters) -> CenterBank:
    """One moving-average step toward the batch centers; absent classes untouched."""
    if batch.centers.shape != bank.centers.shape:
        raise LossError(f"batch centers {batch.centers.shape} vs bank {bank.centers.shape}")
    new = bank.centers.copy()
    p = batch.present
    new[p] = (1.0 - bank.alpha) * bank.centers[p] + bank.alpha * batch.centers[p]
    return CenterBank(new, bank.alpha, bank.t + 1)


def loss_gradients(logits, z, labels, bank: CenterBank, weights: ClassWeights | None,
                   lam: float, fc2_weight=None) -> tuple[np.ndarray, np.ndarray]:
    """Analytic (dL/dlogits, dL/dz) of the joint loss.

    Without ``fc2_weight`` the returned dL/dz holds only the center-loss term;
    the cross-entropy contribution reaches z by backpropagating dL/dlogits
    through FC2.  Passing the FC2 weight adds that path explicitly.
    """
    logits = np.asarray(logits, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    labels = _check_labels(labels, logits.shape[1])
    w = _sample_weights(labels, weights, logits.shape[1])
    scale = (w / w.sum())[:, None]
    probs = np.exp(log_softmax(logits))
    probs[np.arange(len(labels)), labels] -= 1.0
    d_logits = scale * probs
    d_z = 2.0 * lam * scale * (z - bank.centers[labels])
    if fc2_weight is not None:
        d_z = d_z + d_logits @ np.asarray(fc2_weight).T
    return d_logits, d_z


# Tensor versions, for differentiating the whole objective on a tape.

def weighted_softmax_ce_tensor(logits: Tensor, labels, weights: ClassWeights | None = None) -> Tensor:
    labels = _check_labels(labels, logits.shape[1])
    w = _sample_weights(labels, weights, logits.shape[1])
    onehot = np.zeros(logits.shape)
    onehot[np.arange(len(labels)), labels] = 1.0
    picked = (logits * onehot).sum(axis=1)
    nll = ad.logsumexp(logits, axis=1) - picked
    return (nll * (w / w.sum())).sum()


def weighted_center_loss_tensor(z: Tensor, labels, bank: CenterBank, weights: ClassWeights | None = None) -> Tensor:
    labels = _check_labels(labels, bank.centers.shape[0])
    w = _sample_weights(labels, weights, bank.centers.shape[0])
    diff = z - bank.centers[labels]
    return ((diff * diff).sum(axis=1) * (w / w.sum())).sum()
