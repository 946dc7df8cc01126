"""Mini-batch training of the encoder with the joint loss, Adam, and
best-dev-UA model selection."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, fields, replace
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from . import model as M
from .evaluation import confusion_matrix, ua, wa
from .losses import (
    CenterBank,
    ClassWeights,
    LossError,
    batch_class_centers,
    loss_gradients,
    update_centers,
    weighted_center_loss,
    weighted_softmax_ce,
)

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


class NumericError(TrainingError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 3e-4
    batch_size: int = 32
    lam: float = 0.3
    alpha: float = 0.5
    max_epochs: int = 100
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    # global-norm clip; None disables
    grad_clip: float | None = None

    def __post_init__(self):
        if self.learning_rate <= 0 or self.batch_size < 1 or self.max_epochs < 0:
            raise ValueError("need learning_rate > 0, batch_size >= 1, max_epochs >= 0")
        if self.lam < 0 or not 0.0 <= self.alpha <= 1.0:
            raise ValueError("need lambda >= 0 and alpha in [0, 1]")

    @classmethod
    def from_mapping(cls, values: Mapping[str, str], base: "TrainConfig | None" = None) -> "TrainConfig":
        base = base or cls()
        types = {f.name: f.type for f in fields(cls)}
        updates = {}
        for key, raw in values.items():
            if key not in types:
                continue
            if key == "grad_clip":
                updates[key] = None if str(raw).lower() in ("", "none", "off") else float(raw)
            elif types[key] in ("int", int):
                updates[key] = int(raw)
            else:
                updates[key] = float(raw)
        return replace(base, **updates)


def read_config_file(path) -> dict[str, str]:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    values = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected 'key = value'")
            k, v = line.split("=", 1)
            values[k.strip()] = v.strip()
    return values


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, params: Mapping[str, np.ndarray]) -> "AdamState":
        return cls({k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()}, 0)


def adam_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray], state: AdamState,
              cfg: TrainConfig) -> tuple[dict[str, np.ndarray], AdamState]:
    """One bias-corrected Adam update; returns new params and state."""
    if set(params) != set(grads):
        raise ad.ShapeError("gradients do not cover the same parameters")
    step = state.step + 1
    b1, b2 = cfg.beta1, cfg.beta2
    c1, c2 = 1.0 - b1 ** step, 1.0 - b2 ** step
    new_p, new_m, new_v = {}, {}, {}
    for k, p in params.items():
        g = grads[k]
        if np.shape(g) != np.shape(p):
            raise ad.ShapeError(f"{k}: gradient {np.shape(g)} vs parameter {np.shape(p)}")
        m = b1 * state.m[k] + (1.0 - b1) * g
        v = b2 * state.v[k] + (1.0 - b2) * g * g
        new_p[k] = p - cfg.learning_rate * (m / c1) / (np.sqrt(v / c2) + cfg.eps)
        new_m[k], new_v[k] = m, v
    return new_p, AdamState(new_m, new_v, step)


def class_weights_from_counts(counts) -> ClassWeights:
    counts = np.asarray(counts, dtype=np.float64)
    if np.any(counts <= 0):
        raise LossError(f"every class needs training samples, got counts {counts.tolist()}")
    return ClassWeights(1.0 / counts)


@dataclass
class Batch:
    x: np.ndarray
    lengths: np.ndarray
    labels: np.ndarray
    indices: np.ndarray


def make_batches(specs: Sequence[np.ndarray], labels, batch_size: int, seed: int,
                 epoch: int = 0) -> list[Batch]:
    """Shuffle with (seed, epoch), cut into batches, zero-pad each to its longest item."""
    labels = np.asarray(labels)
    order = np.random.default_rng([seed, epoch]).permutation(len(specs))
    batches = []
    for start in range(0, len(order), batch_size):
        idx = order[start:start + batch_size]
        x, lengths = M.pad_batch([specs[i] for i in idx])
        batches.append(Batch(x, lengths, labels[idx], idx))
    return batches


@dataclass
class SpecSet:
    specs: list[np.ndarray]
    labels: np.ndarray

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.specs) != len(self.labels):
            raise ValueError("specs and labels differ in length")

    def __len__(self):
        return len(self.specs)


@dataclass
class EpochRecord:
    epoch: int
    loss_s: float
    loss_c: float
    loss: float
    dev_ua: float
    dev_wa: float

    def to_json(self) -> str:
        return json.dumps({"epoch": self.epoch, "L_s": self.loss_s, "L_c": self.loss_c, "L": self.loss,
                           "dev_ua": self.dev_ua, "dev_wa": self.dev_wa}, sort_keys=True)


@dataclass
class FitResult:
    params: dict[str, np.ndarray]
    bank: CenterBank
    standardizer: M.Standardizer
    encoder: M.EncoderConfig
    history: list[EpochRecord] = field(default_factory=list)
    iterations: list[dict] = field(default_factory=list)
    best_epoch: int | None = None

    def predict(self, specs: Sequence[np.ndarray], batch_size: int = 64) -> tuple[np.ndarray, np.ndarray]:
        """(features z, predicted class) for raw (unstandardized) spectrograms."""
        z, logits = M.features([self.standardizer(s) for s in specs], self.params, self.encoder, batch_size)
        return z, logits.argmax(axis=1)


def write_history(path, history: Sequence[EpochRecord]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in history:
            fh.write(rec.to_json() + "\n")


def train_step(params, batch: Batch, bank: CenterBank, weights: ClassWeights, lam: float,
               enc: M.EncoderConfig):
    """Forward + analytic loss gradients + tape backward.

    Returns (grads, z, L_s, L_c) where z are the pre-step batch features.
    """
    tensors = M.as_tensors(params, requires_grad=True)
    with ad.Tape() as tape:
        z, logits = M.forward(batch.x, batch.lengths, tensors, enc)
    loss_s = weighted_softmax_ce(logits.value, batch.labels, weights)
    loss_c = weighted_center_loss(z.value, batch.labels, bank, weights)
    d_logits, d_z = loss_gradients(logits.value, z.value, batch.labels, bank, weights, lam)
    raw = tape.backward([(logits, d_logits), (z, d_z)])
    grads = {k: raw.get(id(t), np.zeros(t.shape)) for k, t in tensors.items()}
    return grads, z.value, loss_s, loss_c


def _clip(grads, max_norm):
    total = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if total <= max_norm:
        return grads
    return {k: g * (max_norm / total) for k, g in grads.items()}


def evaluate_specs(params, enc, specs, labels, n_classes) -> tuple[float, float]:
    _, logits = M.features(specs, params, enc)
    preds = logits.argmax(axis=1)
    return ua(confusion_matrix(preds, labels, n_classes)), wa(preds, labels)


def fit(train: SpecSet, dev: SpecSet, enc: M.EncoderConfig, cfg: TrainConfig,
        params: dict[str, np.ndarray] | None = None) -> FitResult:
    """Train, evaluating dev UA after every epoch; keep the best-dev-UA epoch
    (earliest on ties)."""
    if len(train) == 0 or len(dev) == 0:
        raise TrainingError("train and dev sets must be nonempty")
    n = enc.n_classes
    standardizer = M.Standardizer.fit(train.specs)
    train_x = [standardizer(s) for s in train.specs]
    dev_x = [standardizer(s) for s in dev.specs]
    weights = class_weights_from_counts(np.bincount(train.labels, minlength=n))
    params = M.init_params(enc, cfg.seed) if params is None else {k: v.copy() for k, v in params.items()}
    M.check_params(params, enc)
    bank = CenterBank.zeros(n, enc.feature_dim, cfg.alpha)
    adam = AdamState.zeros_like(params)

    result = FitResult({k: v.copy() for k, v in params.items()}, bank.copy(), standardizer, enc)
    best_ua = -np.inf
    for epoch in range(1, cfg.max_epochs + 1):
        sums = np.zeros(2)
        batches = make_batches(train_x, train.labels, cfg.batch_size, cfg.seed, epoch)
        for batch in batches:
            grads, z, loss_s, loss_c = train_step(params, batch, bank, weights, cfg.lam, enc)
            if not (np.isfinite(loss_s) and np.isfinite(loss_c)):
                raise NumericError(f"non-finite loss at epoch {epoch}: L_s={loss_s}, L_c={loss_c}")
            if cfg.grad_clip is not None:
                grads = _clip(grads, cfg.grad_clip)
            result.iterations.append({"epoch": epoch, "indices": batch.indices, "L_s": loss_s, "L_c": loss_c,
                                      "L": loss_s + cfg.lam * loss_c})
            params, adam = adam_step(params, grads, adam, cfg)
            bank = update_centers(bank, batch_class_centers(z, batch.labels, n))
            sums += (loss_s, loss_c)
        mean_s, mean_c = sums / len(batches)
        dev_ua, dev_wa = evaluate_specs(params, enc, dev_x, dev.labels, n)
        rec = EpochRecord(epoch, float(mean_s), float(mean_c), float(mean_s + cfg.lam * mean_c), dev_ua, dev_wa)
        result.history.append(rec)
        log.info("epoch %d  L_s %.4f  L_c %.4f  dev UA %.4f  WA %.4f", epoch, mean_s, mean_c, dev_ua, dev_wa)
        if dev_ua > best_ua:
            best_ua = dev_ua
            result.params = {k: v.copy() for k, v in params.items()}
            result.bank = bank.copy()
            result.best_epoch = epoch
    return result
