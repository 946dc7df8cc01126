"""Metrics (UA, WA, confusion matrices), the stratified cross-validation
protocol, PCA embedding and report serialization."""

from __future__ import annotations

import io
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


class EvaluationError(ValueError):
    pass


class EmptyClassError(EvaluationError):
    pass


class ClassTooSmallError(EvaluationError):
    pass


class DegenerateFeaturesError(EvaluationError):
    pass


# --- confusion matrices and accuracies --------------------------------------

@dataclass
class ConfusionMatrix:
    """Rows are true classes, columns predictions.

    ``counts`` is None for matrices obtained by averaging normalized ones.
    Rows without samples are flagged in ``empty_rows`` and left as zeros.
    """

    normalized: np.ndarray
    counts: np.ndarray | None = None
    empty_rows: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.empty_rows is None:
            self.empty_rows = np.zeros(self.normalized.shape[0], dtype=bool)

    @classmethod
    def from_counts(cls, counts) -> "ConfusionMatrix":
        counts = np.asarray(counts)
        sums = counts.sum(axis=1)
        empty = sums == 0
        norm = np.zeros(counts.shape, dtype=np.float64)
        norm[~empty] = counts[~empty] / sums[~empty, None]
        return cls(norm, counts, empty)

    @property
    def n_classes(self) -> int:
        return self.normalized.shape[0]

    def recalls(self) -> np.ndarray:
        return np.diag(self.normalized).copy()


def _check_classes(values, n: int, what: str) -> np.ndarray:
    values = np.asarray(values)
    if values.size and (values.min() < 0 or values.max() >= n):
        raise EvaluationError(f"{what} outside 0..{n - 1}")
    return values.astype(np.int64)


def confusion_matrix(preds, labels, n_classes: int) -> ConfusionMatrix:
    preds = _check_classes(preds, n_classes, "prediction")
    labels = _check_classes(labels, n_classes, "label")
    if preds.shape != labels.shape:
        raise EvaluationError("preds and labels differ in length")
    counts = np.bincount(labels * n_classes + preds, minlength=n_classes * n_classes)
    return ConfusionMatrix.from_counts(counts.reshape(n_classes, n_classes))


def ua(cm: ConfusionMatrix) -> float:
    """Unweighted accuracy: mean per-class recall."""
    if np.any(cm.empty_rows):
        missing = np.flatnonzero(cm.empty_rows).tolist()
        raise EmptyClassError(f"classes {missing} have no samples; recall undefined")
    return float(np.mean(np.diag(cm.normalized)))


def wa(preds, labels) -> float:
    """Weighted accuracy: fraction of samples classified correctly."""
    preds, labels = np.asarray(preds), np.asarray(labels)
    if labels.size == 0:
        raise EvaluationError("no samples")
    return float(np.mean(preds == labels))


def wa_from_recalls(recalls, priors) -> float:
    """Overall accuracy implied by per-class recalls and class priors."""
    return float(np.dot(np.asarray(priors, dtype=np.float64), np.asarray(recalls, dtype=np.float64)))


def average_confusion(cms: Sequence[ConfusionMatrix]) -> ConfusionMatrix:
    """Elementwise mean of the row-normalized matrices."""
    if not cms:
        raise EvaluationError("cannot average an empty list of confusion matrices")
    n = {cm.n_classes for cm in cms}
    if len(n) != 1:
        raise EvaluationError(f"confusion matrices of different sizes: {sorted(n)}")
    norm = np.mean([cm.normalized for cm in cms], axis=0)
    empty = np.any([cm.empty_rows for cm in cms], axis=0)
    return ConfusionMatrix(norm, None, empty)


# --- cross-validation --------------------------------------------------------

@dataclass(frozen=True)
class Fold:
    train: np.ndarray
    dev: np.ndarray
    test: np.ndarray


def _deal(per_class: list[np.ndarray], n_parts: int) -> list[list[int]]:
    """Round-robin over the class-ordered concatenation of index lists.

    Continuing the rotation across classes keeps both per-class and total
    part sizes within one of each other.
    """
    parts: list[list[int]] = [[] for _ in range(n_parts)]
    pos = 0
    for idx in per_class:
        for i in idx:
            parts[pos % n_parts].append(int(i))
            pos += 1
    return parts


def stratified_partition(labels, n_parts: int, rng: np.random.Generator) -> list[np.ndarray]:
    labels = np.asarray(labels)
    per_class = [rng.permutation(np.flatnonzero(labels == c)) for c in np.unique(labels)]
    return [np.sort(np.array(p, dtype=np.int64)) for p in _deal(per_class, n_parts)]


def cv_splits(labels, seed: int, n_folds: int = 5, min_per_class: int = 10) -> list[Fold]:
    """Stratified ``n_folds``-way split; each fold trains on all but one subset
    and halves the held-out subset (stratified) into dev and test."""
    labels = np.asarray(labels)
    classes, counts = np.unique(labels, return_counts=True)
    if labels.size == 0 or counts.min() < min_per_class:
        raise ClassTooSmallError(
            f"every class needs at least {min_per_class} samples, got {dict(zip(classes.tolist(), counts.tolist()))}")
    rng = np.random.default_rng(seed)
    subsets = stratified_partition(labels, n_folds, rng)
    folds = []
    for k in range(n_folds):
        held = subsets[k]
        train = np.sort(np.concatenate([subsets[j] for j in range(n_folds) if j != k]))
        per_class = [rng.permutation(held[labels[held] == c]) for c in classes]
        dev, test = _deal(per_class, 2)
        folds.append(Fold(train, np.sort(np.array(dev, dtype=np.int64)), np.sort(np.array(test, dtype=np.int64))))
    return folds


def repeated_cv_splits(labels, seed: int, repeats: int = 5, n_folds: int = 5) -> list[list[Fold]]:
    """The full protocol: the partition is redrawn for every repetition."""
    return [cv_splits(labels, int(s), n_folds)
            for s in np.random.SeedSequence(seed).generate_state(repeats)]


# --- PCA ------------------------------------------------------------------------

def jacobi_eigh(a: np.ndarray, tol: float = 1e-14, max_sweeps: int = 100) -> tuple[np.ndarray, np.ndarray]:
    """Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.

    Returns eigenvalues in descending order and eigenvectors as columns.
    """
    a = np.array(a, dtype=np.float64)
    n = a.shape[0]
    v = np.eye(n)
    scale = np.linalg.norm(a)
    if scale == 0.0:
        return np.zeros(n), v
    for _ in range(max_sweeps):
        off = np.sqrt(np.sum(a ** 2) - np.sum(np.diag(a) ** 2))
        if off <= tol * scale:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if abs(apq) <= 1e-300:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                if theta == 0:
                    t = 1.0
                elif abs(theta) > 1e150:
                    t = 0.5 / theta  # theta**2 would overflow
                else:
                    t = np.sign(theta) / (abs(theta) + np.sqrt(theta * theta + 1.0))
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                ap, aq = a[:, p].copy(), a[:, q].copy()
                a[:, p] = c * ap - s * aq
                a[:, q] = s * ap + c * aq
                ap, aq = a[p, :].copy(), a[q, :].copy()
                a[p, :] = c * ap - s * aq
                a[q, :] = s * ap + c * aq
                vp, vq = v[:, p].copy(), v[:, q].copy()
                v[:, p] = c * vp - s * vq
                v[:, q] = s * vp + c * vq
    evals = np.diag(a).copy()
    order = np.argsort(-evals, kind="stable")
    return evals[order], v[:, order]


@dataclass
class PcaResult:
    coords: np.ndarray
    components: np.ndarray
    eigenvalues: np.ndarray
    explained_variance_ratio: np.ndarray
    mean: np.ndarray


def pca_embed(features, out_dim: int = 2) -> PcaResult:
    x = np.asarray(features, dtype=np.float64)
    m, d = x.shape
    if m <= out_dim or out_dim > d:
        raise EvaluationError(f"need more than {out_dim} samples and at least {out_dim} dims")
    mean = x.mean(axis=0)
    xc = x - mean
    if np.all(np.abs(xc) <= 1e-12 * max(1.0, np.abs(x).max())):
        raise DegenerateFeaturesError("all features are identical; no principal directions")
    cov = xc.T @ xc / (m - 1)
    evals, evecs = jacobi_eigh(cov)
    evals = np.maximum(evals, 0.0)
    comps = evecs[:, :out_dim].copy()
    for k in range(out_dim):
        if comps[np.argmax(np.abs(comps[:, k])), k] < 0:
            comps[:, k] *= -1.0
    return PcaResult(xc @ comps, comps, evals, evals[:out_dim] / evals.sum(), mean)


def reconstruction_error(features, out_dim: int) -> float:
    """Mean squared residual after projecting onto the top ``out_dim`` components."""
    res = pca_embed(features, out_dim)
    x = np.asarray(features, dtype=np.float64) - res.mean
    recon = res.coords @ res.components.T
    return float(np.mean(np.sum((x - recon) ** 2, axis=1)))


def compactness_ratio(z, labels) -> float:
    """Mean distance of features to their class mean over mean distance between class means."""
    z, labels = np.asarray(z, dtype=np.float64), np.asarray(labels)
    classes = np.unique(labels)
    if classes.size < 2:
        raise EvaluationError("need at least two classes")
    means = np.stack([z[labels == c].mean(axis=0) for c in classes])
    intra = np.mean(np.linalg.norm(z - means[np.searchsorted(classes, labels)], axis=1))
    iu = np.triu_indices(len(classes), k=1)
    inter = np.mean(np.linalg.norm(means[:, None] - means[None, :], axis=2)[iu])
    return float(intra / inter)


# --- reports ------------------------------------------------------------------

@dataclass
class EvalReport:
    confusion: ConfusionMatrix
    ua: float
    wa: float
    class_names: tuple[str, ...]
    per_fold: list[dict] = field(default_factory=list)

    @classmethod
    def from_predictions(cls, preds, labels, class_names) -> "EvalReport":
        cm = confusion_matrix(preds, labels, len(class_names))
        return cls(cm, ua(cm), wa(preds, labels), tuple(class_names))

    @classmethod
    def from_folds(cls, reports: Sequence["EvalReport"]) -> "EvalReport":
        if not reports:
            raise EvaluationError("no fold reports")
        cm = average_confusion([r.confusion for r in reports])
        per_fold = [{"ua": r.ua, "wa": r.wa} for r in reports]
        return cls(cm, float(np.mean([r.ua for r in reports])), float(np.mean([r.wa for r in reports])),
                   reports[0].class_names, per_fold)

    def to_text(self) -> str:
        out = io.StringIO()
        out.write(f"ua = {self.ua:.10f}\n")
        out.write(f"wa = {self.wa:.10f}\n")
        out.write(f"n_classes = {self.confusion.n_classes}\n")
        out.write(f"classes = {','.join(self.class_names)}\n")
        out.write(f"n_folds = {len(self.per_fold)}\n")
        for i, f in enumerate(self.per_fold):
            out.write(f"fold.{i}.ua = {f['ua']:.10f}\n")
            out.write(f"fold.{i}.wa = {f['wa']:.10f}\n")
        out.write("[confusion]\n")
        for row in self.confusion.normalized:
            out.write("\t".join(f"{v:.10f}" for v in row) + "\n")
        out.write("[end]\n")
        return out.getvalue()

    @classmethod
    def from_text(cls, text: str) -> "EvalReport":
        kv, rows, in_matrix = {}, [], False
        for line in text.splitlines():
            if line == "[confusion]":
                in_matrix = True
            elif line == "[end]":
                in_matrix = False
            elif in_matrix:
                rows.append([float(v) for v in line.split("\t")])
            elif " = " in line:
                k, v = line.split(" = ", 1)
                kv[k] = v
        n_folds = int(kv.get("n_folds", 0))
        per_fold = [{"ua": float(kv[f"fold.{i}.ua"]), "wa": float(kv[f"fold.{i}.wa"])} for i in range(n_folds)]
        cm = ConfusionMatrix(np.array(rows))
        return cls(cm, float(kv["ua"]), float(kv["wa"]), tuple(kv["classes"].split(",")), per_fold)
