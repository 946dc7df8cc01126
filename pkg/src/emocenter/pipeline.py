"""Glue between corpus, front end, training and evaluation.

Shared by the command-line tool and the acceptance experiments.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from . import dsp
from . import evaluation as E
from . import model as M
from . import training as T
from .corpus import Dataset


def compute_specs(dataset: Dataset, cfg: dsp.DspConfig | None = None, frontend: str = "mel") -> list[np.ndarray]:
    cfg = cfg or dsp.DspConfig()
    return [dsp.spectrogram(u.audio(), cfg, frontend).values.astype(np.float64) for u in dataset.items]


def _take(specs, labels, idx) -> T.SpecSet:
    return T.SpecSet([specs[i] for i in idx], np.asarray(labels)[idx])


@dataclass
class FoldOutcome:
    fit: T.FitResult
    report: E.EvalReport
    z_test: np.ndarray
    labels_test: np.ndarray


def run_fold(specs: Sequence[np.ndarray], labels, fold: E.Fold, enc: M.EncoderConfig, cfg: T.TrainConfig,
             class_names: Sequence[str]) -> FoldOutcome:
    labels = np.asarray(labels)
    result = T.fit(_take(specs, labels, fold.train), _take(specs, labels, fold.dev), enc, cfg)
    test = _take(specs, labels, fold.test)
    z, preds = result.predict(test.specs)
    report = E.EvalReport.from_predictions(preds, test.labels, class_names)
    return FoldOutcome(result, report, z, test.labels)


def run_cv(specs: Sequence[np.ndarray], labels, enc: M.EncoderConfig, cfg: T.TrainConfig,
           class_names: Sequence[str], repeats: int = 5, n_folds: int = 5, on_fold=None) -> E.EvalReport:
    """Repeated stratified cross-validation; one averaged report over every fold.

    Each fold trains from an init seed derived from (cfg.seed, repetition, fold).
    """
    reports = []
    for r, folds in enumerate(E.repeated_cv_splits(labels, cfg.seed, repeats, n_folds)):
        for k, fold in enumerate(folds):
            seed = int(np.random.SeedSequence([cfg.seed, r, k]).generate_state(1)[0])
            out = run_fold(specs, labels, fold, enc, replace(cfg, seed=seed), class_names)
            reports.append(out.report)
            if on_fold is not None:
                on_fold(r, k, out)
    return E.EvalReport.from_folds(reports)
