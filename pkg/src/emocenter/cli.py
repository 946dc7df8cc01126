"""Command-line entry point.

Settings resolve as command-line flags > ``--config`` file > built-in defaults.
Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import checkpoint as CK
from . import corpus as C
from . import dsp
from . import evaluation as E
from . import model as M
from . import pipeline as P
from . import training as T
from .losses import LossError

log = logging.getLogger("emocenter")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

DEFAULTS = {
    "seed": 0,
    "lambda": 0.3,
    "alpha": 0.5,
    "frontend": "mel",
    "learning_rate": 3e-4,
    "batch_size": 32,
    "max_epochs": 100,
    "encoder": "default",
    "synthetic": 1000,
    "noise": 0.1,
    "min_duration": 0.5,
    "max_duration": 1.5,
    "repeats": 5,
    "folds": 5,
    "lambdas": "0,0.1,0.3,0.5,1.0",
    "alphas": "0.1,0.3,0.5,0.7,0.9",
}
_TYPES = {"seed": int, "batch_size": int, "max_epochs": int, "synthetic": int, "repeats": int, "folds": int,
          "lambda": float, "alpha": float, "learning_rate": float, "noise": float,
          "min_duration": float, "max_duration": float}
_ALIASES = {"lam": "lambda", "epochs": "max_epochs", "lr": "learning_rate"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _common(p: argparse.ArgumentParser, data=True, training=False):
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    p.add_argument("--config", help="flat 'key = value' settings file")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", default=None, help="output directory (default: current directory)")
    p.add_argument("--frontend", choices=("stft", "mel"))
    if data:
        src = p.add_mutually_exclusive_group()
        src.add_argument("--data", help="manifest CSV (path,label,subset)")
        src.add_argument("--synthetic", type=int, metavar="N", help="generate N synthetic utterances")
        p.add_argument("--noise", type=float, help="synthetic noise level")
    if training:
        p.add_argument("--lambda", dest="lambda", type=float)
        p.add_argument("--alpha", type=float)
        p.add_argument("--epochs", dest="max_epochs", type=int)
        p.add_argument("--lr", dest="learning_rate", type=float)
        p.add_argument("--batch-size", dest="batch_size", type=int)
        p.add_argument("--encoder", choices=("default", "desk"))


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="emocenter", description="Speech emotion recognition with center loss.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("synth-data", help="generate a synthetic corpus as WAV files + manifest")
    _common(p)

    p = sub.add_parser("extract-spec", help="write spectrogram files for every utterance")
    _common(p)

    p = sub.add_parser("train", help="fit on the train split, select by dev UA, write checkpoint + history")
    _common(p, training=True)

    p = sub.add_parser("eval", help="evaluate a checkpoint on the test split")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--subset", choices=("test", "all"), default="test")

    p = sub.add_parser("cv", help="repeated stratified cross-validation, averaged report")
    _common(p, training=True)
    p.add_argument("--repeats", type=int)
    p.add_argument("--folds", type=int)

    p = sub.add_parser("embed", help="PCA of learned features as (x, y, label) TSV")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--subset", choices=("test", "all"), default="test")

    p = sub.add_parser("sweep", help="grid over lambda and alpha, one report per cell")
    _common(p, training=True)
    p.add_argument("--lambdas", help="comma-separated lambda values")
    p.add_argument("--alphas", help="comma-separated alpha values")
    return parser


def resolve_settings(args: argparse.Namespace) -> dict:
    settings = dict(DEFAULTS)
    if args.config:
        try:
            raw = T.read_config_file(args.config)
        except OSError as exc:
            raise UsageError(f"cannot read config: {exc}") from None
        except ValueError as exc:
            raise UsageError(str(exc)) from None
        for key, value in raw.items():
            key = _ALIASES.get(key, key)
            if key not in settings:
                raise UsageError(f"unknown config key {key!r}")
            try:
                settings[key] = _TYPES.get(key, str)(value)
            except ValueError:
                raise UsageError(f"bad value for {key}: {value!r}") from None
    for key, value in vars(args).items():
        if key in settings and value is not None:
            settings[key] = value
    if getattr(args, "data", None):
        settings["data"] = args.data
    if settings["frontend"] not in ("stft", "mel"):
        raise UsageError(f"unknown frontend {settings['frontend']!r}")
    if settings["encoder"] not in ("default", "desk"):
        raise UsageError(f"unknown encoder {settings['encoder']!r}")
    return settings


def _train_config(s: dict) -> T.TrainConfig:
    try:
        return T.TrainConfig(learning_rate=s["learning_rate"], batch_size=s["batch_size"], lam=s["lambda"],
                             alpha=s["alpha"], max_epochs=s["max_epochs"], seed=s["seed"])
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _encoder(s: dict, n_bins: int, n_classes: int) -> M.EncoderConfig:
    if s["encoder"] == "desk":
        return M.desk_config(n_bins, n_classes)
    return M.EncoderConfig(n_bins=n_bins, n_classes=n_classes)


def load_dataset(s: dict) -> C.Dataset:
    if s.get("data"):
        return C.load_manifest(s["data"])
    spec = C.SynthSpec(total=s["synthetic"], seed=s["seed"])
    return C.generate_synthetic_corpus(spec.with_noise(s["noise"]).with_durations(s["min_duration"], s["max_duration"]))


def split(dataset: C.Dataset, seed: int, n_folds: int = 5) -> E.Fold:
    """Use subset tags when the manifest has train/dev/test rows, else the first CV fold."""
    tags = [u.subset for u in dataset.items]
    if {"train", "dev", "test"} <= set(tags):
        idx = {t: np.array([i for i, v in enumerate(tags) if v == t], dtype=np.int64) for t in ("train", "dev", "test")}
        return E.Fold(idx["train"], idx["dev"], idx["test"])
    return E.cv_splits(dataset.labels, seed, n_folds)[0]


def _out_dir(args) -> Path:
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _dsp_config(s: dict) -> dsp.DspConfig:
    return dsp.DspConfig()


def cmd_synth_data(args, s):
    dataset = load_dataset(s)
    manifest = C.export_corpus(dataset, _out_dir(args))
    print(manifest)


def cmd_extract_spec(args, s):
    dataset = load_dataset(s)
    out = _out_dir(args)
    (out / "spec").mkdir(exist_ok=True)
    cfg = _dsp_config(s)
    lines = ["file\tlabel\tframes\tbins"]
    for i, utt in enumerate(dataset.items):
        spec = dsp.spectrogram(utt.audio(), cfg, s["frontend"])
        rel = f"spec/{i:05d}.spg"
        dsp.save_spectrogram(spec, out / rel)
        lines.append(f"{rel}\t{dataset.class_names[utt.label]}\t{spec.n_frames}\t{spec.n_bins}")
    CK.atomic_write_text(out / "spec_index.tsv", "\n".join(lines) + "\n")


def _history_text(history) -> str:
    return "".join(rec.to_json() + "\n" for rec in history)


def cmd_train(args, s):
    dataset = load_dataset(s)
    cfg = _train_config(s)
    specs = P.compute_specs(dataset, _dsp_config(s), s["frontend"])
    fold = split(dataset, s["seed"], s["folds"])
    enc = _encoder(s, specs[0].shape[1], dataset.n_classes)
    labels = dataset.labels
    result = T.fit(P._take(specs, labels, fold.train), P._take(specs, labels, fold.dev), enc, cfg)
    out = _out_dir(args)
    meta = {"frontend": s["frontend"], "seed": s["seed"], "class_names": list(dataset.class_names),
            "best_epoch": result.best_epoch, "lambda": cfg.lam, "alpha": cfg.alpha}
    CK.save_checkpoint(out / "model.ckpt", result.params, result.bank, enc, result.standardizer, meta)
    CK.atomic_write_text(out / "history.jsonl", _history_text(result.history))
    log.info("best epoch %s", result.best_epoch)


def _checkpoint_inputs(args, s):
    try:
        params, bank, enc, std, meta = CK.load_checkpoint(args.checkpoint)
    except OSError as exc:
        raise CK.CheckpointError(str(exc)) from None
    if args.frontend is None and "frontend" in meta:
        s["frontend"] = meta["frontend"]
    dataset = load_dataset(s)
    idx = split(dataset, s["seed"], s["folds"]).test if args.subset == "test" else np.arange(len(dataset))
    specs = P.compute_specs(dataset.subset(idx), _dsp_config(s), s["frontend"])
    fitted = T.FitResult(params, bank, std, enc)
    z, preds = fitted.predict(specs)
    return dataset, dataset.labels[idx], z, preds


def cmd_eval(args, s):
    dataset, labels, _, preds = _checkpoint_inputs(args, s)
    report = E.EvalReport.from_predictions(preds, labels, dataset.class_names)
    CK.atomic_write_text(_out_dir(args) / "report.txt", report.to_text())
    print(f"UA {report.ua:.4f}  WA {report.wa:.4f}")


def cmd_embed(args, s):
    dataset, labels, z, _ = _checkpoint_inputs(args, s)
    res = E.pca_embed(z, 2)
    lines = ["x\ty\tlabel"] + [f"{x:.10f}\t{y:.10f}\t{dataset.class_names[c]}" for (x, y), c in zip(res.coords, labels)]
    CK.atomic_write_text(_out_dir(args) / "embedding.tsv", "\n".join(lines) + "\n")


def cmd_cv(args, s):
    dataset = load_dataset(s)
    cfg = _train_config(s)
    specs = P.compute_specs(dataset, _dsp_config(s), s["frontend"])
    enc = _encoder(s, specs[0].shape[1], dataset.n_classes)

    def progress(r, k, out):
        log.info("repeat %d fold %d: UA %.4f WA %.4f", r, k, out.report.ua, out.report.wa)

    report = P.run_cv(specs, dataset.labels, enc, cfg, dataset.class_names, s["repeats"], s["folds"], progress)
    CK.atomic_write_text(_out_dir(args) / "cv_report.txt", report.to_text())
    print(f"UA {report.ua:.4f}  WA {report.wa:.4f}")


def _grid(text: str, name: str) -> list[float]:
    try:
        return [float(v) for v in str(text).split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"bad {name} list {text!r}") from None


def cmd_sweep(args, s):
    lambdas, alphas = _grid(s["lambdas"], "lambda"), _grid(s["alphas"], "alpha")
    dataset = load_dataset(s)
    base = _train_config(s)
    specs = P.compute_specs(dataset, _dsp_config(s), s["frontend"])
    enc = _encoder(s, specs[0].shape[1], dataset.n_classes)
    fold = split(dataset, s["seed"], s["folds"])
    out = _out_dir(args)
    (out / "sweep").mkdir(exist_ok=True)
    records = []
    for lam in lambdas:
        for alpha in alphas:
            try:
                cfg = replace(base, lam=lam, alpha=alpha)
            except ValueError as exc:
                raise UsageError(str(exc)) from None
            outcome = P.run_fold(specs, dataset.labels, fold, enc, cfg, dataset.class_names)
            name = f"lambda{lam:g}_alpha{alpha:g}"
            CK.atomic_write_text(out / "sweep" / f"{name}.txt", outcome.report.to_text())
            records.append(json.dumps({"lambda": lam, "alpha": alpha, "ua": outcome.report.ua,
                                       "wa": outcome.report.wa, "best_epoch": outcome.fit.best_epoch},
                                      sort_keys=True))
            log.info("%s: UA %.4f", name, outcome.report.ua)
    CK.atomic_write_text(out / "sweep.jsonl", "\n".join(records) + "\n")


COMMANDS = {
    "synth-data": cmd_synth_data,
    "extract-spec": cmd_extract_spec,
    "train": cmd_train,
    "eval": cmd_eval,
    "cv": cmd_cv,
    "embed": cmd_embed,
    "sweep": cmd_sweep,
}

DATA_ERRORS = (C.CorpusError, LossError, dsp.DspError, E.EvaluationError, CK.CheckpointError, M.EncoderError,
               FileNotFoundError)


def main(argv=None) -> int:
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    if not argv:
        parser.print_help(sys.stderr)
        return EXIT_USAGE
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_help(sys.stderr)
            return EXIT_USAGE
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(message)s")
        settings = resolve_settings(args)
        COMMANDS[args.command](args, settings)
    except UsageError as exc:
        print(f"emocenter: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except T.NumericError as exc:
        print(f"emocenter: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except DATA_ERRORS as exc:
        print(f"emocenter: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
