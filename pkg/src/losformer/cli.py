"""Command-line pipeline driver.

Subcommands: synth, prep, train, eval, baseline, roc. Every command is
deterministic given its inputs plus the effective configuration (flat
key=value file merged with command-line overrides), and reports carry the
sha256 of that effective configuration as a leading comment line.

Exit codes: 0 success, 1 validation problem (bad flags, bad or missing
files), 2 unexpected runtime failure.
"""

from __future__ import annotations

import argparse
import hashlib
import os
import sys

import numpy as np

from . import baseline as baseline_mod
from . import metrics, synth, tokenizer
from .events import (
    CohortFormatError,
    ValidationError,
    load_cohort,
    save_cohort,
    split_cohort,
)
from .model import (
    CheckpointError,
    ModelConfig,
    SequenceTransformer,
    load_checkpoint,
    save_checkpoint,
    small_config,
    vocab_hash,
)
from .train import train_model

COHORT_FILE = "cohort.jsonl"
RANGES_FILE = "ranges.csv"
VOCAB_FILE = "vocab.txt"
SPLITS_FILE = "splits.json"
SPLIT_FILES = {"train": "train.jsonl", "valid": "valid.jsonl", "test": "test.jsonl"}


class CliError(Exception):
    """Validation-level failure; maps to exit code 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(message)


# --- flat config handling -----------------------------------------------------

def load_flat_config(path) -> dict:
    values = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            if "=" not in stripped:
                raise CliError(f"{path}:{lineno}: expected key = value, got {stripped!r}")
            key, _, raw = stripped.partition("=")
            values[key.strip()] = raw.strip()
    return values


def effective_config(args, overrides: dict) -> dict:
    cfg = {}
    if getattr(args, "config", None):
        if not os.path.exists(args.config):
            raise CliError(f"config file not found: {args.config}")
        cfg.update(load_flat_config(args.config))
    for key, value in overrides.items():
        if value is not None:
            cfg[key] = str(value)
    return cfg


def config_hash(cfg: dict) -> str:
    text = "".join(f"{k}={cfg[k]}\n" for k in sorted(cfg))
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def write_flat_config(cfg: dict, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for key in sorted(cfg):
            fh.write(f"{key} = {cfg[key]}\n")


def _get(cfg: dict, key: str, default, cast):
    if key not in cfg:
        return default
    try:
        if cast is bool:
            return cfg[key].lower() in ("1", "true", "yes")
        return cast(cfg[key])
    except ValueError as exc:
        raise CliError(f"config key {key}={cfg[key]!r}: {exc}") from exc


def _require(path, what: str):
    if not os.path.exists(path):
        raise CliError(f"{what} not found: {path}")
    return path


# --- synth --------------------------------------------------------------------

def cmd_synth(args) -> int:
    cfg = effective_config(args, {
        "n": args.n, "seed": args.seed,
        "severity_effect": args.severity_effect,
        "mean_events": args.mean_events,
    })
    n = _get(cfg, "n", 1000, int)
    if n < 1:
        raise CliError(f"--n must be >= 1, got {n}")
    scfg = synth.SynthConfig(
        n_admissions=n,
        seed=_get(cfg, "seed", 0, int),
        n_lab_codes=_get(cfg, "lab_codes", 50, int),
        n_vital_codes=_get(cfg, "vital_codes", 7, int),
        n_med_codes=_get(cfg, "med_codes", 100, int),
        n_proc_codes=_get(cfg, "proc_codes", 100, int),
        mean_events_per_admission=_get(cfg, "mean_events", 40.0, float),
        severity_effect=_get(cfg, "severity_effect", 1.0, float),
        co_timestamp_frac=_get(cfg, "co_timestamp_frac", 0.30, float),
    )
    os.makedirs(args.out_dir, exist_ok=True)
    cohort, ranges = synth.generate_cohort(scfg)
    save_cohort(cohort, os.path.join(args.out_dir, COHORT_FILE))
    ranges.save(os.path.join(args.out_dir, RANGES_FILE))
    write_flat_config(cfg, os.path.join(args.out_dir, "config.txt"))
    print(f"wrote {len(cohort)} admissions to {args.out_dir} (config {config_hash(cfg)[:12]})")
    return 0


# --- prep ---------------------------------------------------------------------

def cmd_prep(args) -> int:
    import json

    cfg = effective_config(args, {"seed": args.seed, "window_hours": args.window_hours})
    data_dir = args.data_dir
    cohort = load_cohort(_require(os.path.join(data_dir, COHORT_FILE), "cohort file"))
    ranges = synth.RangeTable.load(_require(os.path.join(data_dir, RANGES_FILE), "range table"))
    if len(cohort) == 0:
        raise CliError("cohort is empty; nothing to prepare")
    seed = _get(cfg, "seed", cohort.seed, int)
    window_hours = _get(cfg, "window_hours", 24.0, float)

    train, valid, test = split_cohort(cohort, seed)
    tokenizer.reset_missing_range_warnings()
    vocab = tokenizer.build_vocab_from_cohort(train.admissions, ranges, window_hours)
    vocab.save(os.path.join(data_dir, VOCAB_FILE))

    splits = {"seed": seed, "window_hours": window_hours}
    for name, part in (("train", train), ("valid", valid), ("test", test)):
        sequences = [
            tokenizer.encode_admission(adm, vocab, ranges, window_hours)
            for adm in part.admissions
        ]
        tokenizer.save_dataset(sequences, os.path.join(data_dir, SPLIT_FILES[name]))
        splits[name] = [adm.admission_id for adm in part.admissions]
    with open(os.path.join(data_dir, SPLITS_FILE), "w", encoding="utf-8") as fh:
        json.dump(splits, fh, separators=(",", ":"), sort_keys=True)
        fh.write("\n")

    missing = tokenizer.missing_range_warnings()
    if missing:
        print(f"warning: {missing} measurements had no reference range", file=sys.stderr)
    print(
        f"prepared splits {len(splits['train'])}/{len(splits['valid'])}/{len(splits['test'])}"
        f" with vocabulary of {len(vocab)} tokens"
    )
    return 0


# --- train ---------------------------------------------------------------------

def _model_config(cfg: dict, task: str, vocab_size: int) -> ModelConfig:
    profile = cfg.get("profile", "small")
    overrides = {}
    for key, cast in (
        ("n_layers", int), ("hidden_dim", int), ("intermediate_dim", int),
        ("n_heads", int), ("max_len", int), ("dropout_p", float),
        ("attention_dropout_p", float), ("weight_decay", float), ("lr", float),
        ("batch_size", int), ("max_epochs", int), ("patience", int), ("seed", int),
    ):
        if key in cfg:
            overrides[key] = _get(cfg, key, None, cast)
    if profile == "small":
        return small_config(vocab_size, task, **overrides)
    if profile == "full":
        return ModelConfig(vocab_size=vocab_size, task=task, **overrides)
    raise CliError(f"unknown profile {profile!r}; expected 'small' or 'full'")


def _load_split(data_dir: str, name: str):
    return tokenizer.load_dataset(
        _require(os.path.join(data_dir, SPLIT_FILES[name]), f"{name} dataset"))


def _load_vocab(data_dir: str) -> tokenizer.Vocabulary:
    return tokenizer.Vocabulary.load(_require(os.path.join(data_dir, VOCAB_FILE), "vocabulary"))


def cmd_train(args) -> int:
    cfg = effective_config(args, {
        "task": args.task, "profile": args.profile, "seed": args.seed,
        "lr": args.lr, "batch_size": args.batch_size,
        "max_epochs": args.max_epochs, "patience": args.patience,
    })
    task = cfg.get("task")
    if task not in ("binary", "category", "real"):
        raise CliError(f"--task must be binary, category or real, got {task!r}")
    data_dir = args.data_dir
    vocab = _load_vocab(data_dir)
    train_seqs = _load_split(data_dir, "train")
    valid_seqs = _load_split(data_dir, "valid")

    model_cfg = _model_config(cfg, task, len(vocab))
    model = SequenceTransformer(model_cfg)
    stem = args.out or os.path.join(data_dir, f"model_{task}")
    log = train_model(model, train_seqs, valid_seqs, log_path=stem + ".train_log.csv")
    save_checkpoint(model, stem, vocab_hash(vocab))
    best = min(log, key=lambda r: r.valid_loss)
    print(
        f"trained {len(log)} epochs; best valid loss {best.valid_loss:.6f} "
        f"at epoch {best.epoch}; checkpoint at {stem}.*"
    )
    return 0


# --- eval / roc ------------------------------------------------------------------

def _predictions(data_dir: str, checkpoint: str, split: str):
    vocab = _load_vocab(data_dir)
    model = load_checkpoint(checkpoint, vocab_hash(vocab))
    sequences = _load_split(data_dir, split)
    if not sequences:
        raise CliError(f"{split} split is empty")
    return model, sequences, model.predict(sequences)


def cmd_eval(args) -> int:
    cfg = effective_config(args, {"split": args.split})
    model, sequences, scores = _predictions(args.data_dir, args.checkpoint, args.split)
    task = model.cfg.task
    comment = f"config_sha256={config_hash(cfg)} checkpoint={os.path.basename(args.checkpoint)}"
    rows = []
    if task == "binary":
        labels = np.array([s.label_binary for s in sequences])
        rows.append((task, "losformer", "auroc", metrics.auroc(scores, labels), "all"))
        rows.append((task, "losformer", "f1", metrics.binary_f1(scores, labels), "all"))
        for res in metrics.stratified_eval(
                scores, labels,
                [s.age_bucket for s in sequences], [s.sex_id for s in sequences],
                metrics.auroc):
            value = None if res.suppressed else res.value
            rows.append((task, "losformer", "auroc", value, res.name))
        roc_path = args.roc_out or os.path.join(args.data_dir, f"roc_{args.split}.csv")
        fpr, tpr, thr = metrics.roc_curve(scores, labels)
        metrics.write_roc_csv(fpr, tpr, thr, roc_path, comment=comment)
    elif task == "category":
        labels = np.array([s.label_category for s in sequences])
        rows.append((task, "losformer", "auroc_macro", metrics.macro_auroc(scores, labels), "all"))
        preds = scores.argmax(axis=1)
        rows.append((task, "losformer", "f1_macro", metrics.macro_f1(preds, labels), "all"))
    else:
        labels = np.array([s.label_real for s in sequences])
        rows.append((task, "losformer", "mae", metrics.mae(scores, labels), "all"))
        rows.append((task, "losformer", "mse", metrics.mse(scores, labels), "all"))
    report_path = args.report or os.path.join(args.data_dir, f"report_{task}_{args.split}.csv")
    metrics.write_report(rows, report_path, comment=comment)
    print(f"wrote {report_path}")
    return 0


def cmd_roc(args) -> int:
    cfg = effective_config(args, {"split": args.split})
    model, sequences, scores = _predictions(args.data_dir, args.checkpoint, args.split)
    if model.cfg.task != "binary":
        raise CliError(f"roc export needs a binary-task checkpoint, got {model.cfg.task!r}")
    labels = np.array([s.label_binary for s in sequences])
    fpr, tpr, thr = metrics.roc_curve(scores, labels)
    out = args.out or os.path.join(args.data_dir, f"roc_{args.split}.csv")
    metrics.write_roc_csv(fpr, tpr, thr, out, comment=f"config_sha256={config_hash(cfg)}")
    print(f"wrote {out}")
    return 0


# --- baseline --------------------------------------------------------------------

def cmd_baseline(args) -> int:
    import json

    cfg = effective_config(args, {
        "task": args.task, "seed": args.seed, "learner": args.learner,
        "k_features": args.k_features,
    })
    task = cfg.get("task")
    if task not in ("binary", "category", "real"):
        raise CliError(f"--task must be binary, category or real, got {task!r}")
    learners = cfg.get("learner", "both")
    if learners not in ("logreg", "mlp", "both"):
        raise CliError(f"--learner must be logreg, mlp or both, got {learners!r}")
    kinds = ("logreg", "mlp") if learners == "both" else (learners,)
    seed = _get(cfg, "seed", 0, int)
    k = _get(cfg, "k_features", baseline_mod.DEFAULT_K_FEATURES, int)

    data_dir = args.data_dir
    cohort = load_cohort(_require(os.path.join(data_dir, COHORT_FILE), "cohort file"))
    with open(_require(os.path.join(data_dir, SPLITS_FILE), "split manifest"),
              encoding="utf-8") as fh:
        splits = json.load(fh)
    window_hours = float(splits.get("window_hours", 24.0))
    by_id = {adm.admission_id: adm for adm in cohort.admissions}
    try:
        parts = {name: [by_id[i] for i in splits[name]] for name in ("train", "valid", "test")}
    except KeyError as exc:
        raise CliError(f"split manifest references unknown admission {exc}") from exc

    schema = baseline_mod.build_schema(parts["train"], window_hours)
    mats = {name: baseline_mod.featurize_cohort(adms, schema, window_hours)
            for name, adms in parts.items()}
    pipeline = baseline_mod.TabularPipeline().fit(mats["train"])
    scaled = {name: pipeline.transform(m) for name, m in mats.items()}

    select_labels = baseline_mod.labels_for_task(
        parts["train"], "binary" if task == "real" else task)
    selected, stats = baseline_mod.chi2_select(scaled["train"], select_labels, k=k)
    selection_path = args.selection_report or os.path.join(data_dir, "selected_features.txt")
    baseline_mod.export_selection_report(schema.names, stats, selected, selection_path)
    x = {name: m[:, selected] for name, m in scaled.items()}
    y = {name: baseline_mod.labels_for_task(adms, task) for name, adms in parts.items()}

    comment = f"config_sha256={config_hash(cfg)}"
    rows = []
    for kind in kinds:
        learner = baseline_mod.TabularLearner(
            baseline_mod.BaselineConfig(task=task, kind=kind, seed=seed), x["train"].shape[1])
        learner.fit(x["train"], y["train"], x["valid"], y["valid"])
        scores = learner.predict(x["test"])
        name = f"baseline_{kind}"
        if task == "binary":
            rows.append((task, name, "auroc", metrics.auroc(scores, y["test"]), "all"))
            rows.append((task, name, "f1", metrics.binary_f1(scores, y["test"]), "all"))
        elif task == "category":
            rows.append((task, name, "auroc_macro", metrics.macro_auroc(scores, y["test"]), "all"))
            rows.append((task, name, "f1_macro",
                         metrics.macro_f1(scores.argmax(axis=1), y["test"]), "all"))
        else:
            rows.append((task, name, "mae", metrics.mae(scores, y["test"]), "all"))
            rows.append((task, name, "mse", metrics.mse(scores, y["test"]), "all"))
    report_path = args.report or os.path.join(data_dir, f"baseline_{task}.csv")
    metrics.write_report(rows, report_path, comment=comment)
    if args.features_csv:
        baseline_mod.export_features_csv(
            x["train"], [schema.names[i] for i in selected], args.features_csv)
    print(f"wrote {report_path}")
    return 0


# --- parser --------------------------------------------------------------------

def build_parser() -> _Parser:
    parser = _Parser(prog="losformer", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic cohort", parents=[])
    p.add_argument("--out-dir", required=True)
    p.add_argument("--config")
    p.add_argument("--n", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--severity-effect", dest="severity_effect", type=float)
    p.add_argument("--mean-events", dest="mean_events", type=float)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("prep", help="window, label, split and tokenize a cohort")
    p.add_argument("--data-dir", required=True)
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--window-hours", dest="window_hours", type=float)
    p.set_defaults(func=cmd_prep)

    p = sub.add_parser("train", help="train the sequence model")
    p.add_argument("--data-dir", required=True)
    p.add_argument("--config")
    p.add_argument("--task", choices=("binary", "category", "real"))
    p.add_argument("--profile", choices=("small", "full"))
    p.add_argument("--seed", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--max-epochs", dest="max_epochs", type=int)
    p.add_argument("--patience", type=int)
    p.add_argument("--out", help="checkpoint stem (default <data-dir>/model_<task>)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint and write a report")
    p.add_argument("--data-dir", required=True)
    p.add_argument("--config")
    p.add_argument("--checkpoint", required=True, help="checkpoint stem")
    p.add_argument("--split", choices=("train", "valid", "test"), default="test")
    p.add_argument("--report")
    p.add_argument("--roc-out", dest="roc_out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("baseline", help="train and evaluate the tabular baseline")
    p.add_argument("--data-dir", required=True)
    p.add_argument("--config")
    p.add_argument("--task", choices=("binary", "category", "real"))
    p.add_argument("--learner", choices=("logreg", "mlp", "both"))
    p.add_argument("--seed", type=int)
    p.add_argument("--k-features", dest="k_features", type=int)
    p.add_argument("--report")
    p.add_argument("--selection-report", dest="selection_report")
    p.add_argument("--features-csv", dest="features_csv")
    p.set_defaults(func=cmd_baseline)

    p = sub.add_parser("roc", help="export the ROC curve of a binary checkpoint")
    p.add_argument("--data-dir", required=True)
    p.add_argument("--config")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=("train", "valid", "test"), default="test")
    p.add_argument("--out")
    p.set_defaults(func=cmd_roc)
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except (CliError, ValidationError, CohortFormatError, CheckpointError,
            metrics.UndefinedMetricError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # anything else is a bug, not bad input
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
