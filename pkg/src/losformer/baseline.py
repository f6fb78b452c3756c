"""Tabular comparison pipeline: latest-value features from the first 24
hours, mean imputation, 0-1 scaling, chi-squared top-k selection, and two
small learners (logistic/linear regression and a one-hidden-layer MLP)
built on the same numerics kernels as the encoder.

Every fitted statistic (means, mins, maxes, chi-squared scores) comes
from the training split alone; transform never updates state.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import numerics
from .events import (
    ADMISSION_TYPES,
    ARRIVAL_MODES,
    COMORBIDITY_NAMES,
    HOUR_BUCKETS,
    MEASUREMENT_TYPES,
    PRESCRIPTION_GROUPS,
    SEASONS,
    TRIAGE_LEVELS,
    WEEKDAYS,
    Admission,
    Sex,
    clip_los,
    label_binary,
    label_category,
    window_events,
)
from .model import stable_sigmoid
from .numerics import Parameter
from .train import EarlyStopper

DEFAULT_K_FEATURES = 50
MLP_HIDDEN_UNITS = 64

_SEX_COLUMNS = (Sex.FEMALE, Sex.MALE, Sex.UNKNOWN)
_CATEGORICALS = (
    ("arr", ARRIVAL_MODES, "arrival_mode"),
    ("hr", HOUR_BUCKETS, "hour_bucket"),
    ("wd", WEEKDAYS, "weekday"),
    ("season", SEASONS, "season"),
    ("triage", TRIAGE_LEVELS, "triage"),
    ("adm", ADMISSION_TYPES, "admission_type"),
)


@dataclass(frozen=True)
class FeatureSchema:
    """Column layout shared by all splits; built from the training split."""
    measurement_codes: tuple  # latest-value columns, NaN when absent
    occurrence_codes: tuple   # 0/1 columns for med/proc codes

    @property
    def names(self) -> tuple:
        fixed = ["age"]
        fixed += [f"sex:{s.value}" for s in _SEX_COLUMNS]
        fixed += [f"cmb:{name}" for name in COMORBIDITY_NAMES]
        fixed += [f"rx:{group}" for group in PRESCRIPTION_GROUPS]
        for prefix, domain, _ in _CATEGORICALS:
            fixed += [f"{prefix}:{value}" for value in domain]
        fixed += [f"latest:{code}" for code in self.measurement_codes]
        fixed += [f"given:{code}" for code in self.occurrence_codes]
        return tuple(fixed)


def build_schema(train_admissions, window_hours: float = 24.0) -> FeatureSchema:
    measurements, occurrences = set(), set()
    for adm in train_admissions:
        for ev in window_events(adm, window_hours).events:
            if ev.event_type in MEASUREMENT_TYPES:
                measurements.add(ev.code)
            else:
                occurrences.add(ev.code)
    return FeatureSchema(
        measurement_codes=tuple(sorted(measurements)),
        occurrence_codes=tuple(sorted(occurrences)),
    )


def featurize_latest(adm: Admission, schema: FeatureSchema,
                     window_hours: float = 24.0) -> np.ndarray:
    """One feature row: demographics and history as binaries, the latest
    value per measurement code (NaN when never measured), and occurrence
    flags for medications/procedures. Codes outside the schema are
    dropped, mirroring vocabulary behavior."""
    windowed = window_events(adm, window_hours)
    row: list[float] = [float(adm.demographics.age_years)]
    row += [1.0 if adm.demographics.sex == s else 0.0 for s in _SEX_COLUMNS]
    row += [float(flag) for flag in adm.history.comorbidities]
    row += [float(flag) for flag in adm.history.prescriptions]
    for _, domain, attr in _CATEGORICALS:
        actual = getattr(adm.history, attr)
        row += [1.0 if actual == value else 0.0 for value in domain]

    latest: dict[str, float] = {}
    seen: set = set()
    for ev in windowed.events:  # events are time-ordered; later wins
        if ev.event_type in MEASUREMENT_TYPES:
            latest[ev.code] = ev.value
        else:
            seen.add(ev.code)
    row += [latest.get(code, np.nan) for code in schema.measurement_codes]
    row += [1.0 if code in seen else 0.0 for code in schema.occurrence_codes]
    return np.array(row, dtype=np.float64)


def featurize_cohort(admissions, schema: FeatureSchema,
                     window_hours: float = 24.0) -> np.ndarray:
    return np.stack([featurize_latest(adm, schema, window_hours) for adm in admissions])


def labels_for_task(admissions, task: str) -> np.ndarray:
    if task == "binary":
        return np.array([label_binary(a.los_days) for a in admissions], dtype=np.float64)
    if task == "category":
        return np.array([label_category(a.los_days) for a in admissions], dtype=np.int64)
    return np.array([clip_los(a.los_days) for a in admissions], dtype=np.float64)


class TabularPipeline:
    """Mean imputation then train-min/max scaling with clamping to [0,1].

    fit() computes statistics from the training matrix only; transform()
    is pure and idempotent on already-scaled data only by accident, so
    always transform raw feature rows.
    """

    def __init__(self):
        self.mean_ = None
        self.min_ = None
        self.max_ = None

    def fit(self, x_train: np.ndarray) -> "TabularPipeline":
        if x_train.ndim != 2 or x_train.shape[0] == 0:
            raise ValueError(f"expected a non-empty feature matrix, got shape {x_train.shape}")
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)  # all-NaN columns
            mean = np.nanmean(x_train, axis=0)
        self.mean_ = np.where(np.isfinite(mean), mean, 0.0)
        imputed = self._impute(x_train)
        self.min_ = imputed.min(axis=0)
        self.max_ = imputed.max(axis=0)
        return self

    def _impute(self, x: np.ndarray) -> np.ndarray:
        out = x.copy()
        nan_rows, nan_cols = np.nonzero(np.isnan(out))
        out[nan_rows, nan_cols] = self.mean_[nan_cols]
        return out

    def transform(self, x: np.ndarray) -> np.ndarray:
        if self.mean_ is None:
            raise ValueError("pipeline is not fitted")
        imputed = self._impute(x)
        span = self.max_ - self.min_
        scaled = np.where(span > 0, (imputed - self.min_) / np.where(span > 0, span, 1.0), 0.0)
        return np.clip(scaled, 0.0, 1.0)


def chi2_select(x: np.ndarray, y: np.ndarray, k: int = DEFAULT_K_FEATURES):
    """Top-k features by the chi-squared statistic of observed per-class
    feature mass against expectation under class priors.

    Returns (indices, stats). Ties rank the lower index first; k beyond
    the feature count selects everything with a warning.
    """
    if np.any(x < 0):
        raise ValueError("chi-squared selection needs non-negative features")
    y = np.asarray(y)
    classes = np.unique(y)
    n = x.shape[0]
    observed = np.stack([x[y == c].sum(axis=0) for c in classes])
    priors = np.array([(y == c).sum() / n for c in classes])
    totals = x.sum(axis=0)
    expected = priors[:, None] * totals[None, :]
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = (observed - expected) ** 2 / expected
    stats = np.where(expected > 0, terms, 0.0).sum(axis=0)
    if k > x.shape[1]:
        warnings.warn(
            f"asked for {k} features but only {x.shape[1]} exist; selecting all",
            stacklevel=2)
        k = x.shape[1]
    order = np.argsort(-stats, kind="stable")  # stable: ties keep lower index first
    return np.sort(order[:k]), stats


@dataclass(frozen=True)
class BaselineConfig:
    task: str = "binary"
    kind: str = "logreg"  # or "mlp"
    lr: float = 0.05
    weight_decay: float = 0.0
    max_epochs: int = 400
    patience: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.task not in ("binary", "category", "real"):
            raise ValueError(f"unknown task {self.task!r}")
        if self.kind not in ("logreg", "mlp"):
            raise ValueError(f"unknown learner kind {self.kind!r}")


class TabularLearner:
    """Full-batch Adam on cross-entropy (binary/category) or MSE (real),
    early-stopped on validation loss exactly like the sequence model.

    kind="logreg" is a single linear map; kind="mlp" inserts one hidden
    layer of 64 GELU units.
    """

    def __init__(self, cfg: BaselineConfig, n_features: int):
        self.cfg = cfg
        self.n_outputs = 3 if cfg.task == "category" else 1
        rng = np.random.default_rng(cfg.seed)
        if cfg.kind == "mlp":
            self.w1 = Parameter("w1", rng.normal(0.0, 0.1, (n_features, MLP_HIDDEN_UNITS)))
            self.b1 = Parameter("b1", np.zeros(MLP_HIDDEN_UNITS), decay=False)
            self.w2 = Parameter("w2", rng.normal(0.0, 0.1, (MLP_HIDDEN_UNITS, self.n_outputs)))
            self.b2 = Parameter("b2", np.zeros(self.n_outputs), decay=False)
            self._params = [self.w1, self.b1, self.w2, self.b2]
        else:
            self.w = Parameter("w", np.zeros((n_features, self.n_outputs)))
            self.b = Parameter("b", np.zeros(self.n_outputs), decay=False)
            self._params = [self.w, self.b]

    def parameters(self):
        return self._params

    def _logits(self, x: np.ndarray, cache: dict | None = None) -> np.ndarray:
        if self.cfg.kind == "mlp":
            h_pre = x @ self.w1.value + self.b1.value
            h = numerics.gelu(h_pre)
            if cache is not None:
                cache["h_pre"], cache["h"] = h_pre, h
            return h @ self.w2.value + self.b2.value
        return x @ self.w.value + self.b.value

    def _loss_and_dlogits(self, logits: np.ndarray, y: np.ndarray):
        n = logits.shape[0]
        if self.cfg.task == "binary":
            z = logits[:, 0]
            per = np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))
            return float(per.mean()), ((stable_sigmoid(z) - y) / n)[:, None]
        if self.cfg.task == "category":
            p = numerics.softmax(logits)
            yi = y.astype(np.int64)
            per = -np.log(np.maximum(p[np.arange(n), yi], 1e-300))
            d = p.copy()
            d[np.arange(n), yi] -= 1.0
            return float(per.mean()), d / n
        z = logits[:, 0]
        return float(((z - y) ** 2).mean()), (2.0 * (z - y) / n)[:, None]

    def _loss(self, x: np.ndarray, y: np.ndarray) -> float:
        loss, _ = self._loss_and_dlogits(self._logits(x), y)
        return loss

    def fit(self, x_train, y_train, x_valid, y_valid) -> list:
        """Returns the (epoch, train_loss, valid_loss) log."""
        cfg = self.cfg
        stopper = EarlyStopper(cfg.patience)
        best = {p.name: p.value.copy() for p in self._params}
        log = []
        for epoch in range(1, cfg.max_epochs + 1):
            cache: dict = {}
            logits = self._logits(x_train, cache)
            loss, dlogits = self._loss_and_dlogits(logits, y_train)
            for p in self._params:
                p.zero_grad()
            if cfg.kind == "mlp":
                self.w2.grad += cache["h"].T @ dlogits
                self.b2.grad += dlogits.sum(axis=0)
                dh = dlogits @ self.w2.value.T
                dh_pre = numerics.gelu_backward(cache["h_pre"], dh)
                self.w1.grad += x_train.T @ dh_pre
                self.b1.grad += dh_pre.sum(axis=0)
            else:
                self.w.grad += x_train.T @ dlogits
                self.b.grad += dlogits.sum(axis=0)
            numerics.adam_step(self._params, lr=cfg.lr, weight_decay=cfg.weight_decay)

            valid_loss = self._loss(x_valid, y_valid)
            if stopper.update(epoch, valid_loss):
                best = {p.name: p.value.copy() for p in self._params}
            log.append((epoch, loss, valid_loss))
            if stopper.should_stop:
                break
        for p in self._params:
            p.value[...] = best[p.name]
        return log

    def predict(self, x: np.ndarray) -> np.ndarray:
        """binary → P(long stay); category → (n, 3) softmax; real → days."""
        logits = self._logits(x)
        if self.cfg.task == "binary":
            return stable_sigmoid(logits[:, 0])
        if self.cfg.task == "category":
            return numerics.softmax(logits)
        return logits[:, 0]


def export_features_csv(x: np.ndarray, names, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(names) + "\n")
        for row in x:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")


def export_selection_report(names, stats, selected, path) -> None:
    """Selected features with their chi-squared statistics, best first."""
    chosen = sorted(selected, key=lambda i: (-stats[i], i))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("feature\tchi2\n")
        for idx in chosen:
            fh.write(f"{names[idx]}\t{float(stats[idx])!r}\n")
