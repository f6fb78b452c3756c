"""Evaluation metrics and stratified reporting.

AUROC is the trapezoidal area under the tie-grouped ROC curve, which
equals the probability that a random positive outscores a random negative
with ties counted one half. Regression metrics clamp predictions into the
0..30 day range the labels live in; the model itself is never clamped.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .events import LOS_CLIP_DAYS, Sex

SEX_NAMES = {0: Sex.FEMALE.value, 1: Sex.MALE.value, 2: Sex.UNKNOWN.value}
STRATUM_MIN_SAMPLES = 100


class UndefinedMetricError(ValueError):
    pass


def _as_binary_labels(labels) -> np.ndarray:
    y = np.asarray(labels)
    if y.size == 0:
        raise UndefinedMetricError("empty label vector")
    if not np.isin(y, (0, 1)).all():
        raise UndefinedMetricError("binary labels must be 0/1")
    if y.min() == y.max():
        raise UndefinedMetricError("metric undefined: only one class present")
    return y.astype(np.int64)


def roc_curve(scores, labels):
    """(fpr, tpr, thresholds) stepping through unique scores descending.

    Starts at (0, 0) with threshold +inf and ends at (1, 1); tied scores
    collapse into a single point, which is what makes the trapezoid equal
    to tie-aware pairwise concordance.
    """
    y = _as_binary_labels(labels)
    s = np.asarray(scores, dtype=np.float64)
    if s.shape != y.shape:
        raise UndefinedMetricError(f"scores shape {s.shape} vs labels shape {y.shape}")
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    n_pos = int(y.sum())
    n_neg = y.size - n_pos

    fpr, tpr, thresholds = [0.0], [0.0], [np.inf]
    tp = fp = 0
    i = 0
    while i < y.size:
        j = i
        while j < y.size and s[j] == s[i]:
            tp += int(y[j])
            fp += 1 - int(y[j])
            j += 1
        fpr.append(fp / n_neg)
        tpr.append(tp / n_pos)
        thresholds.append(float(s[i]))
        i = j
    return np.array(fpr), np.array(tpr), np.array(thresholds)


def trapezoid_area(x, y) -> float:
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    return float(((x[1:] - x[:-1]) * (y[1:] + y[:-1]) / 2.0).sum())


def auroc(scores, labels) -> float:
    fpr, tpr, _ = roc_curve(scores, labels)
    return trapezoid_area(fpr, tpr)


def macro_auroc(prob_matrix, labels) -> float:
    """One-vs-rest AUROC averaged over classes (columns of prob_matrix)."""
    probs = np.asarray(prob_matrix, dtype=np.float64)
    y = np.asarray(labels)
    if probs.ndim != 2:
        raise UndefinedMetricError(f"expected a probability matrix, got shape {probs.shape}")
    per_class = [auroc(probs[:, c], (y == c).astype(np.int64)) for c in range(probs.shape[1])]
    return float(np.mean(per_class))


def confusion_matrix(pred_classes, labels, n_classes: int) -> np.ndarray:
    """counts[i, j] = samples with true class i predicted as class j."""
    y = np.asarray(labels, dtype=np.int64)
    p = np.asarray(pred_classes, dtype=np.int64)
    if y.shape != p.shape:
        raise UndefinedMetricError(f"preds shape {p.shape} vs labels shape {y.shape}")
    counts = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(counts, (y, p), 1)
    return counts


def _f1_from_counts(tp: int, fp: int, fn: int) -> float:
    denom = 2 * tp + fp + fn
    return 2 * tp / denom if denom else 0.0


def binary_f1(scores, labels, threshold: float = 0.5) -> float:
    """F1 of the positive class with predictions scored >= threshold."""
    y = np.asarray(labels, dtype=np.int64)
    preds = (np.asarray(scores, dtype=np.float64) >= threshold).astype(np.int64)
    counts = confusion_matrix(preds, y, 2)
    return _f1_from_counts(int(counts[1, 1]), int(counts[0, 1]), int(counts[1, 0]))


def macro_f1(pred_classes, labels, n_classes: int = 3) -> float:
    """Unweighted mean of per-class one-vs-rest F1; a class that is never
    predicted and never true contributes 0."""
    counts = confusion_matrix(pred_classes, labels, n_classes)
    scores = []
    for c in range(n_classes):
        tp = int(counts[c, c])
        fp = int(counts[:, c].sum() - tp)
        fn = int(counts[c, :].sum() - tp)
        scores.append(_f1_from_counts(tp, fp, fn))
    return float(np.mean(scores))


def _clamp_days(preds) -> np.ndarray:
    return np.clip(np.asarray(preds, dtype=np.float64), 0.0, LOS_CLIP_DAYS)


def mae(preds, labels) -> float:
    p, y = _clamp_days(preds), np.asarray(labels, dtype=np.float64)
    if p.shape != y.shape:
        raise UndefinedMetricError(f"preds shape {p.shape} vs labels shape {y.shape}")
    return float(np.abs(p - y).mean())


def mse(preds, labels) -> float:
    p, y = _clamp_days(preds), np.asarray(labels, dtype=np.float64)
    if p.shape != y.shape:
        raise UndefinedMetricError(f"preds shape {p.shape} vs labels shape {y.shape}")
    return float(((p - y) ** 2).mean())


# --- stratified reporting ----------------------------------------------------


@dataclass(frozen=True)
class StratumResult:
    name: str
    n: int
    value: float | None
    suppressed: bool


def _age_stratum_name(bucket: int) -> str:
    if bucket >= 11:
        return "age:110+"
    return f"age:{bucket * 10}-{bucket * 10 + 9}"


def stratified_eval(scores, labels, age_buckets, sex_ids, metric_fn,
                    min_samples: int = STRATUM_MIN_SAMPLES) -> list[StratumResult]:
    """Apply metric_fn within each age-decade and sex stratum.

    Strata with min_samples or fewer members are reported but suppressed
    (no value). A stratum where the metric is undefined (e.g. one class
    only) is reported with value None as well.
    """
    scores = np.asarray(scores)
    labels = np.asarray(labels)
    ages = np.asarray(age_buckets, dtype=np.int64)
    sexes = np.asarray(sex_ids, dtype=np.int64)

    strata: list[tuple[str, np.ndarray]] = []
    for bucket in sorted(set(ages.tolist())):
        strata.append((_age_stratum_name(bucket), ages == bucket))
    for sex in sorted(set(sexes.tolist())):
        strata.append((f"sex:{SEX_NAMES[sex]}", sexes == sex))

    results = []
    for name, mask in strata:
        n = int(mask.sum())
        if n <= min_samples:
            results.append(StratumResult(name=name, n=n, value=None, suppressed=True))
            continue
        try:
            value = float(metric_fn(scores[mask], labels[mask]))
        except UndefinedMetricError:
            value = None
        results.append(StratumResult(name=name, n=n, value=value, suppressed=False))
    return results


# --- file exports ------------------------------------------------------------


def write_roc_csv(fpr, tpr, thresholds, path, comment: str | None = None) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        if comment:
            fh.write(f"# {comment}\n")
        fh.write("fpr,tpr,threshold\n")
        for f, t, thr in zip(fpr, tpr, thresholds):
            fh.write(f"{float(f)!r},{float(t)!r},{float(thr)!r}\n")


def write_report(rows, path, comment: str | None = None) -> None:
    """rows: iterables of (task, model, metric, value, stratum); value None
    renders as the empty field (a suppressed stratum)."""
    with open(path, "w", encoding="utf-8") as fh:
        if comment:
            fh.write(f"# {comment}\n")
        fh.write("task,model,metric,value,stratum\n")
        for task, model_name, metric, value, stratum in rows:
            rendered = "" if value is None else repr(float(value))
            fh.write(f"{task},{model_name},{metric},{rendered},{stratum}\n")
