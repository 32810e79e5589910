"""Classification metrics, paired t-tests over repeated runs and parameter counting."""

import hashlib
import json
import math
import warnings
from dataclasses import asdict, dataclass

import numpy as np

from .special import student_t_sf_two_sided


class MetricWarning(UserWarning):
    pass


def confusion(y_true, y_pred, n_classes):
    """Counts grid, rows = true class, columns = predicted class."""
    y_true = np.asarray(y_true, dtype=int).ravel()
    y_pred = np.asarray(y_pred, dtype=int).ravel()
    if y_true.shape != y_pred.shape:
        raise ValueError("y_true and y_pred differ in length")
    for name, y in (("y_true", y_true), ("y_pred", y_pred)):
        if y.size and (y.min() < 0 or y.max() >= n_classes):
            raise ValueError(f"{name} has a label outside [0, {n_classes})")
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (y_true, y_pred), 1)
    return cm


def _check(cm):
    cm = np.asarray(cm)
    if cm.ndim != 2 or cm.shape[0] != cm.shape[1]:
        raise ValueError("confusion matrix must be square")
    if np.any(cm < 0):
        raise ValueError("negative counts")
    if cm.sum() == 0:
        raise ValueError("empty confusion matrix")
    return cm.astype(np.float64)


def oa(cm):
    cm = _check(cm)
    return float(np.trace(cm) / cm.sum())


def per_class_recall(cm):
    """Recall per class, NaN where the class has no true samples."""
    cm = _check(cm)
    rows = cm.sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(rows > 0, np.diag(cm) / rows, np.nan)


def per_class_precision(cm):
    cm = _check(cm)
    cols = cm.sum(axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(cols > 0, np.diag(cm) / cols, np.nan)


def aa_with_flag(cm):
    """Macro recall and whether any empty row was excluded."""
    r = per_class_recall(cm)
    empty = bool(np.any(np.isnan(r)))
    return float(np.nanmean(r)), empty


def aa(cm):
    """Average accuracy as macro-averaged per-class recall; empty rows are left out."""
    value, empty = aa_with_flag(cm)
    if empty:
        warnings.warn("AA: classes without true samples excluded", MetricWarning, stacklevel=2)
    return value


def aa_literal(cm):
    """Mean one-vs-rest binary accuracy (TP + TN) / total over classes, for audit."""
    cm = _check(cm)
    total = cm.sum()
    tp = np.diag(cm)
    fp = cm.sum(axis=0) - tp
    fn = cm.sum(axis=1) - tp
    tn = total - tp - fp - fn
    return float(np.mean((tp + tn) / total))


def kappa(cm):
    cm = _check(cm)
    total = cm.sum()
    p0 = np.trace(cm) / total
    pe = float(np.sum(cm.sum(axis=1) * cm.sum(axis=0)) / total ** 2)
    if pe >= 1.0:
        warnings.warn("kappa undefined for a single-class matrix; reported as 0", MetricWarning, stacklevel=2)
        return 0.0
    return float((p0 - pe) / (1.0 - pe))


def per_class_f1(cm):
    cm = _check(cm)
    tp = np.diag(cm)
    denom = 2 * tp + (cm.sum(axis=0) - tp) + (cm.sum(axis=1) - tp)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(denom > 0, 2 * tp / denom, np.nan)


def f1(cm):
    """Macro F1 over classes that appear in truth or predictions."""
    return float(np.nanmean(per_class_f1(cm)))


@dataclass
class MetricsReport:
    oa: float
    aa: float
    kappa: float
    f1: float
    per_class: dict
    n: int
    confusion: list
    aa_excluded_empty: bool = False

    @classmethod
    def from_confusion(cls, cm):
        cm = np.asarray(cm)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", MetricWarning)
            k = kappa(cm)
        a, empty = aa_with_flag(cm)
        prec, rec, f = per_class_precision(cm), per_class_recall(cm), per_class_f1(cm)

        def clean(v):
            return None if np.isnan(v) else float(v)

        per_class = {str(i): {"precision": clean(prec[i]), "recall": clean(rec[i]), "f1": clean(f[i]),
                              "support": int(cm[i].sum())} for i in range(cm.shape[0])}
        return cls(oa(cm), a, k, f1(cm), per_class, int(cm.sum()), cm.tolist(), empty)

    @classmethod
    def from_predictions(cls, y_true, y_pred, n_classes):
        return cls.from_confusion(confusion(y_true, y_pred, n_classes))

    def to_json(self, config=None, seed=None):
        d = asdict(self)
        d["config_hash"] = config_hash(config) if config is not None else None
        d["seed"] = seed
        return json.dumps(d, indent=2, sort_keys=True)

    def write(self, path, config=None, seed=None):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_json(config, seed) + "\n")


def config_hash(config):
    blob = json.dumps(config, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class TTestResult:
    t: float
    p: float
    dof: int
    degenerate: bool = False


def paired_t_test(a, b):
    """Two-sided paired t-test on the differences a - b."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("a and b must be 1-D of equal length")
    n = a.size
    if n < 2:
        raise ValueError("need at least two paired runs")
    d = a - b
    sd = float(np.std(d, ddof=1))
    mean = float(np.mean(d))
    if sd == 0.0:
        return TTestResult(math.nan, math.nan, n - 1, degenerate=True)
    t = mean / (sd / math.sqrt(n))
    return TTestResult(t, student_t_sf_two_sided(abs(t), n - 1), n - 1)


def param_count(params):
    """Total element count of a parameter mapping (or a model exposing ``params``)."""
    params = getattr(params, "params", params)
    values = params.values() if hasattr(params, "values") else params
    return int(sum(np.asarray(getattr(p, "data", p)).size for p in values))
