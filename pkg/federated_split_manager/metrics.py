"""Local-test metrics and their averages over clients."""

from typing import Dict, Mapping, Tuple

import numpy as np

from scipy.stats import pearsonr
from sklearn import metrics


def accuracy(y_true, y_pred) -> float:
    if np.size(y_true) == 0:
        return float("nan")
    return float(metrics.accuracy_score(y_true, y_pred))


def f1_score(y_true, y_pred, num_classes: int) -> float:
    """F1 of class 1 for binary tasks, macro-averaged F1 over all classes otherwise."""
    labels = [1] if num_classes == 2 else list(range(num_classes))
    return float(
        metrics.f1_score(y_true, y_pred, labels=labels, average="macro", zero_division=0)
    )


def matthews_corrcoef(y_true, y_pred, num_classes: int) -> float:
    """Matthews correlation, multiclass form; 0 when undefined."""
    return float(metrics.matthews_corrcoef(y_true, y_pred))


def pearson(y_true, y_pred) -> float:
    """Pearson correlation; 0 when either side is constant."""
    a = np.asarray(y_true, dtype=np.float64)
    b = np.asarray(y_pred, dtype=np.float64)
    if a.size < 2 or np.ptp(a) == 0 or np.ptp(b) == 0:
        return 0.0
    return float(pearsonr(a, b)[0])


def mean_squared_error(y_true, y_pred) -> float:
    if np.size(y_true) == 0:
        return float("nan")
    return float(metrics.mean_squared_error(y_true, y_pred))


def score(y_true, y_pred, num_classes: int) -> Dict[str, float]:
    """All metrics for a task; ``test_metric`` is accuracy, or Pearson for regression."""
    if num_classes == 1:
        r = pearson(y_true, y_pred)
        return {"test_metric": r, "pearson": r, "mse": mean_squared_error(y_true, y_pred)}
    acc = accuracy(y_true, y_pred)
    return {
        "test_metric": acc,
        "accuracy": acc,
        "f1": f1_score(y_true, y_pred, num_classes),
        "mcc": matthews_corrcoef(y_true, y_pred, num_classes),
    }


def client_averages(values: Mapping[int, float], weights: Mapping[int, int]) -> Tuple[float, float]:
    """Uniform and sample-count-weighted means over clients (ascending id)."""
    ids = sorted(values)
    if not ids:
        return float("nan"), float("nan")
    v = np.array([values[i] for i in ids], dtype=np.float64)
    w = np.array([weights[i] for i in ids], dtype=np.float64)
    return float(v.mean()), float((v * w).sum() / w.sum())
