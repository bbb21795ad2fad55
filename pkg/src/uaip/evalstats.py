"""Evaluation metrics and multi-run aggregation.

AUC is the Mann-Whitney statistic with midrank tie handling, identical to
counting concordant score pairs with half credit for ties. The paired
signed-rank test is exact (full sign enumeration over the observed ranks)
up to n = 12 and switches to the tie-corrected normal approximation above.
Classification metrics are macro-averaged; classes with no support score 0
in the F1 average rather than being dropped.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, UndefinedMetricError

WILCOXON_EXACT_LIMIT = 12


def _midranks(x: np.ndarray) -> np.ndarray:
    order = np.argsort(x, kind="mergesort")
    ranks = np.empty(x.size, dtype=np.float64)
    sx = x[order]
    i = 0
    while i < x.size:
        j = i
        while j + 1 < x.size and sx[j + 1] == sx[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def accuracy(predicted: Sequence[int], labels: Sequence[int]) -> float:
    p = np.asarray(predicted)
    y = np.asarray(labels)
    if p.shape != y.shape or p.size == 0:
        raise ConfigError("predictions and labels must align and be non-empty")
    return float((p == y).mean())


def macro_f1(predicted: Sequence[int], labels: Sequence[int],
             n_classes: int | None = None) -> float:
    """Unweighted mean of per-class F1. A class with zero predicted and zero
    actual support contributes 0, keeping the average defined."""
    p = np.asarray(predicted, dtype=np.int64)
    y = np.asarray(labels, dtype=np.int64)
    if p.shape != y.shape or p.size == 0:
        raise ConfigError("predictions and labels must align and be non-empty")
    k = n_classes if n_classes is not None else int(max(p.max(), y.max())) + 1
    scores = []
    for c in range(k):
        tp = int(((p == c) & (y == c)).sum())
        fp = int(((p == c) & (y != c)).sum())
        fn = int(((p != c) & (y == c)).sum())
        denom = 2 * tp + fp + fn
        scores.append(2 * tp / denom if denom else 0.0)
    return float(np.mean(scores))


def auc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Probability a positive outranks a negative, ties counted half."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.shape != y.shape or s.size == 0:
        raise ConfigError("scores and labels must align and be non-empty")
    if not np.isin(y, (0, 1)).all():
        raise ConfigError("labels must be 0/1")
    n_pos = int((y == 1).sum())
    n_neg = int((y == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC undefined with a single class")
    ranks = _midranks(s)
    r_pos = ranks[y == 1].sum()
    return float((r_pos - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def multiclass_auc(posteriors: np.ndarray, labels: Sequence[int]) -> float:
    """One-vs-rest AUC per class, macro-averaged over classes present in
    the labels. Absent classes are skipped with a warning."""
    post = np.asarray(posteriors, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if post.ndim != 2 or post.shape[0] != y.shape[0] or y.size == 0:
        raise ConfigError("posteriors must be (N, K) aligned with labels")
    k = post.shape[1]
    present = np.unique(y)
    if present.size < 2:
        raise UndefinedMetricError("AUC undefined with a single class")
    absent = sorted(set(range(k)) - set(present.tolist()))
    if absent:
        warnings.warn(f"classes {absent} absent from labels; skipped in AUC",
                      stacklevel=2)
    vals = [auc(post[:, c], (y == c).astype(np.int64)) for c in present]
    return float(np.mean(vals))


def _normal_sf(z: float) -> float:
    return 0.5 * math.erfc(z / math.sqrt(2.0))


def wilcoxon_signed_rank(a: Sequence[float], b: Sequence[float]) -> float:
    """Two-sided p-value for paired samples.

    Zero differences are dropped (warning and p = 1.0 when none remain).
    Up to n = 12 retained pairs the null distribution of W+ is enumerated
    exactly over all 2^n sign assignments of the observed midranks and
    p = min(1, 2 min(P(W+ <= w), P(W+ >= w))). Beyond that, the normal
    approximation with the standard tie correction is used.
    """
    x = np.asarray(a, dtype=np.float64)
    y = np.asarray(b, dtype=np.float64)
    if x.shape != y.shape or x.size == 0:
        raise ConfigError("paired samples must align and be non-empty")
    d = x - y
    d = d[d != 0.0]
    n = d.size
    if n == 0:
        warnings.warn("all paired differences are zero; p = 1.0", stacklevel=2)
        return 1.0
    ranks = _midranks(np.abs(d))
    w_plus = float(ranks[d > 0].sum())

    if n <= WILCOXON_EXACT_LIMIT:
        # Midranks are multiples of 1/2; doubling gives exact integers.
        r2 = np.rint(ranks * 2).astype(np.int64)
        total = int(r2.sum())
        counts = np.zeros(total + 1, dtype=np.int64)
        counts[0] = 1
        for r in r2:
            shifted = np.zeros_like(counts)
            shifted[r:] = counts[:counts.size - r]
            counts = counts + shifted
        w2 = int(np.rint(w_plus * 2))
        n_assign = float(2 ** n)
        p_le = counts[:w2 + 1].sum() / n_assign
        p_ge = counts[w2:].sum() / n_assign
        return float(min(1.0, 2.0 * min(p_le, p_ge)))

    mean = n * (n + 1) / 4.0
    _, tie_counts = np.unique(np.abs(d), return_counts=True)
    tie_term = float(((tie_counts ** 3) - tie_counts).sum()) / 48.0
    var = n * (n + 1) * (2 * n + 1) / 24.0 - tie_term
    if var <= 0:
        warnings.warn("degenerate signed-rank variance; p = 1.0", stacklevel=2)
        return 1.0
    z = (w_plus - mean) / math.sqrt(var)
    return float(min(1.0, 2.0 * _normal_sf(abs(z))))


def correctness_detection_auc(uncertainties: Sequence[float],
                              correct: Sequence[bool]) -> float:
    """AUC of the uncertainty score for detecting incorrect answers
    (incorrect is the positive class)."""
    u = np.asarray(uncertainties, dtype=np.float64).ravel()
    c = np.asarray(correct, dtype=bool).ravel()
    if u.shape != c.shape:
        raise ConfigError("uncertainties and correctness flags must align")
    return auc(u, (~c).astype(np.int64))


@dataclass
class GroupAccuracy:
    label: str
    n: int
    accuracy: float | None


DEFAULT_ERROR_BINS: tuple[tuple[int, int | None], ...] = ((0, 0), (1, 1), (2, None))


def accuracy_by_error_count(
    correct_prediction: Sequence[bool],
    error_counts: Sequence[int],
    bins: Sequence[tuple[int, int | None]] = DEFAULT_ERROR_BINS,
) -> list[GroupAccuracy]:
    """Group samples by how many of their answers were wrong and report
    accuracy per group. A bin is (lo, hi) inclusive; hi None means open."""
    ok = np.asarray(correct_prediction, dtype=bool)
    cnt = np.asarray(error_counts, dtype=np.int64)
    if ok.shape != cnt.shape:
        raise ConfigError("flags and error counts must align")
    out = []
    for lo, hi in bins:
        sel = cnt >= lo if hi is None else (cnt >= lo) & (cnt <= hi)
        label = f">={lo}" if hi is None else (str(lo) if lo == hi else f"{lo}-{hi}")
        n = int(sel.sum())
        out.append(GroupAccuracy(label=label, n=n,
                                 accuracy=float(ok[sel].mean()) if n else None))
    return out


@dataclass
class RunReport:
    """Test metrics for one trained model on one seed. Rates are fractions
    in [0, 1]; formatting to percent happens at the table layer."""

    method: str
    accuracy: float
    auc: float | None
    macro_f1: float
    mean_queries: float
    n_samples: int


@dataclass
class MethodSummary:
    method: str
    n_runs: int
    accuracy_mean: float
    accuracy_std: float | None
    auc_mean: float | None
    auc_std: float | None
    f1_mean: float
    f1_std: float | None
    queries_mean: float
    queries_std: float | None
    p_value: float | None  # signed-rank on per-run accuracy vs the reference


def _mean_std(vals: list[float]) -> tuple[float, float | None]:
    arr = np.asarray(vals, dtype=np.float64)
    mean = float(arr.mean())
    std = float(arr.std(ddof=1)) if arr.size >= 2 else None
    return mean, std


def aggregate_runs(runs: dict[str, list[RunReport]],
                   reference: str | None = None) -> list[MethodSummary]:
    """Mean and std over runs per method, plus a paired signed-rank p-value
    of each method's per-run accuracy against the reference method."""
    if not runs:
        raise ConfigError("no runs to aggregate")
    lengths = {len(v) for v in runs.values()}
    if len(lengths) != 1 or 0 in lengths:
        raise ConfigError("every method needs the same positive run count")
    if reference is not None and reference not in runs:
        raise ConfigError(f"reference method {reference!r} has no runs")
    summaries = []
    ref_acc = [r.accuracy for r in runs[reference]] if reference else None
    for method, reports in runs.items():
        acc_mean, acc_std = _mean_std([r.accuracy for r in reports])
        f1_mean, f1_std = _mean_std([r.macro_f1 for r in reports])
        q_mean, q_std = _mean_std([r.mean_queries for r in reports])
        aucs = [r.auc for r in reports]
        if any(a is None for a in aucs):
            auc_mean, auc_std = None, None
        else:
            auc_mean, auc_std = _mean_std(aucs)
        p_val = None
        if ref_acc is not None and method != reference and len(ref_acc) >= 2:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                p_val = wilcoxon_signed_rank([r.accuracy for r in reports], ref_acc)
        summaries.append(MethodSummary(
            method=method, n_runs=len(reports),
            accuracy_mean=acc_mean, accuracy_std=acc_std,
            auc_mean=auc_mean, auc_std=auc_std,
            f1_mean=f1_mean, f1_std=f1_std,
            queries_mean=q_mean, queries_std=q_std,
            p_value=p_val,
        ))
    return summaries


def _pct(x: float | None) -> str:
    return "" if x is None else f"{100.0 * x:.2f}"


def _raw(x: float | None) -> str:
    return "" if x is None else f"{x:.2f}"


def write_summary_csv(summaries: Sequence[MethodSummary], path: str | Path) -> None:
    """Results table: percent metrics with two decimals, query counts raw."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["method", "n_runs",
                         "accuracy_mean", "accuracy_std",
                         "auc_mean", "auc_std",
                         "f1_mean", "f1_std",
                         "queries_mean", "queries_std", "p_value"])
        for s in summaries:
            writer.writerow([
                s.method, s.n_runs,
                _pct(s.accuracy_mean), _pct(s.accuracy_std),
                _pct(s.auc_mean), _pct(s.auc_std),
                _pct(s.f1_mean), _pct(s.f1_std),
                _raw(s.queries_mean), _raw(s.queries_std),
                "" if s.p_value is None else f"{s.p_value:.4f}",
            ])


def format_summary_text(summaries: Sequence[MethodSummary]) -> str:
    def pm(mean: str, std: str) -> str:
        return f"{mean} +/- {std}" if std else mean

    rows = [["Method", "Accuracy", "AUC", "F1", "Queries", "P-Value"]]
    for s in summaries:
        rows.append([
            s.method,
            pm(_pct(s.accuracy_mean), _pct(s.accuracy_std)),
            pm(_pct(s.auc_mean), _pct(s.auc_std)) if s.auc_mean is not None else "-",
            pm(_pct(s.f1_mean), _pct(s.f1_std)),
            pm(_raw(s.queries_mean), _raw(s.queries_std)),
            f"{s.p_value:.4f}" if s.p_value is not None else "-",
        ])
    widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
    lines = ["  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip()
             for row in rows]
    return "\n".join(lines) + "\n"


def write_group_accuracy_csv(groups: Sequence[GroupAccuracy], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["group", "n", "accuracy"])
        for g in groups:
            writer.writerow([g.label, g.n, _pct(g.accuracy)])
