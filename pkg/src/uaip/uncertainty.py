"""Per-query uncertainty measures, masks, and threshold calibration.

Two measures are supported for a binary answer distribution with
positive-class probability p:

* entropy in bits, ``H(p) = -p log2 p - (1-p) log2 (1-p)`` with 0 log 0 = 0;
* a Monte-Carlo decomposition over S stochastic forward passes p_1..p_S:
  aleatoric ``mean(p_s (1 - p_s))`` plus epistemic ``mean((p_s - mean)^2)``
  (population normalization), whose sum is the total uncertainty.

A mask marks a query as unreliable when its uncertainty meets or exceeds a
threshold; the boundary value masks. The entropy threshold defaults to 0.95
bits; the Monte-Carlo threshold is calibrated on validation data.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, DataError

DEFAULT_ENTROPY_THRESHOLD = 0.95


def entropy_uncertainty(p):
    """Binary entropy in bits; scalar or elementwise over an array."""
    arr = np.asarray(p, dtype=np.float64)
    if ((arr < 0.0) | (arr > 1.0)).any():
        raise ConfigError("probabilities must lie in [0, 1]")
    with np.errstate(divide="ignore", invalid="ignore"):
        h = -np.where(arr > 0.0, arr * np.log2(arr), 0.0) \
            - np.where(arr < 1.0, (1.0 - arr) * np.log2(1.0 - arr), 0.0)
    h = np.maximum(h, 0.0)  # clamp -0.0 from the log at the endpoints
    return float(h) if np.isscalar(p) or arr.ndim == 0 else h


@dataclass
class UncertaintyEstimate:
    """All measures for one (sample, query) pair. ``total`` is always the
    exact float sum ``aleatoric + epistemic``."""

    aleatoric: float
    epistemic: float
    total: float
    entropy_bits: float


def mc_total_uncertainty(samples: Sequence[float], phi: float | None = None) -> UncertaintyEstimate:
    """Decompose uncertainty over Monte-Carlo probabilities for one pair.

    ``phi`` is the deterministic answer probability used for the entropy
    field; when omitted the sample mean stands in.
    """
    arr = np.asarray(samples, dtype=np.float64)
    if arr.ndim != 1 or arr.size < 2:
        raise ConfigError("need at least 2 Monte-Carlo samples")
    if ((arr < 0.0) | (arr > 1.0)).any():
        raise ConfigError("probabilities must lie in [0, 1]")
    mean = arr.mean()
    aleatoric = float((arr * (1.0 - arr)).mean())
    epistemic = float(((arr - mean) ** 2).mean())
    p_ent = mean if phi is None else phi
    return UncertaintyEstimate(
        aleatoric=aleatoric,
        epistemic=epistemic,
        total=aleatoric + epistemic,
        entropy_bits=entropy_uncertainty(float(p_ent)),
    )


def mc_uncertainty_arrays(samples: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized decomposition for samples shaped (N, S, M).

    Returns (aleatoric, epistemic, total), each (N, M).
    """
    arr = np.asarray(samples, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[1] < 2:
        raise ConfigError("samples must be (N, S, M) with S >= 2")
    if ((arr < 0.0) | (arr > 1.0)).any():
        raise ConfigError("probabilities must lie in [0, 1]")
    mean = arr.mean(axis=1)
    aleatoric = (arr * (1.0 - arr)).mean(axis=1)
    epistemic = ((arr - mean[:, None, :]) ** 2).mean(axis=1)
    return aleatoric, epistemic, aleatoric + epistemic


def compute_mask(uncertainty: np.ndarray, threshold: float) -> np.ndarray:
    """Mask entries whose uncertainty meets or exceeds the threshold."""
    u = np.asarray(uncertainty, dtype=np.float64)
    if not np.isfinite(u).all():
        raise ConfigError("uncertainties must be finite")
    if not np.isfinite(threshold):
        raise ConfigError("threshold must be finite")
    return (u >= threshold).astype(np.int8)


def entropy_threshold(value: float | None = None) -> float:
    """Validated entropy masking threshold in bits; default 0.95."""
    t = DEFAULT_ENTROPY_THRESHOLD if value is None else float(value)
    if not 0.0 < t <= 1.0:
        raise ConfigError(f"entropy threshold must lie in (0, 1], got {t}")
    return t


@dataclass
class ThresholdCalibration:
    threshold: float
    balanced_accuracy: float | None
    # (threshold, true-positive rate, false-positive rate) per candidate,
    # where "positive" means an incorrect answer.
    roc_points: list[tuple[float, float, float]]
    degenerate: str | None = None  # "all_correct" | "all_incorrect"


def calibrate_threshold_mc(
    uncertainties: np.ndarray,
    correct: np.ndarray,
    score: str = "uncertainty",
) -> ThresholdCalibration:
    """Pick the threshold maximizing balanced accuracy for predicting
    incorrectness via ``u >= T``.

    Candidates are the midpoints between consecutive sorted unique
    uncertainty values; ties prefer the smaller threshold. With no incorrect
    pairs the threshold is placed just above the maximum (mask nothing);
    with no correct pairs it is placed at the minimum (mask everything).
    Both degenerate cases warn.

    With ``score="confidence"`` the first argument is instead read as a
    confidence score where low values indicate suspect answers, and the
    fitted rule is ``s <= T``. This is realized by negating the scores and
    reusing the main path, so for any strictly decreasing transform of the
    uncertainties the selected mask set is unchanged.
    """
    u = np.asarray(uncertainties, dtype=np.float64).ravel()
    c = np.asarray(correct, dtype=bool).ravel()
    if u.shape != c.shape or u.size == 0:
        raise ConfigError("uncertainties and correctness flags must align and be non-empty")
    if not np.isfinite(u).all():
        raise ConfigError("uncertainties must be finite")
    if score not in ("uncertainty", "confidence"):
        raise ConfigError(f"unknown calibration score {score!r}")

    if score == "confidence":
        inner = calibrate_threshold_mc(-u, c, score="uncertainty")
        # u >= T  <=>  -u <= -T : flip the fitted cut back.
        return ThresholdCalibration(
            threshold=-inner.threshold,
            balanced_accuracy=inner.balanced_accuracy,
            roc_points=[(-t, tpr, fpr) for t, tpr, fpr in inner.roc_points],
            degenerate=inner.degenerate,
        )

    incorrect = ~c
    n_pos = int(incorrect.sum())
    n_neg = int(c.sum())
    if n_pos == 0:
        warnings.warn(
            "all validation pairs correct; masking threshold set above the "
            "maximum uncertainty (nothing will be masked)",
            stacklevel=2,
        )
        return ThresholdCalibration(
            threshold=float(np.nextafter(u.max(), np.inf)),
            balanced_accuracy=None, roc_points=[], degenerate="all_correct",
        )
    if n_neg == 0:
        warnings.warn(
            "all validation pairs incorrect; masking threshold set at the "
            "minimum uncertainty (everything will be masked)",
            stacklevel=2,
        )
        return ThresholdCalibration(
            threshold=float(u.min()),
            balanced_accuracy=None, roc_points=[], degenerate="all_incorrect",
        )

    uniq = np.unique(u)
    if uniq.size == 1:
        # No midpoint exists; the single value separates nothing. Mask all.
        t = float(uniq[0])
        bal = 0.5 * (1.0 + 0.0)  # TPR 1 at u >= min, TNR 0
        return ThresholdCalibration(threshold=t, balanced_accuracy=bal,
                                     roc_points=[(t, 1.0, 1.0)])

    candidates = (uniq[:-1] + uniq[1:]) / 2.0
    order = np.argsort(u, kind="mergesort")
    u_sorted = u[order]
    inc_sorted = incorrect[order].astype(np.int64)
    cum_inc = np.concatenate([[0], np.cumsum(inc_sorted)])
    best_t = None
    best_bal = -1.0
    roc: list[tuple[float, float, float]] = []
    for t in candidates:
        k = int(np.searchsorted(u_sorted, t, side="left"))  # entries below t
        inc_below = cum_inc[k]
        tp = n_pos - inc_below              # incorrect with u >= t
        fp = n_neg - (k - inc_below)        # correct with u >= t
        tpr = tp / n_pos
        fpr = fp / n_neg
        bal = 0.5 * (tpr + (1.0 - fpr))
        roc.append((float(t), float(tpr), float(fpr)))
        if bal > best_bal:
            best_bal = bal
            best_t = float(t)
    return ThresholdCalibration(threshold=best_t, balanced_accuracy=float(best_bal),
                                 roc_points=roc)


@dataclass
class UncertaintySet:
    """Per-(sample, query) measures for a whole answer-distribution set.
    Monte-Carlo fields are None when no stochastic samples were available."""

    ids: list[str]
    entropy_bits: np.ndarray            # (N, M)
    aleatoric: np.ndarray | None = None  # (N, M)
    epistemic: np.ndarray | None = None
    total: np.ndarray | None = None

    @property
    def has_mc(self) -> bool:
        return self.total is not None


def compute_uncertainty_set(probs: np.ndarray, ids: Sequence[str],
                            mc_samples: np.ndarray | None = None) -> UncertaintySet:
    ent = entropy_uncertainty(np.asarray(probs, dtype=np.float64))
    if mc_samples is None:
        return UncertaintySet(ids=list(ids), entropy_bits=ent)
    au, eu, tu = mc_uncertainty_arrays(mc_samples)
    if au.shape != ent.shape:
        raise ConfigError("probability and sample shapes disagree")
    return UncertaintySet(ids=list(ids), entropy_bits=ent,
                          aleatoric=au, epistemic=eu, total=tu)


_DUMP_HEADER = ["id", "query", "entropy_bits", "aleatoric", "epistemic", "total", "masked"]


def save_uncertainty_csv(uset: UncertaintySet, path: str | Path,
                         masks: np.ndarray | None = None) -> None:
    """One row per (sample, query); Monte-Carlo columns are blank when absent."""
    n, m = uset.entropy_bits.shape
    if masks is not None:
        masks = np.asarray(masks)
        if masks.shape != (n, m):
            raise ConfigError("mask shape mismatch")
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(_DUMP_HEADER)
        for i in range(n):
            for q in range(m):
                row = [uset.ids[i], str(q), "%.17g" % uset.entropy_bits[i, q]]
                if uset.has_mc:
                    row += ["%.17g" % uset.aleatoric[i, q],
                            "%.17g" % uset.epistemic[i, q],
                            "%.17g" % uset.total[i, q]]
                else:
                    row += ["", "", ""]
                row.append(str(int(masks[i, q])) if masks is not None else "")
                writer.writerow(row)


def load_uncertainty_csv(path: str | Path) -> tuple[UncertaintySet, np.ndarray | None]:
    """Inverse of :func:`save_uncertainty_csv`. Returns the set and, when the
    masked column is populated, the mask matrix."""
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != _DUMP_HEADER:
            raise DataError(f"{path}: bad uncertainty dump header {header}")
        per_id: dict[str, dict[int, list[str]]] = {}
        order: list[str] = []
        for row_no, row in enumerate(reader, start=2):
            if len(row) != len(_DUMP_HEADER):
                raise DataError(f"{path}: row {row_no} has {len(row)} fields")
            sid = row[0]
            if sid not in per_id:
                per_id[sid] = {}
                order.append(sid)
            try:
                q = int(row[1])
            except ValueError:
                raise DataError(f"{path}: row {row_no}: bad query index {row[1]!r}") from None
            per_id[sid][q] = row[2:]
    if not order:
        raise DataError(f"{path}: no data rows")
    m = len(per_id[order[0]])
    has_mc = per_id[order[0]].get(0, [""] * 5)[1] != ""
    has_mask = per_id[order[0]].get(0, [""] * 5)[4] != ""
    ent = np.zeros((len(order), m))
    au = np.zeros((len(order), m)) if has_mc else None
    eu = np.zeros((len(order), m)) if has_mc else None
    tu = np.zeros((len(order), m)) if has_mc else None
    masks = np.zeros((len(order), m), dtype=np.int8) if has_mask else None
    for i, sid in enumerate(order):
        cells = per_id[sid]
        if len(cells) != m or set(cells) != set(range(m)):
            raise DataError(f"{path}: sample {sid!r} has inconsistent query rows")
        for q in range(m):
            vals = cells[q]
            ent[i, q] = float(vals[0])
            if has_mc:
                au[i, q] = float(vals[1])
                eu[i, q] = float(vals[2])
                tu[i, q] = float(vals[3])
            if has_mask:
                masks[i, q] = int(vals[4])
    return UncertaintySet(ids=order, entropy_bits=ent, aleatoric=au,
                          epistemic=eu, total=tu), masks
