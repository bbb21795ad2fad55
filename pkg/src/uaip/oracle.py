"""Exact inference on an explicit joint table P(y, q_1..q_M).

The table is a dense array of shape (K, 2, ..., 2): one probability cell
per class and full answer configuration, with answer -1 at index 0 and +1
at index 1 along each query axis. Everything here is brute force on
purpose: posteriors by slicing and summation, query scores by exact
conditional mutual information. It is the reference the learned pursuit is
judged against, and it is only feasible for small M (capped at 20).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .data import JointSpec
from .errors import ConfigError, DataError
from .pursuit import (UNSURE, AnswerProvider, ExplanationTrace, TraceStep,
                      _check_stop_threshold, reached_confidence)

MAX_QUERIES = 20


@dataclass
class JointTable:
    cells: np.ndarray  # (K, 2, ..., 2), sums to 1

    def __post_init__(self) -> None:
        self.cells = np.asarray(self.cells, dtype=np.float64)
        if self.cells.ndim < 2:
            raise ConfigError("joint table needs a class axis and >= 1 query axis")
        if self.cells.ndim - 1 > MAX_QUERIES:
            raise ConfigError(
                f"joint table supports at most {MAX_QUERIES} queries, "
                f"got {self.cells.ndim - 1}"
            )
        if any(s != 2 for s in self.cells.shape[1:]):
            raise ConfigError("every query axis must have size 2")
        if (self.cells < 0).any():
            raise ConfigError("joint table cells must be non-negative")
        if abs(self.cells.sum() - 1.0) > 1e-9:
            raise ConfigError("joint table must sum to 1")

    @property
    def n_classes(self) -> int:
        return self.cells.shape[0]

    @property
    def n_queries(self) -> int:
        return self.cells.ndim - 1


def build_joint(spec: JointSpec) -> JointTable:
    """Joint table of the synthetic generator: answers are conditionally
    independent given the class, each matching its truth-table sign with the
    per-query reliability."""
    if spec.n_queries > MAX_QUERIES:
        raise ConfigError(f"exact joint limited to {MAX_QUERIES} queries")
    cells = spec.class_prior.copy()
    for m in range(spec.n_queries):
        rel = spec.reliability[m]
        pos = spec.truth_table[:, m] == 1
        factor = np.empty((spec.n_classes, 2))
        factor[:, 1] = np.where(pos, rel, 1.0 - rel)
        factor[:, 0] = 1.0 - factor[:, 1]
        cells = cells[..., None] * factor.reshape(
            (spec.n_classes,) + (1,) * m + (2,)
        )
    return JointTable(cells)


def _history_indexer(table: JointTable, history: np.ndarray) -> tuple:
    history = np.asarray(history)
    if history.shape != (table.n_queries,):
        raise DataError(
            f"history must have length {table.n_queries}, got {history.shape}"
        )
    if not np.isin(history, (-1, 0, 1)).all():
        raise DataError("history entries must be -1, 0, or +1")
    idx: list = [slice(None)]
    for v in history:
        idx.append(slice(None) if v == 0 else int(v == 1))
    return tuple(idx)


def _sliced(table: JointTable, history: np.ndarray) -> tuple[np.ndarray, list[int]]:
    """Cells consistent with the history, axes kept for unasked queries
    (in index order), plus the list of those query indices."""
    sub = table.cells[_history_indexer(table, history)]
    unasked = [m for m in range(table.n_queries) if history[m] == 0]
    return sub, unasked


def posterior(table: JointTable, history: np.ndarray) -> np.ndarray:
    """P(y | revealed answers). A history with zero probability mass falls
    back to the uniform distribution with a warning."""
    sub, unasked = _sliced(table, history)
    p = sub.sum(axis=tuple(range(1, 1 + len(unasked))))
    mass = p.sum()
    if mass <= 0.0:
        warnings.warn("history has zero probability mass; returning uniform posterior")
        return np.full(table.n_classes, 1.0 / table.n_classes)
    return p / mass


def _entropy_bits(p: np.ndarray) -> float:
    p = p[p > 0.0]
    return float(-(p * np.log2(p)).sum())


def conditional_mi(table: JointTable, history: np.ndarray) -> np.ndarray:
    """I(Y; Q_m | history) in bits for every query; already-asked queries
    score 0. Computed exactly from the sliced joint."""
    sub, unasked = _sliced(table, history)
    out = np.zeros(table.n_queries)
    mass = sub.sum()
    if mass <= 0.0:
        return out
    for j, m in enumerate(unasked):
        axes = tuple(1 + a for a in range(len(unasked)) if a != j)
        p_ya = sub.sum(axis=axes) / mass  # (K, 2)
        p_y = p_ya.sum(axis=1)
        p_a = p_ya.sum(axis=0)
        # Cancellation can leave a tiny negative where the true value is 0.
        out[m] = max(0.0, _entropy_bits(p_y) + _entropy_bits(p_a)
                     - _entropy_bits(p_ya.ravel()))
    return out


def greedy_ip_next(table: JointTable, history: np.ndarray,
                   mask: np.ndarray | None = None) -> int | None:
    """Most informative available query; ties break to the lowest index."""
    history = np.asarray(history)
    if mask is None:
        mask = np.zeros(table.n_queries, dtype=np.int8)
    avail = (history == 0) & (np.asarray(mask) == 0)
    if not avail.any():
        return None
    scores = conditional_mi(table, history)
    scores[~avail] = -np.inf
    return int(np.argmax(scores))


def bayes_accuracy(table: JointTable) -> float:
    """Accuracy of the Bayes rule that sees all answers: for each answer
    configuration the best class captures max_y P(y, q)."""
    return float(table.cells.max(axis=0).sum())


def oracle_mask(predicted: np.ndarray, true: np.ndarray) -> np.ndarray:
    """Mask exactly the answers that are wrong. Works elementwise on
    matching shapes, so it covers single samples and whole datasets."""
    predicted = np.asarray(predicted)
    true = np.asarray(true)
    if predicted.shape != true.shape:
        raise DataError(
            f"answer shapes disagree: {predicted.shape} vs {true.shape}")
    return (predicted != true).astype(np.int8)


def greedy_ip_rollout(table: JointTable, answers: np.ndarray | AnswerProvider,
                      mask: np.ndarray | None = None, *,
                      stop_threshold: float = 0.85, budget: int | None = None,
                      sample_id: str = "") -> ExplanationTrace:
    """Run exact greedy pursuit with the same stopping and unsure semantics
    as the learned engine."""
    _check_stop_threshold(stop_threshold, table.n_classes)
    m = table.n_queries
    if budget is None:
        budget = m
    if not 0 <= budget <= m:
        raise ConfigError(f"budget must lie in [0, {m}], got {budget}")

    if callable(answers):
        provider = answers
    else:
        vec = np.asarray(answers)
        if vec.shape != (m,) or not np.isin(vec, (-1, 1)).all():
            raise DataError(f"answers must be a +1/-1 vector of length {m}")
        provider = lambda q: int(vec[q])  # noqa: E731

    if mask is None:
        mask_arr = np.zeros(m, dtype=np.int8)
    else:
        mask_arr = np.asarray(mask, dtype=np.int8).copy()
        if mask_arr.shape != (m,) or not np.isin(mask_arr, (0, 1)).all():
            raise ConfigError("mask must be a 0/1 vector matching the query count")

    history = np.zeros(m)
    post = posterior(table, history)
    steps: list[TraceStep] = []
    termination = "exhausted"
    while True:
        if reached_confidence(post, stop_threshold):
            termination = "confidence"
            break
        if len(steps) >= budget:
            break
        query = greedy_ip_next(table, history, mask_arr)
        if query is None:
            break
        answer = provider(query)
        if answer == UNSURE:
            mask_arr[query] = 1
            continue
        if answer not in (-1, 1):
            raise ConfigError(f"answer must be +1/-1, got {answer}")
        history[query] = float(answer)
        post = posterior(table, history)
        steps.append(TraceStep(query=query, answer=answer, posterior=post))
    return ExplanationTrace(
        sample_id=sample_id,
        steps=steps,
        masked=[int(i) for i in np.nonzero(mask_arr)[0]],
        termination=termination,
        predicted=int(np.argmax(post)),
        confidence=float(np.max(post)),
    )
