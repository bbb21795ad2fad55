"""Concept-annotated datasets: CSV round-trip, synthesis, splits, corruption.

A dataset row is an id, an integer class label, M signed concept answers
(+1/-1), and optionally D real feature columns. The CSV layout is
``id,label,c_1,...,c_M[,f_1,...,f_D]``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, DataError
from .rand import stream

_FLOAT_FMT = "%.17g"


@dataclass
class FeatureNoise:
    """Two-component feature noise: per sample, sigma_high with probability
    p_high, else sigma_low. Heteroscedastic rows are what make some samples
    genuinely harder for a downstream concept model."""

    sigma_low: float = 0.1
    sigma_high: float = 1.5
    p_high: float = 0.3

    def __post_init__(self) -> None:
        if self.sigma_low < 0 or self.sigma_high < 0:
            raise ConfigError("noise sigmas must be non-negative")
        if not 0.0 <= self.p_high <= 1.0:
            raise ConfigError(f"p_high must be in [0, 1], got {self.p_high}")


@dataclass
class JointSpec:
    """Generative model: class prior, per-class truth table of signed
    answers, per-query reliability (probability the sampled answer matches
    the table), and feature noise."""

    n_classes: int
    n_queries: int
    class_prior: np.ndarray
    truth_table: np.ndarray   # (K, M) entries +1/-1
    reliability: np.ndarray   # (M,) in (0.5, 1]
    noise: FeatureNoise = field(default_factory=FeatureNoise)

    def __post_init__(self) -> None:
        self.class_prior = np.asarray(self.class_prior, dtype=np.float64)
        self.truth_table = np.asarray(self.truth_table, dtype=np.int8)
        self.reliability = np.asarray(self.reliability, dtype=np.float64)
        if self.n_classes < 2:
            raise ConfigError("need at least 2 classes")
        if self.n_queries < 1:
            raise ConfigError("need at least 1 query")
        if self.class_prior.shape != (self.n_classes,):
            raise ConfigError("class_prior shape mismatch")
        if (self.class_prior < 0).any() or abs(self.class_prior.sum() - 1.0) > 1e-9:
            raise ConfigError("class_prior must be a distribution")
        if self.truth_table.shape != (self.n_classes, self.n_queries):
            raise ConfigError("truth_table shape mismatch")
        if not np.isin(self.truth_table, (-1, 1)).all():
            raise ConfigError("truth_table entries must be +1/-1")
        if self.reliability.shape != (self.n_queries,):
            raise ConfigError("reliability shape mismatch")
        if (self.reliability <= 0.5).any() or (self.reliability > 1.0).any():
            raise ConfigError("reliability must lie in (0.5, 1]")


@dataclass
class ConceptDataset:
    ids: list[str]
    answers: np.ndarray           # (N, M) int8, +1/-1
    labels: np.ndarray            # (N,) int64
    n_classes: int
    features: np.ndarray | None = None   # (N, D) float64
    noise_sigma: np.ndarray | None = None  # (N,) synth bookkeeping, not serialized

    def __post_init__(self) -> None:
        self.answers = np.asarray(self.answers, dtype=np.int8)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        n = len(self.ids)
        if self.answers.ndim != 2 or self.answers.shape[0] != n:
            raise DataError("answers must be (N, M) aligned with ids")
        if not np.isin(self.answers, (-1, 1)).all():
            raise DataError("answers must be +1/-1")
        if self.labels.shape != (n,):
            raise DataError("labels must be (N,) aligned with ids")
        if self.n_classes < 2:
            raise DataError("n_classes must be >= 2")
        if n and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise DataError("labels out of range")
        if len(set(self.ids)) != n:
            raise DataError("duplicate sample ids")
        for sid in self.ids:
            if "," in sid or "\n" in sid:
                raise DataError(f"sample id {sid!r} contains a delimiter")
        if self.features is not None:
            self.features = np.asarray(self.features, dtype=np.float64)
            if self.features.ndim != 2 or self.features.shape[0] != n:
                raise DataError("features must be (N, D) aligned with ids")

    @property
    def n(self) -> int:
        return len(self.ids)

    @property
    def n_queries(self) -> int:
        return self.answers.shape[1]


def subset(ds: ConceptDataset, indices: Sequence[int]) -> ConceptDataset:
    idx = np.asarray(indices, dtype=np.int64)
    return ConceptDataset(
        ids=[ds.ids[i] for i in idx],
        answers=ds.answers[idx].copy(),
        labels=ds.labels[idx].copy(),
        n_classes=ds.n_classes,
        features=None if ds.features is None else ds.features[idx].copy(),
        noise_sigma=None if ds.noise_sigma is None else ds.noise_sigma[idx].copy(),
    )


def concat(parts: Sequence[ConceptDataset]) -> ConceptDataset:
    if not parts:
        raise DataError("concat of zero datasets")
    k = parts[0].n_classes
    m = parts[0].n_queries
    has_feat = parts[0].features is not None
    for p in parts[1:]:
        if p.n_classes != k or p.n_queries != m or (p.features is not None) != has_feat:
            raise DataError("concat: incompatible dataset shapes")
    return ConceptDataset(
        ids=[sid for p in parts for sid in p.ids],
        answers=np.concatenate([p.answers for p in parts]),
        labels=np.concatenate([p.labels for p in parts]),
        n_classes=k,
        features=np.concatenate([p.features for p in parts]) if has_feat else None,
        noise_sigma=None,
    )


def _parse_header(header: list[str], path: str) -> tuple[int, int]:
    if len(header) < 3 or header[0] != "id" or header[1] != "label":
        raise DataError(f"{path}: header must start with id,label,c_1,...")
    m = 0
    i = 2
    while i < len(header) and header[i] == f"c_{m + 1}":
        m += 1
        i += 1
    if m == 0:
        raise DataError(f"{path}: no concept columns found in header")
    d = 0
    while i < len(header) and header[i] == f"f_{d + 1}":
        d += 1
        i += 1
    if i != len(header):
        raise DataError(f"{path}: unexpected header column {header[i]!r}")
    return m, d


def load_concept_csv(path: str | Path, n_classes: int | None = None) -> ConceptDataset:
    """Load a dataset, validating every cell. Errors name the offending
    row and column."""
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        m, d = _parse_header(header, str(path))
        ids: list[str] = []
        answers: list[list[int]] = []
        labels: list[int] = []
        features: list[list[float]] = []
        seen: set[str] = set()
        for row_no, row in enumerate(reader, start=2):
            if len(row) != 2 + m + d:
                raise DataError(
                    f"{path}: row {row_no} has {len(row)} fields, expected {2 + m + d}"
                )
            sid = row[0]
            if sid in seen:
                raise DataError(f"{path}: duplicate id {sid!r} at row {row_no}")
            seen.add(sid)
            try:
                label = int(row[1])
            except ValueError:
                raise DataError(
                    f"{path}: row {row_no}, column label: invalid value {row[1]!r}"
                ) from None
            ans_row = []
            for j in range(m):
                cell = row[2 + j].strip()
                if cell in ("1", "+1"):
                    ans_row.append(1)
                elif cell == "-1":
                    ans_row.append(-1)
                else:
                    raise DataError(
                        f"{path}: row {row_no}, column c_{j + 1}: "
                        f"invalid concept value {row[2 + j]!r} (must be +1 or -1)"
                    )
            feat_row = []
            for j in range(d):
                try:
                    feat_row.append(float(row[2 + m + j]))
                except ValueError:
                    raise DataError(
                        f"{path}: row {row_no}, column f_{j + 1}: "
                        f"invalid feature value {row[2 + m + j]!r}"
                    ) from None
            ids.append(sid)
            labels.append(label)
            answers.append(ans_row)
            if d:
                features.append(feat_row)
    labels_arr = np.asarray(labels, dtype=np.int64)
    if labels_arr.size == 0:
        raise DataError(f"{path}: no data rows")
    if labels_arr.min() < 0:
        raise DataError(f"{path}: negative class label")
    k = n_classes if n_classes is not None else int(labels_arr.max()) + 1
    return ConceptDataset(
        ids=ids,
        answers=np.asarray(answers, dtype=np.int8),
        labels=labels_arr,
        n_classes=max(k, 2),
        features=np.asarray(features) if d else None,
    )


def save_concept_csv(ds: ConceptDataset, path: str | Path) -> None:
    path = Path(path)
    m = ds.n_queries
    d = 0 if ds.features is None else ds.features.shape[1]
    header = ["id", "label"] + [f"c_{j + 1}" for j in range(m)] + [f"f_{j + 1}" for j in range(d)]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for i, sid in enumerate(ds.ids):
            row = [sid, str(int(ds.labels[i]))]
            row += [str(int(a)) for a in ds.answers[i]]
            if d:
                row += [_FLOAT_FMT % x for x in ds.features[i]]
            writer.writerow(row)


def synth_generate(spec: JointSpec, n: int, seed: int) -> ConceptDataset:
    """Sample n rows from the joint: label from the prior, answers from the
    truth table flipped independently with probability 1 - reliability,
    features = answers + per-sample Gaussian noise (sigma recorded)."""
    if n < 1:
        raise ConfigError("n must be >= 1")
    rng = stream(seed, "synth")
    k, m = spec.n_classes, spec.n_queries
    labels = rng.choice(k, size=n, p=spec.class_prior).astype(np.int64)
    keep = rng.random((n, m)) < spec.reliability
    answers = spec.truth_table[labels] * np.where(keep, 1, -1).astype(np.int8)
    high = rng.random(n) < spec.noise.p_high
    sigma = np.where(high, spec.noise.sigma_high, spec.noise.sigma_low)
    features = answers + rng.normal(0.0, 1.0, size=(n, m)) * sigma[:, None]
    ids = [f"s{i:06d}" for i in range(n)]
    return ConceptDataset(
        ids=ids, answers=answers, labels=labels, n_classes=k,
        features=features, noise_sigma=sigma,
    )


@dataclass
class SplitSpec:
    train: float = 0.6
    val: float = 0.2
    test: float = 0.2
    seed: int = 0

    def __post_init__(self) -> None:
        fracs = (self.train, self.val, self.test)
        if any(f < 0 for f in fracs):
            raise ConfigError("split fractions must be non-negative")
        if abs(sum(fracs) - 1.0) > 1e-9:
            raise ConfigError(f"split fractions must sum to 1, got {sum(fracs)}")


def _largest_remainder(n: int, fracs: Sequence[float]) -> list[int]:
    raw = [n * f for f in fracs]
    counts = [int(np.floor(x)) for x in raw]
    rem = n - sum(counts)
    # Distribute leftovers by descending fractional part, earlier split on ties.
    order = sorted(range(len(fracs)), key=lambda i: (-(raw[i] - counts[i]), i))
    for i in order[:rem]:
        counts[i] += 1
    return counts


def split(ds: ConceptDataset, spec: SplitSpec) -> tuple[ConceptDataset, ConceptDataset, ConceptDataset]:
    """Deterministic train/val/test split, stratified by label whenever
    every class has at least 3 samples. Raises if any split comes out empty.
    """
    fracs = (spec.train, spec.val, spec.test)
    rng = stream(spec.seed, "split")
    class_counts = np.bincount(ds.labels, minlength=ds.n_classes)
    stratify = (class_counts[class_counts > 0] >= 3).all() and (class_counts > 0).any()
    buckets: list[list[int]] = [[], [], []]
    if stratify:
        for c in range(ds.n_classes):
            idx = np.nonzero(ds.labels == c)[0]
            if idx.size == 0:
                continue
            idx = idx[rng.permutation(idx.size)]
            counts = _largest_remainder(idx.size, fracs)
            pos = 0
            for b, cnt in enumerate(counts):
                buckets[b].extend(idx[pos:pos + cnt].tolist())
                pos += cnt
    else:
        idx = rng.permutation(ds.n)
        counts = _largest_remainder(ds.n, fracs)
        pos = 0
        for b, cnt in enumerate(counts):
            buckets[b].extend(idx[pos:pos + cnt].tolist())
            pos += cnt
    names = ("train", "val", "test")
    for name, bucket, frac in zip(names, buckets, fracs):
        if not bucket:
            raise DataError(f"{name} split is empty (fraction {frac}, n={ds.n})")
    return tuple(subset(ds, sorted(b)) for b in buckets)  # type: ignore[return-value]


@dataclass
class CorruptionLog:
    """Which answer indices were flipped, per sample (0-based, sorted)."""

    ids: list[str]
    flipped: list[list[int]]

    def counts(self) -> np.ndarray:
        return np.asarray([len(f) for f in self.flipped], dtype=np.int64)


def corrupt_answers(ds: ConceptDataset, j: int, seed: int) -> tuple[ConceptDataset, CorruptionLog]:
    """Flip exactly j distinct answers per sample, uniformly at random."""
    m = ds.n_queries
    if not 0 <= j <= m:
        raise DataError(f"flip count {j} out of range for {m} queries")
    rng = stream(seed, "corrupt")
    answers = ds.answers.copy()
    flipped: list[list[int]] = []
    for i in range(ds.n):
        idx = np.sort(rng.choice(m, size=j, replace=False)) if j else np.empty(0, dtype=np.int64)
        answers[i, idx] *= -1
        flipped.append([int(x) for x in idx])
    out = ConceptDataset(
        ids=list(ds.ids), answers=answers, labels=ds.labels.copy(),
        n_classes=ds.n_classes,
        features=None if ds.features is None else ds.features.copy(),
        noise_sigma=None if ds.noise_sigma is None else ds.noise_sigma.copy(),
    )
    return out, CorruptionLog(ids=list(ds.ids), flipped=flipped)


def save_corruption_log(log: CorruptionLog, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "flipped_indices"])
        for sid, idx in zip(log.ids, log.flipped):
            writer.writerow([sid, ";".join(str(i) for i in idx)])


def load_corruption_log(path: str | Path) -> CorruptionLog:
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["id", "flipped_indices"]:
            raise DataError(f"{path}: bad corruption log header {header}")
        ids, flipped = [], []
        for row_no, row in enumerate(reader, start=2):
            if len(row) != 2:
                raise DataError(f"{path}: row {row_no} has {len(row)} fields, expected 2")
            ids.append(row[0])
            if row[1]:
                try:
                    flipped.append(sorted(int(x) for x in row[1].split(";")))
                except ValueError:
                    raise DataError(f"{path}: row {row_no}: bad index list {row[1]!r}") from None
            else:
                flipped.append([])
    return CorruptionLog(ids=ids, flipped=flipped)
