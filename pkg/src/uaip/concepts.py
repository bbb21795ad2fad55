"""Concept-answer providers.

Three interchangeable sources produce per-query positive-answer
probabilities for each sample: a trainable tabular model with dropout
(whose stochastic forward passes supply Monte-Carlo samples), a parametric
simulator, and a probability-file import. Signed answers are recovered by
rounding: p >= 0.5 maps to +1.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from . import nets
from .data import ConceptDataset
from .errors import ConfigError, DataError
from .rand import stream

_FMT = "%.17g"


@dataclass
class AnswerDistributionSet:
    ids: list[str]
    probs: np.ndarray  # (N, M) in [0, 1]

    def __post_init__(self) -> None:
        self.probs = np.asarray(self.probs, dtype=np.float64)
        if self.probs.ndim != 2 or self.probs.shape[0] != len(self.ids):
            raise DataError("probs must be (N, M) aligned with ids")
        if ((self.probs < 0.0) | (self.probs > 1.0)).any():
            raise DataError("probabilities must lie in [0, 1]")


@dataclass
class MCSampleSet:
    ids: list[str]
    samples: np.ndarray  # (N, S, M) in [0, 1]

    def __post_init__(self) -> None:
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 3 or self.samples.shape[0] != len(self.ids):
            raise DataError("samples must be (N, S, M) aligned with ids")
        if self.samples.shape[1] < 2:
            raise DataError("need at least 2 Monte-Carlo passes")
        if ((self.samples < 0.0) | (self.samples > 1.0)).any():
            raise DataError("probabilities must lie in [0, 1]")


@dataclass
class CorrectnessLog:
    """Whether round(p) matched the ground-truth answer, per (sample, query)."""

    ids: list[str]
    correct: np.ndarray  # (N, M) bool


def answers_from_probs(probs: np.ndarray) -> np.ndarray:
    """Signed answers by rounding: p >= 0.5 -> +1, else -1."""
    p = np.asarray(probs, dtype=np.float64)
    return np.where(p >= 0.5, 1, -1).astype(np.int8)


@dataclass
class ConceptTrainConfig:
    epochs: int = 150
    lr: float = 1e-3
    batch_size: int = 64
    dropout: float = 0.3
    hidden: tuple[int, ...] = (128, 128)
    seed: int = 0

    def __post_init__(self) -> None:
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")


@dataclass
class ConceptModelParams:
    layers: list[nets.DenseLayer]
    dropout: float
    feature_dim: int
    n_queries: int
    config: ConceptTrainConfig
    train_meta: dict


def train_concept_model(train: ConceptDataset, config: ConceptTrainConfig | None = None) -> ConceptModelParams:
    """Fit features -> per-query answer logits with binary cross-entropy.

    Dropout is active during training (and later reused for Monte-Carlo
    sampling). Zero epochs returns the seeded initialization untouched.
    """
    if train.features is None:
        raise DataError(
            "dataset has no feature columns; train on features or use the "
            "simulator / probability import instead"
        )
    config = config or ConceptTrainConfig()
    d = train.features.shape[1]
    m = train.n_queries
    rng = stream(config.seed, "concept-init")
    layers = nets.mlp_init([d, *config.hidden, m], rng)
    params = nets.mlp_params(layers)
    targets_all = (train.answers > 0).astype(np.float64)

    curve: list[float] = []
    if config.epochs > 0:
        opt = nets.adam_init(params, lr=config.lr)
        step_rng = stream(config.seed, "concept-train")
        n = train.n
        for _epoch in range(config.epochs):
            order = step_rng.permutation(n)
            losses = []
            for start in range(0, n, config.batch_size):
                idx = order[start:start + config.batch_size]
                x = ad.tensor(train.features[idx])
                masks = None
                if config.dropout > 0.0:
                    masks = [step_rng.random((len(idx), h)) >= config.dropout
                             for h in config.hidden]
                logits = nets.mlp_forward(layers, x, config.dropout, masks)
                loss = ad.sigmoid_bce(logits, targets_all[idx])
                ad.backward(loss)
                nets.adam_step(params, [p.grad for p in params], opt)
                ad.zero_grad(params)
                losses.append(loss.value[0, 0])
            curve.append(float(np.mean(losses)))
    return ConceptModelParams(
        layers=layers, dropout=config.dropout, feature_dim=d, n_queries=m,
        config=config,
        train_meta={"loss_curve": curve,
                    "final_loss": curve[-1] if curve else None},
    )


def _features_of(data: ConceptDataset | np.ndarray) -> tuple[np.ndarray, list[str]]:
    if isinstance(data, ConceptDataset):
        if data.features is None:
            raise DataError("dataset has no feature columns")
        return data.features, list(data.ids)
    arr = np.asarray(data, dtype=np.float64)
    return arr, [str(i) for i in range(arr.shape[0])]


def predict_distributions(model: ConceptModelParams, data: ConceptDataset | np.ndarray) -> AnswerDistributionSet:
    """Deterministic answer probabilities (dropout off)."""
    x, ids = _features_of(data)
    if x.shape[1] != model.feature_dim:
        raise ConfigError(f"expected {model.feature_dim} features, got {x.shape[1]}")
    return AnswerDistributionSet(ids=ids, probs=nets.sigmoid(nets.mlp_apply(model.layers, x)))


def mc_sample_distributions(model: ConceptModelParams, data: ConceptDataset | np.ndarray,
                            n_passes: int = 30, seed: int = 0) -> MCSampleSet:
    """Stochastic answer probabilities: ``n_passes`` dropout-on forwards.

    Dropout masks come from per-sample streams keyed by (seed, sample id),
    so results do not depend on batch composition.
    """
    if n_passes < 2:
        raise ConfigError("need at least 2 Monte-Carlo passes")
    if model.dropout <= 0.0:
        raise ConfigError(
            "model was trained without dropout, so stochastic passes would "
            "all agree; retrain with dropout > 0 or use the simulator"
        )
    x, ids = _features_of(data)
    if x.shape[1] != model.feature_dim:
        raise ConfigError(f"expected {model.feature_dim} features, got {x.shape[1]}")
    n = x.shape[0]
    widths = [layer.weight.cols for layer in model.layers[:-1]]
    masks = [np.empty((n_passes, n, w), dtype=bool) for w in widths]
    for i, sid in enumerate(ids):
        rng = stream(seed, "mc", sid)
        for li, w in enumerate(widths):
            masks[li][:, i, :] = rng.random((n_passes, w)) >= model.dropout
    out = np.empty((n, n_passes, model.n_queries))
    for s in range(n_passes):
        logits = nets.mlp_apply(model.layers, x, model.dropout,
                                [mk[s] for mk in masks])
        out[:, s, :] = nets.sigmoid(logits)
    return MCSampleSet(ids=ids, samples=out)


@dataclass
class SimulatorParams:
    """Parametric answer source standing in for a trained concept model.

    Per (sample, query): with probability ``ambiguity_rate`` the reported
    probability falls uniformly in ``ambiguous_band`` (a coin flip once
    rounded) and the Monte-Carlo passes scatter widely; otherwise the
    emission is confident and points at the true answer with probability
    ``base_accuracy``. Confident-but-wrong emissions are drawn slightly
    less extreme and their Monte-Carlo passes both scatter more and drift
    toward 0.5 (``wrong_shrink``), modelling the assumption that an answer
    model is visibly less sure where it errs. Extremities are clipped at
    ``extremity_clip`` so confident draws never cross into the band.
    """

    base_accuracy: float = 0.9
    ambiguity_rate: float = 0.2
    ambiguous_band: tuple[float, float] = (0.35, 0.65)
    correct_beta: tuple[float, float] = (2.0, 38.0)   # extremity ~ mean 0.05
    wrong_beta: tuple[float, float] = (2.0, 18.0)     # extremity ~ mean 0.10
    extremity_clip: float = 0.30
    mc_sigma_confident: float = 0.02
    mc_sigma_wrong: float = 0.06
    mc_sigma_ambiguous: float = 0.15
    wrong_shrink: float = 0.7
    n_passes: int = 30

    def __post_init__(self) -> None:
        if not 0.5 < self.base_accuracy <= 1.0:
            raise ConfigError("base_accuracy must lie in (0.5, 1]")
        if not 0.0 <= self.ambiguity_rate <= 1.0:
            raise ConfigError("ambiguity_rate must lie in [0, 1]")
        lo, hi = self.ambiguous_band
        if not 0.0 < lo < hi < 1.0:
            raise ConfigError("ambiguous_band must satisfy 0 < lo < hi < 1")
        if self.n_passes < 2:
            raise ConfigError("need at least 2 Monte-Carlo passes")
        if not 0.0 < self.wrong_shrink <= 1.0:
            raise ConfigError("wrong_shrink must lie in (0, 1]")


def simulate_answers(ds: ConceptDataset, params: SimulatorParams | None = None,
                     seed: int = 0) -> tuple[AnswerDistributionSet, MCSampleSet, CorrectnessLog]:
    """Emit simulated answer distributions for every (sample, query).

    Randomness is drawn from per-sample streams keyed by (seed, sample id).
    The correctness log records whether round(p) matches the ground truth.
    """
    params = params or SimulatorParams()
    n, m, s_passes = ds.n, ds.n_queries, params.n_passes
    lo, hi = params.ambiguous_band
    probs = np.empty((n, m))
    samples = np.empty((n, s_passes, m))
    truth_pos = ds.answers > 0
    for i, sid in enumerate(ds.ids):
        rng = stream(seed, "simulate", sid)
        ambiguous = rng.random(m) < params.ambiguity_rate
        points_true = rng.random(m) < params.base_accuracy
        ext_correct = np.minimum(rng.beta(*params.correct_beta, size=m), params.extremity_clip)
        ext_wrong = np.minimum(rng.beta(*params.wrong_beta, size=m), params.extremity_clip)
        band = rng.uniform(lo, hi, size=m)
        noise = rng.normal(0.0, 1.0, size=(s_passes, m))

        ext = np.where(points_true, ext_correct, ext_wrong)
        direction_pos = truth_pos[i] == points_true  # emitted side is positive
        p = np.where(ambiguous, band, np.where(direction_pos, 1.0 - ext, ext))
        probs[i] = p

        center = np.where(ambiguous, p,
                          np.where(points_true, p, 0.5 + params.wrong_shrink * (p - 0.5)))
        sigma = np.where(ambiguous, params.mc_sigma_ambiguous,
                         np.where(points_true, params.mc_sigma_confident,
                                  params.mc_sigma_wrong))
        samples[i] = np.clip(center + sigma * noise, 0.0, 1.0)
    correct = (probs >= 0.5) == truth_pos
    return (AnswerDistributionSet(ids=list(ds.ids), probs=probs),
            MCSampleSet(ids=list(ds.ids), samples=samples),
            CorrectnessLog(ids=list(ds.ids), correct=correct))


def export_probabilities(probs: AnswerDistributionSet, path: str | Path,
                         mc: MCSampleSet | None = None) -> None:
    """Write a probability file.

    Layout: a header line ``id,M,S`` (the literal tag then the two counts,
    S = 0 without a Monte-Carlo block); then per sample one mean line
    ``id,p_1,...,p_M`` followed by S pass lines ``id,s,p_1,...,p_M``.
    Reals carry 17 significant digits and round-trip bit-exactly.
    """
    n, m = probs.probs.shape
    s_passes = 0
    if mc is not None:
        if mc.ids != probs.ids:
            raise DataError("probability and sample ids disagree")
        if mc.samples.shape[2] != m:
            raise DataError("probability and sample query counts disagree")
        s_passes = mc.samples.shape[1]
    with open(path, "w", newline="") as fh:
        fh.write(f"id,{m},{s_passes}\n")
        for i, sid in enumerate(probs.ids):
            fh.write(sid + "," + ",".join(_FMT % p for p in probs.probs[i]) + "\n")
            for s in range(s_passes):
                fh.write(f"{sid},{s}," + ",".join(_FMT % p for p in mc.samples[i, s]) + "\n")


def import_probabilities(path: str | Path) -> tuple[AnswerDistributionSet, MCSampleSet | None]:
    """Inverse of :func:`export_probabilities`.

    A file without pass lines yields ``(probs, None)`` with a warning, since
    Monte-Carlo masking is then unavailable downstream.
    """
    path = Path(path)
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise DataError(f"{path}: empty probability file")
    head = lines[0].split(",")
    if len(head) != 3 or head[0] != "id":
        raise DataError(f"{path}: bad header {lines[0]!r} (expected id,M,S)")
    try:
        m, s_passes = int(head[1]), int(head[2])
    except ValueError:
        raise DataError(f"{path}: bad header counts {lines[0]!r}") from None
    if m < 1 or s_passes < 0:
        raise DataError(f"{path}: bad header counts {lines[0]!r}")

    ids: list[str] = []
    seen: set[str] = set()
    probs_rows: list[list[float]] = []
    mc_rows: list[np.ndarray] = []
    block = 1 + s_passes
    body = lines[1:]
    if len(body) % block != 0:
        raise DataError(f"{path}: {len(body)} data lines is not a multiple of {block}")

    def parse_reals(fields: list[str], line_no: int) -> list[float]:
        vals = []
        for f in fields:
            try:
                v = float(f)
            except ValueError:
                raise DataError(f"{path}: line {line_no}: bad probability {f!r}") from None
            if not 0.0 <= v <= 1.0:
                raise DataError(f"{path}: line {line_no}: probability {v} outside [0, 1]")
            vals.append(v)
        return vals

    for b in range(len(body) // block):
        line_no = 2 + b * block
        mean_fields = body[b * block].split(",")
        if len(mean_fields) != 1 + m:
            raise DataError(f"{path}: line {line_no} has {len(mean_fields)} fields, expected {1 + m}")
        sid = mean_fields[0]
        if sid in seen:
            raise DataError(f"{path}: duplicate id {sid!r} at line {line_no}")
        seen.add(sid)
        ids.append(sid)
        probs_rows.append(parse_reals(mean_fields[1:], line_no))
        block_samples = np.empty((s_passes, m))
        for s in range(s_passes):
            ln = line_no + 1 + s
            fields = body[b * block + 1 + s].split(",")
            if len(fields) != 2 + m:
                raise DataError(f"{path}: line {ln} has {len(fields)} fields, expected {2 + m}")
            if fields[0] != sid or fields[1] != str(s):
                raise DataError(f"{path}: line {ln}: expected pass {s} of {sid!r}")
            block_samples[s] = parse_reals(fields[2:], ln)
        if s_passes:
            mc_rows.append(block_samples)

    if not ids:
        raise DataError(f"{path}: no samples")
    probs = AnswerDistributionSet(ids=ids, probs=np.asarray(probs_rows))
    if not s_passes:
        warnings.warn(
            f"{path}: no Monte-Carlo block; only entropy-based masking will "
            "be available", stacklevel=2,
        )
        return probs, None
    return probs, MCSampleSet(ids=ids, samples=np.stack(mc_rows))
