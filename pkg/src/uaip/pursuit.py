"""Sequential query selection with a jointly trained querier and classifier.

A history is the vector of signed answers revealed so far (+1/-1, 0 for
unasked). The classifier maps any history to class logits; the querier sees
the history concatenated with an availability vector (1 for queries that are
both unasked and unmasked) and selects the next query through a
straight-through softmax. Training draws a random history per sample, lets
the querier add one more query, and minimizes cross-entropy of the
classifier on the extended history, so the selector is pushed toward the
query whose answer most sharpens the posterior. Masked queries are never
available, in training or at inference.

With no masks the whole pipeline degrades bit-exactly to plain
information-pursuit training: the mask tensor is all zeros and every code
path, including RNG consumption, is shared.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from . import nets
from .errors import ConfigError, DataError, GraphError, NumericsError
from .rand import stream

UNSURE = 0  # sentinel return for answer providers: mask the query, ask on

AnswerProvider = Callable[[int], int]


@dataclass
class History:
    """Signed answers revealed so far; ``order`` lists queries as asked."""

    h: np.ndarray           # (M,) float64 in {-1, 0, +1}
    order: list[int] = field(default_factory=list)

    @classmethod
    def empty(cls, n_queries: int) -> "History":
        return cls(h=np.zeros(n_queries))

    @property
    def asked(self) -> np.ndarray:
        return self.h != 0.0


def encode_input(history: History, mask: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Classifier input is the history itself; querier input appends the
    availability vector (unasked and unmasked)."""
    m = history.h.shape[0]
    mask = np.asarray(mask)
    if mask.shape != (m,):
        raise ConfigError(f"mask shape {mask.shape} != ({m},)")
    available = (~history.asked) & (mask == 0)
    return history.h.copy(), np.concatenate([history.h, available.astype(np.float64)])


@dataclass
class PursuitTrainConfig:
    epochs: int = 200
    lr: float = 1e-4
    batch_size: int | None = None  # None: 16 up to 512 train samples, else 64
    hidden: tuple[int, ...] = (128, 128)
    tau_start: float = 1.0
    tau_end: float = 0.2
    st_mode: str = "argmax"
    seed: int = 0
    # Optional second phase where training histories come from rolling out
    # the current selector instead of uniform subsets. Off by default.
    sequential_finetune_epochs: int = 0
    val_batch: int = 256

    def __post_init__(self) -> None:
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if self.batch_size is not None and self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.st_mode not in ("argmax", "sample"):
            raise ConfigError(f"unknown st_mode {self.st_mode!r}")
        if self.sequential_finetune_epochs < 0:
            raise ConfigError("sequential_finetune_epochs must be >= 0")
        nets.TemperatureSchedule(self.tau_start, self.tau_end)  # validates

    def resolve_batch(self, n_train: int) -> int:
        if self.batch_size is not None:
            return self.batch_size
        return 16 if n_train <= 512 else 64


@dataclass
class PursuitData:
    """Answers as the pursuit will see them (ground truth or a concept
    model's rounded predictions), with optional per-sample masks."""

    answers: np.ndarray          # (N, M) +1/-1
    labels: np.ndarray           # (N,)
    n_classes: int
    masks: np.ndarray | None = None  # (N, M) 0/1
    ids: list[str] | None = None

    def __post_init__(self) -> None:
        self.answers = np.asarray(self.answers, dtype=np.int8)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.answers.ndim != 2 or self.answers.shape[0] != self.labels.shape[0]:
            raise DataError("answers must be (N, M) aligned with labels")
        if not np.isin(self.answers, (-1, 1)).all():
            raise DataError("answers must be +1/-1")
        if self.n_classes < 2 or (self.labels.size and
                                  (self.labels.min() < 0 or self.labels.max() >= self.n_classes)):
            raise DataError("labels out of range")
        if self.masks is not None:
            self.masks = np.asarray(self.masks, dtype=np.int8)
            if self.masks.shape != self.answers.shape:
                raise DataError("masks must match answers shape")
            if not np.isin(self.masks, (0, 1)).all():
                raise DataError("masks must be 0/1")
        if self.ids is not None and len(self.ids) != self.answers.shape[0]:
            raise DataError("ids must align with answers")

    @property
    def n(self) -> int:
        return self.answers.shape[0]

    @property
    def n_queries(self) -> int:
        return self.answers.shape[1]


@dataclass
class PursuitModel:
    querier: list[nets.DenseLayer]     # 2M -> ... -> M
    classifier: list[nets.DenseLayer]  # M -> ... -> K
    n_queries: int
    n_classes: int
    config: PursuitTrainConfig
    variant: str = "vip"
    train_meta: dict = field(default_factory=dict)


def class_posterior(model: PursuitModel, h: np.ndarray) -> np.ndarray:
    """Softmax posterior over classes for one history row or a batch."""
    out = nets.softmax_rows(nets.mlp_apply(model.classifier, h))
    return out[0] if np.asarray(h).ndim == 1 else out


def querier_logits(model: PursuitModel, h: np.ndarray, availability: np.ndarray) -> np.ndarray:
    x = np.concatenate([np.asarray(h, dtype=np.float64),
                        np.asarray(availability, dtype=np.float64)], axis=-1)
    out = nets.mlp_apply(model.querier, x)
    return out[0] if np.asarray(h).ndim == 1 else out


def _random_histories(rng: np.random.Generator, avail: np.ndarray) -> np.ndarray:
    """Per row: draw t ~ Uniform{0..n_available} and mark a uniformly random
    size-t subset of the available queries as asked."""
    b, m = avail.shape
    n_avail = avail.sum(axis=1)
    t = np.floor(rng.random(b) * (n_avail + 1)).astype(np.int64)
    keys = rng.random((b, m))
    keys[~avail] = 2.0  # sort unavailable entries last
    order = np.argsort(keys, axis=1, kind="stable")
    ranks = np.empty_like(order)
    rows = np.arange(b)[:, None]
    ranks[rows, order] = np.arange(m)[None, :]
    return (ranks < t[:, None]) & avail


def _policy_histories(model_layers: list[nets.DenseLayer], answers_f: np.ndarray,
                      avail: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Roll the current selector forward to a random depth per row."""
    b, m = avail.shape
    n_avail = avail.sum(axis=1)
    t = np.floor(rng.random(b) * (n_avail + 1)).astype(np.int64)
    asked = np.zeros((b, m), dtype=bool)
    h = np.zeros((b, m))
    for step in range(int(t.max()) if b else 0):
        active = (t > step) & ((avail & ~asked).any(axis=1))
        if not active.any():
            break
        a = (avail[active] & ~asked[active]).astype(np.float64)
        logits = nets.mlp_apply(model_layers, np.concatenate([h[active], a], axis=1))
        logits = logits + ad.MASK_LOGIT * (a == 0.0)
        pick = logits.argmax(axis=1)
        rows = np.nonzero(active)[0]
        asked[rows, pick] = True
        h[rows, pick] = answers_f[rows, pick]
    return asked


def _train_step(querier, classifier, answers_f, onehot_rows, avail, asked,
                tau, st_mode, rng):
    h = answers_f * asked
    a = (avail & ~asked).astype(np.float64)
    x_q = ad.tensor(np.concatenate([h, a], axis=1))
    q_logits = nets.mlp_forward(querier, x_q)
    z = ad.st_softmax(q_logits, tau=tau, mode=st_mode, rng=rng,
                      available=a.astype(bool), allow_empty=True)
    h_new = ad.add(ad.tensor(h), ad.mul(z, ad.tensor(answers_f)))
    clf_logits = nets.mlp_forward(classifier, h_new)
    return ad.softmax_cross_entropy(clf_logits, onehot_rows)


def train_pursuit(train: PursuitData, val: PursuitData | None = None,
                  config: PursuitTrainConfig | None = None,
                  variant: str = "vip") -> PursuitModel:
    """Jointly train the querier and classifier.

    Masks of all zeros (or absent) reproduce plain information pursuit
    exactly. Identical seed and config give identical parameters and loss
    curves.
    """
    config = config or PursuitTrainConfig()
    m = train.n_queries
    k = train.n_classes
    if val is not None and (val.n_queries != m or val.n_classes != k):
        raise DataError("validation data shape mismatch")

    init_rng = stream(config.seed, "pursuit-init")
    querier = nets.mlp_init([2 * m, *config.hidden, m], init_rng)
    classifier = nets.mlp_init([m, *config.hidden, k], init_rng)
    params = nets.mlp_params(querier) + nets.mlp_params(classifier)
    opt = nets.adam_init(params, lr=config.lr)
    schedule = nets.TemperatureSchedule(config.tau_start, config.tau_end)

    answers_f = train.answers.astype(np.float64)
    masks = train.masks if train.masks is not None else np.zeros_like(train.answers)
    avail_all = masks == 0
    onehot_all = nets.onehot(train.labels, k)
    batch = config.resolve_batch(train.n)
    rng = stream(config.seed, "pursuit-train")

    val_frozen = None
    if val is not None:
        val_rng = stream(config.seed, "pursuit-val")
        v_n = min(val.n, config.val_batch)
        v_idx = val_rng.choice(val.n, size=v_n, replace=False)
        v_answers = val.answers[v_idx].astype(np.float64)
        v_masks = val.masks[v_idx] if val.masks is not None else np.zeros((v_n, m), dtype=np.int8)
        v_avail = v_masks == 0
        v_asked = _random_histories(val_rng, v_avail)
        val_frozen = (v_answers, nets.onehot(val.labels[v_idx], k), v_avail, v_asked)

    train_curve: list[float] = []
    val_curve: list[float] = []
    total_epochs = config.epochs + config.sequential_finetune_epochs
    for epoch in range(total_epochs):
        tau = schedule.value_at(min(epoch, config.epochs - 1), config.epochs)
        order = rng.permutation(train.n)
        losses = []
        fine_tune = epoch >= config.epochs
        for start in range(0, train.n, batch):
            idx = order[start:start + batch]
            avail = avail_all[idx]
            if fine_tune:
                asked = _policy_histories(querier, answers_f[idx], avail, rng)
            else:
                asked = _random_histories(rng, avail)
            try:
                loss = _train_step(querier, classifier, answers_f[idx],
                                   onehot_all[idx], avail, asked,
                                   tau, config.st_mode, rng)
                ad.backward(loss)
            except NumericsError as err:
                raise NumericsError(
                    f"training diverged at epoch {epoch}, step {start // batch}: {err}"
                ) from err
            nets.adam_step(params, [p.grad for p in params], opt)
            ad.zero_grad(params)
            losses.append(loss.value[0, 0])
        train_curve.append(float(np.mean(losses)))
        if val_frozen is not None:
            v_answers, v_onehot, v_avail, v_asked = val_frozen
            v_loss = _train_step(querier, classifier, v_answers, v_onehot,
                                 v_avail, v_asked, tau, "argmax", None)
            ad.zero_grad(params)
            val_curve.append(float(v_loss.value[0, 0]))

    return PursuitModel(
        querier=querier, classifier=classifier, n_queries=m, n_classes=k,
        config=config, variant=variant,
        train_meta={
            "train_curve": train_curve,
            "val_curve": val_curve,
            "final_train_loss": train_curve[-1],
            "final_val_loss": val_curve[-1] if val_curve else None,
        },
    )


# ---------------------------------------------------------------------------
# Inference engine. The interactive session service drives exactly these
# functions, so an offline replay of a recorded session reproduces it
# step for step.

@dataclass
class InferenceState:
    h: np.ndarray            # (M,) float64
    mask: np.ndarray         # (M,) int8, grows when a provider answers UNSURE
    order: list[int] = field(default_factory=list)
    answers_given: list[int] = field(default_factory=list)

    @property
    def asked(self) -> np.ndarray:
        return self.h != 0.0

    def available(self) -> np.ndarray:
        return (~self.asked) & (self.mask == 0)


def start_inference(model: PursuitModel, mask: np.ndarray | None = None) -> InferenceState:
    m = model.n_queries
    if mask is None:
        mask_arr = np.zeros(m, dtype=np.int8)
    else:
        mask_arr = np.asarray(mask, dtype=np.int8).copy()
        if mask_arr.shape != (m,):
            raise ConfigError(f"mask shape {mask_arr.shape} != ({m},)")
        if not np.isin(mask_arr, (0, 1)).all():
            raise ConfigError("mask must be 0/1")
    return InferenceState(h=np.zeros(m), mask=mask_arr)


def propose_query(model: PursuitModel, state: InferenceState) -> int | None:
    """Deterministic argmax of the querier over available queries; ties go
    to the lowest index. None when nothing is available."""
    avail = state.available()
    if not avail.any():
        return None
    logits = querier_logits(model, state.h, avail.astype(np.float64))
    logits = logits + ad.MASK_LOGIT * (~avail)
    return int(np.argmax(logits))


def apply_answer(model: PursuitModel, state: InferenceState, query: int, answer: int) -> np.ndarray:
    if answer not in (-1, 1):
        raise ConfigError(f"answer must be +1/-1, got {answer}")
    if not 0 <= query < model.n_queries:
        raise ConfigError(f"query index {query} out of range")
    if state.h[query] != 0.0 or state.mask[query] != 0:
        raise ConfigError(f"query {query} is not available")
    state.h[query] = float(answer)
    state.order.append(query)
    state.answers_given.append(answer)
    return class_posterior(model, state.h)


def mark_unsure(state: InferenceState, query: int) -> None:
    """A query answered 'unsure' is masked permanently and never re-asked."""
    state.mask[query] = 1


def reached_confidence(posterior: np.ndarray, stop_threshold: float) -> bool:
    """True when the posterior clears the stopping threshold. A threshold of
    exactly 1.0 means run to exhaustion: float saturation can make the max
    posterior equal 1.0, which must not end the run early."""
    if stop_threshold >= 1.0:
        return False
    return float(np.max(posterior)) >= stop_threshold


def _check_stop_threshold(stop_threshold: float, n_classes: int) -> None:
    if not (1.0 / n_classes) < stop_threshold <= 1.0:
        raise ConfigError(
            f"stop threshold must lie in (1/{n_classes}, 1], got {stop_threshold}"
        )


@dataclass
class TraceStep:
    query: int
    answer: int
    posterior: np.ndarray


@dataclass
class ExplanationTrace:
    """The query-answer sequence that led to a prediction."""

    sample_id: str
    steps: list[TraceStep]
    masked: list[int]
    termination: str  # "confidence" | "exhausted"
    predicted: int
    confidence: float

    @property
    def n_queries_asked(self) -> int:
        return len(self.steps)

    def to_dict(self) -> dict:
        return {
            "id": self.sample_id,
            "steps": [{"query": s.query, "answer": s.answer,
                       "posterior": [float(p) for p in s.posterior]}
                      for s in self.steps],
            "masked": list(self.masked),
            "termination": self.termination,
            "predicted": self.predicted,
            "confidence": self.confidence,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExplanationTrace":
        return cls(
            sample_id=d["id"],
            steps=[TraceStep(int(s["query"]), int(s["answer"]),
                             np.asarray(s["posterior"], dtype=np.float64))
                   for s in d["steps"]],
            masked=[int(x) for x in d["masked"]],
            termination=d["termination"],
            predicted=int(d["predicted"]),
            confidence=float(d["confidence"]),
        )


def infer(model: PursuitModel, answers: np.ndarray | AnswerProvider,
          mask: np.ndarray | None = None, *, stop_threshold: float = 0.85,
          budget: int | None = None, sample_id: str = "") -> ExplanationTrace:
    """Run the sequential pursuit for one sample.

    ``answers`` is either a full +1/-1 vector or a provider called with a
    query index that may also return :data:`UNSURE`, in which case the query
    is masked (uncounted) and selection continues. Stops when the posterior
    clears ``stop_threshold``, when ``budget`` answers have been collected,
    or when no query remains available.
    """
    _check_stop_threshold(stop_threshold, model.n_classes)
    m = model.n_queries
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

    state = start_inference(model, mask)
    posterior = class_posterior(model, state.h)
    steps: list[TraceStep] = []
    termination = "exhausted"
    while True:
        if reached_confidence(posterior, stop_threshold):
            termination = "confidence"
            break
        if len(steps) >= budget:
            break
        query = propose_query(model, state)
        if query is None:
            break
        answer = provider(query)
        if answer == UNSURE:
            mark_unsure(state, query)
            continue
        posterior = apply_answer(model, state, query, answer)
        steps.append(TraceStep(query=query, answer=answer, posterior=posterior))
    return ExplanationTrace(
        sample_id=sample_id,
        steps=steps,
        masked=[int(i) for i in np.nonzero(state.mask)[0]],
        termination=termination,
        predicted=int(np.argmax(posterior)),
        confidence=float(np.max(posterior)),
    )


@dataclass
class ExplainSummary:
    n: int
    mean_queries: float
    std_queries: float
    accuracy: float


def batch_explain(model: PursuitModel, data: PursuitData, *,
                  stop_threshold: float = 0.85,
                  budget: int | None = None) -> tuple[list[ExplanationTrace], ExplainSummary]:
    traces = []
    for i in range(data.n):
        sid = data.ids[i] if data.ids is not None else str(i)
        trace = infer(model, data.answers[i],
                      None if data.masks is None else data.masks[i],
                      stop_threshold=stop_threshold, budget=budget, sample_id=sid)
        traces.append(trace)
    counts = np.asarray([t.n_queries_asked for t in traces], dtype=np.float64)
    correct = np.asarray([t.predicted == data.labels[i] for i, t in enumerate(traces)])
    return traces, ExplainSummary(
        n=data.n,
        mean_queries=float(counts.mean()),
        std_queries=float(counts.std()),
        accuracy=float(correct.mean()),
    )


# ---------------------------------------------------------------------------
# Baseline: classify from all answers at once (no selection).

@dataclass
class FullConceptModel:
    classifier: list[nets.DenseLayer]
    n_queries: int
    n_classes: int
    config: PursuitTrainConfig
    train_meta: dict = field(default_factory=dict)


def train_full_concept_baseline(train: PursuitData, val: PursuitData | None = None,
                                config: PursuitTrainConfig | None = None) -> FullConceptModel:
    """Train the classifier on complete answer vectors. Its query cost is by
    definition the full query count."""
    config = config or PursuitTrainConfig()
    m, k = train.n_queries, train.n_classes
    init_rng = stream(config.seed, "baseline-init")
    classifier = nets.mlp_init([m, *config.hidden, k], init_rng)
    params = nets.mlp_params(classifier)
    opt = nets.adam_init(params, lr=config.lr)
    answers_f = train.answers.astype(np.float64)
    onehot_all = nets.onehot(train.labels, k)
    batch = config.resolve_batch(train.n)
    rng = stream(config.seed, "baseline-train")
    curve = []
    val_curve = []
    for _epoch in range(config.epochs):
        order = rng.permutation(train.n)
        losses = []
        for startpos in range(0, train.n, batch):
            idx = order[startpos:startpos + batch]
            logits = nets.mlp_forward(classifier, ad.tensor(answers_f[idx]))
            loss = ad.softmax_cross_entropy(logits, onehot_all[idx])
            ad.backward(loss)
            nets.adam_step(params, [p.grad for p in params], opt)
            ad.zero_grad(params)
            losses.append(loss.value[0, 0])
        curve.append(float(np.mean(losses)))
        if val is not None:
            logits = nets.mlp_apply(classifier, val.answers.astype(np.float64))
            post = nets.softmax_rows(logits)
            picked = np.clip(post[np.arange(val.n), val.labels], 1e-300, None)
            val_curve.append(float(-np.log(picked).mean()))
    return FullConceptModel(
        classifier=classifier, n_queries=m, n_classes=k, config=config,
        train_meta={"train_curve": curve, "val_curve": val_curve,
                    "final_train_loss": curve[-1] if curve else None,
                    "final_val_loss": val_curve[-1] if val_curve else None},
    )


def full_concept_posterior(model: FullConceptModel, answers: np.ndarray) -> np.ndarray:
    arr = np.asarray(answers, dtype=np.float64)
    out = nets.softmax_rows(nets.mlp_apply(model.classifier, arr))
    return out[0] if arr.ndim == 1 else out
