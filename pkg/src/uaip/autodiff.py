"""Reverse-mode automatic differentiation over small dense computation graphs.

Every value is a 2-D float64 array wrapped in a :class:`Tensor2` node.
Operations compute their forward value eagerly and record a closure that
routes upstream gradients to their parents; :func:`backward` replays those
closures in reverse topological order. Graphs are built per training step
and discarded; parameter leaves persist across steps and accumulate
gradients until :func:`zero_grad`.

Masking convention: an excluded softmax entry carries :data:`MASK_LOGIT`
(-1e30) added to its logit. The stored value stays finite, preserving the
all-finite node invariant, while underflowing to exactly zero probability
inside the softmax.
"""

from __future__ import annotations

import itertools
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import GraphError, NumericsError

MASK_LOGIT = -1.0e30
# Entries at or below this are treated as unavailable when availability is
# inferred from logit values (MASK_LOGIT plus any realistic logit stays far
# below; real logits stay far above).
MASK_DETECT = -1.0e29

_node_ids = itertools.count()


class Tensor2:
    """A (rows, cols) float64 value node with gradient storage.

    ``parents`` and ``_backprop`` tie the node into the graph that produced
    it; leaves have neither. ``aux`` carries op-specific forward byproducts
    (e.g. the relaxed softmax used by the straight-through estimator).
    """

    __slots__ = ("value", "grad", "parents", "op", "node_id", "_backprop", "aux")

    def __init__(
        self,
        value: np.ndarray,
        parents: tuple["Tensor2", ...] = (),
        op: str = "leaf",
        backprop: Callable[[np.ndarray], None] | None = None,
    ):
        value = np.asarray(value, dtype=np.float64)
        if value.ndim == 1:
            value = value.reshape(1, -1)
        if value.ndim != 2:
            raise GraphError(f"Tensor2 requires a 2-D value, got shape {value.shape}")
        self.node_id = next(_node_ids)
        if not np.isfinite(value).all():
            raise NumericsError(
                f"non-finite forward value in op '{op}' (node {self.node_id})"
            )
        self.value = value
        self.grad = np.zeros_like(value)
        self.parents = parents
        self.op = op
        self._backprop = backprop
        self.aux: dict | None = None

    @property
    def rows(self) -> int:
        return self.value.shape[0]

    @property
    def cols(self) -> int:
        return self.value.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    def __repr__(self) -> str:
        return f"Tensor2(op={self.op!r}, shape={self.shape}, id={self.node_id})"


def tensor(value) -> Tensor2:
    """Wrap an array-like as a leaf node (copies the data)."""
    return Tensor2(np.array(value, dtype=np.float64))


def _require_shape(a: Tensor2, b: Tensor2, op: str) -> None:
    if a.shape != b.shape:
        raise GraphError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def matmul(a: Tensor2, b: Tensor2) -> Tensor2:
    if a.cols != b.rows:
        raise GraphError(f"matmul: inner dims differ, {a.shape} @ {b.shape}")
    out = Tensor2(a.value @ b.value, (a, b), "matmul")

    def backprop(g: np.ndarray) -> None:
        a.grad += g @ b.value.T
        b.grad += a.value.T @ g

    out._backprop = backprop
    return out


def add(a: Tensor2, b: Tensor2) -> Tensor2:
    _require_shape(a, b, "add")
    out = Tensor2(a.value + b.value, (a, b), "add")

    def backprop(g: np.ndarray) -> None:
        a.grad += g
        b.grad += g

    out._backprop = backprop
    return out


def add_bias(x: Tensor2, bias: Tensor2) -> Tensor2:
    """Broadcast a (1, C) bias row over every row of x."""
    if bias.rows != 1 or bias.cols != x.cols:
        raise GraphError(f"add_bias: bias {bias.shape} does not broadcast over {x.shape}")
    out = Tensor2(x.value + bias.value, (x, bias), "add_bias")

    def backprop(g: np.ndarray) -> None:
        x.grad += g
        bias.grad += g.sum(axis=0, keepdims=True)

    out._backprop = backprop
    return out


def mul(a: Tensor2, b: Tensor2) -> Tensor2:
    _require_shape(a, b, "mul")
    out = Tensor2(a.value * b.value, (a, b), "mul")

    def backprop(g: np.ndarray) -> None:
        a.grad += g * b.value
        b.grad += g * a.value

    out._backprop = backprop
    return out


def scale(a: Tensor2, c: float) -> Tensor2:
    c = float(c)
    out = Tensor2(a.value * c, (a,), "scale")

    def backprop(g: np.ndarray) -> None:
        a.grad += g * c

    out._backprop = backprop
    return out


def relu(a: Tensor2) -> Tensor2:
    out = Tensor2(np.maximum(a.value, 0.0), (a,), "relu")
    active = a.value > 0.0

    def backprop(g: np.ndarray) -> None:
        a.grad += g * active

    out._backprop = backprop
    return out


def dropout(x: Tensor2, keep_mask: np.ndarray, rate: float) -> Tensor2:
    """Inverted dropout with a caller-supplied keep mask.

    The mask is explicit (not drawn here) so that callers control the RNG
    stream and so finite-difference checks can hold the mask fixed.
    """
    if not 0.0 <= rate < 1.0:
        raise GraphError(f"dropout rate must be in [0, 1), got {rate}")
    keep = np.asarray(keep_mask, dtype=np.float64)
    if keep.shape != x.shape:
        raise GraphError(f"dropout: mask shape {keep.shape} != value shape {x.shape}")
    factor = keep / (1.0 - rate)
    out = Tensor2(x.value * factor, (x,), "dropout")

    def backprop(g: np.ndarray) -> None:
        x.grad += g * factor

    out._backprop = backprop
    return out


def softmax_cross_entropy(logits: Tensor2, targets: np.ndarray) -> Tensor2:
    """Mean cross-entropy of row-softmax(logits) against one-hot targets.

    Returns a 1x1 node. For a single uniform row the logit gradient is
    exactly softmax - onehot.
    """
    t = np.asarray(targets, dtype=np.float64)
    if t.shape != logits.shape:
        raise GraphError(
            f"softmax_cross_entropy: targets {t.shape} != logits {logits.shape}"
        )
    z = logits.value - logits.value.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    n_rows = logits.rows
    loss = -(t * logp).sum() / n_rows
    out = Tensor2(np.array([[loss]]), (logits,), "softmax_cross_entropy")
    soft = np.exp(logp)

    def backprop(g: np.ndarray) -> None:
        logits.grad += g[0, 0] * (soft - t) / n_rows

    out._backprop = backprop
    return out


def sigmoid_bce(logits: Tensor2, targets: np.ndarray) -> Tensor2:
    """Mean binary cross-entropy with logits over every entry (1x1 node).

    Uses the max(x,0) - x*t + log1p(exp(-|x|)) form, stable for any logit.
    """
    t = np.asarray(targets, dtype=np.float64)
    if t.shape != logits.shape:
        raise GraphError(f"sigmoid_bce: targets {t.shape} != logits {logits.shape}")
    x = logits.value
    elem = np.maximum(x, 0.0) - x * t + np.log1p(np.exp(-np.abs(x)))
    count = x.size
    out = Tensor2(np.array([[elem.sum() / count]]), (logits,), "sigmoid_bce")
    sig = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.clip(x, -745, 745))),
                   np.exp(np.clip(x, -745, 745)) / (1.0 + np.exp(np.clip(x, -745, 745))))

    def backprop(g: np.ndarray) -> None:
        logits.grad += g[0, 0] * (sig - t) / count

    out._backprop = backprop
    return out


def _relaxed_softmax(masked: np.ndarray, tau: float, empty: np.ndarray) -> np.ndarray:
    z = (masked - masked.max(axis=1, keepdims=True)) / tau
    soft = np.exp(z)
    soft /= soft.sum(axis=1, keepdims=True)
    # Rows with nothing available would otherwise renormalize to uniform.
    soft[empty] = 0.0
    return soft


def st_softmax(
    logits: Tensor2,
    tau: float,
    mode: str = "argmax",
    rng: np.random.Generator | None = None,
    available: np.ndarray | None = None,
    allow_empty: bool = False,
) -> Tensor2:
    """Straight-through softmax selection over rows.

    Forward emits exactly one-hot rows: the argmax of the temperature-tau
    softmax, or a categorical sample from it. Backward applies the relaxed
    softmax Jacobian (scaled by 1/tau), so gradients flow as if the soft
    distribution had been used.

    ``available`` marks selectable entries; when omitted it is inferred as
    ``logits > MASK_DETECT`` so callers may pre-mask with MASK_LOGIT.
    Unavailable entries get MASK_LOGIT added and are never selected. A row
    with no available entry raises unless ``allow_empty`` is set, in which
    case it yields an all-zero row (and receives zero gradient).
    """
    if tau <= 0.0:
        raise GraphError(f"st_softmax: tau must be positive, got {tau}")
    if mode not in ("argmax", "sample"):
        raise GraphError(f"st_softmax: unknown mode {mode!r}")
    if mode == "sample" and rng is None:
        raise GraphError("st_softmax: sample mode requires an explicit rng stream")

    if available is None:
        avail = logits.value > MASK_DETECT
    else:
        avail = np.asarray(available, dtype=bool)
        if avail.shape != logits.shape:
            raise GraphError(
                f"st_softmax: availability {avail.shape} != logits {logits.shape}"
            )
    empty = ~avail.any(axis=1)
    if empty.any() and not allow_empty:
        raise GraphError("st_softmax: no available query (all entries masked)")

    masked = logits.value + MASK_LOGIT * (~avail)
    soft = _relaxed_softmax(masked, tau, empty)

    n_rows, n_cols = logits.shape
    picked = np.full(n_rows, -1, dtype=np.int64)
    live = ~empty
    if live.any():
        if mode == "argmax":
            picked[live] = soft[live].argmax(axis=1)
        else:
            cum = soft[live].cumsum(axis=1)
            u = rng.random(int(live.sum()))
            idx = (cum < u[:, None]).sum(axis=1)
            # Clamp against float shortfall at either plateau of the CDF.
            first = avail[live].argmax(axis=1)
            last = n_cols - 1 - avail[live][:, ::-1].argmax(axis=1)
            picked[live] = np.clip(idx, first, last)

    hard = np.zeros((n_rows, n_cols))
    rows_live = np.nonzero(live)[0]
    hard[rows_live, picked[rows_live]] = 1.0

    out = Tensor2(hard, (logits,), "st_softmax")
    out.aux = {"soft": soft, "picked": picked, "tau": tau}

    def backprop(g: np.ndarray) -> None:
        inner = (soft * g).sum(axis=1, keepdims=True)
        logits.grad += (soft * g - soft * inner) / tau

    out._backprop = backprop
    return out


def _topo_order(root: Tensor2) -> list[Tensor2]:
    order: list[Tensor2] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor2, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node.parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order  # parents precede children


def backward(loss: Tensor2) -> None:
    """Accumulate d(loss)/d(node) into ``grad`` for every node reachable
    from ``loss``. Leaves that do not feed the loss keep zero gradient.
    """
    if loss.shape != (1, 1):
        raise GraphError(f"backward: loss must be a 1x1 scalar node, got {loss.shape}")
    order = _topo_order(loss)
    loss.grad = np.ones((1, 1))
    for node in reversed(order):
        if not np.isfinite(node.grad).all():
            raise NumericsError(
                f"non-finite gradient at node {node.node_id} (op '{node.op}')"
            )
        if node._backprop is not None:
            node._backprop(node.grad)


def zero_grad(tensors: Iterable[Tensor2]) -> None:
    for t in tensors:
        t.grad = np.zeros_like(t.value)
