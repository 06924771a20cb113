"""
A small reverse-mode differentiation engine over float64 numpy arrays.

Every Tensor gets a node id from a global counter when it is created. Since
an op can only consume tensors that already exist, parents always have smaller
ids than their children, and processing nodes by decreasing id is a valid
reverse topological order.
"""
import contextlib
import contextvars
import itertools
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from src.errors import GraphCycle, ShapeMismatch

_node_ids = itertools.count(1)
_kink_tape: contextvars.ContextVar[Optional[List[np.ndarray]]] = contextvars.ContextVar("kink_tape", default=None)

BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tensor:
    """
    An array value plus the information needed to push gradients to its parents.
    """

    __slots__ = ("value", "grad", "parents", "backward_fn", "id", "requires_grad", "name")

    def __init__(self, value, parents: Sequence["Tensor"] = (), backward_fn: Optional[BackwardFn] = None,
                 requires_grad: bool = False, name: Optional[str] = None):
        self.value = np.array(value, dtype=np.float64)
        if not np.all(np.isfinite(self.value)):
            raise FloatingPointError(f"Non-finite values in tensor {name or ''}".strip())
        self.grad: Optional[np.ndarray] = None
        self.parents = tuple(parents)
        self.backward_fn = backward_fn
        self.id = next(_node_ids)
        self.requires_grad = requires_grad or any(p.requires_grad for p in self.parents)
        self.name = name

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.value.shape

    def item(self) -> float:
        return float(self.value.reshape(-1)[0]) if self.value.size == 1 else float("nan")

    def __repr__(self) -> str:
        label = f" {self.name}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, id={self.id})"


def parameter(value, name: Optional[str] = None) -> Tensor:
    return Tensor(value, requires_grad=True, name=name)


def constant(value) -> Tensor:
    return Tensor(value)


@contextlib.contextmanager
def record_kinks() -> Iterator[List[np.ndarray]]:
    """
    Records the branch pattern of every piecewise op (ReLU signs, smooth-L1
    regions) evaluated inside the block, in evaluation order.
    """
    tape: List[np.ndarray] = []
    token = _kink_tape.set(tape)
    try:
        yield tape
    finally:
        _kink_tape.reset(token)


def _record(pattern: np.ndarray) -> None:
    tape = _kink_tape.get()
    if tape is not None:
        tape.append(pattern.copy())


def _check_shapes(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeMismatch(f"{op}: shapes {a.shape} and {b.shape} differ")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_shapes(a, b, "add")
    return Tensor(a.value + b.value, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_shapes(a, b, "sub")
    return Tensor(a.value - b.value, (a, b), lambda g: (g, -g))


def scale(a: Tensor, c: float) -> Tensor:
    return Tensor(a.value * c, (a,), lambda g: (g * c,))


def add_all(terms: Sequence[Tensor]) -> Tensor:
    """Left-to-right sum, so the value equals the plain float sum in the same order."""
    total = terms[0]
    for t in terms[1:]:
        total = add(total, t)
    return total


def relu(x: Tensor) -> Tensor:
    active = x.value > 0
    _record(active)
    return Tensor(np.where(active, x.value, 0.0), (x,), lambda g: (g * active,))


def sigmoid_values(x: np.ndarray) -> np.ndarray:
    # tanh form does not overflow for large |x|
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(x: Tensor) -> Tensor:
    s = sigmoid_values(x.value)
    return Tensor(s, (x,), lambda g: (g * s * (1.0 - s),))


def stop_gradient(x: Tensor) -> Tensor:
    """Same value, no parents: nothing flows back through this edge."""
    return Tensor(x.value, name="stop_gradient")


def _im2col(x: np.ndarray, k: int) -> np.ndarray:
    c, h, w = x.shape
    p = k // 2
    xp = np.pad(x, ((0, 0), (p, p), (p, p)))
    cols = np.stack([xp[:, i:i + h, j:j + w] for i in range(k) for j in range(k)], axis=1)
    return cols.reshape(c * k * k, h * w)


def _col2im(cols: np.ndarray, c: int, h: int, w: int, k: int) -> np.ndarray:
    p = k // 2
    cols = cols.reshape(c, k * k, h, w)
    xp = np.zeros((c, h + 2 * p, w + 2 * p))
    for idx, (i, j) in enumerate((i, j) for i in range(k) for j in range(k)):
        xp[:, i:i + h, j:j + w] += cols[:, idx]
    return xp[:, p:p + h, p:p + w]


def conv2d(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """
    Same-size convolution (odd kernel, zero padding k // 2, stride 1).

    Args:
        x: C_in x H x W input.
        weight: C_out x C_in x k x k kernels.
        bias: C_out biases.
    """
    if x.value.ndim != 3 or weight.value.ndim != 4 or weight.shape[1] != x.shape[0]:
        raise ShapeMismatch(f"conv2d: input {x.shape} does not fit kernels {weight.shape}")
    if bias.shape != (weight.shape[0],):
        raise ShapeMismatch(f"conv2d: bias {bias.shape} does not fit kernels {weight.shape}")
    c_in, h, w = x.shape
    c_out, k = weight.shape[0], weight.shape[-1]
    cols = _im2col(x.value, k)
    w2 = weight.value.reshape(c_out, -1)
    out = (w2 @ cols + bias.value[:, None]).reshape(c_out, h, w)

    def backward(g: np.ndarray):
        g2 = g.reshape(c_out, h * w)
        dx = _col2im(w2.T @ g2, c_in, h, w, k)
        dw = (g2 @ cols.T).reshape(weight.shape)
        return dx, dw, g2.sum(axis=1)

    return Tensor(out, (x, weight, bias), backward)


def mean_pool(x: Tensor) -> Tensor:
    """C x H x W -> C, averaging each channel."""
    c = x.shape[0]
    n = x.value[0].size
    return Tensor(x.value.reshape(c, -1).mean(axis=1), (x,), lambda g: (np.broadcast_to((g / n)[:, None, None], x.shape).copy(),))


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    if weight.value.ndim != 2 or weight.shape[1] != x.shape[0] or bias.shape != (weight.shape[0],):
        raise ShapeMismatch(f"linear: input {x.shape}, weight {weight.shape}, bias {bias.shape}")
    return Tensor(weight.value @ x.value + bias.value, (x, weight, bias),
                  lambda g: (weight.value.T @ g, np.outer(g, x.value), g))


def select_channel(x: Tensor, index: int) -> Tensor:
    if not 0 <= index < x.shape[0]:
        raise ShapeMismatch(f"channel {index} out of range for shape {x.shape}")

    def backward(g: np.ndarray):
        full = np.zeros(x.shape)
        full[index] = g
        return (full,)

    return Tensor(x.value[index], (x,), backward)


def take(x: Tensor, indices: Sequence[int]) -> Tensor:
    idx = np.asarray(indices, dtype=np.int64)

    def backward(g: np.ndarray):
        full = np.zeros(x.shape)
        np.add.at(full, idx, g)
        return (full,)

    return Tensor(x.value[idx], (x,), backward)


def bce_with_logits(logits: Tensor, target: np.ndarray) -> Tensor:
    """
    Mean binary cross-entropy of sigmoid(logits) against a 0/1 target, in the
    log-sum-exp form max(x, 0) - x*y + log(1 + exp(-|x|)).
    """
    y = np.asarray(target, dtype=np.float64)
    if y.shape != logits.shape:
        raise ShapeMismatch(f"bce_with_logits: target {y.shape} vs logits {logits.shape}")
    x = logits.value
    n = x.size
    loss = np.mean(np.maximum(x, 0.0) - x * y + np.log1p(np.exp(-np.abs(x))))
    return Tensor(loss, (logits,), lambda g: (g * (sigmoid_values(x) - y) / n,))


def bce_on_probability(prob: Tensor, target: np.ndarray, clip: float = 1e-12) -> Tensor:
    """
    Mean binary cross-entropy applied directly to probabilities. Values are
    clipped into [clip, 1 - clip]; clipped pixels pass no gradient.
    """
    y = np.asarray(target, dtype=np.float64)
    if y.shape != prob.shape:
        raise ShapeMismatch(f"bce_on_probability: target {y.shape} vs input {prob.shape}")
    raw = prob.value
    p = np.clip(raw, clip, 1.0 - clip)
    inside = (raw == p).astype(np.float64)
    n = p.size
    loss = -np.mean(y * np.log(p) + (1.0 - y) * np.log(1.0 - p))
    return Tensor(loss, (prob,), lambda g: (g * inside * (-(y / p) + (1.0 - y) / (1.0 - p)) / n,))


def softmax_cross_entropy(logits: Tensor, label: int) -> Tensor:
    z = logits.value - logits.value.max()
    log_probs = z - np.log(np.exp(z).sum())
    probs = np.exp(log_probs)
    onehot = np.zeros_like(probs)
    onehot[label] = 1.0
    return Tensor(-log_probs[label], (logits,), lambda g: (g * (probs - onehot),))


def smooth_l1(pred: Tensor, target: np.ndarray, beta: float = 1.0) -> Tensor:
    """Sum over coordinates of the Huber-style smooth L1 loss."""
    t = np.asarray(target, dtype=np.float64)
    if t.shape != pred.shape:
        raise ShapeMismatch(f"smooth_l1: target {t.shape} vs prediction {pred.shape}")
    d = pred.value - t
    quadratic = np.abs(d) < beta
    _record(quadratic)
    loss = np.sum(np.where(quadratic, 0.5 * d * d / beta, np.abs(d) - 0.5 * beta))
    return Tensor(loss, (pred,), lambda g: (g * np.where(quadratic, d / beta, np.sign(d)),))


def backward(loss: Tensor) -> Dict[int, np.ndarray]:
    """
    Reverse-mode pass from a scalar. Returns gradients keyed by node id for every
    node that requires grad and is reachable from `loss`; their `.grad` is
    overwritten with the same arrays.

    Raises:
        ShapeMismatch: If `loss` is not a scalar.
        GraphCycle: If a parent does not precede its child.
    """
    if loss.value.size != 1:
        raise ShapeMismatch(f"backward needs a scalar, got shape {loss.shape}")
    nodes: Dict[int, Tensor] = {}
    stack = [loss]
    while stack:
        node = stack.pop()
        if node.id in nodes:
            continue
        nodes[node.id] = node
        for parent in node.parents:
            if parent.id >= node.id:
                raise GraphCycle(f"node {parent.id} feeds node {node.id} but was created after it")
            if parent.requires_grad:
                stack.append(parent)

    grads: Dict[int, np.ndarray] = {loss.id: np.ones_like(loss.value)}
    for node_id in sorted(nodes, reverse=True):
        node = nodes[node_id]
        g = grads.get(node_id)
        if g is None:
            continue
        node.grad = g
        if node.backward_fn is None:
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            if parent.id in grads:
                grads[parent.id] = grads[parent.id] + pg
            else:
                grads[parent.id] = np.array(pg, dtype=np.float64).reshape(parent.shape)
    return {nid: g for nid, g in grads.items() if nodes[nid].requires_grad or nid == loss.id}


def grads_for(grads: Dict[int, np.ndarray], tensors: Dict[str, Tensor]) -> Dict[str, np.ndarray]:
    """Named gradients; tensors the loss does not depend on get zeros."""
    return {name: grads.get(t.id, np.zeros(t.shape)) for name, t in tensors.items()}
