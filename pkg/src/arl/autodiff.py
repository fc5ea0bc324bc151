"""Reverse-mode automatic differentiation over dense 2-D float64 tensors.

A small define-by-run engine: each operation allocates a new graph node with
a recorded backward rule, the graph is rebuilt for every batch, and
``backward`` walks it once in reverse topological order, accumulating
gradients additively. Everything is single-threaded and 64-bit.

The one non-standard node is :class:`GradScaleNode`: an identity in the
forward pass whose backward pass multiplies the incoming gradient by a
mutable ``scale``. Placing it between an encoder output and the fusion
module gives the training harness a per-branch modulation point.
"""

from __future__ import annotations

import itertools
from typing import Callable, Sequence

import numpy as np


class AutodiffError(ValueError):
    """Malformed graph, bad operands, or invalid primitive application."""


class ShapeError(AutodiffError):
    """Operand shapes incompatible with the requested operation."""


_node_ids = itertools.count()


def _as_matrix(values) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(1, -1)
    elif arr.ndim != 2:
        raise ShapeError(f"tensors are 2-D matrices; got shape {arr.shape}")
    return np.ascontiguousarray(arr)


class Tensor:
    """A dense matrix node in the computation graph.

    ``values`` and ``grad`` always share one shape. A leaf has no producing
    operation; non-leaves carry exactly one backward rule plus references to
    their inputs. Construction order yields a valid topological order, so
    the graph is acyclic by design.
    """

    def __init__(self, values, *, parents: tuple = (), backward_rule=None,
                 op: str = "", name: str = ""):
        self.values = _as_matrix(values)
        self.grad = np.zeros_like(self.values)
        self.parents: tuple[Tensor, ...] = tuple(parents)
        self._backward_rule: Callable[[np.ndarray], tuple] | None = backward_rule
        self.op = op
        self.name = name
        self.node_id = next(_node_ids)
        if (backward_rule is None) != (len(self.parents) == 0):
            raise AutodiffError("a node is either a leaf or has parents plus a backward rule")

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    @property
    def is_leaf(self) -> bool:
        return self._backward_rule is None

    def zero_grad(self) -> None:
        self.grad[...] = 0.0

    def item(self) -> float:
        if self.values.size != 1:
            raise ShapeError(f"item() needs a 1-element tensor, got shape {self.shape}")
        return float(self.values[0, 0])

    def __repr__(self) -> str:
        tag = self.name or self.op or "leaf"
        return f"Tensor({tag}, shape={self.shape})"


def tensor(values, name: str = "") -> Tensor:
    """Create a leaf tensor from an array-like (scalars become 1x1)."""
    return Tensor(values, name=name)


class GradScaleNode(Tensor):
    """Identity forward; backward multiplies the upstream gradient by ``scale``.

    ``scale`` may be reassigned after the forward pass and is read when the
    gradient flows through, so a training step can arm the hook from batch
    statistics computed after graph construction. The node records the norms
    of the last upstream and scaled gradients for diagnostics.
    """

    def __init__(self, x: Tensor, scale: float = 1.0):
        super().__init__(x.values.copy(), parents=(x,),
                         backward_rule=self._scale_rule, op="grad_scale")
        self.scale = 1.0
        self.set_scale(scale)
        self.last_upstream_norm: float | None = None
        self.last_scaled_norm: float | None = None

    def set_scale(self, scale: float) -> None:
        scale = float(scale)
        if not np.isfinite(scale) or scale < 0.0:
            raise AutodiffError(f"grad_scale needs a finite non-negative scale, got {scale}")
        self.scale = scale

    def _scale_rule(self, g: np.ndarray) -> tuple[np.ndarray]:
        scaled = g * self.scale
        self.last_upstream_norm = float(np.linalg.norm(g))
        self.last_scaled_norm = float(np.linalg.norm(scaled))
        return (scaled,)


# ---------------------------------------------------------------------------
# primitives


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} vs {b.shape}")
    out = a.values @ b.values

    def rule(g):
        return g @ b.values.T, a.values.T @ g

    return Tensor(out, parents=(a, b), backward_rule=rule, op="matmul")


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes differ, {a.shape} vs {b.shape}")

    def rule(g):
        return g, g

    return Tensor(a.values + b.values, parents=(a, b), backward_rule=rule, op="add")


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add a (1, m) bias row to every row of x (B, m)."""
    if b.shape != (1, x.shape[1]):
        raise ShapeError(f"add_bias: bias must be (1, {x.shape[1]}), got {b.shape} for input {x.shape}")

    def rule(g):
        return g, g.sum(axis=0, keepdims=True)

    return Tensor(x.values + b.values, parents=(x, b), backward_rule=rule, op="add_bias")


def relu(x: Tensor) -> Tensor:
    # subgradient at 0 is 0
    mask = x.values > 0.0

    def rule(g):
        return (g * mask,)

    return Tensor(np.maximum(x.values, 0.0), parents=(x,), backward_rule=rule, op="relu")


def sigmoid(x: Tensor) -> Tensor:
    v = x.values
    s = np.where(v >= 0.0, 1.0 / (1.0 + np.exp(-np.abs(v))),
                 np.exp(-np.abs(v)) / (1.0 + np.exp(-np.abs(v))))

    def rule(g):
        return (g * s * (1.0 - s),)

    return Tensor(s, parents=(x,), backward_rule=rule, op="sigmoid")


def concat(xs: Sequence[Tensor]) -> Tensor:
    xs = tuple(xs)
    if not xs:
        raise ShapeError("concat: need at least one input")
    rows = xs[0].shape[0]
    for i, x in enumerate(xs):
        if x.shape[0] != rows:
            raise ShapeError(f"concat: input {i} has {x.shape[0]} rows, expected {rows}")
    widths = [x.shape[1] for x in xs]
    splits = np.cumsum(widths)[:-1]

    def rule(g):
        return tuple(np.hsplit(g, splits))

    return Tensor(np.hstack([x.values for x in xs]), parents=xs, backward_rule=rule, op="concat")


def _unbroadcast(g: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    out = g
    for axis in (0, 1):
        if shape[axis] == 1 and out.shape[axis] != 1:
            out = out.sum(axis=axis, keepdims=True)
    return out


def hadamard(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product with numpy broadcasting over unit axes."""
    try:
        out = a.values * b.values
    except ValueError:
        raise ShapeError(f"hadamard: shapes not broadcastable, {a.shape} vs {b.shape}") from None

    def rule(g):
        return _unbroadcast(g * b.values, a.shape), _unbroadcast(g * a.values, b.shape)

    return Tensor(out, parents=(a, b), backward_rule=rule, op="hadamard")


def zero_mask(x: Tensor) -> Tensor:
    """All-zero tensor of x's shape; backward passes exactly zero to x."""

    def rule(g):
        return (np.zeros_like(x.values),)

    return Tensor(np.zeros_like(x.values), parents=(x,), backward_rule=rule, op="zero_mask")


def grad_scale(x: Tensor, scale: float = 1.0) -> GradScaleNode:
    return GradScaleNode(x, scale)


def scale(x: Tensor, c: float) -> Tensor:
    """Multiply by a python constant (the constant gets no gradient)."""
    c = float(c)

    def rule(g):
        return (g * c,)

    return Tensor(x.values * c, parents=(x,), backward_rule=rule, op="scale")


def sum_all(x: Tensor) -> Tensor:
    """Sum of all entries, as a 1x1 tensor."""

    def rule(g):
        return (np.full_like(x.values, g[0, 0]),)

    return Tensor(np.array([[x.values.sum()]]), parents=(x,), backward_rule=rule, op="sum_all")


def row_softmax(x: Tensor) -> Tensor:
    """Softmax along each row, max-subtracted for stability."""
    z = x.values - x.values.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=1, keepdims=True)

    def rule(g):
        return (s * (g - (g * s).sum(axis=1, keepdims=True)),)

    return Tensor(s, parents=(x,), backward_rule=rule, op="row_softmax")


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean over the batch of -log softmax(logits)[label], as a 1x1 tensor.

    Max-subtraction keeps the log-sum-exp finite for arbitrarily large
    logit gaps.
    """
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    n, m = logits.shape
    if n == 0 or y.size == 0:
        raise AutodiffError("softmax_cross_entropy: empty batch")
    if y.size != n:
        raise ShapeError(f"softmax_cross_entropy: {n} logit rows but {y.size} labels")
    bad = np.nonzero((y < 0) | (y >= m))[0]
    if bad.size:
        i = int(bad[0])
        raise AutodiffError(
            f"softmax_cross_entropy: label {int(y[i])} at index {i} outside [0, {m})")

    z = logits.values - logits.values.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    loss = float(np.mean(lse - z[rows, y]))

    def rule(g):
        p = np.exp(z - lse[:, None])
        p[rows, y] -= 1.0
        return (g[0, 0] * p / n,)

    return Tensor(np.array([[loss]]), parents=(logits,), backward_rule=rule,
                  op="softmax_cross_entropy")


_PRIMITIVE_KINDS = ("matmul", "add_bias", "relu", "sigmoid", "concat",
                    "hadamard", "zero_mask", "grad_scale")


def apply_primitive(kind: str, inputs: Sequence[Tensor], attrs: dict | None = None) -> Tensor:
    """Build a graph node of one of the eight named primitive kinds.

    ``attrs`` carries scalar attributes (only grad_scale takes one: ``scale``).
    Unknown kinds and stray attributes are rejected at construction.
    """
    attrs = dict(attrs or {})
    if kind not in _PRIMITIVE_KINDS:
        raise AutodiffError(f"unknown primitive kind {kind!r}; expected one of {_PRIMITIVE_KINDS}")
    inputs = list(inputs)

    def need(n):
        if len(inputs) != n:
            raise AutodiffError(f"{kind} takes {n} input(s), got {len(inputs)}")

    if kind == "grad_scale":
        need(1)
        s = attrs.pop("scale", 1.0)
    if attrs:
        raise AutodiffError(f"{kind} does not accept attributes {sorted(attrs)}")

    if kind == "matmul":
        need(2)
        return matmul(inputs[0], inputs[1])
    if kind == "add_bias":
        need(2)
        return add_bias(inputs[0], inputs[1])
    if kind == "relu":
        need(1)
        return relu(inputs[0])
    if kind == "sigmoid":
        need(1)
        return sigmoid(inputs[0])
    if kind == "concat":
        return concat(inputs)
    if kind == "hadamard":
        need(2)
        return hadamard(inputs[0], inputs[1])
    if kind == "zero_mask":
        need(1)
        return zero_mask(inputs[0])
    return grad_scale(inputs[0], s)


# ---------------------------------------------------------------------------
# backward pass


def _topological_order(root: Tensor) -> list[Tensor]:
    """Nodes of root's graph, consumers before producers (root first)."""
    seen: set[int] = set()
    order: list[Tensor] = []
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    order.reverse()
    return order


def backward(loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Propagate d(loss)/d(node) through the graph rooted at a scalar loss.

    Gradients accumulate additively into every reachable node's ``grad``
    (call ``zero_grad`` between iterations). Returns the map of reachable
    leaves to this call's gradient contribution.
    """
    if loss.shape != (1, 1):
        raise AutodiffError(f"backward requires a scalar (1x1) loss, got shape {loss.shape}")
    pending: dict[int, np.ndarray] = {id(loss): np.ones((1, 1))}
    leaves: dict[Tensor, np.ndarray] = {}
    for node in _topological_order(loss):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        node.grad += g
        if node.is_leaf:
            leaves[node] = g
            continue
        contributions = node._backward_rule(g)
        if len(contributions) != len(node.parents):
            raise AutodiffError(f"{node.op}: backward rule returned {len(contributions)} "
                                f"gradients for {len(node.parents)} parents")
        for parent, c in zip(node.parents, contributions):
            acc = pending.get(id(parent))
            pending[id(parent)] = c if acc is None else acc + c
    return leaves


# ---------------------------------------------------------------------------
# gradient verification


def _relu_activation_signs(loss: Tensor) -> list[np.ndarray]:
    """Sign masks of every relu input in the graph, in topological order."""
    return [node.parents[0].values > 0.0
            for node in _topological_order(loss) if node.op == "relu"]


def finite_difference_check(graph_builder: Callable[[], Tensor],
                            params: Sequence[Tensor],
                            eps: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``graph_builder`` must deterministically rebuild the scalar loss from the
    current values of ``params``. Parameter entries whose +/-eps perturbation
    flips any relu activation pattern sit on a kink and are skipped; the
    analytic subgradient is not comparable to a finite difference there.
    Relative error uses max(|analytic|, |numeric|, 1e-8) as denominator.
    """
    if eps <= 0.0:
        raise AutodiffError("finite_difference_check: eps must be positive")
    loss = graph_builder()
    if not np.isfinite(loss.values[0, 0]):
        raise AutodiffError("finite_difference_check: non-finite forward value")
    base_signs = _relu_activation_signs(loss)
    for p in params:
        p.zero_grad()
    backward(loss)
    analytic = [p.grad.copy() for p in params]

    def signs_match(signs):
        return len(signs) == len(base_signs) and all(
            np.array_equal(a, b) for a, b in zip(signs, base_signs))

    max_rel = 0.0
    for p, grads in zip(params, analytic):
        flat_values = p.values.reshape(-1)
        flat_grads = grads.reshape(-1)
        for i in range(flat_values.size):
            saved = flat_values[i]
            flat_values[i] = saved + eps
            up = graph_builder()
            f_plus, signs_plus = up.values[0, 0], _relu_activation_signs(up)
            flat_values[i] = saved - eps
            down = graph_builder()
            f_minus, signs_minus = down.values[0, 0], _relu_activation_signs(down)
            flat_values[i] = saved
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise AutodiffError("finite_difference_check: non-finite perturbed value")
            if not (signs_match(signs_plus) and signs_match(signs_minus)):
                continue
            numeric = (f_plus - f_minus) / (2.0 * eps)
            a = flat_grads[i]
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            max_rel = max(max_rel, rel)
    return max_rel
