"""Reverse-mode differentiation over dense float64 arrays.

A deliberately small engine: a :class:`Tape` records primitive operations
in execution order and replays them backwards to accumulate exact analytic
gradients into :class:`Parameter` leaves.  Supported primitives are matmul,
add (same shape or column-bias broadcast), elementwise multiply, scalar
scale/offset, sigmoid, tanh, power with a fixed exponent, sum, mean, log10
and column slicing/concatenation.  Everything runs in 64-bit reals.

Includes the Adam optimizer and a central-difference gradient checker.
"""

from __future__ import annotations

import numpy as np

from .errors import (
    EmptyGradientError,
    NumericError,
    ShapeError,
    TapeReuseError,
)


def _f64(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


def stable_sigmoid(x: np.ndarray) -> np.ndarray:
    """1/(1+exp(-x)) without overflow; exp's argument is clamped inside the
    representable range, which leaves every non-saturated value untouched."""
    return 1.0 / (1.0 + np.exp(-np.clip(x, -709.0, 709.0)))


class Parameter:
    """A named leaf value with a gradient accumulator and a trainable flag."""

    def __init__(self, value, trainable: bool = True, name: str = ""):
        self.value = _f64(value).copy()
        self.grad = np.zeros_like(self.value)
        self.trainable = trainable
        self.name = name
        self.grad_ready = False

    def zero_grad(self) -> None:
        self.grad.fill(0.0)
        self.grad_ready = False

    def __repr__(self):
        return f"Parameter({self.name or 'unnamed'}, shape={self.value.shape}, trainable={self.trainable})"


class Node:
    """One value in a recorded forward pass."""

    __slots__ = ("value", "grad", "requires_grad", "tape")

    def __init__(self, value: np.ndarray, tape: "Tape", requires_grad: bool):
        self.value = value
        self.grad = None
        self.requires_grad = requires_grad
        self.tape = tape

    @property
    def shape(self):
        return self.value.shape

    # Operator sugar; non-Node operands are treated as constants.
    def __add__(self, other):
        if isinstance(other, Node):
            return self.tape.add(self, other)
        return self.tape.offset(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Node):
            return self.tape.add(self, other.tape.scale(other, -1.0))
        return self.tape.offset(self, -other)

    def __mul__(self, other):
        if isinstance(other, Node):
            return self.tape.multiply(self, other)
        return self.tape.scale(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return self.tape.scale(self, -1.0)

    def __matmul__(self, other):
        return self.tape.matmul(self, other)


def _accumulate(node: Node, g: np.ndarray, own: bool = False) -> None:
    """Add g into the node's gradient.  own=True donates the buffer: the
    caller guarantees g is freshly computed (or an exclusive view of an
    already-consumed gradient), so the first accumulation can skip the copy.
    """
    if node.grad is None:
        node.grad = g if own else g.copy()
    else:
        node.grad += g


class Tape:
    """Ordered record of primitives; one backward per recorded forward."""

    def __init__(self):
        self._records = []  # (node, backward_fn) in execution order
        self._param_nodes = []  # (node, Parameter)
        self._consumed = False

    # ------------------------------------------------------------------ leaves

    def param(self, p: Parameter) -> Node:
        node = Node(p.value, self, requires_grad=p.trainable)
        if p.trainable:
            self._param_nodes.append((node, p))
        return node

    def constant(self, value) -> Node:
        return Node(_f64(value), self, requires_grad=False)

    # -------------------------------------------------------------- primitives

    def _record(self, value: np.ndarray, parents, backward_fn, op: str) -> Node:
        if not np.all(np.isfinite(value)):
            raise NumericError(f"non-finite forward value in op '{op}'")
        requires = any(par.requires_grad for par in parents)
        node = Node(value, self, requires)
        if requires:
            self._records.append((node, backward_fn))
        return node

    def matmul(self, a: Node, b: Node) -> Node:
        if a.value.ndim != 2 or b.value.ndim != 2 or a.value.shape[1] != b.value.shape[0]:
            raise ShapeError(f"matmul: incompatible shapes {a.value.shape} @ {b.value.shape}")
        out = a.value @ b.value

        def backward(g):
            if a.requires_grad:
                _accumulate(a, g @ b.value.T, own=True)
            if b.requires_grad:
                _accumulate(b, a.value.T @ g, own=True)

        return self._record(out, (a, b), backward, "matmul")

    def add(self, a: Node, b: Node) -> Node:
        bias_broadcast = (
            a.value.ndim == 2
            and b.value.ndim == 2
            and b.value.shape == (a.value.shape[0], 1)
            and a.value.shape[1] != 1
        )
        if a.value.shape != b.value.shape and not bias_broadcast:
            raise ShapeError(f"add: incompatible shapes {a.value.shape} + {b.value.shape}")
        out = a.value + b.value

        def backward(g):
            if a.requires_grad:
                _accumulate(a, g, own=True)
            if b.requires_grad:
                if bias_broadcast:
                    _accumulate(b, g.sum(axis=1, keepdims=True), own=True)
                else:
                    _accumulate(b, g, own=not a.requires_grad)

        return self._record(out, (a, b), backward, "add")

    def multiply(self, a: Node, b: Node) -> Node:
        if a.value.shape != b.value.shape:
            raise ShapeError(f"multiply: incompatible shapes {a.value.shape} * {b.value.shape}")
        out = a.value * b.value

        def backward(g):
            if a.requires_grad:
                _accumulate(a, g * b.value, own=True)
            if b.requires_grad:
                _accumulate(b, g * a.value, own=True)

        return self._record(out, (a, b), backward, "multiply")

    def scale(self, a: Node, c: float) -> Node:
        c = float(c)
        out = a.value * c

        def backward(g):
            if a.requires_grad:
                _accumulate(a, g * c, own=True)

        return self._record(out, (a,), backward, "scale")

    def offset(self, a: Node, c) -> Node:
        out = a.value + _f64(c)

        def backward(g):
            if a.requires_grad:
                _accumulate(a, g, own=True)

        return self._record(out, (a,), backward, "offset")

    def sigmoid(self, a: Node) -> Node:
        out = stable_sigmoid(a.value)

        def backward(g):
            if a.requires_grad:
                _accumulate(a, g * out * (1.0 - out), own=True)

        return self._record(out, (a,), backward, "sigmoid")

    def tanh(self, a: Node) -> Node:
        out = np.tanh(a.value)

        def backward(g):
            if a.requires_grad:
                _accumulate(a, g * (1.0 - out * out), own=True)

        return self._record(out, (a,), backward, "tanh")

    def power(self, a: Node, c: float) -> Node:
        """Elementwise a**c.  Fractional exponents require a non-negative base;
        the one-sided derivative at 0 is taken as 0."""
        c = float(c)
        integral = c == round(c)
        x = a.value
        if not integral and np.any(x < 0):
            raise NumericError(f"power({c}): negative base with fractional exponent")
        out = x * x if c == 2.0 else x ** c

        def backward(g):
            if a.requires_grad:
                if c == 2.0:
                    d = 2.0 * x
                elif integral:
                    d = c * x ** (c - 1.0) if c != 0 else np.zeros_like(x)
                else:
                    d = np.where(x > 0, c * np.where(x > 0, x, 1.0) ** (c - 1.0), 0.0)
                _accumulate(a, g * d, own=True)

        return self._record(out, (a,), backward, "power")

    def log10(self, a: Node) -> Node:
        if np.any(a.value <= 0):
            raise NumericError("log10: non-positive input")
        out = np.log10(a.value)
        inv = 1.0 / (a.value * np.log(10.0))

        def backward(g):
            if a.requires_grad:
                _accumulate(a, g * inv, own=True)

        return self._record(out, (a,), backward, "log10")

    def sum(self, a: Node) -> Node:
        out = np.asarray(a.value.sum())

        def backward(g):
            if a.requires_grad:
                _accumulate(a, np.broadcast_to(g, a.value.shape))

        return self._record(out, (a,), backward, "sum")

    def mean(self, a: Node) -> Node:
        n = a.value.size
        out = np.asarray(a.value.mean())

        def backward(g):
            if a.requires_grad:
                _accumulate(a, np.broadcast_to(g / n, a.value.shape))

        return self._record(out, (a,), backward, "mean")

    def cols(self, a: Node, start: int, stop: int) -> Node:
        out = a.value[:, start:stop]

        def backward(g):
            if a.requires_grad:
                if a.grad is None:
                    a.grad = np.zeros_like(a.value)
                a.grad[:, start:stop] += g

        return self._record(out, (a,), backward, "cols")

    def hstack(self, nodes) -> Node:
        nodes = list(nodes)
        out = np.concatenate([n.value for n in nodes], axis=1)
        widths = [n.value.shape[1] for n in nodes]

        def backward(g):
            j = 0
            for n, w in zip(nodes, widths):
                if n.requires_grad:
                    _accumulate(n, g[:, j:j + w], own=True)
                j += w

        return self._record(out, tuple(nodes), backward, "hstack")

    def custom(self, value, parents, backward_fn, op: str = "custom") -> Node:
        """Register an externally defined primitive.

        ``backward_fn(out_grad)`` must return one freshly allocated gradient
        array (or None) per parent, in order.
        """
        parents = tuple(parents)

        def backward(g):
            grads = backward_fn(g)
            for par, pg in zip(parents, grads):
                if par.requires_grad and pg is not None:
                    _accumulate(par, pg, own=True)

        return self._record(_f64(value), parents, backward, op)

    # ---------------------------------------------------------------- backward

    def backward(self, loss: Node) -> None:
        if self._consumed:
            raise TapeReuseError("backward already invoked on this tape")
        self._consumed = True
        if loss.value.size != 1:
            raise ShapeError(f"backward requires a scalar loss, got shape {loss.value.shape}")
        if not np.isfinite(loss.value):
            raise NumericError("backward: loss is non-finite")
        loss.grad = np.ones_like(loss.value)
        for node, backward_fn in reversed(self._records):
            if node.grad is not None:
                backward_fn(node.grad)
        for node, p in self._param_nodes:
            if node.grad is not None:
                p.grad += node.grad
                p.grad_ready = True


class AdamState:
    """Per-parameter Adam moments with bias correction."""

    def __init__(self, params, lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.lr = float(lr)
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self._m = {}
        self._v = {}
        for p in params:
            self._ensure(p)

    def _ensure(self, p: Parameter) -> None:
        if id(p) not in self._m:
            self._m[id(p)] = np.zeros_like(p.value)
            self._v[id(p)] = np.zeros_like(p.value)


def adam_step(state: AdamState, params) -> list:
    """Apply one bias-corrected Adam update to the trainable parameters.

    Gradients must have been populated by a backward pass; they are reset
    after the update.  Frozen parameters are never touched.
    """
    params = list(params)
    trainable = [p for p in params if p.trainable]
    if not any(p.grad_ready for p in trainable):
        raise EmptyGradientError("adam_step before any backward pass")
    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for p in trainable:
        state._ensure(p)
        g = p.grad
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter '{p.name}'")
        m = state._m[id(p)]
        v = state._v[id(p)]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p.value -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    for p in params:
        p.zero_grad()
    return params


def grad_check(build_loss, params, epsilon: float = 1e-5,
               max_coords: int | None = None, seed: int = 0,
               denom_floor: float = 1e-4) -> float:
    """Compare analytic gradients against central differences.

    ``build_loss(tape)`` must deterministically construct the scalar loss
    node on the given tape.  Returns the worst relative error over the
    checked coordinates, where the relative error of a pair (a, n) is
    ``|a - n| / max(|a|, |n|, denom_floor)``.  When ``max_coords`` is set,
    a random subset of coordinates of that size is checked.
    """
    if not (1e-6 <= epsilon <= 1e-4):
        raise ValueError(f"epsilon {epsilon} outside [1e-6, 1e-4]")
    params = list(params)
    for p in params:
        p.zero_grad()
    tape = Tape()
    loss = build_loss(tape)
    tape.backward(loss)
    analytic = [p.grad.copy() for p in params]
    for p in params:
        p.zero_grad()

    coords = [(i, j) for i, p in enumerate(params) for j in range(p.value.size)]
    if max_coords is not None and max_coords < len(coords):
        rng = np.random.default_rng(seed)
        picks = rng.choice(len(coords), size=max_coords, replace=False)
        coords = [coords[k] for k in picks]

    worst = 0.0
    for pi, fi in coords:
        p = params[pi]
        orig = p.value.flat[fi]
        p.value.flat[fi] = orig + epsilon
        lp = float(build_loss(Tape()).value)
        p.value.flat[fi] = orig - epsilon
        lm = float(build_loss(Tape()).value)
        p.value.flat[fi] = orig
        if not (np.isfinite(lp) and np.isfinite(lm)):
            raise NumericError("grad_check: non-finite loss during perturbation")
        numeric = (lp - lm) / (2.0 * epsilon)
        ana = analytic[pi].flat[fi]
        err = abs(ana - numeric) / max(abs(ana), abs(numeric), denom_floor)
        worst = max(worst, err)
    return worst
