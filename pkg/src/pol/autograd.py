"""Reverse-mode differentiation over the tensor kernels.

A Tape records every primitive application in execution order, which is
already a topological order, so backward is a single reverse sweep.  A
Parameter used k times on one tape is represented by a single leaf node, so
its gradient is automatically the sum of the k contribution terms -- this is
what makes gradients through an iterated weight-shared block correct.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as tk
from .errors import NumericError, ShapeError


class Parameter:
    """A named trainable value with a dense gradient buffer."""

    __slots__ = ("name", "value", "grad", "frozen")

    def __init__(self, name: str, value: np.ndarray, frozen: bool = False):
        self.name = name
        self.value = np.ascontiguousarray(value)
        self.grad = np.zeros_like(self.value)
        self.frozen = frozen

    def zero_grad(self):
        self.grad[...] = 0

    def __repr__(self):
        tag = " frozen" if self.frozen else ""
        return f"Parameter({self.name}, shape={tuple(self.value.shape)}{tag})"


class Node:
    __slots__ = ("idx", "value", "parents", "vjp", "param")

    def __init__(self, idx, value, parents=(), vjp=None, param=None):
        self.idx = idx
        self.value = value
        self.parents = parents
        self.vjp = vjp
        self.param = param

    @property
    def shape(self):
        return self.value.shape


class Tape:
    """Recorder for one forward computation.

    With grad=False the ops only compute values (no closures, no saved
    activations), which is what inference paths use.
    """

    def __init__(self, grad: bool = True):
        self.grad = grad
        self.nodes: list[Node] = []
        self.consumed = False
        self._param_nodes: dict[int, Node] = {}
        self._params: list[Parameter] = []

    # ---- leaves ------------------------------------------------------

    def _append(self, value, parents=(), vjp=None, param=None) -> Node:
        if self.consumed:
            raise NumericError("tape already consumed by backward()")
        if not self.grad:
            parents, vjp = (), None
        node = Node(len(self.nodes), value, parents, vjp, param)
        self.nodes.append(node)
        return node

    def constant(self, value) -> Node:
        """A leaf that blocks gradient flow (detached values, frozen weights)."""
        return self._append(np.asarray(value))

    def leaf(self, value) -> Node:
        """A gradient-carrying leaf that is not a Parameter (e.g. an input)."""
        return self._append(np.asarray(value))

    def param(self, p: Parameter) -> Node:
        """Register a Parameter; repeated registration returns the same node.

        Frozen parameters enter as constants so no gradient is ever computed
        for them.
        """
        if p.frozen or not self.grad:
            return self.constant(p.value)
        node = self._param_nodes.get(id(p))
        if node is None:
            node = self._append(p.value, param=p)
            self._param_nodes[id(p)] = node
            self._params.append(p)
        return node

    def parameters(self) -> list[Parameter]:
        return list(self._params)

    # ---- primitives --------------------------------------------------

    def conv2d(self, x: Node, w: Node, b: Node | None,
               stride=1, pad=0, pad_mode="zero") -> Node:
        bias = None if b is None else b.value
        out, cols = tk.conv2d_forward(x.value, w.value, bias, stride, pad, pad_mode)
        if not self.grad:
            return self._append(out)
        xv, wv = x.value, w.value

        def vjp(g):
            dx, dw, db = tk.conv2d_grads(xv, wv, cols, g, stride, pad, pad_mode)
            return (dx, dw) if b is None else (dx, dw, db)

        parents = (x, w) if b is None else (x, w, b)
        return self._append(out, parents, vjp)

    def conv_transpose2d(self, x: Node, w: Node, b: Node | None,
                         stride=1, pad=0) -> Node:
        bias = None if b is None else b.value
        out = tk.conv_transpose2d_forward(x.value, w.value, bias, stride, pad)
        if not self.grad:
            return self._append(out)
        xv, wv = x.value, w.value

        def vjp(g):
            dx, dw, db = tk.conv_transpose2d_grads(xv, wv, g, stride, pad)
            return (dx, dw) if b is None else (dx, dw, db)

        parents = (x, w) if b is None else (x, w, b)
        return self._append(out, parents, vjp)

    def instance_norm(self, x: Node, gamma: Node, beta: Node, eps=1e-5) -> Node:
        out, xhat, inv = tk.instance_norm_forward(x.value, gamma.value, beta.value, eps)
        if not self.grad:
            return self._append(out)
        gv = gamma.value

        def vjp(g):
            return tk.instance_norm_grads(gv, xhat, inv, g)

        return self._append(out, (x, gamma, beta), vjp)

    def _unary(self, x: Node, out, dfn) -> Node:
        if not self.grad:
            return self._append(out)
        return self._append(out, (x,), lambda g: (dfn(g),))

    def relu(self, x: Node) -> Node:
        out = np.maximum(x.value, 0)
        mask = x.value > 0
        return self._unary(x, out, lambda g: g * mask)

    def leaky_relu(self, x: Node, alpha=0.2) -> Node:
        out = tk.activation(x.value, "leaky_relu", alpha)
        a = np.asarray(alpha, dtype=x.value.dtype)
        mask = x.value > 0
        return self._unary(x, out, lambda g: np.where(mask, g, a * g))

    def sigmoid(self, x: Node) -> Node:
        out = tk.sigmoid(x.value)
        return self._unary(x, out, lambda g: g * out * (1 - out))

    def tanh(self, x: Node) -> Node:
        out = np.tanh(x.value)
        return self._unary(x, out, lambda g: g * (1 - out * out))

    def softplus(self, x: Node) -> Node:
        out = tk.softplus(x.value)
        sig = tk.sigmoid(x.value)
        return self._unary(x, out, lambda g: g * sig)

    def identity(self, x: Node) -> Node:
        return self._unary(x, x.value.copy(), lambda g: g)

    def neg(self, x: Node) -> Node:
        return self._unary(x, -x.value, lambda g: -g)

    def absval(self, x: Node) -> Node:
        out = np.abs(x.value)
        sgn = np.sign(x.value)
        return self._unary(x, out, lambda g: g * sgn)

    def square(self, x: Node) -> Node:
        xv = x.value
        return self._unary(x, xv * xv, lambda g: g * (2 * xv))

    def scale(self, x: Node, c: float) -> Node:
        cc = np.asarray(c, dtype=x.value.dtype)
        return self._unary(x, cc * x.value, lambda g: cc * g)

    def shift(self, x: Node, c: float) -> Node:
        cc = np.asarray(c, dtype=x.value.dtype)
        return self._unary(x, x.value + cc, lambda g: g)

    def add(self, a: Node, b: Node) -> Node:
        out = tk.elementwise(a.value, b.value, "add")
        if not self.grad:
            return self._append(out)
        return self._append(out, (a, b), lambda g: (g, g))

    def sub(self, a: Node, b: Node) -> Node:
        out = tk.elementwise(a.value, b.value, "sub")
        if not self.grad:
            return self._append(out)
        return self._append(out, (a, b), lambda g: (g, -g))

    def mul(self, a: Node, b: Node) -> Node:
        out = tk.elementwise(a.value, b.value, "mul")
        if not self.grad:
            return self._append(out)
        av, bv = a.value, b.value
        return self._append(out, (a, b), lambda g: (g * bv, g * av))

    def mean(self, x: Node) -> Node:
        out = x.value.mean(dtype=x.value.dtype)
        if not self.grad:
            return self._append(out)
        shape, n, dt = x.value.shape, x.value.size, x.value.dtype
        inv = np.asarray(1.0 / n, dtype=dt)
        return self._append(out, (x,), lambda g: (np.full(shape, g * inv, dtype=dt),))

    def total(self, x: Node) -> Node:
        out = x.value.sum(dtype=x.value.dtype)
        if not self.grad:
            return self._append(out)
        shape, dt = x.value.shape, x.value.dtype
        return self._append(out, (x,), lambda g: (np.full(shape, g, dtype=dt),))


def _sweep(tape: Tape, root: Node, seed: np.ndarray, into_params: bool):
    """Reverse sweep from `root`; returns the node-id -> gradient map."""
    grads: dict[int, np.ndarray] = {root.idx: seed}
    for node in reversed(tape.nodes[: root.idx + 1]):
        g = grads.get(node.idx)
        if g is None:
            continue
        if into_params and node.param is not None:
            node.param.grad += g
        if node.vjp is not None:
            pgrads = node.vjp(g)
            for parent, pg in zip(node.parents, pgrads):
                if pg is None:
                    continue
                if parent.idx in grads:
                    grads[parent.idx] = grads[parent.idx] + pg
                else:
                    grads[parent.idx] = pg
    return grads


def backward(tape: Tape, loss: Node):
    """Accumulate dLoss/dParam into every reachable Parameter's .grad.

    The loss must be a scalar node and a tape supports exactly one backward
    pass; gradients of parameters not reachable from the loss are untouched.
    """
    if loss.value.size != 1:
        raise NumericError(f"loss must be scalar, got shape {loss.value.shape}")
    if tape.consumed:
        raise NumericError("tape already consumed by backward()")
    if not tape.grad:
        raise NumericError("tape was recorded with grad=False")
    seed = np.ones_like(loss.value)
    _sweep(tape, loss, seed, into_params=True)
    tape.consumed = True


class IteratedBlockGrads:
    """Vector-Jacobian products of n applications of one shared block."""

    def __init__(self, tape: Tape, x_node: Node, out_node: Node):
        self._tape = tape
        self._x = x_node
        self._out = out_node
        self.output = out_node.value

    def vjp_x(self, v: np.ndarray) -> np.ndarray:
        """d<v, out>/dx -- the adjoint of the full n-fold Jacobian."""
        if v.shape != self._out.value.shape:
            raise ShapeError("cotangent shape mismatch")
        grads = _sweep(self._tape, self._out, v, into_params=False)
        g = grads.get(self._x.idx)
        return np.zeros_like(self._x.value) if g is None else g

    def param_grads(self, v: np.ndarray) -> dict[str, np.ndarray]:
        """d<v, out>/dw for every shared parameter (sum over applications)."""
        if v.shape != self._out.value.shape:
            raise ShapeError("cotangent shape mismatch")
        grads = _sweep(self._tape, self._out, v, into_params=False)
        out = {}
        for p in self._tape.parameters():
            node = self._tape._param_nodes[id(p)]
            g = grads.get(node.idx)
            out[p.name] = np.zeros_like(p.value) if g is None else g
        return out


def grad_of_iterated_block(block_fn, x: np.ndarray, n: int) -> IteratedBlockGrads:
    """Record block_fn applied n times and expose its VJP closures.

    block_fn(tape, node) -> node must register its weights via tape.param.
    n = 0 yields the identity VJP and an empty parameter-gradient map.
    """
    if n < 0:
        raise ShapeError("iteration count must be >= 0")
    tape = Tape()
    x0 = tape.leaf(x)
    cur = x0
    for _ in range(n):
        cur = block_fn(tape, cur)
    return IteratedBlockGrads(tape, x0, cur)


# ---- optimizer ------------------------------------------------------


@dataclass
class AdamState:
    """Adam with bias correction; moments are keyed by parameter name."""

    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: list[Parameter], state: AdamState):
    """One Adam update over `params`; gradients are zeroed afterwards."""
    state.t += 1
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t
    for p in params:
        if p.frozen:
            raise NumericError(f"frozen parameter {p.name} passed to adam_step")
        g = p.grad
        if not np.all(np.isfinite(g)):
            raise NumericError(f"NaN/Inf gradient in parameter {p.name}")
        dt = p.value.dtype
        m = state.m.get(p.name)
        if m is None:
            m = state.m[p.name] = np.zeros_like(p.value)
        v = state.v.get(p.name)
        if v is None:
            v = state.v[p.name] = np.zeros_like(p.value)
        b1 = np.asarray(state.beta1, dtype=dt)
        b2 = np.asarray(state.beta2, dtype=dt)
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        mhat = m / np.asarray(bc1, dtype=dt)
        vhat = v / np.asarray(bc2, dtype=dt)
        p.value -= np.asarray(state.lr, dtype=dt) * mhat / (np.sqrt(vhat) + np.asarray(state.eps, dtype=dt))
        p.zero_grad()


def zero_grads(params: list[Parameter]):
    for p in params:
        p.zero_grad()


# ---- gradient verification -----------------------------------------


@dataclass
class FiniteDiffEntry:
    name: str
    max_rel_err: float
    worst_analytic: float
    worst_numeric: float


@dataclass
class FiniteDiffReport:
    entries: list[FiniteDiffEntry]

    @property
    def max_rel_err(self) -> float:
        return max((e.max_rel_err for e in self.entries), default=0.0)

    def __str__(self):
        lines = [
            f"{e.name}: max_rel_err={e.max_rel_err:.3e} "
            f"(analytic={e.worst_analytic:.6e}, numeric={e.worst_numeric:.6e})"
            for e in self.entries
        ]
        return "\n".join(lines)


def finite_diff_check(build, params: list[Parameter], eps: float | None = None,
                      rng: np.random.Generator | None = None,
                      max_coords: int = 64) -> FiniteDiffReport:
    """Compare backward() against central finite differences.

    `build()` must rebuild the graph from the current parameter values and
    return (tape, loss_node); it is evaluated twice up front and a bitwise
    mismatch of the loss flags it as non-deterministic.

    The analytic gradient is taken from backward() on the graph exactly as
    recorded.  For the numeric side the parameter values are temporarily
    upcast to float64, so the central differences measure the true gradient
    rather than float32 evaluation noise; what the report quantifies is the
    accuracy of the recorded backward pass.  Per coordinate the error is
    |a - n| / max(|a|, |n|, floor); the floor combines the RMS of the
    parameter's own analytic gradient with a small fraction of the largest
    gradient RMS in the graph, so parameters whose true gradient is zero
    (e.g. a bias absorbed by a following normalization) cannot drown the
    report in finite-difference noise.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    tape, loss = build()
    v0 = float(loss.value)
    _, loss2 = build()
    if float(loss2.value) != v0:
        raise NumericError("non-deterministic function under finite_diff_check")

    zero_grads(params)
    backward(tape, loss)
    analytic = {p.name: p.grad.copy() for p in params}
    zero_grads(params)

    def _rms(a):
        return float(np.sqrt(np.mean(a.astype(np.float64) ** 2)))

    global_rms = max((_rms(a) for a in analytic.values()), default=0.0)

    originals = [(p, p.value) for p in params]
    for p in params:
        p.value = p.value.astype(np.float64)

    def _central(flat, c, h):
        orig = flat[c]
        flat[c] = orig + h
        _, lp = build()
        flat[c] = orig - h
        _, lm = build()
        flat[c] = orig
        return (float(lp.value) - float(lm.value)) / (2.0 * h)

    try:
        entries = []
        for p, orig_value in originals:
            f32 = orig_value.dtype == np.float32
            e = eps if eps is not None else 1e-5
            size = p.value.size
            k = min(max_coords, size)
            coords = (
                rng.choice(size, size=k, replace=False) if k < size else np.arange(size)
            )
            flat = p.value.reshape(-1)
            a_full = analytic[p.name].reshape(-1)
            floor = max(_rms(a_full), (1e-3 if f32 else 1e-6) * global_rms, 1e-300)
            worst = (0.0, 0.0, 0.0)
            for c in coords:
                num = _central(flat, c, e)
                ana = float(a_full[c])
                rel = abs(ana - num) / max(abs(ana), abs(num), floor)
                if rel > worst[0]:
                    worst = (rel, ana, num)
            entries.append(FiniteDiffEntry(p.name, worst[0], worst[1], worst[2]))
    finally:
        for p, orig_value in originals:
            p.value = orig_value
    return FiniteDiffReport(entries)
