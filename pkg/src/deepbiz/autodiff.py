"""Reverse-mode differentiation on dense float64 arrays.

Every differentiable computation is recorded on a :class:`Tape` as a list of
:class:`Node` objects in creation order, which is already a valid topological
order (a node can only be built from nodes that exist).  :func:`backward`
walks that list in reverse and accumulates gradients by summation, so a value
used along several paths receives the sum of the per-path contributions.

All operations check their output for NaN/Inf and raise
:class:`~deepbiz.errors.NumericError` rather than let a non-finite value
propagate silently.
"""
from __future__ import annotations

from typing import Callable, Dict, Optional, Sequence, Union

import numpy as np
from scipy.special import expit

from .errors import ContractError, DimensionError, GraphError, NumericError, VocabularyError

ArrayLike = Union[np.ndarray, float, int, Sequence]


class Node:
    """One value in a recorded computation.

    Attributes:
        op: name of the operation that produced the value ("leaf" for inputs).
        parents: the nodes the value was computed from.
        value: the float64 array.
        grad: accumulated gradient of the last :func:`backward` call, same
            shape as ``value``; ``None`` when the node was not reached.
    """

    __slots__ = ("op", "parents", "value", "grad", "name", "tape", "requires_grad", "_backward")

    def __init__(self, tape, op, value, parents=(), backward=None, name=None, requires_grad=True):
        self.tape = tape
        self.op = op
        self.value = value
        self.parents = tuple(parents)
        self._backward = backward
        self.name = name
        self.requires_grad = requires_grad
        self.grad = None

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Node({self.op}{label}, shape={self.value.shape})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    @property
    def T(self):
        return transpose(self)


class Tape:
    """Ordered record of nodes plus a registry of named trainable leaves."""

    def __init__(self):
        self.nodes: list = []
        self.leaves: Dict[str, Node] = {}

    def __len__(self):
        return len(self.nodes)

    def __contains__(self, node):
        return isinstance(node, Node) and node.tape is self

    def leaf(self, value: ArrayLike, name: Optional[str] = None) -> Node:
        """Register a trainable input; named leaves appear in backward's result."""
        arr = np.array(value, dtype=np.float64)
        _check_finite(arr, "leaf")
        node = Node(self, "leaf", arr, name=name)
        self.nodes.append(node)
        if name is not None:
            if name in self.leaves:
                raise GraphError(f"leaf {name!r} registered twice on the same tape")
            self.leaves[name] = node
        return node

    def constant(self, value: ArrayLike) -> Node:
        arr = np.asarray(value, dtype=np.float64)
        node = Node(self, "const", arr, requires_grad=False)
        self.nodes.append(node)
        return node

    def record(self, op: str, value: np.ndarray, parents, backward) -> Node:
        _check_finite(value, op)
        requires_grad = any(p.requires_grad for p in parents)
        node = Node(self, op, value, parents, backward if requires_grad else None,
                    requires_grad=requires_grad)
        self.nodes.append(node)
        return node


def _check_finite(value: np.ndarray, op: str):
    if not np.isfinite(value).all():
        raise NumericError(f"{op} produced non-finite values")


def _tape_of(*args) -> Tape:
    tape = None
    for a in args:
        if isinstance(a, Node):
            if tape is None:
                tape = a.tape
            elif a.tape is not tape:
                raise GraphError("operands live on different tapes")
    return tape if tape is not None else Tape()


def _lift(x, tape: Tape) -> Node:
    if isinstance(x, Node):
        return x
    return tape.constant(x)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


class IndexedGrad:
    """Sparse gradient contribution: ``value`` belongs at ``parent[index]``.

    Lets slicing ops avoid materialising a full-size zero array per use.
    """

    __slots__ = ("index", "value")

    def __init__(self, index, value):
        self.index = index
        self.value = value


def _is_basic_index(index) -> bool:
    parts = index if isinstance(index, tuple) else (index,)
    return all(isinstance(p, (slice, int, np.integer)) or p is Ellipsis for p in parts)


def _binary(a, b):
    tape = _tape_of(a, b)
    return tape, _lift(a, tape), _lift(b, tape)


# -- elementwise arithmetic ---------------------------------------------------

def add(a, b) -> Node:
    tape, a, b = _binary(a, b)
    sa, sb = a.value.shape, b.value.shape
    return tape.record("add", a.value + b.value, (a, b),
                       lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Node:
    tape, a, b = _binary(a, b)
    sa, sb = a.value.shape, b.value.shape
    return tape.record("sub", a.value - b.value, (a, b),
                       lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Node:
    tape, a, b = _binary(a, b)
    av, bv = a.value, b.value
    return tape.record("mul", av * bv, (a, b),
                       lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


def div(a, b) -> Node:
    tape, a, b = _binary(a, b)
    av, bv = a.value, b.value
    out = av / bv

    def backward(g):
        return (_unbroadcast(g / bv, av.shape), _unbroadcast(-g * out / bv, bv.shape))

    return tape.record("div", out, (a, b), backward)


def neg(a) -> Node:
    tape = _tape_of(a)
    a = _lift(a, tape)
    return tape.record("neg", -a.value, (a,), lambda g: (-g,))


def square(a) -> Node:
    tape = _tape_of(a)
    a = _lift(a, tape)
    av = a.value
    return tape.record("square", av * av, (a,), lambda g: (2.0 * av * g,))


def sqrt(a) -> Node:
    tape = _tape_of(a)
    a = _lift(a, tape)
    out = np.sqrt(a.value)
    return tape.record("sqrt", out, (a,), lambda g: (g / (2.0 * out),))


def exp(a) -> Node:
    tape = _tape_of(a)
    a = _lift(a, tape)
    with np.errstate(over="ignore"):
        out = np.exp(a.value)
    return tape.record("exp", out, (a,), lambda g: (g * out,))


def log(a) -> Node:
    tape = _tape_of(a)
    a = _lift(a, tape)
    av = a.value
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(av)
    return tape.record("log", out, (a,), lambda g: (g / av,))


# -- activations --------------------------------------------------------------

def sigmoid(a) -> Node:
    tape = _tape_of(a)
    a = _lift(a, tape)
    out = expit(a.value)
    return tape.record("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def tanh(a) -> Node:
    tape = _tape_of(a)
    a = _lift(a, tape)
    out = np.tanh(a.value)
    return tape.record("tanh", out, (a,), lambda g: (g * (1.0 - out * out),))


def relu(a) -> Node:
    tape = _tape_of(a)
    a = _lift(a, tape)
    # subgradient at exactly 0 is 0
    active = a.value > 0
    return tape.record("relu", np.where(active, a.value, 0.0), (a,), lambda g: (g * active,))


def identity(a) -> Node:
    tape = _tape_of(a)
    return _lift(a, tape)


def softmax(a, axis: int = -1) -> Node:
    tape = _tape_of(a)
    a = _lift(a, tape)
    shifted = a.value - a.value.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return tape.record("softmax", out, (a,), backward)


ACTIVATIONS: Dict[str, Callable] = {
    "sigmoid": sigmoid,
    "tanh": tanh,
    "relu": relu,
    "linear": identity,
    "softmax": softmax,
}


def activation(kind: str, x) -> Node:
    try:
        fn = ACTIVATIONS[kind]
    except KeyError:
        raise ContractError(f"unknown activation {kind!r}; expected one of {sorted(ACTIVATIONS)}") from None
    return fn(x)


# -- linear algebra and shape ------------------------------------------------

def matmul(a, b) -> Node:
    """Matrix product of two 2-D operands."""
    tape, a, b = _binary(a, b)
    av, bv = a.value, b.value
    if av.ndim != 2 or bv.ndim != 2 or av.shape[1] != bv.shape[0]:
        raise DimensionError(f"cannot multiply shapes {av.shape} and {bv.shape}")
    return tape.record("matmul", av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g))


def transpose(a) -> Node:
    tape = _tape_of(a)
    a = _lift(a, tape)
    return tape.record("transpose", a.value.T, (a,), lambda g: (g.T,))


def reshape(a, shape) -> Node:
    tape = _tape_of(a)
    a = _lift(a, tape)
    orig = a.value.shape
    return tape.record("reshape", a.value.reshape(shape), (a,), lambda g: (g.reshape(orig),))


def sum(a, axis=None, keepdims: bool = False) -> Node:  # noqa: A001 - mirrors numpy
    tape = _tape_of(a)
    a = _lift(a, tape)
    av = a.value

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, av.shape).copy(),)

    return tape.record("sum", av.sum(axis=axis, keepdims=keepdims), (a,), backward)


def mean(a, axis=None, keepdims: bool = False) -> Node:
    tape = _tape_of(a)
    a = _lift(a, tape)
    av = a.value
    count = av.size if axis is None else np.prod([av.shape[i] for i in np.atleast_1d(axis)])

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, av.shape).copy(),)

    return tape.record("mean", av.mean(axis=axis, keepdims=keepdims), (a,), backward)


def concat(nodes, axis: int = -1) -> Node:
    tape = _tape_of(*nodes)
    nodes = [_lift(n, tape) for n in nodes]
    sizes = [n.value.shape[axis] for n in nodes]
    cuts = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, cuts, axis=axis))

    return tape.record("concat", np.concatenate([n.value for n in nodes], axis=axis),
                       nodes, backward)


def getitem(a, index) -> Node:
    tape = _tape_of(a)
    a = _lift(a, tape)
    return tape.record("slice", np.array(a.value[index]), (a,),
                       lambda g: (IndexedGrad(index, g),))


def embedding(table, codes) -> Node:
    """Row lookup ``table[codes]``; the gradient scatters back onto the rows used."""
    tape = _tape_of(table)
    table = _lift(table, tape)
    codes = np.asarray(codes)
    if codes.dtype.kind not in "iu":
        if not np.all(np.mod(codes, 1) == 0):
            raise VocabularyError("category codes must be integers")
        codes = codes.astype(np.int64)
    vocab = table.value.shape[0]
    if codes.size and (codes.min() < 0 or codes.max() >= vocab):
        bad = codes[(codes < 0) | (codes >= vocab)].ravel()[0]
        raise VocabularyError(f"category code {bad} outside vocabulary of size {vocab}")
    return tape.record("embedding", table.value[codes], (table,),
                       lambda g: (IndexedGrad(codes, g),))


def stack(nodes, axis: int = 1) -> Node:
    """Stack equally shaped nodes along a new axis."""
    tape = _tape_of(*nodes)
    nodes = [_lift(n, tape) for n in nodes]

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(nodes)))

    return tape.record("stack", np.stack([n.value for n in nodes], axis=axis), nodes, backward)


# -- losses --------------------------------------------------------------------

def mse_loss(pred, target) -> Node:
    """Mean squared error; ``target`` must match ``pred`` elementwise (no broadcasting)."""
    tape = _tape_of(pred)
    pred = _lift(pred, tape)
    tv = target.value if isinstance(target, Node) else np.asarray(target, dtype=np.float64)
    if tv.shape != pred.value.shape:
        if tv.size != pred.value.size:
            raise DimensionError(f"target shape {tv.shape} does not match prediction shape {pred.value.shape}")
        target = reshape(target, pred.value.shape) if isinstance(target, Node) else tv.reshape(pred.value.shape)
    diff = sub(pred, target)
    return mean(square(diff))


def softmax_cross_entropy(logits, labels) -> Node:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    tape = _tape_of(logits)
    logits = _lift(logits, tape)
    z = logits.value
    labels = np.asarray(labels, dtype=np.int64)
    n = z.shape[0]
    shifted = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    loss = np.mean(lse - shifted[np.arange(n), labels])
    probs = np.exp(shifted - lse[:, None])

    def backward(g):
        d = probs.copy()
        d[np.arange(n), labels] -= 1.0
        return (g * d / n,)

    return tape.record("softmax_xent", np.asarray(loss), (logits,), backward)


# -- convolution ----------------------------------------------------------------

def conv2d(x, kernel) -> Node:
    """Zero-padded 'same' convolution of square grids with an odd square kernel.

    ``x`` is (m, m) or a batch (n, m, m); output has the input's shape.
    out[i, j] = sum_{a,b in [-r, r]} x[i+a, j+b] * k[a, b] with r = l // 2.
    """
    tape = _tape_of(x, kernel)
    x, kernel = _lift(x, tape), _lift(kernel, tape)
    xv, kv = x.value, kernel.value
    if kv.ndim != 2 or kv.shape[0] != kv.shape[1]:
        raise DimensionError(f"kernel must be square, got shape {kv.shape}")
    width = kv.shape[0]
    if width % 2 == 0:
        raise ContractError(f"kernel width must be odd, got {width}")
    squeeze = xv.ndim == 2
    xb = xv[None] if squeeze else xv
    if xb.ndim != 3 or xb.shape[1] != xb.shape[2]:
        raise DimensionError(f"input must be (m, m) or (n, m, m), got {xv.shape}")
    m = xb.shape[1]
    if width > m:
        raise ContractError(f"kernel width {width} exceeds grid size {m}")
    r = width // 2
    padded = np.pad(xb, ((0, 0), (r, r), (r, r)))
    out = np.zeros_like(xb)
    for a in range(width):
        for b in range(width):
            out += kv[a, b] * padded[:, a:a + m, b:b + m]

    def backward(g):
        gb = g[None] if squeeze else g
        dk = np.empty_like(kv)
        dpad = np.zeros_like(padded)
        for a in range(width):
            for b in range(width):
                dk[a, b] = np.sum(gb * padded[:, a:a + m, b:b + m])
                dpad[:, a:a + m, b:b + m] += kv[a, b] * gb
        dx = dpad[:, r:r + m, r:r + m]
        return (dx[0] if squeeze else dx, dk)

    return tape.record("conv2d", out[0] if squeeze else out, (x, kernel), backward)


# -- fused recurrent cells --------------------------------------------------------

def gru_cell(x, h, weights, mask=None) -> Node:
    """One GRU step.

    ``weights`` is the 6-tuple (W_z, b_z, W_r, b_r, W_h, b_h); each W acts on
    the concatenation [x, h] (candidate: [x, r * h]) and has shape
    (hidden, in + hidden).  ``mask`` (n,) of 0/1 keeps h unchanged where 0,
    which lets right-padded sequences of different lengths share a batch.
    """
    tape = _tape_of(x, h, *weights)
    x, h = _lift(x, tape), _lift(h, tape)
    wz, bz, wr, br, wh, bh = (_lift(w, tape) for w in weights)
    xv, hv = x.value, h.value
    n_in = xv.shape[1]
    _check_cell_shapes("GRU", xv, hv, wz.value)
    xh = np.concatenate([xv, hv], axis=1)
    z = expit(xh @ wz.value.T + bz.value)
    r = expit(xh @ wr.value.T + br.value)
    xrh = np.concatenate([xv, r * hv], axis=1)
    cand = np.tanh(xrh @ wh.value.T + bh.value)
    new = (1.0 - z) * hv + z * cand
    m = None if mask is None else np.asarray(mask, dtype=np.float64).reshape(-1, 1)
    out = new if m is None else m * new + (1.0 - m) * hv

    def backward(g):
        gn = g if m is None else g * m
        dz = gn * (cand - hv)
        dcand = gn * z
        dh = gn * (1.0 - z) if m is None else gn * (1.0 - z) + g * (1.0 - m)
        da_h = dcand * (1.0 - cand * cand)
        dxrh = da_h @ wh.value
        drh = dxrh[:, n_in:]
        dr = drh * hv
        dh = dh + drh * r
        da_z = dz * z * (1.0 - z)
        da_r = dr * r * (1.0 - r)
        dxh = da_z @ wz.value + da_r @ wr.value
        dx = dxh[:, :n_in] + dxrh[:, :n_in]
        dh = dh + dxh[:, n_in:]
        return (dx, dh,
                da_z.T @ xh, da_z.sum(axis=0),
                da_r.T @ xh, da_r.sum(axis=0),
                da_h.T @ xrh, da_h.sum(axis=0))

    return tape.record("gru_cell", out, (x, h, wz, bz, wr, br, wh, bh), backward)


def lstm_cell(x, h, c, weights, mask=None) -> Node:
    """One LSTM step; returns a node holding [h_t, c_t] side by side.

    ``weights`` is (W_f, b_f, W_i, b_i, W_o, b_o, W_c, b_c), each W of shape
    (hidden, in + hidden) acting on [x, h].
    """
    tape = _tape_of(x, h, c, *weights)
    x, h, c = _lift(x, tape), _lift(h, tape), _lift(c, tape)
    wf, bf, wi, bi, wo, bo, wc, bc = (_lift(w, tape) for w in weights)
    xv, hv, cv = x.value, h.value, c.value
    n_in = xv.shape[1]
    _check_cell_shapes("LSTM", xv, hv, wf.value)
    if cv.shape != hv.shape:
        raise DimensionError(f"cell state shape {cv.shape} differs from hidden shape {hv.shape}")
    xh = np.concatenate([xv, hv], axis=1)
    f = expit(xh @ wf.value.T + bf.value)
    i = expit(xh @ wi.value.T + bi.value)
    o = expit(xh @ wo.value.T + bo.value)
    cand = np.tanh(xh @ wc.value.T + bc.value)
    c_new = f * cv + i * cand
    tc = np.tanh(c_new)
    h_new = o * tc
    m = None if mask is None else np.asarray(mask, dtype=np.float64).reshape(-1, 1)
    if m is not None:
        h_new = m * h_new + (1.0 - m) * hv
        c_out = m * c_new + (1.0 - m) * cv
    else:
        c_out = c_new
    hidden = hv.shape[1]

    def backward(g):
        gh, gc = g[:, :hidden], g[:, hidden:]
        if m is not None:
            gh_in, gc_in = gh * m, gc * m
        else:
            gh_in, gc_in = gh, gc
        do = gh_in * tc
        dc_new = gc_in + gh_in * o * (1.0 - tc * tc)
        da_f = dc_new * cv * f * (1.0 - f)
        da_i = dc_new * cand * i * (1.0 - i)
        da_o = do * o * (1.0 - o)
        da_c = dc_new * i * (1.0 - cand * cand)
        dc = dc_new * f
        dxh = da_f @ wf.value + da_i @ wi.value + da_o @ wo.value + da_c @ wc.value
        dh = dxh[:, n_in:]
        if m is not None:
            dh = dh + gh * (1.0 - m)
            dc = dc + gc * (1.0 - m)
        return (dxh[:, :n_in], dh, dc,
                da_f.T @ xh, da_f.sum(axis=0),
                da_i.T @ xh, da_i.sum(axis=0),
                da_o.T @ xh, da_o.sum(axis=0),
                da_c.T @ xh, da_c.sum(axis=0))

    return tape.record("lstm_cell", np.concatenate([h_new, c_out], axis=1),
                       (x, h, c, wf, bf, wi, bi, wo, bo, wc, bc), backward)


def _check_cell_shapes(kind, xv, hv, w):
    if xv.ndim != 2 or hv.ndim != 2 or xv.shape[0] != hv.shape[0]:
        raise DimensionError(f"{kind} step needs 2-D x and h with equal batch size, "
                             f"got {xv.shape} and {hv.shape}")
    if w.shape != (hv.shape[1], xv.shape[1] + hv.shape[1]):
        raise DimensionError(f"{kind} gate weight {w.shape} does not fit input {xv.shape} "
                             f"and hidden state {hv.shape}")


# -- differentiation ------------------------------------------------------------

def backward(tape: Tape, loss: Node) -> Dict[str, np.ndarray]:
    """Propagate d(loss)/d(node) to every node on ``tape``.

    Returns a mapping from each named leaf to its gradient (zeros when the
    leaf does not influence the loss).
    """
    if not isinstance(loss, Node) or loss.tape is not tape:
        raise GraphError("loss node is not on this tape")
    if loss.value.size != 1:
        raise ContractError(f"loss must be scalar, got shape {loss.value.shape}")
    for node in tape.nodes:
        node.grad = None
    loss.grad = np.ones_like(loss.value)
    owned = set()  # ids of nodes whose grad buffer may be updated in place
    for node in reversed(tape.nodes):
        if node.grad is None or node._backward is None:
            continue
        for parent, g in zip(node.parents, node._backward(node.grad)):
            if g is None or not parent.requires_grad:
                continue
            if isinstance(g, IndexedGrad):
                if id(parent) not in owned:
                    parent.grad = (np.zeros_like(parent.value) if parent.grad is None
                                   else parent.grad.copy())
                    owned.add(id(parent))
                if _is_basic_index(g.index):
                    parent.grad[g.index] += g.value
                else:
                    np.add.at(parent.grad, g.index, g.value)
            elif parent.grad is None:
                parent.grad = g
            else:
                parent.grad = parent.grad + g
                owned.add(id(parent))
    return {name: (leaf.grad if leaf.grad is not None else np.zeros_like(leaf.value))
            for name, leaf in tape.leaves.items()}


def grad_check(f: Callable, point, step: float = 1e-6) -> float:
    """Compare reverse-mode gradients with central differences.

    ``f`` maps a leaf node (or a dict of leaf nodes, when ``point`` is a dict
    of arrays) to a scalar node.  Returns the maximum over coordinates of
    ``|analytic - numeric| / max(1, |analytic|)``.
    """
    if step <= 0:
        raise ContractError(f"finite-difference step must be positive, got {step}")
    single = not isinstance(point, dict)
    values = {"x": point} if single else point
    values = {k: np.array(v, dtype=np.float64) for k, v in values.items()}

    def evaluate():
        tape = Tape()
        leaves = {k: tape.leaf(v, k) for k, v in values.items()}
        out = f(leaves["x"] if single else leaves)
        if not isinstance(out, Node):
            out = tape.constant(out)
        if out.value.size != 1:
            raise ContractError(f"grad_check needs a scalar function, got shape {out.value.shape}")
        if not np.isfinite(out.value).all():
            raise NumericError("function evaluation is not finite")
        return tape, out

    tape, out = evaluate()
    grads = backward(tape, out)
    worst = 0.0
    for key, arr in values.items():
        flat = arr.reshape(-1)
        analytic = grads[key].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            f_plus = float(evaluate()[1].value)
            flat[i] = orig - step
            f_minus = float(evaluate()[1].value)
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * step)
            err = abs(analytic[i] - numeric) / max(1.0, abs(analytic[i]))
            worst = max(worst, err)
    return worst
