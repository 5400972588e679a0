"""Dense tensors with reverse-mode differentiation, Adam, and a straight-through
Bernoulli sampler.

Every op computes its value eagerly with numpy and, when any input requires a
gradient, records a node holding its parents and a vector-Jacobian closure.
Nodes are also appended to the innermost active :class:`Tape`, whose record is
topologically ordered by construction.

    >>> x = Tensor([3.0], requires_grad=True)
    >>> grads = backward((x * x).sum())
    >>> float(grads[x][0])
    6.0
"""
from __future__ import annotations

import threading
from dataclasses import dataclass, field

import numpy as np

DEFAULT_DTYPE = np.float64
SMOOTH_ABS_EPS = 1e-8


class ShapeError(ValueError):
    pass


class DomainError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


_state = threading.local()


def _tapes():
    if not hasattr(_state, "stack"):
        _state.stack = []
    return _state.stack


class Tape:
    """Ordered record of differentiable ops created while the tape is active.

    Usage::

        with Tape() as tape:
            loss = model(x)
        grads = backward(loss, tape=tape)
    """

    def __init__(self):
        self.nodes: list[Tensor] = []

    def __enter__(self):
        _tapes().append(self)
        return self

    def __exit__(self, *exc):
        _tapes().pop()
        return False

    def __len__(self):
        return len(self.nodes)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjp", "op", "__weakref__")

    def __init__(self, data, requires_grad=False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype or (data.dtype if isinstance(data, np.ndarray)
                                               and data.dtype.kind == "f" else DEFAULT_DTYPE))
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._vjp = None
        self.op = "leaf"

    # -- introspection -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{rg})"

    def __len__(self):
        return len(self.data)

    __array_priority__ = 100

    # -- operators -----------------------------------------------------
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

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(value, parents, vjp, op):
    if not np.all(np.isfinite(value)):
        raise NonFiniteError(f"{op}: produced non-finite values")
    out = Tensor(value)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._vjp = vjp
        out.op = op
        stack = _tapes()
        if stack:
            stack[-1].nodes.append(out)
    else:
        out.op = op
    return out


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    ndiff = grad.ndim - len(shape)
    if ndiff > 0:
        grad = grad.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# -- elementwise binary ------------------------------------------------
def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)
    return _node(a.data + b.data, (a, b), vjp, "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)
    return _node(a.data - b.data, (a, b), vjp, "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)

    def vjp(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)
    return _node(a.data * b.data, (a, b), vjp, "mul")


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a, b)
    if np.any(b.data == 0):
        raise DomainError("div: division by zero")
    inv = 1.0 / b.data

    def vjp(g):
        return (_unbroadcast(g * inv, a.shape),
                _unbroadcast(-g * a.data * inv * inv, b.shape))
    return _node(a.data * inv, (a, b), vjp, "div")


def neg(a):
    a = as_tensor(a)
    return _node(-a.data, (a,), lambda g: (-g,), "neg")


def square(a):
    a = as_tensor(a)
    return _node(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,), "square")


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        value = a.data @ b.data
    except ValueError:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}") from None

    def vjp(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)
    return _node(value, (a, b), vjp, "matmul")


# -- elementwise unary -------------------------------------------------
def sigmoid(a):
    a = as_tensor(a)
    # split by sign so exp never overflows
    x = a.data
    z = np.exp(-np.abs(x))
    s = np.where(x >= 0, 1.0 / (1.0 + z), z / (1.0 + z))
    return _node(s, (a,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def tanh(a):
    a = as_tensor(a)
    t = np.tanh(a.data)
    return _node(t, (a,), lambda g: (g * (1.0 - t * t),), "tanh")


def relu(a):
    a = as_tensor(a)
    pos = a.data > 0
    return _node(np.where(pos, a.data, 0.0), (a,), lambda g: (g * pos,), "relu")


def elu(a, alpha=1.0):
    a = as_tensor(a)
    pos = a.data > 0
    em = alpha * np.expm1(np.minimum(a.data, 0.0))
    value = np.where(pos, a.data, em)
    return _node(value, (a,), lambda g: (g * np.where(pos, 1.0, em + alpha),), "elu")


def exp(a):
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        e = np.exp(a.data)
    return _node(e, (a,), lambda g: (g * e,), "exp")


def log(a):
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise DomainError(f"log: non-positive input (min {a.data.min():.3g})")
    return _node(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def sqrt(a):
    a = as_tensor(a)
    if np.any(a.data < 0):
        raise DomainError(f"sqrt: negative input (min {a.data.min():.3g})")
    s = np.sqrt(a.data)
    if np.any(s == 0) and a.requires_grad:
        raise DomainError("sqrt: zero input has an unbounded derivative; use smooth_abs or a floor")
    return _node(s, (a,), lambda g: (g * 0.5 / s,), "sqrt")


def tabs(a):
    a = as_tensor(a)
    return _node(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),), "abs")


def smooth_abs(a, eps=SMOOTH_ABS_EPS):
    """sqrt(x**2 + eps); differentiable at 0."""
    a = as_tensor(a)
    s = np.sqrt(a.data * a.data + eps)
    return _node(s, (a,), lambda g: (g * a.data / s,), "smooth_abs")


def clip(a, lo=None, hi=None):
    """Clamp values; the gradient is zero where the clamp is active."""
    a = as_tensor(a)
    value = np.clip(a.data, lo, hi)
    inside = value == a.data
    return _node(value, (a,), lambda g: (g * inside,), "clip")


# -- reductions & normalisers ------------------------------------------
def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    value = a.data.sum(axis=axes, keepdims=keepdims)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)
    return _node(value, (a,), vjp, "sum")


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    n = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    value = a.data.mean(axis=axes, keepdims=keepdims) if axes else a.data.copy()

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / n, a.shape).copy(),)
    return _node(value, (a,), vjp, "mean")


def tmax(a, axis=-1):
    """Maximum along one axis; ties send the gradient to the first maximiser."""
    a = as_tensor(a)
    axis = axis % a.ndim
    idx = np.expand_dims(np.argmax(a.data, axis=axis), axis)
    value = np.take_along_axis(a.data, idx, axis=axis).squeeze(axis)

    def vjp(g):
        out = np.zeros_like(a.data)
        np.put_along_axis(out, idx, np.expand_dims(g, axis), axis=axis)
        return (out,)
    return _node(value, (a,), vjp, "max")


def softmax(a):
    """Softmax over the last axis."""
    a = as_tensor(a)
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)
    return _node(s, (a,), vjp, "softmax")


def log_softmax(a):
    a = as_tensor(a)
    z = a.data - a.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    value = z - lse
    s = np.exp(value)

    def vjp(g):
        return (g - s * g.sum(axis=-1, keepdims=True),)
    return _node(value, (a,), vjp, "log_softmax")


# -- shape manipulation ------------------------------------------------
def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    nd = tensors[0].ndim
    ax = axis % nd
    for t in tensors[1:]:
        if t.ndim != nd or any(t.shape[i] != tensors[0].shape[i] for i in range(nd) if i != ax):
            raise ShapeError(f"concat: incompatible shapes {tensors[0].shape} and {t.shape}")
    value = np.concatenate([t.data for t in tensors], axis=ax)
    bounds = np.cumsum([0] + [t.shape[ax] for t in tensors])

    def vjp(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax)
                     for i in range(len(tensors)))
    return _node(value, tuple(tensors), vjp, "concat")


def getitem(a, idx):
    a = as_tensor(a)
    value = a.data[idx]

    parts = idx if isinstance(idx, tuple) else (idx,)
    basic = all(isinstance(i, (slice, int, type(Ellipsis))) or i is None for i in parts)

    def vjp(g):
        out = np.zeros_like(a.data)
        if basic:
            out[idx] += g
        else:
            np.add.at(out, idx, g)
        return (out,)
    return _node(np.array(value, copy=True), (a,), vjp, "getitem")


def reshape(a, shape):
    a = as_tensor(a)
    try:
        value = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} into {tuple(shape)}") from None
    return _node(value, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def swapaxes(a, ax1=-1, ax2=-2):
    a = as_tensor(a)
    return _node(np.swapaxes(a.data, ax1, ax2).copy(), (a,),
                 lambda g: (np.swapaxes(g, ax1, ax2),), "swapaxes")


def straight_through(soft, hard):
    """Forward ``hard``; backward passes the gradient to ``soft`` unchanged."""
    soft = as_tensor(soft)
    hard = np.asarray(hard, dtype=soft.dtype)
    if hard.shape != soft.shape:
        raise ShapeError(f"straight_through: shapes {soft.shape} and {hard.shape}")
    return _node(hard.copy(), (soft,), lambda g: (g,), "ste")


def sample_bernoulli_ste(probs, rng=None, u=None):
    """Draw M[i] = 1 iff u[i] < probs[i], with an identity backward pass.

    Either a numpy Generator ``rng`` or pre-drawn uniforms ``u`` must be given.
    """
    probs = as_tensor(probs)
    p = probs.data
    if np.any(p < -1e-9) or np.any(p > 1 + 1e-9):
        raise DomainError("sample_bernoulli_ste: probabilities outside [0, 1]")
    if u is None:
        if rng is None:
            raise ValueError("sample_bernoulli_ste needs rng or u")
        u = rng.random(p.shape)
    u = np.asarray(u)
    if u.shape != p.shape:
        raise ShapeError(f"sample_bernoulli_ste: uniforms {u.shape} vs probs {p.shape}")
    return straight_through(probs, (u < p).astype(p.dtype))


# -- differentiation ---------------------------------------------------
def _topo_from(output):
    order, seen = [], set()
    stack = [(output, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(output, tape=None, wrt=None, accumulate=False):
    """Reverse-mode pass from a scalar ``output``.

    Returns a dict mapping every gradient-requiring leaf reached (plus every
    tensor in ``wrt``) to its gradient array; tensors off every path get zeros.
    When ``accumulate`` is set the gradients are also added into ``leaf.grad``.
    """
    output = as_tensor(output)
    if output.size != 1:
        raise ShapeError(f"backward: output must be scalar, got shape {output.shape}")
    if tape is not None:
        nodes = tape.nodes
        if output._vjp is not None and not any(n is output for n in nodes):
            raise ValueError("backward: output was not recorded on the given tape")
    else:
        nodes = _topo_from(output) if output.requires_grad else []

    grads = {id(output): np.ones_like(output.data)}
    leaves = {}
    for node in reversed(nodes):
        if node._vjp is None:
            leaves.setdefault(id(node), node)
            continue
        g = grads.pop(id(node), None)
        if g is None:
            # recorded on the tape but not upstream of output
            for p in node._parents:
                if p.requires_grad and p._vjp is None:
                    leaves.setdefault(id(p), p)
            continue
        for p, pg in zip(node._parents, node._vjp(g)):
            if not p.requires_grad:
                continue
            if p._vjp is None:
                leaves.setdefault(id(p), p)
            if id(p) in grads:
                grads[id(p)] = grads[id(p)] + pg
            else:
                grads[id(p)] = pg
    if output._vjp is None and output.requires_grad:
        leaves[id(output)] = output

    result = {}
    for key, leaf in leaves.items():
        result[leaf] = grads.get(key, np.zeros_like(leaf.data))
    for t in wrt or ():
        if t not in result:
            result[t] = grads.get(id(t), np.zeros_like(t.data))
    if accumulate:
        for leaf, g in result.items():
            leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
    return result


# -- optimisation ------------------------------------------------------
@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    @classmethod
    def zeros_like(cls, params, **hyper):
        state = cls(**hyper)
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
        return state


def adam_step(params, grads, state):
    """One AdamW update (decoupled weight decay) applied in place to ``params``."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ShapeError("adam_step: params, grads and state differ in length")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for i, (p, g) in enumerate(zip(params, grads)):
        if g.shape != p.data.shape or state.m[i].shape != p.data.shape:
            raise ShapeError(f"adam_step: param {p.data.shape} vs grad {g.shape}")
        state.m[i] = b1 * state.m[i] + (1 - b1) * g
        state.v[i] = b2 * state.v[i] + (1 - b2) * g * g
        update = (state.m[i] / c1) / (np.sqrt(state.v[i] / c2) + state.eps)
        if state.weight_decay:
            update = update + state.weight_decay * p.data
        p.data = p.data - state.lr * update
    return params, state


class Adam:
    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        self.params = list(params)
        self.state = AdamState.zeros_like(self.params, lr=lr, beta1=betas[0], beta2=betas[1],
                                          eps=eps, weight_decay=weight_decay)

    def step(self, grads):
        """``grads`` is the mapping returned by :func:`backward`."""
        if isinstance(grads, dict):
            grads = [grads.get(p, np.zeros_like(p.data)) for p in self.params]
        adam_step(self.params, list(grads), self.state)
