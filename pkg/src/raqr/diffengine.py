"""Reverse-mode automatic differentiation over float64 numpy arrays.

A :class:`Tensor` wraps an array and remembers the primitive that produced
it. Node ids increase with creation, so creation order is a topological
order of the graph; :meth:`Tensor.backward` walks reachable nodes by
descending id, which makes gradient accumulation order deterministic.

Complex quantities are carried as separate real and imaginary tensors.
Binary elementwise primitives follow numpy broadcasting; gradients are
summed back onto the broadcast operand.
"""
import itertools
import math

import numpy as np

from raqr.errors import ShapeError

_ids = itertools.count()

#: lower clamp on |y| inside complex_phase_apply
PHASE_CLAMP = 1e-12

_GELU_C = math.sqrt(2.0 / math.pi)


class Tensor:
    __slots__ = ("value", "grad", "requires_grad", "node_id", "_parents", "_backward", "op", "name")

    def __init__(self, value, requires_grad=False, name=None, _parents=(), _backward=None, op="leaf"):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self.node_id = next(_ids)
        self._parents = _parents
        self._backward = _backward
        self.op = op
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __repr__(self):
        return f"Tensor(op={self.op}, shape={self.shape})"

    def zero_grad(self):
        self.grad = None

    def backward(self):
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every leaf that requires it."""
        if self.value.size != 1:
            raise ShapeError(f"backward: loss must be a scalar, got shape {self.shape}")
        nodes = _reachable(self)
        grads = {self.node_id: np.ones_like(self.value)}
        for node in nodes:
            g = grads.pop(node.node_id, None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not _needs_grad(parent):
                    continue
                pg = _unbroadcast(pg, parent.shape)
                prev = grads.get(parent.node_id)
                grads[parent.node_id] = pg if prev is None else prev + pg

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return slice_(self, idx)

    @property
    def T(self):
        return transpose(self)


def _reachable(root):
    seen = {root.node_id: root}
    stack = [root]
    while stack:
        node = stack.pop()
        for p in node._parents:
            if p.node_id not in seen and _needs_grad(p):
                seen[p.node_id] = p
                stack.append(p)
    return sorted(seen.values(), key=lambda n: n.node_id, reverse=True)


def _needs_grad(t):
    return t.requires_grad or t._backward is not None


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def tensor(value, requires_grad=False, name=None):
    return Tensor(value, requires_grad=requires_grad, name=name)


def constant(value):
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def _node(value, parents, backward, op):
    if not any(_needs_grad(p) for p in parents):
        return Tensor(value, op=op)
    return Tensor(value, _parents=parents, _backward=backward, op=op)


def _broadcast_check(a, b, op):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------- elementwise

def add(a, b):
    a, b = constant(a), constant(b)
    _broadcast_check(a, b, "add")
    return _node(a.value + b.value, (a, b), lambda g: (g, g), "add")


def sub(a, b):
    a, b = constant(a), constant(b)
    _broadcast_check(a, b, "sub")
    return _node(a.value - b.value, (a, b), lambda g: (g, -g), "sub")


def neg(a):
    return _node(-a.value, (a,), lambda g: (-g,), "neg")


def mul(a, b):
    """Hadamard product."""
    a, b = constant(a), constant(b)
    _broadcast_check(a, b, "mul")
    av, bv = a.value, b.value
    return _node(av * bv, (a, b), lambda g: (g * bv, g * av), "mul")


hadamard = mul


def div(a, b):
    a, b = constant(a), constant(b)
    _broadcast_check(a, b, "div")
    av, bv = a.value, b.value
    out = av / bv
    return _node(out, (a, b), lambda g: (g / bv, -g * out / bv), "div")


def square(a):
    av = a.value
    return _node(av * av, (a,), lambda g: (2.0 * av * g,), "square")


def exp(a):
    out = np.exp(a.value)
    return _node(out, (a,), lambda g: (g * out,), "exp")


def log1p(a):
    av = a.value
    return _node(np.log1p(av), (a,), lambda g: (g / (1.0 + av),), "log1p")


def sigmoid(a):
    out = _sigmoid(a.value)
    return _node(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def _sigmoid(x):
    # split by sign so neither branch overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def relu(a):
    av = a.value
    return _node(np.maximum(av, 0.0), (a,), lambda g: (g * (av > 0),), "relu")


def gelu(a):
    """GELU, tanh approximation."""
    x = a.value
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def backward(g):
        d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * d,)

    return _node(out, (a,), backward, "gelu")


# ---------------------------------------------------------------- reductions

def sum_(a, axis=None, keepdims=False):
    av = a.value
    out = av.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, av.shape).copy(),)

    return _node(out, (a,), backward, "sum")


def mean(a, axis=None, keepdims=False):
    av = a.value
    n = av.size if axis is None else np.prod([av.shape[i] for i in np.atleast_1d(axis)])
    out = av.mean(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, av.shape).copy(),)

    return _node(out, (a,), backward, "mean")


# ---------------------------------------------------------------- structure

def matmul(a, b):
    """Batched matrix product over the last two axes (both operands >= 2-D)."""
    a, b = constant(a), constant(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    av, bv = a.value, b.value
    out = av @ bv

    def backward(g):
        return (g @ np.swapaxes(bv, -1, -2), np.swapaxes(av, -1, -2) @ g)

    return _node(out, (a, b), backward, "matmul")


def transpose(a, axes=None):
    """Permute axes; the default swaps the last two."""
    if axes is None:
        axes = list(range(a.ndim))
        if a.ndim < 2:
            raise ShapeError(f"transpose: need >= 2 dims, got {a.shape}")
        axes[-1], axes[-2] = axes[-2], axes[-1]
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"transpose: bad permutation {axes} for shape {a.shape}")
    inv = tuple(np.argsort(axes))
    return _node(np.transpose(a.value, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def reshape(a, shape):
    old = a.shape
    try:
        out = a.value.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {old} to {shape}") from None
    return _node(out, (a,), lambda g: (g.reshape(old),), "reshape")


def concat(tensors, axis=-1):
    tensors = [constant(t) for t in tensors]
    try:
        out = np.concatenate([t.value for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in tensors]}") from None
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _node(out, tuple(tensors), backward, "concat")


def slice_(a, idx):
    """Basic slicing (ints, slices, Ellipsis); no fancy indexing."""
    items = idx if isinstance(idx, tuple) else (idx,)
    for it in items:
        if not (it is Ellipsis or it is None or isinstance(it, (int, np.integer, slice))):
            raise ShapeError(f"slice: unsupported index {it!r}")
    shape = a.shape

    def backward(g):
        full = np.zeros(shape)
        full[idx] = g
        return (full,)

    return _node(a.value[idx], (a,), backward, "slice")


# ---------------------------------------------------------------- row ops

def softmax(a, axis=-1):
    x = a.value
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _node(out, (a,), backward, "softmax")


def layer_norm(a, eps=1e-5):
    """Normalize over the last axis to zero mean and unit variance (no affine)."""
    x = a.value
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv

    def backward(g):
        gm = g.mean(axis=-1, keepdims=True)
        gx = (g * xhat).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - xhat * gx),)

    return _node(xhat, (a,), backward, "layer_norm")


# ---------------------------------------------------------------- complex pairs

def complex_magnitude(re, im):
    """``|re + j im|``; the subgradient at the origin is 0."""
    re, im = constant(re), constant(im)
    if re.shape != im.shape:
        raise ShapeError(f"complex_magnitude: {re.shape} != {im.shape}")
    r, i = re.value, im.value
    mag = np.hypot(r, i)

    def backward(g):
        safe = np.where(mag > 0, mag, 1.0)
        scale = np.where(mag > 0, g / safe, 0.0)
        return (scale * r, scale * i)

    return _node(mag, (re, im), backward, "complex_magnitude")


def complex_phase_apply(z, re, im):
    """``z * y / |y|`` for ``y = re + j im``, with ``|y|`` clamped at
    ``PHASE_CLAMP``. Returns the (real, imaginary) pair."""
    z, re, im = constant(z), constant(re), constant(im)
    if re.shape != im.shape:
        raise ShapeError(f"complex_phase_apply: {re.shape} != {im.shape}")
    _broadcast_check(z, re, "complex_phase_apply")
    zv, r, i = z.value, re.value, im.value
    mag = np.hypot(r, i)
    clamped = mag < PHASE_CLAMP
    den = np.where(clamped, PHASE_CLAMP, mag)
    ur, ui = r / den, i / den
    out_r = _node(zv * ur, (z, re, im), None, "phase_apply_re")
    out_i = _node(zv * ui, (z, re, im), None, "phase_apply_im")
    den3 = den ** 3

    def jac(gr, gi):
        gz = gr * ur + gi * ui
        cross = zv * (gr * i - gi * r) / den3
        g_re = np.where(clamped, zv * gr / den, cross * i)
        g_im = np.where(clamped, zv * gi / den, -cross * r)
        return gz, g_re, g_im

    zero = np.zeros_like(r)
    if out_r._parents:
        out_r._backward = lambda g: jac(g, zero)
        out_i._backward = lambda g: jac(zero, g)
    return out_r, out_i


# ---------------------------------------------------------------- optimizer

def clip_grad_norm(params, max_norm):
    """Scale gradients in place so their global L2 norm is at most ``max_norm``.

    Returns the norm before clipping.
    """
    total = math.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in params if p.grad is not None))
    if total > max_norm and total > 0:
        scale = max_norm / total
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return total


def adam_step(params, grads, state, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One Adam update with bias correction.

    ``params`` and ``grads`` are sequences of arrays; ``state`` is a dict with
    keys ``t``, ``m``, ``v`` (created on first use). Returns
    ``(new_params, new_state)`` without mutating the inputs.
    """
    t = state.get("t", 0) + 1
    ms = state.get("m") or [np.zeros_like(p) for p in params]
    vs = state.get("v") or [np.zeros_like(p) for p in params]
    if not (len(params) == len(grads) == len(ms) == len(vs)):
        raise ShapeError("adam_step: params, grads and state lengths differ")
    new_p, new_m, new_v = [], [], []
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for p, g, m, v in zip(params, grads, ms, vs):
        if p.shape != g.shape or p.shape != m.shape:
            raise ShapeError(f"adam_step: shape mismatch {p.shape} / {g.shape} / {m.shape}")
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        p = p - lr * (m / c1) / (np.sqrt(v / c2) + eps)
        new_p.append(p)
        new_m.append(m)
        new_v.append(v)
    return new_p, {"t": t, "m": new_m, "v": new_v}


class Adam:
    """Stateful wrapper around :func:`adam_step` for a list of leaf tensors."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.state = {}

    def step(self):
        grads = [p.grad if p.grad is not None else np.zeros_like(p.value) for p in self.params]
        values, self.state = adam_step(
            [p.value for p in self.params], grads, self.state,
            self.lr, self.beta1, self.beta2, self.eps,
        )
        for p, v in zip(self.params, values):
            p.value = v

    def zero_grad(self):
        for p in self.params:
            p.grad = None
