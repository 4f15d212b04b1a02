"""Small reverse-mode autodiff over dense numpy arrays.

Graphs are recorded define-by-run: every op creates a :class:`Tensor` that
remembers its parents and a closure producing parent gradients. Node ids come
from a global counter, so reverse creation order is a valid (and
deterministic) topological order for the backward sweep.
"""
from __future__ import annotations

import itertools
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64
STE_CLIP = 1.0

_ids = itertools.count()


class NonFiniteError(FloatingPointError):
    """Raised when an op produces NaN/Inf."""


def _check(value: np.ndarray, op: str) -> np.ndarray:
    # one reduction catches NaN/Inf; an overflowing sum falls back to the full test
    if not np.isfinite(np.add.reduce(value, axis=None)) and not np.isfinite(value).all():
        raise NonFiniteError(f"non-finite value produced by op '{op}'")
    return value


class Tensor:
    __slots__ = ("value", "grad", "parents", "backward_fn", "op", "id", "requires_grad")

    def __init__(self, value, parents: Sequence["Tensor"] = (), backward_fn=None,
                 op: str = "const", requires_grad: bool = False):
        self.value = np.asarray(value, dtype=DTYPE)
        self.grad = None
        self.parents = tuple(parents)
        self.backward_fn = backward_fn
        self.op = op
        self.id = next(_ids)
        self.requires_grad = requires_grad

    # -- convenience ---------------------------------------------------
    @property
    def shape(self):
        return self.value.shape

    @property
    def size(self):
        return self.value.size

    def __repr__(self):
        return f"Tensor(op={self.op}, shape={self.shape})"

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
        return mul(self, -1.0)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 else shape)


class Param(Tensor):
    """Trainable leaf with Adam moments."""

    __slots__ = ("adam_m", "adam_v", "step_count", "name")

    def __init__(self, value, name: str = ""):
        super().__init__(np.array(value, dtype=DTYPE), op="param", requires_grad=True)
        self.name = name
        self.grad = np.zeros_like(self.value)
        self.adam_m = np.zeros_like(self.value)
        self.adam_v = np.zeros_like(self.value)
        self.step_count = 0

    def zero_grad(self):
        self.grad = np.zeros_like(self.value)

    def reset_optimizer(self):
        self.adam_m = np.zeros_like(self.value)
        self.adam_v = np.zeros_like(self.value)
        self.step_count = 0

    def copy(self) -> "Param":
        p = Param(self.value.copy(), self.name)
        return p


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def make_op(value: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    """Wrap ``value`` as an op output; parents not needing grads are pruned."""
    _check(value, op)
    needs = any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(value, op=op)
    return Tensor(value, parents, backward_fn, op=op, requires_grad=True)


# -- elementwise arithmetic ----------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return make_op(a.value + b.value, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return make_op(a.value - b.value, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.value, b.value
    return make_op(av * bv, (a, b),
                   lambda g: (_unbroadcast(g * bv, a.shape), _unbroadcast(g * av, b.shape)), "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.value, b.value
    out = av / bv
    return make_op(out, (a, b),
                   lambda g: (_unbroadcast(g / bv, a.shape),
                              _unbroadcast(-g * out / bv, b.shape)), "div")


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    av = a.value
    return make_op(av ** exponent, (a,),
                   lambda g: (g * exponent * av ** (exponent - 1),), "pow")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.value)
    return make_op(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    av = a.value
    return make_op(np.log(av), (a,), lambda g: (g / av,), "log")


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.value)
    return make_op(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = _sigmoid(a.value)
    return make_op(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.value)
    return make_op(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def softplus(a) -> Tensor:
    a = as_tensor(a)
    av = a.value
    out = np.logaddexp(0.0, av)
    return make_op(out, (a,), lambda g: (g * _sigmoid(av),), "softplus")


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.value > 0
    return make_op(a.value * mask, (a,), lambda g: (g * mask,), "relu")


def absolute(a) -> Tensor:
    a = as_tensor(a)
    s = np.sign(a.value)
    return make_op(np.abs(a.value), (a,), lambda g: (g * s,), "abs")


# -- linear algebra / reductions ------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.value, b.value
    return make_op(av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g), "matmul")


def _einsum(spec: str, *arrays) -> np.ndarray:
    # unoptimized einsum is a dense loop nest; three-way products need a contraction order
    return np.einsum(spec, *arrays, optimize=len(arrays) > 2)


def einsum(spec: str, *operands) -> Tensor:
    """einsum without repeated or operand-private summed indices."""
    ops = [as_tensor(o) for o in operands]
    ins, out = spec.replace(" ", "").split("->")
    ins = ins.split(",")
    vals = [o.value for o in ops]
    value = _einsum(spec, *vals)

    def backward(g):
        grads = []
        for k in range(len(ops)):
            if not ops[k].requires_grad:
                grads.append(None)
                continue
            others = [ins[j] for j in range(len(ops)) if j != k]
            sub_spec = ",".join([out] + others) + "->" + ins[k]
            grads.append(_einsum(sub_spec, g, *[vals[j] for j in range(len(ops)) if j != k]))
        return tuple(grads)

    return make_op(value, ops, backward, "einsum")


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return make_op(np.sum(a.value, axis=axis, keepdims=keepdims), (a,), backward, "sum")


def tmean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    n = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / n)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return make_op(a.value.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    inv = None if axes is None else np.argsort(axes)
    return make_op(np.transpose(a.value, axes), (a,),
                   lambda g: (np.transpose(g, inv),), "transpose")


def take(a, index) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    def backward(g):
        out = np.zeros(shape, dtype=DTYPE)
        np.add.at(out, index, g)
        return (out,)

    return make_op(a.value[index], (a,), backward, "take")


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in ts]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis)
                     for i in range(len(ts)))

    return make_op(np.concatenate([t.value for t in ts], axis=axis), ts, backward, "concat")


def stack(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    shape = np.broadcast_shapes(*[t.shape for t in ts])
    value = np.stack([np.broadcast_to(t.value, shape) for t in ts], axis=axis)

    def backward(g):
        parts = np.moveaxis(g, axis, 0)
        return tuple(_unbroadcast(parts[i], ts[i].shape) for i in range(len(ts)))

    return make_op(value, ts, backward, "stack")


def normalize(a, axis: int = -1) -> Tensor:
    """Unit-normalize along ``axis``."""
    a = as_tensor(a)
    return a / sqrt(tsum(a * a, axis=axis, keepdims=True))


# -- straight-through estimators ----------------------------------------

def ste_gate(score, threshold: float) -> Tensor:
    """Hard 0/1 gate on sigmoid(score) > threshold; gradient of the sigmoid."""
    score = as_tensor(score)
    s = _sigmoid(score.value)
    hard = (s > threshold).astype(DTYPE)
    return make_op(hard, (score,), lambda g: (g * s * (1.0 - s),), "ste_gate")


def ste_sign(latent, clip: float = STE_CLIP) -> Tensor:
    """sign() with ties to +1; gradient passes where |latent| <= clip."""
    latent = as_tensor(latent)
    lv = latent.value
    out = np.where(lv >= 0, 1.0, -1.0)
    mask = np.abs(lv) <= clip
    return make_op(out, (latent,), lambda g: (g * mask,), "ste_sign")


def custom(value: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    """Register an externally computed op (e.g. the rasterizer)."""
    return make_op(value, [as_tensor(p) for p in parents], backward_fn, op)


# -- backward / optimizer --------------------------------------------------

def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(param) into every reachable ``Param.grad``."""
    if not isinstance(loss, Tensor):
        raise TypeError("backward needs the output tensor of a forward pass")
    if loss.size != 1:
        raise ValueError(f"loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    nodes: dict[int, Tensor] = {}
    stack_ = [loss]
    while stack_:
        node = stack_.pop()
        if node.id in nodes or not node.requires_grad:
            continue
        nodes[node.id] = node
        stack_.extend(node.parents)
    grads: dict[int, np.ndarray] = {loss.id: np.ones_like(loss.value)}
    for nid in sorted(nodes, reverse=True):
        node = nodes[nid]
        g = grads.pop(nid, None)
        if g is None:
            continue
        if isinstance(node, Param):
            node.grad = node.grad + g
            continue
        if node.backward_fn is None:
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            if pg.shape != parent.shape:
                pg = _unbroadcast(pg, parent.shape)
            if parent.id in grads:
                grads[parent.id] = grads[parent.id] + pg
            else:
                grads[parent.id] = pg


def zero_grad(params: Iterable[Param]) -> None:
    for p in params:
        p.zero_grad()


def adam_step(params: Sequence[Param], lr: float, betas=(0.9, 0.999), eps: float = 1e-8) -> None:
    """Bias-corrected Adam; grads are zeroed afterwards."""
    for p in params:
        if not np.all(np.isfinite(p.grad)):
            raise NonFiniteError(f"non-finite gradient in param '{p.name}'")
    b1, b2 = betas
    for p in params:
        p.step_count += 1
        p.adam_m = b1 * p.adam_m + (1 - b1) * p.grad
        p.adam_v = b2 * p.adam_v + (1 - b2) * p.grad * p.grad
        m_hat = p.adam_m / (1 - b1 ** p.step_count)
        v_hat = p.adam_v / (1 - b2 ** p.step_count)
        p.value = p.value - lr * m_hat / (np.sqrt(v_hat) + eps)
        p.zero_grad()
