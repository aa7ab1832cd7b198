"""Minimal reverse-mode tape over numpy arrays.

Single precision by default (float64 instances are used for gradient
checks); loss-style reductions accumulate in double precision. Every op
output is checked for NaN/Inf and raises instead of propagating. Ops record
onto the innermost active :class:`Tape`; with no tape active they are plain
numpy compute, which is how inference paths run.
"""

from __future__ import annotations

import math

import numpy as np

from ..errors import DomainError, NonFiniteError, ShapeError

__all__ = [
    "Tensor", "Tape", "backward", "constant", "parameter",
    "add", "sub", "mul", "neg", "cast", "div", "matmul", "reshape", "transpose",
    "getitem", "concat", "tsum", "tmean", "texp", "tlog", "tsqrt", "tabs",
    "tanh", "gelu", "softmax", "log_softmax", "layer_norm", "embedding",
    "take_tokens", "put_tokens", "take_classes", "mse",
]

_TAPE_STACK: list["Tape"] = []

MASK_NEG = -1.0e9  # additive attention mask; finite, underflows softmax to 0


class Tensor:
    """A dense array plus (optionally) a place to accumulate its gradient."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data)
        if self.data.dtype not in (np.float32, np.float64):
            self.data = self.data.astype(np.float32)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple = ()
        self._backward_fn = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def _tracked(self) -> bool:
        return self.requires_grad or self._backward_fn is not None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)


class Tape:
    """Op graph recorder for one forward pass.

    Node creation order is a topological order, so ``backward`` walks the
    list once in reverse and each node's closure fires exactly once.
    """

    def __init__(self):
        self._nodes: list[Tensor] = []

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc):
        _TAPE_STACK.pop()
        return False

    def backward(self, loss: Tensor) -> None:
        if loss.data.size != 1:
            raise DomainError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss._backward_fn is None and not loss.requires_grad:
            raise DomainError("loss was not produced under this tape")
        loss.grad = np.ones_like(loss.data)
        for node in reversed(self._nodes):
            if node.grad is None or node._backward_fn is None:
                continue
            node._backward_fn(node.grad)
        # free intermediate grads/closures; parameter grads persist
        for node in self._nodes:
            node._backward_fn = None
            node._parents = ()
            if not node.requires_grad:
                node.grad = None
        self._nodes.clear()


def backward(tape: Tape, loss: Tensor) -> None:
    tape.backward(loss)


class no_grad:
    """Suspend all active tapes; ops inside are plain numpy compute."""

    def __enter__(self):
        self._saved = _TAPE_STACK[:]
        _TAPE_STACK.clear()
        return self

    def __exit__(self, *exc):
        _TAPE_STACK.extend(self._saved)
        return False


def constant(data) -> Tensor:
    return Tensor(data)


def parameter(data) -> Tensor:
    return Tensor(data, requires_grad=True)


def _as_tensor(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def _accum(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = g.astype(t.data.dtype, copy=True)
    else:
        t.grad = t.grad + g.astype(t.data.dtype, copy=False)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn, op: str) -> Tensor:
    if not np.isfinite(data).all():
        raise NonFiniteError(f"op '{op}' produced non-finite values")
    out = Tensor(data)
    if _TAPE_STACK and any(p._tracked() for p in parents):
        tape = _TAPE_STACK[-1]
        out._parents = parents
        out._backward_fn = backward_fn
        tape._nodes.append(out)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum gradient over axes that were broadcast in the forward op."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# arithmetic


def add(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a)
    out = a.data + b.data

    def back(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(g, b.data.shape))

    return _make(out, (a, b), back, "add")


def sub(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a)
    out = a.data - b.data

    def back(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(-g, b.data.shape))

    return _make(out, (a, b), back, "sub")


def mul(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a)
    out = a.data * b.data
    a_val, b_val = a.data, b.data

    def back(g):
        _accum(a, _unbroadcast(g * b_val, a_val.shape))
        _accum(b, _unbroadcast(g * a_val, b_val.shape))

    return _make(out, (a, b), back, "mul")


def neg(a: Tensor) -> Tensor:
    def back(g):
        _accum(a, -g)

    return _make(-a.data, (a,), back, "neg")


def cast(a: Tensor, dtype) -> Tensor:
    """Dtype change; gradient casts back on the way down."""
    def back(g):
        _accum(a, g.astype(a.data.dtype))

    return _make(a.data.astype(dtype), (a,), back, "cast")


def div(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a)
    out = a.data / b.data
    a_val, b_val = a.data, b.data

    def back(g):
        _accum(a, _unbroadcast(g / b_val, a_val.shape))
        _accum(b, _unbroadcast(-g * a_val / (b_val * b_val), b_val.shape))

    return _make(out, (a, b), back, "div")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {a.data.shape} @ {b.data.shape}")
    out = np.matmul(a.data, b.data)
    a_val, b_val = a.data, b.data

    def back(g):
        ga = np.matmul(g, np.swapaxes(b_val, -1, -2))
        gb = np.matmul(np.swapaxes(a_val, -1, -2), g)
        _accum(a, _unbroadcast(ga, a_val.shape))
        _accum(b, _unbroadcast(gb, b_val.shape))

    return _make(out, (a, b), back, "matmul")


# ---------------------------------------------------------------------------
# shape


def reshape(a: Tensor, shape) -> Tensor:
    old = a.data.shape

    def back(g):
        _accum(a, g.reshape(old))

    return _make(a.data.reshape(shape), (a,), back, "reshape")


def transpose(a: Tensor, axes) -> Tensor:
    inverse = np.argsort(axes)

    def back(g):
        _accum(a, g.transpose(inverse))

    return _make(a.data.transpose(axes), (a,), back, "transpose")


def getitem(a: Tensor, idx) -> Tensor:
    def back(g):
        gx = np.zeros_like(a.data)
        gx[idx] = g
        _accum(a, gx)

    return _make(a.data[idx], (a,), back, "getitem")


def concat(tensors: list[Tensor], axis: int = -1) -> Tensor:
    sizes = [t.data.shape[axis] for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    splits = np.cumsum(sizes)[:-1]

    def back(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            _accum(t, piece)

    return _make(out, tuple(tensors), back, "concat")


# ---------------------------------------------------------------------------
# reductions (double-precision accumulation)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims, dtype=np.float64).astype(a.dtype)

    def back(g):
        gg = g
        if axis is not None and not keepdims:
            gg = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(gg, a.data.shape))

    return _make(out, (a,), back, "sum")


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.mean(axis=axis, keepdims=keepdims, dtype=np.float64).astype(a.dtype)
    count = a.data.size if axis is None else np.prod(
        [a.data.shape[ax] for ax in (axis if isinstance(axis, tuple) else (axis,))])

    def back(g):
        gg = g
        if axis is not None and not keepdims:
            gg = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(gg, a.data.shape) / count)

    return _make(out, (a,), back, "mean")


# ---------------------------------------------------------------------------
# elementwise nonlinear


def texp(a: Tensor) -> Tensor:
    out = np.exp(a.data)

    def back(g):
        _accum(a, g * out)

    return _make(out, (a,), back, "exp")


def tlog(a: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    val = a.data

    def back(g):
        _accum(a, g / val)

    return _make(out, (a,), back, "log")


def tsqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)

    def back(g):
        _accum(a, g * 0.5 / out)

    return _make(out, (a,), back, "sqrt")


def tabs(a: Tensor) -> Tensor:
    val = a.data

    def back(g):
        _accum(a, g * np.sign(val))

    return _make(np.abs(val), (a,), back, "abs")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)

    def back(g):
        _accum(a, g * (1.0 - out * out))

    return _make(out, (a,), back, "tanh")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    th = np.tanh(inner)
    out = 0.5 * x * (1.0 + th)

    def back(g):
        sech2 = 1.0 - th * th
        local = 0.5 * (1.0 + th) + 0.5 * x * sech2 * _GELU_C * (1.0 + 3 * 0.044715 * x ** 2)
        _accum(a, g * local)

    return _make(out, (a,), back, "gelu")


def softmax(a: Tensor) -> Tensor:
    """Numerically stable softmax over the last axis."""
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        _accum(a, out * (g - dot))

    return _make(out, (a,), back, "softmax")


def log_softmax(a: Tensor) -> Tensor:
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse

    def back(g):
        soft = np.exp(out)
        _accum(a, g - soft * g.sum(axis=-1, keepdims=True))

    return _make(out, (a,), back, "log_softmax")


def layer_norm(a: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalization over the last axis with learned scale/shift."""
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv
    out = gamma.data * xhat + beta.data
    n = x.shape[-1]

    def back(g):
        dxhat = g * gamma.data
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        _accum(a, dx)
        reduce_axes = tuple(range(g.ndim - 1))
        _accum(gamma, (g * xhat).sum(axis=reduce_axes))
        _accum(beta, g.sum(axis=reduce_axes))

    return _make(out, (a, gamma, beta), back, "layer_norm")


# ---------------------------------------------------------------------------
# indexing ops


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids)
    out = table.data[ids]

    def back(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids, g)
        _accum(table, gt)

    return _make(out, (table,), back, "embedding")


def take_tokens(x: Tensor, idx: np.ndarray) -> Tensor:
    """Batched row gather: x (B, N, D), idx (B, K) -> (B, K, D)."""
    idx = np.asarray(idx)
    b = np.arange(x.data.shape[0])[:, None]
    out = x.data[b, idx]

    def back(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, (b, idx), g)
        _accum(x, gx)

    return _make(out, (x,), back, "take_tokens")


def put_tokens(base: Tensor, idx: np.ndarray, values: Tensor) -> Tensor:
    """Batched row scatter: out = base with out[b, idx[b]] = values[b]."""
    idx = np.asarray(idx)
    if base.data.shape[0] != values.data.shape[0] or idx.shape[0] != base.data.shape[0]:
        raise ShapeError(f"put_tokens batch mismatch: base {base.data.shape}, "
                         f"idx {idx.shape}, values {values.data.shape}")
    b = np.arange(base.data.shape[0])[:, None]
    out = base.data.copy()
    out[b, idx] = values.data

    def back(g):
        gb = g.copy()
        gb[b, idx] = 0.0
        _accum(base, gb)
        _accum(values, g[b, idx])

    return _make(out, (base, values), back, "put_tokens")


def take_classes(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Gather logits[i, labels[i]] over a 2-D (rows, classes) tensor."""
    labels = np.asarray(labels)
    rows = np.arange(logits.data.shape[0])
    out = logits.data[rows, labels]

    def back(g):
        gx = np.zeros_like(logits.data)
        gx[rows, labels] = g
        _accum(logits, gx)

    return _make(out, (logits,), back, "take_classes")


# ---------------------------------------------------------------------------
# losses


def mse(pred: Tensor, target: Tensor) -> Tensor:
    if pred.data.shape != target.data.shape:
        raise ShapeError(f"mse shapes differ: {pred.data.shape} vs {target.data.shape}")
    diff = sub(pred, target)
    return tmean(mul(diff, diff))
