"""Differentiable ops over 64-bit tensors.

Broadcasting is limited to scalar-with-tensor; anything else needs an explicit
:func:`broadcast_to` or :func:`reshape`.
"""
from __future__ import annotations

import numpy as np

from .. import kernels
from ..errors import RejectedInput
from .tensor import Tensor, as_tensor, make_node


def _push(t: Tensor, g):
    if t.requires_grad:
        t._accumulate(g)


def _is_scalar(t: Tensor) -> bool:
    return t.data.size == 1


def _check_same(a: Tensor, b: Tensor, op: str):
    if a.shape != b.shape and not (_is_scalar(a) or _is_scalar(b)):
        raise RejectedInput(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _reduce_to(g, t: Tensor):
    if g.shape == t.shape:
        return g
    return np.sum(g).reshape(t.shape)


# elementwise -----------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same(a, b, "add")

    def backward(g):
        _push(a, _reduce_to(g, a))
        _push(b, _reduce_to(g, b))

    return make_node(a.data + b.data, (a, b), "add", backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same(a, b, "sub")

    def backward(g):
        _push(a, _reduce_to(g, a))
        _push(b, -_reduce_to(g, b))

    return make_node(a.data - b.data, (a, b), "sub", backward)


def pointwise_mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same(a, b, "pointwise_mul")

    def backward(g):
        _push(a, _reduce_to(g * b.data, a))
        _push(b, _reduce_to(g * a.data, b))

    return make_node(a.data * b.data, (a, b), "pointwise_mul", backward)


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    return make_node(a.data * c, (a,), "scale", lambda g: _push(a, g * c))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return make_node(np.where(mask, a.data, 0.0), (a,), "relu", lambda g: _push(a, g * mask))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return make_node(out, (a,), "exp", lambda g: _push(a, g * out))


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise RejectedInput("log of non-positive entries")
    return make_node(np.log(a.data), (a,), "log", lambda g: _push(a, g / a.data))


def clip_min(a, floor: float) -> Tensor:
    a = as_tensor(a)
    mask = a.data >= floor
    return make_node(np.maximum(a.data, floor), (a,), "clip_min", lambda g: _push(a, g * mask))


# shape -----------------------------------------------------------------------

def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return make_node(a.data.reshape(shape), (a,), "reshape", lambda g: _push(a, g.reshape(a.shape)))


def transpose(a, axes) -> Tensor:
    a = as_tensor(a)
    inverse = np.argsort(axes)
    return make_node(np.transpose(a.data, axes), (a,), "transpose", lambda g: _push(a, np.transpose(g, inverse)))


def broadcast_to(a, shape) -> Tensor:
    """Repeat ``a`` along new leading axes (``a.shape`` must be a suffix of ``shape``)."""
    a = as_tensor(a)
    shape = tuple(shape)
    lead = len(shape) - a.data.ndim
    if lead < 0 or shape[lead:] != a.shape:
        raise RejectedInput(f"broadcast_to: {a.shape} is not a trailing block of {shape}")
    out = np.broadcast_to(a.data, shape).copy()
    return make_node(out, (a,), "broadcast_to", lambda g: _push(a, g.sum(axis=tuple(range(lead)))))


# reductions ------------------------------------------------------------------

def sum(a, axis=None) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    out = np.sum(a.data, axis=axis)

    def backward(g):
        gg = g if axis is None else np.expand_dims(g, axis)
        _push(a, np.broadcast_to(gg, a.shape))

    return make_node(np.asarray(out, dtype=np.float64), (a,), "sum", backward)


def mean(a, axis=None) -> Tensor:
    a = as_tensor(a)
    count = a.data.size if axis is None else np.prod([a.shape[x] for x in np.atleast_1d(axis)])
    out = np.mean(a.data, axis=axis)

    def backward(g):
        gg = g if axis is None else np.expand_dims(g, axis)
        _push(a, np.broadcast_to(gg, a.shape) / count)

    return make_node(np.asarray(out, dtype=np.float64), (a,), "mean", backward)


# linear algebra ---------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise RejectedInput(f"matmul: incompatible shapes {a.shape} @ {b.shape}")

    def backward(g):
        _push(a, g @ b.data.T)
        _push(b, a.data.T @ g)

    return make_node(a.data @ b.data, (a, b), "matmul", backward)


def linear(x, w, b) -> Tensor:
    """``x @ w.T + b`` for ``x`` (N, in), ``w`` (out, in), ``b`` (out,)."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[1] or b.shape != (w.shape[0],):
        raise RejectedInput(f"linear: incompatible shapes {x.shape}, {w.shape}, {b.shape}")

    def backward(g):
        _push(x, g @ w.data)
        _push(w, g.T @ x.data)
        _push(b, g.sum(axis=0))

    return make_node(x.data @ w.data.T + b.data, (x, w, b), "linear", backward)


def conv2d(x, w, b=None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation, NCHW input, (out, in, kh, kw) kernel, zero padding."""
    x, w = as_tensor(x), as_tensor(w)
    if x.data.ndim != 4 or w.data.ndim != 4 or x.shape[1] != w.shape[1]:
        raise RejectedInput(f"conv2d: incompatible shapes {x.shape} and {w.shape}")
    if stride not in (1, 2):
        raise RejectedInput(f"conv2d: stride must be 1 or 2, got {stride}")
    parents = [x, w]
    if b is not None:
        b = as_tensor(b)
        if b.shape != (w.shape[0],):
            raise RejectedInput(f"conv2d: bias shape {b.shape} does not match {w.shape[0]} filters")
        parents.append(b)
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    p = padding
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    if xp.shape[2] < kh or xp.shape[3] < kw:
        raise RejectedInput("conv2d: kernel larger than padded input")
    cols = kernels.im2col(xp, kh, kw, stride)
    ho, wo = cols.shape[1], cols.shape[2]
    wmat = w.data.reshape(o, -1)
    flat = cols.reshape(-1, wmat.shape[1])
    out = flat @ wmat.T
    if b is not None:
        out += b.data
    out = out.reshape(n, ho, wo, o).transpose(0, 3, 1, 2)

    def backward(g):
        gf = g.transpose(0, 2, 3, 1).reshape(-1, o)
        if w.requires_grad:
            _push(w, (gf.T @ flat).reshape(w.shape))
        if b is not None:
            _push(b, gf.sum(axis=0))
        if x.requires_grad:
            gx = kernels.col2im(gf @ wmat, xp.shape, kh, kw, stride)
            _push(x, gx[:, :, p:p + h, p:p + wd] if p else gx)

    return make_node(np.ascontiguousarray(out), tuple(parents), "conv2d", backward)


# normalization and distributions ---------------------------------------------

def l2_normalize(a, eps: float = 1e-12) -> Tensor:
    """Rows over the last axis divided by ``max(norm, eps)``."""
    a = as_tensor(a)
    norm = np.sqrt(np.sum(a.data * a.data, axis=-1, keepdims=True))
    active = norm > eps
    denom = np.where(active, norm, eps)
    out = a.data / denom

    def backward(g):
        proj = np.sum(g * out, axis=-1, keepdims=True)
        _push(a, np.where(active, (g - out * proj) / denom, g / eps))

    return make_node(out, (a,), "l2_normalize", backward)


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    if not np.all(np.isfinite(a.data)):
        raise RejectedInput("softmax of non-finite input")
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        _push(a, out * (g - np.sum(g * out, axis=axis, keepdims=True)))

    return make_node(out, (a,), "softmax", backward)


def cross_entropy_with_logits(logits, labels) -> Tensor:
    """Mean categorical cross-entropy; ``labels`` are integer class ids."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.data.ndim != 2 or labels.shape != (logits.shape[0],):
        raise RejectedInput(f"cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise RejectedInput("cross_entropy: label out of range")
    n = logits.shape[0]
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsum
    loss = -logp[np.arange(n), labels].mean()

    def backward(g):
        grad = np.exp(logp)
        grad[np.arange(n), labels] -= 1.0
        _push(logits, g * grad / n)

    return make_node(np.asarray(loss), (logits,), "cross_entropy", backward)


def kl_of_distributions(p, q) -> Tensor:
    """Row-wise ``sum p log(p/q)`` over the last axis; inputs must be positive."""
    p, q = as_tensor(p), as_tensor(q)
    if p.shape != q.shape:
        raise RejectedInput(f"kl: shape mismatch {p.shape} vs {q.shape}")
    if np.any(p.data <= 0) or np.any(q.data <= 0):
        raise RejectedInput("kl: inputs must be strictly positive (smooth them first)")
    logratio = np.log(p.data) - np.log(q.data)
    out = np.sum(p.data * logratio, axis=-1)

    def backward(g):
        gg = np.expand_dims(g, -1)
        _push(p, gg * (logratio + 1.0))
        _push(q, -gg * p.data / q.data)

    return make_node(np.asarray(out), (p, q), "kl", backward)


def normalize(a, axis: int = -1) -> Tensor:
    """Divide by the sum over ``axis``; entries must be positive."""
    a = as_tensor(a)
    total = a.data.sum(axis=axis, keepdims=True)
    out = a.data / total

    def backward(g):
        _push(a, (g - np.sum(g * out, axis=axis, keepdims=True)) / total)

    return make_node(out, (a,), "normalize", backward)
