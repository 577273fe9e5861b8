"""
Dense tensors with reverse-mode differentiation.

Only the handful of primitives the patch classifier needs are provided:
convolution, relu, pooling, channel concatenation, the affine head,
softmax and cross-entropy, plus a few glue ops (add, mul, sum, reshape,
row picking). Every op builds a new immutable ``Tensor`` that remembers its
parents and a closure implementing its backward rule; ``backward`` walks the
resulting graph in reverse topological order.

Data stays in the dtype it was created with (float32 by default). Feeding
float64 inputs keeps the whole graph in float64, which is what the
finite-difference oracle relies on.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

_ids = itertools.count()


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


def _as_float_array(data):
    arr = np.asarray(data)
    if arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(np.float32)
    return arr


class Tensor:
    """Immutable n-d array node in a computation graph."""

    __slots__ = ("data", "requires_grad", "id", "op", "parents", "_backward")

    def __init__(self, data, requires_grad=False, *, _parents=(), _backward=None, _op="leaf", _owned=False):
        arr = _as_float_array(data)
        if not _owned and arr is data:
            arr = arr.copy()
        if not np.isfinite(arr).all():
            raise NonFiniteError(f"non-finite values produced by {_op}")
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.id = next(_ids)
        self.op = _op
        self.parents = tuple(_parents)
        self._backward = _backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data.copy()

    def item(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, id={self.id})"

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def sum(self):
        return sum_all(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _wrap(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, parents, backward, op):
    """Create an op output; parents that need no gradient are not tracked."""
    needs = any(p.requires_grad for p in parents)
    return Tensor(
        data,
        requires_grad=needs,
        _parents=parents if needs else (),
        _backward=backward if needs else None,
        _op=op,
        _owned=True,
    )


# --------------------------------------------------------------------------
# graph traversal


@dataclass
class ComputationRecord:
    """Executed ops reachable from a terminal node, inputs before consumers."""

    nodes: list

    @classmethod
    def trace(cls, terminal):
        order, seen = [], set()
        stack = [(terminal, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if node.id in seen:
                continue
            seen.add(node.id)
            stack.append((node, True))
            for p in node.parents:
                if p.id not in seen:
                    stack.append((p, False))
        return cls(order)

    def check_order(self):
        pos = {n.id: i for i, n in enumerate(self.nodes)}
        for i, n in enumerate(self.nodes):
            for p in n.parents:
                if pos[p.id] >= i:
                    raise AssertionError(f"node {p.id} does not precede consumer {n.id}")
        return True


def backward(terminal, record=None):
    """Gradients of a scalar ``terminal`` for every node on a path to it.

    Returns a dict mapping node id to a gradient array shaped like the node.
    Nodes that do not influence ``terminal`` are absent; use :func:`grad`
    to get zeros for them.
    """
    if terminal.data.size != 1:
        raise ShapeError(f"backward needs a scalar terminal, got shape {terminal.shape}")
    if record is None:
        record = ComputationRecord.trace(terminal)
    grads = {terminal.id: np.ones_like(terminal.data)}
    for node in reversed(record.nodes):
        g = grads.get(node.id)
        if g is None or node._backward is None:
            continue
        for parent, pg in zip(node.parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if parent.id in grads:
                grads[parent.id] = grads[parent.id] + pg
            else:
                grads[parent.id] = pg
    for nid, g in grads.items():
        if not np.isfinite(g).all():
            raise NonFiniteError(f"non-finite gradient for node {nid}")
    return grads


def grad(terminal, *wrt):
    """Gradient arrays of ``terminal`` w.r.t. each tensor in ``wrt``."""
    grads = backward(terminal)
    return [grads.get(t.id, np.zeros_like(t.data)) for t in wrt]


# --------------------------------------------------------------------------
# elementwise glue


def add(a, b):
    a, b = _wrap(a), _wrap(b)
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ")
    return _result(a.data + b.data, (a, b), lambda g: (g, g), "add")


def mul(a, b):
    a, b = _wrap(a), _wrap(b)
    if a.shape != b.shape:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} differ")
    return _result(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data), "mul")


def sum_all(x):
    out = np.asarray(x.data.sum(), dtype=x.dtype)
    return _result(out, (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),), "sum")


def reshape(x, shape):
    out = x.data.reshape(shape)
    return _result(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def pick(x, index):
    """Select ``x[n, index[n]]`` for every row of a 2-d tensor."""
    if x.data.ndim != 2:
        raise ShapeError(f"pick expects a 2-d tensor, got {x.shape}")
    index = np.asarray(index, dtype=np.int64)
    if index.shape != (x.shape[0],):
        raise ShapeError(f"pick: {index.shape[0] if index.ndim else 0} indices for {x.shape[0]} rows")
    rows = np.arange(x.shape[0])

    def _back(g):
        gx = np.zeros_like(x.data)
        gx[rows, index] = g
        return (gx,)

    return _result(x.data[rows, index], (x,), _back, "pick")


# --------------------------------------------------------------------------
# network primitives


def _im2col(xp, kh, kw, ho, wo):
    """[N,C,Hp,Wp] -> [N, C*kh*kw, ho*wo] with (c, i, j) row order."""
    n, c = xp.shape[:2]
    cols = np.empty((n, c, kh, kw, ho, wo), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i:i + ho, j:j + wo]
    return cols.reshape(n, c * kh * kw, ho * wo)


def _correlate(x, kernel, ph, pw):
    """Raw cross-correlation on arrays; returns (output, im2col matrix)."""
    n, c, h, w = x.shape
    f, _, kh, kw = kernel.shape
    ho, wo = h + 2 * ph - kh + 1, w + 2 * pw - kw + 1
    if kh == 1 and kw == 1 and not (ph or pw):
        cols = x.reshape(n, c, h * w)
    else:
        xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else x
        cols = _im2col(xp, kh, kw, ho, wo)
    out = np.matmul(kernel.reshape(f, c * kh * kw), cols)
    return out.reshape(n, f, ho, wo), cols


def conv2d(x, kernel, bias, padding="same"):
    """2-d cross-correlation, stride 1, zero padding for ``same``."""
    x, kernel, bias = _wrap(x), _wrap(kernel), _wrap(bias)
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise ShapeError(f"conv2d: input {x.shape} and kernel {kernel.shape} must both be 4-d")
    n, c, h, w = x.shape
    f, kc, kh, kw = kernel.shape
    if kc != c:
        raise ShapeError(f"conv2d: input {x.shape} has {c} channels, kernel {kernel.shape} expects {kc}")
    if bias.shape != (f,):
        raise ShapeError(f"conv2d: bias {bias.shape} does not match kernel {kernel.shape}")
    if padding == "same":
        if kh % 2 == 0 or kw % 2 == 0:
            raise ShapeError(f"conv2d: 'same' needs odd kernel extents, got {kernel.shape}")
        ph, pw = kh // 2, kw // 2
    elif padding == "valid":
        ph = pw = 0
        if kh > h or kw > w:
            raise ShapeError(f"conv2d: kernel {kernel.shape} larger than input {x.shape}")
    else:
        raise ValueError(f"unknown padding {padding!r}")

    out, cols = _correlate(x.data, kernel.data, ph, pw)
    out += bias.data[:, None, None]
    saved_cols = cols if kernel.requires_grad else None

    def _back(g):
        gb = g.sum(axis=(0, 2, 3)) if bias.requires_grad else None
        gk = None
        if kernel.requires_grad:
            g3 = g.reshape(n, f, -1)
            gk = np.matmul(g3, saved_cols.transpose(0, 2, 1)).sum(axis=0).reshape(kernel.shape)
        gx = None
        if x.requires_grad:
            # adjoint of correlation = full correlation with the flipped, transposed kernel
            flipped = np.ascontiguousarray(kernel.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
            gx, _ = _correlate(g, flipped, kh - 1 - ph, kw - 1 - pw)
        return gx, gk, gb

    return _result(out, (x, kernel, bias), _back, "conv2d")


def relu(x):
    x = _wrap(x)
    mask = x.data > 0
    out = np.where(mask, x.data, 0).astype(x.dtype, copy=False)
    return _result(out, (x,), lambda g: (g * mask,), "relu")


def avg_pool2d(x, window=2):
    if window != 2:
        raise ValueError("only 2x2 pooling is supported")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"avg_pool2d needs even spatial extents, got {x.shape}")
    out = x.data.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))

    def _back(g):
        gx = np.repeat(np.repeat(g * 0.25, 2, axis=2), 2, axis=3)
        return (gx.astype(x.dtype, copy=False),)

    return _result(out, (x,), _back, "avg_pool2d")


def global_avg_pool(x):
    """Mean over spatial extents: [N,C,H,W] -> [N,C]."""
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3))

    def _back(g):
        gx = np.broadcast_to((g / (h * w))[:, :, None, None], x.shape)
        return (gx.astype(x.dtype),)

    return _result(out, (x,), _back, "global_avg_pool")


def concat_channels(a, b):
    if a.data.ndim != 4 or b.data.ndim != 4:
        raise ShapeError(f"concat_channels: shapes {a.shape} and {b.shape} must be 4-d")
    if (a.shape[0], *a.shape[2:]) != (b.shape[0], *b.shape[2:]):
        raise ShapeError(f"concat_channels: shapes {a.shape} and {b.shape} disagree outside channels")
    ca = a.shape[1]
    out = np.concatenate([a.data, b.data], axis=1)
    return _result(out, (a, b), lambda g: (g[:, :ca], g[:, ca:]), "concat")


def dense(x, weight, bias):
    x, weight, bias = _wrap(x), _wrap(weight), _wrap(bias)
    if x.data.ndim != 2 or weight.data.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ShapeError(f"dense: input {x.shape} incompatible with weight {weight.shape}")
    if bias.shape != (weight.shape[1],):
        raise ShapeError(f"dense: bias {bias.shape} incompatible with weight {weight.shape}")
    out = x.data @ weight.data + bias.data

    def _back(g):
        gx = g @ weight.data.T if x.requires_grad else None
        gw = x.data.T @ g if weight.requires_grad else None
        gb = g.sum(axis=0) if bias.requires_grad else None
        return gx, gw, gb

    return _result(out, (x, weight, bias), _back, "dense")


def _log_softmax(z):
    shifted = z - z.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax(logits):
    logits = _wrap(logits)
    if logits.data.ndim != 2 or logits.shape[1] < 2:
        raise ShapeError(f"softmax expects [N, K>=2], got {logits.shape}")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=1, keepdims=True)

    def _back(g):
        return (p * (g - (g * p).sum(axis=1, keepdims=True)),)

    return _result(p, (logits,), _back, "softmax")


def cross_entropy(probs, labels):
    """Mean negative log-likelihood of ``labels`` under row distributions.

    When ``probs`` comes straight out of :func:`softmax` the loss is taken
    from the log-softmax of the logits and differentiated as (p - onehot)/N,
    which stays finite even when a probability underflows to zero.
    """
    labels = np.asarray(labels, dtype=np.int64)
    n, k = probs.shape
    if labels.shape != (n,):
        raise ShapeError(f"cross_entropy: {labels.shape} labels for {n} rows")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"cross_entropy: labels must lie in [0, {k})")
    rows = np.arange(n)

    if probs.op == "softmax" and probs.parents:
        logits = probs.parents[0]
        logp = _log_softmax(logits.data)
        loss = np.asarray(-logp[rows, labels].mean(), dtype=probs.dtype)
        p = probs.data

        def _back(g):
            d = p.copy()
            d[rows, labels] -= 1
            return (d * (g / n),)

        return _result(loss, (logits,), _back, "softmax_cross_entropy")

    with np.errstate(divide="ignore"):
        loss = np.asarray(-np.log(probs.data[rows, labels]).mean(), dtype=probs.dtype)

    def _back(g):
        gp = np.zeros_like(probs.data)
        gp[rows, labels] = -g / (n * probs.data[rows, labels])
        return (gp,)

    return _result(loss, (probs,), _back, "cross_entropy")
