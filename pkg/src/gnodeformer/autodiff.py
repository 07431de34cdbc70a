"""Minimal dense reverse-mode differentiation engine.

Tensors are 2-d float64 arrays (scalars are shape (1, 1)); labels and
masks stay plain numpy arrays. Each op records a closure that scatters
the output gradient to its parents, and backward() replays those
closures in reverse topological order. There is no tape object: the
graph is the web of parent references, confined to one training task.

Broadcasting in add/sub/mul is limited to numpy's rules over 2-d
shapes; the backward pass sums gradients over broadcast axes.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import erf

from .errors import DataError, NumericsError

# When enabled, every op output is checked for NaN/inf. Off by default:
# log, softmax-rows, and the loss always validate their inputs anyway.
DEBUG_CHECK_FINITE = False

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)
LAYER_NORM_EPS = 1e-12


def set_debug_checks(enabled: bool):
    global DEBUG_CHECK_FINITE
    DEBUG_CHECK_FINITE = bool(enabled)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        if arr.ndim != 2:
            raise NumericsError(f"tensors are 2-d, got shape {arr.shape}")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # binary ops --------------------------------------------------------

    def __add__(self, other):
        return _broadcast_op(self, other, np.add, lambda a, b, g: (g, g))

    def __sub__(self, other):
        return _broadcast_op(self, other, np.subtract, lambda a, b, g: (g, -g))

    def __mul__(self, other):
        return _broadcast_op(
            self, other, np.multiply, lambda a, b, g: (g * b.data, g * a.data)
        )

    def __matmul__(self, other):
        a, b = self, _as_tensor(other)
        if a.data.shape[1] != b.data.shape[0]:
            raise NumericsError(
                f"matmul shapes {a.data.shape} and {b.data.shape} incompatible"
            )
        out = _make(a.data @ b.data, (a, b))
        if out.requires_grad:

            def backward(g):
                _acc(a, g @ b.data.T)
                _acc(b, a.data.T @ g)

            out._backward = backward
        return out

    def scale(self, c: float):
        """Multiply by a python constant."""
        c = float(c)
        out = _make(self.data * c, (self,))
        if out.requires_grad:
            out._backward = lambda g: _acc(self, g * c)
        return out

    def __neg__(self):
        return self.scale(-1.0)

    # shape ops ---------------------------------------------------------

    def transpose(self):
        out = _make(self.data.T, (self,))
        if out.requires_grad:
            out._backward = lambda g: _acc(self, g.T)
        return out

    @property
    def T(self):
        return self.transpose()

    # unary elementwise ------------------------------------------------

    def relu(self):
        mask = self.data > 0
        out = _make(self.data * mask, (self,))
        if out.requires_grad:
            out._backward = lambda g: _acc(self, g * mask)
        return out

    def gelu(self):
        # exact form x * Phi(x) with the Gaussian CDF, not the tanh fit
        x = self.data
        cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
        out = _make(x * cdf, (self,))
        if out.requires_grad:
            pdf = np.exp(-0.5 * x * x) * _INV_SQRT_2PI
            local = cdf + x * pdf
            out._backward = lambda g: _acc(self, g * local)
        return out

    def tanh(self):
        y = np.tanh(self.data)
        out = _make(y, (self,))
        if out.requires_grad:
            out._backward = lambda g: _acc(self, g * (1.0 - y * y))
        return out

    def sin(self):
        out = _make(np.sin(self.data), (self,))
        if out.requires_grad:
            cos = np.cos(self.data)
            out._backward = lambda g: _acc(self, g * cos)
        return out

    def cos(self):
        out = _make(np.cos(self.data), (self,))
        if out.requires_grad:
            sin = np.sin(self.data)
            out._backward = lambda g: _acc(self, g * -sin)
        return out

    def exp(self):
        y = np.exp(self.data)
        out = _make(y, (self,))
        if out.requires_grad:
            out._backward = lambda g: _acc(self, g * y)
        return out

    def log(self):
        if not np.isfinite(self.data).all():
            raise NumericsError("log on non-finite input")
        if (self.data <= 0).any():
            raise NumericsError("log on non-positive input")
        out = _make(np.log(self.data), (self,))
        if out.requires_grad:
            out._backward = lambda g: _acc(self, g / self.data)
        return out

    # row ops ------------------------------------------------------------

    def softmax_rows(self):
        if not np.isfinite(self.data).all():
            raise NumericsError("softmax on non-finite input")
        z = self.data - self.data.max(axis=1, keepdims=True)
        e = np.exp(z)
        s = e / e.sum(axis=1, keepdims=True)
        out = _make(s, (self,))
        if out.requires_grad:

            def backward(g):
                dot = (g * s).sum(axis=1, keepdims=True)
                _acc(self, (g - dot) * s)

            out._backward = backward
        return out

    def layer_norm_rows(self):
        """Normalize each row to mean 0 and variance 1 (no affine part;
        compose with a gain/bias tensor for that).
        """
        x = self.data
        mu = x.mean(axis=1, keepdims=True)
        var = ((x - mu) ** 2).mean(axis=1, keepdims=True)
        inv = 1.0 / np.sqrt(var + LAYER_NORM_EPS)
        y = (x - mu) * inv
        out = _make(y, (self,))
        if out.requires_grad:

            def backward(g):
                gm = g.mean(axis=1, keepdims=True)
                gym = (g * y).mean(axis=1, keepdims=True)
                _acc(self, inv * (g - gm - y * gym))

            out._backward = backward
        return out

    # reductions ----------------------------------------------------------

    def sum(self):
        out = _make(self.data.sum().reshape(1, 1), (self,))
        if out.requires_grad:
            out._backward = lambda g: _acc(self, np.full_like(self.data, g[0, 0]))
        return out

    def mean(self):
        size = self.data.size
        out = _make(self.data.mean().reshape(1, 1), (self,))
        if out.requires_grad:
            out._backward = lambda g: _acc(
                self, np.full_like(self.data, g[0, 0] / size)
            )
        return out

    def item(self) -> float:
        if self.data.shape != (1, 1):
            raise NumericsError(f"item() on non-scalar shape {self.data.shape}")
        return float(self.data[0, 0])


# helpers ------------------------------------------------------------------


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: tuple) -> Tensor:
    if DEBUG_CHECK_FINITE and not np.isfinite(data).all():
        raise NumericsError("op produced non-finite values")
    out = Tensor(data, requires_grad=any(p.requires_grad for p in parents))
    if out.requires_grad:
        out._parents = parents
    return out


def _acc(t: Tensor, g: np.ndarray):
    if not t.requires_grad:
        return
    g = _unbroadcast(g, t.data.shape)
    t.grad = g if t.grad is None else t.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient over the axes that were broadcast in the forward op."""
    if g.shape == shape:
        return g
    out = g
    for axis in (0, 1):
        if shape[axis] == 1 and out.shape[axis] != 1:
            out = out.sum(axis=axis, keepdims=True)
    if out.shape != shape:
        raise NumericsError(f"cannot reduce gradient {g.shape} to {shape}")
    return out


def _broadcast_op(a: Tensor, b, fwd, grads) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        data = fwd(a.data, b.data)
    except ValueError as exc:
        raise NumericsError(
            f"shapes {a.data.shape} and {b.data.shape} do not broadcast"
        ) from exc
    if data.shape != np.broadcast_shapes(a.data.shape, b.data.shape):
        raise NumericsError("unexpected broadcast result")
    out = _make(data, (a, b))
    if out.requires_grad:

        def backward(g):
            ga, gb = grads(a, b, g)
            _acc(a, ga)
            _acc(b, gb)

        out._backward = backward
    return out


# free-function ops ---------------------------------------------------------


def concat_columns(tensors: list[Tensor]) -> Tensor:
    if not tensors:
        raise NumericsError("concat of zero tensors")
    rows = {t.data.shape[0] for t in tensors}
    if len(rows) != 1:
        raise NumericsError(f"concat row counts differ: {sorted(rows)}")
    out = _make(np.concatenate([t.data for t in tensors], axis=1), tuple(tensors))
    if out.requires_grad:
        splits = np.cumsum([t.data.shape[1] for t in tensors])[:-1]

        def backward(g):
            for t, piece in zip(tensors, np.split(g, splits, axis=1)):
                _acc(t, piece)

        out._backward = backward
    return out


def row_gather(t: Tensor, index) -> Tensor:
    index = np.asarray(index, dtype=np.int64)
    if index.ndim != 1:
        raise NumericsError("row index must be a flat integer vector")
    if index.size and (index.min() < 0 or index.max() >= t.data.shape[0]):
        raise NumericsError("row index out of range")
    out = _make(t.data[index], (t,))
    if out.requires_grad:

        def backward(g):
            full = np.zeros_like(t.data)
            np.add.at(full, index, g)
            _acc(t, full)

        out._backward = backward
    return out


def dropout(t: Tensor, p: float, seed: int, training: bool) -> Tensor:
    """Inverted dropout: zero entries with probability p and rescale the
    survivors by 1/(1-p). Identity when p=0 or not training. The mask is
    a pure function of the seed.
    """
    if not 0.0 <= p < 1.0:
        raise NumericsError(f"dropout probability {p} outside [0, 1)")
    if not training or p == 0.0:
        return t
    keep = np.random.default_rng(seed).random(t.data.shape) >= p
    scale = 1.0 / (1.0 - p)
    out = _make(t.data * keep * scale, (t,))
    if out.requires_grad:
        out._backward = lambda g: _acc(t, g * keep * scale)
    return out


def masked_cross_entropy(logits: Tensor, labels, mask) -> Tensor:
    """Mean cross-entropy of logits rows selected by a boolean mask.

    Fused with log-softmax for stability; the backward rule is
    (softmax - onehot) / count on masked rows, zero elsewhere.
    """
    labels = np.asarray(labels, dtype=np.int64)
    mask = np.asarray(mask, dtype=bool)
    n, c = logits.data.shape
    if labels.shape != (n,) or mask.shape != (n,):
        raise DataError("labels and mask must have one entry per logits row")
    count = int(mask.sum())
    if count == 0:
        raise DataError("cross-entropy over an empty mask")
    if labels[mask].min() < 0 or labels[mask].max() >= c:
        raise DataError(f"masked labels outside [0, {c})")
    if not np.isfinite(logits.data).all():
        raise NumericsError("cross-entropy on non-finite logits")

    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsumexp
    loss = -logp[mask, labels[mask]].sum() / count
    out = _make(np.array([[loss]]), (logits,))
    if out.requires_grad:

        def backward(g):
            grad = np.exp(logp)
            grad[np.arange(n), labels] -= 1.0
            grad *= mask[:, None] / count
            _acc(logits, grad * g[0, 0])

        out._backward = backward
    return out


def backward(loss: Tensor, params: dict) -> dict:
    """Gradients of a scalar loss for each named parameter tensor.

    Parameters with no path to the loss get zero gradients. Gradients
    are returned keyed like params; .grad fields on the graph are
    scratch state owned by this call.
    """
    if loss.data.shape != (1, 1):
        raise NumericsError(f"loss must be scalar, got shape {loss.data.shape}")

    topo: list[Tensor] = []
    seen = {id(loss)}
    stack = [(loss, iter(loss._parents))]
    while stack:
        node, parents = stack[-1]
        advanced = False
        for p in parents:
            if id(p) not in seen and p.requires_grad:
                seen.add(id(p))
                stack.append((p, iter(p._parents)))
                advanced = True
                break
        if not advanced:
            topo.append(node)
            stack.pop()

    for node in topo:
        node.grad = None
    loss.grad = np.ones((1, 1))
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)

    grads = {}
    for name, p in params.items():
        if p.grad is None:
            grads[name] = np.zeros_like(p.data)
        else:
            grads[name] = p.grad
            if not np.isfinite(grads[name]).all():
                raise NumericsError(f"non-finite gradient for parameter {name!r}")
    return grads
