"""Dense numpy tensors with define-by-run reverse-mode differentiation.

Every differentiable op builds its output eagerly and, when gradient tracking
is on and some input requires a gradient, records a closure mapping the
output gradient to one gradient per input. ``Tensor.backward`` walks the
recorded graph once in reverse topological order.

Broadcasting between two tensors is limited to leading dimensions: the
shorter shape must be a suffix of the longer one (``[d]`` against
``[B, T, d]`` is fine, ``[B, 1, d]`` against ``[B, T, d]`` is not).
Constant numpy masks used by :func:`masked_fill` follow normal numpy rules.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, ShapeError

DEFAULT_DTYPE = np.float64

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference)."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if dtype is None:
            dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype.kind == "f" else DEFAULT_DTYPE
        self.data = np.asarray(data, dtype=dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- graph traversal -------------------------------------------------
    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into ``grad`` of every reachable leaf.

        Intermediate gradients are recomputed from scratch on each call, leaf
        gradients accumulate across calls until cleared.
        """
        if self.data.ndim != 0 and self.data.size != 1:
            raise ContractError(f"backward() needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise ContractError("loss does not depend on any tensor requiring grad")
        order = topological_order(self)
        for node in order:
            if node._parents:
                node.grad = None
        seed = np.ones_like(self.data)
        self.grad = seed if (self._parents or self.grad is None) else self.grad + seed
        for node in reversed(order):
            if node._backward is None or node.grad is None:
                continue
            grads = node._backward(node.grad)
            for parent, g in zip(node._parents, grads):
                if g is None or not parent.requires_grad:
                    continue
                if g.shape != parent.data.shape:
                    raise ShapeError(f"gradient shape {g.shape} != tensor shape {parent.data.shape}")
                parent.grad = g if parent.grad is None else parent.grad + g

    # -- operators -------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(other) if isinstance(other, Tensor) else -np.asarray(other))

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, power(other, -1.0))
        return mul(self, 1.0 / np.asarray(other, dtype=self.dtype))

    def __rtruediv__(self, other):
        return mul(power(self, -1.0), other)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def topological_order(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root`` through grad-requiring edges, inputs first.

    This list is the graph: each node appears exactly once, after all of its
    parents.
    """
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def _result(data: np.ndarray, parents: tuple, backward: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _as_tensor(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=like.dtype))


def _check_suffix(a: tuple, b: tuple) -> None:
    if a == b:
        return
    short, long_ = (a, b) if len(a) <= len(b) else (b, a)
    if len(short) == 0 or long_[len(long_) - len(short):] == short:
        return
    raise ShapeError(f"shapes {a} and {b} only broadcast over leading dimensions")


def _reduce_to(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    g = g.sum(axis=tuple(range(lead)))
    return g.reshape(shape)


# -- elementwise ---------------------------------------------------------

def add(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        const = np.asarray(b, dtype=a.dtype)
        if const.ndim:
            _check_suffix(a.shape, const.shape)
        data = a.data + const
        shape = a.shape
        return _result(data, (a,), lambda g: (_reduce_to(g, shape),))
    if not isinstance(a, Tensor):
        return add(b, a)
    _check_suffix(a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return _result(a.data + b.data, (a, b), lambda g: (_reduce_to(g, sa), _reduce_to(g, sb)))


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,))


def mul(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        const = np.asarray(b, dtype=a.dtype)
        if const.ndim:
            _check_suffix(a.shape, const.shape)
        shape = a.shape
        return _result(a.data * const, (a,), lambda g: (_reduce_to(g * const, shape),))
    _check_suffix(a.shape, b.shape)
    ad, bd = a.data, b.data

    def backward(g):
        ga = _reduce_to(g * bd, ad.shape) if a.requires_grad else None
        gb = _reduce_to(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return _result(ad * bd, (a, b), backward)


def power(a: Tensor, exponent: float) -> Tensor:
    ad = a.data
    return _result(ad ** exponent, (a,), lambda g: (g * exponent * ad ** (exponent - 1),))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    ad = a.data
    return _result(np.log(ad), (a,), lambda g: (g / ad,))


def relu(a: Tensor) -> Tensor:
    positive = a.data > 0
    return _result(np.where(positive, a.data, 0).astype(a.dtype, copy=False), (a,),
                   lambda g: (g * positive,))


def sigmoid(a: Tensor) -> Tensor:
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _result(out, (a,), lambda g: (g * out * (1.0 - out),))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _result(out, (a,), lambda g: (g * (1.0 - out * out),))


def glu(a: Tensor, axis: int = -1) -> Tensor:
    """Gated linear unit: first half times sigmoid of second half."""
    n = a.shape[axis]
    if n % 2:
        raise ShapeError(f"GLU needs an even size along axis {axis}, got {n}")
    first, second = split(a, 2, axis)
    return mul(first, sigmoid(second))


# -- reductions and shape ops --------------------------------------------

def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _result(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), backward)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([a.shape[i] for i in axes]))
    return mul(sum_(a, axis, keepdims), 1.0 / count)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    original = a.shape
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(original),))


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inverse = tuple(np.argsort(axes))
    return _result(a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),))


def swapaxes(a: Tensor, i: int, j: int) -> Tensor:
    return _result(a.data.swapaxes(i, j), (a,), lambda g: (g.swapaxes(i, j),))


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in items)


def getitem(a: Tensor, index) -> Tensor:
    shape, dtype = a.shape, a.dtype
    basic = _is_basic_index(index)

    def backward(g):
        full = np.zeros(shape, dtype=dtype)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _result(a.data[index], (a,), backward)


def split(a: Tensor, parts: int, axis: int = -1) -> list[Tensor]:
    n = a.shape[axis] // parts
    axis = axis % a.ndim
    out = []
    for i in range(parts):
        index = [slice(None)] * a.ndim
        index[axis] = slice(i * n, (i + 1) * n)
        out.append(getitem(a, tuple(index)))
    return out


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    axis = axis % tensors[0].ndim
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    return _result(data, tuple(tensors), lambda g: tuple(np.split(g, bounds, axis=axis)))


def masked_fill(a: Tensor, mask: np.ndarray, value: float) -> Tensor:
    """Replace entries where ``mask`` is True by a constant."""
    mask = np.asarray(mask, dtype=bool)
    try:
        np.broadcast_shapes(mask.shape, a.shape)
    except ValueError as exc:
        raise ShapeError(f"mask {mask.shape} does not broadcast to {a.shape}") from exc
    out = np.where(mask, np.asarray(value, dtype=a.dtype), a.data)
    keep = ~mask
    return _result(out, (a,), lambda g: (np.where(keep, g, 0).astype(g.dtype, copy=False),))


# -- linear algebra --------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with optional shared leading batch dims.

    ``a`` is ``[..., m, k]``; ``b`` is either ``[k, n]`` or ``[..., k, n]``
    with the same leading dims as ``a``.
    """
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs matrices, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    if b.ndim == 2:
        def backward(g):
            ga = g @ bd.T if a.requires_grad else None
            gb = None
            if b.requires_grad:
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            return ga, gb
    elif b.shape[:-2] == a.shape[:-2]:
        def backward(g):
            ga = g @ bd.swapaxes(-1, -2) if a.requires_grad else None
            gb = ad.swapaxes(-1, -2) @ g if b.requires_grad else None
            return ga, gb
    else:
        raise ShapeError(f"matmul batch dims differ: {a.shape} @ {b.shape}")
    return _result(ad @ bd, (a, b), backward)


# -- normalisation and probabilities -----------------------------------------

def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _result(out, (a,), backward)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _result(out, (a,), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise the last axis to zero mean / unit variance, then scale and shift."""
    if x.shape[-1] < 1:
        raise ShapeError("layer_norm over an empty axis")
    if gain.shape != x.shape[-1:] or bias.shape != x.shape[-1:]:
        raise ShapeError(f"gain/bias {gain.shape}/{bias.shape} do not match last axis of {x.shape}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    centred = xd - mu
    var = (centred * centred).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centred * inv
    out = xhat * gain.data + bias.data
    n = xd.shape[-1]

    def backward(g):
        gx = gg = gb = None
        if x.requires_grad:
            dxhat = g * gain.data
            gx = inv * (dxhat - dxhat.sum(-1, keepdims=True) / n
                        - xhat * (dxhat * xhat).sum(-1, keepdims=True) / n)
        if gain.requires_grad:
            gg = (g * xhat).reshape(-1, n).sum(0)
        if bias.requires_grad:
            gb = g.reshape(-1, n).sum(0)
        return gx, gg, gb

    return _result(out, (x, gain, bias), backward)


def embedding(weight: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise IndexError(f"token id out of range [0, {weight.shape[0]})")
    shape, dtype = weight.shape, weight.dtype

    def backward(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, ids.ravel(), g.reshape(-1, shape[1]))
        return (full,)

    return _result(weight.data[ids], (weight,), backward)


def conv1d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Temporal convolution over ``x`` of shape ``[B, T, C_in]``.

    ``weight`` is ``[K, C_in, C_out]``. Output length is
    ``(T + 2*padding - K) // stride + 1``.
    """
    if x.ndim != 3:
        raise ShapeError(f"conv1d input must be [B, T, C], got {x.shape}")
    k, c_in, c_out = weight.shape
    if x.shape[2] != c_in:
        raise ShapeError(f"conv1d expects {c_in} input channels, got {x.shape[2]}")
    batch, length, _ = x.shape
    out_len = (length + 2 * padding - k) // stride + 1
    if out_len < 1:
        raise ContractError(f"sequence of length {length} is shorter than the kernel receptive field")
    padded = np.pad(x.data, ((0, 0), (padding, padding), (0, 0)))
    span = stride * (out_len - 1) + 1
    cols = np.stack([padded[:, j:j + span:stride, :] for j in range(k)], axis=2)
    flat_cols = cols.reshape(batch * out_len, k * c_in)
    flat_w = weight.data.reshape(k * c_in, c_out)
    out = (flat_cols @ flat_w).reshape(batch, out_len, c_out) + bias.data

    def backward(g):
        g2 = g.reshape(-1, c_out)
        gx = gw = gb = None
        if x.requires_grad:
            dcols = (g2 @ flat_w.T).reshape(batch, out_len, k, c_in)
            dpad = np.zeros_like(padded)
            for j in range(k):
                dpad[:, j:j + span:stride, :] += dcols[:, :, j, :]
            gx = dpad[:, padding:padding + length, :]
        if weight.requires_grad:
            gw = (flat_cols.T @ g2).reshape(k, c_in, c_out)
        if bias.requires_grad:
            gb = g2.sum(0)
        return gx, gw, gb

    return _result(out, (x, weight, bias), backward)


def dropout(x: Tensor, p: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    if not training or p <= 0.0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / (1.0 - p)
    return mul(x, keep)


def cross_entropy_label_smoothed(logits: Tensor, targets, epsilon: float = 0.0,
                                 pad_id: int | None = None, reduction: str = "mean") -> Tensor:
    """Label-smoothed negative log-likelihood over the last axis.

    Per position: ``(1-eps) * NLL(target) + eps * mean_v NLL(v)``. Positions
    whose target equals ``pad_id`` contribute nothing. ``reduction`` is
    ``"mean"`` (over non-pad positions) or ``"sum"``.
    """
    if not 0.0 <= epsilon < 1.0:
        raise ContractError(f"label smoothing must be in [0, 1), got {epsilon}")
    vocab = logits.shape[-1]
    targets = np.asarray(targets, dtype=np.int64)
    if targets.shape != logits.shape[:-1]:
        raise ShapeError(f"targets {targets.shape} do not match logits {logits.shape}")
    flat_t = targets.ravel()
    if flat_t.size and (flat_t.min() < 0 or flat_t.max() >= vocab):
        raise IndexError(f"target id out of range [0, {vocab})")
    z = logits.data.reshape(-1, vocab)
    shifted = z - z.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    rows = np.arange(flat_t.size)
    nll = -logp[rows, flat_t]
    smooth = -logp.mean(axis=1)
    per_position = (1.0 - epsilon) * nll + epsilon * smooth
    valid = np.ones(flat_t.size, dtype=bool) if pad_id is None else flat_t != pad_id
    total = float(per_position[valid].sum()) if valid.any() else 0.0
    count = int(valid.sum())
    if reduction == "mean":
        scale = 1.0 / count if count else 0.0
    elif reduction == "sum":
        scale = 1.0
    else:
        raise ValueError(f"unknown reduction {reduction!r}")
    value = np.asarray(total * scale, dtype=logits.dtype)
    shape = logits.shape

    def backward(g):
        probs = np.exp(logp)
        probs[rows, flat_t] -= 1.0 - epsilon
        probs -= epsilon / vocab
        probs *= (valid * (scale * g))[:, None]
        return (probs.reshape(shape),)

    return _result(value, (logits,), backward)
