"""Dense float64 tensors with reverse-mode automatic differentiation.

Just enough machinery to express the logic operators and train small models
by gradient descent: broadcastable elementwise arithmetic, batched matmul,
softmax/log-softmax, layer norm, embedding lookup and a handful of pointwise
activations.  Values are immutable after construction; only ``grad`` buffers
mutate, and they accumulate across ``backward()`` calls until zeroed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

LN2 = math.log(2.0)
_GELU_C = math.sqrt(2.0 / math.pi)


class ShapeError(ValueError):
    pass


@dataclass
class RngState:
    """Seeded RNG handle; identical seed + algorithm gives identical draws."""

    seed: int
    algorithm: str = "pcg64"

    def generator(self) -> np.random.Generator:
        if self.algorithm != "pcg64":
            raise ValueError(f"unknown rng algorithm: {self.algorithm!r}")
        return np.random.Generator(np.random.PCG64(self.seed))

    def child(self, *keys: int) -> np.random.Generator:
        # Deterministic per-key stream, used for per-step batch/dropout draws.
        if self.algorithm != "pcg64":
            raise ValueError(f"unknown rng algorithm: {self.algorithm!r}")
        return np.random.Generator(np.random.PCG64([self.seed, *keys]))


class Tensor:
    """A node in the computation graph holding a dense float64 array."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn", "name")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        parents: tuple = (),
        backward_fn: Optional[Callable] = None,
        name: str = "",
    ):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self._parents = parents
        self._backward_fn = backward_fn
        self.name = name

    # ---- bookkeeping -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}{tag}, requires_grad={self.requires_grad})"

    # ---- backward ----------------------------------------------------

    def backward(self) -> None:
        """Reverse sweep from a scalar root, accumulating into leaf grads."""
        if self.data.size != 1:
            raise ShapeError(f"backward() root must be scalar, got shape {self.data.shape}")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                stack.append((p, False))
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(topo):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if not node._parents:
                node.grad = g if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward_fn(g)
            for p, pg in zip(node._parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                if id(p) in grads:
                    grads[id(p)] = grads[id(p)] + pg
                else:
                    grads[id(p)] = pg
        # Interior nodes with explicit grad requests are rare at desk scale;
        # leaves are the contract, so only leaves retain grads.

    # ---- operator sugar ---------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        return reshape(self, shape)

    def transpose(self, *axes):
        return permute(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tensor_mean(self, axis=axis, keepdims=keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name: str = "") -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum grad over axes that were broadcast up from `shape`."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---- arithmetic ------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data + b.data

    def bwd(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return Tensor(out_data, parents=(a, b), backward_fn=bwd)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data * b.data

    def bwd(g):
        return _unbroadcast(g * b.data, a.data.shape), _unbroadcast(g * a.data, b.data.shape)

    return Tensor(out_data, parents=(a, b), backward_fn=bwd)


def scale_by(x: Tensor, const) -> Tensor:
    """Multiply by a constant array (no gradient to the constant)."""
    const = np.asarray(const, dtype=np.float64)
    out_data = x.data * const

    def bwd(g):
        return (_unbroadcast(g * const, x.data.shape),)

    return Tensor(out_data, parents=(x,), backward_fn=bwd)


def add_const(x: Tensor, const) -> Tensor:
    const = np.asarray(const, dtype=np.float64)
    out_data = x.data + const

    def bwd(g):
        return (_unbroadcast(g, x.data.shape),)

    return Tensor(out_data, parents=(x,), backward_fn=bwd)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matmul contracting the trailing two axes; leading axes broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul contraction mismatch: {a.shape} @ {b.shape}")
    try:
        out_data = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise ShapeError(f"matmul broadcast mismatch: {a.shape} @ {b.shape}") from exc

    def bwd(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.data.shape), _unbroadcast(gb, b.data.shape)

    return Tensor(out_data, parents=(a, b), backward_fn=bwd)


def linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """Affine map over the last axis: x @ w (+ b)."""
    x, w = as_tensor(x), as_tensor(w)
    if x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear: input width {x.shape} does not match weight {w.shape}")
    out_data = x.data @ w.data
    if b is not None:
        out_data = out_data + b.data

    def bwd(g):
        gx = g @ w.data.T
        gw = x.data.reshape(-1, x.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        gb = g.reshape(-1, g.shape[-1]).sum(axis=0) if b is not None else None
        return (gx, gw, gb) if b is not None else (gx, gw)

    parents = (x, w, b) if b is not None else (x, w)
    return Tensor(out_data, parents=parents, backward_fn=bwd)


# ---- shape manipulation ---------------------------------------------


def reshape(x: Tensor, shape) -> Tensor:
    out_data = x.data.reshape(shape)

    def bwd(g):
        return (g.reshape(x.data.shape),)

    return Tensor(out_data, parents=(x,), backward_fn=bwd)


def permute(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = np.argsort(axes)
    out_data = x.data.transpose(axes)

    def bwd(g):
        return (g.transpose(inv),)

    return Tensor(out_data, parents=(x,), backward_fn=bwd)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor(out_data, parents=tuple(tensors), backward_fn=bwd)


def index_select(x: Tensor, axis: int, idx) -> Tensor:
    """Pick entries along one axis; gradients scatter-add back."""
    idx = np.asarray(idx, dtype=np.intp)
    out_data = np.take(x.data, idx, axis=axis)

    def bwd(g):
        gx = np.zeros_like(x.data)
        # np.add.at handles repeated indices correctly
        key = [slice(None)] * x.data.ndim
        key[axis] = idx
        np.add.at(gx, tuple(key), g)
        return (gx,)

    return Tensor(out_data, parents=(x,), backward_fn=bwd)


def gather_last(x: Tensor, idx) -> Tensor:
    """out[...] = x[..., idx[...]] with idx matching the leading shape."""
    idx = np.asarray(idx, dtype=np.intp)
    out_data = np.take_along_axis(x.data, idx[..., None], axis=-1)[..., 0]

    def bwd(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, idx[..., None], g[..., None], axis=-1)
        return (gx,)

    return Tensor(out_data, parents=(x,), backward_fn=bwd)


def embedding(table: Tensor, ids) -> Tensor:
    """Row lookup: out[..., :] = table[ids[...], :]."""
    ids = np.asarray(ids, dtype=np.intp)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(
            f"embedding id out of range [0, {table.shape[0]}): "
            f"min={ids.min()}, max={ids.max()}"
        )
    out_data = table.data[ids]

    def bwd(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[-1]))
        return (gt,)

    return Tensor(out_data, parents=(table,), backward_fn=bwd)


# ---- reductions ------------------------------------------------------


def tensor_sum(x: Tensor, axis=None, keepdims=False) -> Tensor:
    out_data = x.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, x.data.shape).copy(),)
        g2 = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(g2, x.data.shape).copy(),)

    return Tensor(out_data, parents=(x,), backward_fn=bwd)


def tensor_mean(x: Tensor, axis=None, keepdims=False) -> Tensor:
    n = x.data.size if axis is None else x.data.shape[axis]
    return scale_by(tensor_sum(x, axis=axis, keepdims=keepdims), 1.0 / n)


# ---- softmax and friends --------------------------------------------


def softmax_axis(x: Tensor, axis: int) -> Tensor:
    """Numerically stabilized softmax along one axis."""
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"softmax axis {axis} invalid for shape {x.shape}")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        inner = (g * s).sum(axis=axis, keepdims=True)
        return (s * (g - inner),)

    return Tensor(s, parents=(x,), backward_fn=bwd)


def log_softmax_axis(x: Tensor, axis: int) -> Tensor:
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"log_softmax axis {axis} invalid for shape {x.shape}")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out_data = shifted - lse

    def bwd(g):
        return (g - np.exp(out_data) * g.sum(axis=axis, keepdims=True),)

    return Tensor(out_data, parents=(x,), backward_fn=bwd)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out_data = xhat * gain.data + bias.data
    n = x.shape[-1]

    def bwd(g):
        gxhat = g * gain.data
        gx = inv * (
            gxhat
            - gxhat.mean(axis=-1, keepdims=True)
            - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True)
        )
        ggain = (g * xhat).reshape(-1, n).sum(axis=0)
        gbias = g.reshape(-1, n).sum(axis=0)
        return gx, ggain, gbias

    return Tensor(out_data, parents=(x, gain, bias), backward_fn=bwd)


def dropout(x: Tensor, rate: float, rng: Optional[np.random.Generator]) -> Tensor:
    """Inverted dropout; identity when rate is 0 or no rng is supplied."""
    if rate <= 0.0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= rate).astype(np.float64) / (1.0 - rate)
    return scale_by(x, keep)


# ---- pointwise activations ------------------------------------------


def _sigmoid(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _log1p2exp(z: np.ndarray) -> np.ndarray:
    # ln(1 + 2 e^z); switch to the exact asymptote z + ln 2 above z = 30
    # so extreme logits stay finite and the identity checks remain valid.
    out = np.where(z > 30.0, z + LN2, np.log1p(2.0 * np.exp(np.minimum(z, 30.0))))
    return out


_ELEMENTWISE: dict[str, tuple[Callable, Callable]] = {
    "gelu": (
        lambda z: 0.5 * z * (1.0 + np.tanh(_GELU_C * (z + 0.044715 * z**3))),
        lambda z: (
            0.5 * (1.0 + np.tanh(_GELU_C * (z + 0.044715 * z**3)))
            + 0.5
            * z
            * (1.0 - np.tanh(_GELU_C * (z + 0.044715 * z**3)) ** 2)
            * _GELU_C
            * (1.0 + 3 * 0.044715 * z**2)
        ),
    ),
    "sigmoid": (_sigmoid, lambda z: _sigmoid(z) * (1.0 - _sigmoid(z))),
    "tanh": (np.tanh, lambda z: 1.0 - np.tanh(z) ** 2),
    "log1p2exp": (_log1p2exp, lambda z: _sigmoid(z + LN2)),
    "relu_shift_ln2": (
        lambda z: np.maximum(0.0, z + LN2),
        lambda z: (z + LN2 > 0).astype(np.float64),
    ),
}


def elementwise(x: Tensor, fn: str) -> Tensor:
    """Apply a named pointwise function with its analytic derivative."""
    try:
        f, df = _ELEMENTWISE[fn]
    except KeyError:
        raise ValueError(f"unknown elementwise fn {fn!r}; have {sorted(_ELEMENTWISE)}")
    out_data = f(x.data)

    def bwd(g):
        return (g * df(x.data),)

    return Tensor(out_data, parents=(x,), backward_fn=bwd)


def gelu(x: Tensor) -> Tensor:
    return elementwise(x, "gelu")


def tanh(x: Tensor) -> Tensor:
    return elementwise(x, "tanh")


def sigmoid(x: Tensor) -> Tensor:
    return elementwise(x, "sigmoid")


# ---- gradient checking ----------------------------------------------


def finite_diff_grad(f: Callable[[np.ndarray], float], x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Central differences of a scalar-valued function, per coordinate."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(f(x))
        flat[i] = orig - eps
        fm = float(f(x))
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * eps)
    return grad
