"""Small reverse-mode differentiable array engine.

Values live in numpy arrays; every op records a closure that maps the output
gradient back onto its inputs. Only the operations the recogniser and gaze
estimator need are provided.
"""

from __future__ import annotations

import builtins
import contextlib
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64

_CHECKED = False


class ShapeError(ValueError):
    pass


class ConfigError(ValueError):
    pass


@contextlib.contextmanager
def precision(dtype):
    """Run ops in ``dtype`` (float64 by default; float32 is used for training)."""
    global DTYPE
    prev = DTYPE
    DTYPE = np.dtype(dtype).type
    try:
        yield
    finally:
        DTYPE = prev


@contextlib.contextmanager
def checked(enabled: bool = True):
    """Reject NaN/Inf at array construction while the context is active."""
    global _CHECKED
    prev = _CHECKED
    _CHECKED = enabled
    try:
        yield
    finally:
        _CHECKED = prev


class NdArray:
    """Dense float array that can take part in a gradient graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, parents: tuple = (), backward: Callable | None = None,
                 requires_grad: bool = False):
        arr = np.asarray(data, dtype=DTYPE)
        if _CHECKED and not np.all(np.isfinite(arr)):
            raise ValueError("non-finite value in array")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        # graph edges are only kept when something upstream needs a gradient
        self._parents = parents if self.requires_grad else ()
        self._backward = backward if self.requires_grad else None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single value, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        return f"NdArray(shape={self.shape})"

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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def backward(self) -> None:
        backward(self)


class Param(NdArray):
    """Learnable array with a persistent gradient buffer."""

    __slots__ = ("name",)

    def __init__(self, name: str, data):
        super().__init__(data, requires_grad=True)
        self.name = name
        self.grad = np.zeros_like(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Param({self.name!r}, shape={self.shape})"


class ParamSet:
    """Ordered collection of uniquely named parameters."""

    def __init__(self):
        self._params: dict[str, Param] = {}

    def add(self, name: str, data) -> Param:
        if name in self._params:
            raise ValueError(f"duplicate parameter name {name!r}")
        p = Param(name, data)
        self._params[name] = p
        return p

    def __getitem__(self, name: str) -> Param:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self):
        return iter(self._params.values())

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.zero_grad()

    def cast(self, dtype) -> None:
        for p in self._params.values():
            p.data = p.data.astype(dtype)
            p.grad = np.zeros_like(p.data)

    def num_values(self) -> int:
        return builtins.sum(p.data.size for p in self._params.values())


@contextlib.contextmanager
def training_precision(params: ParamSet, dtype):
    """Cast params to ``dtype`` and run ops in it; params return to float64 afterwards."""
    params.cast(dtype)
    try:
        with precision(dtype):
            yield
    finally:
        params.cast(np.float64)


def as_array(x) -> NdArray:
    return x if isinstance(x, NdArray) else NdArray(x)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def backward(loss: NdArray) -> None:
    """Accumulate d(loss)/d(value) into every reachable Param."""
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order: list[NdArray] = []
    seen: set[int] = set()
    stack: list[tuple[NdArray, bool]] = [(loss, False)]
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

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if isinstance(node, Param):
            node.grad = node.grad + g
        if node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg


# elementwise -----------------------------------------------------------------

def add(a, b) -> NdArray:
    a, b = as_array(a), as_array(b)
    return NdArray(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> NdArray:
    a, b = as_array(a), as_array(b)
    return NdArray(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))


def mul(a, b) -> NdArray:
    a, b = as_array(a), as_array(b)
    return NdArray(a.data * b.data, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape),
                              _unbroadcast(g * a.data, b.shape)))


def tanh(x: NdArray) -> NdArray:
    y = np.tanh(x.data)
    return NdArray(y, (x,), lambda g: (g * (1.0 - y * y),))


def softmax(x: NdArray, axis: int = -1) -> NdArray:
    """Softmax along ``axis`` using max subtraction."""
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def _back(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return NdArray(y, (x,), _back)


def log_softmax(x: NdArray, axis: int = -1) -> NdArray:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse
    p = np.exp(y)
    return NdArray(y, (x,), lambda g: (g - p * g.sum(axis=axis, keepdims=True),))


# reductions and shape ----------------------------------------------------------

def sum(x: NdArray, axis=None, keepdims: bool = False) -> NdArray:  # noqa: A001
    y = x.data.sum(axis=axis, keepdims=keepdims)

    def _back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return NdArray(y, (x,), _back)


def mean(x: NdArray, axis=None, keepdims: bool = False) -> NdArray:
    n = x.data.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    y = x.data.mean(axis=axis, keepdims=keepdims)

    def _back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, x.shape).copy(),)

    return NdArray(y, (x,), _back)


def reshape(x: NdArray, shape: Sequence[int]) -> NdArray:
    return NdArray(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: NdArray, axes: Sequence[int]) -> NdArray:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return NdArray(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def swap_last(x: NdArray) -> NdArray:
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, axes)


def concat(xs: Sequence[NdArray], axis: int) -> NdArray:
    xs = [as_array(x) for x in xs]
    bounds = np.cumsum([0] + [x.shape[axis] for x in xs])

    def _back(g):
        out = []
        for i in range(len(xs)):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(int(bounds[i]), int(bounds[i + 1]))
            out.append(g[tuple(sl)])
        return tuple(out)

    return NdArray(np.concatenate([x.data for x in xs], axis=axis), tuple(xs), _back)


def getitem(x: NdArray, idx) -> NdArray:
    def _back(g):
        full = np.zeros_like(x.data)
        full[idx] += g
        return (full,)

    return NdArray(x.data[idx], (x,), _back)


def where(mask: np.ndarray, a: NdArray, b) -> NdArray:
    """Select ``a`` where mask holds, else ``b``; mask is a constant."""
    a, b = as_array(a), as_array(b)
    return NdArray(np.where(mask, a.data, b.data), (a, b),
                   lambda g: (_unbroadcast(np.where(mask, g, 0.0), a.shape),
                              _unbroadcast(np.where(mask, 0.0, g), b.shape)))


# linear algebra ----------------------------------------------------------------

def matmul(a, b) -> NdArray:
    """Batched matrix product over the last two axes (numpy broadcasting)."""
    a, b = as_array(a), as_array(b)
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    y = np.matmul(a.data, b.data)

    def _back(g):
        ga = gb = None
        if a.requires_grad:
            if a.ndim == 2 and b.ndim > 2:
                ga = np.matmul(g, np.swapaxes(b.data, -1, -2)).reshape((-1,) + a.shape).sum(axis=0)
            else:
                ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            if b.ndim == 2 and a.ndim > 2:
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return NdArray(y, (a, b), _back)


def apply_along(x: NdArray, m: NdArray, axis: int, left: bool = False) -> NdArray:
    """Contract one axis of ``x`` with a matrix.

    ``left=False``: ``y[..., j, ...] = sum_i x[..., i, ...] * m[i, j]``.
    ``left=True``:  ``y[..., j, ...] = sum_i m[j, i] * x[..., i, ...]``.
    """
    x, m = as_array(x), as_array(m)
    axis = axis % x.ndim
    mat = m.data.T if left else m.data
    if x.shape[axis] != mat.shape[0]:
        raise ShapeError(f"axis {axis} has length {x.shape[axis]} but matrix is {m.shape}")
    y = np.moveaxis(np.tensordot(x.data, mat, axes=([axis], [0])), -1, axis)
    rest = [i for i in range(x.ndim) if i != axis]

    def _back(g):
        gx = gm = None
        if x.requires_grad:
            gx = np.moveaxis(np.tensordot(g, mat, axes=([axis], [1])), -1, axis)
        if m.requires_grad:
            gm = np.tensordot(x.data, g, axes=(rest, rest))
            if left:
                gm = gm.T
        return gx, gm

    return NdArray(y, (x, m), _back)


def conv1d(x: NdArray, kernel: NdArray, bias: NdArray) -> NdArray:
    """Kernel-3 temporal convolution with one zero frame of padding per side.

    ``x`` is C_in x T or B x C_in x T; ``kernel`` is C_out x C_in x 3.
    ``out[o, t] = bias[o] + sum_i sum_k kernel[o, i, k] * x[i, t + k - 1]``.
    """
    x = as_array(x)
    if x.ndim == 2:
        return reshape(conv1d(reshape(x, (1,) + x.shape), kernel, bias), (kernel.shape[0], x.shape[1]))
    if kernel.ndim != 3 or kernel.shape[2] != 3:
        raise ShapeError(f"conv1d kernel must be C_out x C_in x 3, got {kernel.shape}")
    bsz, cin, t = x.shape
    cout = kernel.shape[0]
    if kernel.shape[1] != cin:
        raise ShapeError(f"conv1d channel mismatch: input has {cin}, kernel expects {kernel.shape[1]}")
    if t < 1:
        raise ShapeError("conv1d needs at least one frame")
    # columns laid out as (C_in * 3) x (B * T) so both passes are single GEMMs
    xp = np.pad(x.data.transpose(1, 0, 2), ((0, 0), (0, 0), (1, 1)))
    cols = np.stack([xp[:, :, k:k + t] for k in range(3)], axis=1).reshape(cin * 3, bsz * t)
    w2 = kernel.data.reshape(cout, cin * 3)
    y = (w2 @ cols).reshape(cout, bsz, t).transpose(1, 0, 2) + bias.data[:, None]

    def _back(g):
        gx = gw = gb = None
        g2 = g.transpose(1, 0, 2).reshape(cout, bsz * t)
        if x.requires_grad:
            gcols = (w2.T @ g2).reshape(cin, 3, bsz, t)
            gxp = np.zeros((cin, bsz, t + 2), dtype=g.dtype)
            for k in range(3):
                gxp[:, :, k:k + t] += gcols[:, k]
            gx = gxp[:, :, 1:-1].transpose(1, 0, 2)
        if kernel.requires_grad:
            gw = (g2 @ cols.T).reshape(kernel.shape)
        if bias.requires_grad:
            gb = g.sum(axis=(0, 2))
        return gx, gw, gb

    return NdArray(y, (x, kernel, bias), _back)


def layer_norm(x: NdArray, gain: NdArray, offset: NdArray, eps: float = 1e-5) -> NdArray:
    """Normalise every time step over its feature axes.

    For a C x T input the feature axis is C. Batched inputs are B x F... x T and
    are normalised over all axes between the batch and time axes; ``gain`` and
    ``offset`` have the feature shape.
    """
    x = as_array(x)
    if x.ndim == 2:
        return reshape(layer_norm(reshape(x, (1,) + x.shape), gain, offset, eps), x.shape)
    axes = tuple(range(1, x.ndim - 1))
    if gain.shape != x.shape[1:-1] or offset.shape != x.shape[1:-1]:
        raise ShapeError(f"layer_norm affine shape {gain.shape} does not match features {x.shape[1:-1]}")
    n = int(np.prod(x.shape[1:-1]))
    xc = x.data - x.data.mean(axis=axes, keepdims=True)
    var = np.square(xc).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gshape = gain.shape + (1,)
    y = xhat * gain.data.reshape(gshape) + offset.data.reshape(gshape)

    def _back(g):
        gx = gg = go = None
        if gain.requires_grad:
            gg = (g * xhat).sum(axis=(0, x.ndim - 1))
        if offset.requires_grad:
            go = g.sum(axis=(0, x.ndim - 1))
        if x.requires_grad:
            dxhat = g * gain.data.reshape(gshape)
            m1 = dxhat.sum(axis=axes, keepdims=True) / n
            m2 = (dxhat * xhat).sum(axis=axes, keepdims=True) / n
            gx = inv * (dxhat - m1 - xhat * m2)
        return gx, gg, go

    return NdArray(y, (x, gain, offset), _back)


def dropout(x: NdArray, rate: float, training: bool, rng: np.random.Generator | None) -> NdArray:
    """Inverted dropout: survivors are scaled by 1/(1-rate); identity in eval mode."""
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ConfigError("training-mode dropout needs a random generator")
    mask = (rng.random(x.shape, dtype=x.data.dtype) >= rate) * x.data.dtype.type(1.0 / (1.0 - rate))
    return NdArray(x.data * mask, (x,), lambda g: (g * mask,))


def normalize_columns(x: NdArray, fallback: np.ndarray, axis: int = 1, min_norm: float = 1e-8):
    """Divide each vector along ``axis`` by its norm.

    Vectors with norm below ``min_norm`` are replaced by the matching vector of
    ``fallback`` (no gradient flows through replaced entries). Returns the
    result and a boolean mask of replaced positions.
    """
    norm = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True))
    bad = norm < min_norm
    safe = np.where(bad, 1.0, norm)
    u = x.data / safe
    y = np.where(bad, fallback, u)

    def _back(g):
        g = np.where(bad, 0.0, g)
        dot = (g * u).sum(axis=axis, keepdims=True)
        return ((g - u * dot) / safe,)

    return NdArray(y, (x,), _back), np.squeeze(bad, axis=axis)


# optimisers --------------------------------------------------------------------

@dataclass
class OptimState:
    """Adam/AdamW moments plus the step-decayed learning-rate schedule."""

    base_lr: float = 0.005
    decay: float = 0.95
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def lr(self, epoch: int) -> float:
        return self.base_lr * self.decay ** epoch


def _adam_update(params: Iterable[Param], state: OptimState, epoch: int, decoupled_decay: float) -> None:
    state.step += 1
    lr = state.lr(epoch)
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p in params:
        m = state.m.get(p.name)
        if m is None:
            m = state.m[p.name] = np.zeros_like(p.data)
            state.v[p.name] = np.zeros_like(p.data)
        v = state.v[p.name]
        g = p.grad
        if decoupled_decay:
            p.data *= 1.0 - lr * decoupled_decay
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def adam_step(params: Iterable[Param], state: OptimState, epoch: int) -> None:
    _adam_update(params, state, epoch, 0.0)


def adamw_step(params: Iterable[Param], state: OptimState, epoch: int) -> None:
    _adam_update(params, state, epoch, state.weight_decay)


def uniform_init(rng: np.random.Generator, shape: Sequence[int], fan_in: int) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=tuple(shape))
