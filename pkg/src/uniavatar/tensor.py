"""Dense float64 tensors with reverse-mode automatic differentiation.

A small define-by-run engine: every operation stores its parents and a
gradient closure, and ``backward`` replays the tape in reverse topological
order. All math is double precision so finite-difference checks can run at
tight tolerances. Graphs are rebuilt on every forward pass and are intended
to be used from a single thread each.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are inconsistent with the requested operation."""


class ConfigError(ValueError):
    """A hyperparameter (head count, stride, ...) is invalid."""


class NonDeterministicFunctionError(RuntimeError):
    """A function handed to the gradient checker returned varying values."""


class Tensor:
    """One node of a computation graph holding a float64 ndarray.

    Leaf tensors are either constants or named parameters; interior nodes
    carry a closure that maps the incoming output gradient to per-parent
    gradients. Tensors are treated as immutable once created (parameter
    data is only mutated by optimizers, between graph builds).
    """

    __slots__ = ("data", "grad_enabled", "name", "_parents", "_grad_fn")

    def __init__(
        self,
        data,
        grad_enabled: bool = False,
        name: str | None = None,
        parents: tuple["Tensor", ...] = (),
        grad_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None,
    ):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad_enabled = grad_enabled
        self.name = name
        self._parents = parents
        self._grad_fn = grad_fn

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, grad={self.grad_enabled})"

    # Arithmetic sugar; python scalars are promoted to constants.
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
        if isinstance(other, Tensor):
            return mul(self, power(other, -1.0))
        return mul(self, 1.0 / float(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent):
        return power(self, exponent)


def parameter(data, name: str) -> Tensor:
    """Create a named trainable leaf."""
    return Tensor(data, grad_enabled=True, name=name)


def constant(data) -> Tensor:
    """Create a leaf that never receives gradients."""
    return Tensor(data, grad_enabled=False)


def as_tensor(value) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return constant(value)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _node(data: np.ndarray, parents: tuple[Tensor, ...], grad_fn) -> Tensor:
    if any(p.grad_enabled for p in parents):
        return Tensor(data, grad_enabled=True, parents=parents, grad_fn=grad_fn)
    return Tensor(data)


# ---------------------------------------------------------------------------
# elementwise and reduction primitives


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data

    def grad_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(out, (a, b), grad_fn)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data

    def grad_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _node(out, (a, b), grad_fn)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data

    def grad_fn(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _node(out, (a, b), grad_fn)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _node(-a.data, (a,), lambda g: (-g,))


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    exponent = float(exponent)
    out = a.data**exponent

    def grad_fn(g):
        return (g * exponent * a.data ** (exponent - 1.0),)

    return _node(out, (a,), grad_fn)


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)

    def grad_fn(g):
        return (g * (1.0 - out * out),)

    return _node(out, (a,), grad_fn)


def silu(a) -> Tensor:
    """x * sigmoid(x); smooth activation (finite differences stay clean)."""
    a = as_tensor(a)
    with np.errstate(over="ignore"):  # exp(-x) may saturate to inf; 1/(1+inf) = 0 is the right limit
        sig = 1.0 / (1.0 + np.exp(-a.data))
    out = a.data * sig

    def grad_fn(g):
        return (g * (sig + a.data * sig * (1.0 - sig)),)

    return _node(out, (a,), grad_fn)


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def grad_fn(g):
        inner = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - inner),)

    return _node(out, (a,), grad_fn)


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def grad_fn(g):
        g = np.asarray(g)
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        if not keepdims:
            for ax in sorted(ax % a.ndim for ax in axes):
                g = np.expand_dims(g, ax)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _node(out, (a,), grad_fn)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = 1
        for ax in axes:
            n *= a.shape[ax % a.ndim]
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / n)


# ---------------------------------------------------------------------------
# structural primitives


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    out = a.data.reshape(shape)

    def grad_fn(g):
        return (g.reshape(a.shape),)

    return _node(out, (a,), grad_fn)


def permute(a, axes) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    out = a.data.transpose(axes)

    def grad_fn(g):
        return (g.transpose(inverse),)

    return _node(out, (a,), grad_fn)


def transpose(a) -> Tensor:
    return permute(a, (1, 0))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum(sizes)[:-1]

    def grad_fn(g):
        return tuple(np.split(g, offsets, axis=axis))

    return _node(out, tuple(tensors), grad_fn)


def slice_axis(a, axis: int, start: int, stop: int) -> Tensor:
    a = as_tensor(a)
    index = [slice(None)] * a.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)
    out = a.data[index]

    def grad_fn(g):
        full = np.zeros(a.shape)
        full[index] = g
        return (full,)

    return _node(out, (a,), grad_fn)


def upsample_nearest(a, factor: int) -> Tensor:
    """Repeat the last two axes of a C×H×W tensor ``factor`` times each."""
    a = as_tensor(a)
    f = int(factor)
    out = np.repeat(np.repeat(a.data, f, axis=-2), f, axis=-1)

    def grad_fn(g):
        c, h, w = a.shape
        return (g.reshape(c, h, f, w, f).sum(axis=(2, 4)),)

    return _node(out, (a,), grad_fn)


# ---------------------------------------------------------------------------
# linear algebra and convolution


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-d operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def grad_fn(g):
        return g @ b.data.T, a.data.T @ g

    return _node(out, (a, b), grad_fn)


def conv2d(x, kernel, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlate a C×H×W input with an O×C×k×k kernel.

    Output spatial size is floor((H + 2*padding - k) / stride) + 1 per axis.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    if x.ndim != 3 or kernel.ndim != 4:
        raise ShapeError(f"conv2d expects C×H×W input and O×C×k×k kernel, got {x.shape}, {kernel.shape}")
    c, h, w = x.shape
    o, kc, kh, kw = kernel.shape
    if kc != c:
        raise ShapeError(f"kernel expects {kc} input channels, input has {c}")
    if stride < 1:
        raise ConfigError(f"stride must be positive, got {stride}")
    if padding < 0:
        raise ConfigError(f"padding must be non-negative, got {padding}")
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise ShapeError(f"kernel {kh}×{kw} larger than padded input {h + 2 * padding}×{w + 2 * padding}")

    padded = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding)))
    windows = np.lib.stride_tricks.sliding_window_view(padded, (kh, kw), axis=(1, 2))
    windows = windows[:, ::stride, ::stride]  # (C, H', W', kh, kw)
    out = np.einsum("ocij,chwij->ohw", kernel.data, windows, optimize=True)
    hp, wp = out.shape[1], out.shape[2]

    def grad_fn(g):
        gk = np.einsum("ohw,chwij->ocij", g, windows, optimize=True)
        gpad = np.zeros_like(padded)
        for i in range(kh):
            for j in range(kw):
                gpad[:, i : i + stride * hp : stride, j : j + stride * wp : stride] += np.einsum(
                    "ohw,oc->chw", g, kernel.data[:, :, i, j], optimize=True
                )
        if padding:
            gx = gpad[:, padding:-padding, padding:-padding]
        else:
            gx = gpad
        return gx, gk

    return _node(out, (x, kernel), grad_fn)


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Per-row normalization of an N×d tensor followed by gain ⊙ x̂ + bias."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    if x.ndim != 2:
        raise ShapeError(f"layer_norm expects an N×d tensor, got {x.shape}")
    mu = mean(x, axis=1, keepdims=True)
    centered = sub(x, mu)
    var = mean(mul(centered, centered), axis=1, keepdims=True)
    inv = power(add(var, eps), -0.5)
    normalized = mul(centered, inv)
    return add(mul(normalized, gain), bias)


@dataclass
class AttentionWeights:
    """Projection matrices for one attention block (all d×d)."""

    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor


def attention(query_src, key_src, weights: AttentionWeights, heads: int) -> Tensor:
    """Multi-head scaled dot-product attention with output projection.

    ``query_src`` supplies the queries (N×d); ``key_src`` the keys and values
    (M×d). Scores use the 1/sqrt(d_head) convention.
    """
    query_src, key_src = as_tensor(query_src), as_tensor(key_src)
    d = query_src.shape[1]
    if d % heads != 0:
        raise ConfigError(f"model dim {d} not divisible by {heads} heads")
    dh = d // heads
    q = matmul(query_src, weights.wq)
    k = matmul(key_src, weights.wk)
    v = matmul(key_src, weights.wv)
    outputs = []
    scale = 1.0 / math.sqrt(dh)
    for h in range(heads):
        lo, hi = h * dh, (h + 1) * dh
        qh = slice_axis(q, 1, lo, hi)
        kh = slice_axis(k, 1, lo, hi)
        vh = slice_axis(v, 1, lo, hi)
        scores = mul(matmul(qh, transpose(kh)), scale)
        outputs.append(matmul(softmax(scores, axis=-1), vh))
    merged = outputs[0] if heads == 1 else concat(outputs, axis=1)
    return matmul(merged, weights.wo)


def self_attention(x, weights: AttentionWeights, heads: int) -> Tensor:
    """softmax(QKᵀ/√d_h)V over an N×d token stream, with output projection."""
    return attention(x, x, weights, heads)


def mse(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"mse expects matching shapes, got {a.shape} vs {b.shape}")
    diff = sub(a, b)
    return mean(mul(diff, diff))


# ---------------------------------------------------------------------------
# reverse pass


GradientMap = dict[str, Tensor]


def _topo_order(loss: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.grad_enabled and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, params: Iterable[Tensor] | None = None) -> GradientMap:
    """Gradients of a scalar loss for every named grad-enabled leaf.

    When ``params`` is given, every listed parameter gets an entry (zeros if
    the loss does not depend on it); otherwise the map covers the named
    parameters actually reachable from the loss.
    """
    if loss.ndim != 0:
        raise ValueError(f"backward expects a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones(())}
    leaves: dict[int, tuple[str, np.ndarray]] = {}
    for node in reversed(_topo_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._grad_fn is not None:
            parent_grads = node._grad_fn(g)
            for p, pg in zip(node._parents, parent_grads):
                if pg is None or not p.grad_enabled:
                    continue
                acc = grads.get(id(p))
                grads[id(p)] = pg if acc is None else acc + pg
        elif node.name is not None:
            leaves[id(node)] = (node.name, g)

    result: GradientMap = {name: Tensor(g) for name, g in leaves.values()}
    if params is not None:
        for p in params:
            if p.name is None:
                raise ValueError("parameters passed to backward must be named")
            if p.name not in result:
                result[p.name] = Tensor(np.zeros(p.shape))
    return result


def finite_diff_check(
    fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    h: float = 1e-5,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``fn`` must rebuild the loss from the current parameter data on every
    call; parameters are perturbed in place one entry at a time. The
    relative error of an entry is |analytic - numeric| / max(|analytic|,
    |numeric|, 1e-8). Non-deterministic functions are rejected.
    """
    base_a = float(fn().data)
    base_b = float(fn().data)
    if base_a != base_b:
        raise NonDeterministicFunctionError(
            f"function returned {base_a!r} then {base_b!r} for identical parameters"
        )
    grads = backward(fn(), params=params)
    worst = 0.0
    for p in params:
        analytic = grads[p.name].data
        flat = p.data.reshape(-1)
        gflat = analytic.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            f_plus = float(fn().data)
            flat[i] = orig - h
            f_minus = float(fn().data)
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * h)
            err = abs(gflat[i] - numeric) / max(abs(gflat[i]), abs(numeric), 1e-8)
            worst = max(worst, err)
    return worst
