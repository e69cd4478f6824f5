"""Dense tensors with a reverse-mode differentiation trace.

Every value in the package is a :class:`Tensor`: a numpy array plus, when
tracing is active, a back-reference to the operation that produced it.
:func:`backward` walks that graph once and returns the gradient of a scalar
loss with respect to every leaf that requested one.

The kernels here are deliberately few and fused where that keeps the
backward rule simple (``layer_norm``, ``softmax``, ``masked_mse``).
"""
from __future__ import annotations

import contextlib
import zlib
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable trace recording inside the block."""
    global _GRAD_ENABLED
    prev, _GRAD_ENABLED = _GRAD_ENABLED, False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, name=None, _parents=(), _backward=None):
        arr = np.asarray(data)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = _parents
        self._backward = _backward
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def is_leaf(self):
        return not self._parents

    def numpy(self):
        return self.data

    def detach(self):
        """Same values, no trace: gradients stop here."""
        return Tensor(self.data)

    def item(self):
        return float(self.data)

    def __repr__(self):
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other, self.dtype)))

    def __rsub__(self, other):
        return add(_as_tensor(other, self.dtype), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def sum(self, axis=None):
        return tensor_sum(self, axis)

    def mean(self, axis=None):
        return tensor_mean(self, axis)


def _as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x, dtype=dtype if dtype is not None else None)
    return Tensor(arr)


def _make(data, parents: Sequence[Tensor], backward_fn) -> Tensor:
    track = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    if not track:
        return Tensor(data)
    return Tensor(data, requires_grad=True, _parents=tuple(parents), _backward=backward_fn)


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    if grad.shape == tuple(shape):
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    out = a.data + b.data

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(out, (a, b), bw)


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    out = a.data * b.data

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(out, (a, b), bw)


def scale(a: Tensor, c: float) -> Tensor:
    c = a.dtype.type(c)
    return _make(a.data * c, (a,), lambda g: (g * c,))


def gelu(x: Tensor) -> Tensor:
    """Exact (erf) GELU."""
    d = x.data
    cdf = 0.5 * (1.0 + erf(d / np.sqrt(2.0)))
    out = (d * cdf).astype(d.dtype, copy=False)

    def bw(g):
        pdf = np.exp(-0.5 * d * d) / np.sqrt(2.0 * np.pi)
        return ((g * (cdf + d * pdf)).astype(d.dtype, copy=False),)

    return _make(out, (x,), bw)


# ---------------------------------------------------------------- shape


def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),))


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(a % x.ndim for a in axes)
    inv = np.argsort(axes)
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def swapaxes(x: Tensor, a1: int, a2: int) -> Tensor:
    axes = list(range(x.ndim))
    axes[a1], axes[a2] = axes[a2], axes[a1]
    return transpose(x, axes)


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    xs = [_as_tensor(x) for x in xs]
    out = np.concatenate([x.data for x in xs], axis=axis)
    bounds = np.cumsum([x.shape[axis] for x in xs])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(out, xs, bw)


def tensor_sum(x: Tensor, axis=None) -> Tensor:
    out = x.data.sum(axis=axis)
    shape = x.shape

    def bw(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(out, (x,), bw)


def tensor_mean(x: Tensor, axis=None) -> Tensor:
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return scale(tensor_sum(x, axis), 1.0 / n)


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes, batched over the leading ones."""
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def bw(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(out, (a, b), bw)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map ``x @ weight + bias`` over the last axis; weight is (in, out)."""
    if x.shape[-1] != weight.shape[0]:
        raise ValueError(f"linear shape mismatch: {x.shape} @ {weight.shape}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, x.shape[-1])
    out = x2 @ weight.data
    if bias is not None:
        out = out + bias.data
    out = out.reshape(*lead, weight.shape[1])
    parents = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        g2 = g.reshape(-1, weight.shape[1])
        grads = [(g2 @ weight.data.T).reshape(x.shape), x2.T @ g2]
        if bias is not None:
            grads.append(g2.sum(axis=0))
        return tuple(grads)

    return _make(out, parents, bw)


# ---------------------------------------------------------------- normalisation


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Softmax stabilised by max subtraction; rejects non-finite input."""
    if not np.all(np.isfinite(x.data)):
        raise ValueError("softmax received non-finite input")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make(y, (x,), bw)


def softmax_rows(x: Tensor) -> Tensor:
    if x.ndim != 2:
        raise ValueError(f"softmax_rows expects a matrix, got shape {x.shape}")
    return softmax(x, axis=-1)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-6) -> Tensor:
    if eps <= 0:
        raise ValueError("layer_norm eps must be positive")
    d = x.data
    mu = d.mean(axis=-1, keepdims=True)
    xc = d - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data
    lead = tuple(range(d.ndim - 1))

    def bw(g):
        gx_hat = g * gain.data
        gx = inv * (
            gx_hat
            - gx_hat.mean(axis=-1, keepdims=True)
            - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True)
        )
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _make(out, (x, gain, bias), bw)


# ---------------------------------------------------------------- token indexing


def gather_rows(x, index: np.ndarray) -> Tensor:
    """Select rows along axis 1: ``x[b, index[b, i]]`` for x of shape (B, N, D)."""
    x = _as_tensor(x)
    index = np.asarray(index, dtype=np.intp)
    out = np.take_along_axis(x.data, index[..., None], axis=1)

    def bw(g):
        gx = np.zeros_like(x.data)
        b = np.arange(index.shape[0])[:, None]
        np.add.at(gx, (b, index), g)
        return (gx,)

    return _make(out, (x,), bw)


def scatter_rows(src: Tensor, index: np.ndarray, n: int, fill: Tensor) -> Tensor:
    """Place ``src`` rows (B, V, D) at ``index`` in an (B, n, D) grid; other rows get ``fill``."""
    index = np.asarray(index, dtype=np.intp)
    bsz, _, dim = src.shape
    taken = np.zeros((bsz, n), dtype=bool)
    np.put_along_axis(taken, index, True, axis=1)
    out = np.empty((bsz, n, dim), dtype=src.dtype)
    out[:] = fill.data
    np.put_along_axis(out, index[..., None], src.data, axis=1)

    def bw(g):
        gs = np.take_along_axis(g, index[..., None], axis=1)
        gf = g[~taken].sum(axis=0)
        return gs, gf

    return _make(out, (src, fill), bw)


# ---------------------------------------------------------------- spatial rescaling


def deconv_2x(x: Tensor, kernel: Tensor, mix: Tensor | None = None, mix_bias: Tensor | None = None) -> Tensor:
    """Stride-2, size-2 transposed convolution on (..., h, w, d) feature maps.

    ``kernel`` has shape (2, 2, d) and acts per channel; an optional affine
    ``mix`` (d, d') then mixes channels.
    """
    h, w, d = x.shape[-3:]
    if h != w:
        raise ValueError(f"deconv_2x expects a square map, got {h}x{w}")
    if kernel.shape != (2, 2, d):
        raise ValueError(f"deconv_2x kernel must be (2, 2, {d}), got {kernel.shape}")
    lead = x.shape[:-3]
    xe = x.data[..., :, None, :, None, :]
    ke = kernel.data[:, None, :, :]
    out = (xe * ke).reshape(*lead, 2 * h, 2 * w, d)

    def bw(g):
        g6 = g.reshape(*lead, h, 2, w, 2, d)
        gx = (g6 * ke).sum(axis=(-4, -2))
        gk = (g6 * xe).reshape(-1, h, 2, w, 2, d).sum(axis=(0, 1, 3))
        return gx, gk

    up = _make(out, (x, kernel), bw)
    if mix is None:
        return up
    return linear(up, mix, mix_bias)


def avgpool_2x(x: Tensor) -> Tensor:
    """Mean over non-overlapping 2x2 blocks of (..., h, w, d) feature maps."""
    h, w, d = x.shape[-3:]
    if h % 2 or w % 2:
        raise ValueError(f"avgpool_2x needs even extents, got {h}x{w}")
    lead = x.shape[:-3]
    out = x.data.reshape(*lead, h // 2, 2, w // 2, 2, d).mean(axis=(-4, -2))

    def bw(g):
        ge = g[..., :, None, :, None, :] * x.dtype.type(0.25)
        return (np.broadcast_to(ge, (*lead, h // 2, 2, w // 2, 2, d)).reshape(x.shape).copy(),)

    return _make(out, (x,), bw)


# ---------------------------------------------------------------- losses


def masked_mse(pred: Tensor, target: np.ndarray, mask: np.ndarray) -> Tensor:
    """Squared error averaged over masked rows and all feature dims.

    ``pred`` and ``target`` are (..., n, d); ``mask`` is (..., n), True = scored.
    """
    target = np.asarray(target, dtype=pred.dtype)
    if target.shape != pred.shape:
        raise ValueError(f"prediction {pred.shape} and target {target.shape} differ")
    m = np.asarray(mask, dtype=bool)
    count = int(m.sum())
    if count == 0:
        raise ValueError("no masked rows to score")
    denom = pred.dtype.type(count * pred.shape[-1])
    diff = (pred.data - target) * m[..., None]
    out = np.asarray((diff * diff).sum() / denom, dtype=pred.dtype)

    def bw(g):
        return (diff * (2.0 * g / denom),)

    return _make(out, (pred,), bw)


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean softmax cross-entropy for (B, K) logits and integer labels."""
    labels = np.asarray(labels, dtype=np.intp)
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    n = logits.shape[0]
    out = np.asarray(-logp[np.arange(n), labels].mean(), dtype=logits.dtype)

    def bw(g):
        p = np.exp(logp)
        p[np.arange(n), labels] -= 1.0
        return (p * (g / n),)

    return _make(out, (logits,), bw)


# ---------------------------------------------------------------- backward


def _topo(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, params: Iterable[Tensor] | None = None) -> dict[Tensor, np.ndarray]:
    """Gradients of a scalar ``loss`` with respect to every traced leaf.

    Leaves receive their gradient in ``.grad`` as well. Tensors listed in
    ``params`` that the loss does not reach get zeros.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {}
    result: dict[Tensor, np.ndarray] = {}
    if loss.requires_grad:
        grads[id(loss)] = np.ones_like(loss.data)
        for node in reversed(_topo(loss)):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.is_leaf:
                result[node] = g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
    if params is not None:
        for p in params:
            if p not in result:
                result[p] = np.zeros_like(p.data)
    for p, g in result.items():
        p.grad = g
    return result


# ---------------------------------------------------------------- verification


def finite_diff_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    eps: float = 1e-3,
    n_coords: int = 50,
    rng: np.random.Generator | None = None,
) -> float:
    """Worst relative error between traced gradients and central differences.

    ``f`` rebuilds the scalar loss from the current parameter values. Parameter
    arrays are perturbed in place and restored. Coordinates are sampled
    uniformly over the concatenation of all parameters.
    """
    params = list(params)
    if any(p.dtype != np.float64 for p in params):
        raise ValueError("finite_diff_check requires float64 parameters")
    rng = rng if rng is not None else np.random.default_rng(0)
    grads = backward(f(), params)
    sizes = np.array([p.data.size for p in params])
    total = int(sizes.sum())
    picks = rng.choice(total, size=min(n_coords, total), replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    worst = 0.0
    with no_grad():
        for flat in picks:
            k = int(np.searchsorted(offsets, flat, side="right") - 1)
            p, i = params[k], int(flat - offsets[k])
            view = p.data.reshape(-1)
            orig = view[i]
            view[i] = orig + eps
            up = float(f().data)
            view[i] = orig - eps
            down = float(f().data)
            view[i] = orig
            numeric = (up - down) / (2 * eps)
            analytic = float(grads[p].reshape(-1)[i])
            err = abs(numeric - analytic) / max(abs(analytic), 1e-8)
            worst = max(worst, err)
    return worst


# ---------------------------------------------------------------- randomness


class Prng:
    """Seeded generator with named, reproducible sub-streams.

    Backed by numpy's PCG64. ``Prng(seed).stream("mask", step)`` always yields
    the same generator for the same arguments, independently of how many
    other streams were drawn.
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.generator = np.random.Generator(np.random.PCG64(self.seed))

    def stream(self, name: str, *counters: int) -> np.random.Generator:
        key = [self.seed & 0xFFFFFFFF, self.seed >> 32, zlib.crc32(name.encode()), *map(int, counters)]
        return np.random.Generator(np.random.PCG64(np.random.SeedSequence(key)))

    @property
    def state(self) -> dict:
        return self.generator.bit_generator.state
