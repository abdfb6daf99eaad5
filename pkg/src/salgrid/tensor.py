"""Dense float64 tensors and a reverse-mode tape.

Every op in this module computes its forward value with numpy and, when a
:class:`Tape` is active and some input requires a gradient, records a
closure that maps the upstream gradient to gradients of its inputs.

    >>> x = Tensor([[1.0, -2.0]], requires_grad=True)
    >>> with Tape() as tape:
    ...     y = relu(x)
    >>> tape.backward(y, np.ones((1, 2)))
    >>> x.grad
    array([[1., 0.]])
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import as_strided
from scipy.special import expit, ndtr

from .exceptions import DimensionError, GradCheckError, TapeError

EPS_NORM = 1e-5
FD_STEP = 1e-5

_state = threading.local()


class Tensor:
    """Float64 array with an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad=False, name=None):
        arr = np.array(data, dtype=np.float64)
        if not 1 <= arr.ndim <= 4:
            raise DimensionError(f"tensor rank must be 1-4, got shape {arr.shape}")
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label})"


def _wrap(data, inputs):
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = any(t.requires_grad for t in inputs)
    out.name = None
    return out


class Tape:
    """Ordered record of executed ops, replayed in reverse by :meth:`backward`.

    A tape is bound to the thread that entered it.
    """

    def __init__(self):
        self.records = []
        self._produced = set()
        self._consumed = False

    def __enter__(self):
        stack = getattr(_state, "stack", None)
        if stack is None:
            stack = _state.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc):
        _state.stack.pop()
        return False

    def record(self, out, inputs, backward):
        self.records.append((out, inputs, backward))
        self._produced.add(id(out))

    def backward(self, output, grad=None):
        """Propagate ``grad`` (default: ones) from ``output`` to every leaf.

        Leaf gradients are accumulated into ``Tensor.grad``.
        """
        if self._consumed:
            raise TapeError("tape already replayed; run a fresh forward pass")
        if id(output) not in self._produced:
            raise TapeError("output was not produced on this tape")
        if grad is None:
            grad = np.ones_like(output.data)
        grad = np.asarray(grad, dtype=np.float64)
        if grad.shape != output.shape:
            raise DimensionError(
                f"upstream gradient shape {grad.shape} != output shape {output.shape}")
        self._consumed = True
        pending = {id(output): grad}
        for out, inputs, fn in reversed(self.records):
            g = pending.pop(id(out), None)
            if g is None:
                continue
            for t, gi in zip(inputs, fn(g)):
                if gi is None or not t.requires_grad:
                    continue
                key = id(t)
                if key in self._produced:
                    pending[key] = pending[key] + gi if key in pending else gi
                else:
                    t.grad = gi.copy() if t.grad is None else t.grad + gi


def active_tape():
    stack = getattr(_state, "stack", None)
    return stack[-1] if stack else None


def _record(out, inputs, backward):
    tape = active_tape()
    if tape is not None and out.requires_grad:
        tape.record(out, inputs, backward)
    return out


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b):
    """Matrix product over the last two axes; leading axes must agree."""
    if a.data.ndim < 2 or a.data.shape[:-2] != b.data.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    A, B = a.data, b.data
    out = _wrap(A @ B, (a, b))

    def backward(g):
        return g @ np.swapaxes(B, -1, -2), np.swapaxes(A, -1, -2) @ g

    return _record(out, (a, b), backward)


def linear(x, w, b=None):
    """``x @ w + b`` for ``x`` of shape (..., in), ``w`` (in, out), ``b`` (out,)."""
    if w.data.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise DimensionError(f"linear shape mismatch: {x.shape} @ {w.shape}")
    if b is not None and b.shape != (w.shape[1],):
        raise DimensionError(f"bias shape {b.shape} does not match {w.shape}")
    X, W = x.data, w.data
    y = X @ W
    if b is not None:
        y = y + b.data
    inputs = (x, w) if b is None else (x, w, b)
    out = _wrap(y, inputs)

    def backward(g):
        lead = tuple(range(g.ndim - 1))
        gx = g @ W.T
        gw = np.tensordot(X, g, axes=(lead, lead))
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=lead)

    return _record(out, inputs, backward)


# ---------------------------------------------------------------------------
# convolution


def conv2d(x, w, bias=None, stride=1):
    """Same-padded cross-correlation with a 1x1 or 3x3 kernel.

    ``x`` is (C_in, H, W) or (N, C_in, H, W); ``w`` is (C_out, C_in, k, k).
    With ``stride=2`` the output has ceil(H/2) x ceil(W/2) pixels.
    """
    if w.data.ndim != 4 or w.shape[2] != w.shape[3] or w.shape[2] not in (1, 3):
        raise DimensionError(f"conv2d kernel must be (C_out, C_in, k, k), k in {{1, 3}}; got {w.shape}")
    if stride not in (1, 2):
        raise DimensionError(f"unsupported stride {stride}")
    batched = x.data.ndim == 4
    X = x.data if batched else x.data[None]
    if X.ndim != 4 or X.shape[1] != w.shape[1]:
        raise DimensionError(f"conv2d channel mismatch: input {x.shape}, kernel {w.shape}")
    if bias is not None and bias.shape != (w.shape[0],):
        raise DimensionError(f"conv2d bias {bias.shape} does not match kernel {w.shape}")
    W_ = w.data
    k = W_.shape[2]
    p = k // 2
    N, C, H, Wd = X.shape
    Ho = (H + 2 * p - k) // stride + 1
    Wo = (Wd + 2 * p - k) // stride + 1
    Xp = np.pad(X, ((0, 0), (0, 0), (p, p), (p, p))) if p else X
    Xp = np.ascontiguousarray(Xp)
    s = Xp.strides
    cols = as_strided(Xp, (N, C, k, k, Ho, Wo),
                      (s[0], s[1], s[2], s[3], s[2] * stride, s[3] * stride), writeable=False)
    y = np.tensordot(cols, W_, axes=([1, 2, 3], [1, 2, 3])).transpose(0, 3, 1, 2)
    if bias is not None:
        y = y + bias.data[None, :, None, None]
    y = np.ascontiguousarray(y if batched else y[0])
    inputs = (x, w) if bias is None else (x, w, bias)
    out = _wrap(y, inputs)

    def backward(g):
        G = g if batched else g[None]
        gw = np.tensordot(G, cols, axes=([0, 2, 3], [0, 4, 5]))
        dcols = np.tensordot(W_, G, axes=([0], [1]))  # (C, k, k, N, Ho, Wo)
        gxp = np.zeros_like(Xp)
        for i in range(k):
            for j in range(k):
                gxp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += \
                    dcols[:, i, j].transpose(1, 0, 2, 3)
        gx = gxp[:, :, p:p + H, p:p + Wd]
        if not batched:
            gx = gx[0]
        grads = (gx, gw)
        if bias is not None:
            grads += (G.sum(axis=(0, 2, 3)),)
        return grads

    return _record(out, inputs, backward)


# ---------------------------------------------------------------------------
# normalization


def _guarded_inv_std(var):
    # max() rather than var + eps: inputs with var >= eps normalize exactly
    clamped = var < EPS_NORM
    return 1.0 / np.sqrt(np.maximum(var, EPS_NORM)), clamped


def _norm_backward(gxhat, xhat, inv_std, clamped, axes, m):
    s1 = gxhat.sum(axis=axes, keepdims=True)
    s2 = (gxhat * xhat).sum(axis=axes, keepdims=True)
    s2 = np.where(clamped, 0.0, s2)
    return inv_std * (gxhat - s1 / m - xhat * s2 / m)


def batch_norm(x, gamma, beta, running_mean, running_var, training, momentum=0.1):
    """Per-channel normalization of an (N, C, H, W) tensor.

    In training mode batch statistics are used and ``running_mean`` /
    ``running_var`` (numpy arrays, updated in place) move toward them by
    ``momentum``. In eval mode the running statistics are used.
    """
    X = x.data
    if X.ndim != 4 or gamma.shape != (X.shape[1],) or beta.shape != (X.shape[1],):
        raise DimensionError(f"batch_norm shape mismatch: x {x.shape}, gamma {gamma.shape}")
    axes = (0, 2, 3)
    m = X.shape[0] * X.shape[2] * X.shape[3]
    G = gamma.data[None, :, None, None]
    if training:
        if m < 2:
            raise DimensionError("batch_norm in training mode needs N*H*W >= 2 per channel")
        mean = X.mean(axis=axes, keepdims=True)
        xc = X - mean
        var = (xc * xc).mean(axis=axes, keepdims=True)
        inv_std, clamped = _guarded_inv_std(var)
        xhat = xc * inv_std
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean.ravel()
        running_var *= 1.0 - momentum
        running_var += momentum * var.ravel() * m / (m - 1)
    else:
        inv_std, _ = _guarded_inv_std(running_var[None, :, None, None])
        xhat = (X - running_mean[None, :, None, None]) * inv_std
    out = _wrap(xhat * G + beta.data[None, :, None, None], (x, gamma, beta))

    def backward(g):
        ggamma = (g * xhat).sum(axis=axes)
        gbeta = g.sum(axis=axes)
        gxhat = g * G
        if training:
            gx = _norm_backward(gxhat, xhat, inv_std, clamped, axes, m)
        else:
            gx = gxhat * inv_std
        return gx, ggamma, gbeta

    return _record(out, (x, gamma, beta), backward)


def layer_norm(x, gamma, beta):
    """Normalize over the last axis, then apply the affine ``gamma``, ``beta``."""
    X = x.data
    D = X.shape[-1]
    if D < 2 or gamma.shape != (D,) or beta.shape != (D,):
        raise DimensionError(f"layer_norm shape mismatch: x {x.shape}, gamma {gamma.shape}")
    mean = X.mean(axis=-1, keepdims=True)
    xc = X - mean
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv_std, clamped = _guarded_inv_std(var)
    xhat = xc * inv_std
    out = _wrap(xhat * gamma.data + beta.data, (x, gamma, beta))

    def backward(g):
        lead = tuple(range(g.ndim - 1))
        gx = _norm_backward(g * gamma.data, xhat, inv_std, clamped, -1, D)
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _record(out, (x, gamma, beta), backward)


# ---------------------------------------------------------------------------
# pointwise


def softmax(x):
    """Softmax along the last axis, max-shifted."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)
    out = _wrap(s, (x,))

    def backward(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _record(out, (x,), backward)


class ActivationPatterns:
    """Context manager collecting every ReLU on/off mask evaluated inside it.

    Two forward passes with equal patterns lie on the same linear piece, so a
    finite difference between them does not straddle a kink.
    """

    def __enter__(self):
        self.masks = []
        _state.patterns = self.masks
        return self

    def __exit__(self, *exc):
        _state.patterns = None
        return False

    def same_as(self, other):
        return len(self.masks) == len(other.masks) and all(
            np.array_equal(a, b) for a, b in zip(self.masks, other.masks))


def relu(x):
    mask = x.data > 0
    patterns = getattr(_state, "patterns", None)
    if patterns is not None:
        patterns.append(mask)
    out = _wrap(np.where(mask, x.data, 0.0), (x,))
    return _record(out, (x,), lambda g: (g * mask,))


def gelu(x):
    """Exact GELU, ``x * Phi(x)``."""
    X = x.data
    cdf = ndtr(X)
    out = _wrap(X * cdf, (x,))

    def backward(g):
        pdf = np.exp(-0.5 * X * X) / np.sqrt(2.0 * np.pi)
        return (g * (cdf + X * pdf),)

    return _record(out, (x,), backward)


def sigmoid(x):
    s = expit(x.data)
    out = _wrap(s, (x,))
    return _record(out, (x,), lambda g: (g * s * (1.0 - s),))


def add(a, b):
    if a.shape != b.shape:
        raise DimensionError(f"add shape mismatch: {a.shape} vs {b.shape}")
    out = _wrap(a.data + b.data, (a, b))
    return _record(out, (a, b), lambda g: (g, g))


def mul(a, b):
    if a.shape != b.shape:
        raise DimensionError(f"mul shape mismatch: {a.shape} vs {b.shape}")
    A, B = a.data, b.data
    out = _wrap(A * B, (a, b))
    return _record(out, (a, b), lambda g: (g * B, g * A))


def add_broadcast(x, pos):
    """Add ``pos`` to every leading-batch slice of ``x`` (x: (N, ...), pos: (...))."""
    if x.shape[1:] != pos.shape:
        raise DimensionError(f"cannot broadcast {pos.shape} onto {x.shape}")
    out = _wrap(x.data + pos.data, (x, pos))
    return _record(out, (x, pos), lambda g: (g, g.sum(axis=0)))


def scale(x, c):
    out = _wrap(x.data * c, (x,))
    return _record(out, (x,), lambda g: (g * c,))


# ---------------------------------------------------------------------------
# resampling and layout


def upsample_nearest_2x(x):
    """Nearest-neighbour 2x upsampling of the last two axes."""
    X = x.data
    out = _wrap(X.repeat(2, axis=-2).repeat(2, axis=-1), (x,))

    def backward(g):
        s = g.shape
        return (g.reshape(s[:-2] + (s[-2] // 2, 2, s[-1] // 2, 2)).sum(axis=(-3, -1)),)

    return _record(out, (x,), backward)


def avg_pool_2x(x):
    """2x2 mean pooling of the last two axes (even extents only)."""
    s = x.shape
    if s[-1] % 2 or s[-2] % 2:
        raise DimensionError(f"avg_pool_2x needs even spatial extents, got {s}")
    out = _wrap(x.data.reshape(s[:-2] + (s[-2] // 2, 2, s[-1] // 2, 2)).mean(axis=(-3, -1)), (x,))

    def backward(g):
        return (0.25 * g.repeat(2, axis=-2).repeat(2, axis=-1),)

    return _record(out, (x,), backward)


def reshape(x, shape):
    src = x.shape
    out = _wrap(x.data.reshape(shape), (x,))
    return _record(out, (x,), lambda g: (g.reshape(src),))


def transpose(x, axes):
    inv = np.argsort(axes)
    out = _wrap(np.ascontiguousarray(x.data.transpose(axes)), (x,))
    return _record(out, (x,), lambda g: (g.transpose(inv),))


def concat(xs, axis):
    sizes = [t.shape[axis] for t in xs]
    out = _wrap(np.concatenate([t.data for t in xs], axis=axis), tuple(xs))
    cuts = np.cumsum(sizes)[:-1]
    return _record(out, tuple(xs), lambda g: tuple(np.split(g, cuts, axis=axis)))


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckReport:
    """Worst normwise relative error per input, plus the offending coordinate."""

    errors: list
    coords: list
    tol: float
    names: list = field(default_factory=list)

    @property
    def max_error(self):
        return max(self.errors) if self.errors else 0.0

    @property
    def passed(self):
        return self.max_error <= self.tol

    def raise_on_failure(self):
        if not self.passed:
            i = int(np.argmax(self.errors))
            name = self.names[i] if self.names else f"input {i}"
            raise GradCheckError(
                f"{name}: relative error {self.errors[i]:.3e} > {self.tol:.1e} "
                f"at coordinate {self.coords[i]}")


def _relative_error(analytic, numeric):
    denom = max(np.max(np.abs(analytic)), np.max(np.abs(numeric)), 1e-300)
    diff = np.abs(analytic - numeric)
    return float(diff.max() / denom), np.unravel_index(int(diff.argmax()), diff.shape)


def grad_check(fn, inputs, tol=1e-6, h=FD_STEP, seed=0, names=None, max_coords=None):
    """Compare tape gradients of ``fn`` against central finite differences.

    ``fn`` maps a list of Tensors to a Tensor; it is reduced to a scalar by a
    fixed random projection. ``inputs`` is a list of arrays. With
    ``max_coords`` only that many randomly chosen coordinates per input are
    differenced.
    """
    rng = np.random.default_rng(seed)
    arrays = [np.array(a, dtype=np.float64) for a in inputs]

    def scalar(vals):
        out = fn([Tensor(v) for v in vals])
        return float(np.sum(out.data * proj))

    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    with Tape() as tape:
        out = fn(tensors)
    proj = rng.standard_normal(out.shape)
    tape.backward(out, proj)

    errors, coords = [], []
    for idx, (a, t) in enumerate(zip(arrays, tensors)):
        analytic = np.zeros_like(a) if t.grad is None else t.grad
        flat = np.arange(a.size)
        if max_coords is not None and a.size > max_coords:
            flat = np.sort(rng.choice(a.size, size=max_coords, replace=False))
        numeric = np.zeros(len(flat))
        for n, f in enumerate(flat):
            pos = np.unravel_index(f, a.shape)
            vals = [v.copy() for v in arrays]
            vals[idx][pos] += h
            up = scalar(vals)
            vals[idx][pos] -= 2 * h
            down = scalar(vals)
            numeric[n] = (up - down) / (2 * h)
        err, where = _relative_error(analytic.ravel()[flat], numeric)
        errors.append(err)
        coords.append(tuple(int(c) for c in np.unravel_index(flat[where[0]], a.shape)))
    return GradCheckReport(errors, coords, tol, list(names or []))
