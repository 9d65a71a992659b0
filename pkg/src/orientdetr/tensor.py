"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every op computes its forward value with numpy and, when any input
participates in the graph, records a closure mapping the output gradient to
input gradients. ``Tensor.backward`` walks the recorded graph once in reverse
topological order and then releases it.
"""

from __future__ import annotations

import contextlib

import numpy as np
from scipy import sparse

__all__ = [
    "DimensionError",
    "Tensor",
    "as_tensor",
    "no_grad",
    "is_grad_enabled",
    "add",
    "sub",
    "mul",
    "div",
    "matmul",
    "linear",
    "relu",
    "sigmoid",
    "tanh",
    "exp",
    "log",
    "sqrt",
    "sin",
    "cos",
    "absolute",
    "clamp",
    "softmax",
    "layer_norm",
    "conv2d",
    "concat",
    "stack",
    "gather",
    "where",
    "inverse_sigmoid",
    "wrap_angle",
    "softplus",
    "bilinear_sample",
]

_GRAD_ENABLED = True


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible for an op."""


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self.name = name

    # -- basic properties -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self.data.item()

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self):
        return len(self.data)

    # -- operators --------------------------------------------------------
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
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return _neg(self)

    def __pow__(self, exponent):
        return _power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return _getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return _reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        return _transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return _sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        n = self.data.size if axis is None else np.prod([self.shape[a] for a in np.atleast_1d(axis)])
        return _sum(self, axis, keepdims) * (1.0 / n)

    # -- differentiation --------------------------------------------------
    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into ``.grad`` of every reachable tensor.

        The graph is released afterwards; call again only on a fresh forward.
        """
        if grad is None:
            if self.data.size != 1:
                raise ValueError(
                    f"backward() needs a scalar root or an explicit grad, got shape {self.shape}"
                )
            grad = np.ones_like(self.data)
        order = _topological_order(self)
        grads = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            node.grad = g if node.grad is None else node.grad + g
            if node._backward is None:
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
            node._parents = ()
            node._backward = None


def _topological_order(root):
    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
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


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward):
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# -- elementwise binary ----------------------------------------------------
def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), backward)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), backward)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), backward)


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a, b)
    out = a.data / b.data

    def backward(g):
        return _unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)

    return _make(out, (a, b), backward)


def _neg(a):
    return _make(-a.data, (a,), lambda g: (-g,))


def _power(a, exponent):
    exponent = float(exponent)
    out = a.data**exponent
    return _make(out, (a,), lambda g: (g * exponent * a.data ** (exponent - 1.0),))


def where(cond, a, b):
    """Select from ``a`` where ``cond`` holds, else ``b``; ``cond`` is constant."""
    a, b = as_tensor(a), as_tensor(b)
    cond = np.asarray(cond, dtype=bool)
    out = np.where(cond, a.data, b.data)

    def backward(g):
        return (
            _unbroadcast(np.where(cond, g, 0.0), a.shape),
            _unbroadcast(np.where(cond, 0.0, g), b.shape),
        )

    return _make(out, (a, b), backward)


# -- elementwise unary -----------------------------------------------------
def relu(x):
    x = as_tensor(x)
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def sigmoid(x):
    x = as_tensor(x)
    out = np.empty_like(x.data)
    pos = x.data >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x.data[pos]))
    ez = np.exp(x.data[~pos])
    out[~pos] = ez / (1.0 + ez)
    return _make(out, (x,), lambda g: (g * out * (1.0 - out),))


def tanh(x):
    x = as_tensor(x)
    out = np.tanh(x.data)
    return _make(out, (x,), lambda g: (g * (1.0 - out * out),))


def exp(x):
    x = as_tensor(x)
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,))


def log(x):
    x = as_tensor(x)
    return _make(np.log(x.data), (x,), lambda g: (g / x.data,))


def sqrt(x):
    x = as_tensor(x)
    out = np.sqrt(x.data)
    return _make(out, (x,), lambda g: (g * 0.5 / out,))


def sin(x):
    x = as_tensor(x)
    return _make(np.sin(x.data), (x,), lambda g: (g * np.cos(x.data),))


def cos(x):
    x = as_tensor(x)
    return _make(np.cos(x.data), (x,), lambda g: (-g * np.sin(x.data),))


def absolute(x):
    x = as_tensor(x)
    return _make(np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),))


def clamp(x, lo=None, hi=None):
    x = as_tensor(x)
    out = np.clip(x.data, lo, hi)
    inside = np.ones(x.shape, dtype=bool)
    if lo is not None:
        inside &= x.data >= lo
    if hi is not None:
        inside &= x.data <= hi
    return _make(out, (x,), lambda g: (g * inside,))


def inverse_sigmoid(x, eps=1e-5):
    """Logit of ``x`` after clamping into ``[eps, 1 - eps]``."""
    x = clamp(as_tensor(x), eps, 1.0 - eps)
    return log(x) - log(1.0 - x)


def wrap_angle(x, period=np.pi, low=-np.pi / 2):
    """Reduce angles into ``[low, low + period)``; gradient passes through unchanged.

    ``period`` may be an array broadcastable against ``x``.
    """
    x = as_tensor(x)
    shift = period * np.floor((x.data - low) / period)
    out = x.data - shift
    # guard the upper edge against rounding
    out = np.where(out >= low + period, low, out)
    return _make(out, (x,), lambda g: (g,))


def softplus(x):
    """``log(1 + exp(x))``, computed stably."""
    x = as_tensor(x)
    out = np.maximum(x.data, 0.0) + np.log1p(np.exp(-np.abs(x.data)))
    sig = np.exp(x.data - out)
    return _make(out, (x,), lambda g: (g * sig,))


# -- reductions and shape ops ---------------------------------------------
def _sum(x, axis, keepdims):
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(out, (x,), backward)


def _reshape(x, shape):
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot reshape {x.shape} into {shape}") from None
    return _make(out, (x,), lambda g: (g.reshape(x.shape),))


def _transpose(x, axes):
    inv = np.argsort(axes)
    return _make(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def _is_advanced(index):
    items = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def _getitem(x, index):
    if isinstance(index, Tensor):
        index = index.data.astype(np.int64)
    out = x.data[index]
    advanced = _is_advanced(index)

    def backward(g):
        full = np.zeros_like(x.data)
        if advanced:
            np.add.at(full, index, g)
        else:
            full[index] += g
        return (full,)

    return _make(np.array(out, copy=True), (x,), backward)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        shapes = [t.shape for t in tensors]
        raise DimensionError(f"concat: incompatible shapes {shapes} along axis {axis}") from None
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(out, tensors, backward)


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    shapes = {t.shape for t in tensors}
    if len(shapes) != 1:
        raise DimensionError(f"stack: mismatched shapes {sorted(shapes)}")
    out = np.stack([t.data for t in tensors], axis=axis)

    def backward(g):
        return tuple(np.moveaxis(g, axis, 0))

    return _make(out, tensors, backward)


def gather(x, indices, axis):
    """``np.take_along_axis`` with gradient; ``indices`` is a constant int array."""
    x = as_tensor(x)
    indices = np.asarray(indices, dtype=np.int64)
    out = np.take_along_axis(x.data, indices, axis=axis)

    def backward(g):
        full = np.zeros_like(x.data)
        axis_ = axis % x.ndim
        grids = np.meshgrid(*[np.arange(n) for n in indices.shape], indexing="ij", sparse=True)
        grids = [np.broadcast_to(gr, indices.shape) for gr in grids]
        # broadcasting of non-gather axes is not supported here
        grids[axis_] = indices
        np.add.at(full, tuple(grids), g)
        return (full,)

    return _make(out, (x,), backward)


# -- linear algebra --------------------------------------------------------
def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} @ {b.shape}") from None

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(out, (a, b), backward)


def linear(x, weight, bias=None):
    """``x @ weight + bias`` over the last axis; ``weight`` is (in, out)."""
    x, weight = as_tensor(x), as_tensor(weight)
    if weight.ndim != 2 or x.shape[-1] != weight.shape[0]:
        raise DimensionError(f"linear: input {x.shape} does not match weight {weight.shape}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, x.shape[-1])
    out = x2 @ weight.data
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (weight.shape[1],):
            raise DimensionError(f"linear: bias {bias.shape} does not match weight {weight.shape}")
        out = out + bias.data
    out = out.reshape(lead + (weight.shape[1],))

    def backward(g):
        g2 = g.reshape(-1, weight.shape[1])
        gx = (g2 @ weight.data.T).reshape(x.shape)
        gw = x2.T @ g2
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, parents, backward)


# -- normalisation ---------------------------------------------------------
def softmax(x, axis=-1):
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (x,), backward)


def layer_norm(x, gamma, beta, eps=1e-5):
    """Normalise over the last axis, then scale by ``gamma`` and shift by ``beta``."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(
            f"layer_norm: input {x.shape} needs gamma/beta of shape ({c},), "
            f"got {gamma.shape} and {beta.shape}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def backward(g):
        dxhat = g * gamma.data
        gx = inv * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        lead = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _make(out, (x, gamma, beta), backward)


# -- convolution -----------------------------------------------------------
def _pair(v):
    return (v, v) if np.isscalar(v) else tuple(v)


def conv2d(x, weight, bias=None, stride=1, padding=0):
    """2-D convolution on channels-last input.

    x: (B, H, W, Cin); weight: (kh, kw, Cin, Cout); bias: (Cout,).
    ``padding`` may be an int or a (pad_h, pad_w) pair; padding is symmetric.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4 or x.shape[3] != weight.shape[2]:
        raise DimensionError(f"conv2d: input {x.shape} does not match kernel {weight.shape}")
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    kh, kw, cin, cout = weight.shape
    b, h, w, _ = x.shape
    xp = np.pad(x.data, ((0, 0), (ph, ph), (pw, pw), (0, 0))) if (ph or pw) else x.data
    hp, wp = xp.shape[1], xp.shape[2]
    ho = (hp - kh) // sh + 1
    wo = (wp - kw) // sw + 1
    if ho <= 0 or wo <= 0:
        raise DimensionError(f"conv2d: kernel {weight.shape} larger than padded input {xp.shape}")
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    win = win[:, : (ho - 1) * sh + 1 : sh, : (wo - 1) * sw + 1 : sw]
    # (B, Ho, Wo, Cin, kh, kw) -> (B*Ho*Wo, kh*kw*Cin)
    cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(b * ho * wo, kh * kw * cin)
    wmat = weight.data.reshape(kh * kw * cin, cout)
    out = cols @ wmat
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data
    out = out.reshape(b, ho, wo, cout)

    def backward(g):
        g2 = g.reshape(-1, cout)
        gw = (cols.T @ g2).reshape(weight.shape)
        gcols = (g2 @ wmat.T).reshape(b, ho, wo, kh, kw, cin)
        gxp = np.zeros((b, hp, wp, cin))
        for i in range(kh):
            for j in range(kw):
                gxp[:, i : i + sh * ho : sh, j : j + sw * wo : sw] += gcols[:, :, :, i, j]
        gx = gxp[:, ph : ph + h, pw : pw + w]
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, parents, backward)


# -- sampling --------------------------------------------------------------
def bilinear_sample(feature, points):
    """Bilinearly sample ``feature`` at continuous pixel coordinates.

    feature: (B, H, W, C); points: (B, P, 2) holding (x, y) with grid node
    (row i, col j) at x = j, y = i. Corners outside the grid read as zero.
    Returns (B, P, C). Gradients flow to both the feature and the points.
    """
    feature, points = as_tensor(feature), as_tensor(points)
    if feature.ndim != 4 or points.ndim != 3 or points.shape[2] != 2 or points.shape[0] != feature.shape[0]:
        raise DimensionError(
            f"bilinear_sample: feature {feature.shape} and points {points.shape} "
            "must be (B, H, W, C) and (B, P, 2)"
        )
    b, h, w, c = feature.shape
    p = points.shape[1]
    px = points.data[..., 0]
    py = points.data[..., 1]
    x0 = np.floor(px)
    y0 = np.floor(py)
    fx = px - x0
    fy = py - y0
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    flat = feature.data.reshape(b * h * w, c)
    base = (np.arange(b) * (h * w))[:, None]
    a_rb = (1 - fx) * (1 - fy)
    a_lb = fx * (1 - fy)
    a_rt = (1 - fx) * fy
    a_lt = fx * fy

    # Interpolation as a sparse (B*P, B*H*W) matrix: forward is S @ flat and
    # the feature gradient is S.T @ g. The same sparsity pattern with the
    # weights' x and y derivatives gives the point gradient.
    rows, cols, keep = [], [], []
    point_ids = np.arange(b * p)
    for dx, dy in ((0, 0), (1, 0), (0, 1), (1, 1)):
        xi = x0 + dx
        yi = y0 + dy
        valid = ((xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)).reshape(-1)
        idx = (base + np.clip(yi, 0, h - 1) * w + np.clip(xi, 0, w - 1)).reshape(-1)
        rows.append(point_ids[valid])
        cols.append(idx[valid])
        keep.append(valid)
    rows, cols = np.concatenate(rows), np.concatenate(cols)

    def matrix(*corner_weights):
        vals = np.concatenate([wgt.reshape(-1)[k] for wgt, k in zip(corner_weights, keep)])
        return sparse.csr_matrix((vals, (rows, cols)), shape=(b * p, b * h * w))

    interp = matrix(a_rb, a_lb, a_rt, a_lt)
    out = np.asarray(interp @ flat).reshape(b, p, c)

    def backward(g):
        gfeat = None
        g2 = g.reshape(b * p, c)
        if feature.requires_grad:
            gfeat = np.asarray(interp.T @ g2).reshape(feature.shape)
        gpts = None
        if points.requires_grad:
            dfx = np.asarray(matrix(fy - 1, 1 - fy, -fy, fy) @ flat)
            dfy = np.asarray(matrix(fx - 1, -fx, 1 - fx, fx) @ flat)
            gpts = np.stack([(g2 * dfx).sum(-1), (g2 * dfy).sum(-1)], axis=-1).reshape(b, p, 2)
        return gfeat, gpts

    return _make(out, (feature, points), backward)
