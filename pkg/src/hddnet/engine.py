"""Dense float64 arrays with define-by-run reverse-mode differentiation.

Every operation that the detector and descriptor networks use lives here.
Arrays that require gradients remember the operation that produced them;
``backward`` rebuilds the tape from those links and replays it in reverse
record order.

Feature maps are laid out channels-first, ``(C, H, W)`` or ``(N, C, H, W)``.
Convolutions use cross-correlation (no kernel flip) and zero padding.
"""

import itertools
import threading
from contextlib import contextmanager

import numpy as np

_node_ids = itertools.count()
_state = threading.local()


@contextmanager
def no_grad():
    """Within this block results never record their inputs (inference mode)."""
    prev = getattr(_state, "no_grad", False)
    _state.no_grad = True
    try:
        yield
    finally:
        _state.no_grad = prev


def grad_enabled():
    return not getattr(_state, "no_grad", False)


class ShapeError(ValueError):
    pass


class DiffArray:
    """An n-dimensional float64 array with an optional gradient slot."""

    __array_priority__ = 1000
    __slots__ = ("data", "grad", "requires_grad", "name", "node_id", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, name=None, _parents=(), _backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name
        self.node_id = next(_node_ids)
        self._parents = _parents
        self._backward = _backward

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

    @property
    def is_leaf(self):
        return self._backward is None

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self):
        return DiffArray(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = f", name={self.name!r}" if self.name else ""
        return f"DiffArray(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    def __len__(self):
        return self.data.shape[0]

    # -- differentiation --------------------------------------------------

    def backward(self):
        backward(self)

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
        return mul(self, -1.0)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sqrt(self):
        return sqrt(self)


class Tape:
    """Operations reachable from an output, in record (node-id) order.

    Inputs are created before the operations that consume them, so sorting by
    node id is a topological order; the reverse pass visits each op once.
    """

    def __init__(self, ops):
        self.ops = ops

    @classmethod
    def record(cls, output):
        seen = set()
        ops = []
        stack = [output]
        while stack:
            node = stack.pop()
            if node.node_id in seen or not node.requires_grad or node.is_leaf:
                continue
            seen.add(node.node_id)
            ops.append(node)
            stack.extend(node._parents)
        ops.sort(key=lambda n: n.node_id)
        return cls(ops)

    def __len__(self):
        return len(self.ops)

    def backward(self, output, seed):
        pending = {output.node_id: seed}
        if output.is_leaf:
            _accumulate_leaf(output, seed)
            return
        for node in reversed(self.ops):
            g = pending.pop(node.node_id, None)
            if g is None:
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                if parent.is_leaf:
                    _accumulate_leaf(parent, pg)
                elif parent.node_id in pending:
                    pending[parent.node_id] = pending[parent.node_id] + pg
                else:
                    pending[parent.node_id] = pg


def _accumulate_leaf(leaf, g):
    g = np.asarray(g, dtype=np.float64)
    if g.shape != leaf.shape:
        g = np.broadcast_to(g, leaf.shape)
    leaf.grad = np.array(g, dtype=np.float64) if leaf.grad is None else leaf.grad + g


def backward(loss):
    """Accumulate d(loss)/d(leaf) into every trainable leaf reachable from ``loss``."""
    if loss.size != 1:
        raise ShapeError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    Tape.record(loss).backward(loss, np.ones_like(loss.data))


def param(data, name=None):
    """A trainable leaf."""
    return DiffArray(data, requires_grad=True, name=name)


def const(x):
    return x if isinstance(x, DiffArray) else DiffArray(x)


def _result(data, parents, backward_fn):
    if grad_enabled() and any(p.requires_grad for p in parents):
        return DiffArray(data, requires_grad=True, _parents=tuple(parents), _backward=backward_fn)
    return DiffArray(data)


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# -- elementwise ----------------------------------------------------------


def _pair_grads(a, b, ga, gb):
    """Evaluate only the gradient closures whose input needs them."""
    return (_unbroadcast(ga(), a.shape) if a.requires_grad else None,
            _unbroadcast(gb(), b.shape) if b.requires_grad else None)


def add(a, b):
    a, b = const(a), const(b)
    return _result(a.data + b.data, (a, b), lambda g: _pair_grads(a, b, lambda: g, lambda: g))


def sub(a, b):
    a, b = const(a), const(b)
    return _result(a.data - b.data, (a, b), lambda g: _pair_grads(a, b, lambda: g, lambda: -g))


def mul(a, b):
    a, b = const(a), const(b)
    return _result(a.data * b.data, (a, b),
                   lambda g: _pair_grads(a, b, lambda: g * b.data, lambda: g * a.data))


def div(a, b):
    a, b = const(a), const(b)
    out = a.data / b.data
    return _result(out, (a, b),
                   lambda g: _pair_grads(a, b, lambda: g / b.data, lambda: -g * out / b.data))


def power(x, exponent):
    x = const(x)
    p = float(exponent)
    return _result(x.data ** p, (x,), lambda g: (g * p * x.data ** (p - 1.0),))


def exp(x):
    x = const(x)
    out = np.exp(x.data)
    return _result(out, (x,), lambda g: (g * out,))


def log(x):
    x = const(x)
    return _result(np.log(x.data), (x,), lambda g: (g / x.data,))


def sqrt(x):
    x = const(x)
    out = np.sqrt(x.data)
    return _result(out, (x,), lambda g: (g * 0.5 / out,))


def relu(x):
    x = const(x)
    mask = x.data > 0
    return _result(np.maximum(x.data, 0.0), (x,), lambda g: (g * mask,))


# -- reductions and shape ops ---------------------------------------------


def sum_(x, axis=None, keepdims=False):
    x = const(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape),)

    return _result(out, (x,), back)


def mean(x, axis=None, keepdims=False):
    x = const(x)
    if axis is None:
        count = x.size
    else:
        axes = (axis,) if np.isscalar(axis) else axis
        count = int(np.prod([x.shape[a] for a in axes]))
    return sum_(x, axis, keepdims) * (1.0 / count)


def reshape(x, shape):
    x = const(x)
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x, axes=None):
    x = const(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inverse = np.argsort(axes)
    return _result(x.data.transpose(axes), (x,), lambda g: (g.transpose(inverse),))


def _is_basic_index(index):
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in items)


def getitem(x, index):
    x = const(x)
    basic = _is_basic_index(index)

    def back(g):
        full = np.zeros(x.shape)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _result(x.data[index], (x,), back)


def concat(arrays, axis=0):
    arrays = [const(a) for a in arrays]
    sizes = [a.shape[axis] for a in arrays]
    splits = np.cumsum(sizes)[:-1]
    return _result(np.concatenate([a.data for a in arrays], axis=axis), arrays,
                   lambda g: tuple(np.split(g, splits, axis=axis)))


def stack(arrays, axis=0):
    arrays = [const(a) for a in arrays]
    out = np.stack([a.data for a in arrays], axis=axis)
    return _result(out, arrays,
                   lambda g: tuple(np.take(g, i, axis=axis) for i in range(len(arrays))))


def matmul(a, b):
    a, b = const(a), const(b)

    def back(g):
        ga = gb = None
        if b.ndim == 1:
            if a.requires_grad:
                ga = np.outer(g, b.data) if a.ndim == 2 else g[..., None] * b.data
            if b.requires_grad:
                gb = a.data.T @ g if a.ndim == 2 else np.einsum("...ij,...i->j", a.data, g)
            return ga, gb
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _result(a.data @ b.data, (a, b), back)


def pad2d(x, ph, pw, mode="zeros"):
    """Pad the last two axes. ``mode`` is ``zeros`` or ``edge`` (replicate)."""
    x = const(x)
    h, w = x.shape[-2:]
    if mode == "zeros":
        width = [(0, 0)] * (x.ndim - 2) + [(ph, ph), (pw, pw)]
        out = np.pad(x.data, width)
        return _result(out, (x,), lambda g: (g[..., ph:ph + h, pw:pw + w],))
    if mode != "edge":
        raise ValueError(f"unknown padding mode {mode!r}")
    rows = np.clip(np.arange(-ph, h + ph), 0, h - 1)
    cols = np.clip(np.arange(-pw, w + pw), 0, w - 1)
    out = x.data[..., rows, :][..., :, cols]

    def back(g):
        gr = np.zeros(g.shape[:-1] + (w,))
        np.add.at(np.moveaxis(gr, -1, 0), cols, np.moveaxis(g, -1, 0))
        full = np.zeros(x.shape)
        np.add.at(np.moveaxis(full, -2, 0), rows, np.moveaxis(gr, -2, 0))
        return (full,)

    return _result(out, (x,), back)


# -- network ops ----------------------------------------------------------


def _row_taps(xp, i, stride, ho, wo, kw):
    """(N*ho*wo, C*kw) inputs seen by kernel row i, ordered (c, j) like ``w[:, :, i, :]``."""
    rows = xp[:, i:i + stride * (ho - 1) + 1:stride]
    win = np.lib.stride_tricks.sliding_window_view(rows, kw, axis=2)[:, :, ::stride][:, :, :wo]
    return win.reshape(-1, xp.shape[-1] * kw)


def _conv_forward(xp, w, stride, ho, wo):
    # xp: (N, Hp, Wp, C) padded, channels-last; w: (K, C, kh, kw)
    k, c, kh, kw = w.shape
    out = np.zeros((xp.shape[0] * ho * wo, k))
    for i in range(kh):
        out += _row_taps(xp, i, stride, ho, wo, kw) @ w[:, :, i, :].reshape(k, c * kw).T
    return out.reshape(xp.shape[0], ho, wo, k)


def conv2d(x, kernels, bias=None, stride=1, padding="same"):
    """2-D cross-correlation of ``x`` (C,H,W) or (N,C,H,W) with (K,C,kh,kw) kernels."""
    x, kernels = const(x), const(kernels)
    squeeze = x.ndim == 3
    xd = x.data[None] if squeeze else x.data
    if kernels.ndim != 4:
        raise ShapeError(f"kernels must be (K, C, kh, kw), got {kernels.shape}")
    k, c, kh, kw = kernels.shape
    if xd.ndim != 4 or xd.shape[1] != c:
        raise ShapeError(f"input {x.shape} does not match kernel channels {c}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"kernel sides must be odd, got {kh}x{kw}")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    if padding == "same":
        ph, pw = kh // 2, kw // 2
    elif padding == "valid":
        ph = pw = 0
    else:
        raise ValueError(f"unknown padding {padding!r}")

    n, _, h, w = xd.shape
    hp, wp = h + 2 * ph, w + 2 * pw
    ho, wo = (hp - kh) // stride + 1, (wp - kw) // stride + 1
    xp = np.zeros((n, hp, wp, c))
    xp[:, ph:ph + h, pw:pw + w, :] = xd.transpose(0, 2, 3, 1)
    out = _conv_forward(xp, kernels.data, stride, ho, wo)
    if bias is not None:
        bias = const(bias)
        out = out + bias.data
    result = out.transpose(0, 3, 1, 2)
    if squeeze:
        result = result[0]

    def back(g):
        g = g[None] if squeeze else g
        g = np.ascontiguousarray(g.transpose(0, 2, 3, 1))  # N, ho, wo, K
        gflat = g.reshape(-1, k)
        gw = np.zeros(kernels.shape) if kernels.requires_grad else None
        gxp = np.zeros_like(xp) if x.requires_grad else None
        for i in range(kh):
            if gw is not None:
                gw[:, :, i, :] = (gflat.T @ _row_taps(xp, i, stride, ho, wo, kw)).reshape(k, c, kw)
            if gxp is not None:
                gcols = (gflat @ kernels.data[:, :, i, :].reshape(k, c * kw)).reshape(n, ho, wo, c, kw)
                for j in range(kw):
                    gxp[:, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride] += gcols[..., j]
        gx = None
        if gxp is not None:
            gx = gxp[:, ph:ph + h, pw:pw + w, :].transpose(0, 3, 1, 2)
            gx = gx[0] if squeeze else gx
        grads = [gx, gw]
        if bias is not None:
            grads.append(gflat.sum(axis=0))
        return tuple(grads)

    parents = (x, kernels) if bias is None else (x, kernels, bias)
    return _result(result, parents, back)


def softmax(x, axis=-1):
    x = const(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)
    return _result(out, (x,),
                   lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),))


def l2_normalize(x, axis=0, eps=1e-12):
    """Unit Euclidean norm along ``axis``; norms below ``eps`` are clamped to ``eps``."""
    x = const(x)
    norm = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True))
    clamped = norm <= eps
    n = np.where(clamped, eps, norm)
    out = x.data / n

    def back(g):
        proj = (g * out).sum(axis=axis, keepdims=True)
        return (np.where(clamped, g / n, (g - out * proj) / n),)

    return _result(out, (x,), back)


def _resize_matrix(n_in, n_out):
    m = np.zeros((n_out, n_in))
    if n_out == 1 or n_in == 1:
        m[:, 0] = 1.0
        return m
    src = np.arange(n_out) * (n_in - 1) / (n_out - 1)
    lo = np.minimum(np.floor(src).astype(int), n_in - 1)
    frac = src - lo
    hi = np.minimum(lo + 1, n_in - 1)
    rows = np.arange(n_out)
    np.add.at(m, (rows, lo), 1.0 - frac)
    np.add.at(m, (rows, hi), frac)
    return m


def bilinear_resize(x, out_h, out_w):
    """Align-corners bilinear resize of the last two axes."""
    if out_h < 1 or out_w < 1:
        raise ValueError("output size must be positive")
    x = const(x)
    h, w = x.shape[-2:]
    ry = _resize_matrix(h, out_h)
    rx = _resize_matrix(w, out_w)
    out = ry @ x.data @ rx.T
    return _result(out, (x,), lambda g: (ry.T @ g @ rx,))


def _cyclic_triples(c):
    return np.array([sorted({2 * k, 2 * k + 1, (2 * k + 2) % c}) for k in range(c // 2)])


def channel_max3(x):
    """Cyclic channel max-pool: channel k = max over input channels 2k, 2k+1, 2k+2 (mod C).

    Operates on axis -3. Gradient goes to the winning channel; ties go to the
    lowest channel index.
    """
    x = const(x)
    if x.ndim < 3:
        raise ShapeError("channel_max3 needs (C, H, W) or (N, C, H, W)")
    c = x.shape[-3]
    if c % 2 or c < 4:
        raise ShapeError(f"channel_max3 needs an even channel count >= 4, got {c}")
    triples = _cyclic_triples(c)  # (C/2, 3), ascending per row
    gathered = np.take(x.data, triples, axis=-3)  # (..., C/2, 3, H, W)
    choice = gathered.argmax(axis=-3)  # first occurrence == lowest channel
    out = np.take_along_axis(gathered, choice[..., None, :, :], axis=-3)[..., 0, :, :]
    winners = triples[np.arange(c // 2)[:, None, None], choice]  # (..., C/2, H, W)

    def back(g):
        full = np.zeros(x.shape)
        lead = np.indices(winners.shape)
        idx = list(lead)
        idx[-3] = winners
        np.add.at(full, tuple(idx), g)
        return (full,)

    return _result(out, (x,), back)


def sample_bilinear(x, points, batch=None):
    """Bilinearly sample a (C, H, W) map at ``points`` (M, 2) given as (x, y).

    With ``batch`` (M,) the map is (N, C, H, W) and point m reads image
    ``batch[m]``. Returns (M, C); differentiable in the map and the points.
    Points must lie inside [0, W-1] x [0, H-1].
    """
    x = const(x)
    points = const(points)
    h, w = x.shape[-2:]
    px, py = points.data[:, 0], points.data[:, 1]
    if np.any(px < 0) or np.any(py < 0) or np.any(px > w - 1) or np.any(py > h - 1):
        raise ValueError("sample point outside the map")
    if (batch is None) != (x.ndim == 3):
        raise ShapeError("batch indices are required exactly when the map is (N, C, H, W)")
    data = x.data[None] if batch is None else x.data
    b = np.zeros(len(px), dtype=int) if batch is None else np.asarray(batch, dtype=int)
    x0 = np.floor(px).astype(int)
    y0 = np.floor(py).astype(int)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (px - x0)[:, None]
    fy = (py - y0)[:, None]
    v00, v01 = data[b, :, y0, x0], data[b, :, y0, x1]
    v10, v11 = data[b, :, y1, x0], data[b, :, y1, x1]
    out = (v00 * (1 - fx) + v01 * fx) * (1 - fy) + (v10 * (1 - fx) + v11 * fx) * fy

    def back(g):
        gmap = gpts = None
        if x.requires_grad:
            full = np.zeros(data.shape)
            for yy, xx, wgt in ((y0, x0, (1 - fx) * (1 - fy)), (y0, x1, fx * (1 - fy)),
                                (y1, x0, (1 - fx) * fy), (y1, x1, fx * fy)):
                np.add.at(full, (b, slice(None), yy, xx), g * wgt)
            gmap = full[0] if batch is None else full
        if points.requires_grad:
            dx = (1 - fy) * (v01 - v00) + fy * (v11 - v10)
            dy = (1 - fx) * (v10 - v00) + fx * (v11 - v01)
            gpts = np.stack([(g * dx).sum(axis=1), (g * dy).sum(axis=1)], axis=1)
        return gmap, gpts

    return _result(out, (x, points), back)


# -- finite differences ---------------------------------------------------


def numerical_grad(fn, array, eps=1e-4, indices=None):
    """Central finite differences of scalar ``fn()`` w.r.t. entries of ``array.data``.

    ``array`` is perturbed in place and restored. ``indices`` limits the check
    to a subset of flat positions; other entries are returned as NaN.
    """
    flat = array.data.reshape(-1)
    out = np.full(flat.shape, np.nan)
    positions = range(flat.size) if indices is None else indices
    for i in positions:
        orig = flat[i]
        flat[i] = orig + eps
        up = float(fn().data)
        flat[i] = orig - eps
        down = float(fn().data)
        flat[i] = orig
        out[i] = (up - down) / (2 * eps)
    return out.reshape(array.shape)


def relative_error(analytic, numeric):
    analytic = np.asarray(analytic, dtype=float).ravel()
    numeric = np.asarray(numeric, dtype=float).ravel()
    keep = ~np.isnan(numeric)
    a, n = analytic[keep], numeric[keep]
    scale = max(np.linalg.norm(a), np.linalg.norm(n), 1e-12)
    return float(np.linalg.norm(a - n) / scale)


def check_gradients(fn, arrays, eps=1e-4, max_entries=None, rng=None):
    """Compare backprop gradients with finite differences; returns worst relative error."""
    for a in arrays:
        a.zero_grad()
    loss = fn()
    backward(loss)
    worst = 0.0
    for a in arrays:
        analytic = np.zeros(a.shape) if a.grad is None else a.grad.copy()
        indices = None
        if max_entries is not None and a.size > max_entries:
            rng = rng or np.random.default_rng(0)
            indices = rng.choice(a.size, size=max_entries, replace=False)
        numeric = numerical_grad(fn, a, eps=eps, indices=indices)
        worst = max(worst, relative_error(analytic, numeric))
    return worst
