"""Dense tensor value type with reverse-mode gradient recording.

Values are immutable numpy arrays (float32 by default, float64 for
verification runs).  Every differentiable operation records a node holding
its inputs and a backward closure; ``backward`` walks the recording in
reverse topological order and returns gradients for named leaves.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager

import numpy as np

DIV_GUARD = 1e-12


class ShapeError(ValueError):
    pass


class NumericsError(ArithmeticError):
    """Raised when an operation produces or consumes non-finite values."""


_tls = threading.local()


def _grad_on():
    return getattr(_tls, "grad_enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording within the block (forward-only evaluation).

    The flag is thread-local; parallel evaluators do not interfere.
    """
    prev = _grad_on()
    _tls.grad_enabled = False
    try:
        yield
    finally:
        _tls.grad_enabled = prev


class Node:
    __slots__ = ("inputs", "bwd", "op")

    def __init__(self, inputs, bwd, op):
        self.inputs = inputs
        self.bwd = bwd
        self.op = op


class Tensor:
    """Row-major real array.  A tensor without a node is a leaf."""

    __slots__ = ("data", "node", "requires_grad", "name")

    def __init__(self, data, dtype=None, requires_grad=False, name=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        if not np.all(np.isfinite(arr)):
            raise NumericsError("non-finite values in tensor construction")
        self.data = arr
        self.node = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def astype(self, dtype):
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad,
                      name=self.name)

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name})"

    # arithmetic sugar; scalars go through the scale/shift paths
    def __add__(self, other):
        return elementwise("add", self, other)

    def __radd__(self, other):
        return elementwise("add", self, other)

    def __sub__(self, other):
        return elementwise("sub", self, other)

    def __mul__(self, other):
        return elementwise("mul", self, other)

    def __rmul__(self, other):
        return elementwise("mul", self, other)

    def __truediv__(self, other):
        return elementwise("div", self, other)

    def __neg__(self):
        return elementwise("scale", self, -1.0)

    def __getitem__(self, key):
        return slice_(self, key)


class Parameter:
    """Named trainable leaf.  Names are unique within a model."""

    def __init__(self, name, value, requires_grad=True):
        if not isinstance(value, Tensor):
            value = Tensor(value)
        value.requires_grad = requires_grad
        value.name = name
        self.name = name
        self.value = value
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.value.shape

    def assign(self, arr):
        """Replace the stored values in place (SGD update); shape is fixed."""
        arr = np.asarray(arr, dtype=self.value.dtype)
        if arr.shape != self.value.shape:
            raise ShapeError(f"parameter {self.name}: shape change "
                             f"{self.value.shape} -> {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise NumericsError(f"non-finite update for parameter {self.name}")
        fresh = Tensor(arr, requires_grad=self.requires_grad, name=self.name)
        self.value = fresh


def _wants_grad(*tensors):
    if not _grad_on():
        return False
    return any(isinstance(t, Tensor) and (t.requires_grad or t.node is not None)
               for t in tensors)


def _make(data, inputs, bwd, op):
    if not np.all(np.isfinite(data)):
        raise NumericsError(f"non-finite values produced by {op}")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = False
    out.name = None
    out.node = Node(tuple(inputs), bwd, op) if _wants_grad(*inputs) else None
    return out


def _unbroadcast(grad, shape):
    """Reduce a broadcast gradient back to the original operand shape."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _check_broadcast(a_shape, b_shape, op):
    """Trailing-1 broadcast rule: align from the right, dims equal or 1."""
    for da, db in zip(reversed(a_shape), reversed(b_shape)):
        if da != db and da != 1 and db != 1:
            raise ShapeError(f"{op}: shapes {a_shape} and {b_shape} "
                             "are not broadcastable")


def elementwise(op_kind, a, b):
    """Pointwise add/sub/mul/div of two tensors, or scale by a scalar."""
    if not isinstance(a, Tensor):
        a = Tensor(a)
    if op_kind == "scale":
        s = float(b)
        data = a.data * a.dtype.type(s)

        def bwd(g):
            return (g * a.dtype.type(s),)

        return _make(data, (a,), bwd, "scale")

    if not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    _check_broadcast(a.shape, b.shape, op_kind)
    ash, bsh = a.shape, b.shape

    if op_kind == "add":
        data = a.data + b.data

        def bwd(g):
            return _unbroadcast(g, ash), _unbroadcast(g, bsh)
    elif op_kind == "sub":
        data = a.data - b.data

        def bwd(g):
            return _unbroadcast(g, ash), -_unbroadcast(g, bsh)
    elif op_kind == "mul":
        data = a.data * b.data
        ad, bd = a.data, b.data

        def bwd(g):
            return _unbroadcast(g * bd, ash), _unbroadcast(g * ad, bsh)
    elif op_kind == "div":
        if np.any(np.abs(b.data) < DIV_GUARD):
            raise NumericsError(f"division by |b| < {DIV_GUARD}")
        data = a.data / b.data
        ad, bd = a.data, b.data

        def bwd(g):
            return (_unbroadcast(g / bd, ash),
                    _unbroadcast(-g * ad / (bd * bd), bsh))
    else:
        raise ValueError(f"unknown op_kind {op_kind!r}")
    return _make(data, (a, b), bwd, op_kind)


def matmul(a, b):
    """2-D matrix product [m x k] @ [k x n]."""
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError("matmul expects rank-2 operands")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    data = a.data @ b.data
    ad, bd = a.data, b.data

    def bwd(g):
        return g @ bd.T, ad.T @ g

    return _make(data, (a, b), bwd, "matmul")


def einsum2(subscripts, a, b):
    """Two-operand einsum contraction with recorded backward.

    Every index of each operand must appear in the output or in the other
    operand (no silently summed private indices).
    """
    ins, out_sub = subscripts.replace(" ", "").split("->")
    sa, sb = ins.split(",")
    for idx in sa:
        if idx not in out_sub and idx not in sb:
            raise ValueError(f"einsum2: private index {idx!r} in first operand")
    for idx in sb:
        if idx not in out_sub and idx not in sa:
            raise ValueError(f"einsum2: private index {idx!r} in second operand")
    if not isinstance(a, Tensor):
        a = Tensor(a)
    if not isinstance(b, Tensor):
        b = Tensor(b)
    data = np.einsum(subscripts, a.data, b.data)
    ad, bd = a.data, b.data

    def bwd(g):
        ga = np.einsum(f"{out_sub},{sb}->{sa}", g, bd)
        gb = np.einsum(f"{sa},{out_sub}->{sb}", ad, g)
        return ga, gb

    return _make(data, (a, b), bwd, "einsum2")


def _pad_spatial(x, pads):
    """Zero-pad trailing spatial axes; pads is [(before, after), ...]."""
    lead = x.ndim - len(pads)
    return np.pad(x, [(0, 0)] * lead + list(pads))


def conv2d(x, w, bias=None, stride=1, padding=0):
    """Cross-correlation of (N,Cin,H,W) [or (Cin,H,W)] with (Cout,Cin,kh,kw)."""
    squeeze = False
    if x.data.ndim == 3:
        x = reshape(x, (1,) + x.shape)
        squeeze = True
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError("conv2d expects (N,Cin,H,W) and (Cout,Cin,kh,kw)")
    n, cin, h, wd = x.shape
    cout, cin_w, kh, kw = w.shape
    if cin != cin_w:
        raise ShapeError(f"conv2d channel mismatch: {cin} vs {cin_w}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError("conv2d kernel extents must be odd")
    ph, pw = (padding, padding) if np.isscalar(padding) else padding
    sh, sw = (stride, stride) if np.isscalar(stride) else stride
    hp, wp = h + 2 * ph, wd + 2 * pw
    if kh > hp or kw > wp:
        raise ShapeError("conv2d kernel larger than padded input")
    oh = (hp - kh) // sh + 1
    ow = (wp - kw) // sw + 1

    xp = _pad_spatial(x.data, [(ph, ph), (pw, pw)])
    s = xp.strides
    cols = np.lib.stride_tricks.as_strided(
        xp, (n, cin, kh, kw, oh, ow),
        (s[0], s[1], s[2], s[3], s[2] * sh, s[3] * sw))
    cols2 = cols.reshape(n, cin * kh * kw, oh * ow)
    wmat = w.data.reshape(cout, cin * kh * kw)
    out = (wmat @ cols2).reshape(n, cout, oh, ow)
    if bias is not None:
        out = out + bias.data.reshape(1, cout, 1, 1)

    cols_saved = cols2

    def bwd(g):
        gmat = g.reshape(n, cout, oh * ow)
        gw = np.einsum("nop,nkp->ok", gmat, cols_saved).reshape(w.shape)
        gcol = np.einsum("ok,nop->nkp", wmat, gmat)
        gcol = gcol.reshape(n, cin, kh, kw, oh, ow)
        gxp = np.zeros((n, cin, hp, wp), dtype=g.dtype)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i:i + sh * oh:sh, j:j + sw * ow:sw] += gcol[:, :, i, j]
        gx = gxp[:, :, ph:ph + h, pw:pw + wd]
        if bias is not None:
            gb = g.sum(axis=(0, 2, 3))
            return gx, gw, gb
        return gx, gw

    inputs = (x, w) if bias is None else (x, w, bias)
    res = _make(out, inputs, bwd, "conv2d")
    return reshape(res, res.shape[1:]) if squeeze else res


def conv3d(x, w, bias=None, stride=1, padding=0):
    """Cross-correlation of (N,Cin,D,H,W) [or (Cin,D,H,W)] with
    (Cout,Cin,kd,kh,kw)."""
    squeeze = False
    if x.data.ndim == 4:
        x = reshape(x, (1,) + x.shape)
        squeeze = True
    if x.data.ndim != 5 or w.data.ndim != 5:
        raise ShapeError("conv3d expects (N,Cin,D,H,W) and (Cout,Cin,kd,kh,kw)")
    n, cin, d, h, wd = x.shape
    cout, cin_w, kd, kh, kw = w.shape
    if cin != cin_w:
        raise ShapeError(f"conv3d channel mismatch: {cin} vs {cin_w}")
    pads = (padding,) * 3 if np.isscalar(padding) else tuple(padding)
    strides = (stride,) * 3 if np.isscalar(stride) else tuple(stride)
    pd, ph, pw = pads
    sd, sh, sw = strides
    dp, hp, wp = d + 2 * pd, h + 2 * ph, wd + 2 * pw
    if kd > dp or kh > hp or kw > wp:
        raise ShapeError("conv3d kernel larger than padded input")
    od = (dp - kd) // sd + 1
    oh = (hp - kh) // sh + 1
    ow = (wp - kw) // sw + 1

    xp = _pad_spatial(x.data, [(pd, pd), (ph, ph), (pw, pw)])
    s = xp.strides
    cols = np.lib.stride_tricks.as_strided(
        xp, (n, cin, kd, kh, kw, od, oh, ow),
        (s[0], s[1], s[2], s[3], s[4], s[2] * sd, s[3] * sh, s[4] * sw))
    cols2 = cols.reshape(n, cin * kd * kh * kw, od * oh * ow)
    wmat = w.data.reshape(cout, -1)
    out = (wmat @ cols2).reshape(n, cout, od, oh, ow)
    if bias is not None:
        out = out + bias.data.reshape(1, cout, 1, 1, 1)

    cols_saved = cols2

    def bwd(g):
        gmat = g.reshape(n, cout, od * oh * ow)
        gw = np.einsum("nop,nkp->ok", gmat, cols_saved).reshape(w.shape)
        gcol = np.einsum("ok,nop->nkp", wmat, gmat)
        gcol = gcol.reshape(n, cin, kd, kh, kw, od, oh, ow)
        gxp = np.zeros((n, cin, dp, hp, wp), dtype=g.dtype)
        for a in range(kd):
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, a:a + sd * od:sd, i:i + sh * oh:sh,
                        j:j + sw * ow:sw] += gcol[:, :, a, i, j]
        gx = gxp[:, :, pd:pd + d, ph:ph + h, pw:pw + wd]
        if bias is not None:
            return gx, gw, g.sum(axis=(0, 2, 3, 4))
        return gx, gw

    inputs = (x, w) if bias is None else (x, w, bias)
    res = _make(out, inputs, bwd, "conv3d")
    return reshape(res, res.shape[1:]) if squeeze else res


def maxpool2d(x, k=2, stride=2):
    """Max pooling over (..., H, W); gradient routes to the argmax, ties
    resolved toward the lowest linear window index."""
    squeeze = False
    if x.data.ndim == 3:
        x = reshape(x, (1,) + x.shape)
        squeeze = True
    n, c, h, w = x.shape
    oh = (h - k) // stride + 1
    ow = (w - k) // stride + 1
    s = x.data.strides
    win = np.lib.stride_tricks.as_strided(
        x.data, (n, c, oh, ow, k, k),
        (s[0], s[1], s[2] * stride, s[3] * stride, s[2], s[3]))
    flat = win.reshape(n, c, oh, ow, k * k)
    arg = flat.argmax(axis=-1)  # first occurrence = lowest linear index
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def bwd(g):
        gx = np.zeros((n, c, h, w), dtype=g.dtype)
        oy, ox = np.meshgrid(np.arange(oh), np.arange(ow), indexing="ij")
        rows = oy[None, None] * stride + arg // k
        colsi = ox[None, None] * stride + arg % k
        ni = np.arange(n)[:, None, None, None]
        ci = np.arange(c)[None, :, None, None]
        np.add.at(gx, (ni, ci, rows, colsi), g)
        return (gx,)

    res = _make(out.copy(), (x,), bwd, "maxpool2d")
    return reshape(res, res.shape[1:]) if squeeze else res


def relu(x):
    mask = x.data > 0
    data = np.where(mask, x.data, x.dtype.type(0))

    def bwd(g):
        return (g * mask,)

    return _make(data, (x,), bwd, "relu")


def sigmoid(x):
    data = 1.0 / (1.0 + np.exp(-x.data.astype(np.float64)))
    data = data.astype(x.dtype)

    def bwd(g):
        return (g * data * (1.0 - data),)

    return _make(data, (x,), bwd, "sigmoid")


def softmax(x, axis=-1):
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        inner = (g * data).sum(axis=axis, keepdims=True)
        return (data * (g - inner),)

    return _make(data, (x,), bwd, "softmax")


def log_softmax(x, axis=-1):
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    data = shifted - lse
    sm = np.exp(data)

    def bwd(g):
        return (g - sm * g.sum(axis=axis, keepdims=True),)

    return _make(data, (x,), bwd, "log_softmax")


class BatchNormState:
    """Per-channel running statistics; mutated only in training mode."""

    def __init__(self, channels, dtype=np.float32, eps=1e-5, momentum=0.1):
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.eps = eps
        self.momentum = momentum


def batchnorm2d(x, gamma, beta, state, training):
    """Per-channel batch normalization of (N,C,H,W)."""
    if x.data.ndim != 4:
        raise ShapeError("batchnorm2d expects (N,C,H,W)")
    n, c, h, w = x.shape
    eps = state.eps
    cnt = n * h * w
    if training:
        mu = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        m = state.momentum
        state.running_mean = ((1 - m) * state.running_mean + m * mu).astype(
            state.running_mean.dtype)
        unbiased = var * cnt / max(cnt - 1, 1)
        state.running_var = ((1 - m) * state.running_var + m * unbiased).astype(
            state.running_var.dtype)
    else:
        mu = state.running_mean.astype(x.dtype)
        var = state.running_var.astype(x.dtype)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu.reshape(1, c, 1, 1)) * inv.reshape(1, c, 1, 1)
    out = gamma.data.reshape(1, c, 1, 1) * xhat + beta.data.reshape(1, c, 1, 1)

    def bwd(g):
        ggamma = (g * xhat).sum(axis=(0, 2, 3))
        gbeta = g.sum(axis=(0, 2, 3))
        gscaled = g * gamma.data.reshape(1, c, 1, 1)
        if training:
            gm = gscaled.mean(axis=(0, 2, 3), keepdims=True)
            gxh = (gscaled * xhat).mean(axis=(0, 2, 3), keepdims=True)
            gx = inv.reshape(1, c, 1, 1) * (gscaled - gm - xhat * gxh)
        else:
            gx = gscaled * inv.reshape(1, c, 1, 1)
        return gx, ggamma, gbeta

    return _make(out.astype(x.dtype), (x, gamma, beta), bwd, "batchnorm2d")


def l2_normalize(x, axis, eps=1e-8):
    """Unit-normalize along axis; fibers with norm < eps become all-zero."""
    if eps <= 0:
        raise ValueError("l2_normalize requires eps > 0")
    norm = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True))
    inv = np.where(norm >= eps, 1.0 / np.maximum(norm, eps), 0.0)
    data = x.data * inv

    def bwd(g):
        inner = (g * data).sum(axis=axis, keepdims=True)
        return ((g - data * inner) * inv,)

    return _make(data, (x,), bwd, "l2_normalize")


def tsum(x, axis=None, keepdims=False):
    data = x.data.sum(axis=axis, keepdims=keepdims)
    shape = x.shape

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, shape).astype(g.dtype),)
        ax = axis if isinstance(axis, tuple) else (axis,)
        if not keepdims:
            g = np.expand_dims(g, ax)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.asarray(data), (x,), bwd, "sum")


def tmean(x, axis=None, keepdims=False):
    if axis is None:
        count = x.size
    else:
        ax = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([x.shape[a] for a in ax]))
    return elementwise("scale", tsum(x, axis, keepdims), 1.0 / count)


def reshape(x, shape):
    old = x.shape
    data = x.data.reshape(shape)

    def bwd(g):
        return (g.reshape(old),)

    return _make(data, (x,), bwd, "reshape")


def transpose(x, axes):
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    data = np.ascontiguousarray(x.data.transpose(axes))

    def bwd(g):
        return (g.transpose(inv),)

    return _make(data, (x,), bwd, "transpose")


def pad(x, pads):
    """Zero-pad; pads is a (before, after) pair per axis."""
    pads = [tuple(p) for p in pads]
    data = np.pad(x.data, pads)
    key = tuple(slice(b, b + s) for (b, _), s in zip(pads, x.shape))

    def bwd(g):
        return (g[key],)

    return _make(data, (x,), bwd, "pad")


def broadcast_to(x, shape):
    _check_broadcast(x.shape, tuple(shape), "broadcast_to")
    data = np.broadcast_to(x.data, shape).copy()
    orig = x.shape

    def bwd(g):
        return (_unbroadcast(g, orig),)

    return _make(data, (x,), bwd, "broadcast_to")


def slice_(x, key):
    data = x.data[key]
    shape = x.shape

    def bwd(g):
        gx = np.zeros(shape, dtype=g.dtype)
        gx[key] = g
        return (gx,)

    return _make(np.ascontiguousarray(data), (x,), bwd, "slice")


def concat(tensors, axis):
    tensors = list(tensors)
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        return tuple(np.take(g, np.arange(offsets[i], offsets[i + 1]), axis=axis)
                     for i in range(len(sizes)))

    return _make(data, tensors, bwd, "concat")


def stack(tensors, axis=0):
    expanded = [reshape(t, t.shape[:axis] + (1,) + t.shape[axis:])
                for t in tensors]
    return concat(expanded, axis)


def _toposort(root):
    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        t, done = stack.pop()
        if done:
            order.append(t)
            continue
        if id(t) in seen or not isinstance(t, Tensor):
            continue
        seen.add(id(t))
        stack.append((t, True))
        if t.node is not None:
            for inp in t.node.inputs:
                stack.append((inp, False))
    return order


def backward(loss, wrt=None):
    """Propagate from a finite scalar loss through the recording.

    Returns ``{name: Tensor}`` for every reachable named leaf with
    requires_grad, or (when ``wrt`` is a list of tensors) the gradients of
    exactly those tensors, zeros if unreachable.
    """
    if loss.data.ndim != 0:
        raise ShapeError("backward expects a rank-0 loss")
    if not np.isfinite(loss.data):
        raise NumericsError("loss is not finite")
    grads = {id(loss): np.ones((), dtype=loss.dtype)}
    order = _toposort(loss)
    for t in reversed(order):
        g = grads.get(id(t))
        if g is None or t.node is None:
            continue
        in_grads = t.node.bwd(g)
        for inp, ig in zip(t.node.inputs, in_grads):
            if ig is None:
                continue
            if not np.all(np.isfinite(ig)):
                raise NumericsError(f"non-finite gradient from {t.node.op}")
            prev = grads.get(id(inp))
            grads[id(inp)] = ig if prev is None else prev + ig
    if wrt is not None:
        return [Tensor(grads.get(id(t), np.zeros(t.shape, dtype=t.dtype)))
                for t in wrt]
    out = {}
    for t in order:
        if t.requires_grad and t.name is not None and t.node is None:
            g = grads.get(id(t))
            if g is None:
                g = np.zeros(t.shape, dtype=t.dtype)
            out[t.name] = Tensor(g)
    return out
