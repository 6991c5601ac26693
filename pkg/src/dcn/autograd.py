"""Dense tensors with reverse-mode automatic differentiation.

Every op takes and returns :class:`Tensor` objects and records a closure that
maps the output gradient to input gradients. Images and feature maps use the
N x C x H x W layout. Float32 is the default; switch to float64 with
:func:`precision` for gradient checks.
"""

import contextlib

import numpy as np

from .errors import ConfigurationError, NonFiniteError, StateError

_default_dtype = np.float32


def get_default_dtype():
    return _default_dtype


def set_default_dtype(dtype):
    global _default_dtype
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ConfigurationError(f"unsupported dtype {dtype!r}; use float32 or float64")
    _default_dtype = dtype


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the dtype used for new tensors."""
    old = _default_dtype
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(old)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "_op", "_consumed")

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            arr = np.asarray(data)
            dtype = arr.dtype if arr.dtype in (np.float32, np.float64) else _default_dtype
        self.data = np.asarray(data, dtype=dtype)
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents = ()
        self._backward = None
        self._op = "leaf"
        self._consumed = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self._op}{tag})"

    def backward(self, params=None):
        backward(self, params)

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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent):
        return power(self, exponent)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

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


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    if dtype is None:
        dtype = _default_dtype
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data, parents, backward_fn, op):
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
        out._op = op
    return out


def _unbroadcast(grad, shape):
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _topological_order(root):
    order, seen = [], set()
    stack = [(root, False)]
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss, params=None):
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

    ``params`` (an iterable of tensors or a name->tensor mapping) get a zero
    gradient if the loss does not reach them. The graph is released
    afterwards; a second call on the same loss raises :class:`StateError`.
    """
    if loss.size != 1:
        raise ConfigurationError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise StateError("backward already ran on this graph; run a new forward pass first")
    if not np.all(np.isfinite(loss.data)):
        raise NonFiniteError(f"loss is not finite: {loss.data.ravel()[0]}")

    if loss.requires_grad:
        grads = {id(loss): np.ones_like(loss.data)}
        for node in reversed(_topological_order(loss)):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node._consumed:
                    raise StateError("graph segment was already released by an earlier backward")
                node.grad = g.copy() if node.grad is None else node.grad + g
                if not np.all(np.isfinite(node.grad)):
                    raise NonFiniteError(f"non-finite gradient for {node.name or node!r}")
                continue
            parent_grads = node._backward(g)
            for p, pg in zip(node._parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                key = id(p)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
            node._backward = None
            node._parents = ()
            node._consumed = True
    loss._consumed = True

    if params is not None:
        values = params.values() if hasattr(params, "values") else params
        for p in values:
            if p.grad is None:
                p.grad = np.zeros_like(p.data)


# ---------------------------------------------------------------- elementwise


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data

    def bw(g):
        return (_unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(g * ad, bd.shape) if b.requires_grad else None)

    return _make(ad * bd, (a, b), bw, "mul")


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    out = ad / bd

    def bw(g):
        return (_unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None)

    return _make(out, (a, b), bw, "div")


def power(a, exponent):
    a = as_tensor(a)
    x = a.data
    return _make(x ** exponent, (a,),
                 lambda g: (g * exponent * x ** (exponent - 1),), "pow")


def relu(a):
    a = as_tensor(a)
    out = np.maximum(a.data, 0)
    return _make(out, (a,), lambda g: (g * (out > 0),), "relu")


def sigmoid(a):
    a = as_tensor(a)
    out = 0.5 * (np.tanh(0.5 * a.data) + 1.0)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


# ------------------------------------------------------------------- shaping


def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    shape = a.shape
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.asarray(out, dtype=a.dtype), (a,), bw, "sum")


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if np.isscalar(axis) else axis
        n = int(np.prod([a.shape[ax] for ax in axes]))
    return tsum(a, axis, keepdims) * (1.0 / n)


def reshape(a, shape):
    a = as_tensor(a)
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a, axes=None):
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def matmul(a, b):
    """Batched matrix product over the last two axes."""
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return _make(ad @ bd, (a, b), bw, "matmul")


def l2_norm(a, axis, eps=1e-8):
    """max(||a||_2, eps) along ``axis`` with keepdims.

    The gradient is zero where the clamp is active, so all-zero vectors are
    safe.
    """
    a = as_tensor(a)
    x = a.data
    raw = np.sqrt((x * x).sum(axis=axis, keepdims=True))
    active = raw > eps
    out = np.where(active, raw, eps).astype(a.dtype)

    def bw(g):
        safe = np.where(active, raw, 1.0)
        return (g * active * x / safe,)

    return _make(out, (a,), bw, "l2_norm")


# ---------------------------------------------------------------- conv / pool


def _im2col(xpt, kh, kw, stride, ho, wo):
    """Channel-major columns: (C*kh*kw) x (N*ho*wo) from a C x N x Hp x Wp array."""
    c, n = xpt.shape[:2]
    cols = np.empty((c, kh, kw, n, ho, wo), dtype=xpt.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xpt[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
    return cols.reshape(c * kh * kw, n * ho * wo)


def conv2d(x, weight, bias=None, stride=1, padding=0, layout="NCHW"):
    """Cross-correlation of an N x C_in x H x W batch with C_out x C_in x kh x kw.

    With ``layout="CNHW"`` input and output are channel-major
    (C x N x H x W), which skips two transposes per call.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4:
        raise ConfigurationError(f"conv2d expects 4-d input and kernel, got {x.shape} and {weight.shape}")
    if layout not in ("NCHW", "CNHW"):
        raise ConfigurationError(f"unknown layout {layout!r}")
    cm = layout == "CNHW"
    if cm:
        c, n, h, w = x.shape
    else:
        n, c, h, w = x.shape
    c_out, c_in, kh, kw = weight.shape
    if c != c_in:
        raise ConfigurationError(f"conv2d channel mismatch: input has {c}, kernel expects {c_in}")
    if kh < 1 or kw < 1 or stride < 1 or padding < 0:
        raise ConfigurationError(f"conv2d bad kernel/stride/padding: {kh}x{kw}, {stride}, {padding}")
    span_h, span_w = h + 2 * padding - kh, w + 2 * padding - kw
    if span_h < 0 or span_w < 0 or span_h % stride or span_w % stride:
        raise ConfigurationError(
            f"conv2d extents incompatible: H={h}, W={w}, kernel={kh}x{kw}, "
            f"stride={stride}, padding={padding}")
    ho, wo = span_h // stride + 1, span_w // stride + 1

    dtype = np.result_type(x.dtype, weight.dtype)
    xpt = np.zeros((c, n, h + 2 * padding, w + 2 * padding), dtype=dtype)
    xpt[:, :, padding:padding + h, padding:padding + w] = x.data if cm else x.data.transpose(1, 0, 2, 3)
    cols = _im2col(xpt, kh, kw, stride, ho, wo)
    wmat = weight.data.reshape(c_out, -1)
    out = wmat @ cols
    parents = (x, weight)
    if bias is not None:
        bias = as_tensor(bias)
        out += bias.data.reshape(-1, 1)
        parents = (x, weight, bias)
    out = out.reshape(c_out, n, ho, wo)
    if not cm:
        out = np.ascontiguousarray(out.transpose(1, 0, 2, 3))

    def bw(g):
        gm = np.ascontiguousarray(g if cm else g.transpose(1, 0, 2, 3)).reshape(c_out, -1)
        gw = (gm @ cols.T).reshape(weight.shape) if weight.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = (wmat.T @ gm).reshape(c, kh, kw, n, ho, wo)
            dxpt = np.zeros(xpt.shape, dtype=dtype)
            for i in range(kh):
                for j in range(kw):
                    dxpt[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[:, i, j]
            gx = dxpt[:, :, padding:padding + h, padding:padding + w]
            gx = np.ascontiguousarray(gx if cm else gx.transpose(1, 0, 2, 3))
        if bias is None:
            return gx, gw
        return gx, gw, gm.sum(axis=1)

    return _make(out, parents, bw, "conv2d")


def avg_pool2d(x, window):
    x = as_tensor(x)
    n, c, h, w = x.shape
    if h % window or w % window:
        raise ConfigurationError(f"avg_pool window {window} does not tile {h}x{w}")
    out = x.data.reshape(n, c, h // window, window, w // window, window).mean(axis=(3, 5))
    scale = 1.0 / (window * window)

    def bw(g):
        return (np.repeat(np.repeat(g * scale, window, axis=2), window, axis=3),)

    return _make(out.astype(x.dtype), (x,), bw, "avg_pool2d")


def _partition_matrix(size, cells, dtype):
    if cells > size:
        raise ConfigurationError(f"adaptive pool target {cells} exceeds input extent {size}")
    edges = (np.arange(cells + 1) * size) // cells
    m = np.zeros((cells, size), dtype=dtype)
    for i in range(cells):
        m[i, edges[i]:edges[i + 1]] = 1.0 / (edges[i + 1] - edges[i])
    return m


def adaptive_avg_pool2d(x, target):
    """Mean over an exact partition of the input into target[0] x target[1] cells."""
    x = as_tensor(x)
    rows, cols = target
    ph = _partition_matrix(x.shape[2], rows, x.dtype)
    pw = _partition_matrix(x.shape[3], cols, x.dtype)
    out = np.einsum("ih,nchw,jw->ncij", ph, x.data, pw, optimize=True)
    return _make(out, (x,), lambda g: (np.einsum("ih,ncij,jw->nchw", ph, g, pw, optimize=True),),
                 "adaptive_avg_pool2d")


def batch_norm(x, gamma, beta, running_mean, running_var, training=True, momentum=0.1, eps=1e-5,
               channel_axis=1):
    """Per-channel normalisation over every axis except ``channel_axis``.

    In training mode batch statistics are used and ``running_mean`` /
    ``running_var`` (plain arrays) are updated in place.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    xd = x.data
    axes = tuple(i for i in range(xd.ndim) if i != channel_axis)
    shape = [1] * xd.ndim
    shape[channel_axis] = -1
    if training:
        count = xd.size // xd.shape[channel_axis]
        mu = xd.mean(axis=axes)
        var = xd.var(axis=axes)
        if running_mean is not None:
            running_mean *= 1 - momentum
            running_mean += momentum * mu
            running_var *= 1 - momentum
            running_var += momentum * var * (count / max(count - 1, 1))
    else:
        mu, var = running_mean, running_var
    inv_std = (1.0 / np.sqrt(var + eps)).reshape(shape)
    xhat = (xd - mu.reshape(shape)) * inv_std
    out = (gamma.data.reshape(shape) * xhat + beta.data.reshape(shape)).astype(x.dtype)

    def bw(g):
        gg = (g * xhat).sum(axis=axes)
        gb = g.sum(axis=axes)
        gx = None
        if x.requires_grad:
            dxhat = g * gamma.data.reshape(shape)
            if training:
                gx = (dxhat - dxhat.mean(axis=axes, keepdims=True)
                      - xhat * (dxhat * xhat).mean(axis=axes, keepdims=True)) * inv_std
            else:
                gx = dxhat * inv_std
        return gx, gg, gb

    return _make(out, (x, gamma, beta), bw, "batch_norm")
