"""Dense tensors with dynamic reverse-mode differentiation.

Every op records its parents and a backward closure on the output tensor as
it executes; :meth:`Tensor.backward` walks that graph once in reverse
topological order, accumulating gradients additively at fan-out.
"""

import contextlib
import math

import numpy as np

from . import _kernels

_state = {"dtype": np.float32, "grad": True}


def default_dtype():
    return _state["dtype"]


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the dtype used for new tensors and parameters."""
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported precision {dtype}")
    old = _state["dtype"]
    _state["dtype"] = dtype
    try:
        yield
    finally:
        _state["dtype"] = old


@contextlib.contextmanager
def no_grad():
    old = _state["grad"]
    _state["grad"] = False
    try:
        yield
    finally:
        _state["grad"] = old


def is_grad_enabled():
    return _state["grad"]


class ShapeError(ValueError):
    pass


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    ndim_extra = grad.ndim - len(shape)
    if ndim_extra:
        grad = grad.sum(axis=tuple(range(ndim_extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        dtype = dtype or (arr.dtype.type if arr.dtype.type in (np.float32, np.float64) else _state["dtype"])
        self.data = arr.astype(dtype, copy=False)
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

    def __len__(self):
        return len(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def zero_grad(self):
        self.grad = None

    # -- graph -------------------------------------------------------------
    def backward(self, grad=None):
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(f"backward() without a seed gradient needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        order = _topological_order(self)
        grads = {id(self): np.asarray(grad, dtype=self.dtype)}
        for node in order:
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- operators ---------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def permute(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return permute(self, axes)

    def transpose(self, a=-2, b=-1):
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return permute(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sqrt(self):
        return sqrt(self)

    def abs(self):
        return tabs(self)

    def tanh(self):
        return tanh(self)


def _topological_order(root):
    """Nodes reachable from ``root``, root first, each exactly once."""
    order, visited = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))
    order.reverse()
    return order


def as_tensor(x):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=_state["dtype"]))


def _result(data, parents, backward):
    out = Tensor(data)
    if _state["grad"] and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _check_broadcast(a, b, opname):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{opname}: shapes {a.shape} and {b.shape} are not broadcast-compatible") from None


# ---------------------------------------------------------------------------
# elementwise


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), backward)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(a.data - b.data, (a, b), backward)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(a.data * b.data, (a, b), backward)


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "div")
    out = a.data / b.data

    def backward(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(out, (a, b), backward)


def power(a, p):
    a = as_tensor(a)
    if isinstance(p, Tensor):
        raise TypeError("power: exponent must be a python scalar")
    p = float(p)
    out = a.data ** p

    def backward(g):
        return (g * p * a.data ** (p - 1.0),)

    return _result(out, (a,), backward)


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,))


def log(a):
    a = as_tensor(a)
    return _result(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a):
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _result(out, (a,), lambda g: (g * 0.5 / out,))


def tabs(a):
    a = as_tensor(a)
    return _result(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def clamp(a, lo=None, hi=None):
    a = as_tensor(a)
    out = np.clip(a.data, lo, hi)
    keep = np.ones(a.shape, dtype=bool)
    if lo is not None:
        keep &= a.data >= lo
    if hi is not None:
        keep &= a.data <= hi
    return _result(out, (a,), lambda g: (g * keep,))


def tanh(a):
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _result(out, (a,), lambda g: (g * (1.0 - out * out),))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a):
    """tanh-approximated GELU."""
    a = as_tensor(a)
    x = a.data
    x2 = x * x
    t = np.tanh(_GELU_C * x * (1.0 + 0.044715 * x2))
    out = 0.5 * x * (1.0 + t)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return _result(out, (a,), backward)


def leaky_relu(a, slope=0.2):
    a = as_tensor(a)
    pos = a.data > 0
    out = np.where(pos, a.data, slope * a.data)
    return _result(out, (a,), lambda g: (np.where(pos, g, slope * g),))


def softplus(a):
    a = as_tensor(a)
    x = a.data
    out = np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))

    def backward(g):
        return (g / (1.0 + np.exp(-x)),)

    return _result(out, (a,), backward)


# ---------------------------------------------------------------------------
# linear algebra and shape


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} are incompatible")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul: batch dims of {a.shape} and {b.shape} do not broadcast") from None

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            if b.ndim == 2:
                # shared weight: fold all leading dims into one product
                k = a.shape[-1]
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _result(a.data @ b.data, (a, b), backward)


def reshape(a, shape):
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} into {tuple(shape)}") from None
    return _result(out, (a,), lambda g: (g.reshape(a.shape),))


def permute(a, axes):
    a = as_tensor(a)
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"permute: axes {axes} invalid for shape {a.shape}")
    inv = tuple(np.argsort(axes))
    return _result(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def _is_basic_index(index):
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (slice, int, np.integer, type(None), type(Ellipsis))) for i in items)


def getitem(a, index):
    a = as_tensor(a)
    if isinstance(index, Tensor):
        index = index.data
    out = a.data[index]
    basic = _is_basic_index(index)

    def backward(g):
        full = np.zeros(a.shape, dtype=g.dtype)
        if basic:
            full[index] += g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _result(np.array(out, copy=True) if basic else out, (a,), backward)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise ShapeError(f"concat along axis {axis}: shapes {ref} and {t.shape} differ off-axis")
    sizes = [t.shape[ax] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=ax))

    return _result(np.concatenate([t.data for t in tensors], axis=ax), tensors, backward)


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    expanded = [reshape(t, t.shape[:axis % (t.ndim + 1)] + (1,) + t.shape[axis % (t.ndim + 1):]) for t in tensors]
    return concat(expanded, axis=axis)


def roll(a, shift, axis):
    a = as_tensor(a)
    return _result(np.roll(a.data, shift, axis=axis), (a,), lambda g: (np.roll(g, -shift, axis=axis),))


def pad_indices(n, before, after, mode):
    """Source index for each padded position along one axis (-1 = zero fill)."""
    pos = np.arange(-before, n + after)
    if mode == "zero":
        return np.where((pos >= 0) & (pos < n), pos, -1)
    if mode == "circular":
        return pos % n
    if mode == "reflect":
        if before >= n or after >= n:
            raise ValueError(f"reflect padding {before, after} needs pad < axis extent {n}")
        pos = np.abs(pos)
        return np.where(pos >= n, 2 * (n - 1) - pos, pos)
    raise ValueError(f"unknown pad mode {mode!r}")


def pad(a, pad_width, mode="zero"):
    """Pad along axes.  ``pad_width`` maps axis -> (before, after)."""
    a = as_tensor(a)
    out = a
    for axis, (before, after) in sorted(pad_width.items()):
        if before == 0 and after == 0:
            continue
        out = _pad_axis(out, axis % a.ndim, before, after, mode)
    return out


def _pad_axis(a, axis, before, after, mode):
    n = a.shape[axis]
    if mode == "zero":
        widths = [(0, 0)] * a.ndim
        widths[axis] = (before, after)
        sl = [slice(None)] * a.ndim
        sl[axis] = slice(before, before + n)
        sl = tuple(sl)
        return _result(np.pad(a.data, widths), (a,), lambda g: (g[sl],))
    idx = pad_indices(n, before, after, mode)
    out = np.take(a.data, idx, axis=axis)

    def backward(g):
        gm = np.moveaxis(g, axis, 0)
        full = gm[before:before + n].copy()
        for t in list(range(before)) + list(range(before + n, len(idx))):
            full[idx[t]] += gm[t]
        return (np.moveaxis(full, 0, axis),)

    return _result(out, (a,), backward)


def _index_add(target, idx, values):
    """target[idx[i]] += values[i] along axis 0, repeats accumulated."""
    if len(idx) <= 256:
        for i, j in enumerate(idx):
            target[j] += values[i]
    else:
        np.add.at(target, idx, values)


def take_rows(a, idx, axis):
    """Gather along ``axis`` with an integer index vector (repeats allowed)."""
    a = as_tensor(a)
    idx = np.asarray(idx)
    out = np.take(a.data, idx, axis=axis)

    def backward(g):
        full = np.zeros(a.shape, dtype=g.dtype)
        _index_add(np.moveaxis(full, axis, 0), idx, np.moveaxis(g, axis, 0))
        return (full,)

    return _result(out, (a,), backward)


# ---------------------------------------------------------------------------
# reductions and normalisation


def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).astype(g.dtype, copy=True),)

    return _result(out, (a,), backward)


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out = a.data.mean(axis=axis, keepdims=keepdims)
    if axis is None:
        count = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([a.shape[i] for i in axes]))

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, a.shape).astype(g.dtype, copy=True),)

    return _result(out, (a,), backward)


def softmax(a, axis=-1):
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _result(out, (a,), backward)


def layer_norm(a, weight=None, bias=None, eps=1e-5):
    """Normalise over the last axis, then apply an optional affine map."""
    a = as_tensor(a)
    parents = [a]
    if weight is not None:
        weight = as_tensor(weight)
        parents.append(weight)
    if bias is not None:
        bias = as_tensor(bias)
        parents.append(bias)
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat * weight.data if weight is not None else xhat
    if bias is not None:
        out = out + bias.data
    lead = tuple(range(x.ndim - 1))

    def backward(g):
        gx = g * weight.data if weight is not None else g
        dx = rstd * (gx - gx.mean(axis=-1, keepdims=True)
                     - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        grads = [dx]
        if weight is not None:
            grads.append((g * xhat).sum(axis=lead) if weight.requires_grad else None)
        if bias is not None:
            grads.append(g.sum(axis=lead) if bias.requires_grad else None)
        return tuple(grads)

    return _result(out, parents, backward)


# ---------------------------------------------------------------------------
# spatial ops


def conv2d(x, w, b=None, stride=1):
    """Valid (unpadded) 2-D convolution, NCHW input, OIHW weights."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d: input {x.shape} and weight {w.shape} are incompatible")
    B, C, H, W = x.shape
    O, _, kh, kw = w.shape
    if H < kh or W < kw:
        raise ShapeError(f"conv2d: input {x.shape} smaller than kernel {w.shape}")
    s = stride
    Ho = (H - kh) // s + 1
    Wo = (W - kw) // s + 1
    win = np.lib.stride_tricks.sliding_window_view(x.data, (kh, kw), axis=(2, 3))[:, :, ::s, ::s][:, :, :Ho, :Wo]
    # (B, Ho, Wo, C, kh, kw)
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(B * Ho * Wo, C * kh * kw)
    wmat = w.data.reshape(O, -1)
    out = cols @ wmat.T
    if b is not None:
        b = as_tensor(b)
        out = out + b.data
    out = out.reshape(B, Ho, Wo, O).transpose(0, 3, 1, 2)
    parents = (x, w) if b is None else (x, w, b)

    def backward(g):
        gm = g.transpose(0, 2, 3, 1).reshape(B * Ho * Wo, O)
        gw = (gm.T @ cols).reshape(w.shape) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = np.ascontiguousarray((gm @ wmat).reshape(B, Ho, Wo, C, kh, kw).transpose(4, 5, 0, 3, 1, 2))
            if s == kh and s == kw and H == s * Ho and W == s * Wo:
                # non-overlapping patches: col2im is a pure reshape
                gx = gcols.transpose(2, 3, 4, 0, 5, 1).reshape(x.shape)
            else:
                gx = np.zeros(x.shape, dtype=g.dtype)
                for i in range(kh):
                    for j in range(kw):
                        gx[:, :, i:i + s * (Ho - 1) + 1:s, j:j + s * (Wo - 1) + 1:s] += gcols[i, j]
        grads = [gx, gw]
        if b is not None:
            grads.append(gm.sum(axis=0) if b.requires_grad else None)
        return tuple(grads)

    return _result(np.ascontiguousarray(out), parents, backward)


def upsample_nearest(a, factor=2, axes=(1, 2)):
    """Nearest-neighbour upsampling by an integer factor along two axes."""
    a = as_tensor(a)
    out = a.data
    for ax in axes:
        out = np.repeat(out, factor, axis=ax)

    def backward(g):
        shape = list(a.shape)
        new_shape = []
        red = []
        for i, n in enumerate(shape):
            if i in [ax % a.ndim for ax in axes]:
                new_shape.extend([n, factor])
                red.append(len(new_shape) - 1)
            else:
                new_shape.append(n)
        return (g.reshape(new_shape).sum(axis=tuple(red)),)

    return _result(out, (a,), backward)


def resample(a, idx, weights):
    """Fixed-tap linear resampling over a flattened spatial axis.

    ``a`` is (B, N, D); ``idx``/``weights`` are (M, K).  Output (B, M, D) with
    out[b, m] = sum_k weights[m, k] * a[b, idx[m, k]].
    """
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.int64)
    weights = np.asarray(weights, dtype=a.dtype)
    out = np.einsum("bmkd,mk->bmd", a.data[:, idx], weights)

    def backward(g):
        return (_kernels.scatter_add(g, idx, weights, a.shape[1]),)

    return _result(out, (a,), backward)


# ---------------------------------------------------------------------------
# gradient checking


def grad_check(f, x, eps=1e-5):
    """Max relative error between analytic and central-difference gradients.

    ``x`` may be a tensor or a list of tensors; ``f`` receives the same
    structure and must return a scalar tensor.  Error per coordinate is
    |analytic - numeric| / max(1, |analytic|).
    """
    xs = [x] if isinstance(x, Tensor) else list(x)
    for t in xs:
        if t.dtype != np.float64:
            raise TypeError("grad_check needs 64-bit tensors")
        t.requires_grad = True
        t.grad = None

    def call():
        return f(x if isinstance(x, Tensor) else xs)

    out = call()
    if out.size != 1:
        raise ShapeError(f"grad_check: f must be scalar-valued, got shape {out.shape}")
    if not np.all(np.isfinite(out.data)):
        raise FloatingPointError("grad_check: non-finite forward value")
    out.backward()
    worst = 0.0
    with no_grad():
        for t in xs:
            analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
            flat = t.data.reshape(-1)
            numeric = np.empty(flat.size)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                fp = call().item()
                flat[i] = orig - eps
                fm = call().item()
                flat[i] = orig
                if not (math.isfinite(fp) and math.isfinite(fm)):
                    raise FloatingPointError("grad_check: non-finite forward value")
                numeric[i] = (fp - fm) / (2 * eps)
            a = analytic.reshape(-1)
            err = np.abs(a - numeric) / np.maximum(1.0, np.abs(a))
            worst = max(worst, float(err.max(initial=0.0)))
    return worst
