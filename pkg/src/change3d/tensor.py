"""Dense tensors with reverse-mode automatic differentiation.

A :class:`Tensor` wraps a float32 (default) or float64 numpy array.  Forward
operations executed inside a ``with GradTape():`` block append nodes to the
tape; :func:`backward` walks the tape once in reverse and accumulates
gradients additively into every ``requires_grad`` tensor that the loss
reaches.  Outside a tape, the same functions run without any recording, so
inference costs nothing extra.

Broadcasting is supported for elementwise ops in the usual numpy sense
(shapes aligned from the trailing axis); the backward pass sums gradients
over the broadcast axes.  Storage is float32 by default; float64 exists for
gradient-check oracle runs and is selected per tensor, never globally.
"""

from __future__ import annotations

import os

import numpy as np

from change3d import backend

DEFAULT_DTYPE = np.float32
_FLOAT_DTYPES = (np.float32, np.float64)

_DEBUG_CHECKS = bool(os.environ.get("CHANGE3D_DEBUG"))


def set_debug_checks(flag: bool) -> None:
    """Enable per-op finite-value assertions (slows everything down)."""
    global _DEBUG_CHECKS
    _DEBUG_CHECKS = bool(flag)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None

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
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name}{flag})"

    # arithmetic sugar; the actual rules live in the module-level functions
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_const_like(other, self), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_const_like(other, self), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def max(self, axis, keepdims=False):
        return max_(self, axis, keepdims)

    def relu(self):
        return relu(self)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sqrt(self):
        return sqrt(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)


def parameter(data, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=True, dtype=dtype)


def _const_like(value, ref: Tensor) -> Tensor:
    return Tensor(np.asarray(value, dtype=ref.dtype))


def _coerce(value, ref: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return _const_like(value, ref)


# ---------------------------------------------------------------------------
# tape

class _Node:
    __slots__ = ("out", "parents", "backward_fn")

    def __init__(self, out, parents, backward_fn):
        self.out = out
        self.parents = parents
        self.backward_fn = backward_fn


_TAPES: list["GradTape"] = []


class GradTape:
    """Ordered record of primitive ops; inputs of a node always precede it."""

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        assert _TAPES.pop() is self
        return False

    def __len__(self):
        return len(self.nodes)


def _out(data, parents, backward_fn) -> Tensor:
    """Wrap a forward result; record on the active tape if grads can flow."""
    if _DEBUG_CHECKS and not np.all(np.isfinite(data)):
        raise FloatingPointError("non-finite values produced by a forward op")
    t = Tensor(data)
    if _TAPES and any(p.requires_grad for p in parents):
        t.requires_grad = True
        _TAPES[-1].nodes.append(_Node(t, parents, backward_fn))
    return t


def backward(loss: Tensor, tape: GradTape) -> None:
    """Reverse pass: populate .grad for every requires_grad tensor reachable
    from ``loss`` along the tape, accumulating additively.  Clears the tape."""
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not tape.nodes:
        raise ValueError("backward on an empty tape")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    holders: dict[int, Tensor] = {id(loss): loss}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        holder = holders.pop(id(node.out))
        if holder.requires_grad:
            holder.grad = g if holder.grad is None else holder.grad + g
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            pid = id(parent)
            acc = grads.get(pid)
            grads[pid] = pg if acc is None else acc + pg
            holders[pid] = parent
    for tid, g in grads.items():
        t = holders[tid]
        if t.requires_grad:
            t.grad = g if t.grad is None else t.grad + g
    tape.nodes.clear()


# ---------------------------------------------------------------------------
# elementwise and broadcasting

def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient down to ``shape`` after numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"incompatible broadcast: {a.shape} vs {b.shape}") from None


def add(a, b):
    a = _coerce(a, b) if not isinstance(a, Tensor) else a
    b = _coerce(b, a)
    _check_broadcast(a, b)

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _out(a.data + b.data, (a, b), bwd)


def sub(a, b):
    a = _coerce(a, b) if not isinstance(a, Tensor) else a
    b = _coerce(b, a)
    _check_broadcast(a, b)

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _out(a.data - b.data, (a, b), bwd)


def mul(a, b):
    a = _coerce(a, b) if not isinstance(a, Tensor) else a
    b = _coerce(b, a)
    _check_broadcast(a, b)
    ad, bd = a.data, b.data

    def bwd(g):
        return _unbroadcast(g * bd, a.shape), _unbroadcast(g * ad, b.shape)

    return _out(ad * bd, (a, b), bwd)


def div(a, b):
    a = _coerce(a, b) if not isinstance(a, Tensor) else a
    b = _coerce(b, a)
    _check_broadcast(a, b)
    ad, bd = a.data, b.data

    def bwd(g):
        return (_unbroadcast(g / bd, a.shape),
                _unbroadcast(-g * ad / (bd * bd), b.shape))

    return _out(ad / bd, (a, b), bwd)


def neg(a: Tensor):
    return _out(-a.data, (a,), lambda g: (-g,))


def relu(a: Tensor):
    mask = a.data > 0
    return _out(np.where(mask, a.data, 0), (a,), lambda g: (g * mask,))


def exp(a: Tensor):
    y = np.exp(a.data)
    return _out(y, (a,), lambda g: (g * y,))


def log(a: Tensor):
    ad = a.data
    return _out(np.log(ad), (a,), lambda g: (g / ad,))


def sqrt(a: Tensor):
    y = np.sqrt(a.data)
    return _out(y, (a,), lambda g: (g / (2 * y),))


def abs_(a: Tensor):
    ad = a.data
    return _out(np.abs(ad), (a,), lambda g: (g * np.sign(ad),))


def arccos(a: Tensor):
    """arccos with the input clipped to [-1, 1]; clipped points get zero grad."""
    clipped = np.clip(a.data, -1.0, 1.0)
    interior = np.abs(a.data) < 1.0

    def bwd(g):
        denom = np.sqrt(np.maximum(1.0 - clipped * clipped, 1e-12))
        return (np.where(interior, -g / denom, 0.0),)

    return _out(np.arccos(clipped), (a,), bwd)


def clamp_min(a: Tensor, floor: float):
    mask = a.data > floor
    return _out(np.maximum(a.data, floor), (a,), lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# reductions

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    axes = tuple(a % ndim for a in axis)
    for a in axes:
        if a >= ndim:
            raise ValueError(f"axis {a} out of range for ndim {ndim}")
    return axes


def sum_(a: Tensor, axis=None, keepdims=False):
    axes = _norm_axes(axis, a.ndim)
    y = a.data.sum(axis=axes, keepdims=keepdims)
    shape = a.shape

    def bwd(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return _out(y, (a,), bwd)


def mean(a: Tensor, axis=None, keepdims=False):
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes]))
    y = a.data.mean(axis=axes, keepdims=keepdims)
    shape = a.shape

    def bwd(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, shape).astype(a.dtype),)

    return _out(y, (a,), bwd)


def max_(a: Tensor, axis: int, keepdims=False):
    """Max over one axis; ties route the gradient to the first maximum."""
    axis = axis % a.ndim
    idx = np.argmax(a.data, axis=axis)
    y = np.take_along_axis(a.data, np.expand_dims(idx, axis), axis=axis)

    def bwd(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        gx = np.zeros_like(a.data)
        np.put_along_axis(gx, np.expand_dims(idx, axis), g, axis=axis)
        return (gx,)

    return _out(y if keepdims else y.squeeze(axis), (a,), bwd)


def softmax(a: Tensor, axis: int = -1):
    axis = axis % a.ndim
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        gy = g * y
        return (gy - y * gy.sum(axis=axis, keepdims=True),)

    return _out(y, (a,), bwd)


# ---------------------------------------------------------------------------
# shape ops

def reshape(a: Tensor, shape):
    old = a.shape
    return _out(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes):
    inv = np.argsort(axes)
    return _out(np.ascontiguousarray(a.data.transpose(axes)), (a,),
                lambda g: (np.ascontiguousarray(g.transpose(inv)),))


def concat(tensors, axis: int):
    tensors = list(tensors)
    if not tensors:
        raise ValueError("concat of zero tensors")
    ndim = tensors[0].ndim
    axis = axis % ndim
    for t in tensors[1:]:
        if t.ndim != ndim:
            raise ValueError("concat rank mismatch")
        for ax in range(ndim):
            if ax != axis and t.shape[ax] != tensors[0].shape[ax]:
                raise ValueError(
                    f"concat extent mismatch along axis {ax}: "
                    f"{tensors[0].shape} vs {t.shape}")
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))

    return _out(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), bwd)


def narrow(a: Tensor, axis: int, start: int, length: int):
    """Contiguous slice [start, start+length) along one axis."""
    axis = axis % a.ndim
    if start < 0 or start + length > a.shape[axis]:
        raise ValueError(f"narrow [{start}:{start + length}] exceeds axis {axis} "
                         f"extent {a.shape[axis]}")
    sl = tuple(slice(None) if i != axis else slice(start, start + length)
               for i in range(a.ndim))
    shape = a.shape

    def bwd(g):
        gx = np.zeros(shape, dtype=g.dtype)
        gx[sl] = g
        return (gx,)

    return _out(np.ascontiguousarray(a.data[sl]), (a,), bwd)


def expand_batch(a: Tensor, n: int):
    """Prepend a batch axis of size n by replication; grad sums over it."""
    y = np.broadcast_to(a.data[None], (n,) + a.shape).copy()
    return _out(y, (a,), lambda g: (g.sum(axis=0),))


# ---------------------------------------------------------------------------
# linear algebra

def matmul(a: Tensor, b: Tensor):
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul inner-axis mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def bwd(g):
        ga = np.matmul(g, np.swapaxes(bd, -1, -2))
        gb = np.matmul(np.swapaxes(ad, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _out(np.matmul(ad, bd), (a, b), bwd)


def embedding(weight: Tensor, ids: np.ndarray):
    """Row lookup: weight (V, D), integer ids (...,) -> (..., D)."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise ValueError(f"embedding id out of range [0, {weight.shape[0]})")

    def bwd(g):
        gw = np.zeros_like(weight.data)
        np.add.at(gw, ids.reshape(-1), g.reshape(-1, weight.shape[1]))
        return (gw,)

    return _out(weight.data[ids], (weight,), bwd)


# ---------------------------------------------------------------------------
# convolution family

def _conv_out_shape(extents, kernel, stride, pad, axis_names):
    out = []
    for size, k, s, p, name in zip(extents, kernel, stride, pad, axis_names):
        o = (size + 2 * p - k) // s + 1
        if o < 1:
            raise ValueError(
                f"zero output extent along {name} axis: in={size} kernel={k} "
                f"stride={s} pad={p}")
        out.append(o)
    return tuple(out)


def conv3d(x: Tensor, w: Tensor, bias: Tensor | None = None,
           stride=(1, 1, 1), padding=(0, 0, 0), groups: int = 1):
    """Cross-correlation over (N, C, T, H, W) with weight (Cout, Cin/g, kt, kh, kw)."""
    if x.ndim != 5 or w.ndim != 5:
        raise ValueError(f"conv3d expects 5-d input/weight, got {x.shape}/{w.shape}")
    n, cin = x.shape[:2]
    cout = w.shape[0]
    if cin % groups or cout % groups:
        raise ValueError(f"groups={groups} must divide Cin={cin} and Cout={cout}")
    if w.shape[1] != cin // groups:
        raise ValueError(
            f"weight channel axis mismatch: expected {cin // groups} (Cin/groups), "
            f"got {w.shape[1]}")
    kernel = w.shape[2:]
    out_sp = _conv_out_shape(x.shape[2:], kernel, stride, padding,
                             ("temporal", "height", "width"))

    if groups == 1 and kernel == (1, 1, 1) and tuple(stride) == (1, 1, 1) \
            and tuple(padding) == (0, 0, 0):
        out = _pointwise(x, w, bias, n, cin, cout, x.shape[2:])
    elif groups == cin and cout == cin:
        out = _depthwise3d(x, w, bias, stride, padding, out_sp)
    elif groups == 1:
        out = _dense_conv(x, w, bias, stride, padding, out_sp, three_d=True)
    else:
        out = _grouped_conv3d(x, w, bias, stride, padding, out_sp, groups)
    return out


def conv2d(x: Tensor, w: Tensor, bias: Tensor | None = None,
           stride=(1, 1), padding=(0, 0), groups: int = 1):
    """Cross-correlation over (N, C, H, W) with weight (Cout, Cin/g, kh, kw)."""
    if x.ndim != 4 or w.ndim != 4:
        raise ValueError(f"conv2d expects 4-d input/weight, got {x.shape}/{w.shape}")
    n, cin = x.shape[:2]
    cout = w.shape[0]
    if cin % groups or cout % groups:
        raise ValueError(f"groups={groups} must divide Cin={cin} and Cout={cout}")
    if w.shape[1] != cin // groups:
        raise ValueError(
            f"weight channel axis mismatch: expected {cin // groups} (Cin/groups), "
            f"got {w.shape[1]}")
    kernel = w.shape[2:]
    out_sp = _conv_out_shape(x.shape[2:], kernel, stride, padding, ("height", "width"))

    if groups != 1:
        # 2D grouped conv routes through the 3D path with a unit temporal axis
        x5 = reshape(x, (n, cin, 1) + x.shape[2:])
        w5 = reshape(w, (cout, w.shape[1], 1) + tuple(kernel))
        out = conv3d(x5, w5, bias, (1,) + tuple(stride), (0,) + tuple(padding), groups)
        return reshape(out, (n, cout) + out_sp)
    if kernel == (1, 1) and tuple(stride) == (1, 1) and tuple(padding) == (0, 0):
        return _pointwise(x, w, bias, n, cin, cout, x.shape[2:])
    return _dense_conv(x, w, bias, stride, padding, out_sp, three_d=False)


def _bias_term(bias, cout, spatial_ndim, dtype):
    if bias is None:
        return None
    if bias.shape != (cout,):
        raise ValueError(f"bias must have shape ({cout},), got {bias.shape}")
    return bias.data.reshape((1, cout) + (1,) * spatial_ndim)


def _pointwise(x, w, bias, n, cin, cout, spatial):
    w2 = w.data.reshape(cout, cin)
    xf = x.data.reshape(n, cin, -1)
    y = np.matmul(w2, xf)
    out_shape = (n, cout) + tuple(spatial)
    b = _bias_term(bias, cout, len(spatial), x.dtype)
    y = y.reshape(out_shape)
    if b is not None:
        y = y + b

    def bwd(g):
        gf = g.reshape(n, cout, -1)
        gw = np.matmul(gf, xf.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
        gx = np.matmul(w2.T, gf).reshape(x.shape)
        gb = gf.sum(axis=(0, 2)) if bias is not None else None
        return (gx, gw) if bias is None else (gx, gw, gb)

    parents = (x, w) if bias is None else (x, w, bias)
    return _out(y, parents, bwd)


def _dense_conv(x, w, bias, stride, padding, out_sp, three_d):
    K = backend.kernels
    n = x.shape[0]
    cout = w.shape[0]
    kernel = tuple(w.shape[2:])
    stride = tuple(stride)
    padding = tuple(padding)
    im2col = K.im2col3d if three_d else K.im2col2d
    col2im = K.col2im3d if three_d else K.col2im2d

    cols = im2col(x.data, kernel, stride, padding)
    w2 = w.data.reshape(cout, -1)
    y = np.matmul(w2, cols).reshape((n, cout) + out_sp)
    b = _bias_term(bias, cout, len(out_sp), x.dtype)
    if b is not None:
        y = y + b
    xshape = x.shape

    def bwd(g):
        gf = np.ascontiguousarray(g.reshape(n, cout, -1))
        gw = np.matmul(gf, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
        gcols = np.ascontiguousarray(np.matmul(w2.T, gf))
        gx = col2im(gcols, xshape, kernel, stride, padding)
        gb = gf.sum(axis=(0, 2)) if bias is not None else None
        return (gx, gw) if bias is None else (gx, gw, gb)

    parents = (x, w) if bias is None else (x, w, bias)
    return _out(y, parents, bwd)


def _depthwise3d(x, w, bias, stride, padding, out_sp):
    K = backend.kernels
    stride = tuple(stride)
    padding = tuple(padding)
    wsq = np.ascontiguousarray(w.data[:, 0])  # (C, kt, kh, kw)
    y = K.dwconv3d(np.ascontiguousarray(x.data), wsq, stride, padding)
    b = _bias_term(bias, w.shape[0], 3, x.dtype)
    if b is not None:
        y = y + b
    xshape = x.shape
    kernel = tuple(w.shape[2:])

    def bwd(g):
        g = np.ascontiguousarray(g)
        gx = K.dwconv3d_grad_input(g, wsq, xshape, stride, padding)
        gw = K.dwconv3d_grad_weight(np.ascontiguousarray(x.data), g,
                                    kernel, stride, padding)[:, None]
        gb = g.sum(axis=(0, 2, 3, 4)) if bias is not None else None
        return (gx, gw) if bias is None else (gx, gw, gb)

    parents = (x, w) if bias is None else (x, w, bias)
    return _out(y, parents, bwd)


def _grouped_conv3d(x, w, bias, stride, padding, out_sp, groups):
    """General grouped path: per-group dense conv, used by odd group counts."""
    K = backend.kernels
    n, cin = x.shape[:2]
    cout = w.shape[0]
    cing, coutg = cin // groups, cout // groups
    kernel = tuple(w.shape[2:])
    stride = tuple(stride)
    padding = tuple(padding)

    cols = []
    y = np.empty((n, cout) + out_sp, dtype=x.dtype)
    for g_i in range(groups):
        xg = np.ascontiguousarray(x.data[:, g_i * cing:(g_i + 1) * cing])
        cg = K.im2col3d(xg, kernel, stride, padding)
        cols.append(cg)
        w2 = w.data[g_i * coutg:(g_i + 1) * coutg].reshape(coutg, -1)
        y[:, g_i * coutg:(g_i + 1) * coutg] = np.matmul(w2, cg).reshape(
            (n, coutg) + out_sp)
    b = _bias_term(bias, cout, 3, x.dtype)
    if b is not None:
        y = y + b
    xshape_g = (n, cing) + tuple(x.shape[2:])

    def bwd(g):
        gx = np.empty(x.shape, dtype=g.dtype)
        gw = np.empty(w.shape, dtype=g.dtype)
        for g_i in range(groups):
            gf = np.ascontiguousarray(
                g[:, g_i * coutg:(g_i + 1) * coutg].reshape(n, coutg, -1))
            w2 = w.data[g_i * coutg:(g_i + 1) * coutg].reshape(coutg, -1)
            gw[g_i * coutg:(g_i + 1) * coutg] = np.matmul(
                gf, cols[g_i].transpose(0, 2, 1)).sum(axis=0).reshape(
                    (coutg,) + w.shape[1:])
            gcols = np.ascontiguousarray(np.matmul(w2.T, gf))
            gx[:, g_i * cing:(g_i + 1) * cing] = K.col2im3d(
                gcols, xshape_g, kernel, stride, padding)
        gb = g.sum(axis=(0, 2, 3, 4)) if bias is not None else None
        return (gx, gw) if bias is None else (gx, gw, gb)

    parents = (x, w) if bias is None else (x, w, bias)
    return _out(y, parents, bwd)


def transposed_conv2d(x: Tensor, w: Tensor, bias: Tensor | None = None,
                      stride=(2, 2), padding=(1, 1), groups: int = 1):
    """Transposed 2D convolution (adjoint of conv2d w.r.t. its input).

    Weight layout (Cin, Cout/groups, kh, kw).  With the pinned 4x4 kernel,
    stride 2, padding 1 the spatial extents exactly double.
    """
    if x.ndim != 4 or w.ndim != 4:
        raise ValueError(f"transposed_conv2d expects 4-d tensors, got {x.shape}/{w.shape}")
    n, cin, h, wd = x.shape
    if w.shape[0] != cin:
        raise ValueError(f"weight leading axis {w.shape[0]} != input channels {cin}")
    kh, kw = w.shape[2:]
    sh, sw = stride
    ph, pw = padding
    ho = (h - 1) * sh - 2 * ph + kh
    wo = (wd - 1) * sw - 2 * pw + kw
    if ho < 1 or wo < 1:
        raise ValueError(f"zero output extent: ({ho},{wo})")
    K = backend.kernels

    if groups == 1:
        cout = w.shape[1]
        w2 = w.data.reshape(cin, -1)  # (Cin, Cout*kh*kw)
        xf = x.data.reshape(n, cin, -1)
        cols = np.ascontiguousarray(np.matmul(w2.T, xf))
        y = K.col2im2d(cols, (n, cout, ho, wo), (kh, kw), (sh, sw), (ph, pw))

        def bwd(g):
            gcols = K.im2col2d(np.ascontiguousarray(g), (kh, kw), (sh, sw), (ph, pw))
            gx = np.matmul(w2, gcols).reshape(x.shape)
            gw = np.matmul(xf, gcols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
            gb = g.sum(axis=(0, 2, 3)) if bias is not None else None
            return (gx, gw) if bias is None else (gx, gw, gb)
    elif groups == cin and w.shape[1] == 1:
        cout = cin
        wflat = w.data.reshape(1, cin, kh * kw, 1)
        xf = x.data.reshape(n, cin, 1, -1)
        cols = np.ascontiguousarray((wflat * xf).reshape(n, cin * kh * kw, -1))
        y = K.col2im2d(cols, (n, cout, ho, wo), (kh, kw), (sh, sw), (ph, pw))

        def bwd(g):
            gcols = K.im2col2d(np.ascontiguousarray(g), (kh, kw), (sh, sw), (ph, pw))
            gcols = gcols.reshape(n, cin, kh * kw, -1)
            gx = (gcols * wflat).sum(axis=2).reshape(x.shape)
            gw = np.einsum("nckl,ncl->ck", gcols, x.data.reshape(n, cin, -1),
                           optimize=True).reshape(w.shape)
            gb = g.sum(axis=(0, 2, 3)) if bias is not None else None
            return (gx, gw) if bias is None else (gx, gw, gb)
    else:
        raise ValueError(f"transposed_conv2d supports groups=1 or groups=Cin, got {groups}")

    b = _bias_term(bias, cout, 2, x.dtype)
    if b is not None:
        y = y + b
    parents = (x, w) if bias is None else (x, w, bias)
    return _out(y, parents, bwd)


# ---------------------------------------------------------------------------
# normalization and fused losses

def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5):
    """Per-channel batch norm over all axes but 1, using batch statistics.

    Returns (out, batch_mean, batch_var); the caller owns running-stat updates.
    """
    axes = (0,) + tuple(range(2, x.ndim))
    m = x.data.mean(axis=axes)
    var = x.data.var(axis=axes)
    bshape = (1, x.shape[1]) + (1,) * (x.ndim - 2)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - m.reshape(bshape)) * inv.reshape(bshape)
    y = gamma.data.reshape(bshape) * xhat + beta.data.reshape(bshape)
    count = x.size // x.shape[1]

    def bwd(g):
        gg = (g * xhat).sum(axis=axes)
        gb = g.sum(axis=axes)
        gxhat = g * gamma.data.reshape(bshape)
        t1 = gxhat.sum(axis=axes).reshape(bshape)
        t2 = (gxhat * xhat).sum(axis=axes).reshape(bshape)
        gx = (inv.reshape(bshape) / count) * (count * gxhat - t1 - xhat * t2)
        return gx.astype(x.dtype, copy=False), gg, gb

    return _out(y, (x, gamma, beta), bwd), m, var


def batch_norm_eval(x: Tensor, gamma: Tensor, beta: Tensor,
                    running_mean: np.ndarray, running_var: np.ndarray,
                    eps: float = 1e-5):
    """Inference-mode norm with fixed statistics, composed from primitives."""
    bshape = (1, x.shape[1]) + (1,) * (x.ndim - 2)
    inv = (1.0 / np.sqrt(running_var + eps)).reshape(bshape).astype(x.dtype)
    mean_c = Tensor((running_mean.reshape(bshape) * inv).astype(x.dtype))
    scaled = sub(mul(x, Tensor(inv)), mean_c)
    return add(mul(scaled, reshape(gamma, bshape)), reshape(beta, bshape))


def cross_entropy(logits: Tensor, targets: np.ndarray, class_axis: int = 1,
                  ignore_index: int | None = None):
    """Mean negative log-softmax of the target class over contributing positions."""
    targets = np.asarray(targets)
    axis = class_axis % logits.ndim
    ncls = logits.shape[axis]
    moved = np.moveaxis(logits.data, axis, -1)
    if targets.shape != moved.shape[:-1]:
        raise ValueError(f"target shape {targets.shape} does not match logits "
                         f"{logits.shape} with class axis {axis}")
    flat = moved.reshape(-1, ncls)
    tflat = targets.reshape(-1).astype(np.int64)
    if ignore_index is None:
        contributing = np.ones(tflat.shape, dtype=bool)
    else:
        contributing = tflat != ignore_index
    checked = tflat[contributing]
    if checked.size == 0:
        raise ValueError("cross_entropy: no contributing positions")
    if checked.min() < 0 or checked.max() >= ncls:
        raise ValueError(f"label out of range [0, {ncls})")

    m = flat.max(axis=1, keepdims=True)
    e = np.exp(flat - m)
    lse = m[:, 0] + np.log(e.sum(axis=1))
    safe_t = np.where(contributing, tflat, 0)
    nll = lse - flat[np.arange(flat.shape[0]), safe_t]
    count = int(contributing.sum())
    loss = nll[contributing].sum() / count

    def bwd(g):
        p = e / e.sum(axis=1, keepdims=True)
        p[np.arange(flat.shape[0]), safe_t] -= 1.0
        p *= (contributing[:, None] * (g / count))
        gx = np.moveaxis(p.reshape(moved.shape), -1, axis)
        return (gx.astype(logits.dtype, copy=False),)

    return _out(np.asarray(loss, dtype=logits.dtype), (logits,), bwd)
