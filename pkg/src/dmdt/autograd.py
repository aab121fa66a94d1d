"""Dense tensors with reverse-mode automatic differentiation.

Every op builds a node holding its parents and a closure that maps the
output gradient to one gradient per parent. ``Tensor.backward`` walks the
graph once in reverse topological order. Leaf tensors accumulate into
``.grad``; intermediate gradients live only for the duration of the pass.
"""
from __future__ import annotations

import contextlib

import numpy as np

from .errors import ContractError, DimensionError, InvalidMaskError

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled():
    return _grad_enabled


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "__weakref__")

    # make numpy defer to our reflected operators
    __array_priority__ = 1000

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    # -- construction helpers -------------------------------------------------

    @classmethod
    def _make(cls, data, parents, backward):
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out._parents = ()
        out._backward = None
        out.requires_grad = False
        if _grad_enabled and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._backward = backward
        return out

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
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self):
        return self.shape[0]

    # -- backward -------------------------------------------------------------

    def backward(self, grad=None):
        if grad is None:
            if self.data.size != 1:
                raise ContractError(
                    f"backward() needs a scalar loss, got shape {self.shape}"
                )
            grad = np.ones_like(self.data)
        if not self.requires_grad:
            raise ContractError("loss does not depend on any tensor requiring grad")

        order = []
        seen = set()
        stack = [(self, False)]
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

        grads = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for p, pg in zip(node._parents, node._backward(g)):
                if pg is None or not p.requires_grad:
                    continue
                prev = grads.get(id(p))
                grads[id(p)] = pg if prev is None else prev + pg

    # -- operators ------------------------------------------------------------

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

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return getitem(self, idx)

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

    def swapaxes(self, a, b):
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return transpose(self, tuple(axes))

    @property
    def T(self):
        return self.swapaxes(-1, -2)


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype or np.float64))


def _pair(a, b):
    if not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    if not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    return a, b


def _check_broadcast(a, b, opname):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(
            f"{opname}: cannot broadcast shapes {a.shape} and {b.shape}"
        ) from None


# -- elementwise ---------------------------------------------------------------


def add(a, b):
    a, b = _pair(a, b)
    _check_broadcast(a, b, "add")
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return Tensor._make(a.data + b.data, (a, b), backward)


def sub(a, b):
    a, b = _pair(a, b)
    _check_broadcast(a, b, "sub")
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return Tensor._make(a.data - b.data, (a, b), backward)


def mul(a, b):
    a, b = _pair(a, b)
    _check_broadcast(a, b, "mul")

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._make(a.data * b.data, (a, b), backward)


def div(a, b):
    a, b = _pair(a, b)
    _check_broadcast(a, b, "div")
    out = a.data / b.data

    def backward(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._make(out, (a, b), backward)


def scale(x, s):
    """Multiply by a python scalar."""
    s = float(s)

    def backward(g):
        return (g * s,)

    return Tensor._make(x.data * s, (x,), backward)


def relu(x):
    pos = x.data > 0

    def backward(g):
        return (g * pos,)

    return Tensor._make(np.where(pos, x.data, 0.0).astype(x.dtype, copy=False), (x,), backward)


def sigmoid(x):
    # split by sign so exp never overflows
    d = x.data
    e = np.exp(-np.abs(d))
    out = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype, copy=False)

    def backward(g):
        return (g * out * (1.0 - out),)

    return Tensor._make(out, (x,), backward)


def exp(x):
    out = np.exp(x.data)

    def backward(g):
        return (g * out,)

    return Tensor._make(out, (x,), backward)


def log(x):
    def backward(g):
        return (g / x.data,)

    return Tensor._make(np.log(x.data), (x,), backward)


def abs_(x):
    sign = np.sign(x.data)

    def backward(g):
        return (g * sign,)

    return Tensor._make(np.abs(x.data), (x,), backward)


def maximum(a, b):
    a, b = _pair(a, b)
    _check_broadcast(a, b, "maximum")
    pick_a = a.data >= b.data

    def backward(g):
        ga = _unbroadcast(g * pick_a, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ~pick_a, b.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._make(np.where(pick_a, a.data, b.data), (a, b), backward)


def minimum(a, b):
    a, b = _pair(a, b)
    _check_broadcast(a, b, "minimum")
    pick_a = a.data <= b.data

    def backward(g):
        ga = _unbroadcast(g * pick_a, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ~pick_a, b.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._make(np.where(pick_a, a.data, b.data), (a, b), backward)


def masked_fill(x, mask, value):
    """Replace entries where ``mask`` is True by ``value`` (no gradient there)."""
    mask = np.asarray(mask, dtype=bool)
    keep = ~mask

    def backward(g):
        return (_unbroadcast(g * keep, x.shape),)

    return Tensor._make(np.where(mask, value, x.data).astype(x.dtype, copy=False), (x,), backward)


def dropout(x, rate, training, rng):
    """Inverted dropout; identity when not training or ``rate == 0``."""
    if not training or rate <= 0.0:
        return x
    keep = (rng.random(x.shape, dtype=np.float32) >= rate).astype(x.dtype)
    keep *= 1.0 / (1.0 - rate)

    def backward(g):
        return (g * keep,)

    return Tensor._make(x.data * keep, (x,), backward)


# -- reductions and shapes -------------------------------------------------------


def sum_(x, axis=None, keepdims=False):
    shape = x.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return Tensor._make(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), backward)


def mean(x, axis=None, keepdims=False):
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return scale(sum_(x, axis, keepdims), 1.0 / n)


def reshape(x, shape):
    old = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot reshape {old} into {shape}") from None

    def backward(g):
        return (g.reshape(old),)

    return Tensor._make(out, (x,), backward)


def transpose(x, axes=None):
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))

    def backward(g):
        return (g.transpose(inv),)

    return Tensor._make(x.data.transpose(axes), (x,), backward)


def _is_basic_index(idx):
    parts = idx if isinstance(idx, tuple) else (idx,)
    return all(p is None or p is Ellipsis or isinstance(p, (slice, int)) for p in parts)


def getitem(x, idx):
    shape = x.shape
    basic = _is_basic_index(idx)

    def backward(g):
        out = np.zeros(shape, dtype=g.dtype)
        if basic:
            out[idx] = g
        else:
            np.add.at(out, idx, g)
        return (out,)

    return Tensor._make(x.data[idx], (x,), backward)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(
            t.shape[i] != ref[i] for i in range(len(ref)) if i != ax
        ):
            raise DimensionError(
                f"concat: shapes {ref} and {t.shape} differ off axis {axis}"
            )
    sizes = [t.shape[ax] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax)
            for i in range(len(tensors))
        )

    return Tensor._make(np.concatenate([t.data for t in tensors], axis=ax), tuple(tensors), backward)


def split(x, sizes, axis=0):
    """Split along ``axis`` into consecutive pieces of the given sizes."""
    ax = axis % x.ndim
    if sum(sizes) != x.shape[ax]:
        raise DimensionError(f"split: sizes {sizes} do not add up to {x.shape[ax]}")
    out = []
    start = 0
    for n in sizes:
        idx = [slice(None)] * x.ndim
        idx[ax] = slice(start, start + n)
        out.append(getitem(x, tuple(idx)))
        start += n
    return out


def broadcast_to(x, shape):
    old = x.shape

    def backward(g):
        return (_unbroadcast(g, old),)

    return Tensor._make(np.broadcast_to(x.data, shape), (x,), backward)


# -- linear algebra --------------------------------------------------------------


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            if b.ndim == 2 and a.ndim > 2:
                # fold batch dims into rows: one gemm instead of a stack
                k = a.shape[-1]
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return Tensor._make(a.data @ b.data, (a, b), backward)


def linear(x, weight, bias=None):
    """``x @ weight + bias`` with weight stored as (in, out)."""
    out = matmul(x, weight)
    return out if bias is None else add(out, bias)


# -- normalisation and attention primitives ---------------------------------------


def softmax(x, axis=-1):
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return Tensor._make(out, (x,), backward)


def layer_norm(x, gain, bias, eps=1e-5):
    c = x.shape[-1]
    if gain.shape != (c,) or bias.shape != (c,):
        raise DimensionError(
            f"layer_norm: gain {gain.shape} / bias {bias.shape} must match last axis {c}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def backward(g):
        gx = ggain = gbias = None
        if gain.requires_grad:
            ggain = (g * xhat).reshape(-1, c).sum(axis=0)
        if bias.requires_grad:
            gbias = g.reshape(-1, c).sum(axis=0)
        if x.requires_grad:
            gh = g * gain.data
            gx = inv * (
                gh
                - gh.mean(axis=-1, keepdims=True)
                - xhat * (gh * xhat).mean(axis=-1, keepdims=True)
            )
        return gx, ggain, gbias

    return Tensor._make(out, (x, gain, bias), backward)


def _check_mask(mask, axis_len):
    mask = np.asarray(mask, dtype=bool)
    if mask.shape[-1] != axis_len:
        raise DimensionError(f"mask length {mask.shape[-1]} != {axis_len}")
    if not mask.any(axis=-1).all():
        raise InvalidMaskError("mask has no unmasked position")
    return mask


def masked_mean(x, mask):
    """Mean over the rows (axis -2) of ``x`` whose mask entry is set.

    ``x`` is (..., n, c) and ``mask`` is (..., n). Rows with mask 0 get exactly
    zero weight, so their content never reaches the output.
    """
    mask = _check_mask(mask, x.shape[-2])
    w = mask.astype(x.dtype)[..., None]
    count = w.sum(axis=-2)
    # where() instead of multiply keeps inf/nan garbage in padding out
    summed = np.where(mask[..., None], x.data, 0.0).sum(axis=-2)
    out = summed / count

    def backward(g):
        return (np.broadcast_to((g / count)[..., None, :], x.shape) * w,)

    return Tensor._make(out.astype(x.dtype, copy=False), (x,), backward)


def masked_attention_weights(scores, key_mask=None):
    """Softmax over the last axis with masked keys forced to weight zero."""
    if key_mask is None:
        return softmax(scores, -1)
    key_mask = _check_mask(key_mask, scores.shape[-1])
    return softmax(masked_fill(scores, ~key_mask, -np.inf), -1)


def scaled_dot_attention(q, k, v, key_mask=None):
    """Fused ``softmax(q k^T / sqrt(d) + mask) v`` with a hand-written backward.

    Same result as composing ``matmul``, ``masked_attention_weights`` and
    ``matmul``; it only avoids materialising the intermediate graph nodes.
    """
    d = q.shape[-1]
    s = 1.0 / np.sqrt(d)
    scores = q.data @ np.swapaxes(k.data, -1, -2)
    scores *= s
    if key_mask is not None:
        key_mask = _check_mask(key_mask, k.shape[-2])
        scores = np.where(key_mask, scores, -np.inf)
    scores -= scores.max(axis=-1, keepdims=True)
    np.exp(scores, out=scores)
    scores /= scores.sum(axis=-1, keepdims=True)
    w = scores
    out = w @ v.data

    def backward(g):
        gq = gk = gv = None
        if v.requires_grad:
            gv = _unbroadcast(np.swapaxes(w, -1, -2) @ g, v.shape)
        if q.requires_grad or k.requires_grad:
            gw = g @ np.swapaxes(v.data, -1, -2)
            gw -= (gw * w).sum(axis=-1, keepdims=True)
            gw *= w
            gw *= s
            if q.requires_grad:
                gq = _unbroadcast(gw @ k.data, q.shape)
            if k.requires_grad:
                gk = _unbroadcast(np.swapaxes(gw, -1, -2) @ q.data, k.shape)
        return gq, gk, gv

    return Tensor._make(out, (q, k, v), backward)


def embedding(table, ids):
    ids = np.asarray(ids)
    if ids.dtype.kind not in "iu":
        raise ContractError("embedding ids must be integers")
    return getitem(table, ids)


def bilinear_sample(grid, coords):
    """Sample ``grid`` at normalised ``coords`` with border clamping.

    ``grid`` is (B, G, G, C) or (G, G, C), flattened row-major elsewhere as
    index ``y * G + x``. ``coords`` is (B, P, 2) holding (x, y) in units of the
    image side. Coordinates map to cell space as ``u = x * (G - 1)`` and are
    clamped to ``[0, G - 1]``; clamped coordinates receive no gradient.
    Returns (B, P, C).
    """
    gdat = grid.data
    batched = gdat.ndim == 4
    G = gdat.shape[-2]
    if gdat.shape[-3] != G:
        raise DimensionError(f"bilinear_sample: grid must be square, got {gdat.shape}")
    c = coords.data
    B, P, _ = c.shape
    span = max(G - 1, 0)
    u_raw = c[..., 0] * span
    v_raw = c[..., 1] * span
    u = np.clip(u_raw, 0.0, span)
    v = np.clip(v_raw, 0.0, span)
    x0 = np.minimum(np.floor(u).astype(np.int64), max(G - 2, 0))
    y0 = np.minimum(np.floor(v).astype(np.int64), max(G - 2, 0))
    x1 = np.minimum(x0 + 1, G - 1)
    y1 = np.minimum(y0 + 1, G - 1)
    fx = (u - x0)[..., None]
    fy = (v - y0)[..., None]

    if batched:
        bi = np.arange(B)[:, None]
        g00, g01 = gdat[bi, y0, x0], gdat[bi, y0, x1]
        g10, g11 = gdat[bi, y1, x0], gdat[bi, y1, x1]
    else:
        g00, g01 = gdat[y0, x0], gdat[y0, x1]
        g10, g11 = gdat[y1, x0], gdat[y1, x1]
    w00 = (1 - fx) * (1 - fy)
    w01 = fx * (1 - fy)
    w10 = (1 - fx) * fy
    w11 = fx * fy
    out = w00 * g00 + w01 * g01 + w10 * g10 + w11 * g11

    inside_x = (u_raw >= 0.0) & (u_raw <= span)
    inside_y = (v_raw >= 0.0) & (v_raw <= span)

    def backward(g):
        ggrid = gcoords = None
        if grid.requires_grad:
            ggrid = np.zeros_like(gdat)
            if batched:
                bb = np.broadcast_to(bi, x0.shape)
                for yy, xx, w in ((y0, x0, w00), (y0, x1, w01), (y1, x0, w10), (y1, x1, w11)):
                    np.add.at(ggrid, (bb, yy, xx), g * w)
            else:
                for yy, xx, w in ((y0, x0, w00), (y0, x1, w01), (y1, x0, w10), (y1, x1, w11)):
                    np.add.at(ggrid, (yy, xx), g * w)
        if coords.requires_grad:
            dfx = ((1 - fy) * (g01 - g00) + fy * (g11 - g10)) * g
            dfy = ((1 - fx) * (g10 - g00) + fx * (g11 - g01)) * g
            gcoords = np.empty_like(c)
            gcoords[..., 0] = dfx.sum(-1) * span * inside_x
            gcoords[..., 1] = dfy.sum(-1) * span * inside_y
        return ggrid, gcoords

    return Tensor._make(out.astype(gdat.dtype, copy=False), (grid, coords), backward)


def numerical_grad(f, x, eps=1e-5):
    """Central finite differences of scalar ``f()`` w.r.t. array ``x`` (in place)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"], op_flags=["readwrite"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + eps
        fp = f()
        x[i] = old - eps
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * eps)
    return g


def rel_error(a, b, floor=1e-8):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(a)), np.max(np.abs(b)), floor))



def gradcheck(fn, arrays, rng, eps=1e-6, wrt=None):
    """Largest relative error between analytic and central-difference gradients.

    ``fn`` maps Tensors to a Tensor; the scalar checked is ``sum(fn(...) * R)``
    for a fixed random ``R``. Returns one error per checked input.
    """
    ts = [Tensor(np.array(a, dtype=np.float64), requires_grad=True) for a in arrays]
    wrt = range(len(ts)) if wrt is None else wrt
    out = fn(*ts)
    r = rng.normal(size=out.shape)
    sum_(mul(out, Tensor(r))).backward()

    def f():
        with no_grad():
            return float((fn(*ts).data * r).sum())

    errors = []
    for i in wrt:
        num = numerical_grad(f, ts[i].data, eps)
        ana = ts[i].grad if ts[i].grad is not None else np.zeros_like(num)
        errors.append(rel_error(ana, num))
    return errors
