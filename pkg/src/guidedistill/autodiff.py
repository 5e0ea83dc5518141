"""Dense float tensors with a reverse-mode gradient tape.

The forward dtype is float32. float64 is supported so that gradient checks
can run the exact same graph in higher precision ("shadow mode"); nothing
else should use it. Broadcasting is deliberately narrow: same shape,
size-1 scalars, a trailing vector ([..., F] op [F]), and a kept last axis
([..., F] op [..., 1]). Anything else is a shape error. Every op validates
shapes and rejects non-finite outputs.

Ops record a tape node only while gradients are enabled and at least one
input requires grad, so frozen-parameter forwards cost no graph. backward()
consumes the tape: the graph is released and a second backward on the same
loss raises.
"""

import math

import numpy as np

from ._kernels import col2im, im2col, silu_forward


class ShapeError(ValueError):
    """Operand shapes do not conform for the attempted op."""


class NumericError(FloatingPointError):
    """An op produced (or was handed) a NaN or Inf."""


class TapeError(RuntimeError):
    """backward() called on a non-scalar, empty, or already consumed tape."""


_grad_enabled = True


class no_grad:
    """Context manager that disables tape recording."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def grad_enabled():
    return _grad_enabled


def _check_finite(arr, op):
    # single-reduction fast path: any NaN/Inf makes the sum non-finite; a
    # rare overflowing sum of finite values falls back to the exact check
    with np.errstate(over="ignore", invalid="ignore"):
        ok = math.isfinite(float(arr.sum()))
    if not ok and not np.isfinite(arr).all():
        raise NumericError(f"{op}: non-finite values in result")


class Tensor:
    """N-d float array, optionally tracked on the gradient tape."""

    __slots__ = ("data", "grad", "requires_grad", "_backward", "_parents", "_consumed")

    def __init__(self, data, requires_grad=False, dtype=np.float32):
        if isinstance(data, Tensor):
            raise TypeError("wrap raw array data, not another Tensor")
        arr = np.asarray(data, dtype=dtype)
        _check_finite(arr, "Tensor")
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._backward = None
        self._parents = ()
        self._consumed = False

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

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def detach(self):
        t = Tensor.__new__(Tensor)
        t.data = self.data
        t.grad = None
        t.requires_grad = False
        t._backward = None
        t._parents = ()
        t._consumed = False
        return t

    def __repr__(self):
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={tuple(self.shape)}, dtype={self.data.dtype.name}{flag})"

    # arithmetic sugar; scalars are promoted to the tensor's dtype
    def __add__(self, other):
        return add(self, _coerce(other, self))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _coerce(other, self))

    def __rsub__(self, other):
        return sub(_coerce(other, self), self)

    def __mul__(self, other):
        return mul(self, _coerce(other, self))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, _coerce(other, self))

    def __neg__(self):
        return mul(self, _coerce(-1.0, self))

    def __matmul__(self, other):
        return matmul(self, other)


def _coerce(x, like):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.data.dtype))


def _make_node(data, op, parents, backward):
    """Wrap an op result; attach a tape node if the result needs one."""
    _check_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._consumed = False
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _same_dtype(op, *ts):
    d0 = ts[0].data.dtype
    for t in ts[1:]:
        if t.data.dtype != d0:
            raise TypeError(f"{op}: mixed dtypes {d0} and {t.data.dtype}")
    return d0


def backward(loss):
    """Accumulate d(loss)/d(leaf) into every requiring leaf's .grad.

    The loss must be scalar and must have a non-empty tape behind it. The
    tape is consumed: node links are dropped and a repeated backward on the
    same loss raises TapeError.
    """
    if not isinstance(loss, Tensor):
        raise TypeError("backward expects a Tensor")
    if loss.size != 1:
        raise TapeError(f"backward needs a scalar loss, got shape {tuple(loss.shape)}")
    if loss._consumed:
        raise TapeError("backward called twice on a consumed tape")
    if loss._backward is None:
        raise TapeError("backward on a constant: tape is empty")

    topo = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, done = stack.pop()
        if done:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p._backward is not None and id(p) not in seen:
                stack.append((p, False))

    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(topo):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        parent_grads = node._backward(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            if p._backward is None:
                p.grad = pg if p.grad is None else p.grad + pg
            else:
                prev = grads.get(id(p))
                grads[id(p)] = pg if prev is None else prev + pg

    for node in topo:
        node._backward = None
        node._parents = ()
        node._consumed = True


# ---------------------------------------------------------------------------
# broadcasting helpers (narrow on purpose)

def _binary_ok(sa, sb):
    if sa == sb:
        return True
    if int(np.prod(sa)) == 1 or int(np.prod(sb)) == 1:
        return True
    # trailing vector: [..., F] with [F]
    if len(sb) == 1 and len(sa) >= 1 and sa[-1] == sb[0]:
        return True
    if len(sa) == 1 and len(sb) >= 1 and sb[-1] == sa[0]:
        return True
    # kept last axis: [..., F] with [..., 1]
    if len(sa) == len(sb):
        if sa[:-1] == sb[:-1] and (sa[-1] == 1 or sb[-1] == 1):
            return True
    return False


def _reduce_to(g, shape):
    """Sum a broadcast gradient back down to `shape`."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


def _binary(op, a, b, fwd, bwd_a, bwd_b):
    _same_dtype(op, a, b)
    sa, sb = tuple(a.shape), tuple(b.shape)
    if not _binary_ok(sa, sb):
        raise ShapeError(f"{op}: shapes {sa} and {sb} do not conform")
    data = fwd(a.data, b.data)
    na, nb = a.requires_grad, b.requires_grad

    def bw(g):
        ga = _reduce_to(bwd_a(g, a.data, b.data), sa) if na else None
        gb = _reduce_to(bwd_b(g, a.data, b.data), sb) if nb else None
        return ga, gb

    return _make_node(data, op, (a, b), bw)


def add(a, b):
    return _binary("add", a, b, lambda x, y: x + y,
                   lambda g, x, y: g, lambda g, x, y: g)


def sub(a, b):
    return _binary("sub", a, b, lambda x, y: x - y,
                   lambda g, x, y: g, lambda g, x, y: -g)


def mul(a, b):
    return _binary("mul", a, b, lambda x, y: x * y,
                   lambda g, x, y: g * y, lambda g, x, y: g * x)


def div(a, b):
    return _binary("div", a, b, lambda x, y: x / y,
                   lambda g, x, y: g / y, lambda g, x, y: -g * x / (y * y))


def guarded_div(a, b, floor=1e-8):
    """a / b where b >= floor, else 0. b is expected nonnegative (norms)."""
    _same_dtype("guarded_div", a, b)
    if tuple(a.shape) != tuple(b.shape):
        raise ShapeError(f"guarded_div: shapes {tuple(a.shape)} vs {tuple(b.shape)}")
    ok = b.data >= floor
    safe = np.where(ok, b.data, 1.0)
    data = np.where(ok, a.data / safe, 0.0).astype(a.data.dtype)
    na, nb = a.requires_grad, b.requires_grad

    def bw(g):
        ga = np.where(ok, g / safe, 0.0) if na else None
        gb = np.where(ok, -g * a.data / (safe * safe), 0.0) if nb else None
        return ga, gb

    return _make_node(data, "guarded_div", (a, b), bw)


# ---------------------------------------------------------------------------
# linear algebra

def matmul(a, b):
    """2-D @ 2-D, N-D @ 2-D, or N-D @ N-D with identical batch dims."""
    _same_dtype("matmul", a, b)
    sa, sb = a.shape, b.shape
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: need 2-D operands, got {tuple(sa)} @ {tuple(sb)}")
    if sa[-1] != sb[-2]:
        raise ShapeError(f"matmul: inner dims differ, {tuple(sa)} @ {tuple(sb)}")
    if b.ndim > 2 and tuple(sa[:-2]) != tuple(sb[:-2]):
        raise ShapeError(f"matmul: batch dims differ, {tuple(sa)} @ {tuple(sb)}")
    data = a.data @ b.data
    na, nb = a.requires_grad, b.requires_grad

    if b.ndim == 2:
        def bw(g):
            ga = g @ b.data.T if na else None
            if nb:
                k = sa[-1]
                m = g.shape[-1]
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, m)
            else:
                gb = None
            return ga, gb
    else:
        def bw(g):
            ga = g @ b.data.swapaxes(-1, -2) if na else None
            gb = a.data.swapaxes(-1, -2) @ g if nb else None
            return ga, gb

    return _make_node(data, "matmul", (a, b), bw)


def reshape(a, shape):
    data = a.data.reshape(shape)
    old = a.shape

    def bw(g):
        return (g.reshape(old),)

    return _make_node(data, "reshape", (a,), bw)


def transpose(a, axes):
    data = np.ascontiguousarray(np.transpose(a.data, axes))
    inv = np.argsort(axes)

    def bw(g):
        return (np.ascontiguousarray(np.transpose(g, inv)),)

    return _make_node(data, "transpose", (a,), bw)


def concat(tensors, axis):
    if not tensors:
        raise ShapeError("concat: empty input list")
    _same_dtype("concat", *tensors)
    base = list(tensors[0].shape)
    for t in tensors[1:]:
        s = list(t.shape)
        s[axis] = base[axis]
        if s != base:
            raise ShapeError(f"concat: {tuple(t.shape)} does not align with {tuple(tensors[0].shape)}")
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))

    return _make_node(data, "concat", tuple(tensors), bw)


# ---------------------------------------------------------------------------
# reductions and losses

def tsum(a):
    data = a.data.sum(dtype=a.data.dtype).reshape(())

    def bw(g):
        return (np.broadcast_to(g, a.shape).astype(a.data.dtype),)

    return _make_node(data, "sum", (a,), bw)


def tmean(a):
    n = a.size
    data = (a.data.sum(dtype=a.data.dtype) / n).reshape(())

    def bw(g):
        return ((np.broadcast_to(g, a.shape) / n).astype(a.data.dtype),)

    return _make_node(data, "mean", (a,), bw)


def mse(pred, target):
    """Mean squared error over every element."""
    _same_dtype("mse", pred, target)
    if tuple(pred.shape) != tuple(target.shape):
        raise ShapeError(f"mse: shapes {tuple(pred.shape)} vs {tuple(target.shape)}")
    d = pred.data - target.data
    n = d.size
    data = np.asarray((d * d).sum(dtype=pred.data.dtype) / n).reshape(())
    np_, nt = pred.requires_grad, target.requires_grad

    def bw(g):
        base = (2.0 / n) * g * d
        return (base if np_ else None, -base if nt else None)

    return _make_node(data, "mse", (pred, target), bw)


def masked_mse(pred, target, sample_mask):
    """MSE over the samples selected by `sample_mask` (leading axis).

    Deselected samples contribute nothing to the value or the gradient.
    Returns a constant zero when the mask is empty.
    """
    _same_dtype("masked_mse", pred, target)
    if tuple(pred.shape) != tuple(target.shape):
        raise ShapeError(f"masked_mse: shapes {tuple(pred.shape)} vs {tuple(target.shape)}")
    m = np.asarray(sample_mask, dtype=bool)
    if m.shape != (pred.shape[0],):
        raise ShapeError(f"masked_mse: mask shape {m.shape} vs batch {pred.shape[0]}")
    count = int(m.sum())
    if count == 0:
        return Tensor(np.zeros((), dtype=pred.data.dtype))
    per = int(np.prod(pred.shape[1:])) if pred.ndim > 1 else 1
    mexp = m.reshape((-1,) + (1,) * (pred.ndim - 1))
    d = (pred.data - target.data) * mexp
    n_eff = count * per
    data = np.asarray((d * d).sum(dtype=pred.data.dtype) / n_eff).reshape(())
    np_, nt = pred.requires_grad, target.requires_grad

    def bw(g):
        base = (2.0 / n_eff) * g * d
        return (base if np_ else None, -base if nt else None)

    return _make_node(data, "masked_mse", (pred, target), bw)


# ---------------------------------------------------------------------------
# nonlinearities and normalizers

def silu(a):
    data, s = silu_forward(a.data)

    def bw(g):
        return (g * (s * (1.0 + a.data * (1.0 - s))),)

    return _make_node(data, "silu", (a,), bw)


def softmax_last(a):
    x = a.data
    m = x.max(axis=-1, keepdims=True)
    e = np.exp(x - m)
    y = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        dot = (g * y).sum(axis=-1, keepdims=True)
        return (y * (g - dot),)

    return _make_node(y, "softmax_last", (a,), bw)


def masked_softmax(scores, key_mask):
    """Softmax over the last axis restricted to unmasked keys.

    `key_mask` is a plain bool/0-1 array of shape [B, S] broadcast onto
    scores [B, ..., S]. Rows with no unmasked key produce all-zero weights
    (the defined null-attention case), not NaN.
    """
    x = scores.data
    m = np.asarray(key_mask)
    if m.shape != (x.shape[0], x.shape[-1]):
        raise ShapeError(f"masked_softmax: mask {m.shape} vs scores {x.shape}")
    mb = (m != 0).astype(x.dtype).reshape((x.shape[0],) + (1,) * (x.ndim - 2) + (x.shape[-1],))
    with np.errstate(under="ignore"):
        xm = np.where(mb != 0, x, np.array(-1e30, dtype=x.dtype))
        mx = xm.max(axis=-1, keepdims=True)
        e = np.exp(xm - mx) * mb
        s = e.sum(axis=-1, keepdims=True)
        y = e / np.maximum(s, np.finfo(x.dtype).tiny)

    def bw(g):
        dot = (g * y).sum(axis=-1, keepdims=True)
        return (y * (g - dot),)

    return _make_node(y, "masked_softmax", (scores,), bw)


def l2norm_last(a, keepdims=True):
    """Row-wise L2 norm over the last axis."""
    x = a.data
    n = np.sqrt((x * x).sum(axis=-1, keepdims=True))
    data = n if keepdims else n[..., 0]

    def bw(g):
        gk = g if keepdims else g[..., None]
        return (gk * x / np.maximum(n, 1e-12),)

    return _make_node(data, "l2norm_last", (a,), bw)


def group_norm(x, gamma, beta, groups, eps=1e-5):
    """GroupNorm over channels-last [B, H, W, C] with per-channel affine.

    Statistics run in one einsum pass per moment; normalize+affine is fused
    into a single scale/shift pass per channel.
    """
    _same_dtype("group_norm", x, gamma, beta)
    b, h, w, c = x.shape
    if c % groups:
        raise ShapeError(f"group_norm: {c} channels not divisible by {groups} groups")
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"group_norm: affine shapes {tuple(gamma.shape)}/{tuple(beta.shape)} vs C={c}")
    cg = c // groups
    n = h * w * cg
    xd = x.data
    s_c = xd.sum(axis=(1, 2))                        # [B, C]
    sq_c = np.einsum("bijc,bijc->bc", xd, xd)
    mu_g = s_c.reshape(b, groups, cg).sum(axis=2) / n
    var_g = sq_c.reshape(b, groups, cg).sum(axis=2) / n - mu_g * mu_g
    inv_g = 1.0 / np.sqrt(np.maximum(var_g, 0.0) + eps)
    mu_c = np.repeat(mu_g, cg, axis=1).astype(xd.dtype)       # [B, C]
    inv_c = np.repeat(inv_g, cg, axis=1).astype(xd.dtype)
    scale = (inv_c * gamma.data)[:, None, None, :]
    shift = (beta.data - mu_c * inv_c * gamma.data)[:, None, None, :]
    data = xd * scale + shift
    nx, ng, nb = x.requires_grad, gamma.requires_grad, beta.requires_grad

    def bw(g):
        xhat = (xd - mu_c[:, None, None, :]) * inv_c[:, None, None, :]
        ggamma = np.einsum("bijc,bijc->c", g, xhat) if ng else None
        gbeta = g.sum(axis=(0, 1, 2)) if nb else None
        if nx:
            dxhat = g * gamma.data
            m1_g = dxhat.sum(axis=(1, 2)).reshape(b, groups, cg).sum(axis=2) / n
            m2_g = np.einsum("bijc,bijc->bc", dxhat, xhat).reshape(b, groups, cg).sum(axis=2) / n
            m1 = np.repeat(m1_g, cg, axis=1).astype(xd.dtype)[:, None, None, :]
            m2 = np.repeat(m2_g, cg, axis=1).astype(xd.dtype)[:, None, None, :]
            gx = inv_c[:, None, None, :] * (dxhat - m1 - xhat * m2)
        else:
            gx = None
        return gx, ggamma, gbeta

    return _make_node(data, "group_norm", (x, gamma, beta), bw)


# ---------------------------------------------------------------------------
# spatial ops (channels-last [B, H, W, C] layout; weights stay [Cout, Cin, k, k])

def conv2d(x, w, bias=None, stride=1):
    """2-D convolution, kernel 1 or 3, stride 1 or 2, zero padding k//2."""
    _same_dtype("conv2d", *([x, w] + ([bias] if bias is not None else [])))
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d: need 4-D input/weight, got {tuple(x.shape)}, {tuple(w.shape)}")
    b, h, wdt, cin = x.shape
    cout, cin_w, k, k2 = w.shape
    if k != k2 or k not in (1, 3):
        raise ShapeError(f"conv2d: kernel must be 1x1 or 3x3, got {k}x{k2}")
    if stride not in (1, 2):
        raise ShapeError(f"conv2d: stride must be 1 or 2, got {stride}")
    if cin != cin_w:
        raise ShapeError(f"conv2d: input channels {cin} vs weight {cin_w}")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"conv2d: bias shape {tuple(bias.shape)} vs C_out {cout}")
    pad = k // 2
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wdt + 2 * pad - k) // stride + 1
    dt = x.data.dtype
    # weight rows ordered (offset, channel) to match the cols layout below
    wmat = np.ascontiguousarray(w.data.transpose(2, 3, 1, 0).reshape(k * k * cin, cout))
    if k == 1 and stride == 1:
        xp = x.data
        cols = x.data.reshape(b * h * wdt, cin)
    else:
        if pad:
            xp = np.zeros((b, h + 2 * pad, wdt + 2 * pad, cin), dtype=dt)
            xp[:, pad:pad + h, pad:pad + wdt, :] = x.data
        else:
            xp = x.data
        cols = im2col(xp, ho, wo, k, stride)
    out = cols @ wmat
    if bias is not None:
        out += bias.data
    data = out.reshape(b, ho, wo, cout)
    nx, nw = x.requires_grad, w.requires_grad
    nb = bias is not None and bias.requires_grad
    cols_saved = cols if nw else None

    def bw(g):
        gmat = g.reshape(b * ho * wo, cout)
        if nw:
            gw9 = cols_saved.T @ gmat
            gw = np.ascontiguousarray(gw9.reshape(k, k, cin, cout).transpose(3, 2, 0, 1))
        else:
            gw = None
        gb = gmat.sum(axis=0) if nb else None
        if nx:
            dcols = gmat @ wmat.T
            if k == 1 and stride == 1:
                gx = dcols.reshape(b, h, wdt, cin)
            else:
                gxp = col2im(dcols, xp.shape, ho, wo, k, stride)
                gx = gxp[:, pad:pad + h, pad:pad + wdt, :] if pad else gxp
        else:
            gx = None
        if bias is None:
            return gx, gw
        return gx, gw, gb

    parents = (x, w) if bias is None else (x, w, bias)
    return _make_node(data, "conv2d", parents, bw)


def upsample2x(x):
    """Nearest-neighbor 2x upsample of [B, H, W, C]."""
    if x.ndim != 4:
        raise ShapeError(f"upsample2x: need 4-D input, got {tuple(x.shape)}")
    data = x.data.repeat(2, axis=1).repeat(2, axis=2)
    b, h, w, c = x.shape

    def bw(g):
        return (g.reshape(b, h, 2, w, 2, c).sum(axis=(2, 4)),)

    return _make_node(data, "upsample2x", (x,), bw)


def add_channel_bias(x, bias):
    """x[B, H, W, C] + bias[B, C] broadcast over the spatial axes."""
    _same_dtype("add_channel_bias", x, bias)
    if x.ndim != 4 or bias.ndim != 2 or x.shape[0] != bias.shape[0] or x.shape[3] != bias.shape[1]:
        raise ShapeError(f"add_channel_bias: {tuple(x.shape)} with {tuple(bias.shape)}")
    data = x.data + bias.data[:, None, None, :]
    nx, nb = x.requires_grad, bias.requires_grad

    def bw(g):
        return (g if nx else None, g.sum(axis=(1, 2)) if nb else None)

    return _make_node(data, "add_channel_bias", (x, bias), bw)


# ---------------------------------------------------------------------------
# lookups and embeddings

def embedding(table, indices):
    """Row lookup table[V, d] -> [len(indices), d] with scatter-add backward."""
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ShapeError(f"embedding: index out of range for table {tuple(table.shape)}")
    data = table.data[idx]

    def bw(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx, g)
        return (gt,)

    return _make_node(data, "embedding", (table,), bw)


def time_embedding(t, dim, scale=1000.0):
    """Sinusoidal features of a continuous time vector.

    t is a Tensor or array of shape [B]; the result is [B, dim] with the
    first half sin and second half cos over geometrically spaced frequencies.
    """
    if dim % 2:
        raise ShapeError(f"time_embedding: dim must be even, got {dim}")
    tt = t if isinstance(t, Tensor) else Tensor(np.asarray(t, dtype=np.float32))
    half = dim // 2
    dt = tt.data.dtype
    freqs = np.exp(-math.log(10000.0) * np.arange(half, dtype=dt) / max(half - 1, 1))
    ang = scale * tt.data[:, None] * freqs[None, :]
    data = np.concatenate([np.sin(ang), np.cos(ang)], axis=1).astype(dt)

    def bw(g):
        gs, gc = g[:, :half], g[:, half:]
        dang = gs * np.cos(ang) - gc * np.sin(ang)
        return ((dang * freqs[None, :]).sum(axis=1) * scale,)

    return _make_node(data, "time_embedding", (tt,), bw)
