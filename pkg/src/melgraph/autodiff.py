"""A small numpy-backed tensor with a reverse-mode gradient tape.

Every differentiable primitive records one entry on the active tape: the
output tensor, its inputs and a closure mapping the output gradient to input
gradients.  :func:`backward` walks the tape in exact reverse order from the
loss entry, accumulates gradients into leaf tensors that require them, and
clears the tape.  Inference code runs under :func:`no_grad` so nothing is
recorded.

Precision follows the data: float32 for training, float64 for gradient
verification.
"""

import contextlib
import math
import threading

import numpy as np


class TapeError(RuntimeError):
    pass


class Tape:
    def __init__(self):
        self.records = []
        self.generation = 0
        self.enabled = True

    def clear(self):
        self.records.clear()
        self.generation += 1

    def __len__(self):
        return len(self.records)


_local = threading.local()


def get_tape():
    tape = getattr(_local, "tape", None)
    if tape is None:
        tape = _local.tape = Tape()
    return tape


@contextlib.contextmanager
def no_grad():
    tape = get_tape()
    prev = tape.enabled
    tape.enabled = False
    try:
        yield
    finally:
        tape.enabled = prev


def _as_array(data, dtype=None):
    arr = np.asarray(data, dtype=dtype)
    if dtype is None and not np.issubdtype(arr.dtype, np.floating):
        arr = arr.astype(np.float64)
    return arr


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_node")

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        self.data = _as_array(data, dtype)
        self.requires_grad = requires_grad
        self.grad = None
        self.name = name
        self._node = None   # (tape generation, record index) when produced on a tape

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
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else None

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag}, requires_grad={self.requires_grad})"

    # operator sugar
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

    def __neg__(self):
        return scale(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / other)
        raise TypeError("only division by a python scalar is supported")

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return permute(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def tensor(data, requires_grad=False, dtype=None, name=None):
    return Tensor(data, requires_grad=requires_grad, dtype=dtype, name=name)


def _wrap(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _needs_grad(t):
    return t.requires_grad or t._node is not None


def _make(data, inputs, backward_fn):
    """Create an op output and record it when any input is on the gradient path."""
    out = Tensor(data)
    tape = get_tape()
    if tape.enabled and any(_needs_grad(t) for t in inputs):
        out._node = (tape.generation, len(tape.records))
        tape.records.append((out, inputs, backward_fn))
    return out


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def backward(loss):
    """Accumulate d(loss)/d(leaf) into every reachable leaf's ``grad`` and clear the tape."""
    tape = get_tape()
    if loss.data.size != 1:
        raise TapeError("backward requires a scalar loss")
    if loss._node is None:
        if loss.requires_grad:
            loss.grad = np.ones_like(loss.data) if loss.grad is None else loss.grad + 1
            return
        raise TapeError("loss was not produced on the gradient tape")
    generation, index = loss._node
    if generation != tape.generation or index >= len(tape.records) or tape.records[index][0] is not loss:
        raise TapeError("backward called twice without a new forward (tape already consumed)")
    grads = {id(loss): np.ones_like(loss.data)}
    for i in range(index, -1, -1):
        out, inputs, fn = tape.records[i]
        g = grads.pop(id(out), None)
        if g is None:
            continue
        in_grads = fn(g)
        for t, gi in zip(inputs, in_grads):
            if gi is None or not _needs_grad(t):
                continue
            if t._node is not None:
                key = id(t)
                grads[key] = grads[key] + gi if key in grads else gi
            else:
                gi = gi.astype(t.data.dtype, copy=False)
                t.grad = gi.copy() if t.grad is None else t.grad + gi
    for out, _, _ in tape.records:
        if out is not loss:
            out._node = None
    tape.clear()


# ---------------------------------------------------------------- elementwise

def add(a, b):
    a, b = _wrap(a, b if isinstance(b, Tensor) else None), _wrap(b, a if isinstance(a, Tensor) else None)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b):
    a, b = _wrap(a, b if isinstance(b, Tensor) else None), _wrap(b, a if isinstance(a, Tensor) else None)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b):
    a, b = _wrap(a, b if isinstance(b, Tensor) else None), _wrap(b, a if isinstance(a, Tensor) else None)
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def scale(a, c):
    c = float(c)
    return _make(a.data * a.data.dtype.type(c), (a,), lambda g: (g * c,))


def relu(x):
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x):
    """GELU, tanh approximation."""
    xd = x.data
    sq = xd * xd
    inner = xd * (_GELU_C + (_GELU_C * 0.044715) * sq)
    th = np.tanh(inner)
    half_1p = 0.5 + 0.5 * th
    out = xd * half_1p

    def fn(g):
        dinner = _GELU_C + (3 * _GELU_C * 0.044715) * sq
        return (g * (half_1p + 0.5 * xd * (1.0 - th * th) * dinner),)

    return _make(out.astype(xd.dtype, copy=False), (x,), fn)


# ---------------------------------------------------------------- reductions & shape

def tsum(x, axis=None, keepdims=False):
    shape = x.shape

    def fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.sum(x.data, axis=axis, keepdims=keepdims), (x,), fn)


def mean(x, axis=None, keepdims=False):
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return scale(tsum(x, axis, keepdims), 1.0 / n)


def reshape(x, shape):
    old = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def permute(x, axes):
    axes = tuple(axes) if axes else tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def swap_last(x):
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return permute(x, axes)


def concat(tensors, axis=-1):
    tensors = [_wrap(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors),
                 lambda g: tuple(np.split(g, splits, axis=axis)))


def getitem(x, index):
    shape, dtype = x.shape, x.dtype

    def fn(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, index, g) if _is_advanced(index) else full.__setitem__(index, g)
        return (full,)

    return _make(x.data[index], (x,), fn)


def _is_advanced(index):
    items = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


# ---------------------------------------------------------------- linear algebra

def matmul(a, b):
    ad, bd = a.data, b.data

    def fn(g):
        ga = g @ np.swapaxes(bd, -1, -2) if bd.ndim > 1 else np.multiply.outer(g, bd)
        gb = np.swapaxes(ad, -1, -2) @ g if ad.ndim > 1 else np.multiply.outer(ad, g)
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _make(ad @ bd, (a, b), fn)


def linear(x, w, b=None):
    """x @ w (+ b); w is (in, out)."""
    y = matmul(x, w)
    return y if b is None else add(y, b)


def conv2d(x, w, b=None, stride=1, pad=1):
    """2-D cross-correlation. x: (B, C, H, W); w: (O, C, kh, kw); b: (O,) or None."""
    xd, wd = x.data, w.data
    B, C, H, W = xd.shape
    O, Cw, kh, kw = wd.shape
    if C != Cw:
        raise ValueError(f"conv2d channel mismatch: input {C}, kernel {Cw}")
    xp = np.pad(xd, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else xd
    Ho = (H + 2 * pad - kh) // stride + 1
    Wo = (W + 2 * pad - kw) // stride + 1
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride][:, :, :Ho, :Wo]            # (B, C, Ho, Wo, kh, kw)
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(B * Ho * Wo, C * kh * kw)
    out = cols @ wd.reshape(O, -1).T                                 # (B*Ho*Wo, O)
    if b is not None:
        out += b.data
    out = out.reshape(B, Ho, Wo, O).transpose(0, 3, 1, 2)

    def fn(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(B * Ho * Wo, O)
        gw = (g2.T @ cols).reshape(wd.shape)
        gb = g2.sum(axis=0) if b is not None else None
        gcols = (g2 @ wd.reshape(O, -1)).reshape(B, Ho, Wo, C, kh, kw)
        gxp = np.zeros(xp.shape, dtype=xd.dtype)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += \
                    gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        gx = gxp[:, :, pad:pad + H, pad:pad + W] if pad else gxp
        return gx, gw, gb

    inputs = (x, w) if b is None else (x, w, b)
    return _make(np.ascontiguousarray(out), inputs, lambda g: fn(g)[:len(inputs)])


# ---------------------------------------------------------------- normalisation

def batchnorm(x, gamma, beta, running_mean, running_var, training, momentum=0.1, eps=1e-5):
    """Batch norm over every axis except 1 (channels). Updates running stats in training mode.

    Works for (B, C, H, W) and (B, C).
    """
    xd = x.data
    axes = tuple(a for a in range(xd.ndim) if a != 1)
    bshape = [1] * xd.ndim
    bshape[1] = xd.shape[1]
    g_ = gamma.data.reshape(bshape)
    if training:
        mu = xd.mean(axis=axes, keepdims=True)
        var = xd.var(axis=axes, keepdims=True)
        m = xd.size // xd.shape[1]
        unbiased = var.reshape(-1) * (m / max(m - 1, 1))
        running_mean *= 1 - momentum
        running_mean += momentum * mu.reshape(-1)
        running_var *= 1 - momentum
        running_var += momentum * unbiased
    else:
        mu = running_mean.reshape(bshape).astype(xd.dtype)
        var = running_var.reshape(bshape).astype(xd.dtype)
    invstd = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu) * invstd
    out = xhat * g_ + beta.data.reshape(bshape)

    def fn(g):
        ggamma = (g * xhat).sum(axis=axes)
        gbeta = g.sum(axis=axes)
        dxhat = g * g_
        if training:
            m = xd.size // xd.shape[1]
            gx = invstd / m * (m * dxhat - dxhat.sum(axis=axes, keepdims=True)
                               - xhat * (dxhat * xhat).sum(axis=axes, keepdims=True))
        else:
            gx = dxhat * invstd
        return gx, ggamma, gbeta

    return _make(out.astype(xd.dtype, copy=False), (x, gamma, beta), fn)


def layernorm(x, gamma, beta, eps=1e-6):
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    var = xd.var(axis=-1, keepdims=True)
    invstd = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu) * invstd
    out = xhat * gamma.data + beta.data
    d = xd.shape[-1]

    def fn(g):
        red = tuple(range(g.ndim - 1))
        ggamma = (g * xhat).sum(axis=red)
        gbeta = g.sum(axis=red)
        dxhat = g * gamma.data
        gx = invstd / d * (d * dxhat - dxhat.sum(axis=-1, keepdims=True)
                           - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True))
        return gx, ggamma, gbeta

    return _make(out.astype(xd.dtype, copy=False), (x, gamma, beta), fn)


# ---------------------------------------------------------------- attention & losses

def softmax(x, axis=-1):
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    return _make(y, (x,), lambda g: (y * (g - (g * y).sum(axis=axis, keepdims=True)),))


def log_softmax(x, axis=-1):
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse
    p = np.exp(y)
    return _make(y, (x,), lambda g: (g - p * g.sum(axis=axis, keepdims=True),))


def cross_entropy(logits, labels):
    """Mean cross-entropy of (B, C) logits against integer labels (B,)."""
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    ld = logits.data
    if ld.ndim == 1:
        ld = ld[None]
    B, C = ld.shape
    if labels.shape[0] != B or labels.min() < 0 or labels.max() >= C:
        raise ValueError("labels do not match logits")
    z = ld - ld.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    loss = -logp[np.arange(B), labels].mean()
    p = np.exp(logp)
    shape = logits.shape

    def fn(g):
        d = p.copy()
        d[np.arange(B), labels] -= 1.0
        return ((g / B) * d.reshape(shape),)

    return _make(np.asarray(loss, dtype=ld.dtype), (logits,), fn)


def adaptive_avg_pool(x):
    """(B, C, H, W) -> (B, C, 1, 1) channel means."""
    xd = x.data
    H, W = xd.shape[2], xd.shape[3]
    return _make(xd.mean(axis=(2, 3), keepdims=True), (x,),
                 lambda g: (np.broadcast_to(g / (H * W), xd.shape).copy(),))


# ---------------------------------------------------------------- graph primitives

def neighbor_max_diff(x, neighbors):
    """max_{j in N(i)} (x_j - x_i) per node and channel.

    x: (B, N, D) or (N, D); neighbors: integer (B, N, K) / (N, K).  The
    subgradient goes to the first maximising neighbour.
    """
    xd = x.data
    squeeze = xd.ndim == 2
    if squeeze:
        xd = xd[None]
        neighbors = np.asarray(neighbors)[None]
    neighbors = np.asarray(neighbors, dtype=np.int64)
    B, N, D = xd.shape
    K = neighbors.shape[-1]
    gathered = xd[np.arange(B)[:, None, None], neighbors]             # (B, N, K, D)
    diff = gathered - xd[:, :, None, :]
    arg = diff.argmax(axis=2)                                          # (B, N, D)
    out = np.take_along_axis(diff, arg[:, :, None, :], axis=2)[:, :, 0, :]
    src_node = np.take_along_axis(np.broadcast_to(neighbors[..., None], (B, N, K, D)),
                                  arg[:, :, None, :], axis=2)[:, :, 0, :]   # (B, N, D)

    def fn(g):
        g3 = g[None] if squeeze else g
        flat_idx = ((np.arange(B)[:, None, None] * N + src_node) * D + np.arange(D)).reshape(-1)
        gx = np.bincount(flat_idx, weights=g3.reshape(-1).astype(np.float64),
                         minlength=B * N * D).reshape(B, N, D).astype(xd.dtype)
        gx -= g3
        return (gx[0] if squeeze else gx,)

    return _make(out[0] if squeeze else out, (x,), fn)


# ---------------------------------------------------------------- verification

def grad_check(f, x, eps=1e-5, max_coords=None, rng=None):
    """Largest relative disagreement between tape gradients and central differences.

    ``x`` is a Tensor or a list of Tensors; ``f(*x)`` must return a scalar
    Tensor.  Per coordinate the error is |a - n| / max(1e-8, |a| + |n|).
    ``eps`` may be a sequence of step sizes, in which case a coordinate's
    error is the smallest over the steps: large steps can straddle a ReLU
    or max kink while small ones drown in rounding noise.  ``max_coords``
    limits the number of coordinates checked per tensor (sampled with ``rng``).
    """
    xs = [x] if isinstance(x, Tensor) else list(x)
    steps = [eps] if np.isscalar(eps) else list(eps)
    rng = rng if rng is not None else np.random.default_rng(0)
    for t in xs:
        t.requires_grad = True
        t.grad = None
    get_tape().clear()
    loss = f(*xs)
    if not np.all(np.isfinite(loss.data)):
        raise FloatingPointError("non-finite loss")
    backward(loss)
    worst = 0.0
    for t in xs:
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad
        n = t.data.size
        coords = np.arange(n)
        if max_coords is not None and n > max_coords:
            coords = rng.choice(n, size=max_coords, replace=False)
        flat = t.data.reshape(-1)
        for c in coords:
            a = float(analytic.reshape(-1)[c])
            err = math.inf
            for h in steps:
                num = _central_difference(f, xs, flat, c, h)
                err = min(err, abs(a - num) / max(1e-8, abs(a) + abs(num)))
            worst = max(worst, err)
    return worst


def _central_difference(f, xs, flat, c, h):
    orig = flat[c]
    with no_grad():
        flat[c] = orig + h
        fp = float(f(*xs).data)
        flat[c] = orig - h
        fm = float(f(*xs).data)
    flat[c] = orig
    if not (math.isfinite(fp) and math.isfinite(fm)):
        raise FloatingPointError("non-finite value during finite differences")
    return (fp - fm) / (2 * h)
