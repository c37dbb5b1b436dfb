"""Dense float32 tensors with reverse-mode automatic differentiation.

The engine is deliberately small: rank <= 3 row-major arrays, an implicit
graph built from closures, and a fixed op set sufficient for a small
transformer and its mixture-of-experts rebuild. Every op validates shapes up
front and checks its output for NaN/Inf, so numeric corruption surfaces at
the op that produced it instead of three modules later.

Gradients accumulate into per-tensor float32 buffers. `backward` walks the
graph once in reverse topological order; calling it a second time on the same
loss node without re-running the forward pass is a state error.
"""

import contextlib

import numpy as np

from . import kernels
from .errors import (
    DimensionError,
    IndexRangeError,
    NumericError,
    ParameterError,
    StateError,
)

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block (evaluation, statistics)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled():
    return _GRAD_ENABLED


class Tensor:
    """A float32 array plus optional gradient buffer and graph linkage."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward", "_consumed")

    def __init__(self, data, requires_grad=False, name=None):
        arr = np.asarray(data, dtype=np.float32)
        if arr.ndim > 3:
            raise DimensionError("tensor rank %d exceeds 3" % arr.ndim)
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name
        self._parents = ()
        self._backward = None
        self._consumed = False

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        if self.data.size != 1:
            raise DimensionError("item() needs a single-element tensor, got shape %s" % (self.shape,))
        return float(self.data.reshape(-1)[0])

    def detach(self):
        return Tensor(self.data.copy())

    def numpy(self):
        return self.data

    def __repr__(self):
        tag = self.name or "tensor"
        return "Tensor(%s, shape=%s, requires_grad=%s)" % (tag, self.shape, self.requires_grad)

    # -- gradient plumbing ---------------------------------------------------

    def ensure_grad(self):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        return self.grad

    def zero_grad(self):
        if self.grad is not None:
            self.grad.fill(0.0)

    def backward(self):
        """Reverse-mode sweep seeding d(self)/d(self) = 1.

        Only valid on single-element tensors. Each graph node runs its
        accumulation closure exactly once.
        """
        if self.data.size != 1:
            raise DimensionError("backward() needs a scalar loss, got shape %s" % (self.shape,))
        if self._consumed:
            raise StateError("backward() already ran for this node; re-run the forward pass first")
        topo = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.ensure_grad()
        self.grad.fill(1.0)
        for node in reversed(topo):
            if node._backward is not None:
                node._backward()
        self._consumed = True

    # -- operator sugar --------------------------------------------------

    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return shift(self, float(other))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)


def _result(data, parents, bwd, op):
    """Wrap an op output: finite-check, then attach graph linkage if enabled."""
    if not np.all(np.isfinite(data)):
        raise NumericError("non-finite values produced by op %r" % op)
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = bwd
    return out


def _as_f32(x):
    return np.ascontiguousarray(x, dtype=np.float32)


# -- construction helpers -----------------------------------------------------


def zeros(shape, requires_grad=False):
    return Tensor(np.zeros(shape, dtype=np.float32), requires_grad=requires_grad)


def ones(shape, requires_grad=False):
    return Tensor(np.ones(shape, dtype=np.float32), requires_grad=requires_grad)


def constant(data):
    return Tensor(data)


# -- elementwise and linear ops ------------------------------------------------


def add(a, b):
    if a.shape != b.shape:
        raise DimensionError("add shapes differ: %s vs %s" % (a.shape, b.shape))
    with np.errstate(over="ignore", invalid="ignore"):
        out = _result(a.data + b.data, (a, b), None, "add")

    def bwd():
        if a.requires_grad:
            a.ensure_grad()
            a.grad += out.grad
        if b.requires_grad:
            b.ensure_grad()
            b.grad += out.grad

    out._backward = bwd if out.requires_grad else None
    return out


def shift(x, c):
    """Add a python scalar (no gradient to the scalar)."""
    with np.errstate(over="ignore", invalid="ignore"):
        out = _result(x.data + np.float32(c), (x,), None, "shift")

    def bwd():
        x.ensure_grad()
        x.grad += out.grad

    out._backward = bwd if out.requires_grad else None
    return out


def add_bias(x, b):
    """x[.., D] + b[D] broadcast over leading axes."""
    if b.ndim != 1 or x.shape[-1] != b.shape[0]:
        raise DimensionError("bias shape %s does not match trailing dim of %s" % (b.shape, x.shape))
    with np.errstate(over="ignore", invalid="ignore"):
        out = _result(x.data + b.data, (x, b), None, "add_bias")

    def bwd():
        if x.requires_grad:
            x.ensure_grad()
            x.grad += out.grad
        if b.requires_grad:
            b.ensure_grad()
            axes = tuple(range(out.grad.ndim - 1))
            b.grad += out.grad.sum(axis=axes)

    out._backward = bwd if out.requires_grad else None
    return out


def mul(a, b):
    if a.shape != b.shape:
        raise DimensionError("mul shapes differ: %s vs %s" % (a.shape, b.shape))
    with np.errstate(over="ignore", invalid="ignore"):
        out = _result(a.data * b.data, (a, b), None, "mul")

    def bwd():
        if a.requires_grad:
            a.ensure_grad()
            a.grad += out.grad * b.data
        if b.requires_grad:
            b.ensure_grad()
            b.grad += out.grad * a.data

    out._backward = bwd if out.requires_grad else None
    return out


def scale(x, c):
    c = float(c)
    with np.errstate(over="ignore", invalid="ignore"):
        out = _result(x.data * np.float32(c), (x,), None, "scale")

    def bwd():
        x.ensure_grad()
        x.grad += out.grad * np.float32(c)

    out._backward = bwd if out.requires_grad else None
    return out


def matmul(a, b):
    """Matrix product for rank combinations (2,2), (3,2) and (3,3).

    (3,2) folds the leading axes into one gemm; (3,3) is batched over the
    shared leading dim. Gradients follow dA = dC.Bt, dB = At.dC.
    """
    ad, bd = a.data, b.data
    if a.ndim == 2 and b.ndim == 2:
        if ad.shape[1] != bd.shape[0]:
            raise DimensionError("matmul inner dims differ: %s vs %s" % (a.shape, b.shape))
        with np.errstate(over="ignore", invalid="ignore"):
            out = _result(ad @ bd, (a, b), None, "matmul")

        def bwd():
            if a.requires_grad:
                a.ensure_grad()
                a.grad += out.grad @ bd.T
            if b.requires_grad:
                b.ensure_grad()
                b.grad += ad.T @ out.grad

    elif a.ndim == 3 and b.ndim == 2:
        if ad.shape[2] != bd.shape[0]:
            raise DimensionError("matmul inner dims differ: %s vs %s" % (a.shape, b.shape))
        r, t, k = ad.shape
        flat = ad.reshape(r * t, k)
        with np.errstate(over="ignore", invalid="ignore"):
            out = _result((flat @ bd).reshape(r, t, bd.shape[1]), (a, b), None, "matmul")

        def bwd():
            g = out.grad.reshape(r * t, bd.shape[1])
            if a.requires_grad:
                a.ensure_grad()
                a.grad += (g @ bd.T).reshape(r, t, k)
            if b.requires_grad:
                b.ensure_grad()
                b.grad += flat.T @ g

    elif a.ndim == 3 and b.ndim == 3:
        if ad.shape[0] != bd.shape[0] or ad.shape[2] != bd.shape[1]:
            raise DimensionError("batched matmul shapes differ: %s vs %s" % (a.shape, b.shape))
        with np.errstate(over="ignore", invalid="ignore"):
            out = _result(ad @ bd, (a, b), None, "matmul")

        def bwd():
            if a.requires_grad:
                a.ensure_grad()
                a.grad += out.grad @ bd.transpose(0, 2, 1)
            if b.requires_grad:
                b.ensure_grad()
                b.grad += ad.transpose(0, 2, 1) @ out.grad

    else:
        raise DimensionError("unsupported matmul ranks: %d and %d" % (a.ndim, b.ndim))

    out._backward = bwd if out.requires_grad else None
    return out


def linear(x, w):
    """x[N, in] @ w[out, in]^T -> [N, out]; weights stored (out, in)."""
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[1]:
        raise DimensionError("linear expects x[N,in], w[out,in]; got %s, %s" % (x.shape, w.shape))
    with np.errstate(over="ignore", invalid="ignore"):
        out = _result(x.data @ w.data.T, (x, w), None, "linear")

    def bwd():
        if x.requires_grad:
            x.ensure_grad()
            x.grad += out.grad @ w.data
        if w.requires_grad:
            w.ensure_grad()
            w.grad += out.grad.T @ x.data

    out._backward = bwd if out.requires_grad else None
    return out


# -- nonlinearities ------------------------------------------------------------


def swish(x):
    """Elementwise x * sigmoid(x)."""
    flat = x.data.reshape(-1)
    y = kernels.swish_fwd(flat)
    out = _result(np.asarray(y).reshape(x.shape), (x,), None, "swish")

    def bwd():
        x.ensure_grad()
        kernels.swish_bwd(flat, out.grad.reshape(-1), x.grad.reshape(-1))

    out._backward = bwd if out.requires_grad else None
    return out


def rms_norm(x, g, eps=1e-6):
    """Root-mean-square normalization per row with learned gain g[D].

    eps = 0 is allowed (exact scale invariance); negative eps is rejected.
    Accepts rank 2 or 3 inputs; normalization runs over the trailing dim.
    """
    if eps < 0:
        raise ParameterError("rms_norm eps must be >= 0, got %r" % eps)
    if g.ndim != 1 or x.shape[-1] != g.shape[0]:
        raise DimensionError("gain shape %s does not match trailing dim of %s" % (g.shape, x.shape))
    shape = x.shape
    x2 = x.data.reshape(-1, shape[-1])
    y, inv = kernels.rmsnorm_fwd(x2, g.data, float(eps))
    out = _result(np.asarray(y).reshape(shape), (x, g), None, "rms_norm")

    def bwd():
        x.ensure_grad()
        g.ensure_grad()
        dx = x.grad.reshape(-1, shape[-1])
        if not g.requires_grad:
            dg = np.zeros_like(g.data)
        else:
            dg = g.grad
        kernels.rmsnorm_bwd(x2, g.data, np.asarray(inv), out.grad.reshape(-1, shape[-1]), dx, dg)

    out._backward = bwd if out.requires_grad else None
    return out


def softmax_with_temperature(z, t=1.0):
    """Softmax over the trailing dim after dividing logits by temperature t."""
    t = float(t)
    if t <= 0:
        raise ParameterError("softmax temperature must be > 0, got %r" % t)
    shape = z.shape
    z2 = z.data.reshape(-1, shape[-1]) if z.ndim != 1 else z.data.reshape(1, -1)
    y = kernels.softmax_temp_fwd(z2, t)
    out = _result(np.asarray(y).reshape(shape), (z,), None, "softmax_with_temperature")

    def bwd():
        z.ensure_grad()
        dz = z.grad.reshape(z2.shape)
        kernels.softmax_temp_bwd(np.asarray(y), out.grad.reshape(z2.shape), t, dz)

    out._backward = bwd if out.requires_grad else None
    return out


def causal_softmax(z):
    """Row softmax over attention scores [R, T, T] with a strict causal mask.

    Entries above the diagonal are exact zeros in the output: the masked
    columns are never exponentiated, so no epsilon leakage is possible.
    """
    if z.ndim != 3 or z.shape[1] != z.shape[2]:
        raise DimensionError("causal_softmax expects [R, T, T], got %s" % (z.shape,))
    y = kernels.causal_softmax_fwd(z.data)
    out = _result(np.asarray(y), (z,), None, "causal_softmax")

    def bwd():
        z.ensure_grad()
        kernels.causal_softmax_bwd(np.asarray(y), out.grad, z.grad)

    out._backward = bwd if out.requires_grad else None
    return out


def masked_softmax(z, mask, t=1.0):
    """Softmax restricted to mask==1 entries per row; masked entries are exact zeros.

    mask is a uint8 array [N, M] (not a graph tensor). Every row must keep at
    least one admissible entry.
    """
    t = float(t)
    if t <= 0:
        raise ParameterError("softmax temperature must be > 0, got %r" % t)
    if z.ndim != 2:
        raise DimensionError("masked_softmax expects rank-2 logits, got %s" % (z.shape,))
    m = np.ascontiguousarray(mask, dtype=np.uint8)
    if m.shape != z.shape:
        raise DimensionError("mask shape %s does not match logits %s" % (m.shape, z.shape))
    if not m.any(axis=1).all():
        raise ParameterError("masked_softmax: some row has no admissible entry")
    y = kernels.masked_softmax_fwd(z.data, m, t)
    out = _result(np.asarray(y), (z,), None, "masked_softmax")

    def bwd():
        z.ensure_grad()
        kernels.masked_softmax_bwd(np.asarray(y), m, out.grad, t, z.grad)

    out._backward = bwd if out.requires_grad else None
    return out


def cross_entropy_mean(logits, targets):
    """Mean negative log-likelihood of integer targets under row softmax."""
    if logits.ndim != 2:
        raise DimensionError("cross_entropy_mean expects [T, V] logits, got %s" % (logits.shape,))
    tg = np.ascontiguousarray(targets, dtype=np.int64)
    if tg.ndim != 1 or tg.shape[0] != logits.shape[0]:
        raise DimensionError("targets length %s does not match %d rows" % (tg.shape, logits.shape[0]))
    v = logits.shape[1]
    if tg.size and (tg.min() < 0 or tg.max() >= v):
        raise IndexRangeError("target index outside [0, %d)" % v)
    probs, total = kernels.cross_entropy_fwd(logits.data, tg)
    n = logits.shape[0]
    out = _result(np.float32(total / n), (logits,), None, "cross_entropy_mean")

    def bwd():
        logits.ensure_grad()
        g = float(out.grad.reshape(-1)[0])
        kernels.cross_entropy_bwd(np.asarray(probs), tg, g / n, logits.grad)

    out._backward = bwd if out.requires_grad else None
    return out


# -- shape ops -------------------------------------------------------------


def reshape(x, shape):
    shape = tuple(int(s) for s in shape)
    if len(shape) > 3:
        raise DimensionError("reshape target rank %d exceeds 3" % len(shape))
    if int(np.prod(shape, dtype=np.int64)) != x.size:
        raise DimensionError("reshape %s -> %s changes element count" % (x.shape, shape))
    out = _result(x.data.reshape(shape), (x,), None, "reshape")

    def bwd():
        x.ensure_grad()
        x.grad += out.grad.reshape(x.shape)

    out._backward = bwd if out.requires_grad else None
    return out


def transpose_last2(x):
    if x.ndim == 2:
        perm = (1, 0)
    elif x.ndim == 3:
        perm = (0, 2, 1)
    else:
        raise DimensionError("transpose_last2 expects rank 2 or 3, got %d" % x.ndim)
    out = _result(np.ascontiguousarray(x.data.transpose(perm)), (x,), None, "transpose_last2")

    def bwd():
        x.ensure_grad()
        x.grad += out.grad.transpose(perm)

    out._backward = bwd if out.requires_grad else None
    return out


def split_heads(x, batch, heads):
    """[B*T, D] -> [B*H, T, D/H] for batched attention."""
    n, d = x.shape
    if n % batch != 0 or d % heads != 0:
        raise DimensionError("split_heads: %s not divisible by batch=%d heads=%d" % (x.shape, batch, heads))
    t, dh = n // batch, d // heads
    y = x.data.reshape(batch, t, heads, dh).transpose(0, 2, 1, 3).reshape(batch * heads, t, dh)
    out = _result(np.ascontiguousarray(y), (x,), None, "split_heads")

    def bwd():
        x.ensure_grad()
        g = out.grad.reshape(batch, heads, t, dh).transpose(0, 2, 1, 3).reshape(n, d)
        x.grad += g

    out._backward = bwd if out.requires_grad else None
    return out


def merge_heads(x, batch):
    """[B*H, T, dh] -> [B*T, H*dh], inverse of split_heads."""
    rh, t, dh = x.shape
    if rh % batch != 0:
        raise DimensionError("merge_heads: leading dim %d not divisible by batch %d" % (rh, batch))
    heads = rh // batch
    y = x.data.reshape(batch, heads, t, dh).transpose(0, 2, 1, 3).reshape(batch * t, heads * dh)
    out = _result(np.ascontiguousarray(y), (x,), None, "merge_heads")

    def bwd():
        x.ensure_grad()
        g = out.grad.reshape(batch, t, heads, dh).transpose(0, 2, 1, 3).reshape(rh, t, dh)
        x.grad += g

    out._backward = bwd if out.requires_grad else None
    return out


# -- gather / scatter -----------------------------------------------------------


def embedding(table, ids):
    """Row gather from table[V, D] at integer ids[N]; scatter-add on backward."""
    idx = np.ascontiguousarray(ids, dtype=np.int64)
    if idx.ndim != 1:
        raise DimensionError("embedding ids must be rank 1, got %s" % (idx.shape,))
    if table.ndim != 2:
        raise DimensionError("embedding table must be rank 2, got %s" % (table.shape,))
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise IndexRangeError("embedding id outside [0, %d)" % table.shape[0])
    out = _result(table.data[idx], (table,), None, "embedding")

    def bwd():
        table.ensure_grad()
        np.add.at(table.grad, idx, out.grad)

    out._backward = bwd if out.requires_grad else None
    return out


def take_rows(x, idx):
    """Gather along axis 0 (rows of a matrix or elements of a vector)."""
    ii = np.ascontiguousarray(idx, dtype=np.int64)
    if ii.ndim != 1:
        raise DimensionError("take_rows index must be rank 1, got %s" % (ii.shape,))
    if ii.size and (ii.min() < 0 or ii.max() >= x.shape[0]):
        raise IndexRangeError("row index outside [0, %d)" % x.shape[0])
    out = _result(x.data[ii], (x,), None, "take_rows")

    def bwd():
        x.ensure_grad()
        np.add.at(x.grad, ii, out.grad)

    out._backward = bwd if out.requires_grad else None
    return out


def take_col(x, col):
    """Extract column `col` of a matrix as a vector; gradient scatters back."""
    if x.ndim != 2:
        raise DimensionError("take_col expects rank 2, got %s" % (x.shape,))
    c = int(col)
    if not 0 <= c < x.shape[1]:
        raise IndexRangeError("column %d outside [0, %d)" % (c, x.shape[1]))
    out = _result(np.ascontiguousarray(x.data[:, c]), (x,), None, "take_col")

    def bwd():
        x.ensure_grad()
        x.grad[:, c] += out.grad

    out._backward = bwd if out.requires_grad else None
    return out


def scatter_rows(x, idx, n_rows):
    """Build [n_rows, D] with out[idx[i]] += x[i]; inverse dataflow of take_rows."""
    ii = np.ascontiguousarray(idx, dtype=np.int64)
    if x.ndim != 2 or ii.ndim != 1 or ii.shape[0] != x.shape[0]:
        raise DimensionError("scatter_rows expects x[M,D], idx[M]; got %s, %s" % (x.shape, ii.shape))
    if ii.size and (ii.min() < 0 or ii.max() >= n_rows):
        raise IndexRangeError("scatter index outside [0, %d)" % n_rows)
    buf = np.zeros((int(n_rows), x.shape[1]), dtype=np.float32)
    np.add.at(buf, ii, x.data)
    out = _result(buf, (x,), None, "scatter_rows")

    def bwd():
        x.ensure_grad()
        x.grad += out.grad[ii]

    out._backward = bwd if out.requires_grad else None
    return out


def scale_rows(x, s):
    """x[M, D] scaled per row by s[M]; both factors receive gradients."""
    if x.ndim != 2 or s.ndim != 1 or x.shape[0] != s.shape[0]:
        raise DimensionError("scale_rows expects x[M,D], s[M]; got %s, %s" % (x.shape, s.shape))
    with np.errstate(over="ignore", invalid="ignore"):
        out = _result(x.data * s.data[:, None], (x, s), None, "scale_rows")

    def bwd():
        if x.requires_grad:
            x.ensure_grad()
            x.grad += out.grad * s.data[:, None]
        if s.requires_grad:
            s.ensure_grad()
            s.grad += (out.grad * x.data).sum(axis=1)

    out._backward = bwd if out.requires_grad else None
    return out


def rope(x, cos, sin):
    """Rotary position transform on head vectors [R, T, H].

    cos/sin are precomputed [T, H/2] float32 constants; dimension pairs are
    (j, j + H/2).
    """
    if x.ndim != 3 or x.shape[2] % 2 != 0:
        raise DimensionError("rope expects [R, T, H] with even H, got %s" % (x.shape,))
    c = _as_f32(cos)
    s = _as_f32(sin)
    if c.shape != (x.shape[1], x.shape[2] // 2) or s.shape != c.shape:
        raise DimensionError("rope tables %s/%s do not match input %s" % (c.shape, s.shape, x.shape))
    y = kernels.rope_fwd(x.data, c, s)
    out = _result(np.asarray(y), (x,), None, "rope")

    def bwd():
        x.ensure_grad()
        kernels.rope_bwd(out.grad, c, s, x.grad)

    out._backward = bwd if out.requires_grad else None
    return out


def dropout(x, p, rng):
    """Inverted dropout with a deterministic mask drawn from rng.

    Identity when p == 0. rng is a CounterRng substream; the mask consumes
    exactly x.size draws, keeping downstream draws aligned across runs.
    """
    p = float(p)
    if not 0.0 <= p < 1.0:
        raise ParameterError("dropout probability must be in [0, 1), got %r" % p)
    if p == 0.0:
        return x
    keep = (rng.uniform(x.shape) >= p).astype(np.float32) / np.float32(1.0 - p)
    out = _result(x.data * keep, (x,), None, "dropout")

    def bwd():
        x.ensure_grad()
        x.grad += out.grad * keep

    out._backward = bwd if out.requires_grad else None
    return out


def sum_all(x):
    """Sum of all elements as a scalar tensor."""
    out = _result(np.float32(x.data.sum(dtype=np.float64)), (x,), None, "sum_all")

    def bwd():
        x.ensure_grad()
        x.grad += out.grad.reshape(-1)[0]

    out._backward = bwd if out.requires_grad else None
    return out
