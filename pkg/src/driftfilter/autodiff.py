"""Reverse-mode automatic differentiation on dense float64 arrays.

A ``Tape`` records operations in execution order (define-by-run).  Every
recorded node keeps a closure that turns the node's output adjoint into
adjoint contributions for its inputs.  ``Tape.backward`` walks the node
list once, in reverse recording order, so two backward passes over the
same tape produce bit-identical gradients.

Conventions, fixed so tests can be exact:

* all values are float64; integer index arrays are plain op arguments
  and never receive gradients
* relu'(0) == 0; max-pool ties break toward the first window element
* broadcasting is restricted to scalar-with-array; any other shape
  combination raises ``ShapeMismatch``
* tensors are immutable by convention: no op ever writes to an input
  buffer, so tensors are safe to share read-only across workers

Tensors built without a tape (``constant``) propagate through every op
as plain values; this is the no-grad evaluation mode used by rollouts
that do not train.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Tape",
    "Tensor",
    "Gradients",
    "ShapeMismatch",
    "UnsupportedOp",
    "constant",
    "apply_op",
]


class ShapeMismatch(ValueError):
    """An op received operand shapes it cannot combine."""

    def __init__(self, op, *shapes):
        self.op = op
        self.shapes = shapes
        super().__init__(f"{op}: incompatible shapes " + " vs ".join(str(s) for s in shapes))


class UnsupportedOp(NotImplementedError):
    """Requested operation is not part of the op vocabulary."""


def _as_array(x):
    return np.asarray(x, dtype=np.float64)


class Tensor:
    """Immutable float64 array, optionally attached to a tape node."""

    __slots__ = ("tape", "data", "node")

    def __init__(self, tape, data, node):
        self.tape = tape
        self.data = data
        self.node = node

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
        return float(self.data)

    def __repr__(self):
        kind = "const" if self.node is None else f"node {self.node}"
        return f"Tensor(shape={self.shape}, {kind})"

    # arithmetic sugar; scalars are auto-wrapped as constants
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
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def constant(x):
    """Wrap a value as a tape-less tensor (no gradient ever flows into it)."""
    if isinstance(x, Tensor):
        return x
    return Tensor(None, _as_array(x), None)


class _Node:
    __slots__ = ("op", "data", "backward")

    def __init__(self, op, data, backward):
        self.op = op
        self.data = data
        self.backward = backward


class Gradients:
    """Read-only view of the adjoints produced by one backward pass."""

    def __init__(self, tape, adjoints):
        self._tape = tape
        self._adj = adjoints

    def get(self, tensor):
        """Gradient for ``tensor``; zeros if it did not influence the loss."""
        if tensor.node is None:
            raise ValueError("constants carry no gradient")
        g = self._adj.get(tensor.node)
        if g is None:
            return np.zeros_like(tensor.data)
        return g

    def named(self):
        """Map param name -> gradient array, zeros for unused params."""
        out = {}
        for node, (name, data) in self._tape.param_registry.items():
            g = self._adj.get(node)
            out[name] = np.zeros_like(data) if g is None else np.asarray(g)
        return out


class Tape:
    """Ordered record of operations; supports one-pass reverse accumulation."""

    def __init__(self):
        self.nodes = []
        self.param_registry = {}  # node id -> (name, data)

    def _record(self, op, data, backward):
        node = len(self.nodes)
        self.nodes.append(_Node(op, data, backward))
        return node

    def param(self, value, name=None):
        """Register a trainable leaf. Its adjoint is collected by backward."""
        data = _as_array(value).copy()
        node = self._record("param", data, None)
        if name is None:
            name = f"param{node}"
        self.param_registry[node] = (name, data)
        return Tensor(self, data, node)

    def leaf(self, value):
        """A differentiable leaf that is not a registered parameter."""
        data = _as_array(value).copy()
        node = self._record("leaf", data, None)
        return Tensor(self, data, node)

    def backward(self, loss):
        """Adjoints of ``loss`` w.r.t. every recorded node.

        ``loss`` must be a scalar tensor recorded on this tape.  Nodes are
        visited exactly once, in reverse recording order.
        """
        if not isinstance(loss, Tensor) or loss.tape is not self or loss.node is None:
            raise ValueError("loss is not recorded on this tape")
        if loss.data.size != 1:
            raise ValueError(f"loss must be scalar, got shape {loss.data.shape}")
        adj = {loss.node: np.ones_like(loss.data)}
        for node_id in range(loss.node, -1, -1):
            g = adj.get(node_id)
            if g is None:
                continue
            fn = self.nodes[node_id].backward
            if fn is not None:
                fn(g, adj)
        return Gradients(self, adj)

    def first_nonfinite(self):
        """(node id, op name) of the earliest non-finite node value, or None."""
        for i, node in enumerate(self.nodes):
            if not np.all(np.isfinite(node.data)):
                return i, node.op
        return None


def _accumulate(adj, node, contribution):
    prev = adj.get(node)
    adj[node] = contribution if prev is None else prev + contribution


def _tape_of(tensors):
    tape = None
    for t in tensors:
        if t.tape is not None:
            if tape is None:
                tape = t.tape
            elif tape is not t.tape:
                raise ValueError("operands recorded on different tapes")
    return tape


def _wrap(op, inputs, data, make_backward):
    """Finish an op: record it if any input is on a tape, else stay constant."""
    tape = _tape_of(inputs)
    if tape is None:
        return Tensor(None, data, None)
    backward = make_backward()
    node = tape._record(op, data, backward)
    return Tensor(tape, data, node)


def _binary_shapes(op, a, b):
    if a.shape == b.shape or a.size == 1 or b.size == 1:
        return
    raise ShapeMismatch(op, a.shape, b.shape)


def _reduce_to(g, shape):
    # only scalar broadcasting exists, so the sole reduction is "sum to scalar"
    if g.shape != shape:
        return np.sum(g).reshape(shape)
    return g


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b):
    a, b = constant(a), constant(b)
    _binary_shapes("add", a, b)
    out = a.data + b.data

    def make():
        an, bn, ashape, bshape = a.node, b.node, a.shape, b.shape

        def bw(g, adj):
            if an is not None:
                _accumulate(adj, an, _reduce_to(g, ashape))
            if bn is not None:
                _accumulate(adj, bn, _reduce_to(g, bshape))

        return bw

    return _wrap("add", (a, b), out, make)


def sub(a, b):
    a, b = constant(a), constant(b)
    _binary_shapes("sub", a, b)
    out = a.data - b.data

    def make():
        an, bn, ashape, bshape = a.node, b.node, a.shape, b.shape

        def bw(g, adj):
            if an is not None:
                _accumulate(adj, an, _reduce_to(g, ashape))
            if bn is not None:
                _accumulate(adj, bn, _reduce_to(-g, bshape))

        return bw

    return _wrap("sub", (a, b), out, make)


def mul(a, b):
    a, b = constant(a), constant(b)
    _binary_shapes("mul", a, b)
    out = a.data * b.data

    def make():
        an, bn = a.node, b.node
        ad, bd, ashape, bshape = a.data, b.data, a.shape, b.shape

        def bw(g, adj):
            if an is not None:
                _accumulate(adj, an, _reduce_to(g * bd, ashape))
            if bn is not None:
                _accumulate(adj, bn, _reduce_to(g * ad, bshape))

        return bw

    return _wrap("mul", (a, b), out, make)


def div(a, b):
    a, b = constant(a), constant(b)
    _binary_shapes("div", a, b)
    out = a.data / b.data

    def make():
        an, bn = a.node, b.node
        ad, bd, ashape, bshape = a.data, b.data, a.shape, b.shape

        def bw(g, adj):
            if an is not None:
                _accumulate(adj, an, _reduce_to(g / bd, ashape))
            if bn is not None:
                _accumulate(adj, bn, _reduce_to(-g * ad / (bd * bd), bshape))

        return bw

    return _wrap("div", (a, b), out, make)


def neg(a):
    a = constant(a)
    out = -a.data

    def make():
        an = a.node

        def bw(g, adj):
            _accumulate(adj, an, -g)

        return bw

    return _wrap("neg", (a,), out, make)


def _unary(op, a, fwd, grad_fn):
    """grad_fn(x, y) -> dy/dx evaluated elementwise."""
    a = constant(a)
    out = fwd(a.data)

    def make():
        an, ad = a.node, a.data
        od = out

        def bw(g, adj):
            _accumulate(adj, an, g * grad_fn(ad, od))

        return bw

    return _wrap(op, (a,), out, make)


def relu(a):
    # subgradient convention: relu'(0) == 0
    return _unary("relu", a, lambda x: np.maximum(x, 0.0), lambda x, y: (x > 0.0).astype(np.float64))


def tanh(a):
    return _unary("tanh", a, np.tanh, lambda x, y: 1.0 - y * y)


def exp(a):
    return _unary("exp", a, np.exp, lambda x, y: y)


def log(a):
    return _unary("log", a, np.log, lambda x, y: 1.0 / x)


def sin(a):
    return _unary("sin", a, np.sin, lambda x, y: np.cos(x))


def cos(a):
    return _unary("cos", a, np.cos, lambda x, y: -np.sin(x))


def wrap_angle(a):
    """Wrap values into [-pi, pi); the gradient passes through unchanged."""
    a = constant(a)
    out = np.mod(a.data + np.pi, 2.0 * np.pi) - np.pi

    def make():
        an = a.node

        def bw(g, adj):
            _accumulate(adj, an, g)

        return bw

    return _wrap("wrap_angle", (a,), out, make)


def atan2(y, x):
    y, x = constant(y), constant(x)
    _binary_shapes("atan2", y, x)
    out = np.arctan2(y.data, x.data)

    def make():
        yn, xn = y.node, x.node
        yd, xd, yshape, xshape = y.data, x.data, y.shape, x.shape
        denom = yd * yd + xd * xd

        def bw(g, adj):
            if yn is not None:
                _accumulate(adj, yn, _reduce_to(g * xd / denom, yshape))
            if xn is not None:
                _accumulate(adj, xn, _reduce_to(-g * yd / denom, xshape))

        return bw

    return _wrap("atan2", (y, x), out, make)


def stop_gradient(a):
    a = constant(a)
    return _wrap("stop_gradient", (a,), a.data.copy(), lambda: None) if a.tape is not None else a


# ---------------------------------------------------------------------------
# reductions


def tsum(a, axis=None):
    a = constant(a)
    out = np.sum(a.data, axis=axis)

    def make():
        an, ashape = a.node, a.shape

        def bw(g, adj):
            if axis is None:
                _accumulate(adj, an, np.broadcast_to(g, ashape))
            else:
                _accumulate(adj, an, np.broadcast_to(np.expand_dims(g, axis), ashape))

        return bw

    return _wrap("sum", (a,), np.asarray(out), make)


def logsumexp(a, axis=None):
    a = constant(a)
    m = np.max(a.data, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore", invalid="ignore"):  # -inf entries are log-domain zeros
        s = np.sum(np.exp(a.data - m), axis=axis, keepdims=True)
        lse_keep = m + np.log(s)
    out = np.squeeze(lse_keep, axis=axis) if axis is not None else lse_keep.reshape(())

    def make():
        an, ad = a.node, a.data
        soft = np.exp(ad - lse_keep)
        soft = np.where(np.isfinite(soft), soft, 0.0)

        def bw(g, adj):
            if axis is None:
                _accumulate(adj, an, g * soft)
            else:
                _accumulate(adj, an, np.expand_dims(g, axis) * soft)

        return bw

    return _wrap("logsumexp", (a,), np.asarray(out), make)


def softmax(a, axis=-1):
    a = constant(a)
    m = np.max(a.data, axis=axis, keepdims=True)
    e = np.exp(a.data - m)
    out = e / np.sum(e, axis=axis, keepdims=True)

    def make():
        an = a.node
        y = out

        def bw(g, adj):
            inner = np.sum(g * y, axis=axis, keepdims=True)
            _accumulate(adj, an, y * (g - inner))

        return bw

    return _wrap("softmax", (a,), out, make)


# ---------------------------------------------------------------------------
# shape ops


def reshape(a, shape):
    a = constant(a)
    out = a.data.reshape(shape)

    def make():
        an, ashape = a.node, a.shape

        def bw(g, adj):
            _accumulate(adj, an, g.reshape(ashape))

        return bw

    return _wrap("reshape", (a,), out, make)


def transpose(a, axes):
    a = constant(a)
    out = np.transpose(a.data, axes)

    def make():
        an = a.node
        inverse = np.argsort(axes)

        def bw(g, adj):
            _accumulate(adj, an, np.transpose(g, inverse))

        return bw

    return _wrap("transpose", (a,), out, make)


def concat(tensors, axis=0):
    tensors = [constant(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)

    def make():
        nodes = [t.node for t in tensors]
        sizes = [t.shape[axis] for t in tensors]
        splits = np.cumsum(sizes)[:-1]

        def bw(g, adj):
            for node, piece in zip(nodes, np.split(g, splits, axis=axis)):
                if node is not None:
                    _accumulate(adj, node, piece)

        return bw

    return _wrap("concat", tuple(tensors), out, make)


def gather_rows(a, indices):
    """Select rows along axis 0. Indices are data, not differentiable;
    the gradient scatter-adds into the gathered rows."""
    a = constant(a)
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeMismatch("gather_rows", idx.shape)
    out = a.data[idx]

    def make():
        an, ashape = a.node, a.shape

        def bw(g, adj):
            buf = np.zeros(ashape)
            np.add.at(buf, idx, g)
            _accumulate(adj, an, buf)

        return bw

    return _wrap("gather_rows", (a,), out, make)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b):
    a, b = constant(a), constant(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatch("matmul", a.shape, b.shape)
    out = a.data @ b.data

    def make():
        an, bn = a.node, b.node
        ad, bd = a.data, b.data

        def bw(g, adj):
            if an is not None:
                _accumulate(adj, an, g @ bd.T)
            if bn is not None:
                _accumulate(adj, bn, ad.T @ g)

        return bw

    return _wrap("matmul", (a, b), out, make)


def linear(x, w, b):
    """x @ w + b with b of shape (out,); the usual dense layer."""
    x, w, b = constant(x), constant(w), constant(b)
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0] or b.shape != (w.shape[1],):
        raise ShapeMismatch("linear", x.shape, w.shape, b.shape)
    out = x.data @ w.data + b.data

    def make():
        xn, wn, bn = x.node, w.node, b.node
        xd, wd = x.data, w.data

        def bw(g, adj):
            if xn is not None:
                _accumulate(adj, xn, g @ wd.T)
            if wn is not None:
                _accumulate(adj, wn, xd.T @ g)
            if bn is not None:
                _accumulate(adj, bn, g.sum(axis=0))

        return bw

    return _wrap("linear", (x, w, b), out, make)


# ---------------------------------------------------------------------------
# spatial ops (NCHW layout)


def _cols_nhwc(xt, kh, kw, stride, ho, wo):
    """(N,Hp,Wp,C) -> (N,ho,wo,kh*kw*C) kernel-window columns."""
    n, _, _, c = xt.shape
    buf = np.empty((n, ho, wo, kh * kw * c))
    for i in range(kh):
        for j in range(kw):
            slot = (i * kw + j) * c
            buf[..., slot : slot + c] = xt[:, i : i + stride * ho : stride, j : j + stride * wo : stride, :]
    return buf


def _scatter_cols_nhwc(dbuf, xt_shape, kh, kw, stride, ho, wo):
    n, hp, wp, c = xt_shape
    dxt = np.zeros(xt_shape)
    for i in range(kh):
        for j in range(kw):
            slot = (i * kw + j) * c
            dxt[:, i : i + stride * ho : stride, j : j + stride * wo : stride, :] += dbuf[..., slot : slot + c]
    return dxt


def conv2d(x, w, b=None, stride=1, padding=0):
    """2-D convolution (cross-correlation), x: (N,C,H,W), w: (O,C,kh,kw).

    Runs channels-last internally: kernel-offset slices are packed into a
    column buffer whose inner axis is contiguous, and the contraction is
    a single GEMM, so the op stays BLAS-bound instead of shuffling
    six-dimensional strided views."""
    x, w = constant(x), constant(w)
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeMismatch("conv2d", x.shape, w.shape)
    n, c, h, wdt = x.shape
    o, _, kh, kw = w.shape
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wdt + 2 * padding - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeMismatch("conv2d", x.shape, w.shape)
    if b is not None:
        b = constant(b)
        if b.shape != (o,):
            raise ShapeMismatch("conv2d bias", b.shape, (o,))
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    hp, wp = xp.shape[2], xp.shape[3]
    xt = np.ascontiguousarray(xp.transpose(0, 2, 3, 1))  # (N,Hp,Wp,C)
    ckk = kh * kw * c
    cols = _cols_nhwc(xt, kh, kw, stride, ho, wo).reshape(n * ho * wo, ckk)
    w2 = w.data.transpose(2, 3, 1, 0).reshape(ckk, o)  # (kh,kw,C,O) flattened
    out2 = cols @ w2
    if b is not None:
        out2 += b.data
    out = np.ascontiguousarray(out2.reshape(n, ho, wo, o).transpose(0, 3, 1, 2))

    def make():
        xn, wn, bn = x.node, w.node, (b.node if b is not None else None)

        def bw(g, adj):
            g2 = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(n * ho * wo, o)
            if wn is not None:
                gw = (cols.T @ g2).reshape(kh, kw, c, o)
                _accumulate(adj, wn, np.ascontiguousarray(gw.transpose(3, 2, 0, 1)))
            if xn is not None:
                dcols = (g2 @ w2.T).reshape(n, ho, wo, ckk)
                dxt = _scatter_cols_nhwc(dcols, (n, hp, wp, c), kh, kw, stride, ho, wo)
                dx = dxt.transpose(0, 3, 1, 2)
                if padding:
                    dx = dx[:, :, padding:-padding, padding:-padding]
                _accumulate(adj, xn, np.ascontiguousarray(dx))
            if bn is not None:
                _accumulate(adj, bn, g2.sum(axis=0))

        return bw

    inputs = (x, w) if b is None else (x, w, b)
    return _wrap("conv2d", inputs, out, make)


def local2d(x, w, b=None, kernel=3, stride=1, padding=1):
    """Locally-connected layer: per-location unshared kernels.

    x: (N,C,H,W); w: (P, C*kh*kw, O) with P = ho*wo output positions.
    """
    x, w = constant(x), constant(w)
    if x.ndim != 4 or w.ndim != 3:
        raise ShapeMismatch("local2d", x.shape, w.shape)
    kh = kw = kernel
    n, c, h, wdt = x.shape
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wdt + 2 * padding - kw) // stride + 1
    p = ho * wo
    o = w.shape[2]
    if w.shape[0] != p or w.shape[1] != c * kh * kw:
        raise ShapeMismatch("local2d", x.shape, w.shape)
    if b is not None:
        b = constant(b)
        if b.shape != (o,):
            raise ShapeMismatch("local2d bias", b.shape, (o,))
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    hp, wp = xp.shape[2], xp.shape[3]
    xt = np.ascontiguousarray(xp.transpose(0, 2, 3, 1))  # (N,Hp,Wp,C)
    ckk = c * kh * kw
    buf = _cols_nhwc(xt, kh, kw, stride, ho, wo)
    pnk = np.ascontiguousarray(buf.reshape(n, p, ckk).transpose(1, 0, 2))  # (P,N,KC)
    # weights are stored (P, C*kh*kw, O) with C slow and (kh,kw) fast; the
    # buffer uses the opposite nesting, so remap once per call
    remap = (np.arange(ckk).reshape(c, kh * kw).T.reshape(-1))
    wd_perm = w.data[:, remap, :]
    out = pnk @ wd_perm  # (P, N, O)
    if b is not None:
        out = out + b.data[None, None, :]
    out_nchw = np.ascontiguousarray(out.transpose(1, 2, 0)).reshape(n, o, ho, wo)

    def make():
        xn, wn, bn = x.node, w.node, (b.node if b is not None else None)

        def bw(g, adj):
            go = np.ascontiguousarray(g.reshape(n, o, p).transpose(2, 0, 1))  # (P,N,O)
            if wn is not None:
                gw_perm = pnk.transpose(0, 2, 1) @ go  # (P,KC,O)
                gw = np.empty_like(gw_perm)
                gw[:, remap, :] = gw_perm
                _accumulate(adj, wn, gw)
            if xn is not None:
                dpnk = go @ wd_perm.transpose(0, 2, 1)  # (P,N,KC)
                dbuf = np.ascontiguousarray(dpnk.transpose(1, 0, 2)).reshape(n, ho, wo, ckk)
                dxt = _scatter_cols_nhwc(dbuf, (n, hp, wp, c), kh, kw, stride, ho, wo)
                dx = dxt.transpose(0, 3, 1, 2)
                if padding:
                    dx = dx[:, :, padding:-padding, padding:-padding]
                _accumulate(adj, xn, np.ascontiguousarray(dx))
            if bn is not None:
                _accumulate(adj, bn, go.sum(axis=(0, 1)))

        return bw

    inputs = (x, w) if b is None else (x, w, b)
    return _wrap("local2d", inputs, out_nchw, make)


def maxpool2d(x, size=2):
    """Non-overlapping max pooling; H and W must divide by ``size``."""
    x = constant(x)
    n, c, h, w = x.shape
    if h % size or w % size:
        raise ShapeMismatch("maxpool2d", x.shape)
    ho, wo = h // size, w // size
    win = x.data.reshape(n, c, ho, size, wo, size).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, size * size)
    arg = np.argmax(win, axis=-1)  # first max wins on ties
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def make():
        xn = x.node

        def bw(g, adj):
            dwin = np.zeros((n, c, ho, wo, size * size))
            np.put_along_axis(dwin, arg[..., None], g[..., None], axis=-1)
            dx = dwin.reshape(n, c, ho, wo, size, size).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
            _accumulate(adj, xn, dx)

        return bw

    return _wrap("maxpool2d", (x,), out, make)


def bilinear_sample(image, rows, cols):
    """Sample ``image`` (C,H,W) at fractional grid points, zero outside.

    rows/cols: (P,) tensors of grid coordinates (row 0 is the first cell
    center).  Returns (C,P).  Differentiable in the coordinates and, when
    the image is on a tape, in the image values; out-of-bounds reads
    contribute zero and fade in linearly at the border.
    """
    image, rows, cols = constant(image), constant(rows), constant(cols)
    if image.ndim != 3 or rows.ndim != 1 or cols.ndim != 1 or rows.shape != cols.shape:
        raise ShapeMismatch("bilinear_sample", image.shape, rows.shape, cols.shape)
    c, h, w = image.shape
    r0 = np.floor(rows.data)
    c0 = np.floor(cols.data)
    fr = rows.data - r0
    fc = cols.data - c0
    r0i = r0.astype(np.int64)
    c0i = c0.astype(np.int64)

    corners = []
    for dr, dc, wgt in (
        (0, 0, (1 - fr) * (1 - fc)),
        (0, 1, (1 - fr) * fc),
        (1, 0, fr * (1 - fc)),
        (1, 1, fr * fc),
    ):
        ri = r0i + dr
        ci = c0i + dc
        valid = ((ri >= 0) & (ri < h) & (ci >= 0) & (ci < w)).astype(np.float64)
        vals = image.data[:, np.clip(ri, 0, h - 1), np.clip(ci, 0, w - 1)] * valid
        corners.append((vals, wgt, valid, np.clip(ri, 0, h - 1), np.clip(ci, 0, w - 1)))
    out = sum(vals * wgt for vals, wgt, _, _, _ in corners)

    def make():
        rn, cn, imn = rows.node, cols.node, image.node
        v00, v01, v10, v11 = (corner[0] for corner in corners)

        def bw(g, adj):
            if rn is not None:
                # d out / d row = (v10 - v00)(1-fc) + (v11 - v01) fc, summed over channels
                dr = ((v10 - v00) * (1 - fc) + (v11 - v01) * fc) * g
                _accumulate(adj, rn, dr.sum(axis=0))
            if cn is not None:
                dc = ((v01 - v00) * (1 - fr) + (v11 - v10) * fr) * g
                _accumulate(adj, cn, dc.sum(axis=0))
            if imn is not None:
                buf = np.zeros((c, h, w))
                for vals, wgt, valid, ri, ci in corners:
                    np.add.at(buf, (slice(None), ri, ci), g * (wgt * valid))
                _accumulate(adj, imn, buf)

        return bw

    return _wrap("bilinear_sample", (image, rows, cols), out, make)


# ---------------------------------------------------------------------------
# descriptor dispatch

_OPS = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "neg": neg,
    "relu": relu,
    "tanh": tanh,
    "exp": exp,
    "log": log,
    "sin": sin,
    "cos": cos,
    "atan2": atan2,
    "wrap_angle": wrap_angle,
    "stop_gradient": stop_gradient,
    "sum": tsum,
    "logsumexp": logsumexp,
    "softmax": softmax,
    "reshape": reshape,
    "transpose": transpose,
    "concat": concat,
    "gather_rows": gather_rows,
    "matmul": matmul,
    "linear": linear,
    "conv2d": conv2d,
    "local2d": local2d,
    "maxpool2d": maxpool2d,
    "bilinear_sample": bilinear_sample,
}


def apply_op(kind, *args, **kwargs):
    """Apply an op by descriptor name; unknown names raise UnsupportedOp."""
    fn = _OPS.get(kind)
    if fn is None:
        raise UnsupportedOp(f"op '{kind}' is not implemented")
    return fn(*args, **kwargs)
