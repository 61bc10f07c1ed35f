"""Dense tensors with tape-based reverse-mode differentiation.

Every primitive is a pair of plain numpy functions (forward, backward). When
a :class:`Tape` is active and at least one input requires a gradient, the
primitive appends a :class:`Node` to the tape. :func:`backward` walks the tape
once in reverse order.

Usage::

    W = Tensor(np.ones((3, 3)), requires_grad=True)
    with Tape() as tape:
        loss = sum_all(tanh(matmul(x, W)))
    grads = backward(tape, loss)
    grads[W]  # same shape as W
"""

import threading

import numpy as np

from . import _kernels

DTYPE = np.float64


class AutodiffError(Exception):
    pass


class ShapeError(AutodiffError):
    def __init__(self, op, *shapes, detail=""):
        self.op = op
        self.shapes = shapes
        msg = f"{op}: incompatible shapes {', '.join(str(s) for s in shapes)}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class NumericOverflowError(AutodiffError):
    def __init__(self, op):
        self.op = op
        super().__init__(f"{op}: non-finite value in output")


class Tensor:
    """A float64 array plus the bookkeeping needed to differentiate through it."""

    __slots__ = ("data", "requires_grad", "name", "__weakref__")

    def __init__(self, data, requires_grad=False, name=None):
        arr = np.asarray(data, dtype=DTYPE)
        # ascontiguousarray would promote 0-d arrays to 1-d
        self.data = arr if arr.flags.c_contiguous else np.ascontiguousarray(arr)
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def numpy(self):
        return self.data


class Node:
    __slots__ = ("op", "inputs", "out", "fwd", "bwd", "cache")

    def __init__(self, op, inputs, out, fwd, bwd, cache):
        self.op = op
        self.inputs = inputs
        self.out = out
        self.fwd = fwd
        self.bwd = bwd
        self.cache = cache


_local = threading.local()


def _active_tape():
    return getattr(_local, "tape", None)


class Tape:
    """Ordered record of primitive applications.

    Tapes are thread-confined: entering a tape binds it to the current thread
    only, so concurrent inference passes on other threads never record.
    """

    def __init__(self):
        self.nodes = []
        self._prev = None

    def __enter__(self):
        self._prev = _active_tape()
        _local.tape = self
        return self

    def __exit__(self, *exc):
        _local.tape = self._prev
        self._prev = None
        return False

    def __len__(self):
        return len(self.nodes)

    def replay(self):
        """Re-run every recorded forward on the current input values.

        Returns the list of recomputed outputs; inputs produced by earlier
        nodes are taken from the replayed values, not the cached ones.
        """
        fresh = {}
        outs = []
        for node in self.nodes:
            arrays = [fresh.get(id(x), x.data) for x in node.inputs]
            value, _ = node.fwd(*arrays)
            fresh[id(node.out)] = value
            outs.append(value)
        return outs


class no_grad:
    """Suspend recording on the current thread."""

    def __enter__(self):
        self._prev = _active_tape()
        _local.tape = None

    def __exit__(self, *exc):
        _local.tape = self._prev
        return False


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _apply(op, fwd, bwd, inputs):
    arrays = [x.data for x in inputs]
    value, cache = fwd(*arrays)
    if not np.all(np.isfinite(value)):
        raise NumericOverflowError(op)
    tape = _active_tape()
    needs = tape is not None and any(x.requires_grad for x in inputs)
    out = Tensor(value, requires_grad=needs)
    if needs:
        tape.nodes.append(Node(op, inputs, out, fwd, bwd, cache))
    return out


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` after numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def matmul(a, b):
    """``a @ b`` for 2-D operands, batched ``(..., M, K) @ (K, N)`` or
    equal-batch ``(..., M, K) @ (..., K, N)``."""
    a, b = _as_tensor(a), _as_tensor(b)
    sa, sb = a.shape, b.shape
    if len(sa) < 1 or len(sb) < 2 or sa[-1] != sb[-2]:
        raise ShapeError("matmul", sa, sb)
    if len(sb) > 2 and sa[:-2] != sb[:-2]:
        raise ShapeError("matmul", sa, sb, detail="batch dimensions differ")

    def fwd(x, y):
        return x @ y, None

    def bwd(g, cache, x, y, out):
        if y.ndim == 2:
            gx = g @ y.T
            gy = x.reshape(-1, x.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gx = g @ np.swapaxes(y, -1, -2)
            gy = np.swapaxes(x, -1, -2) @ g
        return gx, gy

    return _apply("matmul", fwd, bwd, [a, b])


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError("add", a.shape, b.shape) from None

    def fwd(x, y):
        return x + y, None

    def bwd(g, cache, x, y, out):
        return _unbroadcast(g, x.shape), _unbroadcast(g, y.shape)

    return _apply("add", fwd, bwd, [a, b])


def mul(a, b):
    """Elementwise product with broadcasting."""
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError("mul", a.shape, b.shape) from None

    def fwd(x, y):
        return x * y, None

    def bwd(g, cache, x, y, out):
        return _unbroadcast(g * y, x.shape), _unbroadcast(g * x, y.shape)

    return _apply("mul", fwd, bwd, [a, b])


def concat(tensors, axis=-1):
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat", detail="no inputs")
    ref = list(tensors[0].shape)
    ax = axis % len(ref)
    for t in tensors[1:]:
        s = list(t.shape)
        if len(s) != len(ref) or s[:ax] + s[ax + 1:] != ref[:ax] + ref[ax + 1:]:
            raise ShapeError("concat", *[t.shape for t in tensors])
    sizes = [t.shape[ax] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def fwd(*xs):
        return np.concatenate(xs, axis=ax), None

    def bwd(g, cache, *rest):
        return np.split(g, splits, axis=ax)

    return _apply("concat", fwd, bwd, tensors)


def slice_last(a, start, stop):
    """``a[..., start:stop]``."""
    a = _as_tensor(a)
    if not 0 <= start < stop <= a.shape[-1]:
        raise ShapeError("slice_last", a.shape, detail=f"[{start}:{stop}]")

    def fwd(x):
        return x[..., start:stop], None

    def bwd(g, cache, x, out):
        gx = np.zeros_like(x)
        gx[..., start:stop] = g
        return (gx,)

    return _apply("slice_last", fwd, bwd, [a])


def reshape(a, shape):
    a = _as_tensor(a)
    shape = tuple(shape)
    if int(np.prod(shape)) != a.data.size:
        raise ShapeError("reshape", a.shape, shape)

    def fwd(x):
        return x.reshape(shape), None

    def bwd(g, cache, x, out):
        return (g.reshape(x.shape),)

    return _apply("reshape", fwd, bwd, [a])


def tanh(a):
    def fwd(x):
        return np.tanh(x), None

    def bwd(g, cache, x, out):
        return (g * (1.0 - out * out),)

    return _apply("tanh", fwd, bwd, [_as_tensor(a)])


def sigmoid(a):
    def fwd(x):
        # split by sign so exp never overflows
        out = np.empty_like(x)
        pos = x >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        out[~pos] = ex / (1.0 + ex)
        return out, None

    def bwd(g, cache, x, out):
        return (g * out * (1.0 - out),)

    return _apply("sigmoid", fwd, bwd, [_as_tensor(a)])


def relu(a):
    def fwd(x):
        return np.maximum(x, 0.0), None

    def bwd(g, cache, x, out):
        return (g * (x > 0),)

    return _apply("relu", fwd, bwd, [_as_tensor(a)])


def softmax(a):
    """Softmax over the last axis, max-subtracted."""
    def fwd(x):
        e = np.exp(x - x.max(axis=-1, keepdims=True))
        return e / e.sum(axis=-1, keepdims=True), None

    def bwd(g, cache, x, out):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _apply("softmax", fwd, bwd, [_as_tensor(a)])


def log_softmax(a):
    """Log-softmax over the last axis."""
    def fwd(x):
        z = x - x.max(axis=-1, keepdims=True)
        return z - np.log(np.exp(z).sum(axis=-1, keepdims=True)), None

    def bwd(g, cache, x, out):
        return (g - np.exp(out) * g.sum(axis=-1, keepdims=True),)

    return _apply("log_softmax", fwd, bwd, [_as_tensor(a)])


def log(a):
    a = _as_tensor(a)

    def fwd(x):
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.log(x), None

    def bwd(g, cache, x, out):
        return (g / x,)

    return _apply("log", fwd, bwd, [a])


def mean(a, axis=None):
    """Mean over ``axis`` (an int, a tuple, or None for all axes)."""
    a = _as_tensor(a)
    axes = tuple(range(a.data.ndim)) if axis is None else (
        (axis,) if isinstance(axis, int) else tuple(axis))
    axes = tuple(ax % a.data.ndim for ax in axes)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1

    def fwd(x):
        return x.mean(axis=axes), None

    def bwd(g, cache, x, out):
        return (np.broadcast_to(np.expand_dims(g, axes), x.shape) / count,)

    return _apply("mean", fwd, bwd, [a])


def sum_all(a):
    def fwd(x):
        return np.asarray(x.sum()), None

    def bwd(g, cache, x, out):
        return (np.full_like(x, g),)

    return _apply("sum", fwd, bwd, [_as_tensor(a)])


def scale(a, c):
    c = float(c)

    def fwd(x):
        return x * c, None

    def bwd(g, cache, x, out):
        return (g * c,)

    return _apply("scale", fwd, bwd, [_as_tensor(a)])


def embedding(table, ids):
    """Rows of ``table`` selected by integer ``ids`` (any shape)."""
    table = _as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    if table.data.ndim != 2:
        raise ShapeError("embedding", table.shape, ids.shape)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError("embedding", table.shape, ids.shape,
                         detail=f"id out of range [0, {table.shape[0]})")

    def fwd(w):
        return w[ids], None

    def bwd(g, cache, w, out):
        gw = np.zeros_like(w)
        np.add.at(gw, ids.reshape(-1), g.reshape(-1, w.shape[1]))
        return (gw,)

    return _apply("embedding", fwd, bwd, [table])


def pick(a, ids):
    """``a[..., ids]`` row-wise: one entry of the last axis per leading index."""
    a = _as_tensor(a)
    ids = np.asarray(ids, dtype=np.int64)
    if ids.shape != a.shape[:-1]:
        raise ShapeError("pick", a.shape, ids.shape)
    if ids.size and (ids.min() < 0 or ids.max() >= a.shape[-1]):
        raise ShapeError("pick", a.shape, ids.shape, detail="index out of range")

    def fwd(x):
        return np.take_along_axis(x, ids[..., None], axis=-1)[..., 0], None

    def bwd(g, cache, x, out):
        gx = np.zeros_like(x)
        np.put_along_axis(gx, ids[..., None], g[..., None], axis=-1)
        return (gx,)

    return _apply("pick", fwd, bwd, [a])


def dropout(a, mask, rate):
    """Inverted dropout with a caller-supplied binary ``mask``."""
    a = _as_tensor(a)
    mask = np.asarray(mask, dtype=DTYPE)
    if mask.shape != a.shape:
        raise ShapeError("dropout", a.shape, mask.shape)
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    m = mask / (1.0 - rate)

    def fwd(x):
        return x * m, None

    def bwd(g, cache, x, out):
        return (g * m,)

    return _apply("dropout", fwd, bwd, [a])


def additive_attention(vp, hp, u):
    """Scores ``s[b, i] = u . tanh(vp[b, i] + hp[b])`` as one fused node.

    Same value as composing add/tanh/matmul but computed by the kernel in
    :mod:`mmicap._kernels`, which is the hot spot of every decoder step.
    """
    vp, hp, u = _as_tensor(vp), _as_tensor(hp), _as_tensor(u)
    if (vp.data.ndim != 3 or hp.data.ndim != 2 or u.data.ndim != 1
            or vp.shape[0] != hp.shape[0] or vp.shape[2] != hp.shape[1]
            or hp.shape[1] != u.shape[0]):
        raise ShapeError("additive_attention", vp.shape, hp.shape, u.shape)

    def fwd(x, h, w):
        return _kernels.attention_scores(x, h, w)

    def bwd(g, cache, x, h, w, out):
        return _kernels.attention_scores_backward(g, cache, w)

    return _apply("additive_attention", fwd, bwd, [vp, hp, u])


# ---------------------------------------------------------------------------
# reverse pass
# ---------------------------------------------------------------------------

class Gradients(dict):
    """Mapping from leaf :class:`Tensor` (by identity) to gradient array."""

    def __missing__(self, key):
        if isinstance(key, Tensor):
            return np.zeros_like(key.data)
        raise KeyError(key)


def backward(tape, loss, params=None):
    """Gradients of scalar ``loss`` with respect to every leaf on ``tape``.

    If ``params`` is given, the result holds exactly those tensors (zero
    gradient for any that did not influence the loss).
    """
    if loss.data.size != 1:
        raise AutodiffError(f"loss must be scalar, got shape {loss.shape}")
    produced = {id(n.out): i for i, n in enumerate(tape.nodes)}
    if id(loss) not in produced:
        raise AutodiffError("loss is not the output of a node on this tape")

    grads = {id(loss): np.ones_like(loss.data)}
    leaves = {}
    for node in reversed(tape.nodes[: produced[id(loss)] + 1]):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        arrays = [x.data for x in node.inputs]
        in_grads = node.bwd(g, node.cache, *arrays, node.out.data)
        for x, gx in zip(node.inputs, in_grads):
            if not x.requires_grad:
                continue
            key = id(x)
            if key not in produced:
                leaves[key] = x
            if key in grads:
                grads[key] = grads[key] + gx
            else:
                grads[key] = np.array(gx, dtype=DTYPE)

    out = Gradients()
    if params is None:
        for key, x in leaves.items():
            out[x] = grads.get(key, np.zeros_like(x.data))
    else:
        for p in params:
            out[p] = grads.get(id(p), np.zeros_like(p.data))
    return out


def grad_check(f, params, epsilon=1e-5):
    """Max over parameters of the relative error between tape and central-difference gradients.

    The error of one parameter is ``|g_a - g_n| / max(|g_a|, |g_n|)`` in the
    Euclidean norm over all its entries; an entrywise ratio would be dominated
    by rounding noise on entries whose true gradient is near zero.
    ``f`` maps no arguments to a scalar :class:`Tensor`, reading the current
    values of ``params``. Every entry of every parameter is perturbed, so keep
    the parameters small.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    with Tape() as tape:
        loss = f()
    analytic = backward(tape, loss, params)

    def value():
        with no_grad():
            v = float(f().data)
        if not np.isfinite(v):
            raise NumericOverflowError("grad_check")
        return v

    worst = 0.0
    for p in params:
        flat = p.data.reshape(-1)
        ga = analytic[p].reshape(-1)
        num = np.empty_like(ga)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            up = value()
            flat[i] = orig - epsilon
            down = value()
            flat[i] = orig
            num[i] = (up - down) / (2.0 * epsilon)
        denom = max(np.linalg.norm(ga), np.linalg.norm(num), 1e-12)
        worst = max(worst, float(np.linalg.norm(ga - num)) / denom)
    return worst
