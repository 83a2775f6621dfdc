"""A small reverse-mode autodiff engine over float64 numpy arrays.

Operations executed while a :class:`Tape` is active are recorded on it in
execution order; :meth:`Tape.backward` walks the record once in reverse.
Outside a tape every op is a plain numpy computation, which is what
inference uses.

Example::

    w = Tensor(np.ones((2, 2)), requires_grad=True)
    with Tape() as tape:
        loss = total(matmul(x, w))
        tape.backward(loss)
    w.grad
"""
from contextlib import contextmanager

import numpy as np

from . import _kernels

_TAPES = []


class DimensionError(ValueError):
    pass


class DomainError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "node_id", "name")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self.node_id = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def values(self):
        return self.data.reshape(-1)

    @property
    def ndim(self):
        return self.data.ndim

    def item(self):
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _wrap(x):
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Ordered record of executed primitives.

    Each entry is ``(inputs, outputs, adjoint)`` where ``adjoint`` maps the
    list of output gradients to a list of input gradients (``None`` where an
    input needs none). Entries are appended in execution order, so inputs
    always precede their consumers.
    """

    def __init__(self):
        self.nodes = []

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        for k in range(len(_TAPES) - 1, -1, -1):
            if _TAPES[k] is self:
                del _TAPES[k]
                break
        return False

    def __len__(self):
        return len(self.nodes)

    def record(self, inputs, outputs, adjoint):
        node_id = len(self.nodes)
        self.nodes.append((inputs, outputs, adjoint))
        for out in outputs:
            out.node_id = node_id
            out.requires_grad = True
        return node_id

    def backward(self, loss):
        if loss.data.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss.node_id is None and not loss.requires_grad:
            raise ValueError("loss is not on the tape")
        loss.grad = np.ones_like(loss.data)
        for inputs, outputs, adjoint in reversed(self.nodes):
            out_grads = [o.grad for o in outputs]
            if all(g is None for g in out_grads):
                continue
            out_grads = [np.zeros_like(o.data) if g is None else g
                         for o, g in zip(outputs, out_grads)]
            in_grads = adjoint(out_grads)
            taken = []
            for inp, g in zip(inputs, in_grads):
                if g is None or not inp.requires_grad:
                    continue
                if inp.grad is None:
                    # adopt the array unless it is a view or handed to a sibling input
                    if (not g.flags.writeable or g.base is not None
                            or g.shape != inp.shape or any(g is t for t in taken)):
                        g = np.array(np.broadcast_to(g, inp.shape), dtype=np.float64)
                    inp.grad = g
                    taken.append(g)
                else:
                    inp.grad += g
        # leaves that were recorded but not reached still get a zero gradient
        for inputs, _, _ in self.nodes:
            for inp in inputs:
                if inp.requires_grad and inp.grad is None:
                    inp.grad = np.zeros_like(inp.data)


def active_tape():
    return _TAPES[-1] if _TAPES else None


@contextmanager
def no_grad():
    """Suspend recording: ops inside run forward-only."""
    _TAPES.append(None)
    try:
        yield
    finally:
        _TAPES.pop()


def _record(inputs, outputs, adjoint):
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        tape.record(inputs, outputs, adjoint)


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a, b):
    """``a[..., k] @ b[k, n]``; leading axes of ``a`` are batch axes."""
    if b.ndim != 2 or a.ndim < 1 or a.shape[-1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    # one 2-D GEMM instead of a batched loop over leading axes
    a2 = a.data.reshape(-1, a.shape[-1])
    out = Tensor((a2 @ b.data).reshape(a.shape[:-1] + b.shape[1:]))

    def adjoint(gs):
        g2 = gs[0].reshape(-1, b.shape[1])
        ga = (g2 @ b.data.T).reshape(a.shape) if a.requires_grad else None
        gb = a2.T @ g2 if b.requires_grad else None
        return [ga, gb]

    _record((a, b), (out,), adjoint)
    return out


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def _check_binary(a, b, name):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{name} shape mismatch: {a.shape} vs {b.shape}") from None


def add(a, b):
    _check_binary(a, b, "add")
    out = Tensor(a.data + b.data)
    _record((a, b), (out,),
            lambda gs: [_unbroadcast(gs[0], a.shape), _unbroadcast(gs[0], b.shape)])
    return out


def sub(a, b):
    _check_binary(a, b, "sub")
    out = Tensor(a.data - b.data)
    _record((a, b), (out,),
            lambda gs: [_unbroadcast(gs[0], a.shape), _unbroadcast(-gs[0], b.shape)])
    return out


def mul(a, b):
    _check_binary(a, b, "mul")
    out = Tensor(a.data * b.data)
    _record((a, b), (out,),
            lambda gs: [_unbroadcast(gs[0] * b.data, a.shape),
                        _unbroadcast(gs[0] * a.data, b.shape)])
    return out


def scale(a, c):
    c = float(c)
    out = Tensor(a.data * c)
    _record((a,), (out,), lambda gs: [gs[0] * c])
    return out


def tanh(a):
    y = np.tanh(a.data)
    out = Tensor(y)
    _record((a,), (out,), lambda gs: [gs[0] * (1.0 - y * y)])
    return out


def sigmoid(a):
    y = _kernels.sigmoid_np(np.atleast_1d(a.data)).reshape(a.shape)
    out = Tensor(y)
    _record((a,), (out,), lambda gs: [gs[0] * y * (1.0 - y)])
    return out


def exp(a):
    y = np.exp(a.data)
    out = Tensor(y)
    _record((a,), (out,), lambda gs: [gs[0] * y])
    return out


def log(a):
    if np.any(a.data <= 0):
        raise DomainError(f"log of non-positive value (min {a.data.min()!r})")
    out = Tensor(np.log(a.data))
    _record((a,), (out,), lambda gs: [gs[0] / a.data])
    return out


def elementwise(op, *operands):
    """Dispatch by name; ``scale`` takes ``(tensor, constant)``."""
    table = {"add": add, "sub": sub, "mul": mul, "tanh": tanh,
             "sigmoid": sigmoid, "log": log, "exp": exp, "scale": scale}
    if op not in table:
        raise ValueError(f"unknown elementwise op {op!r}")
    return table[op](*operands)


# ---------------------------------------------------------------------------
# reductions and reshaping
# ---------------------------------------------------------------------------

def total(a):
    out = Tensor(a.data.sum())
    _record((a,), (out,), lambda gs: [np.broadcast_to(gs[0], a.shape)])
    return out


def weighted_sum(a, weights):
    """``sum(a * weights)`` with ``weights`` a constant array."""
    w = np.asarray(weights, dtype=np.float64)
    out = Tensor(np.sum(a.data * w))
    _record((a,), (out,), lambda gs: [gs[0] * w])
    return out


def reshape(a, shape):
    out = Tensor(a.data.reshape(shape))
    _record((a,), (out,), lambda gs: [gs[0].reshape(a.shape)])
    return out


def index(a, i):
    """``a[i]`` along the first axis."""
    out = Tensor(a.data[i])

    def adjoint(gs):
        g = np.zeros_like(a.data)
        g[i] = gs[0]
        return [g]

    _record((a,), (out,), adjoint)
    return out


def concat(tensors, axis=-1):
    tensors = list(tensors)
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def adjoint(gs):
        return np.split(gs[0], sizes, axis=axis)

    _record(tuple(tensors), (out,), adjoint)
    return out


def stack(tensors, axis=0):
    tensors = list(tensors)
    out = Tensor(np.stack([t.data for t in tensors], axis=axis))

    def adjoint(gs):
        return [np.take(gs[0], k, axis=axis) for k in range(len(tensors))]

    _record(tuple(tensors), (out,), adjoint)
    return out


def pick(a, ids):
    """Gather ``a[..., ids[...]]`` along the last axis; ``ids`` has a's leading shape."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.shape != a.shape[:-1]:
        raise DimensionError(f"pick ids shape {ids.shape} does not match {a.shape[:-1]}")
    lead = np.indices(ids.shape)
    out = Tensor(a.data[(*lead, ids)])

    def adjoint(gs):
        g = np.zeros_like(a.data)
        g[(*lead, ids)] = gs[0]
        return [g]

    _record((a,), (out,), adjoint)
    return out


# ---------------------------------------------------------------------------
# neural-network primitives
# ---------------------------------------------------------------------------

def softmax_rows(a, mask=None):
    """Softmax over the last axis with max subtraction.

    ``mask`` (broadcastable to ``a``) zeroes excluded entries exactly.
    """
    x = a.data
    if mask is not None:
        keep = np.broadcast_to(np.asarray(mask) > 0, x.shape)
        x = np.where(keep, x, _kernels.NEG_INF_SCORE)
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    if mask is not None:
        e = e * keep
    y = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(y)

    def adjoint(gs):
        g = gs[0]
        return [y * (g - (g * y).sum(axis=-1, keepdims=True))]

    _record((a,), (out,), adjoint)
    return out


def lookup(table, ids):
    ids = np.asarray(ids, dtype=np.int64)
    v = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= v):
        bad = ids[(ids < 0) | (ids >= v)][0]
        raise IndexError(f"id {int(bad)} out of range for table of {v} rows")
    out = Tensor(table.data[ids].reshape(ids.shape + table.shape[1:]))

    def adjoint(gs):
        return [_kernels.scatter_rows(ids.reshape(-1), gs[0].reshape(ids.size, -1), v)
                .reshape(table.shape)]

    _record((table,), (out,), adjoint)
    return out


def dropout(a, rate, training, rng):
    if not training or rate <= 0.0:
        return a
    keep = (rng.random(a.shape) >= rate) / (1.0 - rate)
    out = Tensor(a.data * keep)
    _record((a,), (out,), lambda gs: [gs[0] * keep])
    return out


def lstm(xw, wh, h0, c0, mask=None, reverse=False):
    """Whole-sequence LSTM recurrence as one primitive.

    ``xw`` [T,B,4H] holds the input projections plus biases; ``wh`` [H,4H]
    the recurrent weights. Where ``mask[t, b] == 0`` the state is carried
    through unchanged, so padded positions never alter it. ``reverse`` runs
    from ``t = T-1`` down to 0. Returns ``(hs, cs)``, both [T,B,H].
    """
    T, B, H4 = xw.shape
    H = wh.shape[0]
    if wh.shape != (H, H4) or H4 != 4 * H:
        raise DimensionError(f"lstm shape mismatch: xw {xw.shape}, wh {wh.shape}")
    if h0.shape != (B, H) or c0.shape != (B, H):
        raise DimensionError(f"lstm state shape mismatch: {h0.shape}, {c0.shape}; want {(B, H)}")
    m = np.ones((T, B)) if mask is None else np.asarray(mask, dtype=np.float64)
    hs, cs, gates, tcs = _kernels.lstm_forward(xw.data, wh.data, h0.data, c0.data, m, reverse)
    out_h, out_c = Tensor(hs), Tensor(cs)

    def adjoint(gs):
        return list(_kernels.lstm_backward(
            gs[0], gs[1], wh.data, h0.data, c0.data, m, reverse, hs, cs, gates, tcs))

    _record((xw, wh, h0, c0), (out_h, out_c), adjoint)
    return out_h, out_c


def attention(q, k, v, mask):
    """Masked dot-product attention, time-major.

    q [T,B,D], k [S,B,D], v [S,B,E], mask [S,B] -> ``(context, weights, scores)``.
    Only ``context`` is differentiable; weights and scores are plain arrays.
    """
    if k.shape[:2] != v.shape[:2] or q.shape[1] != k.shape[1] or q.shape[2] != k.shape[2]:
        raise DimensionError(f"attention shape mismatch: q {q.shape}, k {k.shape}, v {v.shape}")
    m = np.asarray(mask, dtype=np.float64)
    scores, w, ctx = _kernels.attention_forward(q.data, k.data, v.data, m)
    out = Tensor(ctx)

    def adjoint(gs):
        return list(_kernels.attention_backward(gs[0], q.data, k.data, v.data, w))

    _record((q, k, v), (out,), adjoint)
    return out, w, scores


# ---------------------------------------------------------------------------
# optimisation
# ---------------------------------------------------------------------------

def global_grad_norm(params):
    sq = 0.0
    for p in params:
        if p.grad is not None:
            sq += float(np.sum(p.grad * p.grad))
    return float(np.sqrt(sq))


def sgd_step(params, lr, clip_norm=None):
    """Clip by global norm, take a plain gradient step, zero gradients.

    Returns the pre-clipping gradient norm.
    """
    params = list(params)
    norm = global_grad_norm(params)
    factor = 1.0
    if clip_norm is not None and norm > clip_norm:
        factor = clip_norm / norm
    for p in params:
        if p.grad is not None:
            p.data -= (lr * factor) * p.grad
            p.grad = None
    return norm


def numerical_grad(f, x, eps=1e-5, indices=None):
    """Central finite differences of scalar ``f()`` w.r.t. entries of array ``x``.

    ``x`` is perturbed in place and restored. ``indices`` restricts the probe
    to flat positions; the result then has one entry per index.
    """
    flat = x.reshape(-1)
    idx = range(flat.size) if indices is None else indices
    out = []
    for i in idx:
        old = flat[i]
        flat[i] = old + eps
        fp = f()
        flat[i] = old - eps
        fm = f()
        flat[i] = old
        out.append((fp - fm) / (2 * eps))
    out = np.array(out)
    return out.reshape(x.shape) if indices is None else out


def gradient_errors(loss_fn, tensors, n_probe=None, rng=None, eps=1e-5):
    """Compare tape gradients of scalar ``loss_fn()`` against central
    differences on (a random subset of) the entries of ``tensors``.

    ``loss_fn`` must be deterministic. Returns ``(analytic, numeric)``
    arrays over the probed entries.
    """
    tensors = list(tensors)
    for t in tensors:
        t.grad = None
    with Tape() as tape:
        loss = loss_fn()
        tape.backward(loss)
    sizes = [t.data.size for t in tensors]
    total_size = sum(sizes)
    if n_probe is None or n_probe >= total_size:
        flat = np.arange(total_size)
    else:
        flat = np.sort((rng or np.random.default_rng(0)).choice(total_size, n_probe, replace=False))
    offsets = np.cumsum([0] + sizes)
    f = lambda: loss_fn().item()
    analytic, numeric = [], []
    for k, t in enumerate(tensors):
        idx = flat[(flat >= offsets[k]) & (flat < offsets[k + 1])] - offsets[k]
        if idx.size == 0:
            continue
        grad = np.zeros(t.data.size) if t.grad is None else t.grad.reshape(-1)
        analytic.append(grad[idx])
        numeric.append(numerical_grad(f, t.data, eps, idx))
    for t in tensors:
        t.grad = None
    return np.concatenate(analytic), np.concatenate(numeric)


def max_relative_error(analytic, numeric, floor=1e-6):
    """Largest ``|a - n| / max(|a|, |n|, floor)``.

    The floor keeps gradients at the finite-difference noise level (a
    1e-5 central difference of an O(1) loss carries ~1e-11 of round-off)
    from reporting spurious relative errors; any absolute discrepancy
    above ``floor * tol`` is still caught.
    """
    a = np.asarray(analytic)
    n = np.asarray(numeric)
    if a.size == 0:
        return 0.0
    scale = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / scale))
