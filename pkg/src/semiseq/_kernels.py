"""Hot loops of the autodiff engine: LSTM recurrence (forward and BPTT),
masked dot-product attention and the embedding scatter-add.

Every kernel has a pure-numpy implementation. The LSTM backward pass and
the embedding scatter-add also have numba versions, used when numba imports
cleanly and the environment variable ``SEMISEQ_DISABLE_NUMBA`` is unset or
"0". The LSTM forward pass and attention stay on numpy for both backends:
their work is dominated by batched matmuls and vectorised ``exp``, which
numpy already runs through BLAS and SIMD, and ``benchmarks/bench_kernels.py``
measured compiled loops for them as slower, not faster.

Gate layout along the last axis of every ``4H`` array is (input, forget,
cell, output). Sigmoid arguments are clipped to [-60, 60]; beyond that the
float64 result is already saturated.
"""
import os

import numpy as np

NEG_INF_SCORE = -1e30
_CLIP = 60.0


def _numba_requested():
    return os.environ.get("SEMISEQ_DISABLE_NUMBA", "0").lower() in ("", "0", "false", "no")


try:
    if not _numba_requested():
        raise ImportError("numba disabled by SEMISEQ_DISABLE_NUMBA")
    import numba as nb

    HAS_NUMBA = True
except ImportError:
    nb = None
    HAS_NUMBA = False


_NUMBA_IMPORTED = HAS_NUMBA


def backend():
    return "numba" if HAS_NUMBA else "numpy"


def set_backend(name):
    """Switch kernels at runtime ("numba" or "numpy"); returns the previous one."""
    global HAS_NUMBA
    if name not in ("numba", "numpy"):
        raise ValueError(f"unknown kernel backend {name!r}")
    if name == "numba" and not _NUMBA_IMPORTED:
        raise RuntimeError("numba is unavailable or disabled by SEMISEQ_DISABLE_NUMBA")
    prev = backend()
    HAS_NUMBA = name == "numba"
    return prev


# ---------------------------------------------------------------------------
# numpy path
# ---------------------------------------------------------------------------

def sigmoid_np(x):
    z = np.clip(x, -_CLIP, _CLIP)
    np.negative(z, out=z)
    np.exp(z, out=z)
    z += 1.0
    return np.reciprocal(z, out=z)


def lstm_forward_np(xw, wh, h0, c0, mask, reverse):
    """Run the recurrence over ``T`` steps.

    Returns ``hs, cs, gates, tcs``: carried states, activated gates and
    ``tanh`` of the fresh cell, the last two for the backward pass.
    """
    T, B, H4 = xw.shape
    H = H4 // 4
    hs = np.empty((T, B, H))
    cs = np.empty((T, B, H))
    gates = np.empty((T, B, H4))
    tcs = np.empty((T, B, H))
    # tanh(x) = 2 sigmoid(2x) - 1 lets one exp cover all four gates
    scale = np.full(H4, -1.0)
    scale[2 * H:3 * H] = -2.0
    h, c = h0, c0
    for t in (range(T - 1, -1, -1) if reverse else range(T)):
        z = xw[t] + h @ wh
        z *= scale
        np.clip(z, -_CLIP, _CLIP, out=z)
        np.exp(z, out=z)
        z += 1.0
        s = np.reciprocal(z, out=gates[t])
        g = s[:, 2 * H:3 * H]
        g *= 2.0
        g -= 1.0
        cn = s[:, H:2 * H] * c + s[:, :H] * g
        tc = np.tanh(cn, out=tcs[t])
        hn = s[:, 3 * H:] * tc
        m = mask[t]
        if m.all():
            h, c = hn, cn
        else:
            m = m[:, None]
            h = m * hn + (1.0 - m) * h
            c = m * cn + (1.0 - m) * c
        hs[t] = h
        cs[t] = c
    return hs, cs, gates, tcs


def _previous_states(states, init, reverse):
    prev = np.empty_like(states)
    if reverse:
        prev[:-1] = states[1:]
        prev[-1] = init
    else:
        prev[1:] = states[:-1]
        prev[0] = init
    return prev


def lstm_backward_np(ghs, gcs, wh, h0, c0, mask, reverse, hs, cs, gates, tcs):
    T, B, H = hs.shape
    dxw = np.empty((T, B, 4 * H))
    c_prevs = _previous_states(cs, c0, reverse)
    dh = np.zeros((B, H))
    dc = np.zeros((B, H))
    wh_t = np.ascontiguousarray(wh.T)
    for t in (range(T) if reverse else range(T - 1, -1, -1)):
        dh = dh + ghs[t]
        dc = dc + gcs[t]
        i = gates[t, :, :H]
        f = gates[t, :, H:2 * H]
        g = gates[t, :, 2 * H:3 * H]
        o = gates[t, :, 3 * H:]
        tc = tcs[t]
        m = mask[t]
        full = m.all()
        if full:
            dhn, dcn = dh, dc
        else:
            m = m[:, None]
            dhn, dcn = m * dh, m * dc
        dcn = dcn + dhn * o * (1.0 - tc * tc)
        dz = dxw[t]
        dz[:, :H] = dcn * g * i * (1.0 - i)
        dz[:, H:2 * H] = dcn * c_prevs[t] * f * (1.0 - f)
        dz[:, 2 * H:3 * H] = dcn * i * (1.0 - g * g)
        dz[:, 3 * H:] = dhn * tc * o * (1.0 - o)
        if full:
            dh = dz @ wh_t
            dc = dcn * f
        else:
            dh = dz @ wh_t + (1.0 - m) * dh
            dc = dcn * f + (1.0 - m) * dc
    h_prevs = _previous_states(hs, h0, reverse)
    dwh = h_prevs.reshape(T * B, H).T @ dxw.reshape(T * B, 4 * H)
    return dxw, dwh, dh, dc


def attention_forward_np(q, k, v, mask):
    """Dot-product attention, time-major.

    q [T,B,D] queries, k [S,B,D] keys, v [S,B,E] values, mask [S,B].
    Returns scores [T,B,S], weights [T,B,S], context [T,B,E].
    """
    scores = np.matmul(q.transpose(1, 0, 2), k.transpose(1, 2, 0))  # [B,T,S]
    keep = mask.T[:, None, :] > 0
    z = np.where(keep, scores, NEG_INF_SCORE)
    z -= z.max(axis=2, keepdims=True)
    e = np.exp(z) * keep
    w = e / e.sum(axis=2, keepdims=True)
    ctx = np.matmul(w, v.transpose(1, 0, 2))  # [B,T,E]
    return scores.transpose(1, 0, 2), w.transpose(1, 0, 2), ctx.transpose(1, 0, 2)


def attention_backward_np(gctx, q, k, v, w):
    gb = gctx.transpose(1, 0, 2)  # [B,T,E]
    wb = w.transpose(1, 0, 2)  # [B,T,S]
    vb = v.transpose(1, 0, 2)  # [B,S,E]
    gw = np.matmul(gb, vb.transpose(0, 2, 1))
    gv = np.matmul(wb.transpose(0, 2, 1), gb)
    gs = wb * (gw - (wb * gw).sum(axis=2, keepdims=True))
    gq = np.matmul(gs, k.transpose(1, 0, 2))
    gk = np.matmul(gs.transpose(0, 2, 1), q.transpose(1, 0, 2))
    return gq.transpose(1, 0, 2), gk.transpose(1, 0, 2), gv.transpose(1, 0, 2)


def scatter_rows_np(ids, g, n_rows):
    out = np.zeros((n_rows, g.shape[1]))
    np.add.at(out, ids, g)
    return out


# ---------------------------------------------------------------------------
# numba path
# ---------------------------------------------------------------------------

if HAS_NUMBA:

    @nb.njit(cache=True, fastmath=True)
    def lstm_backward_nb(ghs, gcs, wh, h0, c0, mask, reverse, hs, cs, gates, tcs):
        T, B, H = hs.shape
        dxw = np.empty((T, B, 4 * H))
        h_prevs = np.empty((T, B, H))
        dh = np.zeros((B, H))
        dc = np.zeros((B, H))
        dz = np.empty((B, 4 * H))
        carry = np.empty((B, H))
        wh_t = np.ascontiguousarray(wh.T)
        for step in range(T):
            t = step if reverse else T - 1 - step
            prev = t + 1 if reverse else t - 1
            if prev >= 0 and prev < T:
                h_prev = hs[prev]
                c_prev = cs[prev]
            else:
                h_prev = h0
                c_prev = c0
            h_prevs[t] = h_prev
            for b in range(B):
                m = mask[t, b]
                for j in range(H):
                    dhj = dh[b, j] + ghs[t, b, j]
                    dcj = dc[b, j] + gcs[t, b, j]
                    i = gates[t, b, j]
                    f = gates[t, b, H + j]
                    g = gates[t, b, 2 * H + j]
                    o = gates[t, b, 3 * H + j]
                    tc = tcs[t, b, j]
                    dhn = m * dhj
                    dcn = m * dcj + dhn * o * (1.0 - tc * tc)
                    dz[b, j] = dcn * g * i * (1.0 - i)
                    dz[b, H + j] = dcn * c_prev[b, j] * f * (1.0 - f)
                    dz[b, 2 * H + j] = dcn * i * (1.0 - g * g)
                    dz[b, 3 * H + j] = dhn * tc * o * (1.0 - o)
                    carry[b, j] = (1.0 - m) * dhj
                    dc[b, j] = dcn * f + (1.0 - m) * dcj
            dxw[t] = dz
            dh = np.dot(dz, wh_t) + carry
        dwh = np.dot(h_prevs.reshape(T * B, H).T, dxw.reshape(T * B, 4 * H))
        return dxw, dwh, dh, dc

    @nb.njit(cache=True)
    def scatter_rows_nb(ids, g, n_rows):
        out = np.zeros((n_rows, g.shape[1]))
        for r in range(ids.shape[0]):
            row = ids[r]
            for d in range(g.shape[1]):
                out[row, d] += g[r, d]
        return out


# ---------------------------------------------------------------------------
# dispatch
# ---------------------------------------------------------------------------

def _f64(*arrays):
    return tuple(np.ascontiguousarray(a, dtype=np.float64) for a in arrays)


def lstm_forward(xw, wh, h0, c0, mask, reverse):
    return lstm_forward_np(xw, wh, h0, c0, mask, reverse)


def lstm_backward(ghs, gcs, wh, h0, c0, mask, reverse, hs, cs, gates, tcs):
    if HAS_NUMBA:
        return lstm_backward_nb(*_f64(ghs, gcs, wh, h0, c0, mask), bool(reverse),
                                hs, cs, gates, tcs)
    return lstm_backward_np(ghs, gcs, wh, h0, c0, mask, reverse, hs, cs, gates, tcs)


def attention_forward(q, k, v, mask):
    return attention_forward_np(q, k, v, mask)


def attention_backward(gctx, q, k, v, w):
    return attention_backward_np(gctx, q, k, v, w)


def scatter_rows(ids, g, n_rows):
    """``out[ids[r]] += g[r]`` for every row ``r`` of ``g``."""
    ids = np.ascontiguousarray(ids, dtype=np.int64)
    if HAS_NUMBA:
        return scatter_rows_nb(ids, np.ascontiguousarray(g, dtype=np.float64), n_rows)
    return scatter_rows_np(ids, g, n_rows)
