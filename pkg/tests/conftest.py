import math

import numpy as np

from demansia.numerics import Tape, Tensor, backward, finite_diff_grad, rel_err


def max_grad_err(make_loss, *arrays, eps=1e-5):
    """Backward vs central differences for every argument; worst rel err."""
    ts = [Tensor(np.array(a, dtype=float), requires_grad=True) for a in arrays]
    with Tape():
        loss = make_loss(*ts)
        backward(loss)
    worst = 0.0
    for t in ts:
        fd = finite_diff_grad(lambda _: make_loss(*ts), t, eps=eps)
        worst = max(worst, rel_err(t.grad, fd))
    return worst


# ---------------------------------------------------------------------------
# plain-numpy reference pieces used to compose independent oracles
# ---------------------------------------------------------------------------


def np_silu(x):
    return x / (1.0 + np.exp(-x))


def np_rmsnorm(x, weight, eps=1e-6):
    ms = (x * x).mean(axis=1, keepdims=True)
    return x * (ms + eps) ** -0.5 * weight


def np_causal_conv(x, w, b):
    m, d = x.shape
    k = w.shape[1]
    xp = np.zeros((m + k - 1, d))
    xp[k - 1 :] = x
    y = np.zeros((m, d))
    for j in range(k):
        y += xp[j : j + m] * w[:, j]
    return y + b


def naive_selective_scan(x, A, wb, wc, wd, bias):
    """Straightforward per-step re-implementation with explicit loops.

    Counts operations as it goes: length-L dots cost 2L; exp, expm1, divide,
    softplus, multiply, add cost 1 each. Returns (y, op_count).
    """
    m, d = x.shape
    n = A.shape[1]
    ops = 0
    h = np.zeros((d, n))
    y = np.empty((m, d))
    for t in range(m):
        b_t = np.empty(n)
        c_t = np.empty(n)
        for i in range(n):
            acc = 0.0
            for k in range(d):
                acc += wb[i, k] * x[t, k]
                ops += 2
            b_t[i] = acc
            acc = 0.0
            for k in range(d):
                acc += wc[i, k] * x[t, k]
                ops += 2
            c_t[i] = acc
        raw = 0.0
        for k in range(d):
            raw += wd[0, k] * x[t, k]
            ops += 2
        delta = np.empty(d)
        for c in range(d):
            pre = bias[c] + raw
            ops += 1
            delta[c] = math.log1p(math.exp(pre))
            ops += 1
        for c in range(d):
            acc = 0.0
            for i in range(n):
                z = delta[c] * A[c, i]
                ops += 1
                abar = math.exp(z)
                ops += 1
                em = math.expm1(z)
                ops += 1
                phi = em / z
                ops += 1
                bbar = phi * (delta[c] * b_t[i])
                ops += 2
                h[c, i] = abar * h[c, i] + bbar * x[t, c]
                ops += 3
                acc += c_t[i] * h[c, i]
                ops += 2
            y[t, c] = acc
    return y, ops
