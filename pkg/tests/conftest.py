"""Independent reference implementations used as test oracles.

Nothing here imports the implementation under test; each oracle is a
direct, loop-based transcription of the defining formula.
"""

import math

import numpy as np
import pytest


def naive_conv(x, kernel, bias):
    """3x3, stride 1, zero padding 1, written as six explicit loops."""
    n, c, h, w = x.shape
    o = kernel.shape[0]
    out = np.zeros((n, o, h, w), dtype=np.float64)
    for b in range(n):
        for oc in range(o):
            for y in range(h):
                for xx in range(w):
                    s = bias[oc]
                    for ic in range(c):
                        for dy in range(3):
                            for dx in range(3):
                                yy, xs = y + dy - 1, xx + dx - 1
                                if 0 <= yy < h and 0 <= xs < w:
                                    s += kernel[oc, ic, dy, dx] * x[b, ic, yy, xs]
                    out[b, oc, y, xx] = s
    return out


def scalar_batchnorm(x, gamma, beta, eps=1e-5):
    """Train-mode batch norm channel by channel with plain sums."""
    n, c, h, w = x.shape
    out = np.empty_like(x, dtype=np.float64)
    means, variances = [], []
    for ch in range(c):
        vals = [float(v) for v in x[:, ch].ravel()]
        mu = sum(vals) / len(vals)
        var = sum((v - mu) ** 2 for v in vals) / len(vals)
        means.append(mu)
        variances.append(var)
        out[:, ch] = gamma[ch] * (x[:, ch] - mu) / math.sqrt(var + eps) + beta[ch]
    return out, np.array(means), np.array(variances)


def numeric_grad(fn, arr, h=1e-6):
    """Central differences of a scalar function over every entry of ``arr``."""
    grad = np.zeros_like(arr, dtype=np.float64)
    for idx in np.ndindex(arr.shape):
        old = arr[idx]
        arr[idx] = old + h
        plus = fn()
        arr[idx] = old - h
        minus = fn()
        arr[idx] = old
        grad[idx] = (plus - minus) / (2 * h)
    return grad


def sort_median(stack):
    """Per-pixel median by full sort; even counts average the middle pair."""
    k, h, w = stack.shape
    out = np.empty((h, w), dtype=np.float64)
    for y in range(h):
        for x in range(w):
            vals = sorted(int(v) for v in stack[:, y, x])
            if k % 2:
                out[y, x] = vals[k // 2]
            else:
                out[y, x] = (vals[k // 2 - 1] + vals[k // 2]) / 2
    return out


def adam_trace(grads, lr=1e-3, b1=0.9, b2=0.999, eps=1e-8, p0=0.0):
    """Scalar Adam iterates for a sequence of gradients."""
    p, m, v = p0, 0.0, 0.0
    out = []
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mhat = m / (1 - b1 ** t)
        vhat = v / (1 - b2 ** t)
        p = p - lr * mhat / (math.sqrt(vhat) + eps)
        out.append(p)
    return out


def brute_confusion(pred, gt):
    """Pixel-by-pixel counting with CD2014 label rules."""
    tp = tn = fp = fn = 0
    for p, g in zip(np.ravel(pred), np.ravel(gt)):
        g = int(g)
        if g == 255:
            tp += bool(p)
            fn += not p
        elif g in (0, 50):
            fp += bool(p)
            tn += not p
    return tp, tn, fp, fn


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# --- acceptance reporting ---------------------------------------------------

ACCEPTANCE_LINES = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[n])
