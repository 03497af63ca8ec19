"""Slow explicit-loop reference implementations used as test oracles.

Nothing here imports the package's primitives; every value is computed
from the textbook definition with python loops over float64 numbers.
"""

import math

import numpy as np


def matmul(a, b):
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    out = np.zeros((a.shape[0], b.shape[1]))
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            for k in range(a.shape[1]):
                out[i, j] += a[i, k] * b[k, j]
    return out


def conv2d(x, w, b=None, stride=1, padding=0, dilation=1):
    x, w = np.asarray(x, dtype=float), np.asarray(w, dtype=float)
    B, C, H, W = x.shape
    Co, _, k, _ = w.shape
    Ho = (H + 2 * padding - dilation * (k - 1) - 1) // stride + 1
    Wo = (W + 2 * padding - dilation * (k - 1) - 1) // stride + 1
    out = np.zeros((B, Co, Ho, Wo))
    for n in range(B):
        for o in range(Co):
            for i in range(Ho):
                for j in range(Wo):
                    acc = 0.0 if b is None else float(b[o])
                    for c in range(C):
                        for u in range(k):
                            for v in range(k):
                                r = i * stride - padding + u * dilation
                                s = j * stride - padding + v * dilation
                                if 0 <= r < H and 0 <= s < W:
                                    acc += x[n, c, r, s] * w[o, c, u, v]
                    out[n, o, i, j] = acc
    return out


def softmax_row(row):
    m = max(row)
    e = [math.exp(v - m) for v in row]
    z = sum(e)
    return [v / z for v in e]


def pointwise(x, w, b):
    """1x1 convolution of one (C, H, W) map with weight (D, C, 1, 1)."""
    D, C = w.shape[:2]
    H, W = x.shape[1:]
    out = np.zeros((D, H, W))
    for d in range(D):
        for i in range(H):
            for j in range(W):
                out[d, i, j] = b[d] + sum(w[d, c, 0, 0] * x[c, i, j] for c in range(C))
    return out


def self_attention(f, wk, bk, wq, bq, wv, bv, gamma):
    """Residual spatial attention on one (D, H, W) map."""
    f = np.asarray(f, dtype=float)
    D, H, W = f.shape
    N = H * W
    K = pointwise(f, wk, bk).reshape(D, N)
    Q = pointwise(f, wq, bq).reshape(D, N)
    V = pointwise(f, wv, bv).reshape(D, N)
    aff = []
    for i in range(N):
        aff.append(softmax_row([sum(K[d, i] * Q[d, j] for d in range(D)) for j in range(N)]))
    out = np.zeros((D, N))
    for d in range(D):
        for i in range(N):
            out[d, i] = f.reshape(D, N)[d, i] + gamma * sum(aff[i][j] * V[d, j] for j in range(N))
    return out.reshape(D, H, W), np.array(aff)


def channel_attention(f, wp, bp, gamma):
    """Compress with a 1x1 conv, then residual attention over channels."""
    F = pointwise(np.asarray(f, dtype=float), wp, bp)
    D, H, W = F.shape
    N = H * W
    X = F.reshape(D, N)
    aff = []
    for a in range(D):
        aff.append(softmax_row([sum(X[a, n] * X[b, n] for n in range(N)) for b in range(D)]))
    out = np.zeros((D, N))
    for a in range(D):
        for n in range(N):
            out[a, n] = X[a, n] + gamma * sum(aff[a][b] * X[b, n] for b in range(D))
    return out.reshape(D, H, W), np.array(aff)


def se_block(f, w1, b1, w2, b2):
    f = np.asarray(f, dtype=float)
    C, H, W = f.shape
    pooled = [sum(f[c, i, j] for i in range(H) for j in range(W)) / (H * W) for c in range(C)]
    R = w1.shape[0]
    hidden = [max(0.0, b1[r] + sum(w1[r, c, 0, 0] * pooled[c] for c in range(C))) for r in range(R)]
    gate = [1 / (1 + math.exp(-(b2[c] + sum(w2[c, r, 0, 0] * hidden[r] for r in range(R))))) for c in range(C)]
    out = np.zeros_like(f)
    for c in range(C):
        out[c] = f[c] * gate[c]
    return out, np.array(gate)


def window_means(x, k, stride):
    H, W = x.shape
    Ho, Wo = (H - k) // stride + 1, (W - k) // stride + 1
    out = np.zeros((Ho, Wo))
    for i in range(Ho):
        for j in range(Wo):
            out[i, j] = sum(x[i * stride + u, j * stride + v] for u in range(k) for v in range(k)) / (k * k)
    return out


def confusion(pred, gt):
    tp = fp = fn = tn = 0
    for p, g in zip(np.asarray(pred).ravel().tolist(), np.asarray(gt).ravel().tolist()):
        if p and g:
            tp += 1
        elif p and not g:
            fp += 1
        elif g:
            fn += 1
        else:
            tn += 1
    return tp, fp, fn, tn
