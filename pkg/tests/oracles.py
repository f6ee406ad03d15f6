"""Slow, obviously-correct references used as test oracles.

Nothing in here imports the package under test.
"""

import math
import struct

import numpy as np


def naive_conv2d(x, w, stride=1, padding=0):
    """Direct sextuple loop cross-correlation in float64."""
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    n, c, h, wd = x.shape
    co, ci, k, _ = w.shape
    assert c == ci
    xp = np.zeros((n, c, h + 2 * padding, wd + 2 * padding))
    xp[:, :, padding:padding + h, padding:padding + wd] = x
    ho = (h + 2 * padding - k) // stride + 1
    wo = (wd + 2 * padding - k) // stride + 1
    out = np.zeros((n, co, ho, wo))
    for b in range(n):
        for o in range(co):
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0
                    for q in range(c):
                        for di in range(k):
                            for dj in range(k):
                                acc += xp[b, q, i * stride + di, j * stride + dj] * w[o, q, di, dj]
                    out[b, o, i, j] = acc
    return out


def exhaustive_nearest(entries, queries):
    """Scan every entry in order; a strictly smaller distance is needed to move, so ties keep the lowest index."""
    entries = np.asarray(entries, dtype=np.float64).reshape(len(entries), -1)
    queries = np.asarray(queries, dtype=np.float64).reshape(-1, entries.shape[1])
    best = np.zeros(len(queries), dtype=np.int64)
    best_d = np.full(len(queries), np.inf)
    for i, e in enumerate(entries):
        d = ((queries - e) ** 2).sum(axis=1)
        better = d < best_d
        best[better] = i
        best_d[better] = d[better]
    return best, best_d


def gather(entries, indices, d_out, d_in):
    k = entries.shape[1:]
    out = np.empty((d_out, d_in) + k, dtype=entries.dtype)
    pos = 0
    for o in range(d_out):
        for i in range(d_in):
            out[o, i] = entries[indices[pos]]
            pos += 1
    return out


def central_difference(f, x, h):
    """Numerical gradient of scalar ``f`` at array ``x``."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[idx] += h
        xm[idx] -= h
        grad[idx] = (f(xp) - f(xm)) / (2 * h)
    return grad


def distinct_ratio(indices, n):
    return len(set(int(i) for i in indices)) / n


def sparsity_recount(indices):
    counts = {}
    for i in indices:
        counts[int(i)] = counts.get(int(i), 0) + 1
    d = len(indices)
    rare = 0
    for h in counts.values():
        if h * h < d:  # h < sqrt(d) without floating point
            rare += h
    return rare / d


def selection_rates(indices):
    counts = {}
    for i in indices:
        counts[int(i)] = counts.get(int(i), 0) + 1
    return {u: h / len(indices) for u, h in counts.items()}


def softmax_ce(logits, labels):
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return -logp[np.arange(len(labels)), labels].mean()


def bn_eval(x, mean, var, gamma, beta, eps):
    shape = (1, -1, 1, 1)
    return (x - mean.reshape(shape)) / np.sqrt(var.reshape(shape) + eps) * gamma.reshape(shape) + beta.reshape(shape)


# Hand-written ResNet-18 searched-layer table: (k, d_in, d_out) in network order, head last.
RESNET18_LAYERS = (
    [(7, 3, 64)]
    + [(3, 64, 64)] * 4
    + [(3, 64, 128), (3, 128, 128), (1, 64, 128), (3, 128, 128), (3, 128, 128)]
    + [(3, 128, 256), (3, 256, 256), (1, 128, 256), (3, 256, 256), (3, 256, 256)]
    + [(3, 256, 512), (3, 512, 512), (1, 256, 512), (3, 512, 512), (3, 512, 512)]
    + [(1, 512, None)]
)
# batch-norm channels: stem, then two per block, plus one per shortcut
RESNET18_BN = [64] + [64] * 4 + [128] * 5 + [256] * 5 + [512] * 5


def resnet18_task_bytes(v, bits=9, bn_arrays=4, float_bytes=4, head_meta=8):
    index = 0
    for k, d_in, d_out in RESNET18_LAYERS:
        d = d_in * (v if d_out is None else d_out)
        index += math.ceil(d * bits / 8)
    return index + sum(RESNET18_BN) * bn_arrays * float_bytes + head_meta


def resnet18_pool_bytes(n=512, float_bytes=4):
    return sum(n * k * k * float_bytes for k, _, _ in RESNET18_LAYERS)


def read_idx_labels(path):
    """Minimal IDX parser for 1-D label files."""
    raw = open(path, "rb").read()
    code, ndim = raw[2], raw[3]
    (count,) = struct.unpack(">I", raw[4:8])
    dtype = {0x08: ">u1", 0x0C: ">i4"}[code]
    return np.frombuffer(raw[4 + 4 * ndim:], dtype=dtype, count=count)
