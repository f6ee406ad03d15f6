"""Built-in invariant suites run by ``nws verify``.

Each suite checks the package against a slow, obviously-correct reference
on seeded random cases and returns a JSON-ready record.
"""

from __future__ import annotations

import time

import numpy as np

from . import functional as F
from .analysis import LayerUsage, memory_report
from .errors import CorruptModelError
from .formats import model_from_bytes, model_to_bytes, pools_from_bytes, pools_to_bytes, scan_model
from .harness import TaskModel
from .layers import NWSConv2d
from .nn import BatchNormState
from .pool import IndexVector, KernelPool, PoolSet, decode, nearest, search_layer
from .tensor import Tensor, precision


def naive_conv2d(x: np.ndarray, w: np.ndarray, stride: int, padding: int) -> np.ndarray:
    n, c, h, wd = x.shape
    co, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho, wo = (h + 2 * padding - k) // stride + 1, (wd + 2 * padding - k) // stride + 1
    out = np.zeros((n, co, ho, wo))
    for b in range(n):
        for o in range(co):
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0
                    for ci in range(c):
                        for di in range(k):
                            for dj in range(k):
                                acc += xp[b, ci, i * stride + di, j * stride + dj] * w[o, ci, di, dj]
                    out[b, o, i, j] = acc
    return out


def naive_nearest(entries: np.ndarray, w: np.ndarray) -> int:
    best, best_d = 0, None
    for i, e in enumerate(entries):
        d = float(((e.astype(np.float64) - w) ** 2).sum())
        if best_d is None or d < best_d:
            best, best_d = i, d
    return best


def _conv_suite(rng, cases):
    worst = 0.0
    for _ in range(cases):
        x = rng.standard_normal((2, 3, 6, 6))
        w = rng.standard_normal((4, 3, 3, 3))
        stride, pad = int(rng.integers(1, 3)), int(rng.integers(0, 2))
        with precision("float64"):
            got = F.conv2d(Tensor(x), Tensor(w), stride, pad).data
        worst = max(worst, float(np.abs(got - naive_conv2d(x, w, stride, pad)).max()))
    return worst < 1e-9, {"max_abs_error": worst}


def _gradient_suite(rng, cases):
    worst = 0.0
    with precision("float64"):
        for _ in range(cases):
            x = rng.standard_normal((2, 2, 5, 5))
            w0 = rng.standard_normal((3, 2, 3, 3))
            labels = rng.integers(0, 3, size=2)
            state = BatchNormState.fresh(3)

            def loss_of(wv):
                out = F.batch_norm(F.conv2d(Tensor(x), wv, 1, 1), state.snapshot(), True)
                logits = F.global_avg_pool(F.relu(out)).reshape(2, 3)
                return F.softmax_cross_entropy(logits, labels)

            w = Tensor(w0, requires_grad=True)
            loss_of(w).backward()
            num = np.zeros_like(w0)
            h = 1e-6
            for idx in np.ndindex(w0.shape):
                wp, wm = w0.copy(), w0.copy()
                wp[idx] += h
                wm[idx] -= h
                num[idx] = (loss_of(Tensor(wp)).item() - loss_of(Tensor(wm)).item()) / (2 * h)
            scale = np.maximum(np.abs(num), 1e-4)
            worst = max(worst, float((np.abs(w.grad - num) / scale).max()))
    return worst < 1e-4, {"max_relative_error": worst}


def _search_suite(rng, cases):
    mismatches = 0
    entries = rng.standard_normal((512, 3, 3)).astype(np.float32)
    pool = KernelPool(entries, frozen=True)
    before = pool.canonical_bytes()
    for _ in range(cases):
        w = rng.standard_normal((3, 3)).astype(np.float32)
        if rng.random() < 0.1:
            w = entries[int(rng.integers(512))].copy()
        idx, _ = nearest(pool, w)
        mismatches += idx != naive_nearest(entries, w)
    unchanged = pool.canonical_bytes() == before
    return mismatches == 0 and unchanged, {"mismatches": int(mismatches), "pool_unchanged": unchanged}


def _idempotence_suite(rng, cases):
    failures = 0
    for _ in range(cases):
        pool = KernelPool(rng.standard_normal((int(rng.integers(1, 40)), 3, 3)), frozen=True)
        code = IndexVector(0, rng.integers(0, pool.n, size=12), 3, 4)
        again = search_layer(pool, decode(pool, code)).indices
        # duplicate entries legitimately resolve to the lowest index
        failures += not np.array_equal(decode(pool, again), decode(pool, code))
    return failures == 0, {"failures": failures}


def _ste_suite(rng, cases):
    worst = 0.0
    with precision("float64"):
        for _ in range(cases):
            pool = KernelPool(rng.standard_normal((16, 3, 3)), frozen=True)
            temps = rng.standard_normal((2, 2, 3, 3))
            x = rng.standard_normal((2, 2, 5, 5))
            layer = NWSConv2d(pool, 2, 2, padding=1, temps=temps)
            out, _ = layer(Tensor(x))
            out.sum().backward()
            leaf = Tensor(layer.selected_kernels(), requires_grad=True)
            F.conv2d(Tensor(x), leaf, 1, 1).sum().backward()
            worst = max(worst, float(np.abs(layer.temps.grad - leaf.grad).max()))
    return worst == 0.0, {"max_abs_difference": worst}


def _random_model(rng, layers=3) -> TaskModel:
    codes, sizes, states = [], [], []
    for i in range(layers):
        n = int(rng.integers(1, 600))
        d_in, d_out = int(rng.integers(1, 6)), int(rng.integers(1, 6))
        codes.append(IndexVector(i, rng.integers(0, n, size=d_in * d_out), d_in, d_out))
        sizes.append(n)
        c = int(rng.integers(1, 5))
        states.append(BatchNormState(rng.random(c).astype(np.float32), rng.random(c).astype(np.float32),
                                     Tensor(rng.random(c).astype(np.float32)),
                                     Tensor(rng.random(c).astype(np.float32))))
    return TaskModel(int(rng.integers(0, 100)), 2, codes, states, sizes, "ab" * 32, "cd" * 32, [3, 7])


def _serialization_suite(rng, cases):
    failures = 0
    for _ in range(cases):
        model = _random_model(rng)
        raw = model_to_bytes(model)
        back = model_from_bytes(raw)
        kinds = {s["kind"] for s in scan_model(raw)["sections"]}
        failures += model_to_bytes(back) != raw or back != model or "kernels" in kinds
    pools = PoolSet([KernelPool(rng.standard_normal((8, 3, 3)), i, frozen=True) for i in range(4)])
    from .arch import desk_convnet
    pools.arch = desk_convnet(8)
    raw = pools_to_bytes(pools)
    failures += pools_to_bytes(pools_from_bytes(raw)) != raw
    return failures == 0, {"failures": int(failures)}


def _metrics_suite(rng, cases):
    failures = 0
    for _ in range(cases):
        n = int(rng.integers(1, 64))
        idx = rng.integers(0, n, size=int(rng.integers(1, 200)))
        u = LayerUsage.from_indices(0, idx, n)
        counts = {}
        for v in idx.tolist():
            counts[v] = counts.get(v, 0) + 1
        ls = sum(h for h in counts.values() if h * h < len(idx)) / len(idx)
        sr = sum(r for _, r in u.selection_rates())
        failures += (u.kur != len(counts) / n or u.layer_sparsity != ls or abs(sr - 1) > 1e-9)
    return failures == 0, {"failures": int(failures)}


def _memory_suite(rng, cases):
    a = memory_report("resnet18", 10, num_classes=5)
    b = memory_report("resnet18", 20, num_classes=5)
    ok = sum(b.per_task_bytes) == 2 * sum(a.per_task_bytes) and a.assist_bytes == b.assist_bytes
    return ok, {"per_task_bytes": a.per_task_bytes[0], "assist_bytes": a.assist_bytes}


def _corrupt_index_suite(rng, cases):
    pool = KernelPool(rng.standard_normal((5, 3, 3)), frozen=True)
    try:
        decode(pool, IndexVector(2, np.array([0, 1, 5, 2]), 2, 2))
    except CorruptModelError as exc:
        return "position 2" in str(exc), {"message": str(exc)}
    return False, {"message": "no error raised"}


SUITES = {
    "conv-oracle": (_conv_suite, 5),
    "gradients": (_gradient_suite, 3),
    "nearest-oracle": (_search_suite, 1000),
    "encode-decode": (_idempotence_suite, 100),
    "straight-through": (_ste_suite, 20),
    "serialization": (_serialization_suite, 20),
    "metrics": (_metrics_suite, 100),
    "memory-linearity": (_memory_suite, 1),
    "corrupt-index": (_corrupt_index_suite, 1),
}


def run_suites(seed: int = 0, names=None) -> dict:
    results = []
    for name, (suite, cases) in SUITES.items():
        if names and name not in names:
            continue
        start = time.perf_counter()
        passed, detail = suite(np.random.default_rng([seed, len(results)]), cases)
        results.append({"suite": name, "cases": cases, "passed": bool(passed),
                        "seconds": round(time.perf_counter() - start, 3), **detail})
    return {"passed": all(r["passed"] for r in results), "suites": results}
