"""The nine acceptance criteria, at their stated tolerances.

Each test carries a ``criterion`` mark; the terminal summary prints one
PASS/FAIL line per criterion (see conftest).
"""

import json
import time

import numpy as np
import pytest

import oracles
from nws import functional as F
from nws.analysis import kur, layer_sparsity, selection_rate_hist
from nws.arch import build, get_arch
from nws.cli import main
from nws.data import SyntheticSpec, make_synthetic, save_idx_dataset
from nws.distill import DistillConfig, distill_step, init_pools, pretrain_pools
from nws.formats import (load_model, load_pools, model_to_bytes, pools_from_bytes, pools_to_bytes, save_model,
                         save_pools, scan_model)
from nws.harness import TaskModel
from nws.layers import NWSConv2d
from nws.pool import IndexVector, KernelPool, PoolSet, nearest
from nws.tensor import Tensor, precision
from nws.training import compute_loss, make_optimizer_for

criterion = pytest.mark.criterion


# ---------------------------------------------------------------------------
# 1. search oracle
# ---------------------------------------------------------------------------

@criterion(1, "nearest() equals exhaustive scan on 1000 cases, < 5 s")
def test_nearest_matches_exhaustive_scan():
    rng = np.random.default_rng(0)
    start = time.perf_counter()
    entries = rng.standard_normal((512, 3, 3)).astype(np.float32)
    # a block of duplicated rows makes the tie-break matter
    entries[300:310] = entries[17]
    pool = KernelPool(entries, frozen=True)
    queries = rng.standard_normal((1000, 3, 3)).astype(np.float32)
    exact = rng.choice(1000, size=100, replace=False)
    queries[exact] = entries[rng.integers(0, 512, size=100)]
    queries[:5] = entries[17]

    got = np.array([nearest(pool, q)[0] for q in queries])
    want, _ = oracles.exhaustive_nearest(entries, queries)
    elapsed = time.perf_counter() - start

    np.testing.assert_array_equal(got, want)
    assert (got[:5] == 17).all()
    assert elapsed < 5.0, f"took {elapsed:.2f} s"


# ---------------------------------------------------------------------------
# 2. gradients
# ---------------------------------------------------------------------------

def _two_layer_net(rng):
    conv_pool = KernelPool(rng.standard_normal((16, 3, 3)) * 0.5, layer_id=0, frozen=True)
    head_pool = KernelPool(rng.standard_normal((8, 1, 1)), layer_id=1, frozen=True)
    conv = NWSConv2d(conv_pool, 2, 3, padding=1, temps=rng.standard_normal((3, 2, 3, 3)) * 0.5)
    head = NWSConv2d(head_pool, 3, 4, temps=rng.standard_normal((4, 3, 1, 1)))
    x = Tensor(rng.standard_normal((2, 2, 5, 5)))
    y = rng.integers(0, 4, size=2)
    return conv, head, x, y


def _forward(conv, head, x):
    out, d1 = conv(x)
    logits, d2 = head(F.global_avg_pool(F.relu(out)))
    return logits.reshape(2, 4), d1 + d2


@criterion(2, "gradient correctness: similarity FD and STE identity, 100 cases")
@pytest.mark.parametrize("dtype, h, tol", [("float32", 1e-2, 1e-3), ("float64", 1e-5, 1e-6)])
def test_similarity_gradient_matches_finite_differences(dtype, h, tol):
    worst, skipped, total = 0.0, 0, 0
    with precision(dtype):
        for seed in range(100):
            rng = np.random.default_rng(seed)
            conv, head, x, _ = _two_layer_net(rng)
            _, diff = _forward(conv, head, x)
            diff.backward()
            grads = [conv.temps.grad.copy(), head.temps.grad.copy()]
            for layer, grad in zip((conv, head), grads):
                base = layer.temps.data.copy()
                base_idx = layer.encode().indices

                def f(w, layer=layer):
                    layer.set_temps(w)
                    return _forward(conv, head, x)[1].item()

                numeric = oracles.central_difference(f, base, h)
                stable = np.ones(base.shape, dtype=bool)
                for idx in np.ndindex(base.shape):
                    for sign in (1, -1):
                        w = base.copy()
                        w[idx] += sign * h
                        layer.set_temps(w)
                        if not np.array_equal(layer.encode().indices, base_idx):
                            stable[idx] = False
                layer.set_temps(base)
                scale = max(float(np.abs(numeric[stable]).max(initial=0.0)), 1e-12)
                err = float(np.abs(grad - numeric)[stable].max(initial=0.0)) / scale
                worst = max(worst, err)
                skipped += int((~stable).sum())
                total += base.size
    assert worst < tol, f"max relative error {worst:.3g}"
    # selection flips under +-h must stay rare or the check means little
    assert skipped < 0.05 * total


@criterion(2, "gradient correctness: similarity FD and STE identity, 100 cases")
@pytest.mark.parametrize("dtype", ["float32", "float64"])
def test_ste_gradient_equals_leaf_gradient(dtype):
    with precision(dtype):
        for seed in range(100):
            rng = np.random.default_rng(seed)
            conv, head, x, y = _two_layer_net(rng)
            logits, _ = _forward(conv, head, x)
            F.softmax_cross_entropy(logits, y).backward()

            k1 = Tensor(conv.selected_kernels(), requires_grad=True)
            k2 = Tensor(head.selected_kernels(), requires_grad=True)
            out = F.conv2d(x, k1, 1, 1)
            ref = F.conv2d(F.global_avg_pool(F.relu(out)), k2).reshape(2, 4)
            F.softmax_cross_entropy(ref, y).backward()

            np.testing.assert_array_equal(conv.temps.grad, k1.grad)
            np.testing.assert_array_equal(head.temps.grad, k2.grad)


# ---------------------------------------------------------------------------
# 3. distillation
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def toy_distill_data():
    spec = SyntheticSpec(num_classes=4, image_size=8, noise=0.2)
    return make_synthetic(spec, 16, split_seed=1)


@criterion(3, "distillation: quantisation error drops, dead entries frozen, beta linear")
def test_distillation_reduces_quantisation_error(toy_distill_data):
    # an entry's step grows with its selection count, so a 16-entry pool needs a small lr
    cfg = DistillConfig(epochs=5, lr=0.01, batch_size=16, pool_size=16, seed=0)
    _, _, history = pretrain_pools("desk", toy_distill_data, cfg)
    errors = [h["quantisation_error"] for h in history]
    assert len(errors) == 6
    assert all(e < errors[0] for e in errors[1:]), errors


@criterion(3, "distillation: quantisation error drops, dead entries frozen, beta linear")
def test_unselected_entries_bit_unchanged_each_step(toy_distill_data):
    rng = np.random.default_rng(0)
    spec = get_arch("desk", 32)
    pools = init_pools(spec, rng)
    net = build(spec, pools, 4, rng=rng, mode="distill")
    cfg = DistillConfig(lr=0.05, pool_size=32)
    opt = make_optimizer_for(net, cfg, net.pool_parameters())
    steps, changed_rows = 0, 0
    for _ in range(2):
        for xb, yb in toy_distill_data.batches(16, rng):
            before = [p.entries.copy() for p in pools]
            distill_step(net, xb, yb, beta=0.5, optimizer=opt)
            for layer, old in zip(net.nws_layers, before):
                picked = np.unique(layer.last_search.indices.indices)
                dead = np.setdiff1d(np.arange(layer.pool.n), picked)
                new = layer.pool.entries
                assert new[dead].tobytes() == old[dead].tobytes()
                changed_rows += int(np.any(new[picked] != old[picked], axis=(1, 2)).sum())
            steps += 1
    assert steps >= 8
    assert changed_rows > 0


@criterion(3, "distillation: quantisation error drops, dead entries frozen, beta linear")
@pytest.mark.parametrize("beta", [0.5, 0.1, 0.3, 1.7])
def test_doubling_beta_doubles_pool_gradient(toy_distill_data, beta):
    def grads(b):
        rng = np.random.default_rng(3)
        spec = get_arch("desk", 16)
        pools = init_pools(spec, rng)
        net = build(spec, pools, 4, rng=rng, mode="distill")
        x, y = toy_distill_data.images[:16], toy_distill_data.labels[:16]
        loss, _ = compute_loss(net, x, y, b)
        loss.backward()
        return [p.weight.grad.copy() for p in pools], [l.temps.grad.copy() for l in net.nws_layers]

    pool_1, temps_1 = grads(beta)
    pool_2, temps_2 = grads(2 * beta)
    for g1, g2 in zip(pool_1, pool_2):
        assert np.any(g1 != 0)
        np.testing.assert_array_equal(g2, 2 * g1)
    # the temporary kernels never see the distillation term
    for t1, t2 in zip(temps_1, temps_2):
        np.testing.assert_array_equal(t1, t2)


# ---------------------------------------------------------------------------
# 4. zero forgetting
# ---------------------------------------------------------------------------

@criterion(4, "zero forgetting: task 1 bit-identical after task 3")
def test_task_one_unchanged_after_task_three(desk_benchmark):
    acc_first, logits_first = desk_benchmark.first[0]
    acc_after, logits_after = desk_benchmark.after[0]
    assert acc_after == acc_first
    assert logits_after.tobytes() == logits_first.tobytes()
    for (a, la), (b, lb) in zip(desk_benchmark.first, desk_benchmark.after):
        assert a == b and la.tobytes() == lb.tobytes()
    assert desk_benchmark.pools.fingerprint() == desk_benchmark.pool_hash


# ---------------------------------------------------------------------------
# 5. desk learning quality
# ---------------------------------------------------------------------------

@criterion(5, "desk quality: within 5 points of dense, random init lower, < 15 min")
def test_each_task_within_five_points_of_dense(desk_benchmark):
    nws = [acc for acc, _ in desk_benchmark.first]
    dense = [t["accuracy"] for t in desk_benchmark.dense["tasks"]]
    assert len(nws) == len(dense) == 3
    for a, b in zip(nws, dense):
        assert abs(a - b) <= 0.05, (nws, dense)


@criterion(5, "desk quality: within 5 points of dense, random init lower, < 15 min")
def test_random_temp_init_is_worse(desk_benchmark):
    decode_avg = float(np.mean([acc for acc, _ in desk_benchmark.first]))
    assert desk_benchmark.random["complete"]
    assert desk_benchmark.random["average_accuracy"] < decode_avg


@criterion(5, "desk quality: within 5 points of dense, random init lower, < 15 min")
def test_desk_benchmark_runtime(desk_benchmark):
    assert desk_benchmark.seconds < 15 * 60


# ---------------------------------------------------------------------------
# 6. memory accounting
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def resnet18_mem_report():
    import contextlib
    import io

    buf = io.StringIO()
    start = time.perf_counter()
    with contextlib.redirect_stdout(buf):
        code = main(["mem-report", "--profile", "resnet18-split-cifar100", "--tasks", "20"])
    elapsed = time.perf_counter() - start
    return code, json.loads(buf.getvalue()), elapsed


@criterion(6, "memory: ResNet-18 x 20 tasks vs reference totals, < 1 s")
def test_mem_report_total_and_per_task(resnet18_mem_report):
    code, report, elapsed = resnet18_mem_report
    assert code == 0
    assert elapsed < 1.0
    policy = report["selected_policy"]
    assert policy in report["policies"]
    checks = report["policies"][policy]["checks"]
    assert report["policies"][policy]["report"]["index_bits"] == policy
    assert abs(checks["total_mb"]["value"] - 33.9) / 33.9 <= 0.10
    assert abs(checks["per_task_mb"]["value"] - 1.6) / 1.6 <= 0.15


@criterion(6, "memory: ResNet-18 x 20 tasks vs reference totals, < 1 s")
def test_mem_report_assist(resnet18_mem_report):
    _, report, _ = resnet18_mem_report
    checks = report["policies"][report["selected_policy"]]["checks"]
    assist = checks["assist_mb"]["value"]
    assert abs(assist - 1.3) / 1.3 <= 0.15, f"assist {assist:.3f} MB vs 1.3 MB"


# ---------------------------------------------------------------------------
# 7. metrics
# ---------------------------------------------------------------------------

def _fixture_model(seed):
    rng = np.random.default_rng(seed)
    codes, sizes = [], []
    for layer in range(int(rng.integers(1, 4))):
        n = int(rng.integers(1, 600))
        d_in, d_out = int(rng.integers(1, 20)), int(rng.integers(1, 20))
        if rng.random() < 0.5:
            # skewed draw so that some indices cross the sqrt(d) threshold
            support = rng.integers(0, n, size=int(rng.integers(1, 6)))
            idx = rng.choice(support, size=d_in * d_out)
        else:
            idx = rng.integers(0, n, size=d_in * d_out)
        codes.append(IndexVector(layer, idx, d_in, d_out))
        sizes.append(n)
    return TaskModel(1, 2, codes, [], sizes, "00" * 32, "00" * 32)


@criterion(7, "metrics: KUR and LS equal recount oracles, SR sums to 1")
def test_metrics_match_recount_oracles():
    for seed in range(100):
        model = _fixture_model(seed)
        want_kur = [oracles.distinct_ratio(c.indices, n) for c, n in zip(model.indices, model.pool_sizes)]
        want_ls = [oracles.sparsity_recount(c.indices) for c in model.indices]
        assert kur(model) == want_kur
        assert layer_sparsity(model) == want_ls
        for rows, code in zip(selection_rate_hist(model), model.indices):
            assert abs(sum(r for _, r in rows) - 1.0) <= 1e-9
            assert dict(rows) == oracles.selection_rates(code.indices)


# ---------------------------------------------------------------------------
# 8. serialization
# ---------------------------------------------------------------------------

@criterion(8, "serialization: byte-identical roundtrips, no kernel floats, fingerprint exit code")
def test_roundtrips_are_byte_identical(desk_benchmark, tmp_path):
    pools = desk_benchmark.pools
    raw = pools_to_bytes(pools)
    assert pools_to_bytes(pools_from_bytes(raw)) == raw
    save_pools(tmp_path / "a.nwsp", pools)
    save_pools(tmp_path / "b.nwsp", load_pools(tmp_path / "a.nwsp"))
    assert (tmp_path / "a.nwsp").read_bytes() == (tmp_path / "b.nwsp").read_bytes() == raw

    for i, model in enumerate([desk_benchmark.c0] + desk_benchmark.models):
        first, second = tmp_path / f"m{i}a.nwsm", tmp_path / f"m{i}b.nwsm"
        save_model(first, model)
        save_model(second, load_model(first, pools))
        assert first.read_bytes() == second.read_bytes() == model_to_bytes(model)


@criterion(8, "serialization: byte-identical roundtrips, no kernel floats, fingerprint exit code")
def test_model_file_holds_no_kernel_floats(desk_benchmark):
    allowed = {"header", "head", "index-meta", "indices", "bn-meta", "bn-arrays", "metadata", "checksum"}
    for model in desk_benchmark.models:
        raw = model_to_bytes(model)
        scan = scan_model(raw)
        sections = sorted(scan["sections"], key=lambda s: s["offset"])
        # every byte belongs to exactly one section
        pos = 0
        for s in sections:
            assert s["offset"] == pos
            pos += s["length"]
        assert pos == len(raw)
        assert {s["kind"] for s in sections} <= allowed
        # the only floats are the batch-norm arrays: 4 per channel
        bn_float_bytes = sum(s["length"] for s in sections if s["kind"] == "bn-arrays")
        channels = sum(st.channels for st in model.bn_states)
        assert bn_float_bytes == 4 * channels * 4
        # and no pool kernel appears verbatim anywhere in the file
        for pool in desk_benchmark.pools:
            if pool.kernel_size < 3:
                continue
            for row in pool.entries:
                assert row.astype("<f4").tobytes() not in raw


@criterion(8, "serialization: byte-identical roundtrips, no kernel floats, fingerprint exit code")
def test_fingerprint_mismatch_exit_code(desk_benchmark, tmp_path, capsys):
    pools = desk_benchmark.pools
    entries = pools[0].entries.copy()
    entries[0, 0, 0] += 1.0
    other = PoolSet([KernelPool(entries, 0, frozen=True)] + list(pools)[1:], arch=pools.arch)
    save_pools(tmp_path / "other.nwsp", other)
    save_model(tmp_path / "task.nwsm", desk_benchmark.models[0])
    save_idx_dataset(tmp_path / "data", desk_benchmark.tasks[0].test)

    code = main(["infer", "--pools", str(tmp_path / "other.nwsp"), "--model", str(tmp_path / "task.nwsm"),
                 "--input", str(tmp_path / "data")])
    err = json.loads(capsys.readouterr().err)
    assert code == 4
    assert err["error"]["exit_code"] == 4
    assert err["error"]["type"] == "IncompatibleArtifactError"


# ---------------------------------------------------------------------------
# 9. determinism
# ---------------------------------------------------------------------------

@criterion(9, "determinism: two run-sequence executions byte-identical")
def test_run_sequence_is_byte_identical(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("NWS_THREADS", "1")
    dirs = [tmp_path / "a", tmp_path / "b"]
    for d in dirs:
        assert main(["run-sequence", "--workdir", str(d), "--out", str(d / "stdout.json")]) == 0
    names = sorted(p.name for p in dirs[0].iterdir())
    assert names == sorted(p.name for p in dirs[1].iterdir())
    assert {"task_001.nwsm", "task_002.nwsm", "task_003.nwsm", "report.json"} <= set(names)
    for name in names:
        assert (dirs[0] / name).read_bytes() == (dirs[1] / name).read_bytes(), name
    report = json.loads((dirs[0] / "report.json").read_text())
    assert report["complete"]
    assert report["manifest"]["nws_threads"] == "1"
