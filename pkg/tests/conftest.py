import time
from types import SimpleNamespace

import numpy as np
import pytest

from nws.config import RunConfig
from nws.data import SyntheticSpec, make_synthetic
from nws.distill import DistillConfig, pretrain_pools
from nws.harness import evaluate, finetune_baseline, fit_task, make_tasks, run_sequence
from nws.tensor import precision
from nws.training import TrainConfig


# acceptance bookkeeping: nodeid -> (number, title), (number, title) -> counts
_CRITERIA = {}
_RESULTS = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion a test belongs to")


def pytest_collection_modifyitems(config, items):
    for item in items:
        mark = item.get_closest_marker("criterion")
        if mark is not None:
            _CRITERIA[item.nodeid] = (mark.args[0], mark.args[1])


def pytest_runtest_logreport(report):
    key = _CRITERIA.get(report.nodeid)
    if key is None:
        return
    entry = _RESULTS.setdefault(key, {"passed": 0, "failed": 0})
    if report.failed:
        entry["failed"] += 1
    elif report.when == "call" and report.passed:
        entry["passed"] += 1


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for (number, title), entry in sorted(_RESULTS.items()):
        status = "PASS" if entry["failed"] == 0 and entry["passed"] > 0 else "FAIL"
        terminalreporter.write_line(
            f"ACCEPTANCE {number} {status}: {title} ({entry['passed']} passed, {entry['failed']} failed)")


# -- shared fixtures ----------------------------------------------------------

@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def f64():
    with precision("float64"):
        yield


@pytest.fixture(scope="session")
def tiny_data():
    spec = SyntheticSpec(num_classes=6, image_size=8, noise=0.2)
    pre = make_synthetic(spec, 12, [0, 1, 2], split_seed=1)
    train = make_synthetic(spec, 20, [3, 4, 5], split_seed=2)
    test = make_synthetic(spec, 10, [3, 4, 5], split_seed=3)
    return SimpleNamespace(spec=spec, pretrain=pre, train=train, test=test)


@pytest.fixture(scope="session")
def tiny_pools(tiny_data):
    """Small desk net (n=16) pretrained for two epochs; returns (pools, c0)."""
    cfg = DistillConfig(epochs=2, lr=0.05, batch_size=12, pool_size=16, seed=0)
    pools, c0, _ = pretrain_pools("desk", tiny_data.pretrain, cfg)
    return pools, c0


@pytest.fixture(scope="session")
def tiny_tasks(tiny_data):
    return make_tasks(tiny_data.train, tiny_data.test, [[3, 4], [4, 5], [3, 4, 5]])


@pytest.fixture
def quick_cfg():
    return TrainConfig(epochs=1, batch_size=20, lr=0.01)


@pytest.fixture(scope="session")
def desk_benchmark():
    """The default 3-task desk benchmark, trained once per session.

    Holds the logits of every task right after it was trained and again
    after the last task, plus the random-init and dense references.
    """
    cfg = RunConfig()
    start = time.perf_counter()
    with precision(cfg.precision):
        pools, c0, pre_history = pretrain_pools(cfg.arch_spec(), cfg.pretrain_data(), cfg.distill_config())
        pool_hash = pools.fingerprint()
        tasks = cfg.task_specs()
        models, first, prev = [], [], c0
        for spec in tasks:
            model, _, _ = fit_task(pools, prev, spec.train, spec.num_classes, cfg.train, cfg.seed,
                                   spec.task_id, spec.classes)
            first.append(evaluate(pools, model, spec.test))
            models.append(model)
            prev = model
        after = [evaluate(pools, m, spec.test) for m, spec in zip(models, tasks)]
        random_cfg = TrainConfig(**{**cfg.train.to_dict(), "temp_init": "random"})
        random_report, _ = run_sequence(pools, c0, tasks, random_cfg, cfg.seed)
        dense = finetune_baseline(pools, c0, tasks, cfg.train, cfg.seed)
    return SimpleNamespace(cfg=cfg, pools=pools, c0=c0, tasks=tasks, models=models, first=first, after=after,
                           pool_hash=pool_hash, pretrain_history=pre_history, random=random_report,
                           dense=dense, seconds=time.perf_counter() - start)
