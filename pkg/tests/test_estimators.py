import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from nws.errors import InvalidInputError
from nws.estimators import DenseFinetuneClassifier, NWSClassifier, PoolDistiller

FAST = dict(epochs=1, batch_size=20, lr=0.01)


@pytest.fixture(scope="module")
def task(tiny_tasks):
    t = tiny_tasks[0]
    return t.train.images, t.train.labels, t.test.images


@pytest.fixture(scope="module")
def fitted(tiny_pools, task):
    pools, c0 = tiny_pools
    X, y, _ = task
    return NWSClassifier(pools, c0, **FAST).fit(X, y)


def test_params_and_clone(tiny_pools):
    est = NWSClassifier(tiny_pools[0], lr=0.3)
    assert est.get_params()["lr"] == 0.3
    copy = clone(est)
    assert copy.get_params()["lr"] == 0.3
    assert copy.pools.fingerprint() == est.pools.fingerprint()


class TestNWSClassifier:
    def test_predict(self, fitted, task):
        pred = fitted.predict(task[2])
        assert set(pred) <= {0, 1}
        proba = fitted.predict_proba(task[2])
        np.testing.assert_allclose(proba.sum(axis=1), 1.0, rtol=1e-5)
        np.testing.assert_array_equal(pred, fitted.classes_[proba.argmax(axis=1)])

    def test_stores_indices_only(self, fitted):
        assert fitted.model_.num_classes == 2
        assert all(l.temps is None for l in fitted.network_.nws_layers)

    def test_matches_harness(self, fitted, tiny_pools, task):
        from nws.harness import task_logits
        np.testing.assert_array_equal(fitted.decision_function(task[2]),
                                      task_logits(tiny_pools[0], fitted.model_, task[2]))

    def test_string_labels(self, tiny_pools, task):
        pools, c0 = tiny_pools
        X, y, Xt = task
        names = np.array(["cat", "dog"])[y]
        est = NWSClassifier(pools, c0, **FAST).fit(X, names)
        assert set(est.predict(Xt)) <= {"cat", "dog"}
        assert est.model_.classes == [0, 1]

    def test_not_fitted(self, tiny_pools, task):
        with pytest.raises(NotFittedError):
            NWSClassifier(tiny_pools[0]).predict(task[2])

    def test_needs_pools(self, task):
        with pytest.raises(InvalidInputError):
            NWSClassifier().fit(task[0], task[1])

    def test_bad_input(self, tiny_pools, task):
        with pytest.raises(InvalidInputError):
            NWSClassifier(tiny_pools[0], **FAST).fit(task[0], task[1][:-1])


def test_dense_finetune(tiny_pools, task):
    pools, c0 = tiny_pools
    X, y, Xt = task
    est = DenseFinetuneClassifier(pools, c0, **FAST).fit(X, y)
    assert est.predict(Xt).shape == (len(Xt),)
    with pytest.raises(InvalidInputError):
        DenseFinetuneClassifier(pools).fit(X, y)


def test_pool_distiller(tiny_data):
    est = PoolDistiller(pool_size=4, epochs=1, batch_size=12, lr=0.01).fit(tiny_data.pretrain.images,
                                                                          tiny_data.pretrain.labels)
    assert est.pools_.frozen and all(p.n == 4 for p in est.pools_)
    assert est.init_model_.num_classes == 3
    assert len(est.history_) == 2
