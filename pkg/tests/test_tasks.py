import numpy as np
import pytest

from tasl.autodiff import ArchDescriptor, init_model, loss_and_grad, predict, sgd_step
from tasl.errors import ConfigError
from tasl.tasks import (
    SLOT_VOCAB,
    check_permutation,
    default_orders,
    feature_permutation,
    gen_stream,
    reorder,
)


def _train(task, steps=400, lr=0.1, seed=0):
    m = init_model(ArchDescriptor.mlp([task.input_dim, 32, 32, task.num_classes], seed=seed))
    rng = np.random.default_rng(seed)
    for _ in range(steps):
        loss_and_grad(m, task.train.take(rng.integers(0, len(task.train), 32)))
        sgd_step(m, lr)
    return m


def _acc(m, task):
    return float((predict(m, task.test) == task.test.targets).mean())


def test_split_sizes_and_balance():
    s = gen_stream("rotated-gaussians", 3, (40, 8, 20), seed=1)
    t = s.tasks[0]
    assert (len(t.train), len(t.val), len(t.test)) == (40, 8, 20)
    assert np.bincount(t.train.targets).tolist() == [10, 10, 10, 10]
    assert [x.task_id for x in s.tasks] == [0, 1, 2]


def test_rotation_of_first_task_is_zero():
    s = gen_stream("rotated-gaussians", 5, seed=0)
    assert s.tasks[0].meta["rotation_deg"] == 0.0
    assert s.tasks[2].meta["rotation_deg"] == pytest.approx(72.0)
    # class means of task 0 sit right of the origin
    t = s.tasks[0]
    means = np.array([t.train.inputs[t.train.targets == c].mean(axis=0) for c in range(4)])
    assert np.all(means[:, 0] > 0.5)


@pytest.mark.parametrize("kind", ["rotated-gaussians", "permuted-features", "slot-fill-toy"])
def test_deterministic(kind):
    a, b = gen_stream(kind, 3, seed=4), gen_stream(kind, 3, seed=4)
    for x, y in zip(a.tasks, b.tasks):
        assert x.train.inputs.tobytes() == y.train.inputs.tobytes()
        assert x.test.targets.tobytes() == y.test.targets.tobytes()
    c = gen_stream(kind, 3, seed=5)
    assert a.tasks[0].train.inputs.tobytes() != c.tasks[0].train.inputs.tobytes()


def test_feature_permutation():
    assert list(feature_permutation(0, 0, 8)) == list(range(8))
    p = feature_permutation(3, 2, 8)
    assert sorted(p) == list(range(8))
    assert np.array_equal(p, feature_permutation(3, 2, 8))
    s = gen_stream("permuted-features", 3, seed=3)
    assert s.tasks[2].meta["permutation"] == p.tolist()


def test_reorder():
    s = gen_stream("rotated-gaussians", 3, (20, 4, 8), seed=0)
    assert reorder(s, [0, 1, 2]).sequence() == s.sequence()
    r = reorder(s, [2, 0, 1])
    assert [t.task_id for t in r.sequence()] == [2, 0, 1]
    # undoing the permutation restores the original order
    back = reorder(r, [1, 2, 0])
    assert [t.task_id for t in back.sequence()] == [0, 1, 2]
    with pytest.raises(ConfigError):
        reorder(s, [0, 0, 1])
    with pytest.raises(ConfigError):
        reorder(s, [0, 1])


def test_truncated_keeps_visiting_order():
    s = reorder(gen_stream("rotated-gaussians", 4, (20, 4, 8)), [3, 1, 0, 2])
    t = s.truncated(2)
    assert [x.task_id for x in t.sequence()] == [3, 1]


def test_default_orders():
    orders = default_orders(5)
    assert orders[0] == (0, 1, 2, 3, 4) and orders[1] == (4, 3, 2, 1, 0)
    assert len(set(orders)) == 3
    for o in orders:
        check_permutation(o, 5)
    assert default_orders(1) == [(0,)]


@pytest.mark.parametrize("kind", ["rotated-gaussians", "permuted-features"])
def test_each_task_is_learnable(kind):
    s = gen_stream(kind, 3, seed=0)
    for t in s.tasks:
        assert _acc(_train(t), t) >= 0.9


def test_adjacent_rotated_tasks_transfer():
    s = gen_stream("rotated-gaussians", 5, seed=0)
    m = _train(s.tasks[0])
    assert _acc(m, s.tasks[1]) > 0.25 + 0.1


def test_slot_fill_layout():
    s = gen_stream("slot-fill-toy", 3, (30, 5, 10), seed=2)
    assert s.num_classes == 4 + 2 * 3
    for k, t in enumerate(s.tasks):
        x, y = t.train.inputs, t.train.targets
        assert x.shape == y.shape == (30, 8)
        assert x.min() >= 0 and x.max() < SLOT_VOCAB
        labels = set(np.unique(y).tolist())
        assert labels <= {0, 1, 2, 3, 4 + 2 * k, 5 + 2 * k}
        assert np.all((y > 0).sum(axis=1) >= 1)
        # every labelled token directly follows its trigger
        trig = dict(zip(t.meta["task_triggers"], (4 + 2 * k, 5 + 2 * k)))
        for i, j in zip(*np.nonzero(y)):
            prev = int(x[i, j - 1])
            assert trig.get(prev, prev - 9) == y[i, j]


def test_bad_arguments():
    with pytest.raises(ConfigError):
        gen_stream("spirals", 3)
    with pytest.raises(ConfigError):
        gen_stream("rotated-gaussians", 0)
    with pytest.raises(ConfigError):
        gen_stream("rotated-gaussians", 2, (10, 0, 5))
