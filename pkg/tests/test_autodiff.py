import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import finite_difference_grads, max_relative_error, mlp_forward_loss
from tasl.autodiff import (
    ArchDescriptor,
    Batch,
    backward,
    forward_loss,
    init_model,
    loss_and_grad,
    sgd_step,
    transformer_tensor_names,
)
from tasl.errors import ConfigError, NonFiniteError, ShapeError, TaslError


def _mlp_batch(rng, n, d, classes):
    return Batch(rng.normal(size=(n, d)), rng.integers(0, classes, n))


def _analytic(model, batch):
    loss_and_grad(model, batch)
    return {n: p.grad.copy() for n, p in model.params.items()}


def test_init_mlp_shapes():
    m = init_model(ArchDescriptor.mlp([4, 8, 2], seed=7))
    assert {n: p.shape for n, p in m.params.items()} == {
        "layer0.weight": (4, 8), "layer0.bias": (8,), "layer1.weight": (8, 2), "layer1.bias": (2,)}
    assert np.all(m["layer0.bias"].values == 0)
    limit = math.sqrt(6 / 12)
    assert np.abs(m["layer0.weight"].values).max() <= limit


def test_init_is_deterministic():
    a = init_model(ArchDescriptor.mlp([4, 8, 2], seed=7))
    b = init_model(ArchDescriptor.mlp([4, 8, 2], seed=7))
    assert a.flat_values().tobytes() == b.flat_values().tobytes()
    c = init_model(ArchDescriptor.mlp([4, 8, 2], seed=8))
    assert a.flat_values().tobytes() != c.flat_values().tobytes()


def test_init_transformer_names():
    m = init_model(ArchDescriptor.transformer(8, 2, 16, 1, 4))
    expected = ["embed", "block0.attn.q", "block0.attn.k", "block0.attn.v", "block0.attn.o",
                "block0.mlp.wi", "block0.mlp.wo", "block0.norm1", "block0.norm2", "head"]
    assert m.names() == expected == transformer_tensor_names(1)
    assert np.all(m["block0.norm1"].values == 1.0)
    assert m["head"].shape == (8, 4)


@pytest.mark.parametrize("arch", [
    ArchDescriptor.mlp([3]),
    ArchDescriptor.mlp([3, 0, 2]),
    ArchDescriptor.transformer(6, 4, 8, 1, 3),
    ArchDescriptor(kind="cnn"),
])
def test_invalid_descriptor(arch):
    with pytest.raises(ConfigError):
        init_model(arch)


@pytest.mark.parametrize("classes", [2, 4])
def test_zero_weights_give_uniform_loss(classes):
    m = init_model(ArchDescriptor.mlp([3, 5, classes]))
    for p in m.params.values():
        p.values[...] = 0
    batch = _mlp_batch(np.random.default_rng(0), 6, 3, classes)
    loss, _ = forward_loss(m, batch)
    assert loss == pytest.approx(math.log(classes), abs=1e-9)


def test_forward_matches_straight_line_oracle():
    m = init_model(ArchDescriptor.mlp([4, 6, 5, 3], seed=11))
    batch = _mlp_batch(np.random.default_rng(5), 9, 4, 3)
    loss, preds = forward_loss(m, batch)
    W = [m[f"layer{i}.weight"].values for i in range(3)]
    b = [m[f"layer{i}.bias"].values for i in range(3)]
    assert abs(loss - mlp_forward_loss(W, b, batch.inputs, batch.targets)) < 1e-12
    assert preds.shape == (9,)


def test_backward_matches_finite_differences_mlp():
    m = init_model(ArchDescriptor.mlp([4, 3, 2], seed=1))
    batch = _mlp_batch(np.random.default_rng(0), 5, 4, 2)
    assert max_relative_error(_analytic(m, batch), finite_difference_grads(m, batch)) < 1e-5


def test_backward_matches_finite_differences_transformer():
    m = init_model(ArchDescriptor.transformer(8, 2, 12, 2, 5, vocab=9, seed=2))
    rng = np.random.default_rng(1)
    for p in m.params.values():
        p.values = p.values + rng.normal(scale=0.1, size=p.shape)
    batch = Batch(rng.integers(0, 9, (2, 4)), rng.integers(0, 5, (2, 4)))
    assert max_relative_error(_analytic(m, batch), finite_difference_grads(m, batch)) < 1e-5


def test_zero_feature_gives_zero_weight_grad():
    m = init_model(ArchDescriptor.mlp([3, 4, 2], seed=0))
    rng = np.random.default_rng(0)
    x = rng.normal(size=(8, 3))
    x[:, 1] = 0.0
    batch = Batch(x, rng.integers(0, 2, 8))
    loss_and_grad(m, batch)
    assert np.all(m["layer0.weight"].grad[1] == 0)


def test_duplicated_batch_keeps_mean_grads():
    m = init_model(ArchDescriptor.mlp([3, 4, 2], seed=0))
    batch = _mlp_batch(np.random.default_rng(3), 6, 3, 2)
    g1 = _analytic(m, batch)
    g2 = _analytic(m, Batch.concat([batch, batch]))
    for n in g1:
        np.testing.assert_allclose(g1[n], g2[n], rtol=1e-12, atol=1e-15)


def test_grads_are_overwritten_not_accumulated():
    m = init_model(ArchDescriptor.mlp([3, 4, 2], seed=0))
    batch = _mlp_batch(np.random.default_rng(3), 6, 3, 2)
    g1 = _analytic(m, batch)
    g2 = _analytic(m, batch)
    for n in g1:
        assert np.array_equal(g1[n], g2[n])


def test_backward_before_forward_is_an_error():
    m = init_model(ArchDescriptor.mlp([3, 4, 2]))
    batch = _mlp_batch(np.random.default_rng(0), 2, 3, 2)
    with pytest.raises(TaslError):
        backward(m, batch)
    forward_loss(m, batch)
    with pytest.raises(TaslError):
        backward(m, _mlp_batch(np.random.default_rng(1), 2, 3, 2))


def test_shape_mismatch():
    m = init_model(ArchDescriptor.mlp([3, 4, 2]))
    with pytest.raises(ShapeError):
        forward_loss(m, Batch(np.zeros((2, 5)), [0, 1]))
    with pytest.raises(ShapeError):
        forward_loss(m, Batch(np.zeros((2, 3)), [0, 2]))


def test_sgd_step_arithmetic():
    m = init_model(ArchDescriptor.mlp([1, 1]))
    m["layer0.weight"].values[...] = 1.0
    m["layer0.weight"].grad[...] = 2.0
    sgd_step(m, 0.1)
    assert m["layer0.weight"].values[0, 0] == pytest.approx(0.8, abs=1e-15)


def test_sgd_lr_zero_and_linearity():
    m = init_model(ArchDescriptor.mlp([3, 4, 2], seed=4))
    batch = _mlp_batch(np.random.default_rng(0), 5, 3, 2)
    loss_and_grad(m, batch)
    before = m.flat_values()
    sgd_step(m, 0.0)
    assert np.array_equal(before, m.flat_values())

    a, b = m.copy(), m.copy()
    sgd_step(a, 0.05)
    sgd_step(a, 0.05)
    sgd_step(b, 0.1)
    np.testing.assert_allclose(a.flat_values(), b.flat_values(), rtol=0, atol=1e-15)


def test_sgd_rejects_non_finite():
    m = init_model(ArchDescriptor.mlp([2, 2]))
    m["layer0.weight"].grad[...] = np.inf
    before = m.flat_values()
    with pytest.raises(NonFiniteError):
        sgd_step(m, 0.1)
    assert np.array_equal(before, m.flat_values())


def test_loss_decreases_on_separable_blobs():
    rng = np.random.default_rng(0)
    y = rng.integers(0, 2, 200)
    x = rng.normal(scale=0.5, size=(200, 2)) + np.where(y[:, None] == 1, 2.0, -2.0)
    data = Batch(x, y)
    m = init_model(ArchDescriptor.mlp([2, 8, 2], seed=0))
    start, _ = forward_loss(m, data)
    for _ in range(200):
        batch = data.take(rng.integers(0, 200, 32))
        loss_and_grad(m, batch)
        sgd_step(m, 0.05)
    end, _ = forward_loss(m, data)
    assert end <= 0.5 * start


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), hidden=st.integers(1, 5), classes=st.integers(2, 4),
       n=st.integers(1, 4))
def test_gradient_check_random_mlps(seed, hidden, classes, n):
    rng = np.random.default_rng(seed)
    m = init_model(ArchDescriptor.mlp([3, hidden, classes], seed=seed))
    for p in m.params.values():
        p.values = p.values + rng.normal(scale=0.1, size=p.shape)
    batch = _mlp_batch(rng, n, 3, classes)
    assert max_relative_error(_analytic(m, batch), finite_difference_grads(m, batch)) < 1e-5


def test_training_trajectory_is_deterministic():
    def trajectory():
        m = init_model(ArchDescriptor.mlp([3, 6, 2], seed=9))
        rng = np.random.default_rng(2)
        data = _mlp_batch(rng, 40, 3, 2)
        out = []
        for _ in range(20):
            out.append(loss_and_grad(m, data.take(rng.integers(0, 40, 8))))
            sgd_step(m, 0.1)
        return out

    assert trajectory() == trajectory()
