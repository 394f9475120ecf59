import io
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ecoba.model import (ARCHS, Conv2D, Dense, Flatten, MaxPool, Model, ReLU, ShapeError,
                         Softmax, TrainConfig, WeightFileError, build, load_weights,
                         loss_and_grad, predict, save_weights, to_bytes, train)
from gradcheck import REL_TOL, check_layer, max_rel_error, numeric_grad, random_layer

LAYER_KINDS = ["dense", "conv", "maxpool", "relu", "flatten", "softmax"]


@pytest.mark.parametrize("kind", LAYER_KINDS)
@pytest.mark.parametrize("seed", range(20))
def test_layer_gradients_match_finite_differences(kind, seed):
    rng = np.random.default_rng(1000 * LAYER_KINDS.index(kind) + seed)
    layer, x = random_layer(kind, rng)
    errors = check_layer(layer, x, rng)
    assert max(errors.values()) < REL_TOL, errors


def tiny_model(arch, rng):
    if arch == "mlp":
        layers = [Flatten((1, 4, 4)), Dense(16, 6), ReLU(), Dense(6, 3), Softmax(3)]
    else:
        layers = [Conv2D(1, 2, 3, pad=1), ReLU(), MaxPool(2), Flatten((2, 2, 2)),
                  Dense(8, 3), Softmax(3)]
    m = Model(layers, (1, 4, 4), arch)
    for layer in m.layers:
        for key, p in layer.params.items():
            layer.params[key] = rng.normal(size=p.shape)
    return m


@pytest.mark.parametrize("arch", ["mlp", "conv"])
@pytest.mark.parametrize("seed", range(3))
def test_model_cross_entropy_gradient(arch, seed):
    rng = np.random.default_rng(seed)
    m = tiny_model(arch, rng)
    x = rng.normal(size=(3, 4, 4))
    y = rng.integers(0, 3, size=3)
    _, grads, dx = loss_and_grad(m, x, y)

    def f():
        return loss_and_grad(m, x, y)[0]

    assert max_rel_error(dx, numeric_grad(f, x)) < REL_TOL
    for layer, g in zip(m.layers, grads):
        for key, p in layer.params.items():
            assert max_rel_error(g[key], numeric_grad(f, p)) < REL_TOL


def test_uniform_prediction_loss_is_log_n():
    m = build("mlp2", 10, 0)
    for layer in m.layers:
        for p in layer.params.values():
            p[...] = 0
    x = np.zeros((2, 28, 28), np.float32)
    probs = predict(m, x)
    np.testing.assert_allclose(probs, 0.1, atol=1e-12)
    loss, _, _ = loss_and_grad(m, x, [3, 7])
    assert loss == pytest.approx(math.log(10), abs=1e-6)


def test_duplicated_sample_gives_same_gradient(rng):
    m = tiny_model("conv", rng)
    x = rng.normal(size=(1, 4, 4))
    _, g1, _ = loss_and_grad(m, x, [1])
    _, g2, _ = loss_and_grad(m, np.concatenate([x, x]), [1, 1])
    for a, b in zip(g1, g2):
        for key in a:
            np.testing.assert_allclose(a[key], b[key], rtol=1e-12)


def test_parameter_counts():
    assert build("mlp2", 10).param_count() == 784 * 128 + 128 + 128 * 64 + 64 + 64 * 10 + 10
    cnn = build("cnn2", 10)
    assert cnn.layers[0].params["W"].size == 16 * 1 * 5 * 5
    for arch in ARCHS:
        assert build(arch, 26).class_count == 26


def test_build_is_seeded():
    a, b, c = build("lenet", 10, 3), build("lenet", 10, 3), build("lenet", 10, 4)
    assert to_bytes(a) == to_bytes(b)
    assert to_bytes(a) != to_bytes(c)


def test_build_rejects_unknown_arch():
    with pytest.raises(ValueError):
        build("resnet", 10)


def test_model_rejects_non_composing_layers():
    with pytest.raises(ShapeError):
        Model([Flatten((1, 4, 4)), Dense(15, 3), Softmax(3)], (1, 4, 4))
    with pytest.raises(ShapeError):
        Model([Conv2D(1, 2, 3), MaxPool(2), Flatten((2, 1, 1)), Dense(2, 2), Softmax(2)], (1, 5, 5))
    with pytest.raises(ShapeError):
        Model([Flatten((1, 4, 4)), Dense(16, 3)], (1, 4, 4))


def test_predict_dimension_mismatch():
    with pytest.raises(ShapeError):
        predict(build("mlp2", 10), np.zeros((27, 28)))


@settings(max_examples=30, deadline=None)
@given(arch=st.sampled_from(ARCHS), seed=st.integers(0, 2**16), n=st.integers(1, 5))
def test_probabilities_normalized(arch, seed, n):
    rng = np.random.default_rng(seed)
    m = build(arch, 10, seed)
    x = (rng.random((n, 28, 28)) > 0.7).astype(np.uint8)
    p = predict(m, x)
    assert p.shape == (n, 10)
    assert np.all((p >= 0) & (p <= 1))
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-6)


def test_single_image_and_batch_agree(rng):
    m = build("cnn2", 10, 1)
    x = (rng.random((3, 28, 28)) > 0.7).astype(np.uint8)
    np.testing.assert_array_equal(predict(m, x[1]), predict(m, x[1:2])[0])


@pytest.mark.parametrize("arch", ARCHS)
def test_weights_round_trip(tmp_path, rng, arch):
    m = build(arch, 10, 5)
    path = tmp_path / "w.ecw"
    save_weights(m, path)
    m2 = load_weights(path)
    assert m2.arch_id == arch and m2.input_shape == m.input_shape
    x = (rng.random((100, 28, 28)) > 0.6).astype(np.uint8)
    np.testing.assert_array_equal(predict(m, x), predict(m2, x))
    assert path.read_bytes() == to_bytes(m2)


def test_weight_file_header_layout():
    m = build("mlp2", 10, 0)
    data = to_bytes(m)
    assert data[:4] == b"ECW1"
    assert int.from_bytes(data[4:8], "little") == len(m.layers)


def test_load_empty_file_is_bad_magic(tmp_path):
    p = tmp_path / "empty.ecw"
    p.write_bytes(b"")
    with pytest.raises(WeightFileError, match="magic"):
        load_weights(p)


@pytest.mark.parametrize("count", [0, 3, 8, 2**31])
def test_tampered_layer_count(count):
    data = bytearray(to_bytes(build("mlp2", 10, 0)))
    data[4:8] = count.to_bytes(4, "little")
    with pytest.raises(WeightFileError):
        load_weights(io.BytesIO(bytes(data)))


def test_truncated_weight_file():
    data = to_bytes(build("cnn2", 10, 0))
    for cut in (5, 9, 100, len(data) - 1):
        with pytest.raises(WeightFileError):
            load_weights(io.BytesIO(data[:cut]))


class _Split:
    def __init__(self, x, y):
        self.train_x, self.train_y = x, y


def test_training_is_deterministic_and_learns(rng):
    # two separable 8x8 blobs
    x = np.zeros((200, 8, 8), np.uint8)
    y = rng.integers(0, 2, 200)
    x[y == 0, :4] = 1
    x[y == 1, 4:] = 1
    noise = rng.random(x.shape) < 0.1
    x = np.where(noise, 1 - x, x).astype(np.uint8)
    split = _Split(x, y)
    cfg = TrainConfig(lr=0.05, epochs=3, batch_size=16, seed=9)
    models = []
    for _ in range(2):
        m = Model([Flatten((1, 8, 8)), Dense(64, 8), ReLU(), Dense(8, 2), Softmax(2)], (1, 8, 8))
        m.layers[1].init(np.random.default_rng(0))
        m.layers[3].init(np.random.default_rng(1))
        log = io.StringIO()
        history = train(m, split, cfg, log)
        models.append(m)
    assert to_bytes(models[0]) == to_bytes(models[1])
    assert history[-1][1] > 0.9
    lines = log.getvalue().splitlines()
    assert lines[0] == "epoch,train_acc,loss" and len(lines) == 4


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(lr=0)
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
