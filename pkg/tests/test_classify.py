import math

import numpy as np
import pytest

import oracles
from boxtemplates.classify import (MlpModel, TrainConfig, cloud_features, dropout_masks,
                                   featurize, forward, gradient_check, init_model,
                                   loss_and_grads, predict, softmax, top_k, train)
from boxtemplates.errors import (BadConfig, BadK, BadLabels, DimensionMismatch, EmptyDataset,
                                 ParseError)
from boxtemplates.geometry import DistanceGrid


def grid_of(values, trunc=0.25):
    return DistanceGrid(values.shape, (0, 0, 0), 0.1, trunc, values)


def test_featurize_examples():
    f = featurize(grid_of(np.full((32, 32, 32), 0.25)))
    assert f.shape == (512,) and np.all(f == 1)
    rng = np.random.default_rng(0)
    v = rng.uniform(0, 0.25, size=(32, 32, 32))
    assert np.array_equal(featurize(grid_of(v)), oracles.window_max_pool(v, 8).ravel() / 0.25)
    # uneven sizes use near-equal windows
    odd = rng.uniform(0, 0.25, size=(10, 9, 12))
    assert featurize(grid_of(odd)).shape == (512,)
    assert featurize(grid_of(odd)).max() == odd.max() / 0.25


def test_cloud_features_range(by_name):
    from boxtemplates.synthetic import make_shape
    f = cloud_features(make_shape(by_name["lamp"], np.random.default_rng(1)).cloud)
    assert f.shape == (512,) and f.min() >= 0 and f.max() <= 1 and f.min() < 0.2


@pytest.mark.parametrize("seed", range(10))
def test_gradients_match_finite_differences(seed):
    rng = np.random.default_rng(seed)
    sizes = [int(rng.integers(2, 9)) for _ in range(int(rng.integers(2, 5)))]
    model = init_model(sizes, seed=seed)
    X = rng.normal(size=(int(rng.integers(1, 6)), sizes[0]))
    y = rng.integers(sizes[-1], size=len(X))
    masks = dropout_masks(model, len(X), rng)
    assert gradient_check(model, X, y, masks) < 1e-4
    assert gradient_check(model, X, y) < 1e-4


def test_predict_properties():
    model = init_model([512, 16, 5], seed=1)
    x = np.random.default_rng(2).uniform(size=512)
    p = predict(model, x)
    assert p.shape == (5,) and np.all(p >= 0) and abs(p.sum() - 1) < 1e-9
    assert np.array_equal(p, predict(model, x))
    zero = MlpModel(model.layer_sizes, [np.zeros_like(W) for W in model.weights],
                    [np.zeros_like(b) for b in model.biases])
    assert np.allclose(predict(zero, x), 0.2, atol=1e-15)
    with pytest.raises(DimensionMismatch):
        predict(model, np.zeros(10))
    grid = grid_of(np.full((32, 32, 32), 0.25))
    assert np.array_equal(predict(model, grid), predict(model, np.ones(512)))


def test_softmax_shift_invariant():
    z = np.random.default_rng(3).normal(size=(4, 7)) * 20
    assert np.allclose(softmax(z), softmax(z + 123.4), atol=1e-9, rtol=0)
    assert np.allclose(softmax(z).sum(axis=1), 1, atol=1e-12)


def test_top_k_examples():
    assert top_k([0.1, 0.7, 0.2], 2) == [1, 2]
    assert top_k([0.25] * 4, 3) == [0, 1, 2]
    assert sorted(top_k([0.3, 0.1, 0.6], 3)) == [0, 1, 2]
    with pytest.raises(BadK):
        top_k([0.5, 0.5], 3)
    with pytest.raises(BadK):
        top_k([0.5, 0.5], 0)


def toy_set(rng, n=100, dim=20):
    X = rng.normal(size=(n, dim))
    y = (X @ rng.normal(size=dim) > 0).astype(int)
    return list(zip(X, y))


def test_toy_separable_training():
    data = toy_set(np.random.default_rng(4))
    model, hist = train(data, TrainConfig(epochs=50, hidden=(32, 16), learning_rate=0.01))
    assert hist.accuracy[-1] >= 0.99
    assert len(hist.loss) == 50


def test_first_batch_loss_near_log_classes():
    rng = np.random.default_rng(5)
    data = [(rng.uniform(size=512), int(rng.integers(12))) for _ in range(64)]
    _, hist = train(data, TrainConfig(epochs=1), n_classes=12)
    assert hist.first_batch_loss == pytest.approx(math.log(12), abs=0.25)


def test_zero_learning_rate_keeps_weights():
    data = toy_set(np.random.default_rng(6))
    init = init_model([20, 8, 2], seed=7)
    model, _ = train(data, TrainConfig(learning_rate=0, epochs=3, hidden=(8,)), model=init)
    assert all(np.array_equal(a, b) for a, b in zip(model.weights, init.weights))
    assert all(np.array_equal(a, b) for a, b in zip(model.biases, init.biases))


def test_training_is_deterministic():
    data = toy_set(np.random.default_rng(8), n=40)
    cfg = TrainConfig(epochs=5, hidden=(16,), seed=3)
    a, ha = train(data, cfg)
    b, hb = train(data, cfg)
    assert a.dumps() == b.dumps() and ha.loss == hb.loss


def test_augmentation_callback_is_used():
    rng = np.random.default_rng(9)
    data = toy_set(rng, n=20)
    calls = []

    def augment(epoch, r):
        calls.append(epoch)
        return toy_set(r, n=20)

    train(data, TrainConfig(epochs=3, hidden=(8,), augmentation=True), augment=augment)
    assert calls == [0, 1, 2]


def test_train_errors():
    with pytest.raises(EmptyDataset):
        train([])
    with pytest.raises(BadLabels):
        train([(np.zeros(3), 5)], n_classes=2)
    with pytest.raises(BadLabels):
        train([(np.zeros(3), -1)])
    with pytest.raises(BadConfig):
        TrainConfig(batch_size=0)
    with pytest.raises(BadConfig):
        TrainConfig(learning_rate=-1)


def test_inverted_dropout_keeps_expectation():
    model = init_model([4, 2000, 3], seed=0)
    masks = dropout_masks(model, 50, np.random.default_rng(0))
    assert masks[0].shape == (50, 2000)
    assert masks[0].mean() == pytest.approx(1.0, abs=0.02)
    assert set(np.unique(masks[0])) <= {0.0, 1.25}


def test_model_round_trip():
    model = init_model([6, 5, 3], seed=2)
    back = MlpModel.loads(model.dumps())
    assert back.layer_sizes == model.layer_sizes
    assert all(np.array_equal(a, b) for a, b in zip(back.weights, model.weights))
    x = np.arange(6.0)
    assert np.array_equal(forward(back, x)[0], forward(model, x)[0])
    with pytest.raises(ParseError):
        MlpModel.loads("[]")
    with pytest.raises(DimensionMismatch):
        MlpModel((3, 2), [np.zeros((2, 2))], [np.zeros(2)])


def test_loss_and_grads_shapes():
    model = init_model([3, 4, 2], seed=0)
    loss, dW, db = loss_and_grads(model, np.ones((5, 3)), [0, 1, 0, 1, 1])
    assert loss > 0 and [w.shape for w in dW] == [(3, 4), (4, 2)]
    assert [b.shape for b in db] == [(4,), (2,)]
