import numpy as np
import pytest

from vbtta.errors import DegenerateInputError, DomainError
from vbtta.mathstats import Rng
from vbtta.predictor import (
    Dataset, TrainConfig, forward, init_mlp, input_gradient, loss_and_gradients, metrics,
    predict_labels, softmax, train,
)
from conftest import linear_model


def test_forward_single_and_batch(tiny_model):
    X = Rng(1).generator.standard_normal((4, 3))
    batch = forward(tiny_model, X)
    assert batch.shape == (4, 1)
    assert np.allclose(forward(tiny_model, X[2]), batch[2])


def test_forward_rejects_wrong_dimension(tiny_model):
    with pytest.raises(DomainError):
        forward(tiny_model, np.zeros(4))


def test_input_gradient_matches_finite_differences(tiny_model):
    x = np.array([0.3, -0.7, 1.1])
    J = input_gradient(tiny_model, x)
    assert J.shape == (1, 3)
    h = 1e-6
    fd = np.array([(forward(tiny_model, x + h * e) - forward(tiny_model, x - h * e))[0] / (2 * h)
                   for e in np.eye(3)])
    assert np.allclose(J[0], fd, atol=1e-5)


def test_linear_model_gradient_is_its_coefficients():
    model = linear_model([2.0, -1.0], bias=0.5)
    assert forward(model, np.array([1.0, 1.0]))[0] == pytest.approx(1.5)
    assert np.allclose(input_gradient(model, np.zeros(2)), [[2.0, -1.0]])


def test_parameter_gradients_match_finite_differences(tiny_model):
    gen = Rng(2).generator
    X = gen.standard_normal((5, 3))
    y = gen.standard_normal(5)
    _, grads = loss_and_gradients(tiny_model, X, y)
    params = tiny_model.parameters()
    h = 1e-6
    for p, g in zip(params, grads):
        idx = (0,) * p.ndim
        saved = p[idx]
        p[idx] = saved + h
        up, _ = loss_and_gradients(tiny_model, X, y)
        p[idx] = saved - h
        down, _ = loss_and_gradients(tiny_model, X, y)
        p[idx] = saved
        assert g[idx] == pytest.approx((up - down) / (2 * h), abs=1e-5)


def test_cross_entropy_gradients_match_finite_differences():
    model = init_mlp((2, 4, 3), Rng(3), head="scores")
    X = Rng(4).generator.standard_normal((6, 2))
    y = np.array([0, 1, 2, 2, 1, 0])
    _, grads = loss_and_gradients(model, X, y)
    h = 1e-6
    W = model.weights[1]
    W[1, 2] += h
    up, _ = loss_and_gradients(model, X, y)
    W[1, 2] -= 2 * h
    down, _ = loss_and_gradients(model, X, y)
    W[1, 2] += h
    assert grads[2][1, 2] == pytest.approx((up - down) / (2 * h), abs=1e-5)


def test_softmax_rows_sum_to_one():
    p = softmax(np.array([[1000.0, 1000.0], [0.0, np.log(3.0)]]))
    assert np.allclose(p, [[0.5, 0.5], [0.25, 0.75]])


def test_training_fits_a_linear_target():
    gen = Rng(5).generator
    X = gen.uniform(-1.0, 1.0, size=(200, 2))
    y = X @ np.array([1.5, -0.5]) + 0.2
    dataset = Dataset(X, tuple(y[:, None]))
    history = []
    model = train(dataset, init_mlp((2, 16, 1), Rng(6)), TrainConfig(learning_rate=0.01, epochs=150), history=history)
    assert len(history) == 150
    assert history[-1] < 0.1 * history[0]
    assert metrics(predict_labels(model, X), y)["mse"] < 0.01


def test_training_leaves_initial_model_untouched(tiny_model):
    before = [p.copy() for p in tiny_model.parameters()]
    dataset = Dataset(np.ones((3, 3)), ([1.0], [2.0, 2.5], [0.0]))
    train(dataset, tiny_model, TrainConfig(epochs=2))
    assert all(np.array_equal(a, b) for a, b in zip(before, tiny_model.parameters()))


def test_dataset_flattens_label_sets():
    dataset = Dataset(np.array([[0.0], [1.0]]), ([1.0, 2.0, 3.0], [4.0]))
    X, y = dataset.flatten()
    assert X[:, 0].tolist() == [0.0, 0.0, 0.0, 1.0]
    assert y.tolist() == [1.0, 2.0, 3.0, 4.0]
    assert dataset.first_labels().tolist() == [1.0, 4.0]
    assert len(dataset.subset([1])) == 1


def test_dataset_validation():
    with pytest.raises(DomainError):
        Dataset(np.zeros((2, 1)), ([1.0],))
    with pytest.raises(DomainError):
        Dataset(np.zeros((1, 1)), ([],))
    with pytest.raises(DomainError):
        Dataset(np.zeros((1, 1)), ([3],), task="classification", n_classes=3)


def test_metrics():
    m = metrics([1.0, 2.0, 4.0], [1.0, 3.0, 2.0])
    assert m["mse"] == pytest.approx(5.0 / 3.0)
    assert m["mae"] == pytest.approx(1.0)
    assert m["accuracy"] == pytest.approx(1.0 / 3.0)
    with pytest.raises(DegenerateInputError):
        metrics([], [])


def test_zero_model_outputs_zero():
    model = linear_model([0.0, 0.0, 0.0])
    assert forward(model, np.array([3.0, -2.0, 1.0]))[0] == 0.0


def test_dead_rectifiers_give_zero_jacobian():
    model = init_mlp((2, 4, 1), Rng(8))
    model.biases[0][:] = -100.0
    assert np.array_equal(input_gradient(model, np.array([0.5, -0.5])), np.zeros((1, 2)))


def test_learned_slope_of_a_linear_law():
    X = np.linspace(-1.0, 1.0, 500)[:, None]
    dataset = Dataset(X, tuple(2.0 * X))
    model = train(dataset, linear_model([0.0]), TrainConfig(learning_rate=0.01, epochs=200))
    assert model.weights[0][0, 0] == pytest.approx(2.0, abs=0.05)


def test_zero_learning_rate_keeps_parameters(tiny_model):
    dataset = Dataset(np.ones((4, 3)), ([1.0], [1.0], [2.0], [0.0]))
    trained = train(dataset, tiny_model, TrainConfig(learning_rate=0.0, epochs=3))
    assert all(np.array_equal(a, b) for a, b in zip(trained.parameters(), tiny_model.parameters()))


@pytest.mark.parametrize("predictions, labels, expected", [
    ([0.0, 2.0], [1.0, 0.0], {"mae": 1.5, "mse": 2.5}),
    ([0, 1, 1], [0, 1, 2], {"accuracy": 2.0 / 3.0}),
    ([1.0, 2.0], [1.0, 2.0], {"mse": 0.0, "mae": 0.0, "accuracy": 1.0}),
])
def test_metric_values(predictions, labels, expected):
    m = metrics(predictions, labels)
    for name, value in expected.items():
        assert m[name] == pytest.approx(value)
