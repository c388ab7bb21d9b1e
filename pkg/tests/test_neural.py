"""Unit tests for MLP forward/gradients, Adam, and the training loop."""

import numpy as np
import numpy.testing as npt
import pytest

from closurelab.exceptions import DimMismatchError, NonFiniteLossError
from closurelab.neural import (
    AdamState,
    MlpModel,
    MlpSpec,
    TrainConfig,
    adam_step,
    forward,
    init_mlp,
    loss_grad,
    train,
)


def test_spec_param_count_and_validation():
    spec = MlpSpec(in_dim=3, out_dim=6, hidden=(2,), activation="relu")
    assert spec.n_params == 3 * 2 + 2 + 2 * 6 + 6
    with pytest.raises(ValueError):
        MlpSpec(in_dim=0, out_dim=1)
    with pytest.raises(ValueError):
        MlpSpec(in_dim=1, out_dim=1, activation="tanh")
    with pytest.raises(ValueError):
        MlpModel(spec=spec, params=np.zeros(3))
    with pytest.raises(ValueError):
        MlpModel(spec=spec, params=np.full(spec.n_params, np.nan))


def test_zero_weights_relu_gives_zero():
    spec = MlpSpec(in_dim=3, out_dim=2, hidden=(4,))
    model = MlpModel(spec=spec, params=np.zeros(spec.n_params))
    npt.assert_array_equal(forward(model, np.ones(3)), np.zeros(2))


def test_identity_linear_layer_echoes_input():
    spec = MlpSpec(in_dim=3, out_dim=3, hidden=())
    model = MlpModel(spec=spec, params=np.concatenate([np.eye(3).ravel(), np.zeros(3)]))
    x = np.array([1.5, -2.0, 0.25])
    npt.assert_array_equal(forward(model, x), x)


def test_forward_determinism_and_batching():
    model = init_mlp(MlpSpec(in_dim=4, out_dim=3, hidden=(8, 8), activation="silu"), seed=0)
    x = np.random.default_rng(1).normal(size=(10, 4))
    out1, out2 = forward(model, x), forward(model, x)
    npt.assert_array_equal(out1, out2)
    npt.assert_allclose(out1[3], forward(model, x[3]), rtol=1e-12)
    with pytest.raises(DimMismatchError):
        forward(model, np.ones(5))


def test_residual_adds_input_when_dims_match():
    spec = MlpSpec(in_dim=3, out_dim=3, hidden=(4,), residual=True)
    model = MlpModel(spec=spec, params=np.zeros(spec.n_params))
    x = np.array([0.5, -1.0, 2.0])
    npt.assert_array_equal(forward(model, x), x)
    # dims differ: the flag is inert
    spec2 = MlpSpec(in_dim=3, out_dim=2, hidden=(4,), residual=True)
    model2 = MlpModel(spec=spec2, params=np.zeros(spec2.n_params))
    npt.assert_array_equal(forward(model2, x), np.zeros(2))


def test_gradient_matches_normal_equations():
    # mean squared error of a purely linear model has a closed-form gradient
    rng = np.random.default_rng(2)
    x = rng.normal(size=(20, 3))
    y = rng.normal(size=(20, 2))
    spec = MlpSpec(in_dim=3, out_dim=2, hidden=())
    model = init_mlp(spec, seed=3)
    value, grad = loss_grad(model, x, lambda out: ((out - y) ** 2).mean())
    w = model.params[:6].reshape(3, 2)
    b = model.params[6:]
    resid = x @ w + b - y
    npt.assert_allclose(value, (resid**2).mean(), rtol=1e-12)
    npt.assert_allclose(grad[:6], (2.0 / resid.size) * (x.T @ resid).ravel(), rtol=1e-10)
    npt.assert_allclose(grad[6:], (2.0 / resid.size) * resid.sum(axis=0), rtol=1e-10)


def test_constant_loss_zero_gradient():
    model = init_mlp(MlpSpec(in_dim=2, out_dim=2, hidden=(3,)), seed=4)
    from closurelab.autodiff import Tensor

    value, grad = loss_grad(model, np.ones((4, 2)), lambda out: Tensor(5.0))
    assert value == 5.0
    npt.assert_array_equal(grad, np.zeros_like(model.params))


def _fd_param_grad(model, x, loss_value_fn, h=1e-5):
    base = model.params.copy()
    g = np.empty_like(base)
    for i in range(base.size):
        model.params = base.copy()
        model.params[i] += h
        hi = loss_value_fn(model, x)
        model.params = base.copy()
        model.params[i] -= h
        lo = loss_value_fn(model, x)
        g[i] = (hi - lo) / (2 * h)
    model.params = base
    return g


def test_loss_grad_matches_finite_differences():
    rng = np.random.default_rng(5)
    cases = [
        MlpSpec(2, 3, (4,), "silu", False),
        MlpSpec(3, 2, (5, 5), "silu", True),
        MlpSpec(3, 3, (4,), "relu", True),
        MlpSpec(4, 1, (8, 8, 8), "silu", False),
        MlpSpec(1, 1, (2,), "relu", False),
    ]
    for k, spec in enumerate(cases):
        model = init_mlp(spec, seed=10 + k)
        x = rng.normal(size=(6, spec.in_dim))
        y = rng.normal(size=(6, spec.out_dim))

        def loss_fn(out):
            return ((out - y) ** 2).mean()

        def loss_value(m, xb):
            return float(((forward(m, xb) - y) ** 2).mean())

        _, grad = loss_grad(model, x, loss_fn)
        fd = _fd_param_grad(model, x, loss_value)
        scale = max(1e-8, np.abs(fd).max())
        assert np.abs(grad - fd).max() / scale <= 1e-4, spec


def test_loss_grad_raises_on_nonfinite():
    model = init_mlp(MlpSpec(1, 1, ()), seed=0)
    with pytest.raises(NonFiniteLossError):
        loss_grad(model, np.ones((2, 1)), lambda out: (out * np.inf).sum())


def test_adam_zero_grad_is_identity():
    model = init_mlp(MlpSpec(2, 2, (3,)), seed=6)
    before = model.params.copy()
    state = AdamState(lr=0.1)
    adam_step(state, model, np.zeros_like(before))
    npt.assert_array_equal(model.params, before)
    assert state.step == 1


def test_adam_first_step_closed_form():
    model = init_mlp(MlpSpec(2, 2, (3,)), seed=7)
    before = model.params.copy()
    grad = np.random.default_rng(8).normal(size=before.shape)
    state = AdamState(lr=1e-2)
    adam_step(state, model, grad)
    expect = before - 1e-2 * grad / (np.abs(grad) + 1e-8)
    npt.assert_allclose(model.params, expect, rtol=1e-12)
    with pytest.raises(ValueError):
        AdamState(beta1=1.0)
    with pytest.raises(DimMismatchError):
        adam_step(state, model, np.zeros(3))


def test_adam_monotone_on_quadratic():
    # far from the optimum Adam moves at ~lr per step, monotonically
    target = np.full(4, 5.0)
    spec = MlpSpec(1, 4, ())
    model = MlpModel(spec=spec, params=np.zeros(spec.n_params))
    state = AdamState(lr=0.01)
    x = np.ones((1, 1))
    losses = []
    for _ in range(300):
        value, grad = loss_grad(model, x, lambda out: ((out - target) ** 2).sum())
        losses.append(value)
        adam_step(state, model, grad)
    assert all(b < a for a, b in zip(losses, losses[1:]))


class _Columns:
    """Minimal columnar dataset for the train loop."""

    def __init__(self, x, y):
        self.x, self.y = x, y

    def __len__(self):
        return len(self.x)


def _regression_batch(dataset, idx, rng):
    xb, yb = dataset.x[idx], dataset.y[idx]
    return xb, lambda out: ((out - yb) ** 2).mean()


def _make_regression(seed=9):
    rng = np.random.default_rng(seed)
    x = rng.uniform(-1, 1, size=(256, 1))
    return _Columns(x, 2.0 * x + 1.0)


def test_train_lr_zero_keeps_params():
    data = _make_regression()
    model = init_mlp(MlpSpec(1, 1, ()), seed=10)
    before = model.params.copy()
    _, history = train(model, data, _regression_batch, TrainConfig(epochs=1, batch_size=32, lr=0.0))
    npt.assert_array_equal(model.params, before)
    assert len(history) == 1


def test_train_linear_regression_recovers_line():
    data = _make_regression()
    model = init_mlp(MlpSpec(1, 1, ()), seed=11)
    model, history = train(
        model, data, _regression_batch, TrainConfig(epochs=200, batch_size=64, lr=0.02, seed=12)
    )
    npt.assert_allclose(model.params, [2.0, 1.0], atol=1e-2)
    assert history[-1] < history[0]


def test_train_reproducible_given_seed():
    data = _make_regression()
    cfg = TrainConfig(epochs=3, batch_size=32, lr=1e-2, seed=13)
    m1, h1 = train(init_mlp(MlpSpec(1, 1, (4,)), seed=14), data, _regression_batch, cfg)
    m2, h2 = train(init_mlp(MlpSpec(1, 1, (4,)), seed=14), data, _regression_batch, cfg)
    assert h1 == h2
    npt.assert_array_equal(m1.params, m2.params)


def test_train_aborts_with_history_on_nonfinite():
    data = _make_regression()

    calls = {"n": 0}

    def poisoned_batch(dataset, idx, rng):
        calls["n"] += 1
        xb, yb = dataset.x[idx], dataset.y[idx]
        if calls["n"] > 8:
            return xb, lambda out: (out * np.nan).sum()
        return xb, lambda out: ((out - yb) ** 2).mean()

    model = init_mlp(MlpSpec(1, 1, ()), seed=15)
    with pytest.raises(NonFiniteLossError) as exc:
        train(model, data, poisoned_batch, TrainConfig(epochs=4, batch_size=64, lr=1e-2))
    assert len(exc.value.history) >= 1

    with pytest.raises(ValueError):
        train(model, _Columns(np.zeros((0, 1)), np.zeros((0, 1))), _regression_batch, TrainConfig())


def test_checkpoint_roundtrip():
    model = init_mlp(MlpSpec(3, 6, (2,), "relu"), seed=16)
    clone = MlpModel.from_dict(model.to_dict())
    assert clone.spec == model.spec
    npt.assert_array_equal(clone.params, model.params)
    with pytest.raises(ValueError):
        MlpModel.from_dict({"version": 99, "spec": model.spec.to_dict(), "params": []})
