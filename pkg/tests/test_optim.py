import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hyperscat.networks import Linear, MatchingNet, init_params
from hyperscat.optim import (
    Adam,
    AdamState,
    NonFiniteLossError,
    TrainConfig,
    adam_step,
    train,
    write_loss_csv,
)
from hyperscat.tensor import Tensor


def scalar_adam(theta, grad_fn, steps, lr=1e-3, b1=0.9, b2=0.999, eps=1e-8):
    """Plain-float reference written straight from the update equations."""
    m = v = 0.0
    path = []
    for t in range(1, steps + 1):
        g = grad_fn(theta)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        theta = theta - lr * m_hat / (math.sqrt(v_hat) + eps)
        path.append(theta)
    return path


def adam_trajectory(theta0, steps):
    p = Tensor(np.array([theta0]), requires_grad=True)
    opt = Adam([p], lr=1e-3)
    path = []
    for _ in range(steps):
        opt.zero_grad()
        (p * p).sum().backward()
        opt.step()
        path.append(float(p.data[0]))
    return path


def test_first_step_closed_form():
    # m_hat = v_hat = 1 after one step of gradient 1, so theta = -lr / (1 + eps)
    p = Tensor(np.zeros(1))
    state = AdamState([np.zeros(1)], [np.zeros(1)])
    adam_step(state, [p], [np.ones(1)])
    assert p.data[0] == pytest.approx(-1e-3 / (1 + 1e-8), abs=1e-18)
    assert state.t == 1


def test_ten_step_trajectory_matches_scalar_reference():
    ours = adam_trajectory(1.0, 10)
    ref = scalar_adam(1.0, lambda th: 2 * th, 10)
    assert max(abs(a - b) for a, b in zip(ours, ref)) < 1e-12


def test_zero_gradient_leaves_parameters_unchanged():
    p = Tensor(np.array([0.5, -2.0]))
    state = AdamState([np.zeros(2)], [np.zeros(2)])
    for _ in range(20):
        adam_step(state, [p], [np.zeros(2)])
    np.testing.assert_array_equal(p.data, [0.5, -2.0])
    assert state.t == 20


def test_missing_gradient_raises():
    p = Tensor(np.zeros(2), requires_grad=True)
    with pytest.raises(ValueError):
        Adam([p]).step()


@settings(max_examples=40, deadline=None)
@given(st.floats(-10, 10), st.integers(1, 30))
def test_trajectory_matches_reference_anywhere(theta0, steps):
    ours = adam_trajectory(theta0, steps)
    ref = scalar_adam(theta0, lambda th: 2 * th, steps)
    assert max(abs(a - b) for a, b in zip(ours, ref)) < 1e-12


@settings(max_examples=40, deadline=None)
@given(st.floats(-1e3, 1e3).filter(lambda g: abs(g) > 1e-3))
def test_first_step_size_is_lr(g):
    # bias correction makes the very first step +-lr regardless of gradient scale
    p = Tensor(np.zeros(1))
    adam_step(AdamState([np.zeros(1)], [np.zeros(1)]), [p], [np.array([g])])
    assert abs(abs(p.data[0]) - 1e-3) < 1e-9


def test_stage_defaults():
    assert (TrainConfig.for_stage("matching").epochs, TrainConfig.for_stage("matching").loss) == (100, "l2")
    assert (TrainConfig.for_stage("inverse").epochs, TrainConfig.for_stage("inverse").loss) == (150, "l1")
    assert TrainConfig.for_stage("misr").epochs in (30, 60)
    assert TrainConfig.for_stage("misr").loss == "l2"
    assert TrainConfig.for_stage("inverse", "odd", epochs=None, lr=None).lr == 1e-3
    with pytest.raises(ValueError):
        TrainConfig.for_stage("bogus")


def test_train_converges_on_linear_toy():
    x = np.linspace(-1, 1, 64)[:, None]
    net = init_params(Linear(1, 1), 0)
    cfg = TrainConfig(stage="toy", epochs=300, batch_size=8, seed=0, loss="l2", lr=0.05)
    _, log = train(net, (x, 2 * x), cfg)
    assert log[-1][1] < 1e-3
    assert net.weight.data[0, 0] == pytest.approx(2.0, abs=0.05)


def test_train_is_deterministic():
    x = np.random.default_rng(0).standard_normal((20, 3))
    y = np.tanh(x[:, :2])
    cfg = TrainConfig(stage="matching", epochs=5, batch_size=4, seed=3)
    a, la = train(MatchingNet(3, 2, 8, seed=1), (x, y), cfg)
    b, lb = train(MatchingNet(3, 2, 8, seed=1), (x, y), cfg)
    assert la == lb
    for pa, pb in zip(a.parameters(), b.parameters()):
        np.testing.assert_array_equal(pa.data, pb.data)


def test_zero_epochs_returns_initial_net():
    net = MatchingNet(3, 2, 8, seed=1)
    before = [p.data.copy() for p in net.parameters()]
    _, log = train(net, (np.zeros((4, 3)), np.zeros((4, 2))), TrainConfig(epochs=0))
    assert log == []
    for p, b in zip(net.parameters(), before):
        np.testing.assert_array_equal(p.data, b)


def test_train_errors():
    with pytest.raises(ValueError):
        train(MatchingNet(3, 2, 4), (np.zeros((0, 3)), np.zeros((0, 2))), TrainConfig(epochs=1))
    x = np.full((4, 3), np.nan)
    with pytest.raises(NonFiniteLossError):
        train(MatchingNet(3, 2, 4), (x, np.zeros((4, 2))), TrainConfig(epochs=1))


def test_loss_csv(tmp_path):
    write_loss_csv([(1, 0.5), (2, 0.25)], tmp_path / "l.csv")
    assert (tmp_path / "l.csv").read_text() == "epoch,mean_loss\n1,0.5\n2,0.25\n"
