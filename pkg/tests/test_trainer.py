import numpy as np
import pytest

from noisebound.linalg import RngStream
from noisebound.network import LabeledExample, forward, init_network, margin_loss
from noisebound.trainer import (
    AdamState,
    TrainConfig,
    TrainingDiverged,
    adam_step,
    margin_accuracy,
    train,
)


def blob_data(n=64, sep=8.0, seed=3):
    """Two well-separated Gaussian blobs in the plane."""
    rng = RngStream(seed, 1)
    out = []
    for i in range(n):
        y = i % 2
        center = np.array([sep, 0.0]) if y == 0 else np.array([0.0, sep])
        out.append(LabeledExample(center + rng.normals(2), y))
    return out


def small_net(seed=0, dims=(2, 8, 2)):
    return init_network(dims, rng=RngStream(seed))


# ---------------------------------------------------------------- config

def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(optimizer="rmsprop")
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=0.0)
    with pytest.raises(ValueError):
        TrainConfig(stop_fraction=0.0)
    with pytest.raises(ValueError):
        TrainConfig(stop_margin=-1.0)


# ---------------------------------------------------------------- training

def test_train_separable_blobs_converges():
    data = blob_data()
    cfg = TrainConfig(learning_rate=0.1, batch_size=16, stop_fraction=0.99,
                      stop_margin=1.0, max_epochs=500, seed=1)
    res = train(small_net(), data, cfg)
    assert res.converged
    assert res.final_margin_accuracy >= 0.99
    assert res.epochs_run <= 500


def test_train_zero_epochs_returns_initial_params():
    p = small_net()
    res = train(p, blob_data(n=8), TrainConfig(max_epochs=0, batch_size=4))
    assert res.epochs_run == 0 and not res.converged
    assert all(np.array_equal(a, b) for a, b in zip(res.params.weights, p.weights))


def test_train_deterministic_across_runs():
    data = blob_data()
    cfg = TrainConfig(learning_rate=0.05, batch_size=8, stop_fraction=1.0,
                      stop_margin=0.5, max_epochs=5, seed=7)
    r1 = train(small_net(5), data, cfg)
    r2 = train(small_net(5), data, cfg)
    assert r1.epochs_run == r2.epochs_run
    assert r1.final_margin_accuracy == r2.final_margin_accuracy
    for a, b in zip(r1.params.weights, r2.params.weights):
        assert np.array_equal(a, b)


def test_train_preserves_init_snapshot():
    p = small_net(9)
    res = train(p, blob_data(), TrainConfig(max_epochs=3, batch_size=8, stop_margin=0.5))
    for z0, z1 in zip(p.init_snapshot, res.params.init_snapshot):
        assert np.array_equal(z0, z1)
    # and the trained weights actually moved
    assert any(not np.array_equal(w, z) for w, z in zip(res.params.weights, res.params.init_snapshot))


def test_train_single_sgd_step_is_minus_lr_grad():
    from noisebound.network import grad_cross_entropy

    p = small_net(11)
    data = [blob_data(n=1)[0]]
    g = grad_cross_entropy(p, data)
    cfg = TrainConfig(learning_rate=0.25, batch_size=1, max_epochs=1,
                      stop_fraction=1.0, stop_margin=1e9)
    res = train(p, data, cfg)
    for w0, gd, w1 in zip(p.weights, g, res.params.weights):
        assert np.allclose(w1, w0 - 0.25 * gd, rtol=1e-14, atol=0)


def test_train_divergence_diagnostic():
    # a contradictorily-labeled duplicate keeps the gradient alive forever,
    # so the absurd learning rate must blow the weights up
    x = np.array([1.0, -2.0])
    data = blob_data(n=14, sep=100.0) + [LabeledExample(x, 0), LabeledExample(x, 1)]
    cfg = TrainConfig(learning_rate=1e9, batch_size=4, max_epochs=50, stop_margin=5.0,
                      stop_fraction=1.0)
    with np.errstate(all="ignore"), pytest.raises(TrainingDiverged, match=r"epoch \d+.*1000000000"):
        train(small_net(), data, cfg)


def test_train_rejects_oversized_batch():
    with pytest.raises(ValueError, match="batch_size"):
        train(small_net(), blob_data(n=4), TrainConfig(batch_size=8))


# ---------------------------------------------------------------- adam

def test_adam_zero_gradient_keeps_parameters():
    st = AdamState.fresh([np.ones((2, 2))])
    st2 = adam_step(st, [np.zeros((2, 2))], lr=0.1)
    assert np.array_equal(st2.weights[0], st.weights[0])
    assert st2.t == 1


def test_adam_first_step_is_signed_lr():
    g = np.array([[3.0, -0.5]])
    st = adam_step(AdamState.fresh([np.zeros((1, 2))]), [g], lr=0.01)
    # bias-corrected first step: -lr * g/(|g| + eps') ~= -lr*sign(g)
    assert np.allclose(st.weights[0], -0.01 * np.sign(g), rtol=1e-6)


def test_adam_constant_gradient_step_approaches_lr():
    st = AdamState.fresh([np.zeros((1, 1))])
    g = [np.array([[2.0]])]
    prev = st.weights[0][0, 0]
    for _ in range(200):
        st = adam_step(st, g, lr=0.001)
    step = prev - st.weights[0][0, 0]
    assert step / 200 == pytest.approx(0.001, rel=0.01)


def test_adam_shape_mismatch_rejected():
    st = AdamState.fresh([np.zeros((2, 2))])
    with pytest.raises(ValueError):
        adam_step(st, [np.zeros((3, 2))], lr=0.1)


def test_train_with_adam_runs_and_converges():
    data = blob_data()
    cfg = TrainConfig(optimizer="adam", learning_rate=0.05, batch_size=16,
                      stop_fraction=0.99, stop_margin=0.5, max_epochs=300, seed=2)
    res = train(small_net(2), data, cfg)
    assert res.converged


# ---------------------------------------------------------------- margin accuracy

def test_margin_accuracy_zero_net_tie_convention():
    p = small_net()
    zeroed = p.with_weights([np.zeros_like(w) for w in p.weights])
    data = blob_data(n=10)
    assert margin_accuracy(zeroed, data, 0.0) == 1.0  # margin 0 >= 0


def test_margin_accuracy_huge_gamma_is_zero():
    res = margin_accuracy(small_net(), blob_data(n=10), 1e18)
    assert res == 0.0


def test_margin_accuracy_matches_pointwise_losses():
    p = small_net(13)
    data = blob_data(n=20)
    gamma = 0.3
    losses = [margin_loss(forward(p, ex.x), ex.y, gamma) for ex in data]
    assert margin_accuracy(p, data, gamma) == pytest.approx(1.0 - np.mean(losses))
