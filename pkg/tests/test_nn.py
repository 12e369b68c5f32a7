import numpy as np
import pytest

from helpers import finite_diff_grads, max_rel_error
from sessionrl import nn
from sessionrl.errors import ConfigError, TrainingError, UsageError


def make_net(widths, head_names, seed=0, hidden_act="sigmoid", head_act="sigmoid"):
    rng = np.random.default_rng(seed)
    return nn.MlpNet.build(widths[0], list(widths[1:]), head_names, rng, hidden_act, head_act)


def test_forward_identity_net():
    layer = nn.DenseLayer(np.eye(2), np.zeros(2), "identity")
    net = nn.MlpNet([layer], ("a", "b"))
    out, _ = nn.forward(net, np.array([1.0, 2.0]))
    assert np.array_equal(out, [1.0, 2.0])


def test_forward_sigmoid_zero_weight():
    layer = nn.DenseLayer(np.zeros((1, 3)), np.zeros(1), "sigmoid")
    net = nn.MlpNet([layer], ("p",))
    out, _ = nn.forward(net, np.array([5.0, -2.0, 0.3]))
    assert out[0] == 0.5


def test_forward_two_layer_relu_matches_hand_computation():
    w1 = np.array([[1.0, -2.0], [0.5, 0.25], [-1.0, 1.0]])
    b1 = np.array([0.1, -0.2, 0.0])
    w2 = np.array([[2.0, -1.0, 0.5]])
    b2 = np.array([0.3])
    net = nn.MlpNet(
        [nn.DenseLayer(w1, b1, "relu"), nn.DenseLayer(w2, b2, "identity")], ("y",)
    )
    x = np.array([0.7, -0.4])
    hidden = np.maximum(w1 @ x + b1, 0.0)
    expected = w2 @ hidden + b2
    out, _ = nn.forward(net, x)
    assert np.allclose(out, expected, atol=0, rtol=0)


def test_forward_dimension_mismatch():
    net = make_net((3, 2), ("a", "b"))
    with pytest.raises(ConfigError):
        nn.forward(net, np.zeros(4))


def test_forward_is_pure():
    net = make_net((4, 6, 2), ("a", "b"), seed=3)
    x = np.random.default_rng(1).normal(size=4)
    out1, _ = nn.forward(net, x)
    out2, _ = nn.forward(net, x)
    assert np.array_equal(out1, out2)


def test_backward_zero_grad_gives_zero():
    net = make_net((3, 5, 2), ("a", "b"), seed=1)
    _, tape = nn.forward(net, np.array([0.3, -0.1, 0.8]))
    grads, dx = nn.backward(net, tape, np.zeros(2))
    assert all(np.all(g == 0.0) for g in grads)
    assert np.all(dx == 0.0)


def test_backward_scalar_linear():
    net = nn.MlpNet([nn.DenseLayer(np.array([[2.5]]), np.zeros(1), "identity")], ("y",))
    x = np.array([1.7])
    _, tape = nn.forward(net, x)
    grads, _ = nn.backward(net, tape, np.array([3.0]))
    assert grads[0][0, 0] == x[0] * 3.0


def test_backward_stale_tape_rejected():
    net_a = make_net((3, 2), ("a", "b"), seed=1)
    net_b = make_net((3, 2), ("a", "b"), seed=2)
    _, tape = nn.forward(net_a, np.zeros(3))
    with pytest.raises(UsageError):
        nn.backward(net_b, tape, np.zeros(2))


def test_gradient_check_three_layer_net():
    rng = np.random.default_rng(7)
    net = make_net((5, 8, 6, 3), ("a", "b", "c"), seed=7)
    x = rng.normal(size=5)
    target = rng.random(3)

    def loss_fn(params):
        net.set_params(params)
        out, _ = nn.forward(net, x)
        return float(np.sum((out - target) ** 2))

    params = [p.copy() for p in net.params()]
    net.set_params(params)
    out, tape = nn.forward(net, x)
    analytic, _ = nn.backward(net, tape, 2.0 * (out - target))
    numeric = finite_diff_grads(loss_fn, [p.copy() for p in params])
    assert max_rel_error(analytic, numeric) <= 1e-4


def test_param_count_invariant_under_updates():
    net = make_net((4, 6, 2), ("a", "b"), seed=5)
    n_params = sum(p.size for p in net.params())
    state = nn.AdamState.init_like(net.params(), 1e-3)
    grads = [np.ones_like(p) for p in net.params()]
    new_params, state = nn.adam_step(net.params(), grads, state)
    net.set_params(new_params)
    assert sum(p.size for p in net.params()) == n_params


def test_adam_zero_gradient_keeps_params():
    params = [np.array([1.0, -2.0]), np.array([[0.5]])]
    state = nn.AdamState.init_like(params, 1e-3)
    new_params, new_state = nn.adam_step(params, [np.zeros(2), np.zeros((1, 1))], state)
    assert all(np.array_equal(a, b) for a, b in zip(params, new_params))
    assert new_state.step_count == 1


def test_adam_single_step_closed_form():
    params = [np.array([0.0])]
    state = nn.AdamState.init_like(params, 1e-3)
    new_params, _ = nn.adam_step(params, [np.array([1.0])], state)
    # bias-corrected m_hat = v_hat = 1 after one step with g = 1
    expected = -1e-3 * 1.0 / (1.0 + 1e-8)
    assert abs(new_params[0][0] - expected) < 1e-15


def test_adam_is_deterministic_and_pure():
    params = [np.array([1.0, 2.0])]
    grads = [np.array([0.3, -0.4])]
    state = nn.AdamState.init_like(params, 1e-2)
    out1, s1 = nn.adam_step(params, grads, state)
    out2, s2 = nn.adam_step(params, grads, state)
    assert np.array_equal(out1[0], out2[0])
    assert np.array_equal(s1.first_moment[0], s2.first_moment[0])
    assert params[0][0] == 1.0  # inputs untouched


def test_adam_rejects_non_finite_gradient():
    params = [np.array([1.0])]
    state = nn.AdamState.init_like(params, 1e-3)
    with pytest.raises(TrainingError):
        nn.adam_step(params, [np.array([np.nan])], state)


def test_bce_half_prediction():
    loss, _ = nn.bce_loss(np.array([0.5]), np.array([1.0]))
    assert abs(loss - np.log(2.0)) < 1e-12


def test_bce_perfect_prediction_near_zero():
    loss, _ = nn.bce_loss(np.array([1.0, 0.0]), np.array([1.0, 0.0]))
    assert loss < 1e-5


def test_bce_gradient_matches_finite_difference():
    rng = np.random.default_rng(11)
    pred = rng.uniform(0.05, 0.95, size=6)
    label = (rng.random(6) < 0.5).astype(float)
    _, grad = nn.bce_loss(pred, label)

    def loss_fn(params):
        return nn.bce_loss(params[0], label)[0]

    numeric = finite_diff_grads(loss_fn, [pred.copy()])
    assert max_rel_error([grad], numeric) <= 1e-6


def test_bce_length_mismatch():
    with pytest.raises(UsageError):
        nn.bce_loss(np.array([0.5, 0.5]), np.array([1.0]))


def test_weight_init_bounds():
    rng = np.random.default_rng(0)
    layer = nn.DenseLayer.init(30, 20, "relu", rng)
    limit = np.sqrt(6.0 / 50)
    assert np.all(np.abs(layer.weights) <= limit)
    assert np.all(layer.bias == 0.0)


def test_checkpoint_roundtrip(tmp_path):
    net = make_net((4, 7, 3), ("x", "y", "z"), seed=9)
    path = tmp_path / "net.npz"
    nn.save_checkpoint(path, nn.net_meta(net), nn.net_to_arrays(net, "net"))
    meta, arrays = nn.load_checkpoint(path)
    restored = nn.net_from_arrays(meta, arrays, "net")
    assert restored.head_names == net.head_names
    for a, b in zip(net.params(), restored.params()):
        assert np.array_equal(a, b)


def test_checkpoint_rejects_unknown_version(tmp_path):
    net = make_net((2, 2), ("a", "b"))
    path = tmp_path / "net.npz"
    meta = nn.net_meta(net)
    nn.save_checkpoint(path, meta, nn.net_to_arrays(net, "net"))
    loaded_meta, arrays = nn.load_checkpoint(path)
    # rewrite with a bogus version marker
    loaded_meta["format_version"] = 999
    import json

    payload = {"__meta__": np.array(json.dumps(loaded_meta))}
    payload.update(arrays)
    np.savez(path, **payload)
    with pytest.raises(ConfigError):
        nn.load_checkpoint(path)


def test_mlp_rejects_bad_chain():
    l1 = nn.DenseLayer(np.zeros((3, 2)), np.zeros(3), "relu")
    l2 = nn.DenseLayer(np.zeros((2, 4)), np.zeros(2), "identity")
    with pytest.raises(ConfigError):
        nn.MlpNet([l1, l2], ("a", "b"))
