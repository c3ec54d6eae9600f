"""Network layers, gradients, the optimizer and model persistence."""

import math

import numpy as np
import pytest

from cellforest.cnn import (
    AdamState,
    CnnModel,
    DatasetError,
    TrainConfig,
    adam_step,
    backward,
    conv3d_forward,
    cross_entropy,
    expected_shapes,
    forward,
    init_model,
    load_model,
    loss_and_grads,
    maxpool3d_backward,
    maxpool3d_forward,
    mean_cross_entropy,
    predict_probs,
    save_model,
    softmax,
    train,
)

from oracles import conv3d_reference, finite_difference_grad, maxpool_reference


# ---------------------------------------------------------------------------
# layer forwards against loop references


@pytest.mark.parametrize("kernel", [3, 5])
def test_conv_matches_loop_reference(kernel):
    rng = np.random.default_rng(1)
    x = rng.standard_normal((2, 6, 6, 6, 2))
    w = rng.standard_normal((kernel, kernel, kernel, 2, 3))
    b = rng.standard_normal(3)
    got = conv3d_forward(x, w, b)
    for n in range(2):
        np.testing.assert_allclose(got[n], conv3d_reference(x[n], w, b), atol=1e-12)


def test_conv_identity_kernel_passes_input_through():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((1, 4, 4, 4, 1))
    w = np.zeros((3, 3, 3, 1, 1))
    w[1, 1, 1, 0, 0] = 1.0
    out = conv3d_forward(x, w, np.zeros(1))
    np.testing.assert_allclose(out, x, atol=0)


def test_maxpool_matches_loop_reference():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((2, 4, 6, 8, 3))
    got, _ = maxpool3d_forward(x)
    for n in range(2):
        np.testing.assert_allclose(got[n], maxpool_reference(x[n]), atol=0)


def test_maxpool_ties_route_to_first_position():
    # a constant block: the winner index must be the (0,0,0) corner, and
    # the backward pass must put the whole gradient there
    x = np.ones((1, 2, 2, 2, 1))
    y, idx = maxpool3d_forward(x)
    assert y.shape == (1, 1, 1, 1, 1)
    assert idx.item() == 0
    g = maxpool3d_backward(np.full((1, 1, 1, 1, 1), 5.0), idx, x.shape)
    assert g[0, 0, 0, 0, 0] == 5.0
    assert g.sum() == 5.0


def test_maxpool_backward_routes_to_argmax():
    rng = np.random.default_rng(4)
    x = rng.standard_normal((1, 4, 4, 4, 2))
    y, idx = maxpool3d_forward(x)
    dy = rng.standard_normal(y.shape)
    g = maxpool3d_backward(dy, idx, x.shape)
    # gradient is nonzero exactly at pool winners and sums preserve dy
    assert np.count_nonzero(g) == dy.size
    np.testing.assert_allclose(g.sum(), dy.sum(), atol=1e-12)
    # masking everything except the winners must leave the pool output intact
    masked = np.where(g != 0, x, -np.inf)
    y2, _ = maxpool3d_forward(masked)
    np.testing.assert_array_equal(y2, y)
    np.testing.assert_allclose((g * x).sum(), (dy * y).sum(), atol=1e-12)


# ---------------------------------------------------------------------------
# softmax / cross-entropy


def test_softmax_known_ratios():
    logits = np.log(np.array([[1.0, 2.0, 7.0]]))
    np.testing.assert_allclose(softmax(logits), [[0.1, 0.2, 0.7]], atol=1e-12)


def test_softmax_rows_sum_to_one_and_positive():
    rng = np.random.default_rng(5)
    p = softmax(rng.standard_normal((40, 3)) * 10)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)
    assert np.all(p > 0)


def test_softmax_shift_invariant_and_overflow_safe():
    logits = np.array([[1.0, 2.0, 3.0]])
    np.testing.assert_allclose(softmax(logits), softmax(logits + 1e4), atol=1e-12)
    huge = softmax(np.array([[1e5, 0.0, -1e5]]))
    assert np.isfinite(huge).all()
    np.testing.assert_allclose(huge[0, 0], 1.0, atol=1e-12)


def test_cross_entropy_matches_log_softmax():
    rng = np.random.default_rng(6)
    logits = rng.standard_normal((8, 3)) * 3
    classes = rng.integers(0, 3, size=8)
    loss, dlogits = cross_entropy(logits, classes)
    expect = -np.mean(np.log(softmax(logits)[np.arange(8), classes]))
    assert loss == pytest.approx(expect, abs=1e-12)
    onehot = np.zeros((8, 3))
    onehot[np.arange(8), classes] = 1.0
    np.testing.assert_allclose(dlogits, (softmax(logits) - onehot) / 8, atol=1e-12)


def test_cross_entropy_gradient_finite_difference():
    rng = np.random.default_rng(7)
    logits = rng.standard_normal((4, 3))
    classes = np.array([0, 2, 1, 1])
    _, dlogits = cross_entropy(logits, classes)
    fd = finite_difference_grad(lambda: cross_entropy(logits, classes)[0], logits)
    np.testing.assert_allclose(dlogits, fd, atol=1e-9)


# ---------------------------------------------------------------------------
# model construction


def test_expected_shapes_full_size():
    shapes = expected_shapes(32, (32, 64), 1024, 3, 5)
    assert shapes["conv1_w"] == (5, 5, 5, 1, 32)
    assert shapes["conv2_w"] == (5, 5, 5, 32, 64)
    assert shapes["fc1_w"] == (8 * 8 * 8 * 64, 1024)
    assert shapes["fc1_w"][0] == 32768
    assert shapes["out_w"] == (1024, 3)


def test_expected_shapes_rejects_indivisible_input():
    with pytest.raises(ValueError):
        expected_shapes(33, (8, 8), 16, 3)


def test_model_validates_parameter_shapes():
    model = init_model(input_size=4, conv_channels=(2, 2), fc_units=4, kernel_size=3, seed=0)
    bad = dict(model.params)
    bad["conv1_b"] = np.zeros(7)
    with pytest.raises(ValueError):
        CnnModel(4, (2, 2), 4, 3, 3, 0, bad)


def test_init_model_deterministic_with_zero_biases():
    a = init_model(input_size=4, conv_channels=(2, 3), fc_units=5, kernel_size=3, seed=9)
    b = init_model(input_size=4, conv_channels=(2, 3), fc_units=5, kernel_size=3, seed=9)
    for name in a.params:
        np.testing.assert_array_equal(a.params[name], b.params[name])
        if name.endswith("_b"):
            assert not a.params[name].any()


def test_zero_weights_give_uniform_probabilities():
    model = init_model(input_size=4, conv_channels=(2, 2), fc_units=4, kernel_size=3, seed=0)
    for p in model.params.values():
        p[...] = 0.0
    probs = predict_probs(model, np.random.default_rng(0).random((3, 4, 4, 4)))
    np.testing.assert_allclose(probs, 1.0 / 3.0, atol=1e-15)


def test_forward_accepts_channelled_and_unchannelled_input():
    model = init_model(input_size=4, conv_channels=(2, 2), fc_units=4, kernel_size=3, seed=1)
    x = np.random.default_rng(1).random((2, 4, 4, 4))
    a, _ = forward(model, x)
    b, _ = forward(model, x[..., None])
    assert a.shape == (2, 3)
    np.testing.assert_array_equal(a, b)


# ---------------------------------------------------------------------------
# end-to-end gradients


def small_model(seed=11):
    return init_model(input_size=4, conv_channels=(2, 3), fc_units=5, kernel_size=3, seed=seed)


def relative_error(a, b):
    scale = max(np.abs(a).max(), np.abs(b).max(), 1e-8)
    return np.abs(a - b).max() / scale


def test_gradients_match_finite_differences_every_layer():
    model = small_model()
    rng = np.random.default_rng(12)
    x = rng.random((2, 4, 4, 4))
    classes = np.array([0, 2])
    _, grads = loss_and_grads(model, x, classes)
    for name, param in model.params.items():
        fd = finite_difference_grad(lambda: mean_cross_entropy(model, x, classes), param)
        err = relative_error(grads[name], fd)
        assert err < 1e-4, f"{name}: relative error {err}"


def test_gradients_with_dropout_mask_applied():
    model = small_model(seed=13)
    rng = np.random.default_rng(14)
    x = rng.random((2, 4, 4, 4))
    classes = np.array([1, 0])

    def dropped_loss():
        logits, _ = forward(model, x, train=True, keep_prob=0.6, rng=np.random.default_rng(99))
        return cross_entropy(logits, classes)[0]

    logits, cache = forward(model, x, train=True, keep_prob=0.6, rng=np.random.default_rng(99))
    _, dlogits = cross_entropy(logits, classes)
    grads = backward(model, cache, dlogits)
    for name in ("fc1_w", "fc1_b", "out_w", "out_b"):
        fd = finite_difference_grad(dropped_loss, model.params[name])
        err = relative_error(grads[name], fd)
        assert err < 1e-4, f"{name}: relative error {err}"


def test_dropout_requires_rng_in_training_mode():
    model = small_model()
    with pytest.raises(ValueError):
        forward(model, np.zeros((1, 4, 4, 4)), train=True, keep_prob=0.5)


# ---------------------------------------------------------------------------
# optimizer


def test_adam_first_step_is_almost_exactly_the_learning_rate():
    params = {"p": np.array([1.0])}
    state = AdamState()
    adam_step(params, {"p": np.array([3.0])}, state, lr=0.1)
    # m_hat = g, v_hat = g^2 after bias correction, so the step is
    # -lr * g / (|g| + eps): the learning rate shy of eps rounding
    expected_delta = -0.1 * 3.0 / (3.0 + 1e-8)
    assert params["p"][0] == pytest.approx(1.0 + expected_delta, abs=1e-15)
    assert params["p"][0] == pytest.approx(0.9, abs=1e-8)
    assert params["p"][0] != 0.9


def test_adam_matches_independent_replay():
    rng = np.random.default_rng(15)
    params = {"a": rng.standard_normal((2, 3)), "b": rng.standard_normal(4)}
    shadow = {k: v.copy() for k, v in params.items()}
    state = AdamState()
    m = {k: np.zeros_like(v) for k, v in shadow.items()}
    v = {k: np.zeros_like(u) for k, u in shadow.items()}
    lr, b1, b2, eps = 0.01, 0.9, 0.999, 1e-8
    for t in range(1, 6):
        grads = {k: rng.standard_normal(p.shape) for k, p in shadow.items()}
        adam_step(params, grads, state, lr, b1, b2, eps)
        for k in shadow:
            m[k] = b1 * m[k] + (1 - b1) * grads[k]
            v[k] = b2 * v[k] + (1 - b2) * grads[k] ** 2
            shadow[k] -= lr * (m[k] / (1 - b1**t)) / (np.sqrt(v[k] / (1 - b2**t)) + eps)
    for k in shadow:
        np.testing.assert_array_equal(params[k], shadow[k])


# ---------------------------------------------------------------------------
# training loop


def toy_dataset(n_per_class=4, size=4, seed=16):
    rng = np.random.default_rng(seed)
    xs, ys = [], []
    for c in range(3):
        for _ in range(n_per_class):
            xs.append(np.clip(c / 3.0 + 0.15 * rng.random((size, size, size)), 0.0, 1.0))
            ys.append(c)
    return np.stack(xs), np.array(ys)


def test_train_reduces_loss_on_separable_toy_data():
    x, y = toy_dataset()
    config = TrainConfig(learning_rate=1e-2, batch_size=4, epochs=25, keep_prob=1.0, seed=17)
    model, trace = train(x, y, config, input_size=4)
    assert trace[0] > 0
    assert trace[-1] < 0.5 * trace[0]
    preds = predict_probs(model, x).argmax(axis=1)
    assert (preds == y).mean() >= 0.9


def test_train_is_bitwise_deterministic():
    x, y = toy_dataset()
    config = TrainConfig(learning_rate=1e-2, batch_size=5, epochs=3, keep_prob=0.5, seed=18)
    m1, t1 = train(x, y, config, input_size=4)
    m2, t2 = train(x, y, config, input_size=4)
    np.testing.assert_array_equal(t1, t2)
    for name in m1.params:
        np.testing.assert_array_equal(m1.params[name], m2.params[name])


def test_train_rejects_missing_class():
    x, y = toy_dataset()
    keep = y != 1
    config = TrainConfig(epochs=1)
    with pytest.raises(DatasetError):
        train(x[keep], y[keep], config, input_size=4)


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(keep_prob=0.0)
    with pytest.raises(ValueError):
        TrainConfig(epochs=0)


# ---------------------------------------------------------------------------
# persistence


def test_model_round_trip(tmp_path):
    model = small_model(seed=19)
    path = tmp_path / "net.model"
    save_model(model, path)
    loaded = load_model(path)
    assert loaded.input_size == model.input_size
    assert loaded.conv_channels == model.conv_channels
    assert loaded.kernel_size == model.kernel_size
    for name in model.params:
        np.testing.assert_array_equal(loaded.params[name], model.params[name])
    x = np.random.default_rng(20).random((2, 4, 4, 4))
    np.testing.assert_array_equal(predict_probs(loaded, x), predict_probs(model, x))


def test_model_file_layout(tmp_path):
    model = small_model(seed=21)
    path = tmp_path / "net.model"
    save_model(model, path)
    raw = path.read_bytes()
    header, _, payload = raw.partition(b"\n")
    import json

    meta = json.loads(header)
    assert meta["precision"] == "f64"
    n_values = sum(int(np.prod(e["shape"])) for e in meta["params"])
    assert len(payload) == 8 * n_values


def test_load_model_rejects_wrong_format(tmp_path):
    path = tmp_path / "bad.model"
    path.write_bytes(b'{"format": "something-else"}\n')
    with pytest.raises(ValueError):
        load_model(path)


def test_load_model_rejects_truncated_payload(tmp_path):
    model = small_model(seed=22)
    path = tmp_path / "net.model"
    save_model(model, path)
    raw = path.read_bytes()
    (tmp_path / "cut.model").write_bytes(raw[:-8])
    with pytest.raises(ValueError):
        load_model(tmp_path / "cut.model")
