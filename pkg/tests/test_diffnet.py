import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from metricadv.diffnet import (FLATTEN, L2NORMALIZE, RELU, ArgumentError, EmbeddingNetwork,
                               LayerSpec, ShapeError, build_network, conv2d, dense,
                               finite_difference, forward, input_gradient, load_weights,
                               parameter_gradient, relative_error, save_weights)

CONV_NET = [conv2d(3, 3, 2), RELU, conv2d(2, 2, 1), RELU, FLATTEN, dense(5), L2NORMALIZE]
MLP_NET = [FLATTEN, dense(7), RELU, dense(4)]


def _kink_free(net, x, tol=1e-4):
    return all(np.min(np.abs(p)) > tol for p in net.preactivations(x))


def _straight_line(net, x):
    """Independent per-element evaluator for dense/relu/flatten/l2normalize nets."""
    a = list(np.asarray(x, dtype=float).ravel())
    for i, layer in enumerate(net.layers):
        if layer.kind == "dense":
            w, b = net.layer_params(i)
            a = [sum(w[r, c] * a[c] for c in range(len(a))) + b[r] for r in range(w.shape[0])]
        elif layer.kind == "relu":
            a = [v if v > 0 else 0.0 for v in a]
        elif layer.kind == "l2normalize":
            n = (sum(v * v for v in a) + 1e-12) ** 0.5
            a = [v / n for v in a]
    return np.array(a)


def test_identity_dense_forward():
    net = EmbeddingNetwork([dense(2)], (2,), np.array([1.0, 0.0, 0.0, 1.0, 0.0, 0.0]))
    np.testing.assert_array_equal(forward(net, np.array([0.3, 0.7])), [0.3, 0.7])


def test_dense_relu_hand_arithmetic():
    net = EmbeddingNetwork([dense(1), RELU], (2,), np.array([1.0, 1.0, 0.5]))
    assert forward(net, np.array([0.2, 0.3]))[0] == pytest.approx(1.0, abs=1e-15)


def test_forward_matches_straight_line_evaluator():
    rng = np.random.default_rng(3)
    net = build_network([FLATTEN, dense(6), RELU, dense(3), L2NORMALIZE], (2, 2, 2), seed=5)
    for _ in range(5):
        x = rng.random((2, 2, 2))
        np.testing.assert_allclose(forward(net, x), _straight_line(net, x), rtol=0, atol=1e-12)


def test_conv_forward_matches_loop():
    rng = np.random.default_rng(0)
    net = build_network([conv2d(2, 3, 2)], (7, 6, 2), seed=1)
    x = rng.random((7, 6, 2))
    k, b = net.layer_params(0)
    out = net.forward_batch(x[None])[0]
    for i in range(out.shape[0]):
        for j in range(out.shape[1]):
            patch = x[2 * i:2 * i + 3, 2 * j:2 * j + 3, :]
            ref = np.einsum("uvc,uvcf->f", patch, k) + b
            np.testing.assert_allclose(out[i, j], ref, atol=1e-12)


def test_l2normalize_output_is_unit():
    rng = np.random.default_rng(1)
    net = build_network(CONV_NET, (9, 9, 3), seed=2)
    for _ in range(5):
        assert np.linalg.norm(forward(net, rng.random((9, 9, 3)))) == pytest.approx(1.0, abs=1e-9)


def test_forward_shape_error():
    net = build_network(MLP_NET, (3, 3, 1), seed=0)
    with pytest.raises(ShapeError):
        forward(net, np.zeros((3, 3, 2)))


def test_input_gradient_identity():
    net = EmbeddingNetwork([dense(2)], (2,), np.array([1.0, 0.0, 0.0, 1.0, 0.0, 0.0]))
    np.testing.assert_array_equal(input_gradient(net, np.array([0.4, 0.1]), np.array([1.0, 0.0])), [1.0, 0.0])


def test_dead_relu_has_zero_gradient():
    # pre-activation = x0 - 1 < 0 for x0 in [0, 1)
    net = EmbeddingNetwork([dense(1), RELU], (1,), np.array([1.0, -1.0]))
    assert input_gradient(net, np.array([0.5]), np.array([1.0]))[0] == 0.0


def test_input_gradient_shape_errors():
    net = build_network(MLP_NET, (3, 3, 1), seed=0)
    with pytest.raises(ShapeError):
        input_gradient(net, np.zeros((3, 3, 1)), np.zeros(3))


@pytest.mark.parametrize("layers,shape", [(CONV_NET, (9, 9, 3)), (MLP_NET, (3, 3, 2)),
                                          ([conv2d(2, 2, 1), FLATTEN, dense(3)], (4, 4, 1))])
def test_input_gradient_matches_finite_differences(layers, shape):
    rng = np.random.default_rng(11)
    checked = 0
    for trial in range(20):
        net = build_network(layers, shape, seed=trial)
        x = rng.random(shape)
        if not _kink_free(net, x):
            continue
        u = rng.standard_normal(net.embedding_dim)
        g = input_gradient(net, x, u)
        if np.linalg.norm(g) < 1e-6:  # all units dead: relative error is pure noise
            continue
        fd = finite_difference(lambda z: float(u @ forward(net, z)), x)
        assert relative_error(g, fd) <= 1e-4
        checked += 1
    assert checked >= 10


def test_parameter_gradient_zero_upstream():
    net = build_network(MLP_NET, (3, 3, 1), seed=0)
    batch = [(np.ones((3, 3, 1)), np.zeros(4))] * 3
    np.testing.assert_array_equal(parameter_gradient(net, batch), np.zeros(net.num_params))


def test_parameter_gradient_single_equals_batch_of_one_and_additive():
    rng = np.random.default_rng(2)
    net = build_network(MLP_NET, (3, 3, 1), seed=0)
    ex = [(rng.random((3, 3, 1)), rng.standard_normal(4)) for _ in range(3)]
    total = parameter_gradient(net, ex)
    parts = sum(parameter_gradient(net, [e]) for e in ex)
    np.testing.assert_allclose(total, parts, atol=1e-12)


def test_parameter_gradient_empty_batch():
    net = build_network(MLP_NET, (3, 3, 1), seed=0)
    with pytest.raises(ArgumentError):
        parameter_gradient(net, [])


def test_parameter_gradient_matches_finite_differences():
    rng = np.random.default_rng(4)
    layers = [conv2d(2, 2, 1), RELU, FLATTEN, dense(4), L2NORMALIZE]
    net = build_network(layers, (4, 4, 1), seed=3)
    assert net.num_params <= 200
    batch = [(rng.random((4, 4, 1)), rng.standard_normal(4)) for _ in range(2)]
    assert all(_kink_free(net, x) for x, _ in batch)

    def loss(theta):
        n = EmbeddingNetwork(layers, (4, 4, 1), theta)
        return sum(float(u @ forward(n, x)) for x, u in batch)

    fd = finite_difference(loss, net.params)
    assert relative_error(parameter_gradient(net, batch), fd) <= 1e-4


def test_finite_difference_examples():
    np.testing.assert_allclose(finite_difference(lambda v: float(v @ v), np.array([1.0, 2.0])), [2, 4], atol=1e-6)
    np.testing.assert_array_equal(finite_difference(lambda v: 3.0, np.array([1.0, 2.0])), [0.0, 0.0])
    np.testing.assert_allclose(finite_difference(lambda v: v[0] * v[1], np.array([3.0, 5.0])), [5, 3], atol=1e-6)
    with pytest.raises(ArgumentError):
        finite_difference(lambda v: 0.0, np.zeros(2), h=0.0)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_input_gradient_linear_in_upstream(seed):
    rng = np.random.default_rng(seed)
    net = build_network(CONV_NET, (9, 9, 3), seed=seed)
    x = rng.random((9, 9, 3))
    u1, u2 = rng.standard_normal(5), rng.standard_normal(5)
    np.testing.assert_allclose(input_gradient(net, x, u1 + u2),
                               input_gradient(net, x, u1) + input_gradient(net, x, u2), atol=1e-10)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_forward_deterministic_and_finite(seed):
    rng = np.random.default_rng(seed)
    net = build_network(CONV_NET, (9, 9, 3), seed=seed)
    x = rng.uniform(-0.5, 1.5, (9, 9, 3))
    a, b = forward(net, x), forward(net, x)
    assert a.tobytes() == b.tobytes()
    assert np.all(np.isfinite(a))


def test_parameter_count_and_embedding_dim():
    net = build_network(CONV_NET, (9, 9, 3), seed=0)
    expected = (3 * 3 * 3 * 3 + 3) + (2 * 2 * 3 * 2 + 2) + (2 * 3 * 3 * 5 + 5)
    assert net.num_params == expected
    assert net.embedding_dim == 5


def test_l2normalize_must_be_last():
    with pytest.raises(ShapeError):
        EmbeddingNetwork([FLATTEN, L2NORMALIZE, dense(2)], (2, 2, 1))
    with pytest.raises(ArgumentError):
        LayerSpec("pool")


def test_weight_container_round_trip(tmp_path):
    net = build_network(CONV_NET, (9, 9, 3), seed=7)
    path = tmp_path / "net.mnet"
    save_weights(net, path, extra={"arch": "test"})
    head = path.read_bytes().split(b"\n", 1)[0]
    assert head.startswith(b"MNETW 1 ")
    loaded, extra = load_weights(path)
    assert extra == {"arch": "test"}
    assert loaded.params.dtype == np.float64
    assert loaded.layers == net.layers and loaded.input_shape == net.input_shape
    np.testing.assert_array_equal(loaded.params, net.params.astype(np.float32).astype(np.float64))


def test_weight_container_rejects_garbage(tmp_path):
    path = tmp_path / "bad.mnet"
    path.write_bytes(b"hello world\n")
    with pytest.raises(ValueError):
        load_weights(path)
