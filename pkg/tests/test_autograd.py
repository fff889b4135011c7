import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from wavadv import autograd as ag
from wavadv.autograd import Graph, GraphStateError, NonFiniteError, ShapeError, check_gradient, finite_diff_grad


def run(fn, **bindings):
    g = Graph(fn)
    loss = g.forward(bindings)
    return loss.values.item(), g.backward()


def test_square_value_and_grad():
    val, grads = run(lambda x: x * x, x=np.array([3.0]))
    assert val == 9.0
    assert grads["x"][0] == 6.0


def test_tanh_examples():
    val, _ = run(lambda x: ag.tanh(x), x=np.array([0.0]))
    assert val == 0.0
    _, grads = run(lambda x: ag.tanh(x * 2.0), x=np.array([0.0]))
    assert grads["x"][0] == 2.0


def test_backward_before_forward():
    with pytest.raises(GraphStateError):
        Graph(lambda x: x).backward()
    with pytest.raises(GraphStateError):
        Graph(lambda x: x).loss_node


def test_loss_must_be_scalar():
    with pytest.raises(ShapeError) as info:
        Graph(lambda x: x * 2.0).forward({"x": np.ones(3)})
    assert info.value.op == "loss"


def test_shape_error_names_op():
    with pytest.raises(ShapeError) as info:
        Graph(lambda a, b: ag.tensor_sum(ag.matmul(a, b))).forward({"a": np.ones((2, 3)), "b": np.ones((2, 3))})
    assert info.value.op == "matmul"


def test_non_finite_forward():
    with pytest.raises(NonFiniteError):
        Graph(lambda x: ag.tensor_sum(x * 1e300 * 1e300)).forward({"x": np.ones(2)})


def test_nodes_topologically_ordered():
    g = Graph(lambda x, w: ag.tensor_sum(ag.tanh(ag.matmul(x, w))))
    g.forward({"x": np.ones((2, 3)), "w": np.ones((3, 4))})
    position = {id(n): i for i, n in enumerate(g.nodes)}
    for node in g.nodes:
        for parent in node.parents:
            assert position[id(parent)] < position[id(node)]
    assert g.loss_node == len(g.nodes) - 1
    assert g.nodes[g.loss_node] is g.loss


def test_input_gradients_exposed():
    g = Graph(lambda x, w: ag.tensor_sum(ag.matmul(x, w)))
    g.forward({"x": np.ones((1, 2)), "w": np.arange(6.0).reshape(2, 3)})
    grads = g.backward()
    assert set(grads) == {"x", "w"}
    np.testing.assert_array_equal(grads["x"], [[3.0, 12.0]])


def test_grad_inputs_restricts_outputs():
    g = Graph(lambda x, w: ag.tensor_sum(x * w), grad_inputs=["x"])
    g.forward({"x": np.ones(3), "w": np.arange(3.0)})
    assert list(g.backward()) == ["x"]


def test_repeated_forward_resets_grads():
    g = Graph(lambda x: ag.tensor_sum(x * x))
    g.forward({"x": np.array([1.0, 2.0])})
    first = g.backward()["x"].copy()
    g.forward({"x": np.array([1.0, 2.0])})
    np.testing.assert_array_equal(g.backward()["x"], first)


def test_finite_diff_examples():
    np.testing.assert_allclose(finite_diff_grad(lambda v: np.sum(v * v), np.array([1.0, 2.0])), [2.0, 4.0], atol=1e-6)
    np.testing.assert_array_equal(finite_diff_grad(lambda v: 3.0, np.ones(4)), np.zeros(4))
    with pytest.raises(ValueError):
        finite_diff_grad(lambda v: 0.0, np.ones(2), h=0.0)
    with pytest.raises(NonFiniteError):
        finite_diff_grad(lambda v: np.log(v[0]), np.array([0.0]))


def test_finite_diff_leaves_input_untouched():
    x = np.array([0.3, -0.2])
    finite_diff_grad(lambda v: float(np.sum(np.sin(v))), x)
    np.testing.assert_array_equal(x, [0.3, -0.2])


def test_maxpool_ties_route_to_first():
    g = Graph(lambda x: ag.tensor_sum(ag.maxpool1d(x, 2)))
    g.forward({"x": np.array([[[1.0, 1.0, 2.0, 0.0, 5.0]]])})
    np.testing.assert_array_equal(g.backward()["x"], [[[1.0, 0.0, 1.0, 0.0, 0.0]]])
    assert g.loss.values.item() == 3.0  # odd tail is dropped


def test_conv_same_length_and_padding():
    # kernel [1, 2, 3] on a unit impulse reproduces the flipped-correlation response
    x = np.zeros((1, 1, 5))
    x[0, 0, 2] = 1.0
    w = np.array([[[1.0, 2.0, 3.0]]])
    out = ag.conv1d(ag.Tensor(x), ag.Tensor(w), ag.Tensor(np.zeros(1))).values
    np.testing.assert_array_equal(out, [[[0.0, 3.0, 2.0, 1.0, 0.0]]])
    w4 = ag.Tensor(np.ones((1, 1, 4)))
    assert ag.conv1d(ag.Tensor(x), w4, ag.Tensor(np.zeros(1))).shape == (1, 1, 5)


def test_softmax_cross_entropy_uniform():
    logits = np.zeros((3, 4))
    val, grads = run(lambda z: ag.softmax_cross_entropy(z, [0, 1, 3]), z=logits)
    assert val == pytest.approx(np.log(4.0), abs=1e-15)
    np.testing.assert_allclose(grads["z"].sum(axis=1), 0.0, atol=1e-15)


def test_linearity_scales_gradients():
    rng = np.random.default_rng(3)
    x, w = rng.standard_normal((4, 5)), rng.standard_normal((5, 2))

    def loss(a):
        return lambda x, w: ag.tensor_sum(ag.tanh(ag.matmul(x, w))) * a

    _, g1 = run(loss(1.0), x=x, w=w)
    _, g4 = run(loss(4.0), x=x, w=w)
    np.testing.assert_array_equal(g4["w"], 4.0 * g1["w"])  # power-of-two scaling is exact


def test_deterministic_loss():
    rng = np.random.default_rng(5)
    x, w = rng.standard_normal((8, 30)), rng.standard_normal((30, 3))
    fn = lambda x, w: ag.softmax_cross_entropy(ag.matmul(x, w), [0, 1, 2, 0, 1, 2, 0, 1])
    assert run(fn, x=x, w=w)[0] == run(fn, x=x, w=w)[0]


# -- gradient checks per layer kind ------------------------------------------

RNG = np.random.default_rng(11)


def _tanh_rnn(x, U, W):
    s = None
    for t in range(x.shape[1]):
        pre = ag.matmul(ag.take(x, t, axis=1), U)
        s = ag.tanh(pre if s is None else pre + ag.matmul(s, W))
    return ag.tensor_sum(s * s)


def _lstm(x, Wx, Wh, b):
    from wavadv.nets import lstm_last_state

    return ag.tensor_sum(ag.tanh(lstm_last_state(x, Wx, Wh, b)))


LAYERS = {
    "conv": (
        lambda x, w, b: ag.tensor_sum(ag.tanh(ag.conv1d(x, w, b))),
        {"x": RNG.standard_normal((2, 3, 17)), "w": RNG.standard_normal((4, 3, 6)) * 0.3, "b": RNG.standard_normal(4)},
    ),
    "pool": (
        lambda x: ag.tensor_sum(ag.maxpool1d(x, 2) * ag.maxpool1d(x, 2)),
        {"x": RNG.standard_normal((2, 3, 41))},
    ),
    "dense": (
        lambda x, w, b: ag.tensor_sum(ag.tanh(ag.dense(x, w, b))),
        {"x": RNG.standard_normal((5, 20)), "w": RNG.standard_normal((20, 8)) * 0.3, "b": RNG.standard_normal(8)},
    ),
    "tanh_rnn": (
        _tanh_rnn,
        {"x": RNG.standard_normal((3, 12, 4)), "U": RNG.standard_normal((4, 6)) * 0.5, "W": RNG.standard_normal((6, 6)) * 0.4},
    ),
    "lstm": (
        _lstm,
        {
            "x": RNG.standard_normal((2, 6, 5)),
            "Wx": RNG.standard_normal((5, 16)) * 0.4,
            "Wh": RNG.standard_normal((4, 16)) * 0.4,
            "b": RNG.standard_normal(16) * 0.1,
        },
    ),
    "softmax_xent": (
        lambda z: ag.softmax_cross_entropy(z, [0, 2, 1, 1, 0]),
        {"z": RNG.standard_normal((5, 3)) * 2.0},
    ),
    "relu_sigmoid": (
        lambda x: ag.tensor_sum(ag.sigmoid(x) * ag.relu(x)),
        {"x": RNG.standard_normal(50) + 0.05},
    ),
}


@pytest.mark.parametrize("layer", sorted(LAYERS))
def test_layer_gradients_match_finite_differences(layer):
    fn, bindings = LAYERS[layer]
    graph = Graph(fn)
    for name in bindings:
        assert check_gradient(graph, bindings, name, n_coords=100, seed=1) < 1e-4, name


def test_two_layer_net_20_inputs():
    rng = np.random.default_rng(2)
    b = {"x": rng.standard_normal((1, 20)), "w1": rng.standard_normal((20, 10)) * 0.3, "w2": rng.standard_normal((10, 3))}
    graph = Graph(lambda x, w1, w2: ag.softmax_cross_entropy(ag.matmul(ag.tanh(ag.matmul(x, w1)), w2), [1]))
    assert check_gradient(graph, b, "x") < 1e-4


@settings(max_examples=25, deadline=None)
@given(arrays(np.float64, (3, 4), elements=st.floats(-3, 3)), arrays(np.float64, (4,), elements=st.floats(-3, 3)))
def test_broadcast_add_mul_gradients(a, b):
    g = Graph(lambda a, b: ag.tensor_sum(ag.tanh(a * b + b)))
    g.forward({"a": a, "b": b})
    grads = g.backward()
    t = np.tanh(a * b + b)
    d = 1 - t * t
    np.testing.assert_allclose(grads["a"], d * b, rtol=1e-12, atol=1e-15)
    np.testing.assert_allclose(grads["b"], (d * (a + 1)).sum(axis=0), rtol=1e-12, atol=1e-13)
