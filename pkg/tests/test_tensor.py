import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from infune import tensor as T
from infune.errors import ContractError, NonFiniteError

from conftest import check_grads


def param(value, name):
    return T.Tensor(np.array(value, dtype=float), requires_grad=True, name=name)


def test_mlp2_zero_weights_returns_bias():
    c = np.array([0.5, -2.0])
    W1, b1 = param(np.zeros((3, 4)), "W1"), param(np.zeros(3), "b1")
    W2, b2 = param(np.zeros((2, 3)), "W2"), param(c, "b2")
    for x in (np.zeros(4), np.arange(4.0), -7 * np.ones(4)):
        np.testing.assert_array_equal(T.mlp2_forward(x, W1, b1, W2, b2).value, c)


def test_mlp2_identity_at_zero():
    eye = np.eye(3)
    out = T.mlp2_forward(np.zeros(3), param(eye, "W1"), param(np.zeros(3), "b1"),
                         param(eye, "W2"), param(np.zeros(3), "b2"))
    np.testing.assert_array_equal(out.value, np.zeros(3))


def test_mlp2_matches_scalar_expansion():
    rng = np.random.default_rng(0)
    x = rng.normal(size=2)
    W1, b1, W2, b2 = rng.normal(size=(2, 2)), rng.normal(size=2), rng.normal(size=(2, 2)), rng.normal(size=2)
    h0 = math.tanh(W1[0, 0] * x[0] + W1[0, 1] * x[1] + b1[0])
    h1 = math.tanh(W1[1, 0] * x[0] + W1[1, 1] * x[1] + b1[1])
    expected = [W2[0, 0] * h0 + W2[0, 1] * h1 + b2[0], W2[1, 0] * h0 + W2[1, 1] * h1 + b2[1]]
    out = T.mlp2_forward(x, param(W1, "W1"), param(b1, "b1"), param(W2, "W2"), param(b2, "b2"))
    np.testing.assert_allclose(out.value, expected, rtol=1e-12)


def test_mlp2_shape_errors():
    W1, b1 = param(np.zeros((3, 4)), "W1"), param(np.zeros(3), "b1")
    W2, b2 = param(np.zeros((2, 5)), "W2"), param(np.zeros(2), "b2")
    with pytest.raises(ContractError):
        T.mlp2_forward(np.zeros(4), W1, b1, W2, b2)
    W2 = param(np.zeros((2, 3)), "W2")
    with pytest.raises(ContractError):
        T.mlp2_forward(np.zeros(5), W1, b1, W2, b2)


def test_cos_plus_examples():
    v = np.array([0.3, -1.2, 2.0])
    assert T.cos_plus(v, v).value == pytest.approx(1.0)
    assert T.cos_plus(v, -v).value == 0.0
    assert T.cos_plus(np.array([1.0, 0.0]), np.array([1.0, 1.0])).value == pytest.approx(1 / math.sqrt(2))


def test_cos_plus_zero_norm_is_zero_with_zero_grad():
    a = param(np.zeros(3), "a")
    b = param(np.array([1.0, 2.0, 3.0]), "b")
    r = T.cos_plus(a, b)
    assert r.value == 0.0
    grads = T.backward(T.sum_all(r), {"a": a, "b": b})
    assert not grads["a"].any() and not grads["b"].any()


def test_cos_plus_truncation_zone_has_zero_grad():
    a = param([[1.0, 0.2], [1.0, 0.0]], "a")
    b = param([[-1.0, 0.3], [0.0, 1.0]], "b")  # cos < 0 and cos == 0 exactly
    r = T.cos_plus(a, b)
    np.testing.assert_array_equal(r.value, [0.0, 0.0])
    grads = T.backward(T.sum_all(r), {"a": a, "b": b})
    assert not grads["a"].any() and not grads["b"].any()


finite = st.floats(-10, 10, allow_nan=False, allow_infinity=False)


@settings(max_examples=200, deadline=None)
@given(arrays(float, 4, elements=finite), arrays(float, 4, elements=finite),
       st.floats(0.01, 100), st.floats(0.01, 100))
def test_cos_plus_properties(a, b, alpha, beta):
    r = float(T.cos_plus(a, b).value)
    assert 0.0 <= r <= 1.0 + 1e-12
    assert r == pytest.approx(float(T.cos_plus(b, a).value), abs=1e-12)
    assert r == pytest.approx(float(T.cos_plus(alpha * a, beta * b).value), abs=1e-9)


@settings(max_examples=50, deadline=None)
@given(arrays(float, (3, 5), elements=st.floats(-50, 50)))
def test_tanh_bounded(x):
    out = T.tanh(T.Tensor(x)).value
    assert np.all(np.abs(out) <= 1.0)


def test_backward_squared_norm():
    x = param([1.0, -2.0, 3.5], "x")
    grads = T.backward(T.sum_all(T.dot(x, x)), {"x": x})
    np.testing.assert_allclose(grads["x"], 2 * x.value)


def test_unused_parameter_gets_zero_grad():
    x = param([1.0, 2.0], "x")
    unused = param([[3.0]], "unused")
    grads = T.backward(T.squared_error(x, np.zeros(2)), {"x": x, "unused": unused})
    assert not grads["unused"].any()


def test_backward_requires_scalar():
    with pytest.raises(ContractError):
        T.Tensor(np.ones(3)).backward()


def test_shared_subgraph_visited_once():
    x = param([0.5, -1.0], "x")
    h = T.tanh(x)
    loss = T.sum_all(T.add(h, h))  # h feeds the sum twice
    g = T.backward(loss, {"x": x})["x"]
    np.testing.assert_allclose(g, 2 * (1 - np.tanh(x.value) ** 2))


@pytest.mark.parametrize("seed", range(5))
def test_two_layer_net_grads_match_finite_differences(seed):
    rng = np.random.default_rng(seed)
    net = T.MLP2("net", 4, 6, 3, rng)
    for p in net.params().values():
        p.value[...] = rng.normal(size=p.shape)
    x = param(rng.normal(size=(5, 4)), "x")
    target = rng.normal(size=(5, 3))
    params = {**net.params(), "x": x}

    def loss():
        out = net(x)
        return T.squared_error(out, target)

    assert check_grads(loss, params) < 1e-4


def test_primitive_grads_match_finite_differences(rng):
    a = param(rng.normal(size=(4, 3)), "a")
    b = param(rng.normal(size=(4, 3)), "b")
    table = param(rng.normal(size=(6, 3)), "table")
    idx = np.array([0, 2, 2, 5])
    params = {"a": a, "b": b, "table": table}

    def loss():
        g = T.gather(table, idx)
        c = T.concat([a, T.scale(g, 0.7)], axis=-1)
        m = T.mean_rows(T.relu(T.add(a, b)))
        return T.add(T.add(T.sum_all(T.norm(c)), T.sum_all(T.scale(m, 2.0))),
                     T.add(T.sum_all(T.dot(a, g)), T.sum_all(T.cos_plus(a, b))))

    assert check_grads(loss, params) < 1e-4


def test_concat_rejects_nothing_but_checks_split(rng):
    a = param(rng.normal(size=(2, 2)), "a")
    b = param(rng.normal(size=(2, 3)), "b")
    out = T.concat([a, b])
    assert out.shape == (2, 5)
    g = T.backward(T.sum_all(out), {"a": a, "b": b})
    assert g["a"].shape == (2, 2) and g["b"].shape == (2, 3)


def test_mean_rows_empty_is_zero():
    out = T.mean_rows(T.Tensor(np.zeros((0, 4))))
    np.testing.assert_array_equal(out.value, np.zeros(4))


# ------------------------------------------------------------------ Adam


def test_adam_zero_gradient_leaves_params():
    p = param([1.0, -2.0], "p")
    opt = T.Adam({"p": p}, lr=0.1)
    opt.step({"p": np.zeros(2)})
    np.testing.assert_array_equal(p.value, [1.0, -2.0])
    assert opt.step_count == 1


@pytest.mark.parametrize("g", [3.0, -0.5])
def test_adam_first_step_moves_against_gradient(g):
    p = param([0.0], "p")
    T.Adam({"p": p}, lr=0.01).step({"p": np.array([g])})
    assert np.sign(p.value[0]) == -np.sign(g)


def test_adam_converges_on_quadratic():
    # (w - 3)^2 from w = 0 with lr 0.1: distance to 3 shrinks every step over the first 10.
    w = param([0.0], "w")
    opt = T.Adam({"w": w}, lr=0.1)
    dist = [abs(w.value[0] - 3)]
    for _ in range(10):
        opt.step({"w": 2 * (w.value - 3)})
        dist.append(abs(w.value[0] - 3))
    assert all(b < a for a, b in zip(dist, dist[1:]))
    assert opt.step_count == 10


def test_adam_rejects_non_finite():
    p = param([0.0, 0.0], "weights")
    opt = T.Adam({"weights": p})
    with pytest.raises(NonFiniteError, match="weights"):
        opt.step({"weights": np.array([1.0, np.nan])})
    assert opt.step_count == 0
    np.testing.assert_array_equal(p.value, [0.0, 0.0])


def test_checkpoint_round_trip(tmp_path, rng):
    net = T.MLP2("net", 3, 4, 2, rng)
    path = T.save_checkpoint(tmp_path / "ck.npz", net.params(), step=17, seed=99, meta={"dim": 3})
    arrays, header = T.load_checkpoint(path)
    assert header["step"] == 17 and header["seed"] == 99 and header["meta"] == {"dim": 3}
    for name, p in net.params().items():
        np.testing.assert_array_equal(arrays[name], p.value)
        assert arrays[name].dtype == np.float64
        assert header["shapes"][name] == list(p.shape)
