import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kirby import tensor as T
from kirby.tensor import Parameter, Tape, Tensor


def central_difference(f, x: np.ndarray, h: float = 1e-4) -> np.ndarray:
    """Numerical gradient of scalar f at x by central differences (mutates x in place, restores)."""
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        gf[i] = (fp - fm) / (2 * h)
    return g


def rel_err(a, b):
    return np.max(np.abs(a - b) / np.maximum(1e-8, np.abs(a) + np.abs(b)))


def conv_reference(x, w, b):
    """Quadruple loop over output pixels with the (c, i, j) accumulation order."""
    n, c, h, wd = x.shape
    o, _, k, _ = w.shape
    p = k // 2
    out = np.zeros((n, o, h, wd))
    for ni in range(n):
        for oi in range(o):
            for y in range(h):
                for xx in range(wd):
                    acc = 0.0
                    for ci in range(c):
                        for i in range(k):
                            for j in range(k):
                                yy, xs = y + i - p, xx + j - p
                                v = x[ni, ci, yy, xs] if 0 <= yy < h and 0 <= xs < wd else 0.0
                                acc += float(w[oi, ci, i, j]) * float(v)
                    out[ni, oi, y, xx] = acc + b[oi]
    return out


# -- spec examples -----------------------------------------------------------

def test_relu_forward():
    out = T.relu(Tensor([-1.0, 0.0, 2.0]))
    assert out.data.tolist() == [0.0, 0.0, 2.0]


def test_uniform_softmax_cross_entropy_is_log_k():
    for label in (0, 3, 9):
        loss = T.softmax_cross_entropy(Tensor(np.zeros((1, 10))), np.array([label]))
        assert loss.item() == pytest.approx(math.log(10), abs=1e-6)


def test_conv_of_ones_center_and_corner():
    x = Tensor(np.ones((1, 1, 3, 3)))
    w = Tensor(np.ones((1, 1, 3, 3)))
    out = T.conv2d(x, w).data[0, 0]
    assert out[1, 1] == 9
    assert out[0, 0] == out[0, 2] == out[2, 0] == out[2, 2] == 4


def test_relu_subgradient_through_sum():
    x = Tensor([-1.0, 2.0])
    with Tape() as tape:
        tape.watch(x)
        loss = T.sum_all(T.relu(x))
    (dx,) = T.backward(tape, loss, [x])
    assert dx.tolist() == [0.0, 1.0]


def test_cross_entropy_gradient_is_softmax_minus_onehot():
    z = Tensor([[0.0, 0.0]])
    with Tape() as tape:
        tape.watch(z)
        loss = T.softmax_cross_entropy(z, np.array([0]))
    (dz,) = T.backward(tape, loss, [z])
    np.testing.assert_allclose(dz, [[-0.5, 0.5]], atol=1e-7)


def test_backward_rejects_non_scalar():
    x = Tensor([1.0, 2.0])
    with Tape() as tape:
        tape.watch(x)
        y = T.relu(x)
    with pytest.raises(T.ShapeError):
        T.backward(tape, y)


def test_shape_errors_name_the_op():
    with pytest.raises(T.ShapeError, match="conv2d"):
        T.conv2d(Tensor(np.ones((1, 2, 4, 4))), Tensor(np.ones((1, 3, 3, 3))))
    with pytest.raises(T.ShapeError, match="maxpool2x2"):
        T.maxpool2x2(Tensor(np.ones((1, 1, 3, 4))))
    with pytest.raises(T.ShapeError, match="linear"):
        T.linear(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 5))))
    with pytest.raises(T.ShapeError, match="add"):
        T.add(Tensor(np.ones(3)), Tensor(np.ones(4)))


def test_non_finite_is_an_error():
    with pytest.raises(T.NonFiniteError):
        T.relu(Tensor([np.inf]))


@pytest.mark.parametrize(
    "value, grad, lr, momentum, buf, expected",
    [(1.0, 1.0, 0.1, 0.0, 0.0, 0.9), (1.0, 0.0, 0.1, 0.9, 1.0, 0.91)],
)
def test_sgd_single_step(value, grad, lr, momentum, buf, expected):
    with T.precision(64):
        p = Parameter([value])
        p.grad[:] = grad
        p.momentum[:] = buf
        T.sgd_step([p], lr=lr, momentum=momentum, weight_decay=0.0)
    assert p.value[0] == pytest.approx(expected, abs=1e-12)
    assert p.grad[0] == 0


def test_sgd_two_momentum_steps():
    with T.precision(64):
        p = Parameter([0.0])
        seen = []
        for _ in range(2):
            p.grad[:] = 1.0
            T.sgd_step([p], lr=0.1, momentum=0.9)
            seen.append(p.value[0])
    assert seen == pytest.approx([-0.1, -0.29], abs=1e-12)


def test_sgd_weight_decay_enters_buffer():
    with T.precision(64):
        p = Parameter([2.0])
        T.sgd_step([p], lr=0.5, momentum=0.0, weight_decay=0.1)
    assert p.value[0] == pytest.approx(2.0 - 0.5 * 0.2)


def test_sgd_aborts_on_non_finite_gradient():
    p = Parameter([1.0], name="w")
    p.grad[:] = np.nan
    with pytest.raises(T.NonFiniteError, match="w"):
        T.sgd_step([p], lr=0.1)
    assert p.value[0] == 1.0


# -- finite-difference checks ------------------------------------------------

def _check_param_grads(build_loss, params, tol=1e-4):
    with Tape() as tape:
        loss = build_loss()
    T.backward(tape, loss)
    for p in params:
        analytic = p.grad.copy()
        p.grad[...] = 0

        def f():
            return build_loss().item()

        numeric = central_difference(f, p.data)
        assert rel_err(analytic, numeric) < tol, p.name


def test_random_four_layer_net_matches_finite_differences():
    rng = np.random.default_rng(7)
    with T.precision(64):
        x = Tensor(rng.uniform(-1, 1, (2, 1, 4, 4)))
        labels = np.array([1, 0])
        w1 = Parameter(rng.uniform(-1, 1, (3, 1, 3, 3)), "w1")
        b1 = Parameter(rng.uniform(-1, 1, 3), "b1")
        w2 = Parameter(rng.uniform(-1, 1, (4, 3, 3, 3)), "w2")
        b2 = Parameter(rng.uniform(-1, 1, 4), "b2")
        w3 = Parameter(rng.uniform(-1, 1, (5, 4)), "w3")
        b3 = Parameter(rng.uniform(-1, 1, 5), "b3")
        w4 = Parameter(rng.uniform(-1, 1, (2, 5)), "w4")
        b4 = Parameter(rng.uniform(-1, 1, 2), "b4")

        def build():
            h = T.relu(T.conv2d(x, w1, b1))
            h = T.maxpool2x2(T.relu(T.conv2d(h, w2, b2)))
            h = T.relu(T.linear(T.global_avg_pool(h), w3, b3))
            return T.softmax_cross_entropy(T.linear(h, w4, b4), labels)

        _check_param_grads(build, [w1, b1, w2, b2, w3, b3, w4, b4])


def _rule_check(kind, arrays, attrs, rng):
    """Every input gradient of one primitive vs central differences of sum(out * R)."""
    fwd, bwd = T._RULES[kind]
    out, saved = fwd(arrays, attrs)
    r = rng.uniform(-1, 1, np.shape(out))
    grads = bwd(r, saved, attrs)
    worst = 0.0
    for k, a in enumerate(arrays):
        numeric = central_difference(lambda: float(np.sum(fwd(arrays, attrs)[0] * r)), a)
        worst = max(worst, rel_err(np.asarray(grads[k]), numeric))
    return worst


PRIMITIVE_CASES = {
    "conv2d": lambda rng: ([rng.uniform(-1, 1, (2, 2, 4, 4)), rng.uniform(-1, 1, (3, 2, 3, 3)),
                            rng.uniform(-1, 1, 3)], {}),
    # keep inputs away from the kink so the difference quotient is smooth
    "relu": lambda rng: ([rng.uniform(0.05, 1, (3, 4)) * rng.choice([-1, 1], (3, 4))], {}),
    # distinct values so the argmax is stable under the perturbation
    "maxpool2x2": lambda rng: ([rng.permutation(32).reshape(1, 2, 4, 4) / 32 - 0.5], {}),
    "global_avg_pool": lambda rng: ([rng.uniform(-1, 1, (2, 3, 4, 4))], {}),
    "linear": lambda rng: ([rng.uniform(-1, 1, (3, 4)), rng.uniform(-1, 1, (5, 4)), rng.uniform(-1, 1, 5)], {}),
    "softmax_cross_entropy": lambda rng: ([rng.uniform(-1, 1, (4, 6))], {"labels": rng.integers(0, 6, 4)}),
    "add": lambda rng: ([rng.uniform(-1, 1, (2, 3)), rng.uniform(-1, 1, (2, 3))], {}),
    "scale": lambda rng: ([rng.uniform(-1, 1, (2, 3))], {"factor": float(rng.uniform(-2, 2))}),
    "sum": lambda rng: ([rng.uniform(-1, 1, (2, 3))], {}),
    "flatten": lambda rng: ([rng.uniform(-1, 1, (2, 3, 2, 2))], {}),
    "gather_rows": lambda rng: ([rng.uniform(-1, 1, (4, 3))], {"index": rng.integers(0, 3, 4)}),
}


@pytest.mark.parametrize("kind", sorted(PRIMITIVE_CASES))
def test_primitive_gradients_match_finite_differences(kind):
    rng = np.random.default_rng(123)
    with T.precision(64):
        for _ in range(20):
            arrays, attrs = PRIMITIVE_CASES[kind](rng)
            assert _rule_check(kind, arrays, attrs, rng) < 1e-4


def test_strict_backward_matches_fast_backward():
    rng = np.random.default_rng(5)
    x = rng.uniform(-1, 1, (2, 3, 6, 6))
    w = rng.uniform(-1, 1, (4, 3, 3, 3))
    b = rng.uniform(-1, 1, 4)
    g = rng.uniform(-1, 1, (2, 4, 6, 6))
    fwd, bwd = T._RULES["conv2d"]
    fast = bwd(g, fwd([x, w, b], {})[1], {})
    with T.strict_deterministic():
        strict = bwd(g, fwd([x, w, b], {})[1], {})
    for a, s in zip(fast, strict):
        np.testing.assert_allclose(a, s, rtol=1e-10, atol=1e-12)


# -- invariants --------------------------------------------------------------

@settings(max_examples=50, deadline=None)
@given(st.lists(st.lists(st.floats(-50, 50), min_size=3, max_size=3), min_size=1, max_size=5))
def test_softmax_rows_sum_to_one(rows):
    p = T.softmax(np.array(rows, dtype=np.float64))
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-6)


def test_forward_is_bit_deterministic():
    rng = np.random.default_rng(1)
    x = Tensor(rng.uniform(-1, 1, (4, 3, 8, 8)))
    w = Tensor(rng.uniform(-1, 1, (5, 3, 3, 3)))
    a = T.global_avg_pool(T.maxpool2x2(T.relu(T.conv2d(x, w)))).data
    b = T.global_avg_pool(T.maxpool2x2(T.relu(T.conv2d(x, w)))).data
    assert a.tobytes() == b.tobytes()


def test_strict_conv_equals_quadruple_loop_exactly():
    rng = np.random.default_rng(11)
    with T.precision(64), T.strict_deterministic():
        for _ in range(3):
            x = rng.uniform(-1, 1, (1, 2, 8, 8))
            w = rng.uniform(-1, 1, (3, 2, 3, 3))
            b = rng.uniform(-1, 1, 3)
            out = T.conv2d(Tensor(x), Tensor(w), Tensor(b)).data
            assert np.array_equal(out, conv_reference(x, w, b))


def test_fast_conv_agrees_with_quadruple_loop():
    rng = np.random.default_rng(12)
    with T.precision(64):
        x = rng.uniform(-1, 1, (2, 2, 8, 8))
        w = rng.uniform(-1, 1, (3, 2, 3, 3))
        b = rng.uniform(-1, 1, 3)
        out = T.conv2d(Tensor(x), Tensor(w), Tensor(b)).data
    np.testing.assert_allclose(out, conv_reference(x, w, b), rtol=0, atol=1e-12)


def test_tape_nodes_are_topologically_ordered():
    rng = np.random.default_rng(2)
    w = Parameter(rng.uniform(-1, 1, (2, 3)))
    with Tape() as tape:
        y = T.relu(T.linear(Tensor(rng.uniform(-1, 1, (4, 3))), w))
        T.sum_all(y)
    for i, node in enumerate(tape.nodes):
        assert all(j is None or j < i for j in node.inputs)


def test_gradients_accumulate_across_backward_calls():
    with T.precision(64):
        w = Parameter([[2.0]])
        x = Tensor([[3.0]])
        for _ in range(2):
            with Tape() as tape:
                loss = T.sum_all(T.linear(x, w))
            T.backward(tape, loss)
    assert w.grad[0, 0] == 6.0
