import numpy as np
import pytest

from marlbarrier.diffcore import (
    DiffError,
    ParameterStore,
    Tape,
    backward,
    finite_diff_check,
    forward_eval,
)


def test_matmul_identity():
    rng = np.random.default_rng(0)
    a = rng.normal(size=(2, 2))
    out = forward_eval(lambda t, x: t.matmul(t.const(np.eye(2)), x), a)
    np.testing.assert_array_equal(out.data, a)


def test_relu_negative_clamp():
    out = forward_eval(lambda t, x: t.relu(x), np.array(-3.0))
    assert out.item() == 0.0


def test_cosine_embedding_at_tau_zero():
    # embedding unit j: relu(sum_i cos(pi*i*tau) * w[i] + b); at tau=0 every
    # cosine is 1, so the output is relu(sum(w) + b)
    rng = np.random.default_rng(1)
    w = rng.normal(size=8)
    b = rng.normal()
    basis = np.pi * np.arange(8) * 0.0

    def builder(t, w_t):
        c = t.cos(t.const(basis))
        return t.relu(t.sum(t.mul(c, w_t)) + b)

    out = forward_eval(builder, w)
    assert out.item() == pytest.approx(max(w.sum() + b, 0.0), abs=1e-12)


def test_backward_square():
    store = ParameterStore()
    store.add("x", 3.0)
    tape = Tape(store)
    x = tape.param("x")
    grad = tape.backward(x * x)
    np.testing.assert_allclose(grad, [6.0])


def test_backward_abs_negative():
    store = ParameterStore()
    store.add("x", -2.0)
    tape = Tape(store)
    grad = tape.backward(tape.abs(tape.param("x")))
    np.testing.assert_allclose(grad, [-1.0])


def _two_layer_relu_loss(store):
    def build(t):
        x = t.const(np.array([[0.4, -0.7, 1.3]]))
        h = t.relu(t.matmul(x, t.param("w1")) + t.param("b1"))
        y = t.matmul(h, t.param("w2")) + t.param("b2")
        return t.mean(t.mul(y, y))

    return build


def test_two_layer_relu_network_matches_finite_differences():
    rng = np.random.default_rng(7)
    for attempt in range(20):
        store = ParameterStore()
        store.add("w1", rng.normal(size=(3, 5)))
        store.add("b1", rng.normal(size=(1, 5)))
        store.add("w2", rng.normal(size=(5, 1)))
        store.add("b2", rng.normal(size=(1, 1)))
        build = _two_layer_relu_loss(store)
        tape = Tape(store)
        build(tape)
        if tape.kink_margin() < 1e-1:
            continue  # resample away from relu kinks
        assert finite_diff_check(build, store, step=1e-5) <= 1e-4
        return
    pytest.fail("could not sample a network away from kinks")


def test_finite_diff_quadratic_is_exact():
    store = ParameterStore()
    store.add("v", np.array([1.5, -2.0, 0.25]))

    def build(t):
        v = t.param("v")
        return t.sum(t.mul(v, v))

    assert finite_diff_check(build, store, step=1e-5) <= 1e-8


def test_finite_diff_constant_loss_is_zero():
    store = ParameterStore()
    store.add("v", np.array([1.0, 2.0]))
    assert finite_diff_check(lambda t: t.const(4.2), store) == 0.0


def test_finite_diff_reports_nonfinite_probe():
    store = ParameterStore()
    store.add("big", 1.3407e154)  # just below sqrt(float64 max)

    def build(t):
        x = t.param("big")
        return t.mul(x, x)  # overflows to inf when nudged upward

    with pytest.raises(DiffError, match=r"big\[0\]"):
        finite_diff_check(build, store, step=1e150)


UNARY_PRIMS = ["relu", "softplus", "sigmoid", "tanh", "abs", "cos", "huber"]


@pytest.mark.parametrize("prim", UNARY_PRIMS + ["mean", "sum", "max", "matmul",
                                                "add", "sub", "mul", "gather_last",
                                                "narrow", "concat", "reshape",
                                                "batched_matvec"])
def test_primitive_gradients_match_finite_differences(prim):
    rng = np.random.default_rng(hash(prim) % (2**32))
    checked = 0
    while checked < 100:
        store = ParameterStore()
        store.add("a", rng.normal(size=(3, 4)))
        store.add("b", rng.normal(size=(4, 3)))
        idx = rng.integers(0, 4, size=3)
        probe = rng.normal(size=(3, 4))

        def build(t):
            a, b = t.param("a"), t.param("b")
            if prim in UNARY_PRIMS:
                y = getattr(t, prim)(a)
            elif prim == "mean":
                y = t.mean(a, axis=1)
            elif prim == "sum":
                y = t.sum(a, axis=0)
            elif prim == "max":
                y = t.max(a, axis=1)
            elif prim == "matmul":
                y = t.matmul(a, b)
            elif prim in ("add", "sub", "mul"):
                y = getattr(t, prim)(a, t.const(probe))
            elif prim == "gather_last":
                y = t.gather_last(a, idx)
            elif prim == "narrow":
                y = t.narrow(a, 1, 1, 3)
            elif prim == "concat":
                y = t.concat([a, t.const(probe)], axis=0)
            elif prim == "reshape":
                y = t.reshape(a, (4, 3))
            elif prim == "batched_matvec":
                w = t.reshape(a, (1, 12))
                x = t.narrow(t.reshape(b, (1, 12)), 1, 0, 4)
                y = t.batched_matvec(w, x, 3)
            return t.sum(t.mul(y, y))

        tape = Tape(store)
        build(tape)
        if tape.kink_margin() <= 1e-3:
            continue  # exclude non-differentiable loci
        assert finite_diff_check(build, store, step=1e-5) <= 1e-4
        checked += 1


def test_backward_is_linear_in_the_loss():
    rng = np.random.default_rng(11)
    store = ParameterStore()
    store.add("w", rng.normal(size=(4, 4)))

    def loss1(t):
        w = t.param("w")
        return t.sum(t.mul(w, w))

    def loss2(t):
        w = t.param("w")
        return t.mean(t.tanh(w))

    t1 = Tape(store)
    g1 = t1.backward(loss1(t1))
    t2 = Tape(store)
    g2 = t2.backward(loss2(t2))
    t3 = Tape(store)
    g12 = t3.backward(loss1(t3) + loss2(t3))
    np.testing.assert_allclose(g12, g1 + g2, atol=1e-10)


def test_tape_replay_is_bit_identical():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(5, 5))

    def build(t, inp):
        return t.sum(t.tanh(t.matmul(inp, t.const(np.eye(5) * 0.3))))

    a = forward_eval(build, x).data.tobytes()
    b = forward_eval(build, x).data.tobytes()
    assert a == b


def test_shape_errors_name_the_primitive():
    t = Tape()
    with pytest.raises(DiffError, match="matmul"):
        t.matmul(t.const(np.ones((2, 3))), t.const(np.ones((2, 3))))
    with pytest.raises(DiffError, match="sub"):
        t.sub(t.const(np.ones((2, 3))), t.const(np.ones(4)))
    with pytest.raises(DiffError, match="narrow"):
        t.narrow(t.const(np.ones((2, 3))), 1, 2, 5)


def test_backward_rejects_non_scalar():
    store = ParameterStore()
    store.add("w", np.ones((2, 2)))
    tape = Tape(store)
    w = tape.param("w")
    with pytest.raises(DiffError, match="scalar"):
        tape.backward(w)


def test_unused_parameter_gets_zero_gradient():
    store = ParameterStore()
    store.add("used", 2.0)
    store.add("unused", np.ones(3))
    tape = Tape(store)
    x = tape.param("used")
    grad = tape.backward(x * x)
    np.testing.assert_allclose(grad, [4.0, 0.0, 0.0, 0.0])


def test_parameter_ordering_is_registration_order():
    store = ParameterStore()
    store.add("z_last_alphabetically_first_registered", 1.0)
    store.add("a", np.array([2.0, 3.0]))
    assert store.names() == ["z_last_alphabetically_first_registered", "a"]
    np.testing.assert_array_equal(store.flatten(), [1.0, 2.0, 3.0])


def test_max_tie_breaks_to_lowest_index():
    store = ParameterStore()
    store.add("v", np.array([[1.0, 1.0, 0.5]]))
    tape = Tape(store)
    out = tape.max(tape.param("v"), axis=1)
    grad = tape.backward(tape.sum(out))
    np.testing.assert_array_equal(grad, [1.0, 0.0, 0.0])


def test_backward_after_module_level_helper():
    out = forward_eval(lambda t, x: t.sum(x), np.ones(3))
    with pytest.raises(DiffError):
        backward(out)  # no parameter store bound
