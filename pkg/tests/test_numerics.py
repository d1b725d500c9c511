import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from chirpscope import numerics as nx


def test_square_gradient_doctest_value():
    tape = nx.Tape()
    x = tape.watch(np.array(3.0), "x")
    assert float(tape.backward(x * x)[x]) == 6.0


def test_product_rule_matches_hand_derivation():
    tape = nx.Tape()
    x = tape.watch(np.array([1.0, -2.0, 0.5]))
    y = tape.watch(np.array([4.0, 3.0, -1.0]))
    out = nx.tsum(nx.mul(nx.mul(x, y), x))  # sum x^2 y
    g = tape.backward(out)
    np.testing.assert_allclose(g[x], 2 * x.data * y.data)
    np.testing.assert_allclose(g[y], x.data**2)


def test_matmul_gradients_are_outer_products():
    rng = np.random.default_rng(0)
    a, b, seed = rng.standard_normal((3, 4)), rng.standard_normal((4, 2)), rng.standard_normal((3, 2))
    tape = nx.Tape()
    ta, tb = tape.watch(a), tape.watch(b)
    g = tape.backward(nx.matmul(ta, tb), seed)
    np.testing.assert_allclose(g[ta], seed @ b.T)
    np.testing.assert_allclose(g[tb], a.T @ seed)


def test_broadcast_add_unbroadcasts_gradient():
    tape = nx.Tape()
    x = tape.watch(np.zeros((5, 3)))
    bias = tape.watch(np.zeros(3))
    g = tape.backward(nx.tsum(nx.add(x, bias)))
    np.testing.assert_array_equal(g[bias], [5.0, 5.0, 5.0])


def test_unreached_leaf_gets_zeros():
    tape = nx.Tape()
    x = tape.watch(np.ones(2))
    z = tape.watch(np.ones((2, 2)))
    g = tape.backward(nx.tsum(x))
    np.testing.assert_array_equal(g[z], np.zeros((2, 2)))


def test_tensors_are_read_only():
    t = nx.Tensor(np.arange(3.0))
    with pytest.raises(ValueError):
        t.data[0] = 1.0


@pytest.mark.parametrize("bad", [np.nan, np.inf, -np.inf])
def test_non_finite_input_is_rejected(bad):
    with pytest.raises(nx.NonFiniteError):
        nx.Tensor(np.array([1.0, bad]))


def test_mixing_tapes_is_an_error():
    t1, t2 = nx.Tape(), nx.Tape()
    a, b = t1.watch(np.ones(2)), t2.watch(np.ones(2))
    with pytest.raises(ValueError):
        nx.add(a, b)


def test_dropped_tape_is_freed_without_the_cycle_collector():
    import gc
    import weakref

    gc.disable()
    try:
        tape = nx.Tape()
        y = nx.tsum(nx.mul(tape.watch(np.ones(3)), 2.0))
        ref = weakref.ref(tape)
        del tape
        assert ref() is None
        assert y.tape is None and y.item() == 6.0
    finally:
        gc.enable()


def test_replay_is_bitwise_and_detects_tampering():
    tape = nx.Tape()
    x = tape.watch(np.linspace(-1, 1, 6).reshape(2, 3))
    y = nx.softmax_rows(nx.scale(x, 3.0))
    tape.replay()
    tape.backward(nx.tsum(y), check=True)
    node = tape.nodes[-1]
    bogus = nx.Primitive("bogus", lambda a, **kw: node.op.forward(a, **kw) + 1.0, node.op.vjp)
    tape.nodes[-1] = nx.Node(bogus, node.inputs, node.output, node.attrs)
    with pytest.raises(nx.ReplayError):
        tape.replay()


@pytest.mark.parametrize("name", sorted(nx.PRIMITIVES))
def test_every_primitive_passes_grad_check(name):
    prim = nx.PRIMITIVES[name]
    assert prim.sample is not None, f"{name} has no sampler"
    rng = np.random.default_rng(1)
    inputs, attrs = prim.sample(rng)
    probe = rng.standard_normal(prim.forward(*inputs, **attrs).shape)
    point = {f"x{i}": v for i, v in enumerate(inputs)}

    def f(leaves):
        out = nx.apply(prim, *(leaves[f"x{i}"] for i in range(len(inputs))), **attrs)
        return nx.tsum(nx.mul(out, probe))

    report = nx.grad_check(f, point)
    assert report.passed, str(report)


def test_grad_check_mse_two_layer_net():
    rng = np.random.default_rng(2)
    x, y = rng.standard_normal((6, 4)), rng.standard_normal((6, 2))
    point = {"W1": rng.standard_normal((4, 5)), "b1": rng.standard_normal(5), "W2": rng.standard_normal((5, 2))}

    def f(p):
        h = nx.relu(nx.add(nx.matmul(x, p["W1"]), p["b1"]))
        r = nx.sub(nx.matmul(h, p["W2"]), y)
        return nx.tmean(nx.tsum(nx.mul(r, r), axis=-1))

    report = nx.grad_check(f, point, h=1e-5, tol=1e-4)
    assert report.max_error <= 1e-4


def test_grad_check_flags_a_wrong_vjp():
    wrong = nx.register("_test_wrong_square", lambda a: a * a, lambda g, out, a: (g * a,))
    try:
        report = nx.grad_check(lambda p: nx.tsum(nx.apply(wrong, p["a"])), {"a": np.array([1.0, 2.0])})
        assert not report.passed
        assert report.max_error == pytest.approx(0.5)
    finally:
        del nx.PRIMITIVES["_test_wrong_square"]


def test_grad_check_requires_scalar_output():
    with pytest.raises(ValueError):
        nx.grad_check(lambda p: p["a"], {"a": np.ones(3)})


finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 7)), elements=finite))
def test_softmax_rows_sum_to_one(a):
    s = nx.softmax_rows(a).data
    assert np.all(s >= 0)
    np.testing.assert_allclose(s.sum(axis=-1), 1.0, atol=1e-12)


def test_softmax_survives_huge_logits():
    s = nx.softmax_rows(np.array([[1e300, 0.0], [-1e300, 0.0]])).data
    np.testing.assert_allclose(s, [[1.0, 0.0], [0.0, 1.0]])


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (3, 6), elements=finite))
def test_layer_norm_moments(a):
    out = nx.layer_norm(a, np.ones(6), np.zeros(6), eps=1e-6).data
    np.testing.assert_allclose(out.mean(axis=-1), 0.0, atol=1e-9)
    var = a.var(axis=-1)
    expected = var / (var + 1e-6)
    np.testing.assert_allclose(out.var(axis=-1), expected, atol=1e-9)


def test_gelu_known_values():
    out = nx.gelu(np.array([0.0, 1.0, -1.0])).data
    np.testing.assert_allclose(out, [0.0, 0.8413447460685429, -0.15865525393145707], rtol=1e-12)


def test_grad_check_refines_steps_that_straddle_a_relu_kink():
    # x = 3e-6 sits inside the h=1e-5 stencil, so a plain central difference gives 0.65
    point = {"x": np.array([3e-6, -0.5, 0.7])}
    rep = nx.grad_check(lambda p: nx.tsum(nx.relu(p["x"])), point, h=1e-5)
    assert rep.passed, str(rep)
    assert rep.refined["x"] == 1


def test_kink_refinement_does_not_hide_a_wrong_vjp():
    prim = nx.PRIMITIVES["relu"]
    bad = nx.Primitive("bad_relu", prim.forward, lambda g, out, a: (g * (a > 0) * 2.0,), None, False, prim.kink)
    point = {"x": np.array([3e-6, -0.5, 0.7])}
    rep = nx.grad_check(lambda p: nx.tsum(nx.apply(bad, p["x"])), point)
    assert not rep.passed
