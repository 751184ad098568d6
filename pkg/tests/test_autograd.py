import numpy as np
import pytest

from pol.autograd import (
    AdamState,
    FiniteDiffReport,
    Parameter,
    Tape,
    adam_step,
    backward,
    finite_diff_check,
    grad_of_iterated_block,
    zero_grads,
)
from pol.errors import NumericError
from oracles import adam_scalar_reference


def test_backward_sum_of_squares():
    x = Parameter("x", np.array([3.0]))
    t = Tape()
    xn = t.param(x)
    loss = t.total(t.square(xn))
    backward(t, loss)
    np.testing.assert_allclose(x.grad, [6.0])


def test_backward_weight_shared_linear_residual():
    # f(x) = x + w*x applied 3 times at w=0.1, x=1: d/dw (1+w)^3 = 3*(1.1)^2
    w = Parameter("w", np.array([0.1]))
    t = Tape()
    wn = t.param(w)
    cur = t.leaf(np.array([1.0]))
    for _ in range(3):
        cur = t.add(cur, t.mul(wn, cur))
    loss = t.total(cur)
    backward(t, loss)
    np.testing.assert_allclose(w.grad, [3 * 1.1 ** 2], rtol=1e-12)


def test_backward_requires_scalar_and_single_use():
    x = Parameter("x", np.ones(3))
    t = Tape()
    xn = t.param(x)
    y = t.square(xn)
    with pytest.raises(NumericError):
        backward(t, y)
    loss = t.mean(y)
    backward(t, loss)
    with pytest.raises(NumericError):
        backward(t, loss)


def test_unreachable_parameter_untouched():
    a = Parameter("a", np.ones(2))
    b = Parameter("b", np.ones(2))
    b.grad[...] = 7.0
    t = Tape()
    an = t.param(a)
    t.param(b)
    loss = t.mean(t.square(an))
    backward(t, loss)
    np.testing.assert_array_equal(b.grad, 7.0)


def _composite_graph(dtype, seed=3):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((1, 2, 6, 6)).astype(dtype)
    w1 = Parameter("w1", rng.standard_normal((3, 2, 3, 3)).astype(dtype) * 0.4)
    b1 = Parameter("b1", rng.standard_normal(3).astype(dtype) * 0.1)
    g = Parameter("g", np.ones(3, dtype=dtype))
    be = Parameter("be", np.zeros(3, dtype=dtype))
    w2 = Parameter("w2", rng.standard_normal((3, 2, 2, 2)).astype(dtype) * 0.4)

    def build():
        t = Tape()
        xn = t.constant(x)
        h = t.conv2d(xn, t.param(w1), t.param(b1), stride=1, pad=1)
        h = t.instance_norm(h, t.param(g), t.param(be))
        h = t.leaky_relu(h, 0.2)
        h = t.conv_transpose2d(h, t.param(w2), None, stride=2, pad=1)
        h = t.tanh(h)
        return t, t.mean(t.square(h))

    return build, [w1, b1, g, be, w2]


def test_finite_diff_composite_f32():
    build, params = _composite_graph(np.float32)
    report = finite_diff_check(build, params, rng=np.random.default_rng(0))
    assert report.max_rel_err < 1e-3, str(report)


def test_finite_diff_composite_f64():
    build, params = _composite_graph(np.float64)
    report = finite_diff_check(build, params, rng=np.random.default_rng(0))
    assert report.max_rel_err < 1e-6, str(report)


def test_finite_diff_linear_is_exact():
    w = Parameter("w", np.array([2.0, -1.0]))

    def build():
        t = Tape()
        wn = t.param(w)
        return t, t.mean(t.scale(wn, 3.0))

    report = finite_diff_check(build, [w])
    assert report.max_rel_err < 1e-10


def test_finite_diff_detects_nondeterminism():
    w = Parameter("w", np.array([1.0]))
    state = {"k": 0.0}

    def build():
        state["k"] += 1.0
        t = Tape()
        return t, t.mean(t.scale(t.param(w), state["k"]))

    with pytest.raises(NumericError):
        finite_diff_check(build, [w])


def test_finite_diff_weight_shared_f8(rng):
    # block weights at fan-in init scale, the regime the tolerance targets
    dtype = np.float32
    x = rng.standard_normal((1, 2, 5, 5)).astype(dtype)
    w = Parameter("w", rng.standard_normal((2, 2, 3, 3)).astype(dtype) * (1 / 18 ** 0.5))
    b = Parameter("b", np.zeros(2, dtype=dtype))

    def build():
        t = Tape()
        cur = t.constant(x)
        wn, bn = t.param(w), t.param(b)
        for _ in range(8):
            cur = t.add(cur, t.tanh(t.conv2d(cur, wn, bn, stride=1, pad=1)))
        return t, t.mean(t.square(cur))

    report = finite_diff_check(build, [w, b], rng=np.random.default_rng(5))
    assert report.max_rel_err < 1e-3, str(report)


@pytest.mark.parametrize("n", [1, 2, 4, 8])
def test_shared_grad_equals_unrolled_copies(n, rng):
    # one shared block vs n independent copies holding identical weights
    dtype = np.float64
    x = rng.standard_normal((1, 2, 4, 4)).astype(dtype)
    wv = rng.standard_normal((2, 2, 3, 3)).astype(dtype) * 0.3
    bv = rng.standard_normal(2).astype(dtype) * 0.05

    shared_w = Parameter("w", wv.copy())
    shared_b = Parameter("b", bv.copy())
    t = Tape()
    cur = t.constant(x)
    wn, bn = t.param(shared_w), t.param(shared_b)
    for _ in range(n):
        cur = t.add(cur, t.tanh(t.conv2d(cur, wn, bn, stride=1, pad=1)))
    backward(t, t.mean(t.square(cur)))

    copies = [
        (Parameter(f"w{i}", wv.copy()), Parameter(f"b{i}", bv.copy()))
        for i in range(n)
    ]
    t2 = Tape()
    cur = t2.constant(x)
    for wi, bi in copies:
        cur = t2.add(cur, t2.tanh(t2.conv2d(cur, t2.param(wi), t2.param(bi), stride=1, pad=1)))
    backward(t2, t2.mean(t2.square(cur)))

    sum_w = sum(wi.grad for wi, _ in copies)
    sum_b = sum(bi.grad for _, bi in copies)
    assert np.max(np.abs(shared_w.grad - sum_w)) < 1e-5
    assert np.max(np.abs(shared_b.grad - sum_b)) < 1e-5


def test_backward_linearity(rng):
    a, b = 0.7, -1.3
    w = Parameter("w", rng.standard_normal(5))

    def grads_for(fn):
        zero_grads([w])
        t = Tape()
        wn = t.param(w)
        backward(t, fn(t, wn))
        return w.grad.copy()

    g1 = grads_for(lambda t, wn: t.mean(t.square(wn)))
    g2 = grads_for(lambda t, wn: t.mean(t.absval(wn)))
    combo = grads_for(
        lambda t, wn: t.add(
            t.scale(t.mean(t.square(wn)), a), t.scale(t.mean(t.absval(wn)), b)
        )
    )
    np.testing.assert_allclose(combo, a * g1 + b * g2, rtol=1e-12)


def test_backward_determinism(rng):
    build, params = _composite_graph(np.float32)
    t1, l1 = build()
    zero_grads(params)
    backward(t1, l1)
    g1 = {p.name: p.grad.copy() for p in params}
    t2, l2 = build()
    zero_grads(params)
    backward(t2, l2)
    for p in params:
        np.testing.assert_array_equal(g1[p.name], p.grad)


# ---- adam ------------------------------------------------------------


def test_adam_zero_grad_leaves_value():
    p = Parameter("p", np.array([1.5]))
    st = AdamState(lr=1e-2)
    adam_step([p], st)
    np.testing.assert_array_equal(p.value, [1.5])
    assert st.t == 1


def test_adam_first_step_magnitude():
    for g0 in (0.3, -2.0, 1e-4):
        p = Parameter("p", np.array([0.0]))
        p.grad[...] = g0
        st = AdamState(lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8)
        adam_step([p], st)
        expected = 1e-3 * g0 / (abs(g0) + 1e-8)
        np.testing.assert_allclose(-p.value, [expected], rtol=1e-6)
        np.testing.assert_array_equal(p.grad, 0.0)


def test_adam_matches_scalar_reference():
    rng = np.random.default_rng(2)
    grads = rng.standard_normal(10)
    p = Parameter("p", np.array([0.25]))
    st = AdamState(lr=7e-3, beta1=0.9, beta2=0.99, eps=1e-8)
    trace = []
    for g in grads:
        p.grad[...] = g
        adam_step([p], st)
        trace.append(float(p.value[0]))
    want = adam_scalar_reference(0.25, grads, 7e-3, 0.9, 0.99, 1e-8)
    np.testing.assert_allclose(trace, want, atol=1e-12)


def test_adam_rejects_nan():
    p = Parameter("p", np.array([1.0]))
    p.grad[...] = np.nan
    with pytest.raises(NumericError) as exc:
        adam_step([p], AdamState())
    assert "p" in str(exc.value)


# ---- iterated block VJPs ---------------------------------------------


def test_iterated_block_zero_residual_identity(rng):
    w = Parameter("w", np.zeros((2, 2, 3, 3)))

    def block(t, xn):
        return t.add(xn, t.conv2d(xn, t.param(w), None, stride=1, pad=1))

    x = rng.standard_normal((1, 2, 4, 4))
    for n in (1, 3, 6):
        g = grad_of_iterated_block(block, x, n)
        v = rng.standard_normal(x.shape)
        np.testing.assert_allclose(g.vjp_x(v), v, atol=1e-12)


def test_iterated_block_scalar_linear():
    # d=1 residual with L = 0.1: full derivative of f^4 is 1.1^4
    w = Parameter("w", np.array([0.1]))

    def block(t, xn):
        return t.add(xn, t.mul(t.param(w), xn))

    g = grad_of_iterated_block(block, np.array([1.0]), 4)
    np.testing.assert_allclose(g.vjp_x(np.array([1.0])), [1.1 ** 4], rtol=1e-12)


def test_iterated_block_n0():
    w = Parameter("w", np.array([0.5]))

    def block(t, xn):
        return t.add(xn, t.mul(t.param(w), xn))

    g = grad_of_iterated_block(block, np.array([2.0]), 0)
    np.testing.assert_array_equal(g.vjp_x(np.array([3.0])), [3.0])
    assert g.param_grads(np.array([1.0])) == {}


def test_iterated_block_param_grads_match_backward(rng):
    w = Parameter("w", rng.standard_normal((2, 2, 3, 3)) * 0.2)

    def block(t, xn):
        return t.add(xn, t.tanh(t.conv2d(xn, t.param(w), None, stride=1, pad=1)))

    x = rng.standard_normal((1, 2, 4, 4))
    g = grad_of_iterated_block(block, x, 4)
    seed = np.full(x.shape, 1.0 / x.size)
    pg = g.param_grads(seed)["w"]

    zero_grads([w])
    t = Tape()
    cur = t.constant(x)
    for _ in range(4):
        cur = block(t, cur)
    backward(t, t.mean(cur))
    np.testing.assert_allclose(pg, w.grad, rtol=1e-12)
