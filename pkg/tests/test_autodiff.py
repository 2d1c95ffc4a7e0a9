"""Finite-difference verification of every autodiff primitive.

All checks run in float64 so central differences resolve to rtol 1e-3 /
atol 1e-6. Production graphs default to float32; precision is a property
of the leaves, not the engine.
"""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from advaudio import autodiff as ad
from advaudio.errors import ContractError

RNG = np.random.default_rng(20260815)


def fd_check(build, x0, n_coords=16, h=1e-6, rtol=1e-3, atol=1e-6):
    """Compare backward() against central differences at random coordinates.

    build(tape, x_tensor) -> scalar loss tensor. x0 is the float64 leaf value.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    tape = ad.Tape()
    x = tape.leaf(x0.copy())
    loss = build(tape, x)
    grad = tape.backward(loss)[x]
    assert grad.shape == x0.shape

    flat = x0.ravel()
    coords = RNG.choice(flat.size, size=min(n_coords, flat.size), replace=False)
    for c in coords:
        xp = flat.copy()
        xm = flat.copy()
        xp[c] += h
        xm[c] -= h
        tp = ad.Tape()
        lp = build(tp, tp.leaf(xp.reshape(x0.shape))).values.item()
        tm = ad.Tape()
        lm = build(tm, tm.leaf(xm.reshape(x0.shape))).values.item()
        fd = (lp - lm) / (2 * h)
        got = grad.ravel()[c]
        assert got == pytest.approx(fd, rel=rtol, abs=atol), (
            f"coord {c}: analytic {got} vs fd {fd}"
        )


def _rand(*shape):
    return RNG.normal(size=shape)


def test_sum_of_squares_value_and_grad():
    tape = ad.Tape()
    x = tape.leaf(np.array([1.0, 2.0]))
    loss = ad.sum_(ad.square(x))
    assert loss.values.item() == pytest.approx(5.0)
    g = tape.backward(loss)[x]
    np.testing.assert_allclose(g, [2.0, 4.0])


def test_add_sub_mul_div():
    y = _rand(5) + 3.0
    fd_check(lambda t, x: ad.sum_(ad.div(ad.mul(ad.add(x, 1.5), ad.sub(x, 0.5)),
                                         t.leaf(y))), _rand(5))


def test_broadcasting_binary_ops():
    b = _rand(1, 4)

    def build(t, x):
        return ad.sum_(ad.square(ad.add(x, t.leaf(b))))

    fd_check(build, _rand(3, 4))


def test_neg_sqrt_exp_log_abs():
    fd_check(lambda t, x: ad.sum_(ad.neg(ad.sqrt(ad.exp(x)))), _rand(6))
    fd_check(lambda t, x: ad.sum_(ad.log(ad.add(ad.abs_(x), 1.0))),
             _rand(6) + 0.2)


def test_relu_gelu():
    x0 = np.linspace(-2.0, 2.0, 9)
    x0 = x0[np.abs(x0) > 1e-3]  # keep away from the relu kink
    fd_check(lambda t, x: ad.sum_(ad.relu(x)), x0)
    fd_check(lambda t, x: ad.sum_(ad.gelu(x)), _rand(16))


def test_clip_gradient_convention():
    # inside and exactly at the boundary pass gradient, strictly outside blocks
    tape = ad.Tape()
    x = tape.leaf(np.array([-2.0, -1.0, 0.0, 1.0, 2.0]))
    loss = ad.sum_(ad.clip(x, -1.0, 1.0))
    g = tape.backward(loss)[x]
    np.testing.assert_allclose(g, [0.0, 1.0, 1.0, 1.0, 0.0])


def test_clip_interior_fd():
    x0 = RNG.uniform(-0.8, 0.8, size=12)
    fd_check(lambda t, x: ad.sum_(ad.square(ad.clip(x, -1.0, 1.0))), x0)


def test_reductions():
    fd_check(lambda t, x: ad.mean_(ad.square(x)), _rand(7))
    fd_check(lambda t, x: ad.sum_(ad.mean_(x, axis=1)), _rand(3, 5))
    fd_check(lambda t, x: ad.sum_(ad.sum_(ad.square(x), axis=0, keepdims=True)),
             _rand(4, 3))


def test_max_reduce_unique():
    x0 = np.array([[0.1, 0.9, -0.3], [1.2, -0.7, 0.4]])
    fd_check(lambda t, x: ad.sum_(ad.max_reduce(x, axis=1)), x0)


def test_max_reduce_ties_split():
    tape = ad.Tape()
    x = tape.leaf(np.array([2.0, 2.0, 1.0]))
    loss = ad.max_reduce(x)
    g = tape.backward(loss)[x]
    np.testing.assert_allclose(g, [0.5, 0.5, 0.0])


def test_matmul():
    w = _rand(4, 3)

    def build(t, x):
        return ad.sum_(ad.square(ad.matmul(x, t.leaf(w))))

    fd_check(build, _rand(5, 4))

    def build_w(t, x):
        return ad.sum_(ad.square(ad.matmul(t.leaf(_m), x)))

    _m = _rand(5, 4)
    fd_check(build_w, _rand(4, 3))


def test_matmul_batched():
    w = _rand(2, 4, 3)
    fd_check(lambda t, x: ad.sum_(ad.square(ad.matmul(x, t.leaf(w)))),
             _rand(2, 5, 4))


def test_matmul_shape_error():
    tape = ad.Tape()
    a = tape.leaf(_rand(2, 3))
    b = tape.leaf(_rand(4, 2))
    with pytest.raises(ContractError):
        ad.matmul(a, b)


def test_conv1d():
    w = _rand(5, 3, 2)
    fd_check(lambda t, x: ad.sum_(ad.square(ad.conv1d(x, t.leaf(w), stride=2))),
             _rand(17, 3))
    x0 = _rand(17, 3)
    fd_check(lambda t, w_: ad.sum_(ad.square(ad.conv1d(t.leaf(x0), w_, stride=2))),
             _rand(5, 3, 2))


def test_conv1d_short_input():
    tape = ad.Tape()
    with pytest.raises(ContractError):
        ad.conv1d(tape.leaf(_rand(3, 2)), tape.leaf(_rand(5, 2, 4)))


def test_softmax_uniform():
    tape = ad.Tape()
    x = tape.leaf(np.zeros(64))
    p = ad.softmax(x)
    np.testing.assert_allclose(p.values, np.full(64, 1.0 / 64), rtol=1e-12)


def test_softmax_log_softmax_grads():
    tgt = ad.constant(np.eye(6)[2], dtype=np.float64)
    fd_check(lambda t, x: ad.neg(ad.sum_(ad.mul(ad.log_softmax(x), tgt))),
             _rand(6))
    fd_check(lambda t, x: ad.sum_(ad.square(ad.softmax(x, axis=-1))), _rand(2, 5))


def test_log_softmax_matches_log_of_softmax():
    x = _rand(3, 7)
    a = ad.log_softmax(ad.constant(x, dtype=np.float64)).values
    b = np.log(ad.softmax(ad.constant(x, dtype=np.float64)).values)
    np.testing.assert_allclose(a, b, rtol=1e-10)


def test_reshape_swapaxes_slice_concat():
    fd_check(lambda t, x: ad.sum_(ad.square(ad.reshape(x, (6, 2)))), _rand(3, 4))
    fd_check(lambda t, x: ad.sum_(ad.square(ad.swapaxes(x, 0, 1))), _rand(3, 4))
    fd_check(lambda t, x: ad.sum_(ad.square(ad.slice_(x, (slice(1, 3),)))),
             _rand(5, 2))

    def build(t, x):
        parts = [ad.slice_(x, (slice(0, 2),)), ad.slice_(x, (slice(2, 5),))]
        return ad.sum_(ad.square(ad.concat(parts, axis=0)))

    fd_check(build, _rand(5, 3))


def test_gather():
    idx = np.array([0, 2, 2, 1])

    def build(t, x):
        return ad.sum_(ad.square(ad.gather(x, idx)))

    fd_check(build, _rand(4, 3))
    # repeated index accumulates
    tape = ad.Tape()
    e = tape.leaf(np.ones((3, 2)))
    loss = ad.sum_(ad.gather(e, np.array([1, 1])))
    g = tape.backward(loss)[e]
    np.testing.assert_allclose(g, [[0, 0], [2, 2], [0, 0]])


def test_reflect_pad_frame_overlap_add():
    fd_check(lambda t, x: ad.sum_(ad.square(ad.reflect_pad(x, 4))), _rand(12))
    fd_check(lambda t, x: ad.sum_(ad.square(ad.frame(x, 8, 4))), _rand(20))

    def build(t, x):
        f = ad.frame(x, 8, 4)
        y = ad.overlap_add(f, 4, 20)
        return ad.sum_(ad.square(y))

    fd_check(build, _rand(20))


def test_overlap_add_is_adjoint_of_frame():
    # <frame(x), F> == <x, overlap_add(F)> for random F
    x = RNG.normal(size=32)
    F = RNG.normal(size=(7, 8))
    fx = ad.frame(ad.constant(x, dtype=np.float64), 8, 4).values
    oF = ad.overlap_add(ad.constant(F, dtype=np.float64), 4, 32).values
    assert np.vdot(fx, F) == pytest.approx(np.vdot(x, oF), rel=1e-12)


def test_stop_gradient_blocks():
    tape = ad.Tape()
    x = tape.leaf(np.array([1.0, 2.0]))
    y = ad.stop_gradient(ad.square(x))
    loss = ad.sum_(ad.mul(x, y))
    g = tape.backward(loss)[x]
    np.testing.assert_allclose(g, [1.0, 4.0])  # y treated as a constant


def test_constants_get_no_gradient():
    tape = ad.Tape()
    x = tape.leaf(np.array([1.0, 2.0]))
    c = ad.constant([3.0, 4.0], dtype=np.float64)
    loss = ad.sum_(ad.mul(x, c))
    grads = tape.backward(loss)
    np.testing.assert_allclose(grads[x], [3.0, 4.0])
    with pytest.raises(ContractError):
        grads[c]


def test_unreached_leaf_gets_zeros():
    tape = ad.Tape()
    x = tape.leaf(np.array([1.0, 2.0]))
    y = tape.leaf(np.array([5.0]))
    loss = ad.sum_(ad.square(x))
    g = tape.backward(loss)[y]
    np.testing.assert_allclose(g, [0.0])


def test_two_tapes_mixing_raises():
    t1, t2 = ad.Tape(), ad.Tape()
    a = t1.leaf(np.ones(3))
    b = t2.leaf(np.ones(3))
    with pytest.raises(ContractError):
        ad.add(a, b)


def test_backward_requires_scalar():
    tape = ad.Tape()
    x = tape.leaf(np.ones(3))
    with pytest.raises(ContractError):
        tape.backward(ad.square(x))


def test_sgd_step():
    v = np.array([1.0, 2.0], dtype=np.float32)
    g = np.array([10.0, -10.0], dtype=np.float32)
    out = ad.sgd_step(v, g, 0.1)
    np.testing.assert_allclose(out, [0.0, 3.0], atol=1e-7)
    assert out.dtype == np.float32
    with pytest.raises(ContractError):
        ad.sgd_step(v, np.ones(3, dtype=np.float32), 0.1)


def test_sgd_step_identities():
    v = RNG.normal(size=8)
    # zero gradient -> identity
    np.testing.assert_array_equal(ad.sgd_step(v, np.zeros(8), 0.5), v)
    # one arithmetic step at the attack's default learning rate
    out = ad.sgd_step(np.zeros(1), np.ones(1), 0.0002)
    assert out[0] == pytest.approx(-0.0002, rel=1e-12)
    # constant gradient: two steps of lr a == one step of 2a
    g = RNG.normal(size=8)
    two = ad.sgd_step(ad.sgd_step(v, g, 0.3), g, 0.3)
    one = ad.sgd_step(v, g, 0.6)
    np.testing.assert_allclose(two, one, rtol=1e-12)


def test_composed_forward_matches_standalone():
    x = RNG.normal(size=(4, 3))
    w = RNG.normal(size=(3, 5))
    b = RNG.normal(size=5)
    tape = ad.Tape()
    xt = tape.leaf(x)
    y = ad.relu(ad.add(ad.matmul(xt, ad.constant(w, dtype=np.float64)),
                       ad.constant(b, dtype=np.float64)))
    z = ad.mean_(ad.exp(ad.mul(y, 0.1)))
    expect = np.mean(np.exp(0.1 * np.maximum(x @ w + b, 0.0)))
    assert z.values.item() == pytest.approx(expect, rel=1e-12)


def test_float32_graph_stays_float32():
    tape = ad.Tape()
    x = tape.leaf(np.ones(4, dtype=np.float32))
    y = ad.mul(ad.add(x, 1.0), 2.0)
    assert y.dtype == np.float32
    loss = ad.sum_(ad.square(y))
    g = tape.backward(loss)[x]
    assert g.dtype == np.float32


@settings(max_examples=25, deadline=None)
@given(st.integers(min_value=1, max_value=40), st.integers(min_value=0, max_value=10**6))
def test_chain_rule_linear_scaling(n, seed):
    # gradient of c * sum(x) is exactly c everywhere, any shape
    rng = np.random.default_rng(seed)
    c = float(rng.uniform(-3, 3))
    tape = ad.Tape()
    x = tape.leaf(rng.normal(size=n))
    loss = ad.mul(ad.sum_(x), c)
    g = tape.backward(loss)[x]
    np.testing.assert_allclose(g, np.full(n, c), rtol=1e-12)


@settings(max_examples=20, deadline=None)
@given(st.integers(min_value=2, max_value=64))
def test_softmax_sums_to_one(n):
    x = RNG.normal(size=n) * 5
    p = ad.softmax(ad.constant(x, dtype=np.float64)).values
    assert p.sum() == pytest.approx(1.0, rel=1e-10)
    assert (p > 0).all()
