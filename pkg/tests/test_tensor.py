import math
import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from saprlab import tensor as T
from saprlab.errors import ContractError, DimensionError, NumericError
from saprlab.tensor import Tape, Tensor, backward, grad_check


def naive_matmul(a, b):
    m, k = len(a), len(a[0])
    n = len(b[0])
    return [[sum(a[i][p] * b[p][j] for p in range(k)) for j in range(n)] for i in range(m)]


# -- matmul ----------------------------------------------------------------


def test_matmul_identity():
    b = np.array([[5.0, 6.0], [7.0, 8.0]])
    assert np.array_equal(T.matmul(Tensor(np.eye(2)), Tensor(b)).data, b)


def test_matmul_against_triple_loop():
    a, b = [[1.0, 2.0], [3.0, 4.0]], [[5.0, 6.0], [7.0, 8.0]]
    expected = naive_matmul(a, b)
    assert expected == [[19.0, 22.0], [43.0, 50.0]]
    assert T.matmul(Tensor(a), Tensor(b)).data.tolist() == expected


def test_matmul_random_against_triple_loop():
    rng = np.random.default_rng(3)
    a, b = rng.normal(size=(4, 5)), rng.normal(size=(5, 3))
    np.testing.assert_allclose(T.matmul(Tensor(a), Tensor(b)).data, naive_matmul(a.tolist(), b.tolist()),
                               rtol=1e-13)


def test_matmul_zero_annihilates():
    b = np.random.default_rng(0).normal(size=(3, 4))
    assert not T.matmul(Tensor(np.zeros((2, 3))), Tensor(b)).data.any()


def test_matmul_shape_mismatch_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(4, 2\)"):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))


def test_matmul_backward_rule():
    rng = np.random.default_rng(1)
    a = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    b = Tensor(rng.normal(size=(4, 2)), requires_grad=True)
    g = rng.normal(size=(3, 2))
    backward((T.matmul(a, b) * g).sum())
    np.testing.assert_allclose(a.grad, g @ b.data.T, rtol=1e-13)
    np.testing.assert_allclose(b.grad, a.data.T @ g, rtol=1e-13)


# -- softmax ---------------------------------------------------------------


def test_softmax_uniform_row():
    out = T.softmax_rows(Tensor([[3.0, 3.0, 3.0, 3.0]])).data
    np.testing.assert_array_equal(out, [[0.25] * 4])


def test_softmax_closed_form():
    out = T.softmax_rows(Tensor([[0.0, math.log(2.0)]])).data
    # e^0 / (e^0 + e^ln2) = 1/3
    np.testing.assert_allclose(out, [[1 / 3, 2 / 3]], rtol=1e-15)


def test_softmax_shift_invariance():
    a = np.random.default_rng(2).normal(size=(5, 6))
    np.testing.assert_allclose(T.softmax_rows(Tensor(a + 17.5)).data, T.softmax_rows(Tensor(a)).data, atol=1e-15)


def test_softmax_handles_attack_scale_logits():
    out = T.softmax_rows(Tensor([[1000.0, 0.0, -1000.0]])).data
    assert np.isfinite(out).all()
    assert out[0, 0] == pytest.approx(1.0)


def test_softmax_rejects_nan():
    with pytest.raises(NumericError):
        T.softmax_rows(Tensor([[0.0, np.nan]]))


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 8), st.integers(1, 8)),
              elements=st.floats(-50, 50, allow_nan=False)))
def test_softmax_rows_are_distributions(a):
    out = T.softmax_rows(Tensor(a)).data
    np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-12)
    assert (out >= 0).all() and (out <= 1).all()


def test_softmax_entries_strictly_inside_unit_interval_for_moderate_inputs():
    out = T.softmax_rows(Tensor(np.random.default_rng(0).normal(size=(8, 8)))).data
    assert ((out > 0) & (out < 1)).all()


# -- layer norm ------------------------------------------------------------


def test_layer_norm_constant_row_is_zero():
    out = T.layer_norm(Tensor([[4.0, 4.0, 4.0]]), Tensor(np.ones(3)), Tensor(np.zeros(3)), 1e-6).data
    np.testing.assert_array_equal(out, np.zeros((1, 3)))


def test_layer_norm_two_point_row():
    # mean 0, population variance 1 -> standardisation is the identity
    out = T.layer_norm(Tensor([[1.0, -1.0]]), Tensor(np.ones(2)), Tensor(np.zeros(2)), 1e-15).data
    np.testing.assert_allclose(out, [[1.0, -1.0]], rtol=1e-12)


def test_layer_norm_zero_gain_returns_bias():
    bias = np.array([0.5, -2.0, 3.0])
    x = np.random.default_rng(0).normal(size=(4, 3))
    out = T.layer_norm(Tensor(x), Tensor(np.zeros(3)), Tensor(bias)).data
    np.testing.assert_array_equal(out, np.broadcast_to(bias, (4, 3)))


def test_layer_norm_rows_standardised():
    x = np.random.default_rng(5).normal(3.0, 2.0, size=(6, 16))
    out = T.layer_norm(Tensor(x), Tensor(np.ones(16)), Tensor(np.zeros(16)), 1e-12).data
    np.testing.assert_allclose(out.mean(axis=-1), 0.0, atol=1e-12)
    np.testing.assert_allclose(out.var(axis=-1), 1.0, rtol=1e-9)


def test_layer_norm_errors():
    with pytest.raises(DimensionError):
        T.layer_norm(Tensor(np.ones((2, 0))), Tensor(np.ones(0)), Tensor(np.zeros(0)))
    with pytest.raises(DimensionError):
        T.layer_norm(Tensor(np.ones((2, 3))), Tensor(np.ones(2)), Tensor(np.zeros(3)))


# -- backward --------------------------------------------------------------


def test_backward_sum_gives_ones():
    x = Tensor(np.random.default_rng(0).normal(size=(3, 4)), requires_grad=True)
    backward(x.sum())
    np.testing.assert_array_equal(x.grad, np.ones((3, 4)))


def test_backward_dot_gives_two_x():
    v = np.random.default_rng(0).normal(size=7)
    x = Tensor(v, requires_grad=True)
    backward((x * x).sum())
    np.testing.assert_allclose(x.grad, 2 * v, rtol=1e-15)


def test_backward_requires_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ContractError):
        backward(x * 2.0)


def test_backward_accumulates_additively():
    x = Tensor(np.arange(4.0), requires_grad=True)
    loss = (x * x).sum()
    backward(loss)
    first = x.grad.copy()
    backward(loss)
    np.testing.assert_array_equal(x.grad, 2 * first)
    x.zero_grad()
    assert not x.grad.any()


def test_unreachable_tensor_grad_stays_zero():
    x = Tensor(np.ones(3), requires_grad=True)
    unused = Tensor(np.ones(3), requires_grad=True)
    _ = unused * 3.0
    backward((x * 2.0).sum())
    np.testing.assert_array_equal(unused.grad, np.zeros(3))


def test_tape_is_topological_and_visits_each_node_once():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    h = x @ x
    loss = (h + h * x).sum()  # h reached along two paths
    tape = Tape.from_root(loss)
    ids = [id(n) for n in tape]
    assert len(ids) == len(set(ids))
    position = {id(n): i for i, n in enumerate(tape)}
    for node in tape:
        for parent in node._parents:
            if parent.requires_grad:
                assert position[id(parent)] < position[id(node)]


def test_ops_are_deterministic():
    rng = np.random.default_rng(0)
    a = rng.normal(size=(8, 8))
    w = rng.normal(size=(8, 8))

    def run():
        t = Tensor(a, requires_grad=True)
        out = T.layer_norm(T.gelu(t @ Tensor(w)), Tensor(np.ones(8)), Tensor(np.zeros(8)))
        loss = (T.softmax_rows(out) * out).sum()
        backward(loss)
        return loss.data.copy(), t.grad.copy()

    (l1, g1), (l2, g2) = run(), run()
    assert l1.tobytes() == l2.tobytes() and g1.tobytes() == g2.tobytes()


# -- grad_check ------------------------------------------------------------


def test_grad_check_sum_exact():
    x = np.random.default_rng(0).normal(size=(3, 3))
    report = grad_check(lambda t: t.sum(), x, h=1e-3, tol=1e-4)
    assert report.passed
    assert report.max_rel_error < 1e-9


def test_grad_check_softmax_pick():
    x = np.random.default_rng(1).normal(size=(4, 5))
    report = grad_check(lambda t: T.softmax_rows(t)[2, 3], x, h=1e-3, tol=1e-4)
    assert report.passed, report.max_rel_error


def _broken_square(a):
    def wrong(g):
        return (g * a.data,)  # should be 2 * a

    return T._record(a.data * a.data, (a,), wrong, "broken_square")


def test_grad_check_flags_wrong_backward_rule():
    x = np.random.default_rng(2).normal(size=6) + 2.0
    report = grad_check(lambda t: _broken_square(t).sum(), x, h=1e-3, tol=1e-4)
    assert not report.passed
    assert report.max_rel_error > 0.1


# -- finite-difference sweep over every differentiable op -------------------

RNG = np.random.default_rng(12345)
W8 = RNG.normal(size=(8, 8))
G8 = RNG.normal(size=(8,))
B8 = RNG.normal(size=(8,))
PROBE = RNG.normal(size=(8, 8))
PAD_PROBE = RNG.normal(size=(11, 9))


OPS = {
    "add": lambda t: ((t + Tensor(W8)) * Tensor(PROBE)).sum(),
    "sub": lambda t: ((Tensor(W8) - t) * Tensor(PROBE)).sum(),
    "mul": lambda t: (t * t * Tensor(PROBE)).sum(),
    "matmul_left": lambda t: ((t @ Tensor(W8)) * Tensor(PROBE)).sum(),
    "matmul_right": lambda t: ((Tensor(W8) @ t) * Tensor(PROBE)).sum(),
    "transpose": lambda t: (t.transpose(1, 0) * Tensor(PROBE)).sum(),
    "reshape": lambda t: (t.reshape(4, 16) * Tensor(PROBE.reshape(4, 16))).sum(),
    "softmax": lambda t: (T.softmax_rows(t) * Tensor(PROBE)).sum(),
    "log_softmax": lambda t: (T.log_softmax(t) * Tensor(PROBE)).sum(),
    "layer_norm_x": lambda t: (T.layer_norm(t, Tensor(G8), Tensor(B8)) * Tensor(PROBE)).sum(),
    "gelu": lambda t: (T.gelu(t) * Tensor(PROBE)).sum(),
    "exp": lambda t: (T.exp(t * 0.3) * Tensor(PROBE)).sum(),
    "mean": lambda t: (t.mean(axis=0) * Tensor(G8)).sum(),
    "getitem": lambda t: (t[2:5, 1] * Tensor(G8[:3])).sum(),
    "concat": lambda t: (T.concat([t, t * 2.0], axis=0) * Tensor(np.vstack([PROBE, W8]))).sum(),
    "gather_rows": lambda t: (T.gather_rows(t, [3, 3, 0, 1, 7, 2, 2, 5]) * Tensor(PROBE)).sum(),
    "take": lambda t: (T.take(t, [0, 0, 4], axis=1) * Tensor(PROBE[:, :3])).sum(),
    "pad2d": lambda t: (T.pad2d(t, 1, 2, 0, 1) * Tensor(PAD_PROBE)).sum(),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_op_gradient_matches_finite_differences(name):
    x = np.random.default_rng(zlib.crc32(name.encode())).normal(size=(8, 8))
    report = grad_check(OPS[name], x, h=1e-4, tol=1e-4, floor=1e-8)
    assert report.passed, (name, report.max_rel_error)


def test_layer_norm_parameter_gradients():
    x = np.random.default_rng(0).normal(size=(5, 8))
    probe = np.random.default_rng(1).normal(size=(5, 8))
    rg = grad_check(lambda g: (T.layer_norm(Tensor(x), g, Tensor(B8)) * Tensor(probe)).sum(), G8, h=1e-4)
    rb = grad_check(lambda b: (T.layer_norm(Tensor(x), Tensor(G8), b) * Tensor(probe)).sum(), B8, h=1e-4)
    assert rg.passed and rb.passed


def test_conv2d_against_direct_loops_and_gradients():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(2, 3, 6, 6))
    w = rng.normal(size=(4, 3, 3, 3))
    b = rng.normal(size=4)
    out = T.conv2d(Tensor(x), Tensor(w), Tensor(b), padding=1).data
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    ref = np.zeros((2, 4, 6, 6))
    for n in range(2):
        for o in range(4):
            for i in range(6):
                for j in range(6):
                    ref[n, o, i, j] = (xp[n, :, i : i + 3, j : j + 3] * w[o]).sum() + b[o]
    np.testing.assert_allclose(out, ref, rtol=1e-12)
    probe = rng.normal(size=(2, 4, 6, 6))
    rx = grad_check(lambda t: (T.conv2d(t, Tensor(w), Tensor(b), 1) * Tensor(probe)).sum(), x, h=1e-4,
                    num_coords=40)
    rw = grad_check(lambda t: (T.conv2d(Tensor(x), t, Tensor(b), 1) * Tensor(probe)).sum(), w, h=1e-4,
                    num_coords=40)
    assert rx.passed and rw.passed


def test_masked_gather_gradient():
    rng = np.random.default_rng(8)
    x = rng.normal(size=(2, 3, 10))
    index = rng.integers(0, 10, size=(2, 12))
    mask = rng.random((2, 12)) < 0.7
    probe = rng.normal(size=(2, 3, 12))
    report = grad_check(lambda t: (T.masked_gather(t, index, mask) * Tensor(probe)).sum(), x, h=1e-4)
    assert report.passed
    out = T.masked_gather(Tensor(x), index, mask).data
    assert (out[:, :, ~mask[0]][0] == 0).all()
