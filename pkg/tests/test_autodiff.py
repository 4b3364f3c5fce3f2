import numpy as np
import pytest
import scipy.sparse as sp

import ibrec.autodiff as ad
from ibrec.errors import NumericalError


def central_diff(f, x, h=1e-5):
    """Independent central-difference gradient of scalar f at array x."""
    g = np.zeros_like(x)
    for idx in np.ndindex(*x.shape):
        orig = x[idx]
        x[idx] = orig + h
        fp = f(x)
        x[idx] = orig - h
        fm = f(x)
        x[idx] = orig
        g[idx] = (fp - fm) / (2 * h)
    return g


def rel_err(analytic, numeric):
    return np.max(np.abs(analytic - numeric) / (np.abs(numeric) + 1e-8))


# --- mat_mul ---------------------------------------------------------------

def test_matmul_identity():
    t = ad.Tape()
    m = t.constant([[1.0, 2.0], [3.0, 4.0]])
    eye = t.constant(np.eye(2))
    out = ad.matmul(eye, m)
    assert np.array_equal(out.value, m.value)


def test_matmul_hand_case():
    t = ad.Tape()
    a = t.constant([[1.0, 2.0], [3.0, 4.0]])
    b = t.constant([[0.0], [1.0]])
    out = ad.matmul(a, b)
    assert np.array_equal(out.value, [[2.0], [4.0]])


def test_matmul_gradient_matches_finite_difference():
    rng = np.random.default_rng(0)
    a0 = rng.standard_normal((3, 4))
    b0 = rng.standard_normal((4, 2))

    def f(a):
        return float((a @ b0).sum())

    t = ad.Tape()
    a = t.parameter(a0.copy())
    b = t.constant(b0)
    loss = ad.sum_all(ad.matmul(a, b))
    t.backward(loss)
    assert rel_err(a.grad, central_diff(f, a0.copy())) < 1e-6


def test_matmul_shape_mismatch():
    t = ad.Tape()
    a = t.constant(np.ones((2, 3)))
    b = t.constant(np.ones((2, 3)))
    with pytest.raises(ValueError):
        ad.matmul(a, b)


def test_matmul_associative():
    rng = np.random.default_rng(1)
    t = ad.Tape()
    a = t.constant(rng.uniform(-1, 1, (5, 6)))
    b = t.constant(rng.uniform(-1, 1, (6, 4)))
    c = t.constant(rng.uniform(-1, 1, (4, 3)))
    left = ad.matmul(ad.matmul(a, b), c).value
    right = ad.matmul(a, ad.matmul(b, c)).value
    assert np.max(np.abs(left - right)) < 1e-10


# --- elementwise -----------------------------------------------------------

def test_sigmoid_at_zero():
    t = ad.Tape()
    out = ad.sigmoid(t.constant([[0.0]]))
    assert out.value[0, 0] == 0.5


def test_log_exp_inverse():
    t = ad.Tape()
    out = ad.log(ad.exp(t.constant([[1.7]])))
    assert abs(out.value[0, 0] - 1.7) < 1e-15


def test_sigmoid_gradient_matches_finite_difference():
    x0 = np.array([[2.0]])

    def f(x):
        return float(1.0 / (1.0 + np.exp(-x[0, 0])))

    t = ad.Tape()
    x = t.parameter(x0.copy())
    loss = ad.sum_all(ad.sigmoid(x))
    t.backward(loss)
    assert rel_err(x.grad, central_diff(f, x0.copy())) < 1e-6


def test_log_rejects_non_positive():
    t = ad.Tape()
    with pytest.raises(ValueError):
        ad.log(t.constant([[1.0, 0.0]]))


def test_binary_shape_mismatch():
    t = ad.Tape()
    with pytest.raises(ValueError):
        ad.add(t.constant(np.ones((2, 2))), t.constant(np.ones((2, 3))))


@pytest.mark.parametrize("fn,xv", [
    (ad.exp, 0.3), (ad.log, 0.7), (ad.tanh, -0.4), (ad.softplus, 0.9),
    (ad.sqrt, 2.1), (ad.absolute, -1.3), (ad.sigmoid, 0.2),
])
def test_unary_gradients(fn, xv):
    x0 = np.array([[xv]])

    def f(x):
        t = ad.Tape()
        return float(fn(t.constant(x.copy())).value[0, 0])

    t = ad.Tape()
    x = t.parameter(x0.copy())
    t.backward(ad.sum_all(fn(x)))
    assert rel_err(x.grad, central_diff(f, x0.copy())) < 1e-6


# --- row_gather ------------------------------------------------------------

def test_row_gather_selects():
    t = ad.Tape()
    m = t.constant([[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]])
    out = ad.row_gather(m, [1])
    assert np.array_equal(out.value, [[3.0, 4.0]])


def test_row_gather_duplicate_indices_double_gradient():
    t = ad.Tape()
    m = t.parameter(np.ones((3, 2)))
    loss = ad.sum_all(ad.row_gather(m, [0, 0]))
    t.backward(loss)
    assert np.array_equal(m.grad, [[2.0, 2.0], [0.0, 0.0], [0.0, 0.0]])


def test_row_gather_empty():
    t = ad.Tape()
    m = t.constant(np.ones((3, 2)))
    out = ad.row_gather(m, [])
    assert out.shape == (0, 2)


def test_row_gather_out_of_range():
    t = ad.Tape()
    m = t.constant(np.ones((3, 2)))
    with pytest.raises(IndexError):
        ad.row_gather(m, [3])


def test_row_gather_conserves_gradient_mass():
    rng = np.random.default_rng(2)
    t = ad.Tape()
    m = t.parameter(rng.standard_normal((6, 3)))
    idx = rng.integers(0, 6, size=10)
    picked = ad.row_gather(m, idx)
    weights = t.constant(rng.standard_normal((10, 3)))
    t.backward(ad.sum_all(ad.mul(picked, weights)))
    assert abs(m.grad.sum() - weights.value.sum()) < 1e-12


# --- sparse_mat_mul --------------------------------------------------------

def test_sparse_identity():
    t = ad.Tape()
    d = t.constant([[1.0, 2.0], [3.0, 4.0]])
    out = ad.sparse_mat_mul(sp.identity(2, format="csr"), d)
    assert np.array_equal(out.value, d.value)


def test_sparse_permutation_swaps_rows():
    t = ad.Tape()
    d = t.constant([[1.0, 2.0], [3.0, 4.0]])
    swap = sp.csr_matrix(np.array([[0.0, 1.0], [1.0, 0.0]]))
    out = ad.sparse_mat_mul(swap, d)
    assert np.array_equal(out.value, [[3.0, 4.0], [1.0, 2.0]])


def test_sparse_gradient_matches_finite_difference():
    rng = np.random.default_rng(3)
    s = sp.random(4, 5, density=0.5, random_state=7, format="csr")
    d0 = rng.standard_normal((5, 2))
    w = rng.standard_normal((4, 2))

    def f(d):
        return float(((s @ d) * w).sum())

    t = ad.Tape()
    d = t.parameter(d0.copy())
    loss = ad.sum_all(ad.mul(ad.sparse_mat_mul(s, d), t.constant(w)))
    t.backward(loss)
    assert rel_err(d.grad, central_diff(f, d0.copy())) < 1e-6


def test_sparse_shape_mismatch():
    t = ad.Tape()
    d = t.constant(np.ones((3, 2)))
    with pytest.raises(ValueError):
        ad.sparse_mat_mul(sp.identity(2, format="csr"), d)


# --- l2_row_normalize ------------------------------------------------------

def test_l2_row_normalize_hand_case():
    t = ad.Tape()
    out = ad.l2_row_normalize(t.constant([[3.0, 4.0]]), 1e-12)
    assert np.allclose(out.value, [[0.6, 0.8]], atol=1e-15)


def test_l2_row_normalize_zero_row():
    t = ad.Tape()
    out = ad.l2_row_normalize(t.constant([[0.0, 0.0]]), 1e-12)
    assert np.array_equal(out.value, [[0.0, 0.0]])


def test_l2_row_normalize_unit_row_unchanged():
    t = ad.Tape()
    out = ad.l2_row_normalize(t.constant([[1.0, 0.0]]), 1e-12)
    assert np.array_equal(out.value, [[1.0, 0.0]])


def test_l2_row_normalize_gradient():
    rng = np.random.default_rng(4)
    x0 = rng.standard_normal((3, 4))
    w = rng.standard_normal((3, 4))

    def f(x):
        n = np.maximum(np.linalg.norm(x, axis=1, keepdims=True), 1e-12)
        return float((x / n * w).sum())

    t = ad.Tape()
    x = t.parameter(x0.copy())
    loss = ad.sum_all(ad.mul(ad.l2_row_normalize(x, 1e-12), t.constant(w)))
    t.backward(loss)
    assert rel_err(x.grad, central_diff(f, x0.copy())) < 1e-6


# --- pairwise_sqdist -------------------------------------------------------

def test_pairwise_sqdist_exact_zero_for_identical_rows():
    t = ad.Tape()
    x = t.constant(np.tile([[0.3, -1.2, 0.7]], (4, 1)))
    d = ad.pairwise_sqdist(x)
    assert np.all(d.value == 0.0)


def test_pairwise_sqdist_matches_brute_force():
    rng = np.random.default_rng(5)
    xv = rng.standard_normal((7, 3))
    t = ad.Tape()
    d = ad.pairwise_sqdist(t.constant(xv)).value
    brute = np.array([[np.sum((xi - xj) ** 2) for xj in xv] for xi in xv])
    assert np.allclose(d, brute, atol=1e-12)
    assert np.array_equal(d, d.T)
    assert np.all(np.diag(d) == 0.0)


def test_pairwise_sqdist_gradient():
    rng = np.random.default_rng(6)
    x0 = rng.standard_normal((5, 3))
    w = rng.standard_normal((5, 5))

    def f(x):
        d = ((x[:, None, :] - x[None, :, :]) ** 2).sum(axis=2)
        return float((d * w).sum())

    t = ad.Tape()
    x = t.parameter(x0.copy())
    loss = ad.sum_all(ad.mul(ad.pairwise_sqdist(x), t.constant(w)))
    t.backward(loss)
    assert rel_err(x.grad, central_diff(f, x0.copy())) < 1e-6


# --- edge_spmm -------------------------------------------------------------

def test_edge_spmm_matches_dense_and_gradients():
    rng = np.random.default_rng(7)
    rows = np.array([0, 0, 1, 2])
    cols = np.array([1, 2, 0, 2])
    v0 = rng.standard_normal((4, 1))
    d0 = rng.standard_normal((3, 2))
    w = rng.standard_normal((3, 2))

    def build(v, d):
        dense = np.zeros((3, 3))
        dense[rows, cols] = v[:, 0]
        return dense @ d

    def f_v(v):
        return float((build(v, d0) * w).sum())

    def f_d(d):
        return float((build(v0, d) * w).sum())

    t = ad.Tape()
    v = t.parameter(v0.copy())
    d = t.parameter(d0.copy())
    out = ad.edge_spmm(rows, cols, 3, v, d)
    assert np.allclose(out.value, build(v0, d0), atol=1e-14)
    t.backward(ad.sum_all(ad.mul(out, t.constant(w))))
    assert rel_err(v.grad, central_diff(f_v, v0.copy())) < 1e-6
    assert rel_err(d.grad, central_diff(f_d, d0.copy())) < 1e-6


# --- backward --------------------------------------------------------------

def test_backward_linear_loss_gives_ones():
    t = ad.Tape()
    p = t.parameter(np.arange(6.0).reshape(2, 3))
    t.backward(ad.sum_all(p))
    assert np.array_equal(p.grad, np.ones((2, 3)))


def test_backward_disconnected_parameter_gets_zero_grad():
    t = ad.Tape()
    p = t.parameter(np.ones((2, 2)))
    q = t.parameter(np.ones((3, 2)))
    t.backward(ad.sum_all(p))
    assert np.array_equal(q.grad, np.zeros((3, 2)))


def test_backward_rejects_non_scalar_loss():
    t = ad.Tape()
    p = t.parameter(np.ones((2, 2)))
    with pytest.raises(ValueError):
        t.backward(p)


def test_composite_graph_gradient():
    # Deep composite expression exercising most primitives at once.
    rng = np.random.default_rng(8)
    a0 = rng.standard_normal((4, 3)) * 0.5
    b0 = rng.standard_normal((3, 3)) * 0.5

    def run(a_arr, b_arr, want_grads):
        t = ad.Tape()
        a = t.parameter(a_arr.copy())
        b = t.parameter(b_arr.copy())
        h = ad.tanh(ad.matmul(a, b))
        h = ad.l2_row_normalize(ad.concat_cols(h, ad.sigmoid(a)), 1e-12)
        k = ad.exp(ad.scale(ad.pairwise_sqdist(h), -0.5))
        picked = ad.row_gather(k, [0, 2, 2])
        loss = ad.scale(ad.sum_all(ad.softplus(picked)), 1.0 / 3)
        if want_grads:
            t.backward(loss)
            return float(loss.value[0, 0]), [a.grad, b.grad]
        return float(loss.value[0, 0]), None

    err = ad.finite_diff_check(
        lambda ps: run(ps[0], ps[1], True), [a0, b0], h=1e-5)
    assert err < 1e-4


def test_forward_is_pure_and_deterministic():
    rng = np.random.default_rng(9)
    a0 = rng.standard_normal((5, 4))

    def run():
        t = ad.Tape()
        a = t.constant(a0)
        out = ad.l2_row_normalize(ad.exp(ad.scale(ad.pairwise_sqdist(a), -0.1)), 1e-12)
        return out.value

    first, second = run(), run()
    assert np.array_equal(first, second)


def test_non_finite_rejected_at_creation():
    t = ad.Tape()
    big = t.constant(np.full((1, 1), 1e308))
    with pytest.raises(NumericalError):
        ad.exp(big)


# --- finite_diff_check -----------------------------------------------------

def test_finite_diff_check_quadratic():
    def f(params):
        x = params[0][0, 0]
        return x * x, [np.array([[2.0 * x]])]

    err = ad.finite_diff_check(f, [np.array([[3.0]])], h=1e-5)
    assert err < 1e-8


def test_finite_diff_check_constant():
    def f(params):
        return 1.0, [np.zeros((2, 2))]

    assert ad.finite_diff_check(f, [np.zeros((2, 2))], h=1e-5) == 0.0
