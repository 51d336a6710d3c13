import math

import numpy as np
import pytest

from gnnood import tensor as T
from gnnood.errors import ConfigError, DataError, ProtocolError, ShapeError, UsageError
from gnnood.rng import make_rng

from oracles import cross_entropy_mp, fd_gradient, grad_close, naive_matmul, softmax_mp


def random_csr(seed, n=10, m=10, density=0.3, self_loops=True):
    rng = np.random.default_rng(seed)
    dense = np.where(rng.random((n, m)) < density, rng.standard_normal((n, m)), 0.0)
    if self_loops:
        np.fill_diagonal(dense, rng.uniform(0.5, 1.5, size=min(n, m)))
    return T.SparseMatrix.from_dense(dense)


# matmul / spmm


def test_matmul_identity_and_small():
    b = T.DenseMatrix([[3, 4], [5, 6]])
    assert np.array_equal(T.matmul(T.DenseMatrix(np.eye(2)), b).data, [[3, 4], [5, 6]])
    assert T.matmul(T.DenseMatrix([[1, 2]]), T.DenseMatrix([[3], [4]])).data.tolist() == [[11.0]]


def test_matmul_matches_naive_oracle():
    rng = np.random.default_rng(0)
    a, b = rng.standard_normal((5, 4)), rng.standard_normal((4, 3))
    np.testing.assert_allclose(T.matmul(T.DenseMatrix(a), T.DenseMatrix(b)).data, naive_matmul(a, b),
                               rtol=0, atol=1e-14)
    # the ordered kernel accumulates exactly like the naive loop
    assert np.array_equal(T.ordered_matmul(a, b), naive_matmul(a, b))


def test_matmul_shape_error_names_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 2\)"):
        T.matmul(T.DenseMatrix(np.ones((2, 3))), T.DenseMatrix(np.ones((2, 2))))


def test_spmm_identity_and_two_node():
    d = T.DenseMatrix(np.arange(6.0).reshape(3, 2))
    assert np.array_equal(T.spmm(T.SparseMatrix.from_dense(np.eye(3)), d).data, d.data)
    a = T.SparseMatrix.from_dense([[0.5, 0.5], [0.5, 0.5]])
    assert np.array_equal(T.spmm(a, T.DenseMatrix(np.eye(2))).data, [[0.5, 0.5], [0.5, 0.5]])


@pytest.mark.parametrize("seed", range(10))
def test_spmm_bit_identical_to_dense(seed):
    s = random_csr(seed)
    d = T.DenseMatrix(np.random.default_rng(100 + seed).standard_normal((10, 4)))
    assert np.array_equal(T.spmm(s, d).data, T.matmul(T.DenseMatrix(s.to_dense()), d).data)


def test_spmm_shape_error():
    with pytest.raises(ShapeError):
        T.spmm(T.SparseMatrix.from_dense(np.eye(3)), T.DenseMatrix(np.ones((2, 2))))


# sparse containers


def test_csr_invariants_rejected():
    with pytest.raises(ShapeError):
        T.SparseMatrix.from_csr(2, 2, [0, 2, 1], [0, 1], [1.0, 1.0])
    with pytest.raises(ShapeError):
        T.SparseMatrix.from_csr(1, 3, [0, 2], [2, 1], [1.0, 1.0])
    with pytest.raises(ShapeError):
        T.SparseMatrix.from_coo(2, 2, [0, 0], [1, 1], [1.0, 2.0])


def test_sparse_dense_roundtrip():
    s = random_csr(3)
    assert np.array_equal(T.SparseMatrix.from_dense(s.to_dense()).to_dense(), s.to_dense())
    assert s.row_ptr[-1] == s.nnz == len(s.col_idx)


def test_values_are_read_only():
    m = T.DenseMatrix(np.ones((2, 2)))
    with pytest.raises(ValueError):
        m.data[0, 0] = 3.0


# softmax


def test_masked_row_softmax_examples():
    single = T.masked_row_softmax(T.SparseMatrix.from_csr(1, 1, [0, 1], [0], [7.3]))
    assert single.values.tolist() == [1.0]
    pair = T.masked_row_softmax(T.SparseMatrix.from_csr(1, 2, [0, 2], [0, 1], [0.0, 0.0]))
    assert pair.values.tolist() == [0.5, 0.5]
    three = T.masked_row_softmax(T.SparseMatrix.from_csr(1, 3, [0, 3], [0, 1, 2], [1.0, 2.0, 3.0]))
    np.testing.assert_allclose(three.values, softmax_mp([1, 2, 3]), rtol=0, atol=1e-15)


def test_masked_row_softmax_rows_and_shift_invariance():
    s = random_csr(7, n=30, m=30)
    out = T.masked_row_softmax(s)
    assert np.max(np.abs(out.row_sums() - 1.0)) < 1e-12
    shift = np.random.default_rng(1).standard_normal(30)[s.pattern.row_idx] * 50
    moved = T.masked_row_softmax(s.with_values(s.values + shift))
    assert np.max(np.abs(moved.values - out.values)) < 1e-12


def test_masked_row_softmax_empty_row_is_protocol_error():
    with pytest.raises(ProtocolError, match="row 1"):
        T.masked_row_softmax(T.SparseMatrix.from_csr(2, 2, [0, 1, 1], [0], [1.0]))


# elementwise


def test_relu_leaky_and_dropout():
    assert T.relu(T.DenseMatrix([[-1, 2]])).data.tolist() == [[0, 2]]
    assert T.leaky_relu(T.DenseMatrix([[-10, 10]]), 0.2).data.tolist() == [[-2, 10]]
    x = T.DenseMatrix(np.random.default_rng(0).standard_normal((5, 5)))
    assert T.dropout(x, 0.0, make_rng(0, "d"), True) is x
    assert T.dropout(x, 0.7, make_rng(0, "d"), False) is x
    a = T.dropout(x, 0.5, make_rng(3, "d"), True).data
    b = T.dropout(x, 0.5, make_rng(3, "d"), True).data
    assert np.array_equal(a, b)
    kept = a != 0
    np.testing.assert_array_equal(a[kept], x.data[kept] * 2.0)


@pytest.mark.parametrize("rate", [-0.1, 1.0, 1.5])
def test_dropout_rate_out_of_range(rate):
    with pytest.raises(ConfigError):
        T.dropout(T.DenseMatrix([[1.0]]), rate, make_rng(0), True)


def test_add_broadcasts_bias_row():
    out = T.add(T.DenseMatrix(np.zeros((3, 2))), T.DenseMatrix([[1.0, 2.0]]))
    assert out.data.tolist() == [[1, 2]] * 3


# losses


def test_softmax_cross_entropy_examples():
    assert T.softmax_cross_entropy(T.DenseMatrix([[1000.0, 0.0]]), [0], [0]).item() < 1e-9
    assert T.softmax_cross_entropy(T.DenseMatrix([[0.0, 0.0]]), [0], [0]).item() == pytest.approx(math.log(2),
                                                                                                   abs=1e-15)
    rng = np.random.default_rng(5)
    z, y = rng.standard_normal((6, 3)), rng.integers(0, 3, 6)
    got = T.softmax_cross_entropy(T.DenseMatrix(z), y, np.arange(6)).item()
    assert got == pytest.approx(cross_entropy_mp(z, y, range(6)), abs=1e-14)


def test_softmax_cross_entropy_errors():
    with pytest.raises(ProtocolError):
        T.softmax_cross_entropy(T.DenseMatrix([[0.0, 1.0]]), [0], [])
    with pytest.raises(DataError):
        T.softmax_cross_entropy(T.DenseMatrix([[0.0, 1.0]]), [2], [0])


# tape


def test_backward_sum_and_square():
    w0 = np.random.default_rng(0).standard_normal((3, 4))
    tape = T.Tape()
    w = tape.watch(w0, "w")
    assert np.array_equal(tape.backward(T.sum_all(w))["w"], np.ones((3, 4)))
    tape = T.Tape()
    w = tape.watch(w0, "w")
    g = tape.backward(T.scale(T.sum_all(T.mul(w, w)), 0.5))["w"]
    np.testing.assert_allclose(g, w0, rtol=0, atol=1e-15)


def test_unused_parameter_gets_exact_zero():
    tape = T.Tape()
    w = tape.watch(np.ones((2, 2)), "w")
    tape.watch(np.ones((3, 1)), "unused")
    grads = tape.backward(T.sum_all(w))
    assert np.array_equal(grads["unused"], np.zeros((3, 1)))


def test_backward_usage_errors():
    tape = T.Tape()
    with pytest.raises(UsageError):
        tape.backward(T.sum_all(T.DenseMatrix([[1.0]])))
    w = tape.watch(np.ones((2, 2)), "w")
    with pytest.raises(UsageError):
        tape.backward(T.scale(w, 2.0))
    other = T.Tape().watch(np.ones((2, 2)), "v")
    with pytest.raises(UsageError):
        T.add(w, other)


def _check_op_gradient(build, shapes, seed=0):
    rng = np.random.default_rng(seed)
    params = {k: rng.standard_normal(s) for k, s in shapes.items()}

    def loss_value(p):
        return build({k: T.DenseMatrix(v) for k, v in p.items()}).item()

    tape = T.Tape()
    grads = tape.backward(build({k: tape.watch(v, k) for k, v in params.items()}))
    for name in params:
        ok, worst = grad_close(grads[name], fd_gradient(loss_value, params, name))
        assert ok, (name, worst)


def test_gradients_of_every_op_match_finite_differences():
    s = random_csr(11, n=6, m=5)
    pat = T.SparseMatrix.from_dense(np.eye(6) + np.diag(np.ones(5), 1)).pattern
    w_mix = np.random.default_rng(1).standard_normal((6, 6))

    def weighted(z):
        return T.sum_all(T.mul(z, T.DenseMatrix(w_mix[:z.rows, :z.cols])))

    _check_op_gradient(lambda p: weighted(T.matmul(p["a"], p["b"])), {"a": (6, 4), "b": (4, 3)})
    _check_op_gradient(lambda p: weighted(T.spmm(s, p["d"])), {"d": (5, 3)})
    _check_op_gradient(lambda p: weighted(T.leaky_relu(T.relu(p["x"]), 0.3)), {"x": (6, 3)})
    _check_op_gradient(lambda p: weighted(T.add(p["x"], p["b"])), {"x": (6, 3), "b": (1, 3)})
    _check_op_gradient(lambda p: weighted(T.concat_cols([p["x"], T.scale(p["y"], 3.0)])),
                       {"x": (6, 2), "y": (6, 2)})
    _check_op_gradient(lambda p: weighted(T.gather_rows(p["x"], [5, 0, 0, 2])), {"x": (6, 3)})
    _check_op_gradient(lambda p: weighted(T.dropout(p["x"], 0.4, make_rng(1, "t"), True)), {"x": (6, 3)})

    def attention(p):
        scores = T.leaky_relu(T.edge_scores(pat, p["s"], p["t"]), 0.2)
        a = T.masked_row_softmax(scores)
        mixed = T.sparse_combine([(0.3, a), (0.7, T.SparseMatrix(pat, np.full(pat.nnz, 0.5)))])
        return weighted(T.spmm(mixed, p["v"]))

    _check_op_gradient(attention, {"s": (6, 1), "t": (6, 1), "v": (6, 3)})

    labels = np.array([0, 2, 1, 1, 0, 2])
    _check_op_gradient(lambda p: T.softmax_cross_entropy(p["z"], labels, [0, 1, 3, 5]), {"z": (6, 3)})
    soft = np.random.default_rng(4).dirichlet(np.ones(3), size=6)
    _check_op_gradient(lambda p: T.soft_cross_entropy(p["z"], soft), {"z": (6, 3)})
    _check_op_gradient(lambda p: T.mul(T.irm_scale_grad(p["z"], labels, [0, 2, 4]),
                                       T.irm_scale_grad(p["z"], labels, [0, 2, 4])), {"z": (6, 3)})


def test_spmm_gradient_wrt_sparse_values():
    pat = random_csr(2, n=5, m=5).pattern
    rng = np.random.default_rng(0)
    v0, d = rng.standard_normal(pat.nnz), T.DenseMatrix(rng.standard_normal((5, 2)))
    w = rng.standard_normal((5, 2))

    def value(vals):
        return float((T.spmm(T.SparseMatrix(pat, vals), d).data * w).sum())

    # d/dv of sum(w * (S d)) = w[row] . d[col]
    expected = np.einsum("ij,ij->i", w[pat.row_idx], d.data[pat.col_idx])
    numeric = np.array([(value(v0 + e) - value(v0 - e)) / 2e-5 for e in np.eye(pat.nnz) * 1e-5])
    assert grad_close(expected, numeric)[0]


def test_irm_scale_grad_matches_scalar_derivative():
    rng = np.random.default_rng(9)
    z, y = rng.standard_normal((7, 3)), rng.integers(0, 3, 7)
    mask = np.arange(7)

    def risk(w):
        return T.softmax_cross_entropy(T.DenseMatrix(w * z), y, mask).item()

    numeric = (risk(1 + 1e-6) - risk(1 - 1e-6)) / 2e-6
    assert T.irm_scale_grad(T.DenseMatrix(z), y, mask).item() == pytest.approx(numeric, rel=1e-7)


def test_deterministic_given_inputs():
    s = random_csr(4)
    d = T.DenseMatrix(np.random.default_rng(4).standard_normal((10, 3)))
    assert np.array_equal(T.spmm(s, d).data, T.spmm(s, d).data)
