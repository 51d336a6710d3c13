"""Dense/CSR kernels with a reverse-mode tape over a fixed operation set.

Values are float64 numpy arrays. Every reduction that must agree bit-for-bit
between the sparse and dense paths (``matmul`` and ``spmm``) accumulates in
ascending index order, one term at a time, so that
``spmm(s, d) == matmul(s.to_dense(), d)`` holds exactly.

Usage::

    tape = Tape()
    w = tape.watch(w0, "w")
    loss = sum_all(mul(w, w))
    grads = tape.backward(loss)      # {"w": 2 * w0}
"""

from functools import cached_property

import numba
import numpy as np

from .errors import ConfigError, DataError, ProtocolError, ShapeError, UsageError

__all__ = [
    "CSRPattern", "DenseMatrix", "SparseMatrix", "Tape",
    "matmul", "spmm", "masked_row_softmax", "edge_scores", "sparse_combine",
    "relu", "leaky_relu", "add", "mul", "scale", "dropout", "sum_all",
    "concat_cols", "gather_rows", "softmax_cross_entropy", "soft_cross_entropy",
    "irm_scale_grad", "ordered_matmul",
]


@numba.njit(cache=True)
def _ordered_kernel(a, b, out):
    n, k = a.shape
    m = b.shape[1]
    for i in range(n):
        for kk in range(k):
            x = a[i, kk]
            for j in range(m):
                out[i, j] += x * b[kk, j]


def ordered_matmul(a, b):
    """Plain ndarray product accumulated over the inner index in ascending order."""
    out = np.zeros((a.shape[0], b.shape[1]))
    _ordered_kernel(np.ascontiguousarray(a, dtype=np.float64), np.ascontiguousarray(b, dtype=np.float64), out)
    return out


class CSRPattern:
    """Immutable sparsity structure shared by matrices with identical support."""

    def __init__(self, rows, cols, row_ptr, col_idx):
        self.rows = int(rows)
        self.cols = int(cols)
        self.row_ptr = np.asarray(row_ptr, dtype=np.int64)
        self.col_idx = np.asarray(col_idx, dtype=np.int64)
        self.row_ptr.setflags(write=False)
        self.col_idx.setflags(write=False)
        self._validate()

    def _validate(self):
        rp, ci = self.row_ptr, self.col_idx
        if rp.shape != (self.rows + 1,) or rp[0] != 0:
            raise ShapeError(f"row_ptr must have length {self.rows + 1} and start at 0")
        if np.any(np.diff(rp) < 0):
            raise ShapeError("row_ptr must be non-decreasing")
        if rp[-1] != ci.shape[0]:
            raise ShapeError(f"row_ptr[-1]={rp[-1]} but {ci.shape[0]} column indices")
        if ci.size and (ci.min() < 0 or ci.max() >= self.cols):
            raise ShapeError("column index out of range")
        if ci.size > 1:
            steps = np.diff(ci)
            starts = np.zeros(ci.size, dtype=bool)
            starts[rp[1:-1][rp[1:-1] < ci.size]] = True
            if np.any((steps <= 0) & ~starts[1:]):
                raise ShapeError("column indices must be strictly increasing within each row")

    @property
    def nnz(self):
        return int(self.col_idx.shape[0])

    @property
    def shape(self):
        return (self.rows, self.cols)

    def same_as(self, other):
        return self is other or (
            self.shape == other.shape
            and np.array_equal(self.row_ptr, other.row_ptr)
            and np.array_equal(self.col_idx, other.col_idx)
        )

    @cached_property
    def row_counts(self):
        return np.diff(self.row_ptr)

    @cached_property
    def row_idx(self):
        return np.repeat(np.arange(self.rows), self.row_counts)

    @cached_property
    def transpose(self):
        """(pattern of the transpose, permutation taking values to transposed order)."""
        perm = np.lexsort((self.row_idx, self.col_idx))
        counts = np.bincount(self.col_idx, minlength=self.cols)
        row_ptr = np.concatenate([[0], np.cumsum(counts)])
        return CSRPattern(self.cols, self.rows, row_ptr, self.row_idx[perm]), perm


@numba.njit(cache=True)
def _csr_kernel(row_ptr, col_idx, values, d, out):
    for i in range(out.shape[0]):
        for p in range(row_ptr[i], row_ptr[i + 1]):
            v = values[p]
            c = col_idx[p]
            for j in range(d.shape[1]):
                out[i, j] += v * d[c, j]


def _csr_apply(pattern, values, d):
    # same per-element accumulation order as ordered_matmul on the densified matrix
    out = np.zeros((pattern.rows, d.shape[1]))
    _csr_kernel(pattern.row_ptr, pattern.col_idx, np.ascontiguousarray(values, dtype=np.float64),
                np.ascontiguousarray(d, dtype=np.float64), out)
    return out


class _Value:
    __slots__ = ("tape", "slot")

    def _bind(self, tape):
        self.tape = tape
        self.slot = None if tape is None else tape._new_slot()


class DenseMatrix(_Value):
    """Row-major float64 matrix, optionally tracked by a :class:`Tape`."""

    __slots__ = ("data",)

    def __init__(self, data, tape=None):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 1:
            arr = arr[None, :]
        if arr.ndim != 2:
            raise ShapeError(f"expected a 2-D array, got shape {arr.shape}")
        arr.setflags(write=False)
        self.data = arr
        self._bind(tape)

    @classmethod
    def _wrap(cls, arr):
        obj = cls.__new__(cls)
        arr.setflags(write=False)
        obj.data = arr
        obj.tape = None
        obj.slot = None
        return obj

    @property
    def shape(self):
        return self.data.shape

    @property
    def rows(self):
        return self.data.shape[0]

    @property
    def cols(self):
        return self.data.shape[1]

    def item(self):
        if self.data.shape != (1, 1):
            raise ShapeError(f"item() needs a 1x1 matrix, got {self.data.shape}")
        return float(self.data[0, 0])

    def numpy(self):
        return np.array(self.data)

    def __repr__(self):
        return f"DenseMatrix(shape={self.shape}, tracked={self.tape is not None})"


class SparseMatrix(_Value):
    """CSR matrix: a :class:`CSRPattern` plus one float64 value per stored entry."""

    __slots__ = ("pattern", "values")

    def __init__(self, pattern, values, tape=None):
        vals = np.array(values, dtype=np.float64).reshape(-1)
        if vals.shape[0] != pattern.nnz:
            raise ShapeError(f"{vals.shape[0]} values for a pattern with nnz={pattern.nnz}")
        vals.setflags(write=False)
        self.pattern = pattern
        self.values = vals
        self._bind(tape)

    @classmethod
    def from_csr(cls, rows, cols, row_ptr, col_idx, values):
        return cls(CSRPattern(rows, cols, row_ptr, col_idx), values)

    @classmethod
    def from_dense(cls, dense):
        dense = np.asarray(dense, dtype=np.float64)
        r, c = np.nonzero(dense)
        row_ptr = np.concatenate([[0], np.cumsum(np.bincount(r, minlength=dense.shape[0]))])
        return cls(CSRPattern(dense.shape[0], dense.shape[1], row_ptr, c), dense[r, c])

    @classmethod
    def from_coo(cls, rows, cols, r, c, values):
        r = np.asarray(r, dtype=np.int64)
        c = np.asarray(c, dtype=np.int64)
        values = np.asarray(values, dtype=np.float64)
        order = np.lexsort((c, r))
        r, c, values = r[order], c[order], values[order]
        if r.size > 1 and np.any((np.diff(r) == 0) & (np.diff(c) == 0)):
            raise ShapeError("duplicate (row, col) entry")
        row_ptr = np.concatenate([[0], np.cumsum(np.bincount(r, minlength=rows))])
        return cls(CSRPattern(rows, cols, row_ptr, c), values)

    @property
    def shape(self):
        return self.pattern.shape

    @property
    def rows(self):
        return self.pattern.rows

    @property
    def cols(self):
        return self.pattern.cols

    @property
    def row_ptr(self):
        return self.pattern.row_ptr

    @property
    def col_idx(self):
        return self.pattern.col_idx

    @property
    def nnz(self):
        return self.pattern.nnz

    def to_dense(self):
        out = np.zeros(self.shape)
        out[self.pattern.row_idx, self.pattern.col_idx] = self.values
        return out

    def row_sums(self):
        return np.add.reduceat(self.values, self.row_ptr[:-1]) if self.nnz else np.zeros(self.rows)

    def with_values(self, values):
        return SparseMatrix(self.pattern, values)

    def __repr__(self):
        return f"SparseMatrix(shape={self.shape}, nnz={self.nnz}, tracked={self.tape is not None})"


class Tape:
    """Records operations on tracked values and replays them in reverse."""

    def __init__(self):
        self._entries = []
        self._params = {}
        self._n_slots = 0

    def _new_slot(self):
        self._n_slots += 1
        return self._n_slots - 1

    def __len__(self):
        return len(self._entries)

    def watch(self, array, name):
        """Register ``array`` as a parameter called ``name`` and return its tracked handle."""
        if name in self._params:
            raise UsageError(f"parameter {name!r} already watched on this tape")
        handle = DenseMatrix(array, tape=self)
        self._params[name] = handle
        return handle

    def _record(self, op, out, inputs, vjp):
        self._entries.append((op, out.slot, [v.slot if v.tape is self else None for v in inputs], vjp))

    def backward(self, loss):
        """Gradients of the scalar ``loss`` for every watched parameter.

        Parameters that do not influence ``loss`` get an all-zero gradient.
        """
        if not isinstance(loss, DenseMatrix) or loss.tape is not self:
            raise UsageError("loss was not produced by operations recorded on this tape")
        if loss.shape != (1, 1):
            raise UsageError(f"loss must be a 1x1 scalar, got shape {loss.shape}")
        grads = {loss.slot: np.ones((1, 1))}
        for _, out_slot, in_slots, vjp in reversed(self._entries):
            g = grads.pop(out_slot, None)
            if g is None:
                continue
            needs = [s is not None for s in in_slots]
            for slot, gi in zip(in_slots, vjp(g, needs)):
                if slot is None or gi is None:
                    continue
                if slot in grads:
                    grads[slot] = grads[slot] + gi
                else:
                    grads[slot] = gi
        return {
            name: grads.get(h.slot, np.zeros(h.shape)) for name, h in self._params.items()
        }


def _tape_of(*values):
    tape = None
    for v in values:
        if v.tape is not None:
            if tape is not None and v.tape is not tape:
                raise UsageError("operands belong to different tapes")
            tape = v.tape
    return tape


def _emit(op, out, inputs, vjp):
    tape = _tape_of(*inputs)
    if tape is not None:
        out._bind(tape)
        tape._record(op, out, inputs, vjp)
    return out


def _dense(arr):
    return DenseMatrix._wrap(arr)


def _sparse(pattern, values):
    out = SparseMatrix.__new__(SparseMatrix)
    values.setflags(write=False)
    out.pattern = pattern
    out.values = values
    out.tape = None
    out.slot = None
    return out


# ---------------------------------------------------------------------------
# products


def matmul(a, b):
    if a.cols != b.rows:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    A, B = a.data, b.data

    def vjp(g, needs):
        return (
            ordered_matmul(g, B.T) if needs[0] else None,
            ordered_matmul(A.T, g) if needs[1] else None,
        )

    return _emit("matmul", _dense(ordered_matmul(A, B)), (a, b), vjp)


def spmm(s, d):
    """Sparse-dense product ``s @ d``."""
    if s.cols != d.rows:
        raise ShapeError(f"spmm shape mismatch: {s.shape} x {d.shape}")
    pat, vals, D = s.pattern, s.values, d.data

    def vjp(g, needs):
        gs = gd = None
        if needs[0]:
            gs = np.einsum("ij,ij->i", g[pat.row_idx], D[pat.col_idx])
        if needs[1]:
            tpat, perm = pat.transpose
            gd = _csr_apply(tpat, vals[perm], g)
        return gs, gd

    return _emit("spmm", _dense(_csr_apply(pat, vals, D)), (s, d), vjp)


# ---------------------------------------------------------------------------
# sparse attention helpers


def edge_scores(pattern, src, dst):
    """Per-entry score ``src[i] + dst[j]`` for every stored (i, j) of ``pattern``.

    ``src`` and ``dst`` are N x 1 column vectors.
    """
    if src.shape != (pattern.rows, 1) or dst.shape != (pattern.cols, 1):
        raise ShapeError(f"edge_scores expects ({pattern.rows},1) and ({pattern.cols},1), "
                         f"got {src.shape} and {dst.shape}")
    ri, ci = pattern.row_idx, pattern.col_idx
    out = src.data[ri, 0] + dst.data[ci, 0]

    def vjp(g, needs):
        gs = np.bincount(ri, weights=g, minlength=pattern.rows)[:, None] if needs[0] else None
        gd = np.bincount(ci, weights=g, minlength=pattern.cols)[:, None] if needs[1] else None
        return gs, gd

    return _emit("edge_scores", _sparse(pattern, out), (src, dst), vjp)


def masked_row_softmax(scores):
    """Softmax over the stored entries of each row of a sparse score matrix."""
    pat = scores.pattern
    if np.any(pat.row_counts == 0):
        empty = int(np.flatnonzero(pat.row_counts == 0)[0])
        raise ProtocolError(f"row {empty} has no stored entries; softmax is undefined")
    starts = pat.row_ptr[:-1]
    v = scores.values
    shifted = v - np.maximum.reduceat(v, starts)[pat.row_idx]
    e = np.exp(shifted)
    alpha = e / np.add.reduceat(e, starts)[pat.row_idx]

    def vjp(g, needs):
        dot = np.add.reduceat(alpha * g, starts)
        return (alpha * (g - dot[pat.row_idx]),)

    return _emit("masked_row_softmax", _sparse(pat, alpha), (scores,), vjp)


def sparse_combine(terms):
    """``sum(coef * m for coef, m in terms)`` over matrices sharing one pattern."""
    if not terms:
        raise ShapeError("sparse_combine needs at least one term")
    pat = terms[0][1].pattern
    for _, m in terms[1:]:
        if not pat.same_as(m.pattern):
            raise ShapeError("sparse_combine operands must share a sparsity pattern")
    out = np.zeros(pat.nnz)
    for coef, m in terms:
        out = out + coef * m.values
    coefs = [c for c, _ in terms]

    def vjp(g, needs):
        return tuple(c * g if n else None for c, n in zip(coefs, needs))

    return _emit("sparse_combine", _sparse(pat, out), tuple(m for _, m in terms), vjp)


# ---------------------------------------------------------------------------
# elementwise


def _like(x, arr):
    return _sparse(x.pattern, arr) if isinstance(x, SparseMatrix) else _dense(arr)


def _raw(x):
    return x.values if isinstance(x, SparseMatrix) else x.data


def relu(x):
    X = _raw(x)
    mask = X > 0

    def vjp(g, needs):
        return (g * mask,)

    return _emit("relu", _like(x, np.where(mask, X, 0.0)), (x,), vjp)


def leaky_relu(x, slope=0.2):
    X = _raw(x)
    factor = np.where(X > 0, 1.0, slope)

    def vjp(g, needs):
        return (g * factor,)

    return _emit("leaky_relu", _like(x, X * factor), (x,), vjp)


def scale(x, s):
    s = float(s)

    def vjp(g, needs):
        return (g * s,)

    return _emit("scale", _like(x, _raw(x) * s), (x,), vjp)


def add(a, b):
    """Elementwise sum; ``b`` may be a 1 x cols row broadcast over ``a``'s rows."""
    A, B = a.data, b.data
    if A.shape != B.shape and not (B.shape[0] == 1 and B.shape[1] == A.shape[1]):
        raise ShapeError(f"add shape mismatch: {A.shape} + {B.shape}")
    broadcast = A.shape != B.shape

    def vjp(g, needs):
        gb = None
        if needs[1]:
            gb = g.sum(axis=0, keepdims=True) if broadcast else g
        return g, gb

    return _emit("add", _dense(A + B), (a, b), vjp)


def mul(a, b):
    A, B = a.data, b.data
    if A.shape != B.shape:
        raise ShapeError(f"mul shape mismatch: {A.shape} * {B.shape}")

    def vjp(g, needs):
        return (g * B if needs[0] else None, g * A if needs[1] else None)

    return _emit("mul", _dense(A * B), (a, b), vjp)


def dropout(x, rate, rng=None, training=True):
    """Inverted dropout. Identity in eval mode or at rate 0."""
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must lie in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise UsageError("dropout in training mode needs an rng")
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)

    def vjp(g, needs):
        return (g * keep,)

    return _emit("dropout", _dense(x.data * keep), (x,), vjp)


# ---------------------------------------------------------------------------
# shape plumbing and reductions


def sum_all(x):
    def vjp(g, needs):
        return (np.full(x.shape, g[0, 0]),)

    return _emit("sum_all", _dense(np.array([[x.data.sum()]])), (x,), vjp)


def concat_cols(xs):
    widths = [x.cols for x in xs]
    if len({x.rows for x in xs}) != 1:
        raise ShapeError(f"concat_cols row mismatch: {[x.shape for x in xs]}")
    bounds = np.cumsum([0] + widths)

    def vjp(g, needs):
        return tuple(g[:, lo:hi] if n else None for lo, hi, n in zip(bounds[:-1], bounds[1:], needs))

    return _emit("concat_cols", _dense(np.concatenate([x.data for x in xs], axis=1)), tuple(xs), vjp)


def gather_rows(x, idx):
    idx = np.asarray(idx, dtype=np.int64)
    n = x.rows

    def vjp(g, needs):
        out = np.zeros((n, g.shape[1]))
        np.add.at(out, idx, g)
        return (out,)

    return _emit("gather_rows", _dense(x.data[idx]), (x,), vjp)


# ---------------------------------------------------------------------------
# losses


def _log_softmax(z):
    shifted = z - z.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def _check_mask(mask, labels, n_rows, n_classes):
    mask = np.asarray(mask, dtype=np.int64)
    if mask.size == 0:
        raise ProtocolError("loss mask is empty")
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape[0] != n_rows:
        raise ShapeError(f"{labels.shape[0]} labels for {n_rows} rows")
    y = labels[mask]
    if y.min() < 0 or y.max() >= n_classes:
        raise DataError(f"label out of range [0, {n_classes})")
    return mask, y


def softmax_cross_entropy(logits, labels, mask):
    """Mean negative log-likelihood of ``labels`` over the rows listed in ``mask``."""
    mask, y = _check_mask(mask, labels, logits.rows, logits.cols)
    Z = logits.data
    logp = _log_softmax(Z[mask])
    m = mask.size
    loss = -logp[np.arange(m), y].sum() / m

    def vjp(g, needs):
        local = np.exp(logp)
        local[np.arange(m), y] -= 1.0
        out = np.zeros(Z.shape)
        np.add.at(out, mask, local * (g[0, 0] / m))
        return (out,)

    return _emit("softmax_cross_entropy", _dense(np.array([[loss]])), (logits,), vjp)


def soft_cross_entropy(logits, targets):
    """Mean over rows of ``-sum_k targets[i, k] * log softmax(logits)[i, k]``."""
    T = np.asarray(targets, dtype=np.float64)
    if T.shape != logits.shape:
        raise ShapeError(f"targets {T.shape} vs logits {logits.shape}")
    if T.shape[0] == 0:
        raise ProtocolError("soft_cross_entropy on zero rows")
    logp = _log_softmax(logits.data)
    m = T.shape[0]

    def vjp(g, needs):
        p = np.exp(logp)
        return ((p * T.sum(axis=1, keepdims=True) - T) * (g[0, 0] / m),)

    return _emit("soft_cross_entropy", _dense(np.array([[-(T * logp).sum() / m]])), (logits,), vjp)


def irm_scale_grad(logits, labels, mask):
    """d/dw of the mean cross-entropy of ``w * logits`` over ``mask``, at w = 1.

    Equals ``mean_i sum_k (p_ik - y_ik) z_ik``. The backward pass differentiates
    this quantity with respect to the logits, which is what the IRMv1 penalty
    needs without a second-order tape.
    """
    mask, y = _check_mask(mask, labels, logits.rows, logits.cols)
    Z = logits.data
    z = Z[mask]
    p = np.exp(_log_softmax(z))
    m = mask.size
    rows = np.arange(m)
    pz = (p * z).sum(axis=1, keepdims=True)
    value = (pz[:, 0] - z[rows, y]).sum() / m

    def vjp(g, needs):
        local = p + p * z - p * pz
        local[rows, y] -= 1.0
        out = np.zeros(Z.shape)
        np.add.at(out, mask, local * (g[0, 0] / m))
        return (out,)

    return _emit("irm_scale_grad", _dense(np.array([[value]])), (logits,), vjp)
