"""Minimal reverse-mode automatic differentiation over dense float64 matrices.

Every value on the tape is a 2-D, row-major, float64 numpy array; the
operator set is exactly what the recommender model needs (no broadcasting
rules, no higher-order derivatives). A Tape records nodes in topological
order; ``Tape.backward`` walks them once in reverse. Non-finite forward
values are rejected at node creation so numerical faults surface where
they happen.

Matrices are treated as immutable once wrapped in a node; optimizers must
produce fresh arrays instead of updating in place.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.spatial.distance import cdist
from scipy.special import expit

from .errors import NumericalError

Array = np.ndarray


def as_matrix(data) -> Array:
    """Coerce to a C-contiguous float64 2-D array."""
    arr = np.ascontiguousarray(data, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"expected a 2-D matrix, got shape {arr.shape}")
    return arr


class Node:
    """One tape entry: an op tag, input nodes, a value, and (later) a grad."""

    __slots__ = ("tape", "id", "op", "inputs", "value", "grad", "_backward",
                 "_grad_shared")

    def __init__(self, tape: "Tape", node_id: int, op: str,
                 inputs: tuple["Node", ...], value: Array,
                 backward: Callable[[Array], None] | None):
        self.tape = tape
        self.id = node_id
        self.op = op
        self.inputs = inputs
        self.value = value
        self.grad: Array | None = None
        self._backward = backward
        self._grad_shared = False

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape  # type: ignore[return-value]

    @property
    def rows(self) -> int:
        return self.value.shape[0]

    @property
    def cols(self) -> int:
        return self.value.shape[1]

    def __repr__(self) -> str:
        return f"Node(id={self.id}, op={self.op!r}, shape={self.shape})"

    # Operator sugar; all operands must be Nodes except scalar multiplication.
    def __add__(self, other: "Node") -> "Node":
        return add(self, other)

    def __sub__(self, other: "Node") -> "Node":
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Node):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self) -> "Node":
        return neg(self)

    def __matmul__(self, other: "Node") -> "Node":
        return matmul(self, other)


class Tape:
    """Append-only op graph; append order is the topological order."""

    def __init__(self) -> None:
        self.nodes: list[Node] = []
        self._param_ids: list[int] = []

    def _record(self, op: str, inputs: tuple[Node, ...], value,
                backward: Callable[[Array], None] | None = None) -> Node:
        value = as_matrix(value)
        # min/max propagate NaN and bound Inf: an allocation-free finite check
        if value.size and not (np.isfinite(value.min())
                               and np.isfinite(value.max())):
            raise NumericalError(f"op '{op}' produced non-finite values")
        node = Node(self, len(self.nodes), op, inputs, value, backward)
        self.nodes.append(node)
        return node

    def constant(self, data) -> Node:
        return self._record("const", (), data)

    def parameter(self, data) -> Node:
        node = self._record("param", (), data)
        self._param_ids.append(node.id)
        return node

    @property
    def parameters(self) -> list[Node]:
        return [self.nodes[i] for i in self._param_ids]

    def backward(self, loss: Node) -> None:
        """Populate grads of every parameter node reachable from ``loss``.

        ``loss`` must be a 1x1 node on this tape. Nodes are visited in
        reverse append order exactly once; parameters the loss does not
        depend on end up with an all-zero grad.
        """
        if loss.tape is not self:
            raise ValueError("backward: loss node belongs to a different tape")
        if loss.shape != (1, 1):
            raise ValueError(f"backward: loss must be 1x1, got {loss.shape}")
        loss.grad = np.ones((1, 1))
        for node in reversed(self.nodes[:loss.id + 1]):
            if node.grad is None or node._backward is None:
                continue
            node._backward(node.grad)
        for pid in self._param_ids:
            p = self.nodes[pid]
            if p.grad is None:
                p.grad = np.zeros_like(p.value)


def _accum(node: Node, g, owned: bool = False) -> None:
    # Copy-on-write: a contribution not marked ``owned`` may alias another
    # node's grad buffer (or a view of it); it is only copied if a second
    # contribution needs to accumulate into it.
    if node.grad is None:
        node.grad = g
        node._grad_shared = not owned
    else:
        if node._grad_shared:
            node.grad = np.array(node.grad)
            node._grad_shared = False
        node.grad += g


def _same_tape(*nodes: Node) -> Tape:
    tape = nodes[0].tape
    for n in nodes[1:]:
        if n.tape is not tape:
            raise ValueError("operands live on different tapes")
    return tape


# ---------------------------------------------------------------------------
# dense primitives


def matmul(a: Node, b: Node) -> Node:
    tape = _same_tape(a, b)
    if a.cols != b.rows:
        raise ValueError(f"matmul: inner dims differ, {a.shape} @ {b.shape}")
    value = a.value @ b.value

    def backward(g: Array) -> None:
        _accum(a, g @ b.value.T, owned=True)
        _accum(b, a.value.T @ g, owned=True)

    return tape._record("matmul", (a, b), value, backward)


def _binary(op: str, a: Node, b: Node, value: Array,
            da: Callable[[Array], Array], db: Callable[[Array], Array],
            owned: bool = True) -> Node:
    tape = _same_tape(a, b)
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")

    def backward(g: Array) -> None:
        _accum(a, da(g), owned=owned)
        _accum(b, db(g), owned=owned)

    return tape._record(op, (a, b), value, backward)


def add(a: Node, b: Node) -> Node:
    return _binary("add", a, b, a.value + b.value, lambda g: g, lambda g: g,
                   owned=False)


def sub(a: Node, b: Node) -> Node:
    tape = _same_tape(a, b)
    if a.shape != b.shape:
        raise ValueError(f"sub: shape mismatch {a.shape} vs {b.shape}")

    def backward(g: Array) -> None:
        _accum(a, g)
        _accum(b, -g, owned=True)

    return tape._record("sub", (a, b), a.value - b.value, backward)


def mul(a: Node, b: Node) -> Node:
    tape = _same_tape(a, b)
    if a.shape != b.shape:
        raise ValueError(f"mul: shape mismatch {a.shape} vs {b.shape}")

    def backward(g: Array) -> None:
        _accum(a, g * b.value, owned=True)
        _accum(b, g * a.value, owned=True)

    return tape._record("mul", (a, b), a.value * b.value, backward)


def div(a: Node, b: Node) -> Node:
    with np.errstate(divide="ignore", invalid="ignore"):
        value = a.value / b.value  # inf/nan rejected at node creation
    return _binary("div", a, b, value,
                   lambda g: g / b.value,
                   lambda g: -g * a.value / (b.value * b.value))


def _unary(op: str, a: Node, value: Array,
           da: Callable[[Array], Array]) -> Node:
    def backward(g: Array) -> None:
        _accum(a, da(g), owned=True)

    return a.tape._record(op, (a,), value, backward)


def neg(a: Node) -> Node:
    return _unary("neg", a, -a.value, lambda g: -g)


def exp(a: Node) -> Node:
    with np.errstate(over="ignore"):
        value = np.exp(a.value)  # inf is rejected at node creation
    return _unary("exp", a, value, lambda g: g * value)


def log(a: Node) -> Node:
    if (a.value <= 0.0).any():
        raise ValueError("log: operand has non-positive entries")
    return _unary("log", a, np.log(a.value), lambda g: g / a.value)


def sigmoid(a: Node) -> Node:
    value = expit(a.value)
    return _unary("sigmoid", a, value, lambda g: g * value * (1.0 - value))


def tanh(a: Node) -> Node:
    value = np.tanh(a.value)
    return _unary("tanh", a, value, lambda g: g * (1.0 - value * value))


def softplus(a: Node) -> Node:
    """log(1 + exp(x)), computed without overflow; d/dx = sigmoid(x)."""
    value = np.logaddexp(0.0, a.value)
    return _unary("softplus", a, value, lambda g: g * expit(a.value))


def absolute(a: Node) -> Node:
    return _unary("abs", a, np.abs(a.value), lambda g: g * np.sign(a.value))


def sqrt(a: Node) -> Node:
    if (a.value < 0.0).any():
        raise ValueError("sqrt: operand has negative entries")
    value = np.sqrt(a.value)
    return _unary("sqrt", a, value, lambda g: g * 0.5 / value)


def scale(a: Node, c: float) -> Node:
    c = float(c)
    return _unary("scale", a, a.value * c, lambda g: g * c)


def add_bias(m: Node, b: Node) -> Node:
    """Add a 1 x cols bias row to every row of m."""
    tape = _same_tape(m, b)
    if b.shape != (1, m.cols):
        raise ValueError(f"add_bias: bias shape {b.shape} does not match cols {m.cols}")

    def backward(g: Array) -> None:
        _accum(m, g)
        _accum(b, g.sum(axis=0, keepdims=True), owned=True)

    return tape._record("add_bias", (m, b), m.value + b.value, backward)


def sum_all(m: Node) -> Node:
    def backward(g: Array) -> None:
        _accum(m, np.full(m.shape, g[0, 0]), owned=True)

    return m.tape._record("sum_all", (m,), [[m.value.sum()]], backward)


def row_sum(m: Node) -> Node:
    """Per-row sum, returned as an n x 1 column."""
    def backward(g: Array) -> None:
        _accum(m, np.broadcast_to(g, m.shape))

    return m.tape._record("row_sum", (m,), m.value.sum(axis=1, keepdims=True),
                          backward)


def transpose(m: Node) -> Node:
    tape = m.tape

    def backward(g: Array) -> None:
        _accum(m, g.T)  # view; copy-on-write protects it

    return tape._record("transpose", (m,), m.value.T, backward)


def take_diag(m: Node) -> Node:
    """Main diagonal of a square matrix as an n x 1 column."""
    if m.rows != m.cols:
        raise ValueError(f"take_diag: matrix must be square, got {m.shape}")

    def backward(g: Array) -> None:
        gm = np.zeros_like(m.value)
        np.fill_diagonal(gm, g[:, 0])
        _accum(m, gm, owned=True)

    return m.tape._record("take_diag", (m,),
                          np.diagonal(m.value).reshape(-1, 1), backward)


def row_gather(m: Node, indices) -> Node:
    """Select rows by index; backward scatter-adds (duplicates accumulate)."""
    idx = np.asarray(indices, dtype=np.int64).reshape(-1)
    if idx.size and (idx.min() < 0 or idx.max() >= m.rows):
        raise IndexError(f"row_gather: index out of range for {m.rows} rows")
    value = m.value[idx] if idx.size else np.zeros((0, m.cols))

    def backward(g: Array) -> None:
        gm = np.zeros_like(m.value)
        np.add.at(gm, idx, g)
        _accum(m, gm, owned=True)

    return m.tape._record("row_gather", (m,), value, backward)


def concat_rows(a: Node, b: Node) -> Node:
    tape = _same_tape(a, b)
    if a.cols != b.cols:
        raise ValueError(f"concat_rows: column mismatch {a.shape} vs {b.shape}")

    def backward(g: Array) -> None:
        _accum(a, g[:a.rows])
        _accum(b, g[a.rows:])

    return tape._record("concat_rows", (a, b),
                        np.concatenate([a.value, b.value], axis=0), backward)


def concat_cols(a: Node, b: Node) -> Node:
    tape = _same_tape(a, b)
    if a.rows != b.rows:
        raise ValueError(f"concat_cols: row mismatch {a.shape} vs {b.shape}")

    def backward(g: Array) -> None:
        _accum(a, g[:, :a.cols])
        _accum(b, g[:, a.cols:])

    return tape._record("concat_cols", (a, b),
                        np.concatenate([a.value, b.value], axis=1), backward)


def stop_gradient(m: Node) -> Node:
    return m.tape._record("stop_gradient", (m,), m.value, None)


def l2_row_normalize(m: Node, eps: float) -> Node:
    """Divide each row by max(row L2 norm, eps)."""
    if eps <= 0.0:
        raise ValueError("l2_row_normalize: eps must be positive")
    norms = np.linalg.norm(m.value, axis=1, keepdims=True)
    denom = np.maximum(norms, eps)
    value = m.value / denom

    def backward(g: Array) -> None:
        base = g / denom
        # Below eps the map is linear (x / eps); no projection term there.
        proj = m.value * ((g * m.value).sum(axis=1, keepdims=True) / denom**3)
        _accum(m, base - np.where(norms >= eps, proj, 0.0), owned=True)

    return m.tape._record("l2_row_normalize", (m,), value, backward)


def pairwise_sqdist(x: Node) -> Node:
    """All-pairs squared Euclidean row distances, n x n.

    Computed from explicit row differences (scipy cdist) so identical rows
    give an exact zero and the result is exactly symmetric with a zero
    diagonal — properties the kernel code relies on.
    """
    xv = x.value
    value = cdist(xv, xv, "sqeuclidean")

    def backward(g: Array) -> None:
        rs = g.sum(axis=1, keepdims=True)
        cs = g.sum(axis=0, keepdims=True).T
        _accum(x, 2.0 * ((rs + cs) * xv - g @ xv - g.T @ xv), owned=True)

    return x.tape._record("pairwise_sqdist", (x,), value, backward)


# ---------------------------------------------------------------------------
# sparse primitives


def sparse_mat_mul(s, d: Node) -> Node:
    """Constant sparse matrix times dense node; no gradient into s."""
    csr = s.to_csr() if hasattr(s, "to_csr") else s
    if csr.shape[1] != d.rows:
        raise ValueError(f"sparse_mat_mul: inner dims differ, "
                         f"{csr.shape} @ {d.shape}")
    value = csr @ d.value

    def backward(g: Array) -> None:
        _accum(d, csr.T @ g, owned=True)

    return d.tape._record("sparse_mat_mul", (d,), value, backward)


def edge_spmm(row_idx, col_idx, out_rows: int, vals: Node, dense: Node,
              csr_template: tuple | None = None) -> Node:
    """Sparse-times-dense with differentiable per-edge values.

    The (row, col) topology is constant; ``vals`` is an E x 1 node holding
    one value per edge. Gradients flow into both ``vals`` and ``dense``.
    ``csr_template`` is an optional prebuilt (indices, indptr) pair for
    edges already sorted in CSR order; it skips the per-call COO sort.
    """
    row_idx = np.asarray(row_idx, dtype=np.int64)
    col_idx = np.asarray(col_idx, dtype=np.int64)
    if vals.shape != (row_idx.size, 1):
        raise ValueError(f"edge_spmm: vals must be {row_idx.size} x 1, got {vals.shape}")
    if col_idx.size and col_idx.max() >= dense.rows:
        raise IndexError("edge_spmm: column index out of range")
    tape = _same_tape(vals, dense)
    if csr_template is not None:
        indices, indptr = csr_template
        csr = sp.csr_matrix((vals.value[:, 0], indices, indptr),
                            shape=(out_rows, dense.rows))
    else:
        csr = sp.csr_matrix((vals.value[:, 0], (row_idx, col_idx)),
                            shape=(out_rows, dense.rows))
    value = csr @ dense.value

    def backward(g: Array) -> None:
        _accum(dense, csr.T @ g, owned=True)
        gv = np.einsum("ij,ij->i", g[row_idx], dense.value[col_idx])
        _accum(vals, gv.reshape(-1, 1), owned=True)

    return tape._record("edge_spmm", (vals, dense), value, backward)


# ---------------------------------------------------------------------------
# verification


def finite_diff_check(f: Callable[[Sequence[Array]], tuple[float, list[Array] | None]],
                      params: Sequence[Array], h: float = 1e-5) -> float:
    """Compare analytic gradients of f against central finite differences.

    ``f(params)`` must return ``(value, grads)`` where grads are arrays
    shaped like the parameters; perturbed evaluations may return
    ``(value, None)``. Returns the max over all coordinates of
    ``|analytic - central| / (|central| + 1e-8)``. ``f`` must be
    deterministic (fix any sampling noise before calling).
    """
    if h <= 0.0:
        raise ValueError("finite_diff_check: h must be positive")
    value, grads = f(params)
    if not np.isfinite(value):
        raise NumericalError("finite_diff_check: objective is non-finite")
    if grads is None:
        raise ValueError("finite_diff_check: base evaluation must return gradients")
    if len(grads) != len(params):
        raise ValueError("finite_diff_check: one gradient per parameter required")

    worst = 0.0
    for p, ga in zip(params, grads):
        if ga.shape != p.shape:
            raise ValueError("finite_diff_check: gradient/parameter shape mismatch")
        for idx in np.ndindex(*p.shape):
            orig = p[idx]
            p[idx] = orig + h
            fp = f(params)[0]
            p[idx] = orig - h
            fm = f(params)[0]
            p[idx] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NumericalError("finite_diff_check: perturbed objective is non-finite")
            central = (fp - fm) / (2.0 * h)
            rel = abs(ga[idx] - central) / (abs(central) + 1e-8)
            worst = max(worst, rel)
    return worst
