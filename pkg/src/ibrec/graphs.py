"""Graph construction: normalized user-item bipartite adjacency and the
fused kNN item-item semantic graph.

Static topology (which edges exist, per-modality similarity values) is
built once from raw features; the fused + degree-normalized edge values
are rebuilt inside each forward pass so gradients reach the modality
fusion weights.
"""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import autodiff as ad
from .errors import DataError, FormatError

GRAPH_MAGIC = b"IBMG"


@dataclass
class SparseMatrix:
    """COO triplets with unique (row, col) pairs and finite values."""

    rows: int
    cols: int
    row_idx: np.ndarray
    col_idx: np.ndarray
    values: np.ndarray
    _csr: sp.csr_matrix | None = field(default=None, repr=False, compare=False)

    def __post_init__(self) -> None:
        self.row_idx = np.asarray(self.row_idx, dtype=np.int64)
        self.col_idx = np.asarray(self.col_idx, dtype=np.int64)
        self.values = np.asarray(self.values, dtype=np.float64)
        if not (self.row_idx.shape == self.col_idx.shape == self.values.shape):
            raise ValueError("sparse triplet arrays must have equal length")
        if self.nnz:
            if self.row_idx.min() < 0 or self.row_idx.max() >= self.rows:
                raise ValueError("sparse row index out of range")
            if self.col_idx.min() < 0 or self.col_idx.max() >= self.cols:
                raise ValueError("sparse col index out of range")
            keys = self.row_idx * self.cols + self.col_idx
            if np.unique(keys).size != keys.size:
                raise ValueError("duplicate (row, col) entry in sparse matrix")
        if not np.isfinite(self.values).all():
            raise ValueError("sparse matrix has non-finite values")

    @property
    def nnz(self) -> int:
        return int(self.row_idx.size)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.rows, self.cols)

    def to_csr(self) -> sp.csr_matrix:
        if self._csr is None:
            self._csr = sp.csr_matrix(
                (self.values, (self.row_idx, self.col_idx)), shape=self.shape)
        return self._csr

    def to_dense(self) -> np.ndarray:
        return self.to_csr().toarray()


def build_bipartite_adjacency(interactions) -> SparseMatrix:
    """Symmetric (M+N)x(M+N) adjacency with a 1 for every train interaction."""
    m, n = interactions.num_users, interactions.num_items
    users, items = interactions.train_pairs()
    if users.size == 0:
        raise DataError("cannot build bipartite adjacency: empty train split")
    rows = np.concatenate([users, items + m])
    cols = np.concatenate([items + m, users])
    vals = np.ones(rows.size)
    return SparseMatrix(m + n, m + n, rows, cols, vals)


def sym_normalize(adj: SparseMatrix) -> SparseMatrix:
    """Scale each entry by 1/sqrt(deg(row) * deg(col)); zero degrees stay zero."""
    if adj.rows != adj.cols:
        raise ValueError("sym_normalize expects a square matrix")
    if adj.nnz and adj.values.min() < 0:
        raise ValueError("sym_normalize expects non-negative values")
    deg = np.zeros(adj.rows)
    np.add.at(deg, adj.row_idx, adj.values)
    with np.errstate(divide="ignore"):
        inv_sqrt = np.where(deg > 0, 1.0 / np.sqrt(deg), 0.0)
    vals = adj.values * inv_sqrt[adj.row_idx] * inv_sqrt[adj.col_idx]
    return SparseMatrix(adj.rows, adj.cols, adj.row_idx.copy(),
                        adj.col_idx.copy(), vals)


def build_modality_knn(features: np.ndarray, k: int,
                       block: int = 512) -> SparseMatrix:
    """Top-k cosine-similarity neighbors per item (diagonal excluded).

    Ties break toward the lower item id. Zero-similarity candidates are
    never stored, so an all-zero feature row yields an isolated node (a
    warning is emitted). The result is generally asymmetric.
    """
    feats = np.asarray(features, dtype=np.float64)
    n = feats.shape[0]
    if not 1 <= k < n:
        raise ValueError(f"knn: need 1 <= k < {n}, got {k}")
    norms = np.linalg.norm(feats, axis=1, keepdims=True)
    if (norms == 0).any():
        warnings.warn(f"{int((norms == 0).sum())} all-zero feature rows; "
                      "those items become isolated in the semantic graph")
    unit = np.divide(feats, norms, out=np.zeros_like(feats), where=norms != 0)

    rows, cols, vals = [], [], []
    ids = np.arange(n)
    for start in range(0, n, block):
        sims = np.clip(unit[start:start + block] @ unit.T, -1.0, 1.0)
        for local, i in enumerate(range(start, min(start + block, n))):
            row = sims[local]
            order = np.lexsort((ids, -row))  # by value desc, then lower id
            taken = 0
            for j in order:
                if taken == k:
                    break
                if j == i or row[j] == 0.0:
                    continue
                rows.append(i)
                cols.append(j)
                vals.append(row[j])
                taken += 1
    return SparseMatrix(n, n, np.array(rows, dtype=np.int64),
                        np.array(cols, dtype=np.int64), np.array(vals))


@dataclass
class SemanticItemGraph:
    """Per-modality kNN topologies over items plus their precomputed union.

    The union's static parts (edge list, per-modality value columns, row
    incidence for degrees) are what each forward pass needs to rebuild the
    fused, normalized edge values differentiably.
    """

    num_items: int
    modalities: list[SparseMatrix]
    edge_rows: np.ndarray = field(init=False)
    edge_cols: np.ndarray = field(init=False)
    modality_values: np.ndarray = field(init=False)  # K x E
    csr_template: tuple = field(init=False, repr=False)
    _row_incidence: sp.csr_matrix = field(init=False, repr=False)

    def __post_init__(self) -> None:
        if not self.modalities:
            raise DataError("semantic graph needs at least one modality")
        keys = {}
        for g in self.modalities:
            for r, c in zip(g.row_idx, g.col_idx):
                keys.setdefault((int(r), int(c)), len(keys))
        if not keys:
            raise DataError("semantic graph union has no edges")
        edges = sorted(keys)  # deterministic (row, col) order
        self.edge_rows = np.array([e[0] for e in edges], dtype=np.int64)
        self.edge_cols = np.array([e[1] for e in edges], dtype=np.int64)
        pos = {e: i for i, e in enumerate(edges)}
        self.modality_values = np.zeros((len(self.modalities), len(edges)))
        for mi, g in enumerate(self.modalities):
            for r, c, v in zip(g.row_idx, g.col_idx, g.values):
                self.modality_values[mi, pos[(int(r), int(c))]] = v
        e = len(edges)
        # union edges are sorted by (row, col): already in CSR order
        indptr = np.zeros(self.num_items + 1, dtype=np.int32)
        np.add.at(indptr, self.edge_rows + 1, 1)
        self.csr_template = (self.edge_cols.astype(np.int32),
                             np.cumsum(indptr, dtype=np.int32))
        self._row_incidence = sp.csr_matrix(
            (np.ones(e), (self.edge_rows, np.arange(e))),
            shape=(self.num_items, e))

    @property
    def num_edges(self) -> int:
        return int(self.edge_rows.size)


def fuse_and_normalize(graph: SemanticItemGraph, tape: ad.Tape,
                       fusion_logits: ad.Node) -> ad.Node:
    """Differentiable fused + degree-normalized edge values (E x 1).

    Modality weights are softmax(fusion_logits); the fused value of each
    union edge is the weighted sum of per-modality similarities. Degrees
    use absolute values to stay positive when similarities are negative.
    Gradients flow into the fusion logits only; the topology is constant.
    """
    n_mod = len(graph.modalities)
    if fusion_logits.shape != (n_mod, 1):
        raise ValueError(f"expected {n_mod} fusion logits, got {fusion_logits.shape}")
    e = graph.num_edges

    exp_l = ad.exp(fusion_logits)
    total = ad.sum_all(exp_l)
    ones_k = tape.constant(np.ones((n_mod, 1)))
    weights = ad.div(exp_l, ad.matmul(ones_k, total))  # K x 1 softmax

    ones_e = tape.constant(np.ones((e, 1)))
    fused = None
    for mi in range(n_mod):
        w_m = ad.row_gather(weights, [mi])  # 1 x 1
        vals_m = tape.constant(graph.modality_values[mi].reshape(-1, 1))
        term = ad.mul(ad.matmul(ones_e, w_m), vals_m)
        fused = term if fused is None else ad.add(fused, term)

    deg = ad.sparse_mat_mul(graph._row_incidence, ad.absolute(fused))  # N x 1
    deg = ad.add(deg, tape.constant(np.full((graph.num_items, 1), 1e-12)))
    inv_sqrt = ad.div(tape.constant(np.ones((graph.num_items, 1))), ad.sqrt(deg))
    factor = ad.mul(ad.row_gather(inv_sqrt, graph.edge_rows),
                    ad.row_gather(inv_sqrt, graph.edge_cols))
    return ad.mul(fused, factor)


# ---------------------------------------------------------------------------
# graph cache file: IBMF-style header + (row u64, col u64, value f32) triplets


def save_graph_cache(path, graph: SparseMatrix) -> None:
    with open(path, "wb") as fh:
        fh.write(GRAPH_MAGIC)
        fh.write(struct.pack("<I", 1))
        fh.write(struct.pack("<QQ", graph.rows, graph.cols))
        for r, c, v in zip(graph.row_idx, graph.col_idx, graph.values):
            fh.write(struct.pack("<QQf", int(r), int(c), float(np.float32(v))))


def load_graph_cache(path) -> SparseMatrix:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != GRAPH_MAGIC:
        raise FormatError(f"{path}: bad magic {blob[:4]!r}")
    (version,) = struct.unpack("<I", blob[4:8])
    if version != 1:
        raise FormatError(f"{path}: unsupported graph cache version {version}")
    rows, cols = struct.unpack("<QQ", blob[8:24])
    payload = blob[24:]
    if len(payload) % 20 != 0:
        raise FormatError(f"{path}: truncated triplet payload")
    count = len(payload) // 20
    r = np.empty(count, dtype=np.int64)
    c = np.empty(count, dtype=np.int64)
    v = np.empty(count)
    for i in range(count):
        ri, ci, vi = struct.unpack_from("<QQf", payload, i * 20)
        r[i], c[i], v[i] = ri, ci, vi
    return SparseMatrix(rows, cols, r, c, v)
