"""Sparse matrices for graph adjacency and its normalized variants.

Entries are kept in canonical row-major COO order with a CSR row index for
row queries; heavy products delegate to scipy.sparse internally.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp


class SparseError(ValueError):
    pass


@dataclass
class SparseMatrix:
    """Immutable COO matrix with no duplicate entries, sorted row-major."""

    n_rows: int
    n_cols: int
    rows: np.ndarray
    cols: np.ndarray
    vals: np.ndarray
    _indptr: np.ndarray = field(init=False, repr=False)
    _csr: object = field(default=None, init=False, repr=False)
    _csr_t: object = field(default=None, init=False, repr=False)

    def __post_init__(self):
        self.rows = np.asarray(self.rows, dtype=np.int64)
        self.cols = np.asarray(self.cols, dtype=np.int64)
        self.vals = np.asarray(self.vals, dtype=np.float64)
        if not (self.rows.shape == self.cols.shape == self.vals.shape):
            raise SparseError("rows, cols, vals must have identical length")
        if self.rows.size:
            if self.rows.min() < 0 or self.rows.max() >= self.n_rows:
                raise SparseError("row index out of range")
            if self.cols.min() < 0 or self.cols.max() >= self.n_cols:
                raise SparseError("column index out of range")
        order = np.lexsort((self.cols, self.rows))
        self.rows = self.rows[order]
        self.cols = self.cols[order]
        self.vals = self.vals[order]
        key = self.rows * self.n_cols + self.cols
        if key.size and np.any(np.diff(key) == 0):
            raise SparseError("duplicate (row, col) entry")
        self._indptr = np.zeros(self.n_rows + 1, dtype=np.int64)
        np.add.at(self._indptr, self.rows + 1, 1)
        np.cumsum(self._indptr, out=self._indptr)

    @classmethod
    def from_entries(cls, n_rows, n_cols, rows, cols, vals) -> "SparseMatrix":
        return cls(n_rows, n_cols, np.asarray(rows), np.asarray(cols), np.asarray(vals))

    @property
    def nnz(self) -> int:
        return int(self.vals.size)

    def row_slice(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        """Column indices and values of row i."""
        lo, hi = self._indptr[i], self._indptr[i + 1]
        return self.cols[lo:hi], self.vals[lo:hi]

    def to_scipy(self) -> sp.csr_matrix:
        if self._csr is None:
            self._csr = sp.csr_matrix(
                (self.vals, (self.rows, self.cols)), shape=(self.n_rows, self.n_cols)
            )
        return self._csr

    def transpose_scipy(self) -> sp.csr_matrix:
        if self._csr_t is None:
            self._csr_t = self.to_scipy().T.tocsr()
        return self._csr_t

    def matmul_dense(self, dense: np.ndarray) -> np.ndarray:
        out = self.to_scipy() @ dense
        return np.asarray(out)

    def to_dense(self) -> np.ndarray:
        out = np.zeros((self.n_rows, self.n_cols))
        out[self.rows, self.cols] = self.vals
        return out

    def is_symmetric(self, tol: float = 0.0) -> bool:
        if self.n_rows != self.n_cols:
            return False
        key = self.rows * self.n_cols + self.cols
        key_t = self.cols * self.n_cols + self.rows
        order = np.argsort(key_t, kind="stable")
        if not np.array_equal(key, key_t[order]):
            return False
        return bool(np.all(np.abs(self.vals - self.vals[order]) <= tol))

    def has_zero_diagonal(self) -> bool:
        return not np.any(self.rows == self.cols)

    def is_binary(self) -> bool:
        return bool(np.all(self.vals == 1.0))

    def check_adjacency(self):
        """Validate the invariants required of a raw adjacency matrix."""
        if self.n_rows != self.n_cols:
            raise SparseError("adjacency must be square")
        if not self.is_symmetric():
            raise SparseError("adjacency must be symmetric")
        if not self.has_zero_diagonal():
            raise SparseError("adjacency must have a zero diagonal")
        if not self.is_binary():
            raise SparseError("adjacency values must all be 1")


def adjacency_from_edges(n: int, edges: np.ndarray) -> SparseMatrix:
    """Binary symmetric adjacency from an undirected edge list.

    Directed duplicates and self-loops are dropped; each surviving edge is
    stored in both directions.
    """
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    if edges.size:
        keep = edges[:, 0] != edges[:, 1]
        edges = edges[keep]
    if edges.size == 0:
        empty = np.zeros(0, dtype=np.int64)
        return SparseMatrix(n, n, empty, empty, np.zeros(0))
    lo = np.minimum(edges[:, 0], edges[:, 1])
    hi = np.maximum(edges[:, 0], edges[:, 1])
    key = np.unique(lo * n + hi)
    lo, hi = key // n, key % n
    rows = np.concatenate([lo, hi])
    cols = np.concatenate([hi, lo])
    return SparseMatrix(n, n, rows, cols, np.ones(rows.size))


def degree_vector(adjacency: SparseMatrix) -> np.ndarray:
    """Per-node edge counts of a binary symmetric adjacency."""
    adjacency.check_adjacency()
    return np.diff(adjacency._indptr).astype(np.int64)


def normalize_adjacency(adjacency: SparseMatrix) -> SparseMatrix:
    """Symmetric degree normalization of the self-loop-augmented adjacency.

    Returns D^{-1/2} (A + I) D^{-1/2} with D the degree matrix of A + I.
    Isolated nodes end up with degree 1 and a unit diagonal entry.
    """
    adjacency.check_adjacency()
    n = adjacency.n_rows
    deg = np.diff(adjacency._indptr).astype(np.float64) + 1.0
    inv_sqrt = 1.0 / np.sqrt(deg)
    edge_vals = adjacency.vals * inv_sqrt[adjacency.rows] * inv_sqrt[adjacency.cols]
    diag = np.arange(n, dtype=np.int64)
    rows = np.concatenate([adjacency.rows, diag])
    cols = np.concatenate([adjacency.cols, diag])
    vals = np.concatenate([edge_vals, 1.0 / deg])
    return SparseMatrix(n, n, rows, cols, vals)


def undirected_pairs(adjacency: SparseMatrix) -> tuple[np.ndarray, np.ndarray]:
    """Each undirected edge once, as (i, j) arrays with i < j."""
    mask = adjacency.rows < adjacency.cols
    return adjacency.rows[mask], adjacency.cols[mask]


def induced_adjacency(adjacency: SparseMatrix, nodes: np.ndarray) -> SparseMatrix:
    """Subgraph adjacency over `nodes` (sorted unique ids), reindexed densely."""
    nodes = np.asarray(nodes, dtype=np.int64)
    lookup = -np.ones(adjacency.n_rows, dtype=np.int64)
    lookup[nodes] = np.arange(nodes.size)
    keep = (lookup[adjacency.rows] >= 0) & (lookup[adjacency.cols] >= 0)
    return SparseMatrix(
        nodes.size,
        nodes.size,
        lookup[adjacency.rows[keep]],
        lookup[adjacency.cols[keep]],
        adjacency.vals[keep],
    )
