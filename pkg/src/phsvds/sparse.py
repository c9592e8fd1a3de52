"""Compressed-row sparse matrices and Matrix Market I/O.

The storage is canonical: columns sorted within each row, duplicates
summed, explicit zeros dropped.  Products are delegated to ``scipy.sparse``
CSR kernels, which accumulate each row left to right in stored column order
and are therefore deterministic.
"""

from __future__ import annotations

import io
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .errors import ContractError, MatrixMarketError

__all__ = [
    "SparseMatrix",
    "spmv",
    "spmv_t",
    "parse_matrix_market",
    "read_matrix_market",
    "write_matrix_market",
]


@dataclass(frozen=True, eq=False)
class SparseMatrix:
    nrows: int
    ncols: int
    row_offsets: np.ndarray
    col_indices: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        ro = np.ascontiguousarray(self.row_offsets, dtype=np.int64)
        ci = np.ascontiguousarray(self.col_indices, dtype=np.int64)
        va = np.ascontiguousarray(self.values, dtype=np.float64)
        object.__setattr__(self, "row_offsets", ro)
        object.__setattr__(self, "col_indices", ci)
        object.__setattr__(self, "values", va)
        for a in (ro, ci, va):
            a.setflags(write=False)
        self._validate()

    def _validate(self):
        if self.nrows < 0 or self.ncols < 0:
            raise ContractError("negative dimension")
        ro, ci = self.row_offsets, self.col_indices
        if ro.shape != (self.nrows + 1,) or ro[0] != 0:
            raise ContractError("row_offsets must have length nrows+1 and start at 0")
        if np.any(np.diff(ro) < 0):
            raise ContractError("row_offsets must be non-decreasing")
        nnz = int(ro[-1])
        if ci.shape != (nnz,) or self.values.shape != (nnz,):
            raise ContractError("row_offsets[-1] must equal len(values) == len(col_indices)")
        if nnz:
            if ci.min() < 0 or ci.max() >= self.ncols:
                raise ContractError("column index out of range")
            # strictly increasing within rows: a non-increase may only occur at a row start
            drops = np.flatnonzero(np.diff(ci) <= 0) + 1
            starts = np.zeros(nnz, dtype=bool)
            starts[ro[:-1][ro[:-1] < nnz]] = True
            if np.any(~starts[drops]):
                raise ContractError("column indices must be strictly increasing within a row")
        if np.any(self.values == 0.0):
            raise ContractError("explicit zeros are not allowed; use from_triplets")

    # ---------------------------------------------------------------- builders
    @classmethod
    def from_triplets(cls, nrows, ncols, rows, cols, vals):
        """Canonical matrix from COO triplets; duplicates are summed."""
        rows = np.asarray(rows, dtype=np.int64).ravel()
        cols = np.asarray(cols, dtype=np.int64).ravel()
        vals = np.asarray(vals, dtype=np.float64).ravel()
        if not (rows.shape == cols.shape == vals.shape):
            raise ContractError("triplet arrays must have equal length")
        if rows.size:
            if rows.min() < 0 or rows.max() >= nrows or cols.min() < 0 or cols.max() >= ncols:
                raise ContractError("triplet index out of bounds")
        order = np.lexsort((cols, rows))
        rows, cols, vals = rows[order], cols[order], vals[order]
        if rows.size:
            new = np.ones(rows.size, dtype=bool)
            new[1:] = (rows[1:] != rows[:-1]) | (cols[1:] != cols[:-1])
            starts = np.flatnonzero(new)
            # sequential sum in input order of each duplicate group
            summed = np.add.reduceat(vals, starts)
            rows, cols, vals = rows[starts], cols[starts], summed
            keep = vals != 0.0
            rows, cols, vals = rows[keep], cols[keep], vals[keep]
        offsets = np.zeros(nrows + 1, dtype=np.int64)
        np.add.at(offsets, rows + 1, 1)
        return cls(nrows, ncols, np.cumsum(offsets), cols, vals)

    @classmethod
    def from_dense(cls, a):
        a = np.atleast_2d(np.asarray(a, dtype=np.float64))
        r, c = np.nonzero(a)
        return cls.from_triplets(a.shape[0], a.shape[1], r, c, a[r, c])

    @classmethod
    def from_scipy(cls, m):
        m = sp.coo_matrix(m)
        return cls.from_triplets(m.shape[0], m.shape[1], m.row, m.col, m.data)

    @classmethod
    def diag(cls, d, shape=None):
        d = np.asarray(d, dtype=np.float64)
        nr, nc = shape if shape is not None else (d.size, d.size)
        idx = np.arange(d.size)
        return cls.from_triplets(nr, nc, idx, idx, d)

    # ---------------------------------------------------------------- views
    @property
    def shape(self):
        return (self.nrows, self.ncols)

    @property
    def nnz(self):
        return int(self.row_offsets[-1])

    @cached_property
    def _csr(self):
        return sp.csr_matrix(
            (self.values, self.col_indices, self.row_offsets), shape=self.shape
        )

    @cached_property
    def _csr_t(self):
        return self._csr.T.tocsr()

    def to_scipy(self):
        return self._csr.copy()

    def to_dense(self):
        return self._csr.toarray()

    def transpose(self):
        t = self._csr_t
        t.sort_indices()
        return SparseMatrix(self.ncols, self.nrows, t.indptr, t.indices, t.data)

    @property
    def T(self):
        return self.transpose()

    def diagonal(self):
        return self._csr.diagonal()

    def column_norms_sq(self):
        return np.asarray(self._csr.multiply(self._csr).sum(axis=0)).ravel()

    def fro_norm(self):
        return float(np.sqrt(np.dot(self.values, self.values)))

    def __eq__(self, other):
        if not isinstance(other, SparseMatrix):
            return NotImplemented
        return (
            self.shape == other.shape
            and np.array_equal(self.row_offsets, other.row_offsets)
            and np.array_equal(self.col_indices, other.col_indices)
            and np.array_equal(self.values, other.values)
        )

    __hash__ = None

    def __matmul__(self, x):
        return spmv(self, x)


def spmv(A: SparseMatrix, x) -> np.ndarray:
    """``A @ x`` for a vector (or a block of column vectors)."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[0] != A.ncols:
        raise ContractError(f"spmv: expected length {A.ncols}, got {x.shape[0]}")
    return A._csr @ x


def spmv_t(A: SparseMatrix, x) -> np.ndarray:
    """``A.T @ x``."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[0] != A.nrows:
        raise ContractError(f"spmv_t: expected length {A.nrows}, got {x.shape[0]}")
    return A._csr_t @ x


# ------------------------------------------------------------------ Matrix Market

_FIELDS = {"real", "integer"}
_SYMMETRIES = {"general", "symmetric"}


def _data_lines(lines, start):
    for lineno, line in enumerate(lines[start:], start=start + 1):
        s = line.strip()
        if not s or s.startswith("%"):
            continue
        yield lineno, s


def parse_matrix_market(text) -> SparseMatrix:
    """Parse Matrix Market text (``str`` or ``bytes``).

    Supports ``coordinate`` and ``array`` formats with ``real``/``integer``
    fields and ``general``/``symmetric`` symmetry.  Symmetric storage is
    expanded and duplicate coordinates are summed.
    """
    if isinstance(text, (bytes, bytearray)):
        text = text.decode("ascii", errors="replace")
    lines = text.splitlines()
    if not lines:
        raise MatrixMarketError("empty input", 1)
    head = lines[0].split()
    if len(head) != 5 or head[0].lower() != "%%matrixmarket" or head[1].lower() != "matrix":
        raise MatrixMarketError("malformed header", 1)
    fmt, fld, sym = (h.lower() for h in head[2:])
    if fmt not in ("coordinate", "array"):
        raise MatrixMarketError(f"unsupported format {fmt!r}", 1)
    if fld not in _FIELDS:
        raise MatrixMarketError(f"unsupported field {fld!r}", 1)
    if sym not in _SYMMETRIES:
        raise MatrixMarketError(f"unsupported symmetry {sym!r}", 1)

    data = _data_lines(lines, 1)
    try:
        lineno, size_line = next(data)
    except StopIteration:
        raise MatrixMarketError("missing size line", len(lines)) from None
    try:
        dims = [int(t) for t in size_line.split()]
    except ValueError:
        raise MatrixMarketError("malformed size line", lineno) from None

    if fmt == "coordinate":
        if len(dims) != 3:
            raise MatrixMarketError("size line needs 'rows cols nnz'", lineno)
        m, n, nnz = dims
        rows = np.empty(nnz, dtype=np.int64)
        cols = np.empty(nnz, dtype=np.int64)
        vals = np.empty(nnz, dtype=np.float64)
        k = 0
        for lineno, s in data:
            if k == nnz:
                raise MatrixMarketError("more entries than declared", lineno)
            tok = s.split()
            if len(tok) != 3:
                raise MatrixMarketError("expected 'row col value'", lineno)
            try:
                i, j = int(tok[0]) - 1, int(tok[1]) - 1
                v = float(tok[2]) if fld == "real" else float(int(tok[2]))
            except ValueError:
                raise MatrixMarketError("unparsable entry", lineno) from None
            if not (0 <= i < m and 0 <= j < n):
                raise MatrixMarketError(f"index ({i + 1}, {j + 1}) out of bounds", lineno)
            if sym == "symmetric" and j > i:
                raise MatrixMarketError("symmetric storage must be lower triangular", lineno)
            rows[k], cols[k], vals[k] = i, j, v
            k += 1
        if k != nnz:
            raise MatrixMarketError(f"expected {nnz} entries, found {k}", len(lines))
    else:
        if len(dims) != 2:
            raise MatrixMarketError("size line needs 'rows cols'", lineno)
        m, n = dims
        if sym == "symmetric":
            if m != n:
                raise MatrixMarketError("symmetric array must be square", lineno)
            coords = [(i, j) for j in range(n) for i in range(j, m)]
        else:
            coords = [(i, j) for j in range(n) for i in range(m)]
        rows = np.empty(len(coords), dtype=np.int64)
        cols = np.empty(len(coords), dtype=np.int64)
        vals = np.empty(len(coords), dtype=np.float64)
        k = 0
        for lineno, s in data:
            if k == len(coords):
                raise MatrixMarketError("more entries than declared", lineno)
            try:
                v = float(s) if fld == "real" else float(int(s))
            except ValueError:
                raise MatrixMarketError("unparsable entry", lineno) from None
            rows[k], cols[k] = coords[k]
            vals[k] = v
            k += 1
        if k != len(coords):
            raise MatrixMarketError(f"expected {len(coords)} entries, found {k}", len(lines))

    if sym == "symmetric":
        if m != n:
            raise MatrixMarketError("symmetric matrix must be square", 2)
        off = rows != cols
        rows, cols, vals = (
            np.concatenate([rows, cols[off]]),
            np.concatenate([cols, rows[off]]),
            np.concatenate([vals, vals[off]]),
        )
    return SparseMatrix.from_triplets(m, n, rows, cols, vals)


def read_matrix_market(path) -> SparseMatrix:
    return parse_matrix_market(Path(path).read_bytes())


def write_matrix_market(A: SparseMatrix, target=None, comment=None) -> str:
    """Serialize as ``coordinate real general`` with 17 significant digits.

    Returns the text; also writes it to ``target`` (path or text stream) if given.
    """
    buf = io.StringIO()
    buf.write("%%MatrixMarket matrix coordinate real general\n")
    if comment:
        for line in str(comment).splitlines():
            buf.write(f"% {line}\n")
    buf.write(f"{A.nrows} {A.ncols} {A.nnz}\n")
    rows = np.repeat(np.arange(A.nrows), np.diff(A.row_offsets))
    for i, j, v in zip(rows, A.col_indices, A.values):
        buf.write(f"{i + 1} {j + 1} {v:.17g}\n")
    text = buf.getvalue()
    if target is not None:
        if hasattr(target, "write"):
            target.write(text)
        else:
            Path(target).write_text(text)
    return text
