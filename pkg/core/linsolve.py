"""
Sparse direct solves for Fracture Width Filter
Analyze a sparsity pattern once, factor every matrix that shares it with
the stored column ordering, and solve with a residual check.
"""

import logging
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np
from scipy import sparse
from scipy.sparse.csgraph import reverse_cuthill_mckee
from scipy.sparse.linalg import splu

from .constants import ORDERINGS, PIVOT_TOLERANCE, SOLVER_TOLERANCE
from .exceptions import SingularMatrixError, SolverError

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class SparsityPattern:
    """Compressed-column structure of a square matrix."""
    shape: tuple
    indptr: np.ndarray
    indices: np.ndarray
    symmetric: bool

    @classmethod
    def from_matrix(cls, matrix: sparse.spmatrix) -> "SparsityPattern":
        csc = _as_csc(matrix)
        structure = csc.copy()
        structure.data = np.ones_like(structure.data)
        symmetric = (structure != structure.T).nnz == 0
        return cls(csc.shape, csc.indptr.copy(), csc.indices.copy(), bool(symmetric))

    @property
    def nnz(self) -> int:
        return int(self.indices.size)

    @property
    def is_diagonal(self) -> bool:
        n = self.shape[0]
        return self.nnz == n and np.array_equal(self.indices, np.arange(n)) and \
            np.array_equal(self.indptr, np.arange(n + 1))

    def matches(self, matrix: sparse.spmatrix) -> bool:
        csc = _as_csc(matrix)
        return (csc.shape == self.shape and np.array_equal(csc.indptr, self.indptr)
                and np.array_equal(csc.indices, self.indices))

    def to_matrix(self) -> sparse.csc_matrix:
        return sparse.csc_matrix((np.ones(self.nnz), self.indices, self.indptr), shape=self.shape)


@dataclass(frozen=True, eq=False)
class SymbolicFactorization:
    """
    Reusable elimination ordering. ``row_perm`` is None for the column-only
    orderings; the RCM ordering is applied symmetrically.
    """
    pattern: SparsityPattern
    ordering: str
    col_perm: np.ndarray
    row_perm: Optional[np.ndarray] = None


@dataclass(eq=False)
class Factorization:
    symbolic: SymbolicFactorization
    matrix: sparse.csc_matrix
    lu: object
    tolerance: float = SOLVER_TOLERANCE

    @property
    def fill(self) -> int:
        """Nonzeros in L plus U."""
        return int(self.lu.L.nnz + self.lu.U.nnz)

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        return solve(self, rhs)


def _as_csc(matrix: sparse.spmatrix) -> sparse.csc_matrix:
    csc = sparse.csc_matrix(matrix)
    if csc.shape[0] != csc.shape[1]:
        raise SolverError(f"Matrix must be square, got {csc.shape}")
    csc.sum_duplicates()
    csc.sort_indices()
    return csc


def _permuted(symbolic: SymbolicFactorization, matrix: sparse.csc_matrix) -> sparse.csc_matrix:
    permuted = matrix
    if symbolic.row_perm is not None:
        permuted = permuted[symbolic.row_perm, :]
    return sparse.csc_matrix(permuted[:, symbolic.col_perm])


def analyze(matrix: Union[sparse.spmatrix, SparsityPattern], ordering: str = "colamd") -> SymbolicFactorization:
    """
    Compute an elimination ordering for a sparsity pattern.

    The ``colamd`` ordering is read from a SuperLU factorization of the
    given matrix (its values only matter for that one run); ``rcm`` uses
    reverse Cuthill-McKee on the structure; ``natural`` keeps the input
    order. Diagonal patterns always get the trivial ordering.

    Args:
        matrix: Matrix or pattern to analyze.
        ordering: One of colamd, rcm, natural.

    Returns:
        SymbolicFactorization shareable across threads.
    """
    if ordering not in ORDERINGS:
        raise SolverError(f"Unknown ordering '{ordering}'; choose from {ORDERINGS}")
    if isinstance(matrix, SparsityPattern):
        pattern, csc = matrix, matrix.to_matrix()
    else:
        csc = _as_csc(matrix)
        pattern = SparsityPattern.from_matrix(csc)
    n = pattern.shape[0]
    trivial = np.arange(n)

    if pattern.is_diagonal or ordering == "natural":
        return SymbolicFactorization(pattern, "natural", trivial)

    if ordering == "rcm":
        perm = np.asarray(reverse_cuthill_mckee(pattern.to_matrix().tocsr(), symmetric_mode=False))
        return SymbolicFactorization(pattern, "rcm", perm, perm)

    try:
        lu = splu(csc, permc_spec="COLAMD")
    except RuntimeError as e:
        logger.warning(f"COLAMD analysis failed ({e}); falling back to reverse Cuthill-McKee")
        return analyze(pattern, "rcm")
    # SuperLU factors Pr A Pc; column j of A Pc is column argsort(perm_c)[j] of A
    col_perm = np.argsort(lu.perm_c)
    logger.debug(f"Analyzed {n}x{n} pattern with {pattern.nnz} nonzeros, fill {lu.L.nnz + lu.U.nnz}")
    return SymbolicFactorization(pattern, "colamd", col_perm)


def factor(symbolic: SymbolicFactorization, matrix: sparse.spmatrix,
           tolerance: float = SOLVER_TOLERANCE, context: str = "") -> Factorization:
    """
    Numeric LU factorization reusing a stored ordering.

    Args:
        symbolic: Result of analyze for the same pattern.
        matrix: Matrix values.
        tolerance: Relative residual bound for later solves.
        context: Label carried into singularity errors.

    Returns:
        Factorization.

    Raises:
        SolverError: Pattern differs from the analyzed one.
        SingularMatrixError: Zero or negligible pivot.
    """
    csc = _as_csc(matrix)
    if not symbolic.pattern.matches(csc):
        raise SolverError("Matrix pattern differs from the analyzed pattern")
    if not np.all(np.isfinite(csc.data)):
        raise SolverError(f"Matrix has non-finite entries [{context}]")

    try:
        lu = splu(_permuted(symbolic, csc), permc_spec="NATURAL")
    except RuntimeError as e:
        raise SingularMatrixError(str(e), context=context) from e

    pivots = np.abs(lu.U.diagonal())
    scale = pivots.max() if pivots.size else 0.0
    if scale == 0.0 or pivots.min() <= PIVOT_TOLERANCE * scale:
        worst = int(np.argmin(pivots)) if pivots.size else None
        raise SingularMatrixError("negligible pivot in LU factorization", pivot=worst, context=context)
    return Factorization(symbolic, csc, lu, tolerance)


def solve(factorization: Factorization, rhs: np.ndarray) -> np.ndarray:
    """
    Solve with one step of iterative refinement when the residual is large.

    Raises:
        SolverError: Non-finite result, or relative residual above the
            tolerance after refinement.
    """
    rhs = np.asarray(rhs, dtype=float)
    norm_b = np.linalg.norm(rhs)
    if norm_b == 0.0:
        return np.zeros_like(rhs)

    symbolic = factorization.symbolic
    A = factorization.matrix

    def apply_inverse(b: np.ndarray) -> np.ndarray:
        b_p = b if symbolic.row_perm is None else b[symbolic.row_perm]
        y = factorization.lu.solve(b_p)
        x = np.empty_like(y)
        x[symbolic.col_perm] = y
        return x

    x = apply_inverse(rhs)
    residual = rhs - A @ x
    rel = np.linalg.norm(residual) / norm_b
    if rel > factorization.tolerance and np.all(np.isfinite(x)):
        x = x + apply_inverse(residual)
        residual = rhs - A @ x
        rel = np.linalg.norm(residual) / norm_b
        logger.debug(f"Iterative refinement applied, relative residual {rel:.3e}")
    if not np.all(np.isfinite(x)):
        raise SolverError("Solve produced non-finite values")
    if rel > factorization.tolerance:
        raise SolverError(f"Relative residual {rel:.3e} exceeds tolerance {factorization.tolerance:.1e}")
    return x
