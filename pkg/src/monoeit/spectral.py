"""Small dense linear algebra behind the semidefiniteness tests."""
from __future__ import annotations

import numpy as np


def pseudoinverse(basis_matrix: np.ndarray) -> np.ndarray:
    """``(I^T I)^{-1} I^T`` for a full-column-rank ``I``."""
    m = np.asarray(basis_matrix, dtype=float)
    if np.linalg.matrix_rank(m) < m.shape[1]:
        raise np.linalg.LinAlgError("basis matrix is rank deficient")
    return np.linalg.solve(m.T @ m, m.T)


def center_columns(a: np.ndarray) -> np.ndarray:
    return a - a.mean(axis=0, keepdims=True)


def symmetrize_data(v_tilde: np.ndarray, basis_matrix: np.ndarray) -> np.ndarray:
    """``Sym(V~ I^+) I`` with every column forced to be mean-free.

    Columns of the raw data are centred first, then the symmetric part is
    taken, then the result is centred again.
    """
    pinv = pseudoinverse(basis_matrix)
    s = center_columns(np.asarray(v_tilde, dtype=float)) @ pinv
    s = 0.5 * (s + s.T)
    return center_columns(s @ basis_matrix)


def min_eigenvalue(m: np.ndarray) -> float:
    m = np.asarray(m, dtype=float)
    if not np.all(np.isfinite(m)):
        raise ValueError("matrix has non-finite entries")
    return float(np.linalg.eigvalsh(m)[0])


def min_eigenvalues(stack: np.ndarray) -> np.ndarray:
    """Smallest eigenvalue of each matrix in a (n, m, m) stack."""
    stack = np.asarray(stack, dtype=float)
    if not np.all(np.isfinite(stack)):
        raise ValueError("matrix has non-finite entries")
    return np.linalg.eigvalsh(stack)[:, 0]


def spectral_norm(m: np.ndarray) -> float:
    """Operator 2-norm of a symmetric matrix."""
    w = np.linalg.eigvalsh(np.asarray(m, dtype=float))
    return float(np.max(np.abs(w))) if w.size else 0.0


def spectral_continuity_check(s: np.ndarray, t: np.ndarray, slack: float = 1e-12) -> bool:
    """``|min eig S - min eig T| <= ||S - T||`` up to ``slack``."""
    s = np.asarray(s, dtype=float)
    t = np.asarray(t, dtype=float)
    if s.shape != t.shape:
        raise ValueError("shape mismatch")
    gap = abs(min_eigenvalue(s) - min_eigenvalue(t))
    return gap <= spectral_norm(s - t) + slack
