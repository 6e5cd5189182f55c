"""Symmetric block-tridiagonal linear algebra for the MT x MT posterior system.

The matrix is described by T diagonal blocks D_t (M x M, symmetric) and T-1
subdiagonal blocks L_t = H[t+1, t]; the superdiagonal follows by symmetry.
Factorization is a block LDL^T forward sweep over Schur complements
(O(T M^3)); the inverse's tridiagonal blocks come from the standard backward
(Takahashi) recursion.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = ["BlockTriFactor", "factor", "solve", "inverse_blocks", "to_dense"]


@dataclass
class BlockTriFactor:
    """Schur complements S_t and their Cholesky factors from the forward sweep."""

    diag: np.ndarray      # (T, M, M) original diagonal blocks
    sub: np.ndarray       # (T-1, M, M) original subdiagonal blocks
    schur_chol: np.ndarray  # (T, M, M) lower Cholesky factors of S_t

    @property
    def T(self) -> int:
        return self.diag.shape[0]

    @property
    def M(self) -> int:
        return self.diag.shape[1]

    def logdet(self) -> float:
        d = np.diagonal(self.schur_chol, axis1=1, axis2=2)
        return float(2.0 * np.sum(np.log(d)))


def factor(diag: np.ndarray, sub: np.ndarray) -> BlockTriFactor:
    """Forward sweep S_1 = D_1, S_t = D_t - L_{t-1} S_{t-1}^{-1} L_{t-1}^T.

    Raises ``np.linalg.LinAlgError`` if any Schur complement is not positive
    definite.
    """
    diag = np.asarray(diag, dtype=np.float64)
    sub = np.asarray(sub, dtype=np.float64)
    T, M = diag.shape[0], diag.shape[1]
    if sub.shape != (max(T - 1, 0), M, M):
        raise ValueError(f"sub: expected shape ({T-1}, {M}, {M}), got {sub.shape}")
    chol = np.empty_like(diag)
    s = diag[0]
    chol[0] = np.linalg.cholesky(s)
    for t in range(1, T):
        # L_{t-1} S_{t-1}^{-1} L_{t-1}^T via triangular solves on the factor
        x = np.linalg.solve(chol[t - 1], sub[t - 1].T)
        s = diag[t] - x.T @ x
        chol[t] = np.linalg.cholesky(s)
    return BlockTriFactor(diag=diag, sub=sub, schur_chol=chol)


def _chol_solve(c, b):
    return np.linalg.solve(c.T, np.linalg.solve(c, b))


def solve(fac: BlockTriFactor, rhs: np.ndarray) -> np.ndarray:
    """Solve H x = rhs with rhs of shape (T, M)."""
    T, M = fac.T, fac.M
    rhs = np.asarray(rhs, dtype=np.float64)
    if rhs.shape != (T, M):
        raise ValueError(f"rhs: expected shape ({T}, {M}), got {rhs.shape}")
    y = np.empty_like(rhs)
    y[0] = rhs[0]
    for t in range(1, T):
        y[t] = rhs[t] - fac.sub[t - 1] @ _chol_solve(fac.schur_chol[t - 1], y[t - 1])
    x = np.empty_like(rhs)
    x[T - 1] = _chol_solve(fac.schur_chol[T - 1], y[T - 1])
    for t in range(T - 2, -1, -1):
        x[t] = _chol_solve(fac.schur_chol[t], y[t] - fac.sub[t].T @ x[t + 1])
    return x


def inverse_blocks(fac: BlockTriFactor) -> tuple[np.ndarray, np.ndarray]:
    """Tridiagonal part of H^{-1}.

    Returns (V_diag, V_sub) with V_diag[t] = (H^{-1})[t, t] and
    V_sub[t] = (H^{-1})[t+1, t].
    """
    T, M = fac.T, fac.M
    v_diag = np.empty((T, M, M))
    v_sub = np.empty((max(T - 1, 0), M, M))
    s_inv = _chol_solve(fac.schur_chol[T - 1], np.eye(M))
    v_diag[T - 1] = 0.5 * (s_inv + s_inv.T)
    for t in range(T - 2, -1, -1):
        s_inv = _chol_solve(fac.schur_chol[t], np.eye(M))
        g = s_inv @ fac.sub[t].T          # S_t^{-1} L_t^T
        v_sub[t] = -v_diag[t + 1] @ fac.sub[t] @ s_inv
        v = s_inv + g @ v_diag[t + 1] @ g.T
        v_diag[t] = 0.5 * (v + v.T)
    return v_diag, v_sub


def to_dense(diag: np.ndarray, sub: np.ndarray) -> np.ndarray:
    """Assemble the full MT x MT matrix (testing and small problems only)."""
    T, M = diag.shape[0], diag.shape[1]
    out = np.zeros((T * M, T * M))
    for t in range(T):
        out[t * M:(t + 1) * M, t * M:(t + 1) * M] = diag[t]
    for t in range(T - 1):
        out[(t + 1) * M:(t + 2) * M, t * M:(t + 1) * M] = sub[t]
        out[t * M:(t + 1) * M, (t + 1) * M:(t + 2) * M] = sub[t].T
    return out
