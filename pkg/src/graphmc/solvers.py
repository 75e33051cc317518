"""Linear solvers for the subspace update.

The subspace update solves the mr x mr system

    (sum_t r_t r_t^T (x) Omega_t + lambda1 I + lambda2 R (x) L) vec(U) = vec(P)

Because every Omega_t is diagonal, the first term is block diagonal over
rows of U: row i sees M_i = sum_t Omega_t[i] r_t r_t^T.  The operator is
applied in m x r form and never materialized on the CG path.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla

from graphmc.errors import ConvergenceError, DimensionError
from graphmc.graph import GraphLaplacian

logger = logging.getLogger(__name__)

METHODS = ("auto", "dense_direct", "conjugate_gradient")


@dataclass(frozen=True)
class SolverConfig:
    method: str = "auto"
    cg_rel_tolerance: float = 1e-8
    cg_max_iters: int | None = None  # None -> 10 * m * r
    dense_threshold: int = 2000

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown solver method {self.method!r}; expected one of {METHODS}")
        if not 0 < self.cg_rel_tolerance < 1:
            raise ValueError("cg_rel_tolerance must lie in (0, 1)")
        if self.cg_max_iters is not None and self.cg_max_iters < 1:
            raise ValueError("cg_max_iters must be >= 1")
        if self.dense_threshold < 1:
            raise ValueError("dense_threshold must be >= 1")


@dataclass(frozen=True)
class SubspaceSystemOperator:
    """Snapshot of the subspace-update operator.

    per_row : (m, r, r) array of the row accumulators M_i.
    R : (r, r) unmasked accumulator sum_t r_t r_t^T.
    """

    per_row: np.ndarray
    R: np.ndarray
    laplacian: GraphLaplacian
    lambda1: float
    lambda2: float

    def __post_init__(self):
        m, r, r2 = self.per_row.shape
        if r != r2 or self.R.shape != (r, r):
            raise DimensionError(f"per_row {self.per_row.shape} and R {self.R.shape} disagree")
        if self.laplacian.m != m:
            raise DimensionError(f"Laplacian has {self.laplacian.m} nodes, operator has {m} rows")
        if not self.lambda1 > 0:
            raise ValueError("lambda1 must be positive")
        if self.lambda2 < 0:
            raise ValueError("lambda2 must be non-negative")

    @property
    def shape(self):
        return self.per_row.shape[:2]

    def dense(self) -> np.ndarray:
        """Materialize the mr x mr matrix acting on column-stacked vec(U)."""
        m, r = self.shape
        K = np.kron(self.lambda2 * self.R, self.laplacian.laplacian)
        rows = np.arange(m)
        for a in range(r):
            for b in range(r):
                K[a * m + rows, b * m + rows] += self.per_row[:, a, b]
        K[np.diag_indices_from(K)] += self.lambda1
        return K


def apply_operator(op: SubspaceSystemOperator, U: np.ndarray) -> np.ndarray:
    U = np.asarray(U, dtype=float)
    if U.shape != op.shape:
        raise DimensionError(f"U has shape {U.shape}, operator expects {op.shape}")
    V = np.einsum("ia,iab->ib", U, op.per_row)
    V += op.lambda1 * U
    if op.lambda2 != 0:
        V += op.lambda2 * (op.laplacian.laplacian @ U @ op.R)
    return V


def _row_preconditioner(op: SubspaceSystemOperator) -> np.ndarray:
    r = op.shape[1]
    blocks = op.per_row + op.lambda1 * np.eye(r)
    return np.linalg.inv(blocks)


def _pcg(op, rhs, x0, tol, max_iters):
    Pinv = _row_preconditioner(op)
    precond = lambda Z: np.einsum("ia,iab->ib", Z, Pinv)

    b_norm = np.linalg.norm(rhs)
    X = np.zeros_like(rhs) if x0 is None else np.array(x0, dtype=float)
    Res = rhs - apply_operator(op, X)
    res_norm = np.linalg.norm(Res)
    if res_norm <= tol * b_norm:
        return X, 0, res_norm / b_norm
    Z = precond(Res)
    D = Z.copy()
    rz = np.sum(Res * Z)
    for k in range(1, max_iters + 1):
        AD = apply_operator(op, D)
        alpha = rz / np.sum(D * AD)
        X += alpha * D
        Res -= alpha * AD
        res_norm = np.linalg.norm(Res)
        if res_norm <= tol * b_norm:
            return X, k, res_norm / b_norm
        Z = precond(Res)
        rz_new = np.sum(Res * Z)
        D = Z + (rz_new / rz) * D
        rz = rz_new
    raise ConvergenceError(
        f"CG did not reach relative residual {tol:.1e} in {max_iters} iterations "
        f"(achieved {res_norm / b_norm:.3e})",
        achieved=res_norm / b_norm,
        iterations=max_iters,
    )


def solve_subspace(
    op: SubspaceSystemOperator,
    rhs: np.ndarray,
    cfg: SolverConfig | None = None,
    x0: np.ndarray | None = None,
) -> np.ndarray:
    """Solve apply_operator(op, U) = rhs for U.

    ``x0`` warm-starts the CG path and is ignored by the dense path.  With
    ``method="auto"`` and no graph term, the m independent r x r row systems
    are solved directly.
    """
    cfg = cfg or SolverConfig()
    rhs = np.asarray(rhs, dtype=float)
    m, r = op.shape
    if rhs.shape != (m, r):
        raise DimensionError(f"rhs has shape {rhs.shape}, expected {(m, r)}")
    if not np.any(rhs):
        return np.zeros((m, r))

    method = cfg.method
    if method == "auto" and (op.lambda2 == 0 or op.laplacian.is_zero):
        # graph term absent: the system is block diagonal over rows
        blocks = op.per_row + op.lambda1 * np.eye(r)
        return np.linalg.solve(blocks, rhs[:, :, None])[:, :, 0]
    if method == "auto":
        method = "dense_direct" if m * r <= cfg.dense_threshold else "conjugate_gradient"

    if method == "dense_direct":
        K = op.dense()
        u = sla.cho_solve(sla.cho_factor(K, lower=True), rhs.reshape(-1, order="F"))
        return u.reshape((m, r), order="F")

    max_iters = cfg.cg_max_iters or 10 * m * r
    U, iters, rel = _pcg(op, rhs, x0, cfg.cg_rel_tolerance, max_iters)
    logger.debug("pcg converged in %d iterations, relative residual %.2e", iters, rel)
    return U


def solve_sylvester(
    L: GraphLaplacian,
    lambda1: float,
    lambda2: float,
    R: np.ndarray,
    P: np.ndarray,
) -> np.ndarray:
    """Fully observed subspace update as a Sylvester equation.

    Solves lambda1 (I + lambda2 L)^-1 U + U R = (I + lambda2 L)^-1 P by
    Bartels-Stewart: real Schur form of R on the r x r side, and the cached
    eigendecomposition of L on the m x m side, which diagonalizes
    (I + lambda2 L) for every lambda2.
    """
    P = np.asarray(P, dtype=float)
    R = np.asarray(R, dtype=float)
    m, r = P.shape
    if L.m != m or R.shape != (r, r):
        raise DimensionError(f"P {P.shape}, R {R.shape}, Laplacian {L.m} nodes disagree")
    if not lambda1 > 0:
        raise ValueError("lambda1 must be positive")

    w, V = L.eigh()
    kappa = 1.0 + lambda2 * np.clip(w, 0.0, None)
    assert np.all(kappa > 0), "I + lambda2 L must be positive definite"

    T, Z = sla.schur(0.5 * (R + R.T), output="real")
    if r > 1 and np.any(np.abs(np.diag(T, -1)) > 1e-12 * max(1.0, np.abs(T).max())):
        raise ValueError("R has complex eigenvalues; it must be symmetric PSD")

    # Work in the eigenbasis of L and the Schur basis of R.
    F = (V.T @ P @ Z) / kappa[:, None]
    A_diag = lambda1 / kappa
    Y = np.empty_like(F)
    for k in range(r):
        g = F[:, k] - Y[:, :k] @ T[:k, k]
        Y[:, k] = g / (A_diag + T[k, k])
    return V @ Y @ Z.T
