"""Robust tracker: per-step sparse outlier estimation before the update.

For a fixed subspace U the coefficient minimizer is affine in the outlier
vector, r = B (x - s) with B = A^-1 U^T Omega.  Substituting it back gives a
lasso in s alone,

    min_s ||C (x - s)||^2 + lambda3 ||s||_1,
    C = [Omega (I - U B); sqrt(lambda1) B; sqrt(lambda2) L^1/2 U B],

solved here by cyclic coordinate descent on the Gram matrix G = C^T C.
Columns of C for unobserved coordinates are identically zero, so any
lambda3 > 0 forces s to vanish there.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla

from graphmc.errors import ConvergenceError
from graphmc.graph import GraphLaplacian
from graphmc.solvers import SolverConfig
from graphmc.tracker import (
    AccumulatorSet,
    Hyperparameters,
    OnlineTracker,
    StepRecord,
    StreamSample,
    SubspaceState,
    _check_dims,
    coefficient_matrix,
    compute_coefficients,
    update_accumulators,
    update_subspace,
)

logger = logging.getLogger(__name__)

LASSO_TOL = 1e-8
SPARSE_DENSITY_LIMIT = 0.25


@dataclass(frozen=True)
class LassoProblem:
    design: np.ndarray
    target: np.ndarray
    penalty: float
    tolerance: float = LASSO_TOL
    max_iters: int = 0
    B: np.ndarray | None = None

    def __post_init__(self):
        if self.penalty < 0:
            raise ValueError("lasso penalty must be non-negative")
        if self.max_iters <= 0:
            object.__setattr__(self, "max_iters", 100 * self.design.shape[1])

    @property
    def gram(self) -> np.ndarray:
        return self.design.T @ self.design

    def objective(self, s: np.ndarray) -> float:
        res = self.design @ (self.target - s)
        return float(res @ res + self.penalty * np.abs(s).sum())


def assemble_lasso(
    U_prev: np.ndarray,
    sample: StreamSample,
    L: GraphLaplacian,
    hp: Hyperparameters,
    tolerance: float = LASSO_TOL,
    max_iters: int = 0,
) -> LassoProblem:
    _check_dims(U_prev, sample, L)
    m = sample.m
    omega = sample.mask.astype(float)
    A = coefficient_matrix(U_prev, sample.mask, L, hp)
    B = sla.cho_solve(sla.cho_factor(A), U_prev.T * omega)
    UB = U_prev @ B
    top = omega[:, None] * (np.eye(m) - UB)
    blocks = [top, np.sqrt(hp.lambda1) * B]
    if hp.lambda2 > 0:
        blocks.append(np.sqrt(hp.lambda2) * (L.sqrt_laplacian @ UB))
    else:
        blocks.append(np.zeros((m, m)))
    C = np.vstack(blocks)
    return LassoProblem(C, sample.values.copy(), hp.lambda3, tolerance, max_iters, B)


def kkt_violation(grad: np.ndarray, s: np.ndarray, penalty: float) -> float:
    """Largest KKT violation given grad = C^T C (x - s).

    Optimality: 2 grad_j = penalty * sign(s_j) where s_j != 0 and
    |2 grad_j| <= penalty where s_j == 0.
    """
    g2 = 2.0 * grad
    nz = s != 0
    on = np.abs(g2[nz] - penalty * np.sign(s[nz]))
    off = np.abs(g2[~nz]) - penalty
    return float(max(on.max(initial=0.0), off.max(initial=0.0), 0.0))


def solve_lasso(prob: LassoProblem, s0: np.ndarray | None = None) -> np.ndarray:
    """Cyclic coordinate descent with active-set passes.

    Full sweeps alternate with sweeps restricted to the current support;
    convergence is declared on the KKT certificate at ``prob.tolerance``.
    Each coordinate update is an exact minimization, so the objective never
    increases.
    """
    G = prob.gram
    x = prob.target
    m = x.shape[0]
    lam_half = 0.5 * prob.penalty
    diag = np.diag(G).copy()
    usable = diag > 1e-14 * max(diag.max(initial=0.0), 1.0)
    h = G @ x
    s = np.zeros(m) if s0 is None else np.where(usable, s0, 0.0).astype(float)
    g = h - G @ s

    active_only = False
    viol = np.inf
    for it in range(1, prob.max_iters + 1):
        coords = np.flatnonzero(s) if active_only else np.flatnonzero(usable)
        for j in coords:
            rho = g[j] + diag[j] * s[j]
            new = np.sign(rho) * max(abs(rho) - lam_half, 0.0) / diag[j]
            delta = new - s[j]
            if delta != 0.0:
                g -= G[:, j] * delta
                s[j] = new
        g = h - G @ s
        viol = kkt_violation(g, s, prob.penalty)
        if viol <= prob.tolerance:
            return s
        if active_only:
            nz = s != 0
            act = np.abs(2 * g[nz] - prob.penalty * np.sign(s[nz])).max(initial=0.0)
            active_only = act > prob.tolerance
        else:
            active_only = bool(np.any(s))
    raise ConvergenceError(
        f"lasso did not meet KKT tolerance {prob.tolerance:.1e} in {prob.max_iters} sweeps "
        f"(violation {viol:.3e})",
        achieved=viol,
        iterations=prob.max_iters,
    )


def lasso_condition(prob: LassoProblem, mask: np.ndarray) -> float:
    """Smallest eigenvalue of the Gram matrix on observed coordinates.

    A value near zero flags a near-degenerate (non-unique) lasso.
    """
    G = prob.gram[np.ix_(mask, mask)]
    if G.size == 0:
        return 0.0
    return float(np.linalg.eigvalsh(G)[0])


def compute_robust_coefficients(
    U_prev: np.ndarray,
    sample: StreamSample,
    L: GraphLaplacian,
    hp: Hyperparameters,
    s_t: np.ndarray,
) -> np.ndarray:
    cleaned = StreamSample(sample.values - np.asarray(s_t, dtype=float), sample.mask)
    return compute_coefficients(U_prev, cleaned, L, hp)


@dataclass(frozen=True)
class RobustStepResult:
    """Outlier estimate (sparse index/value storage when density <= 25%)."""

    r_t: np.ndarray
    clean_values: np.ndarray
    m: int
    s_index: np.ndarray | None = None
    s_value: np.ndarray | None = None
    s_dense: np.ndarray | None = None

    @classmethod
    def build(cls, s, r_t, clean_values):
        s = np.asarray(s, dtype=float)
        idx = np.flatnonzero(s)
        if idx.size <= SPARSE_DENSITY_LIMIT * s.size:
            return cls(r_t, clean_values, s.size, idx, s[idx])
        return cls(r_t, clean_values, s.size, s_dense=s)

    @property
    def s_t(self) -> np.ndarray:
        if self.s_dense is not None:
            return self.s_dense
        s = np.zeros(self.m)
        s[self.s_index] = self.s_value
        return s

    @property
    def support(self) -> np.ndarray:
        return np.flatnonzero(self.s_t)


@dataclass(frozen=True)
class RobustStepOutput:
    state: SubspaceState
    acc: AccumulatorSet
    result: RobustStepResult
    prediction: np.ndarray

    @property
    def r(self):
        return self.result.r_t


def estimate_outliers(U_prev, sample, L, hp, tolerance=LASSO_TOL, max_iters=0):
    """Lasso step of the robust iteration; lambda3 == 0 disables it (s = 0)."""
    if hp.lambda3 == 0:
        return np.zeros(sample.m)
    prob = assemble_lasso(U_prev, sample, L, hp, tolerance, max_iters)
    return solve_lasso(prob)


def robust_step(
    state: SubspaceState,
    acc: AccumulatorSet,
    sample: StreamSample,
    L: GraphLaplacian,
    hp: Hyperparameters,
    cfg: SolverConfig | None = None,
    predict_after_update: bool = False,
    lasso_tol: float = LASSO_TOL,
) -> RobustStepOutput:
    """Lasso for s_t, then r_t = B (x_t - s_t), accumulators, subspace."""
    s_t = estimate_outliers(state.U, sample, L, hp, lasso_tol)
    r_t = compute_robust_coefficients(state.U, sample, L, hp, s_t)
    clean = sample.values - s_t
    new_acc = update_accumulators(acc, sample, r_t, clean, s_t, forgetting=hp.forgetting)
    U_new = update_subspace(new_acc, L, hp, cfg, warm_start=state.U)
    pred = (U_new if predict_after_update else state.U) @ r_t
    result = RobustStepResult.build(s_t, r_t, np.where(sample.mask, clean, 0.0))
    return RobustStepOutput(SubspaceState(U_new, state.t + 1), new_acc, result, pred)


class RobustTracker(OnlineTracker):
    """Stateful wrapper driving :func:`robust_step`."""

    def step(self, sample: StreamSample) -> RobustStepOutput:
        out = robust_step(
            self.state, self.acc, sample, self.laplacian, self.hp, self.cfg,
            predict_after_update=self.predict_after_update,
        )
        self.state, self.acc = out.state, out.acc
        if self.retain_history:
            self.history.append(StepRecord(sample, out.result.r_t, out.result.s_t))
        return out
