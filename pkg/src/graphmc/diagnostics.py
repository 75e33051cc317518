"""Error metric, cost diagnostics and derivative checks.

Per-step loss, with the outlier term at half weight so that doubling it
gives exactly the lasso objective used by the robust tracker:

    g(U, r, s) = 1/2 ||Omega (x - U r - s)||^2 + lambda1/2 ||r||^2
                 + lambda2/2 r^T U^T L U r + lambda3/2 ||s||_1

Surrogate cost  C^_t(U) = 1/t sum_tau g_tau(U, r_tau, s_tau) + lambda1/(2t) ||U||_F^2
True cost       C_t(U)  = same with each g_tau minimized over (r, s) at U.

All gradients are m x r, the orientation of U.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from graphmc.errors import DimensionError, UnsupportedModeError
from graphmc.graph import GraphLaplacian
from graphmc.robust import assemble_lasso, compute_robust_coefficients, solve_lasso
from graphmc.solvers import apply_operator
from graphmc.tracker import (
    AccumulatorSet,
    Hyperparameters,
    StepRecord,
    StreamSample,
    compute_coefficients,
    subspace_operator,
)

logger = logging.getLogger(__name__)

DIAGNOSTIC_COLUMNS = ("t", "err_db", "c_hat", "c_true", "grad_norm", "stat_residual")
INNER_LASSO_TOL = 1e-11


@dataclass(frozen=True)
class ErrorSeries:
    per_step_relative_error: np.ndarray
    err_db: np.ndarray
    skipped: int = 0

    @property
    def final(self) -> float:
        return float(self.err_db[-1]) if self.err_db.size else math.nan


def err_metric(truth: Sequence[np.ndarray], predictions: Sequence[np.ndarray]) -> ErrorSeries:
    """err(t) = 20 log10(mean_{i<=t} ||x^_i - x_i|| / ||x_i||).

    Steps whose truth vector is zero are skipped (counted in ``skipped``)
    and carry NaN relative error; err(t) averages over the retained steps.
    A mean of exactly zero maps to -inf.
    """
    if len(truth) != len(predictions):
        raise DimensionError(f"{len(truth)} truth vectors vs {len(predictions)} predictions")
    rel = np.full(len(truth), np.nan)
    for i, (x, xh) in enumerate(zip(truth, predictions)):
        x = np.asarray(x, dtype=float)
        nx = np.linalg.norm(x)
        if nx > 0:
            rel[i] = np.linalg.norm(np.asarray(xh, dtype=float) - x) / nx
    valid = ~np.isnan(rel)
    skipped = int((~valid).sum())
    if skipped:
        logger.warning("err_metric skipped %d zero-norm truth vectors", skipped)
    counts = np.cumsum(valid)
    sums = np.cumsum(np.where(valid, rel, 0.0))
    with np.errstate(divide="ignore", invalid="ignore"):
        mean = sums / counts
        db = 20.0 * np.log10(mean)
    return ErrorSeries(rel, db, skipped)


def step_loss(U, sample: StreamSample, r, s, L: GraphLaplacian, hp: Hyperparameters) -> float:
    """g(U, r, s) as in the module docstring (s may be None)."""
    s = np.zeros(sample.m) if s is None else s
    res = np.where(sample.mask, sample.values - U @ r - s, 0.0)
    Ur = U @ r
    return float(
        0.5 * res @ res
        + 0.5 * hp.lambda1 * r @ r
        + 0.5 * hp.lambda2 * Ur @ (L.laplacian @ Ur)
        + 0.5 * hp.lambda3 * np.abs(s).sum()
    )


def inner_minimizer(U, sample, L, hp, robust: bool, lasso_tol=INNER_LASSO_TOL):
    """(r, s) minimizing g(U, ., .); s is None for the plain tracker."""
    if robust and hp.lambda3 > 0:
        s = solve_lasso(assemble_lasso(U, sample, L, hp, tolerance=lasso_tol))
        return compute_robust_coefficients(U, sample, L, hp, s), s
    return compute_coefficients(U, sample, L, hp), None


def partial_min_loss(U, sample, L, hp, robust: bool) -> float:
    r, s = inner_minimizer(U, sample, L, hp, robust)
    return step_loss(U, sample, r, s, L, hp)


@dataclass(frozen=True)
class CostSnapshot:
    c_hat: float
    c_true: float

    @property
    def gap(self) -> float:
        return self.c_hat - self.c_true

    def overestimates(self, rtol: float = 1e-8) -> bool:
        return self.gap >= -rtol * (1.0 + abs(self.c_true))


def surrogate_and_true_cost(
    history: Sequence[StepRecord] | None,
    U: np.ndarray,
    L: GraphLaplacian,
    hp: Hyperparameters,
    robust: bool = False,
) -> CostSnapshot:
    """Evaluate C^_t(U) and C_t(U) from the retained history.

    C_t re-solves every past step at U, so the cost grows linearly in t.
    """
    if history is None:
        raise UnsupportedModeError("cost diagnostics need retained history")
    t = len(history)
    if t == 0:
        raise ValueError("history is empty")
    reg = 0.5 * hp.lambda1 * float(np.sum(U * U))
    hat = sum(step_loss(U, h.sample, h.r, h.s, L, hp) for h in history)
    true = sum(partial_min_loss(U, h.sample, L, hp, robust) for h in history)
    return CostSnapshot((hat + reg) / t, (true + reg) / t)


def surrogate_cost(acc: AccumulatorSet, U: np.ndarray, L: GraphLaplacian, hp: Hyperparameters, t: int) -> float:
    """C^_t(U) from accumulators only (no history), exact when forgetting = 1.

    sum_tau 1/2 ||Omega (c - U r)||^2 expands to
    1/2 sq_norm - <U, Q> + 1/2 sum_i u_i^T M_i u_i.
    """
    quad = 0.5 * acc.sq_norm - float(np.sum(U * acc.rhs))
    quad += 0.5 * float(np.einsum("ia,iab,ib->", U, acc.per_row, U))
    graph = 0.5 * hp.lambda2 * float(np.sum((L.laplacian @ U) * (U @ acc.R)))
    total = quad + 0.5 * hp.lambda1 * acc.coef_sq + graph + 0.5 * hp.lambda3 * acc.l1
    return (total + 0.5 * hp.lambda1 * float(np.sum(U * U))) / t


def loss_gradient(U, sample: StreamSample, r, s, L: GraphLaplacian, hp: Hyperparameters) -> np.ndarray:
    """d g / d U at fixed (r, s): Omega (U r + s - x) r^T + lambda2 L U r r^T."""
    s = np.zeros(sample.m) if s is None else s
    res = np.where(sample.mask, U @ r + s - sample.values, 0.0)
    G = np.outer(res, r)
    if hp.lambda2:
        G += hp.lambda2 * np.outer(L.laplacian @ (U @ r), r)
    return G


def gradient_check(
    U: np.ndarray,
    sample: StreamSample,
    L: GraphLaplacian,
    hp: Hyperparameters,
    robust: bool = True,
    h: float | None = None,
):
    """Compare the Danskin gradient of g(U) = min_{r,s} g(U, r, s) with
    central finite differences of the partially minimized loss.

    Returns ``(analytic, deviation)`` where deviation is
    max|analytic - fd| / max(|analytic|_max, |fd|_max) (0 when both vanish).
    """
    U = np.asarray(U, dtype=float)
    r, s = inner_minimizer(U, sample, L, hp, robust)
    analytic = loss_gradient(U, sample, r, s, L, hp)
    h = 1e-5 * (1.0 + np.linalg.norm(U)) if h is None else h
    fd = np.empty_like(U)
    for idx in np.ndindex(*U.shape):
        Up, Um = U.copy(), U.copy()
        Up[idx] += h
        Um[idx] -= h
        fd[idx] = (
            partial_min_loss(Up, sample, L, hp, robust) - partial_min_loss(Um, sample, L, hp, robust)
        ) / (2 * h)
    scale = max(np.abs(analytic).max(), np.abs(fd).max())
    dev = 0.0 if scale == 0 else float(np.abs(analytic - fd).max() / scale)
    return analytic, dev


def true_cost_gradient(history, U, L, hp, robust: bool = False) -> np.ndarray:
    """grad C_t(U) = 1/t (sum_tau grad g_tau(U) + lambda1 U)."""
    if history is None:
        raise UnsupportedModeError("gradient of the true cost needs retained history")
    G = hp.lambda1 * np.asarray(U, dtype=float)
    for h in history:
        r, s = inner_minimizer(U, h.sample, L, hp, robust)
        G = G + loss_gradient(U, h.sample, r, s, L, hp)
    return G / len(history)


def stationarity_residual(acc: AccumulatorSet, L: GraphLaplacian, hp: Hyperparameters, U: np.ndarray) -> float:
    """||lambda1 U + lambda2 L U R + sum Omega U r r^T - rhs||_F / (1 + ||rhs||_F)."""
    resid = apply_operator(subspace_operator(acc, L, hp), U) - acc.rhs
    return float(np.linalg.norm(resid) / (1.0 + np.linalg.norm(acc.rhs)))


def strong_convexity(acc: AccumulatorSet, L: GraphLaplacian, hp: Hyperparameters, t: int) -> float:
    """Smallest eigenvalue of the subspace operator scaled by 1/t (dense; small m r only)."""
    K = subspace_operator(acc, L, hp).dense()
    return float(np.linalg.eigvalsh(K)[0] / t)


def write_diagnostics_csv(path, rows) -> None:
    """Rows are dicts keyed by DIAGNOSTIC_COLUMNS; floats written with repr."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(DIAGNOSTIC_COLUMNS)
        for row in rows:
            w.writerow([_fmt(row.get(c, math.nan)) for c in DIAGNOSTIC_COLUMNS])


def _fmt(v):
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))
