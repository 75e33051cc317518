"""Online matrix completion on graphs (non-robust tracker).

Each step takes one partially observed column x_t with mask Omega_t:

1. r_t = A_t^-1 U^T Omega_t x_t, with A_t = lambda1 I + U^T (Omega_t + lambda2 L) U
2. R_t += r_t r_t^T, P_t += Omega_t x_t r_t^T, M_i += Omega_t[i] r_t r_t^T
3. U_t solves lambda1 U + lambda2 L U R_t + sum_t Omega_t U r_t r_t^T = P_t

Memory is O(m r^2) regardless of stream length.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

from graphmc.errors import DimensionError
from graphmc.graph import GraphLaplacian
from graphmc.solvers import SolverConfig, SubspaceSystemOperator, solve_subspace


@dataclass(frozen=True)
class StreamSample:
    """One observed column. Unobserved entries are stored as 0 and never read."""

    values: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        mask = np.asarray(self.mask, dtype=bool).ravel()
        values = np.asarray(self.values, dtype=float).ravel()
        if mask.shape != values.shape:
            raise DimensionError(f"values {values.shape} and mask {mask.shape} differ")
        values = np.where(mask, values, 0.0)
        if not np.all(np.isfinite(values)):
            raise ValueError("observed values must be finite")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "mask", mask)

    @classmethod
    def full(cls, values) -> "StreamSample":
        values = np.asarray(values, dtype=float).ravel()
        return cls(values, np.ones(values.shape, dtype=bool))

    @property
    def m(self) -> int:
        return self.values.shape[0]


@dataclass(frozen=True)
class SubspaceState:
    U: np.ndarray
    t: int = 0


@dataclass(frozen=True)
class Hyperparameters:
    lambda1: float
    lambda2: float = 0.0
    lambda3: float = 0.0
    rank: int = 1
    forgetting: float = 1.0

    def __post_init__(self):
        if not self.lambda1 > 0:
            raise ValueError("lambda1 must be positive")
        if self.lambda2 < 0 or self.lambda3 < 0:
            raise ValueError("lambda2 and lambda3 must be non-negative")
        if self.rank < 1:
            raise ValueError("rank must be >= 1")
        if not 0 < self.forgetting <= 1:
            raise ValueError("forgetting factor must lie in (0, 1]")


@dataclass(frozen=True)
class AccumulatorSet:
    """Sufficient statistics of the stream for the subspace update.

    ``rhs`` is P_t (plain tracker) or Q_t (robust tracker, built from the
    cleaned values x_t - s_t).  The scalar fields carry the U-independent
    parts of the running surrogate cost so it can be evaluated without
    history: ``sq_norm`` = sum ||Omega (x - s)||^2, ``coef_sq`` =
    sum ||r||^2 and ``l1`` = sum ||s||_1.
    """

    R: np.ndarray
    rhs: np.ndarray
    per_row: np.ndarray
    sq_norm: float = 0.0
    coef_sq: float = 0.0
    l1: float = 0.0

    @classmethod
    def zeros(cls, m: int, r: int) -> "AccumulatorSet":
        return cls(np.zeros((r, r)), np.zeros((m, r)), np.zeros((m, r, r)))

    @property
    def shape(self):
        return self.rhs.shape


def init_state(m: int, rank: int, seed=0) -> SubspaceState:
    """Random U_0 with i.i.d. N(0, 1/m) entries from a seeded PCG64 stream."""
    rng = np.random.default_rng(seed)
    return SubspaceState(rng.standard_normal((m, rank)) / np.sqrt(m), 0)


def coefficient_matrix(U: np.ndarray, mask: np.ndarray, L: GraphLaplacian, hp: Hyperparameters):
    """A = lambda1 I + U^T (Omega + lambda2 L) U."""
    Uo = U[mask]
    A = hp.lambda1 * np.eye(U.shape[1]) + Uo.T @ Uo
    if hp.lambda2 != 0:
        A += hp.lambda2 * (U.T @ (L.laplacian @ U))
    return 0.5 * (A + A.T)


def _check_dims(U, sample, L):
    if U.shape[0] != sample.m or L.m != sample.m:
        raise DimensionError(
            f"U has {U.shape[0]} rows, sample has {sample.m}, Laplacian has {L.m}"
        )


def compute_coefficients(
    U_prev: np.ndarray,
    sample: StreamSample,
    L: GraphLaplacian,
    hp: Hyperparameters,
) -> np.ndarray:
    _check_dims(U_prev, sample, L)
    A = coefficient_matrix(U_prev, sample.mask, L, hp)
    b = U_prev.T @ sample.values
    return sla.cho_solve(sla.cho_factor(A), b)


def update_accumulators(
    acc: AccumulatorSet,
    sample: StreamSample,
    r_t: np.ndarray,
    clean_values: np.ndarray | None = None,
    s_t: np.ndarray | None = None,
    forgetting: float = 1.0,
) -> AccumulatorSet:
    """Fold one step into the accumulators.

    ``clean_values`` defaults to the sample values; the robust tracker
    passes x_t - s_t (and s_t itself for the l1 bookkeeping).
    """
    m, r = acc.shape
    r_t = np.asarray(r_t, dtype=float)
    if sample.m != m or r_t.shape != (r,):
        raise DimensionError(f"sample length {sample.m} / r_t {r_t.shape} vs accumulators {(m, r)}")
    clean = sample.values if clean_values is None else np.asarray(clean_values, dtype=float)
    clean = np.where(sample.mask, clean, 0.0)
    outer = np.outer(r_t, r_t)
    b = forgetting
    per_row = b * acc.per_row if b != 1.0 else acc.per_row.copy()
    per_row[sample.mask] += outer
    return AccumulatorSet(
        R=b * acc.R + outer,
        rhs=b * acc.rhs + np.outer(clean, r_t),
        per_row=per_row,
        sq_norm=b * acc.sq_norm + float(clean @ clean),
        coef_sq=b * acc.coef_sq + float(r_t @ r_t),
        l1=b * acc.l1 + (0.0 if s_t is None else float(np.abs(s_t).sum())),
    )


def subspace_operator(acc: AccumulatorSet, L: GraphLaplacian, hp: Hyperparameters):
    return SubspaceSystemOperator(acc.per_row, acc.R, L, hp.lambda1, hp.lambda2)


def update_subspace(
    acc: AccumulatorSet,
    L: GraphLaplacian,
    hp: Hyperparameters,
    cfg: SolverConfig | None = None,
    warm_start: np.ndarray | None = None,
) -> np.ndarray:
    return solve_subspace(subspace_operator(acc, L, hp), acc.rhs, cfg, x0=warm_start)


@dataclass(frozen=True)
class StepOutput:
    state: SubspaceState
    acc: AccumulatorSet
    r: np.ndarray
    prediction: np.ndarray


def step(
    state: SubspaceState,
    acc: AccumulatorSet,
    sample: StreamSample,
    L: GraphLaplacian,
    hp: Hyperparameters,
    cfg: SolverConfig | None = None,
    predict_after_update: bool = False,
) -> StepOutput:
    """One iteration: coefficients, accumulators, subspace.

    The prediction is U_{t-1} r_t (made before the subspace sees x_t) unless
    ``predict_after_update`` is set, in which case it is U_t r_t.
    """
    r_t = compute_coefficients(state.U, sample, L, hp)
    new_acc = update_accumulators(acc, sample, r_t, forgetting=hp.forgetting)
    U_new = update_subspace(new_acc, L, hp, cfg, warm_start=state.U)
    pred = (U_new if predict_after_update else state.U) @ r_t
    return StepOutput(SubspaceState(U_new, state.t + 1), new_acc, r_t, pred)


@dataclass
class StepRecord:
    """Retained per-step inputs and decisions (diagnostic mode only)."""

    sample: StreamSample
    r: np.ndarray
    s: np.ndarray | None = None


@dataclass
class OnlineTracker:
    """Stateful wrapper driving :func:`step` over a stream."""

    laplacian: GraphLaplacian
    hp: Hyperparameters
    cfg: SolverConfig = field(default_factory=SolverConfig)
    seed: int = 0
    retain_history: bool = False
    predict_after_update: bool = False

    def __post_init__(self):
        m = self.laplacian.m
        self.state = init_state(m, self.hp.rank, self.seed)
        self.acc = AccumulatorSet.zeros(m, self.hp.rank)
        self.history: list[StepRecord] = []

    @property
    def U(self) -> np.ndarray:
        return self.state.U

    def step(self, sample: StreamSample) -> StepOutput:
        out = step(
            self.state, self.acc, sample, self.laplacian, self.hp, self.cfg,
            predict_after_update=self.predict_after_update,
        )
        self.state, self.acc = out.state, out.acc
        if self.retain_history:
            self.history.append(StepRecord(sample, out.r))
        return out
