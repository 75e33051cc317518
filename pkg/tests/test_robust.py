import numpy as np
import pytest

from graphmc import (
    ConvergenceError,
    Hyperparameters,
    OnlineTracker,
    RobustTracker,
    StreamSample,
    WeightedGraph,
    build_laplacian,
    compute_coefficients,
)
from graphmc.robust import (
    LassoProblem,
    RobustStepResult,
    assemble_lasso,
    compute_robust_coefficients,
    estimate_outliers,
    kkt_violation,
    lasso_condition,
    robust_step,
    solve_lasso,
)
from graphmc.tracker import AccumulatorSet, init_state

from conftest import random_laplacian
from oracles import fd_hessian, half_quadratic_in_s, lasso_prox_grad, planted_stream


def _instance(rng, m=8, r=2, lambda2=1.0, lambda3=0.5, miss=0.25):
    L = random_laplacian(rng, m)
    U = rng.standard_normal((m, r))
    mask = rng.random(m) >= miss
    mask[0] = True
    x = rng.standard_normal(m)
    x[np.flatnonzero(mask)[:2]] += np.array([6.0, -5.0])
    hp = Hyperparameters(0.4, lambda2, lambda3, rank=r)
    return L, U, StreamSample(x, mask), hp


def test_design_block_shapes(rng):
    L, U, sample, hp = _instance(rng)
    prob = assemble_lasso(U, sample, L, hp)
    assert prob.design.shape == (8 + 2 + 8, 8)
    assert prob.B.shape == (2, 8)


def test_design_third_block_vanishes_without_graph(rng):
    L, U, sample, hp = _instance(rng, lambda2=0.0)
    prob = assemble_lasso(U, sample, L, hp)
    np.testing.assert_array_equal(prob.design[10:], 0.0)


def test_design_with_zero_subspace_is_observed_identity(rng):
    L, _, sample, hp = _instance(rng)
    prob = assemble_lasso(np.zeros((8, 2)), sample, L, hp)
    np.testing.assert_array_equal(prob.design[:8], np.diag(sample.mask.astype(float)))
    np.testing.assert_array_equal(prob.design[8:], 0.0)


def test_unobserved_columns_of_design_are_zero(rng):
    L, U, sample, hp = _instance(rng)
    C = assemble_lasso(U, sample, L, hp).design
    np.testing.assert_array_equal(C[:, ~sample.mask], 0.0)


def test_gram_equals_fd_hessian_of_eliminated_objective(rng):
    L, U, sample, hp = _instance(rng, m=6)
    prob = assemble_lasso(U, sample, L, hp)
    f = lambda s: half_quadratic_in_s(U, sample.values, sample.mask, s, hp.lambda1, hp.lambda2, L.laplacian)
    H = fd_hessian(f, np.zeros(6))
    np.testing.assert_allclose(prob.gram, H, atol=1e-10 * (1 + np.abs(H).max()))
    # the eliminated objective itself is half the lasso quadratic
    s = rng.standard_normal(6)
    res = prob.design @ (sample.values - s)
    assert f(s) == pytest.approx(0.5 * res @ res, rel=1e-10)


def test_large_penalty_gives_zero(rng):
    L, U, sample, hp = _instance(rng)
    prob = assemble_lasso(U, sample, L, hp)
    bound = 2 * np.abs(prob.gram @ sample.values).max()
    big = LassoProblem(prob.design, prob.target, bound * (1 + 1e-12))
    np.testing.assert_array_equal(solve_lasso(big), np.zeros(8))


def test_identity_design_soft_thresholds():
    prob = LassoProblem(np.eye(2), np.array([3.0, -0.1]), 2.0)
    np.testing.assert_allclose(solve_lasso(prob), [2.0, 0.0], atol=1e-14)


def test_zero_penalty_recovers_target_on_observed():
    C = np.vstack([np.eye(3), np.zeros((2, 3))])
    prob = LassoProblem(C, np.array([1.0, -2.0, 0.5]), 0.0)
    np.testing.assert_allclose(solve_lasso(prob), [1.0, -2.0, 0.5])


def test_matches_proximal_gradient_oracle_and_kkt(rng):
    L, U, sample, hp = _instance(rng, m=8, r=2, lambda3=0.5)
    prob = assemble_lasso(U, sample, L, hp)
    s = solve_lasso(prob)
    ref = lasso_prox_grad(prob.design, prob.target, 0.5)
    np.testing.assert_allclose(s, ref, atol=1e-8 * (1 + np.abs(ref).max()))
    assert kkt_violation(prob.gram @ (prob.target - s), s, 0.5) <= 1e-8
    assert np.count_nonzero(s) > 0
    np.testing.assert_array_equal(s[~sample.mask], 0.0)


@pytest.mark.parametrize("seed", range(5))
def test_random_instances_pass_kkt(seed):
    rng = np.random.default_rng(seed)
    L, U, sample, hp = _instance(rng, m=12, r=3, lambda3=rng.uniform(0.1, 2.0))
    prob = assemble_lasso(U, sample, L, hp)
    s = solve_lasso(prob)
    assert kkt_violation(prob.gram @ (prob.target - s), s, hp.lambda3) <= 1e-8
    assert lasso_condition(prob, sample.mask) > 0


def test_coordinate_descent_never_increases_objective(rng):
    L, U, sample, hp = _instance(rng, m=10, r=2, lambda3=0.3)
    prob = assemble_lasso(U, sample, L, hp)
    # one sweep at a time, each from the previous iterate
    s = np.zeros(10)
    prev = prob.objective(s)
    for _ in range(20):
        one = LassoProblem(prob.design, prob.target, prob.penalty, 1e-300, 1)
        try:
            s_next = solve_lasso(one, s0=s)
        except ConvergenceError as exc:
            assert exc.iterations == 1
            s_next = _one_sweep(prob, s)
        cur = prob.objective(s_next)
        assert cur <= prev + 1e-12 * (1 + abs(prev))
        prev, s = cur, s_next


def _one_sweep(prob, s):
    G = prob.gram
    s = s.copy()
    g = G @ (prob.target - s)
    for j in range(s.size):
        if G[j, j] <= 0:
            continue
        rho = g[j] + G[j, j] * s[j]
        new = np.sign(rho) * max(abs(rho) - prob.penalty / 2, 0.0) / G[j, j]
        g -= G[:, j] * (new - s[j])
        s[j] = new
    return s


def test_convergence_error_reports_violation(rng):
    L, U, sample, hp = _instance(rng, m=10, r=2, lambda3=0.3)
    prob = assemble_lasso(U, sample, L, hp, tolerance=1e-15, max_iters=1)
    with pytest.raises(ConvergenceError) as info:
        solve_lasso(prob)
    assert info.value.achieved > 1e-15


def test_kkt_violation_on_known_points():
    grad = np.array([1.0, 0.2])
    assert kkt_violation(grad, np.array([1.0, 0.0]), 2.0) == 0.0
    assert kkt_violation(grad, np.array([0.0, 0.0]), 1.0) == pytest.approx(1.0)


def test_robust_coefficients_reduce_to_plain(rng):
    L, U, sample, hp = _instance(rng)
    np.testing.assert_array_equal(
        compute_robust_coefficients(U, sample, L, hp, np.zeros(8)), compute_coefficients(U, sample, L, hp)
    )
    np.testing.assert_allclose(compute_robust_coefficients(U, sample, L, hp, sample.values), 0.0, atol=1e-15)


def test_robust_coefficients_are_stationary(rng):
    L, U, sample, hp = _instance(rng)
    s = solve_lasso(assemble_lasso(U, sample, L, hp))
    r = compute_robust_coefficients(U, sample, L, hp, s)
    om = sample.mask.astype(float)
    grad = -U.T @ (om * (sample.values - s - U @ r)) + hp.lambda1 * r + hp.lambda2 * U.T @ L.laplacian @ U @ r
    assert np.linalg.norm(grad) <= 1e-10
    # r is the affine map B (x - s)
    B = assemble_lasso(U, sample, L, hp).B
    np.testing.assert_allclose(r, B @ (sample.values - s), atol=1e-12)


def test_zero_penalty_disables_outliers(rng):
    L, U, sample, hp = _instance(rng, lambda3=0.0)
    np.testing.assert_array_equal(estimate_outliers(U, sample, L, hp), np.zeros(8))


def test_zero_penalty_run_equals_online_run(rng):
    m, r, n = 10, 2, 50
    L = random_laplacian(rng, m)
    X = planted_stream(rng, m, r, n, noise=0.1)
    masks = rng.random((m, n)) > 0.2
    hp = Hyperparameters(1.0, 1.0, 0.0, rank=r)
    a, b = OnlineTracker(L, hp, seed=2), RobustTracker(L, hp, seed=2)
    for t in range(n):
        s = StreamSample(X[:, t], masks[:, t])
        oa, ob = a.step(s), b.step(s)
        np.testing.assert_allclose(ob.prediction, oa.prediction, rtol=1e-8, atol=1e-10)
    np.testing.assert_allclose(b.U, a.U, rtol=1e-8, atol=1e-10)


def test_huge_penalty_on_clean_stream_matches_online(rng):
    m, r, n = 10, 2, 40
    L = random_laplacian(rng, m)
    X = planted_stream(rng, m, r, n, noise=0.1)
    a = OnlineTracker(L, Hyperparameters(1.0, 1.0, 0.0, rank=r), seed=2)
    b = RobustTracker(L, Hyperparameters(1.0, 1.0, 1e8, rank=r), seed=2)
    for t in range(n):
        s = StreamSample.full(X[:, t])
        oa, ob = a.step(s), b.step(s)
        assert ob.result.support.size == 0
        np.testing.assert_allclose(ob.prediction, oa.prediction, rtol=1e-8, atol=1e-10)


def test_step_decomposes_into_sub_operations(rng):
    L, U, sample, hp = _instance(rng)
    state = init_state(8, 2, seed=5)
    acc = AccumulatorSet.zeros(8, 2)
    out = robust_step(state, acc, sample, L, hp)
    s = estimate_outliers(state.U, sample, L, hp)
    r = compute_robust_coefficients(state.U, sample, L, hp, s)
    np.testing.assert_array_equal(out.result.s_t, s)
    np.testing.assert_array_equal(out.r, r)
    np.testing.assert_allclose(out.acc.rhs, np.outer(np.where(sample.mask, sample.values - s, 0), r))
    np.testing.assert_allclose(out.prediction, state.U @ r)


def test_sparse_storage_and_dense_fallback():
    sparse = RobustStepResult.build(np.array([0.0, 3.0, 0.0, 0.0, 0.0]), np.zeros(1), np.zeros(5))
    assert sparse.s_dense is None
    np.testing.assert_array_equal(sparse.s_t, [0, 3, 0, 0, 0])
    np.testing.assert_array_equal(sparse.support, [1])
    dense = RobustStepResult.build(np.array([1.0, 3.0, 0.0, 0.0]), np.zeros(1), np.zeros(4))
    assert dense.s_dense is not None
    np.testing.assert_array_equal(dense.s_t, [1, 3, 0, 0])


def _outlier_stream(seed, m=20, r=3, n=400, density=0.01, factor=10.0):
    rng = np.random.default_rng(seed)
    X = planted_stream(rng, m, r, n, noise=0.05)
    S = np.zeros_like(X)
    k = round(density * m * n)
    idx = rng.choice(m * n, size=k, replace=False)
    S.flat[idx] = rng.choice([-1.0, 1.0], size=k) * factor * np.abs(X).max()
    return X, S


@pytest.mark.slow
def test_robust_beats_online_and_finds_support():
    m, r, n = 20, 3, 400
    X, S = _outlier_stream(7, m, r, n)
    L = build_laplacian(WeightedGraph.empty(m))
    online = OnlineTracker(L, Hyperparameters(1.0, 0.0, 0.0, rank=r), seed=1)
    robust = RobustTracker(L, Hyperparameters(1.0, 0.0, 2.0, rank=r), seed=1)
    err_o, err_r, hits = [], [], []
    for t in range(n):
        s = StreamSample.full(X[:, t] + S[:, t])
        po, pr = online.step(s).prediction, robust.step(s)
        err_o.append(np.sum((po - X[:, t]) ** 2))
        err_r.append(np.sum((pr.prediction - X[:, t]) ** 2))
        if t >= 50:
            hits.append(np.array_equal(pr.result.support, np.flatnonzero(S[:, t])))
    tail = slice(n - 50, n)
    assert np.mean(err_r[tail]) < np.mean(err_o[tail])
    assert np.mean(hits) >= 0.9
