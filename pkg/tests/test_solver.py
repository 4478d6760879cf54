import numpy as np
import pytest

from endiv import (
    AbsConstraint,
    ConvexProgram,
    MomentPair,
    ResidualMap,
    residuals,
    solve,
)
from endiv.solver import solve_l1_box


def stage1_program(y, X, Z, lam, tau):
    p = X.shape[1]
    rmap = ResidualMap(r0=y, R=X, cols=np.arange(p))
    pairs = tuple(MomentPair(0, Z[:, l], tau) for l in range(Z.shape[1]))
    return ConvexProgram(d=p, lam=lam, maps=(rmap,), pairs=pairs)


def reduced_objective(y, X, Z, lam, tau, betas):
    """Independent evaluation of ||b||_1 + lam * max_l max(rms_l, |m_l|/tau)."""
    n = y.shape[0]
    resid = y[None, :] - betas @ X.T
    m = resid @ Z / n
    rms = np.sqrt((resid ** 2) @ (Z ** 2) / n)
    T = np.maximum(rms, np.abs(m) / tau).max(axis=1)
    return np.abs(betas).sum(axis=1) + lam * T


def grid_oracle(y, X, Z, lam, tau, width, rounds=14, points=7):
    """Shrinking lattice search; valid because the reduced objective is convex."""
    p = X.shape[1]
    best = np.zeros(p)
    best_val = np.inf
    for _ in range(rounds):
        axes = [np.linspace(b - width, b + width, points) for b in best]
        grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, p)
        vals = reduced_objective(y, X, Z, lam, tau, grid)
        k = int(np.argmin(vals))
        best, best_val = grid[k], float(vals[k])
        width *= 0.45
    return best_val, best


def random_instance(seed, n=40, p=3, K=4):
    rng = np.random.default_rng(seed)
    Z = rng.standard_normal((n, K))
    X = Z[:, :p] + 0.4 * rng.standard_normal((n, p))
    beta = np.zeros(p)
    beta[: max(1, p // 2)] = rng.standard_normal(max(1, p // 2))
    y = X @ beta + 0.4 * rng.standard_normal(n)
    return y, X, Z


def test_pinned_coordinate():
    # min ||w||_1 s.t. |w_1 - 1| <= 0
    prog = ConvexProgram(
        d=3, lam=0.5,
        abs_constraints=(AbsConstraint(a=np.array([1.0, 0, 0]), b=-1.0),),
    )
    sol = solve(prog)
    assert sol.status == "optimal"
    np.testing.assert_allclose(sol.w, [1.0, 0.0, 0.0], atol=1e-8)
    assert abs(sol.objective - 1.0) < 1e-7


def test_unconstrained_zero():
    sol = solve(ConvexProgram(d=4, lam=1.0))
    assert sol.status == "optimal"
    np.testing.assert_array_equal(sol.w, np.zeros(4))
    assert sol.objective == 0.0


def test_infeasible_detected():
    cons = (
        AbsConstraint(a=np.array([1.0]), b=-1.0),
        AbsConstraint(a=np.array([1.0]), b=1.0),
    )
    sol = solve(ConvexProgram(d=1, abs_constraints=cons))
    assert sol.status == "infeasible"


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_objective_matches_grid_oracle(seed):
    y, X, Z = random_instance(seed, n=50, p=3, K=4)
    lam, tau = 0.8, 0.3
    sol = solve(stage1_program(y, X, Z, lam, tau))
    assert sol.status == "optimal"
    oracle_val, _ = grid_oracle(y, X, Z, lam, tau, width=3.0)
    assert sol.objective <= oracle_val * (1 + 1e-4) + 1e-10
    assert oracle_val <= sol.objective * (1 + 1e-4) + 1e-10


def test_residuals_feasible_point_nonpositive():
    y, X, Z = random_instance(3)
    prog = stage1_program(y, X, Z, 1.0, 0.3)
    w = np.zeros(3)
    viol = residuals(prog, w)   # natural T: every entry <= 0
    assert viol.max() <= 1e-12


def test_residuals_manufactured_violation():
    # |w_1 + 0.5| <= 0 violated by exactly 0.5 at w = 0
    prog = ConvexProgram(
        d=2, abs_constraints=(AbsConstraint(a=np.array([1.0, 0.0]), b=0.5),),
    )
    viol = residuals(prog, np.zeros(2), T=0.0)
    np.testing.assert_allclose(viol, [0.5])


def test_solver_output_within_tol_feas():
    y, X, Z = random_instance(5)
    sol = solve(stage1_program(y, X, Z, 0.7, 0.25), tol_feas=1e-7)
    assert sol.max_violation <= 1e-7
    # reported violation equals recomputation
    again = residuals(stage1_program(y, X, Z, 0.7, 0.25), sol.w, sol.T)
    assert abs(sol.max_violation - again.max()) < 1e-12


def test_local_perturbation_optimality():
    y, X, Z = random_instance(7, n=60, p=4, K=5)
    lam, tau = 0.9, 0.3
    prog = stage1_program(y, X, Z, lam, tau)
    sol = solve(prog)
    base = reduced_objective(y, X, Z, lam, tau, sol.w[None, :])[0]
    for k in range(4):
        for eps in (1e-5, -1e-5):
            pert = sol.w.copy()
            pert[k] += eps
            val = reduced_objective(y, X, Z, lam, tau, pert[None, :])[0]
            assert val >= base - 1e-7


def test_determinism_bit_identical():
    y, X, Z = random_instance(11)
    prog = stage1_program(y, X, Z, 0.6, 0.3)
    s1 = solve(prog)
    s2 = solve(prog)
    assert np.array_equal(s1.w, s2.w)
    assert s1.T == s2.T and s1.objective == s2.objective


def test_scaling_equivariance():
    y, X, Z = random_instance(13)
    lam, tau, gamma = 0.8, 0.3, 5.0
    s1 = solve(stage1_program(y, X, Z, lam, tau))
    s2 = solve(stage1_program(gamma * y, gamma * X, Z, lam / gamma, tau))
    np.testing.assert_allclose(s2.w, s1.w, atol=1e-6, rtol=1e-6)
    np.testing.assert_allclose(s2.T, gamma * s1.T, rtol=1e-6)
    np.testing.assert_allclose(s2.t_pairs, gamma * s1.t_pairs, rtol=1e-5)


@pytest.mark.parametrize("seed", range(6))
def test_working_set_lp_matches_full(seed):
    rng = np.random.default_rng(seed)
    m, d = int(rng.integers(150, 400)), int(rng.integers(170, 320))
    A = rng.standard_normal((m, d))
    w0 = np.zeros(d)
    nz = rng.choice(d, 4, replace=False)
    w0[nz] = rng.standard_normal(4)
    boff = -(A @ w0) + 0.05 * rng.standard_normal(m)
    rhs = 0.1 + 0.2 * rng.random(m)
    w_ws, info = solve_l1_box(A, boff, rhs)
    w_full, info_full = solve_l1_box(A, boff, rhs, force_full=True)
    assert info["status"] == info_full["status"] == "optimal"
    assert (np.abs(A @ w_ws + boff) - rhs).max() <= 1e-8
    assert abs(np.abs(w_ws).sum() - np.abs(w_full).sum()) < 1e-7


def test_working_set_lp_infeasible():
    A = np.array([[1.0], [1.0]])
    boff = np.array([-1.0, 1.0])
    rhs = np.array([0.0, 0.0])
    w, info = solve_l1_box(A, boff, rhs)
    assert w is None and info["status"] == "infeasible"
