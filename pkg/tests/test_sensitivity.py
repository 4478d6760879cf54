import itertools

import numpy as np
import pytest

from endiv import (
    BudgetError,
    ConfigError,
    analyze_sensitivity,
    weak_instrument_bound,
    kappa_exact_small,
    kappa_lower_bound,
    sparse_singular_bounds,
)


def kappa1_brute(Psi, s, u, n_dirs=200_000, seed=0):
    """Monte Carlo upper bound on kappa_1 by sampling cone directions."""
    rng = np.random.default_rng(seed)
    K, p = Psi.shape
    best = np.inf
    for J in itertools.combinations(range(p), s):
        mask = np.zeros(p, dtype=bool)
        mask[list(J)] = True
        th = rng.standard_normal((n_dirs // 10, p))
        # project into the cone by rescaling off-support mass
        on = np.abs(th[:, mask]).sum(axis=1)
        off = np.abs(th[:, ~mask]).sum(axis=1)
        scale = np.minimum(1.0, u * on / np.maximum(off, 1e-300))
        th[:, ~mask] *= scale[:, None]
        th /= np.abs(th).sum(axis=1, keepdims=True)
        best = min(best, float(np.abs(th @ Psi.T).max(axis=1).min()))
    return best


def test_identity_two_dim_value():
    # I_2, s=1, u=3, q=1: equalized coordinates give exactly 1/2
    assert kappa_exact_small(np.eye(2), 1, 3.0, 1) == pytest.approx(0.5, abs=1e-9)


def test_identity_larger_p():
    # p=8, s=1, u=3: mass floor 1/(1+u) on J dominates the spread-out rest
    val = kappa_exact_small(np.eye(8), 1, 3.0, 1)
    assert val == pytest.approx(0.25, abs=1e-8)


def test_homogeneity():
    rng = np.random.default_rng(1)
    Psi = rng.standard_normal((5, 5))
    k1 = kappa_exact_small(Psi, 1, 3.0, 1)
    k3 = kappa_exact_small(3.0 * Psi, 1, 3.0, 1)
    assert k3 == pytest.approx(3.0 * k1, rel=1e-9)


def test_exact_dominates_sampled_directions():
    rng = np.random.default_rng(2)
    Psi = rng.standard_normal((6, 6))
    exact = kappa_exact_small(Psi, 1, 3.0, 1)
    sampled = kappa1_brute(Psi, 1, 3.0)
    assert exact <= sampled + 1e-9


def test_kappa1_below_kappa2():
    rng = np.random.default_rng(3)
    for _ in range(3):
        Psi = rng.standard_normal((5, 5))
        k1 = kappa_exact_small(Psi, 1, 3.0, 1)
        k2 = kappa_exact_small(Psi, 1, 3.0, 2)
        assert k2 >= k1 - 1e-9


def test_cone_monotonicity_in_u_and_s():
    rng = np.random.default_rng(4)
    Psi = rng.standard_normal((6, 6))
    k_u2 = kappa_exact_small(Psi, 1, 2.0, 1)
    k_u4 = kappa_exact_small(Psi, 1, 4.0, 1)
    assert k_u4 <= k_u2 + 1e-12
    k_s1 = kappa_exact_small(Psi, 1, 3.0, 1)
    k_s2 = kappa_exact_small(Psi, 2, 3.0, 1)
    assert k_s2 <= k_s1 + 1e-12


def test_exact_budget_guard():
    with pytest.raises(BudgetError):
        kappa_exact_small(np.eye(13), 1, 3.0, 1)
    with pytest.raises(BudgetError):
        kappa_exact_small(np.eye(8), 4, 3.0, 1)


def test_sparse_singular_identity():
    smin, smax = sparse_singular_bounds(np.eye(6), 3)
    assert smin == pytest.approx(1.0)
    assert smax == pytest.approx(1.0)


def test_sparse_singular_diag_example():
    smin, smax = sparse_singular_bounds(np.diag([2.0, 1.0]), 1)
    assert smin == pytest.approx(1.0)
    assert smax == pytest.approx(2.0)


def test_sigma_max_nondecreasing_in_m():
    rng = np.random.default_rng(5)
    Psi = rng.standard_normal((6, 5))
    vals = [sparse_singular_bounds(Psi, m)[1] for m in (1, 2, 3, 4)]
    assert all(a <= b + 1e-12 for a, b in zip(vals, vals[1:]))


def test_sparse_singular_budget_guard():
    with pytest.raises(BudgetError):
        sparse_singular_bounds(np.zeros((40, 40)), 8)


def test_lower_bound_identity_positive_and_dominated():
    Psi = np.eye(8)
    lb = kappa_lower_bound(Psi, 1, 3.0, 1, m_grid=(1, 2, 4, 8, 16, 64))
    exact = kappa_exact_small(Psi, 1, 3.0, 1)
    assert 0 < lb <= exact + 1e-9


def test_lower_bound_zero_rank_degenerate():
    assert kappa_lower_bound(np.zeros((4, 4)), 1, 3.0, 1, (1, 2)) == 0.0


def test_lower_bound_homogeneity():
    rng = np.random.default_rng(6)
    Psi = np.eye(6) + 0.01 * rng.standard_normal((6, 6))
    grid = (1, 2, 4, 16, 64)
    b1 = kappa_lower_bound(Psi, 1, 3.0, 1, grid)
    b2 = kappa_lower_bound(2.0 * Psi, 1, 3.0, 1, grid)
    assert b2 == pytest.approx(2.0 * b1, rel=1e-12)


def test_lower_bound_requires_m_geq_s():
    with pytest.raises(ConfigError):
        kappa_lower_bound(np.eye(4), 2, 3.0, 1, (1, 2))


def test_weak_iv_constant():
    assert weak_instrument_bound(1.0, 1, 1) == pytest.approx(1.0 / 128.0)
    assert weak_instrument_bound(0.5, 1, 1) == pytest.approx(0.25 / 128.0)
    b1 = weak_instrument_bound(0.3, 1, 1)
    assert weak_instrument_bound(0.6, 1, 1) == pytest.approx(4 * b1)
    with pytest.raises(ConfigError):
        weak_instrument_bound(1.5, 1, 1)
    with pytest.raises(ConfigError):
        weak_instrument_bound(0.0, 1, 1)


def test_weak_iv_bound_below_sparse_singular_bound_on_identity():
    # identity has all sparse singular values equal to 1 = mu_n
    s, mu_n = 1, 1.0
    m_star = int(np.ceil(64 * s / mu_n ** 2))
    lb = kappa_lower_bound(np.eye(8), s, 3.0, 1, (m_star,))
    assert weak_instrument_bound(mu_n, s, 1) <= lb + 1e-12


@pytest.mark.parametrize("q", [1, 2])
def test_dominance_random_matrices(q):
    rng = np.random.default_rng(7)
    for _ in range(10):
        Psi = rng.standard_normal((7, 7))
        for s in (1, 2):
            exact = kappa_exact_small(Psi, s, 3.0, q)
            lb = kappa_lower_bound(Psi, s, 3.0, q, (s, 2 * s, 4 * s))
            assert lb <= exact + 1e-9


def test_random_design_echo():
    # i.i.d. z = x with identity cross-moment: the empirical sensitivity stays
    # bounded away from zero.  The population value for p = 10 is exactly
    # 1/4 (mass floor 1/(1+u) on the selected coordinate), and the minimum
    # over supports/orthants sits systematically a sampling-noise margin
    # below it, so the stability threshold is 0.15.
    hits = 0
    for seed in range(100):
        rng = np.random.default_rng(10_000 + seed)
        z = rng.standard_normal((2000, 10))
        Psi = z.T @ z / 2000.0
        if kappa_exact_small(Psi, 1, 3.0, 1) >= 0.15:
            hits += 1
    assert hits >= 95


def test_analyze_report_fields():
    rep = analyze_sensitivity(np.eye(5), 1, 3.0, 1, (2, 4))
    assert rep.exact_kappa is not None and rep.exact_label == "lp-certified"
    assert set(rep.sigma_min_m) == {2, 4}
    assert rep.lower_bound >= 0.0
    big = analyze_sensitivity(np.eye(13), 1, 3.0, 1, (2,))
    assert big.exact_kappa is None and big.notes
