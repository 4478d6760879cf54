import numpy as np
import pytest
from scipy.stats import norm

from endiv import (
    ConfigError,
    Dataset,
    EstimationError,
    PenaltyConfig,
    WeakInstrumentError,
    debiased_coefficient,
    estimate_coefficient,
    multiplier_bootstrap,
    pointwise_interval,
    simultaneous_bands,
    variance_estimate,
)
from endiv.inference import DebiasedEstimate
from endiv.stage2 import OrthogonalInstrumentFit
from endiv.simulate import DgpParams, generate_dgp, population_instrument


def make_fit(j, mu, p, K, c=1.0, tau=0.1):
    mu = np.asarray(mu, dtype=float)
    return OrthogonalInstrumentFit(
        j=j, mu_hat=mu, theta_hat=np.zeros(p - 1),
        t_hat_z=np.zeros(K), t_hat_x=np.zeros(max(p - 1, 0)),
        t_hat_xz=np.zeros(max(p - 1, 0)),
        penalties=PenaltyConfig(lambda_t=1.0, tau=tau, c=c),
        H2n=1.0, objective=0.0, slack_mode="linked",
    )


def exact_dataset(rng, n=50):
    x = rng.standard_normal(n)
    X = x[:, None]
    Z = x[:, None]           # instrument equals the regressor
    y = 2.0 * x
    return Dataset(y=y, X=X, Z=Z)


def test_exact_identification(rng):
    ds = exact_dataset(rng)
    fit = make_fit(1, [1.0], p=1, K=1)
    est = debiased_coefficient(ds, 1, np.zeros(1), fit)
    assert est.omega_hat == pytest.approx(float((ds.X[:, 0] ** 2).mean()))
    assert est.beta_check == pytest.approx(2.0, abs=1e-12)


def test_zero_mu_raises_weak_instrument(rng):
    ds = exact_dataset(rng)
    fit = make_fit(1, [0.0], p=1, K=1)
    with pytest.raises(WeakInstrumentError):
        debiased_coefficient(ds, 1, np.zeros(1), fit)


def test_moment_residual_tiny(rng):
    # the closed form solves the orthogonalized moment equation exactly
    for seed in range(5):
        ds = generate_dgp(DgpParams(n=150, p=4, K=4, L=1, seed=seed))
        pop = population_instrument(4, 4, 1, 2)
        fit = make_fit(2, pop.mu0, p=4, K=4)
        beta_hat = ds.truth.beta0 * 0.9
        est = debiased_coefficient(ds, 2, beta_hat, fit)
        zmu = ds.Z @ pop.mu0
        fitted_minus = ds.X @ beta_hat - ds.X[:, 1] * beta_hat[1]
        resid_moment = ((ds.y - ds.X[:, 1] * est.beta_check - fitted_minus) * zmu).mean()
        scale = np.sqrt((ds.y ** 2).mean())
        assert abs(resid_moment) <= 1e-10 * abs(est.omega_hat) * scale


def test_variance_zero_when_residual_zero(rng):
    ds = exact_dataset(rng)
    fit = make_fit(1, [1.0], p=1, K=1)
    sigma = variance_estimate(ds, 1, np.array([2.0]), fit, omega_hat=1.0)
    assert sigma == pytest.approx(0.0, abs=1e-14)


def test_variance_scales_inversely_in_omega(rng):
    ds = generate_dgp(DgpParams(n=100, p=2, K=2, L=1, seed=0))
    fit = make_fit(1, [1.0, 0.0], p=2, K=2)
    beta = np.array([0.5, 0.1])
    s1 = variance_estimate(ds, 1, beta, fit, omega_hat=1.0)
    s2 = variance_estimate(ds, 1, beta, fit, omega_hat=2.0)
    assert s2 == pytest.approx(s1 / 2.0, rel=1e-12)


def test_variance_matches_direct_summation_oracle():
    # with truth injected, sigma_hat^2 equals the plain loop-computed formula
    ds = generate_dgp(DgpParams(n=120, p=4, K=4, L=1, seed=3))
    pop = population_instrument(4, 4, 1, 1)
    fit = make_fit(1, pop.mu0, p=4, K=4)
    beta0 = ds.truth.beta0
    omega = float((ds.X[:, 0] * (ds.Z @ pop.mu0)).mean())
    sigma = variance_estimate(ds, 1, beta0, fit, omega)
    acc = 0.0
    for i in range(ds.n):
        acc += ((ds.y[i] - ds.X[i] @ beta0) * (ds.Z[i] @ pop.mu0)) ** 2
    oracle = np.sqrt(acc / ds.n) / abs(omega)
    assert sigma == pytest.approx(oracle, rel=1e-12)


def _pipeline_pieces(seed=0, n=400, p=6, K=6, L=1, S=(1, 2)):
    ds = generate_dgp(DgpParams(n=n, p=p, K=K, L=L, seed=seed))
    beta_hat = ds.truth.beta0          # truth as plug-in keeps the test fast
    fits, ests = {}, {}
    for j in S:
        pop = population_instrument(p, K, L, j)
        fits[j] = make_fit(j, pop.mu0, p=p, K=K)
        ests[j] = estimate_coefficient(ds, j, beta_hat, fits[j])
    return ds, beta_hat, fits, ests


def test_bootstrap_singleton_critical_value_window():
    ds, beta_hat, fits, ests = _pipeline_pieces(S=(1,))
    c = multiplier_bootstrap(ds, (1,), beta_hat, fits, ests, B=4000, seed=7)
    assert 1.90 <= c <= 2.02   # scores are studentized: target 1.95996


def test_bootstrap_duplicated_coordinate_collapses(rng):
    # x_2 duplicates x_1 and both use the same constructed instrument, so the
    # two score columns coincide and the max over {1, 2} collapses
    n = 200
    Z = rng.standard_normal((n, 2))
    x = Z[:, 0] + 0.5 * rng.standard_normal(n)
    X = np.column_stack([x, x])
    y = 1.5 * x + 0.4 * rng.standard_normal(n)
    ds = Dataset(y=y, X=X, Z=Z)
    beta_hat = np.array([1.5, 0.0])
    fits = {1: make_fit(1, [1.0, 0.0], p=2, K=2),
            2: make_fit(2, [1.0, 0.0], p=2, K=2)}
    ests = {j: estimate_coefficient(ds, j, beta_hat, fits[j]) for j in (1, 2)}
    c1 = multiplier_bootstrap(ds, (1,), beta_hat, fits, ests, B=800, seed=3)
    c12 = multiplier_bootstrap(ds, (1, 2), beta_hat, fits, ests, B=800, seed=3)
    assert c12 == pytest.approx(c1, abs=1e-12)


def test_bootstrap_monotone_in_S_with_shared_draws():
    ds, beta_hat, fits, ests = _pipeline_pieces(S=(1, 2))
    c_small = multiplier_bootstrap(ds, (1,), beta_hat, fits, ests, B=600, seed=11)
    c_big = multiplier_bootstrap(ds, (1, 2), beta_hat, fits, ests, B=600, seed=11)
    assert c_small <= c_big


def test_bootstrap_monotone_in_alpha():
    ds, beta_hat, fits, ests = _pipeline_pieces(S=(1, 2))
    cs = [multiplier_bootstrap(ds, (1, 2), beta_hat, fits, ests, B=500, seed=5,
                               alpha=a) for a in (0.01, 0.05, 0.2)]
    assert cs[0] >= cs[1] >= cs[2]


def test_bootstrap_deterministic():
    ds, beta_hat, fits, ests = _pipeline_pieces()
    a = multiplier_bootstrap(ds, (1, 2), beta_hat, fits, ests, B=500, seed=42)
    b = multiplier_bootstrap(ds, (1, 2), beta_hat, fits, ests, B=500, seed=42)
    assert a == b


def test_bootstrap_rejects_degenerate_scores(rng):
    ds = exact_dataset(rng)
    fit = make_fit(1, [1.0], p=1, K=1)
    est = DebiasedEstimate(j=1, beta_check=2.0, omega_hat=1.0, sigma_hat=0.0)
    with pytest.raises(EstimationError, match="zero score"):
        multiplier_bootstrap(ds, (1,), np.array([2.0]), {1: fit}, {1: est},
                             B=200, seed=0)


def test_bootstrap_requires_minimum_draws():
    ds, beta_hat, fits, ests = _pipeline_pieces()
    with pytest.raises(ConfigError):
        multiplier_bootstrap(ds, (1,), beta_hat, fits, ests, B=50, seed=0)


def test_simultaneous_bands_geometry():
    est = {1: DebiasedEstimate(1, 0.5, 1.0, 0.2),
           3: DebiasedEstimate(3, -0.1, 1.0, 0.4)}
    band = simultaneous_bands(est, c_star=2.0, n=100, alpha=0.05, B=500, seed=1)
    assert band.S == (1, 3)
    lo, hi = band.interval(1)
    assert hi - lo == pytest.approx(2 * 2.0 * 0.2 / 10.0)
    assert (lo + hi) / 2 == pytest.approx(0.5)


def test_simultaneous_bands_degenerate_cases():
    est = {1: DebiasedEstimate(1, 0.5, 1.0, 0.0)}
    with pytest.warns(UserWarning, match="zero-width"):
        band = simultaneous_bands(est, c_star=1.0, n=100, alpha=0.05)
    lo, hi = band.interval(1)
    assert lo == hi == 0.5
    band0 = simultaneous_bands({1: DebiasedEstimate(1, 0.3, 1.0, 0.2)},
                               c_star=0.0, n=100, alpha=0.05)
    lo, hi = band0.interval(1)
    assert lo == hi == 0.3


def test_pointwise_interval_quantile():
    est = DebiasedEstimate(1, 1.0, 1.0, 0.5)
    lo, hi = pointwise_interval(est, n=400, alpha=0.05)
    half = norm.ppf(0.975) * 0.5 / 20.0
    assert hi - lo == pytest.approx(2 * half, rel=1e-12)
    widths = [np.subtract(*pointwise_interval(est, 400, a)[::-1])
              for a in (0.01, 0.05, 0.2)]
    assert widths[0] > widths[1] > widths[2]
