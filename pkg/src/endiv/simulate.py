"""Monte Carlo harness: data generating process, replications, aggregation.

The design draws independent instruments z ~ N(0, I_K), latent regressors
xtilde ~ N(0, Sigma) with Sigma_ab = 0.3^|a-b|, and noise zeta ~ N(0, 1/4^2);
each regressor loads on its own block of L instruments,

    x_j = xtilde_j + sum_{k=1}^{L} z_{L(j-1)+k},      K = L p,
    y   = x'beta0 + xi,   xi = zeta + xtilde'gamma0,

with beta0 = (1, .8, .6, .4, .2, 0, ...) and gamma0 = (.1, .2, ..., 1, 0, ...).
The latent xtilde enters both x and the error, so every regressor with a
nonzero gamma0 weight is endogenous, while z stays a valid instrument.

A replication runs the full pipeline (stage-1 coefficients with a
least-squares refit on the selected support, per-coordinate orthogonalized
instruments, debiasing, multiplier-bootstrap bands at level alpha) and
records simultaneous coverage of the coordinates in S, the largest absolute
estimation error max_{j in S} |beta_check_j - beta0_j| (the table's l_inf
column), the band width, and per-coordinate errors.  All randomness is
derived from counter-based streams keyed by (base_seed, replication), so
aggregation is reproducible bit for bit at any worker count.
"""

from __future__ import annotations

import os
import warnings
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset, GroundTruth
from .errors import ConfigError, EstimationError
from .inference import (
    estimate_coefficient,
    multiplier_bootstrap,
    simultaneous_bands,
)
from .stage1 import default_penalties_stage1, compute_H1n, fit_beta, refit_on_support
from .stage2 import Stage2Workspace, default_penalties_stage2, fit_instrument

__all__ = [
    "DgpParams",
    "EstimatorConfig",
    "ReplicationRecord",
    "MCSummary",
    "PopulationInstrument",
    "generate_dgp",
    "population_instrument",
    "run_replication",
    "monte_carlo",
    "oracle_clt_stats",
    "derive_seed",
]

BETA0_HEAD = (1.0, 0.8, 0.6, 0.4, 0.2)
GAMMA0_HEAD = tuple((k + 1) / 10.0 for k in range(10))


def derive_seed(base_seed: int, *key: int) -> int:
    """Stable 64-bit child seed for a (base, key...) pair."""
    ss = np.random.SeedSequence(base_seed, spawn_key=tuple(int(k) for k in key))
    return int(ss.generate_state(1, np.uint64)[0])


@dataclass(frozen=True)
class DgpParams:
    n: int
    p: int
    K: int
    L: int
    seed: int

    def __post_init__(self):
        if self.n < 2 or self.p < 1 or self.L < 1:
            raise ConfigError(f"invalid dimensions n={self.n}, p={self.p}, L={self.L}")
        if self.K != self.L * self.p:
            raise ConfigError(f"K = L*p required, got K={self.K}, L*p={self.L * self.p}")
        if self.seed < 0:
            raise ConfigError("seed must be nonnegative")


@dataclass(frozen=True)
class EstimatorConfig:
    alpha: float = 0.05
    B: int = 1000
    c_const: float | None = None     # None: 1.1, or 1.0 when iid=True
    iid: bool = False
    S: tuple[int, ...] = (1, 2, 3)
    refit: bool = True
    slack_mode: str = "linked"
    tol_feas: float = 1e-7
    tol_obj: float = 1e-6
    max_iter: int = 50_000

    def resolved_c(self) -> float:
        if self.c_const is not None:
            return self.c_const
        return 1.0 if self.iid else 1.1


@dataclass(frozen=True)
class ReplicationRecord:
    seed: int
    covered: bool
    max_width: float
    linf_err: float
    errors: tuple[float, ...]
    sigma_hats: tuple[float, ...]
    c_star: float
    beta_check: tuple[float, ...]


@dataclass(frozen=True)
class MCSummary:
    """Aggregate of R replications.

    ``rp05`` is the rejection probability of the simultaneous (1-alpha) band
    (fraction of replications where some true coefficient escapes the band);
    ``linf`` is the mean of max_{j in S} |beta_check_j - beta0_j|, matching
    the reported l_inf column; ``bias`` holds mean(beta_check_j - beta0_j).
    """

    n: int
    p: int
    K: int
    L: int
    R: int
    alpha: float
    S: tuple[int, ...]
    rp05: float
    rp05_se: float
    linf: float
    linf_se: float
    mean_max_width: float
    bias: tuple[float, ...]
    bias_se: tuple[float, ...]
    base_seed: int
    B: int
    n_failed: int = 0
    failed_seeds: tuple[int, ...] = field(default_factory=tuple)


def _patterns(p: int) -> tuple[np.ndarray, np.ndarray]:
    beta0 = np.zeros(p)
    head = min(p, len(BETA0_HEAD))
    beta0[:head] = BETA0_HEAD[:head]
    gamma0 = np.zeros(p)
    if p < len(GAMMA0_HEAD):
        warnings.warn(
            f"p={p} < 10: endogeneity loading gamma0 truncated to the first {p} entries"
        )
    ghead = min(p, len(GAMMA0_HEAD))
    gamma0[:ghead] = GAMMA0_HEAD[:ghead]
    return beta0, gamma0


def _ar_covariance(p: int) -> np.ndarray:
    idx = np.arange(p)
    return 0.3 ** np.abs(np.subtract.outer(idx, idx))


def generate_dgp(params: DgpParams, *, zeta_scale: float = 0.25,
                 endogenous: bool = True) -> Dataset:
    """Draw one dataset from the block-instrument design, truth attached.

    ``zeta_scale`` and ``endogenous`` exist for diagnostic variants (exact
    noise-free models); defaults reproduce the reference design.  The draw
    order (z, xtilde, zeta) is fixed and documented: changing it would
    silently change every seeded result.
    """
    n, p, K, L = params.n, params.p, params.K, params.L
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(params.seed)))
    Z = rng.standard_normal((n, K))
    chol = np.linalg.cholesky(_ar_covariance(p))
    xt = rng.standard_normal((n, p)) @ chol.T
    zeta = rng.standard_normal(n) * zeta_scale
    beta0, gamma0 = _patterns(p)
    if not endogenous:
        gamma0 = np.zeros(p)
    X = xt + Z.reshape(n, p, L).sum(axis=2)
    xi = zeta + xt @ gamma0
    y = X @ beta0 + xi
    return Dataset(y=y, X=X, Z=Z, truth=GroundTruth(beta0=beta0, xi=xi))


@dataclass(frozen=True)
class PopulationInstrument:
    j: int
    mu0: np.ndarray
    vartheta0: np.ndarray
    omega: float
    sigma: float


def population_instrument(p: int, K: int, L: int, j: int) -> PopulationInstrument:
    """Population orthogonalized instrument for 1-based coordinate j.

    Solves the population least-squares problem for v = x_j - z'mu - x_{-j}'vt
    under the exact orthogonality constraint E[x_{-j} z'mu] = 0, using the
    known design moments E[zz'] = I, E[zx'] = B (block loadings) and
    E[xx'] = Sigma + L I.  Also returns Omega_j = E[x_j z'mu] and the true
    standard deviation sigma_j of the debiased estimate's score.
    """
    if K != L * p:
        raise ConfigError(f"K = L*p required, got K={K}, L*p={L * p}")
    if not (1 <= j <= p):
        raise ConfigError(f"j={j} outside 1..{p}")
    j0 = j - 1
    B = np.zeros((K, p))
    for jj in range(p):
        B[L * jj:L * (jj + 1), jj] = 1.0
    Sigma = _ar_covariance(p)
    Exx = Sigma + L * np.eye(p)
    others = [l for l in range(p) if l != j0]
    Bm = B[:, others]
    d = K + p - 1
    Q = np.block([[np.eye(K), Bm], [Bm.T, Exx[np.ix_(others, others)]]])
    bvec = np.concatenate([B[:, j0], Exx[others, j0]])
    C = Bm.T
    kkt = np.zeros((d + p - 1, d + p - 1))
    kkt[:d, :d] = Q
    kkt[:d, d:] = np.vstack([C.T, np.zeros((p - 1, p - 1))])
    kkt[d:, :K] = C
    rhs = np.concatenate([bvec, np.zeros(p - 1)])
    sol = np.linalg.solve(kkt, rhs)
    mu0, vt0 = sol[:K], sol[K:d]
    _, gamma0 = _patterns(p)
    var_xi = 0.25 ** 2 + gamma0 @ Sigma @ gamma0
    omega = float(B[:, j0] @ mu0)
    sigma = float(np.sqrt(var_xi) * np.linalg.norm(mu0) / abs(omega))
    return PopulationInstrument(j=j, mu0=mu0, vartheta0=vt0, omega=omega, sigma=sigma)


def run_replication(params: DgpParams, config: EstimatorConfig | None = None,
                    dataset: Dataset | None = None) -> ReplicationRecord:
    """One full pipeline pass; estimation errors carry the seed for replay."""
    config = config or EstimatorConfig()
    S = tuple(int(j) for j in config.S)
    if not S:
        raise ConfigError("S must be nonempty")
    if max(S) > params.p or min(S) < 1:
        raise ConfigError(f"S={S} outside 1..{params.p}")
    ds = dataset if dataset is not None else generate_dgp(params)
    beta0 = ds.truth.beta0
    try:
        pen1 = default_penalties_stage1(params.n, params.p, config.alpha,
                                        compute_H1n(ds))
        fit1 = fit_beta(ds, pen1, slack_mode=config.slack_mode,
                        tol_feas=config.tol_feas, tol_obj=config.tol_obj,
                        max_iter=config.max_iter)
        beta_hat = refit_on_support(ds, fit1) if config.refit else fit1.beta_hat
        ws = Stage2Workspace(ds)
        pen2 = default_penalties_stage2(params.n, params.p, params.K, len(S),
                                        config.alpha, ws.H2n,
                                        c=config.resolved_c())
        fits = {}
        estimates = {}
        for j in S:
            fits[j] = fit_instrument(ds, j, pen2, slack_mode=config.slack_mode,
                                     tol_feas=config.tol_feas,
                                     tol_obj=config.tol_obj,
                                     max_iter=config.max_iter, workspace=ws)
            estimates[j] = estimate_coefficient(ds, j, beta_hat, fits[j])
        boot_seed = derive_seed(params.seed, 101)
        if all(estimates[j].sigma_hat == 0.0 for j in S):
            c_star = 0.0   # exact fit: degenerate zero-width band
        else:
            c_star = multiplier_bootstrap(ds, S, beta_hat, fits, estimates,
                                          B=config.B, seed=boot_seed,
                                          alpha=config.alpha)
        band = simultaneous_bands(estimates, c_star, params.n, config.alpha,
                                  B=config.B, seed=boot_seed)
    except EstimationError as e:
        raise EstimationError(f"replication seed={params.seed}: {e}") from e
    errors = tuple(float(estimates[j].beta_check - beta0[j - 1]) for j in S)
    widths = [hi - lo for (_, lo, hi) in band.intervals]
    covered = all(
        lo <= beta0[j - 1] <= hi for (j, lo, hi) in band.intervals
    )
    return ReplicationRecord(
        seed=params.seed,
        covered=bool(covered),
        max_width=float(max(widths)),
        linf_err=float(max(abs(e) for e in errors)),
        errors=errors,
        sigma_hats=tuple(float(estimates[j].sigma_hat) for j in S),
        c_star=float(c_star),
        beta_check=tuple(float(estimates[j].beta_check) for j in S),
    )


def _replicate_seeded(args):
    base, r, n, p, K, L, config = args
    params = DgpParams(n=n, p=p, K=K, L=L, seed=derive_seed(base, r))
    try:
        return r, run_replication(params, config), None
    except EstimationError as e:
        return r, None, str(e)


def monte_carlo(
    params: DgpParams,
    R: int,
    base_seed: int | None = None,
    config: EstimatorConfig | None = None,
    n_jobs: int = 1,
) -> MCSummary:
    """Aggregate R independent replications.

    Replication r uses the seed derived from (base_seed, r); results are
    gathered by index, so any worker count gives identical output.  If more
    than 5% of replications fail the whole run aborts with diagnostics.
    """
    if R < 1:
        raise ConfigError(f"R >= 1 required, got {R}")
    config = config or EstimatorConfig()
    base = params.seed if base_seed is None else int(base_seed)
    jobs = [(base, r, params.n, params.p, params.K, params.L, config)
            for r in range(R)]
    results: dict[int, ReplicationRecord] = {}
    failures: dict[int, str] = {}
    if n_jobs > 1:
        import multiprocessing as mp

        with mp.get_context("spawn").Pool(n_jobs, initializer=_limit_worker_threads) as pool:
            for r, rec, err in pool.imap_unordered(_replicate_seeded, jobs, chunksize=1):
                if rec is None:
                    failures[r] = err
                else:
                    results[r] = rec
    else:
        for job in jobs:
            r, rec, err = _replicate_seeded(job)
            if rec is None:
                failures[r] = err
            else:
                results[r] = rec
    if len(failures) > 0.05 * R:
        sample = "; ".join(list(failures.values())[:5])
        raise EstimationError(
            f"{len(failures)}/{R} replications failed, aborting: {sample}"
        )
    recs = [results[r] for r in sorted(results)]
    Reff = len(recs)
    S = tuple(config.S)
    cov = np.array([rec.covered for rec in recs], dtype=float)
    linf = np.array([rec.linf_err for rec in recs])
    widths = np.array([rec.max_width for rec in recs])
    errs = np.array([rec.errors for rec in recs])
    rp = 1.0 - cov.mean()
    return MCSummary(
        n=params.n, p=params.p, K=params.K, L=params.L, R=Reff,
        alpha=config.alpha, S=S,
        rp05=float(rp),
        rp05_se=float(np.sqrt(max(rp * (1 - rp), 1e-12) / Reff)),
        linf=float(linf.mean()),
        linf_se=float(linf.std(ddof=1) / np.sqrt(Reff)) if Reff > 1 else 0.0,
        mean_max_width=float(widths.mean()),
        bias=tuple(float(b) for b in errs.mean(axis=0)),
        bias_se=tuple(
            float(sd) for sd in (errs.std(axis=0, ddof=1) / np.sqrt(Reff)
                                 if Reff > 1 else np.zeros(len(S)))
        ),
        base_seed=base, B=config.B,
        n_failed=len(failures),
        failed_seeds=tuple(derive_seed(base, r) for r in sorted(failures)),
    )


def _limit_worker_threads():
    os.environ.setdefault("OMP_NUM_THREADS", "1")
    try:
        from threadpoolctl import threadpool_limits

        threadpool_limits(limits=1)
    except Exception:
        pass


def oracle_clt_stats(n: int, p: int, K: int, L: int, R: int, base_seed: int,
                     S=(1, 2, 3)) -> np.ndarray:
    """Standardized debiased statistics with true nuisances injected.

    For each replication, beta_check_j is computed with beta0_{-j} and the
    population instrument mu0_j in place of their estimates, standardized by
    the true sigma_j.  Returns an (R, |S|) array whose columns should be
    asymptotically standard normal.
    """
    S = tuple(int(j) for j in S)
    pops = {j: population_instrument(p, K, L, j) for j in S}
    out = np.zeros((R, len(S)))
    for r in range(R):
        params = DgpParams(n=n, p=p, K=K, L=L, seed=derive_seed(base_seed, r))
        ds = generate_dgp(params)
        beta0 = ds.truth.beta0
        for c, j in enumerate(S):
            pop = pops[j]
            zmu = ds.Z @ pop.mu0
            omega_hat = float((ds.X[:, j - 1] * zmu).mean())
            fitted_minus_j = ds.X @ beta0 - ds.X[:, j - 1] * beta0[j - 1]
            bcheck = float(((ds.y - fitted_minus_j) * zmu).mean()) / omega_hat
            out[r, c] = np.sqrt(n) * (bcheck - beta0[j - 1]) / pop.sigma
    return out
