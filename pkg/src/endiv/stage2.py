"""Pivotal estimation of the orthogonalized instrument weights.

For a target coordinate j the estimator finds sparse (mu, vartheta) making
the constructed residual v = x_j - z'mu - x_{-j}'vartheta nearly orthogonal
to every instrument and every other regressor, while z'mu itself is nearly
orthogonal to the other regressors:

    |E_n[v z_l]|      <= c tau t^z_l,    rms(v z_l)      <= t^z_l,   l in [K]
    |E_n[v x_l]|      <= c tau t^x_l,    rms(v x_l)      <= t^x_l,   l != j
    |E_n[x_l z'mu]|   <= c tau t^xz_l,   rms(x_l z'mu)   <= t^xz_l,  l != j

minimizing ||mu||_1 + ||vartheta||_1 (+ lambda_t ||t||_inf in the free-slack
form).  The last family is the orthogonality that protects the debiased
estimator from errors in the other coefficients; the final inference only
uses the direction of mu, so the l1 shrinkage of its scale cancels.

Slack modes mirror stage 1: "linked" (default) pins each slack to its rms
value and iterates frozen-weight l1 programs; "free" solves the literal
free-slack SOCP.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.stats import norm

from .data import Dataset, PenaltyConfig, ensure_valid
from .errors import ConfigError, SolverError
from .solver import (
    ConvexProgram,
    MomentPair,
    ResidualMap,
    solve,
    solve_l1_box,
)

__all__ = [
    "OrthogonalInstrumentFit",
    "OrthogonalityReport",
    "Stage2Workspace",
    "compute_H2n",
    "default_penalties_stage2",
    "fit_instrument",
    "orthogonality_residuals",
]

_REWEIGHT_MAX = 40
_REWEIGHT_RTOL = 1e-9


@dataclass(frozen=True)
class OrthogonalInstrumentFit:
    j: int                       # 1-based target coordinate
    mu_hat: np.ndarray           # (K,)
    theta_hat: np.ndarray        # (p-1,) coefficients on x_{-j}
    t_hat_z: np.ndarray
    t_hat_x: np.ndarray
    t_hat_xz: np.ndarray
    penalties: PenaltyConfig
    H2n: float
    objective: float
    slack_mode: str
    diagnostics: dict = field(default_factory=dict)


@dataclass(frozen=True)
class OrthogonalityReport:
    j: int
    omega_hat: float                 # E_n[x_j z'mu]
    max_orthogonality_moment: float  # max_{l != j} |E_n[x_l z'mu]|
    margins_z: np.ndarray            # |moment| - c tau t, per family
    margins_x: np.ndarray
    margins_xz: np.ndarray
    max_margin: float


class Stage2Workspace:
    """Per-dataset caches shared by the fits for different target indices."""

    def __init__(self, dataset: Dataset):
        ensure_valid(dataset)
        self.dataset = dataset
        n = dataset.n
        self.W = np.column_stack([dataset.Z, dataset.X])       # (n, K+p)
        self.G = self.W.T @ self.W / n                          # (K+p, K+p)
        self.Zsq = dataset.Z ** 2
        self.Xsq = dataset.X ** 2
        self._zx = self.Zsq.T @ self.Xsq / n
        self._zz = self.Zsq.T @ self.Zsq / n
        self.H2n = float(max(self._zx.max(), self._zz.max()))


def compute_H2n(dataset: Dataset) -> float:
    """Largest entry over the three weighted Gram families.

    The three quantities are max_k ||E_n[z_k^2 x x']||_inf,
    max_l ||E_n[x_l^2 z z']||_inf and max_k ||E_n[z_k^2 z z']||_inf.  Each
    matrix is PSD so its largest entry is diagonal, which collapses the first
    two families to the same matrix E_n[z_k^2 x_l^2] read in both directions.
    """
    return Stage2Workspace(dataset).H2n


def default_penalties_stage2(
    n: int,
    p: int,
    K: int,
    S_size: int,
    alpha: float,
    H2n: float,
    c: float | None = None,
    iid: bool = False,
) -> PenaltyConfig:
    """Stage-2 penalties: tau = 1.1 Phi^{-1}(1 - alpha/(2|S|(K+p)))/sqrt(n).

    The multiplier c covers non-identically distributed data; it defaults to
    1.1 and drops to 1 when the caller asserts the sample is i.i.d.
    """
    if n < 2 or p < 1 or K < p or S_size < 1:
        raise ConfigError(
            f"invalid dimensions: n={n}, p={p}, K={K}, S_size={S_size}"
        )
    if not (1.0 / n < alpha < 1.0):
        raise ConfigError(f"alpha must lie in (1/n, 1), got alpha={alpha} with n={n}")
    if not (H2n > 0):
        raise ConfigError(f"H2n must be positive, got {H2n}")
    if c is None:
        c = 1.0 if iid else 1.1
    tau = 1.1 * float(norm.ppf(1.0 - alpha / (2.0 * S_size * (K + p)))) / np.sqrt(n)
    return PenaltyConfig(lambda_t=1.0 / (2.0 * H2n), tau=tau, c=c, alpha=alpha)


def _moment_system(ws: Stage2Workspace, j0: int):
    """Rows of the stage-2 moment system |A w + boff| <= rhs for target j0.

    Row blocks: K instrument moments on v, p-1 regressor moments on v,
    p-1 orthogonality moments on z'mu.  w = (mu, vartheta).
    """
    ds = ws.dataset
    K, p = ds.K, ds.p
    others = np.array([l for l in range(p) if l != j0], dtype=int)
    wcols = np.concatenate([np.arange(K), K + others])
    G = ws.G
    xj_col = K + j0
    A_z = -G[np.ix_(np.arange(K), wcols)]
    b_z = G[:K, xj_col]
    if others.size:
        A_x = -G[np.ix_(K + others, wcols)]
        b_x = G[K + others, xj_col]
        A_xz = np.hstack([G[np.ix_(K + others, np.arange(K))],
                          np.zeros((others.size, others.size))])
        b_xz = np.zeros(others.size)
        A = np.vstack([A_z, A_x, A_xz])
        boff = np.concatenate([b_z, b_x, b_xz])
    else:
        A = A_z
        boff = b_z
    return A, boff, others, wcols


def _family_rms(ws: Stage2Workspace, j0: int, others: np.ndarray, w: np.ndarray):
    ds = ws.dataset
    n, K = ds.n, ds.K
    mu = w[:K]
    v = ds.X[:, j0] - ds.Z @ mu
    if others.size:
        v = v - ds.X[:, others] @ w[K:]
    zmu = ds.Z @ mu
    v2 = v * v
    t_z = np.sqrt(ws.Zsq.T @ v2 / n)
    if others.size:
        Xo_sq = ws.Xsq[:, others]
        t_x = np.sqrt(Xo_sq.T @ v2 / n)
        t_xz = np.sqrt(Xo_sq.T @ (zmu * zmu) / n)
    else:
        t_x = np.zeros(0)
        t_xz = np.zeros(0)
    return t_z, t_x, t_xz


def _fit_linked(ws: Stage2Workspace, j0: int, penalties: PenaltyConfig, tol_feas: float):
    ds = ws.dataset
    n, K = ds.n, ds.K
    A, boff, others, wcols = _moment_system(ws, j0)
    d = wcols.size
    # ridge pilot for the rms weights
    Gsub = ws.G[np.ix_(wcols, wcols)]
    ridge = 1e-3 * (np.trace(Gsub) / d + 1.0)
    w = np.linalg.solve(Gsub + ridge * np.eye(d), ws.G[wcols, K + j0])
    ct = penalties.c * penalties.tau
    warm: dict = {}
    n_lp = 0
    rhs_prev = None
    for it in range(_REWEIGHT_MAX):
        t_z, t_x, t_xz = _family_rms(ws, j0, others, w)
        rhs = ct * np.concatenate([t_z, t_x, t_xz])
        if rhs_prev is not None and np.abs(rhs - rhs_prev).max() <= _REWEIGHT_RTOL * (
            1.0 + rhs.max()
        ):
            break   # frozen weights stable: the LP solution cannot move
        rhs_prev = rhs
        w_new = None
        inflate = 1.0
        for _ in range(12):
            w_new, info = solve_l1_box(A, boff, rhs * inflate, warm=warm)
            n_lp += info.get("n_lp", 1)
            if w_new is not None:
                warm = {"rows": info.get("rows", []), "cols": info.get("cols", [])}
                break
            inflate *= 1.5
        if w_new is None:
            raise SolverError(f"stage-2 reweighted subproblem stayed infeasible (j={j0 + 1})")
        delta = np.abs(w_new - w).max()
        w = w_new
        if delta <= _REWEIGHT_RTOL * (1.0 + np.abs(w).max()):
            break
    t_z, t_x, t_xz = _family_rms(ws, j0, others, w)
    rhs_nat = ct * np.concatenate([t_z, t_x, t_xz])
    margin = float((np.abs(A @ w + boff) - rhs_nat).max())
    scale = float(np.sqrt((ds.X[:, j0] ** 2).mean())) + 1e-300
    diag = {
        "mode": "linked",
        "reweight_iters": it + 1,
        "n_lp": n_lp,
        "linked_margin": margin,
        "status": "optimal" if margin <= 100 * tol_feas * scale else "max_iter",
    }
    return w, others, (t_z, t_x, t_xz), diag


def _fit_free(ws: Stage2Workspace, j0: int, penalties: PenaltyConfig,
              tol_feas, tol_obj, max_iter):
    ds = ws.dataset
    n, K, p = ds.n, ds.K, ds.p
    others = np.array([l for l in range(p) if l != j0], dtype=int)
    d = K + others.size
    Wtil = np.column_stack([ds.Z, ds.X[:, others]]) if others.size else ds.Z
    map_v = ResidualMap(r0=ds.X[:, j0], R=Wtil, cols=np.arange(d))
    maps = [map_v]
    ct = penalties.c * penalties.tau
    pairs = [MomentPair(map_id=0, weight=ds.Z[:, l], tau=ct) for l in range(K)]
    if others.size:
        map_zmu = ResidualMap(r0=np.zeros(n), R=-ds.Z, cols=np.arange(K))
        maps.append(map_zmu)
        pairs += [MomentPair(map_id=0, weight=ds.X[:, l], tau=ct) for l in others]
        pairs += [MomentPair(map_id=1, weight=ds.X[:, l], tau=ct) for l in others]
    prog = ConvexProgram(d=d, lam=penalties.lambda_t, maps=tuple(maps), pairs=tuple(pairs))
    sol = solve(prog, tol_feas=tol_feas, tol_obj=tol_obj, max_iter=max_iter)
    if sol.status == "infeasible":
        raise SolverError("free-slack stage-2 program reported infeasible; this is a bug")
    return sol, others


def fit_instrument(
    dataset: Dataset,
    j: int,
    penalties: PenaltyConfig,
    slack_mode: str = "linked",
    tol_feas: float = 1e-7,
    tol_obj: float = 1e-6,
    max_iter: int = 50_000,
    workspace: Stage2Workspace | None = None,
) -> OrthogonalInstrumentFit:
    """Fit the orthogonalized instrument weights for 1-based coordinate j.

    With p = 1 the x blocks are empty and the program degenerates to the
    instrument-moment constraints alone.  Fits for distinct j are
    independent pure functions; a shared Stage2Workspace only caches
    dataset-level matrices.
    """
    ws = workspace if workspace is not None else Stage2Workspace(dataset)
    if ws.dataset is not dataset:
        ws = Stage2Workspace(dataset)
    if not (1 <= j <= dataset.p):
        raise ConfigError(f"target index j={j} outside 1..{dataset.p}")
    j0 = j - 1
    K = dataset.K

    if slack_mode == "linked":
        w, others, slacks, diag = _fit_linked(ws, j0, penalties, tol_feas)
        t_z, t_x, t_xz = slacks
        all_t = np.concatenate([t_z, t_x, t_xz]) if t_x.size or t_xz.size else t_z
        obj = float(np.abs(w).sum()) + penalties.lambda_t * float(all_t.max(initial=0.0))
        return OrthogonalInstrumentFit(
            j=j, mu_hat=w[:K], theta_hat=w[K:], t_hat_z=t_z, t_hat_x=t_x,
            t_hat_xz=t_xz, penalties=penalties, H2n=ws.H2n, objective=obj,
            slack_mode="linked", diagnostics=diag,
        )
    if slack_mode == "free":
        sol, others = _fit_free(ws, j0, penalties, tol_feas, tol_obj, max_iter)
        if sol.status == "max_iter" and sol.max_violation > 10 * tol_feas:
            raise SolverError(
                f"stage-2 solver did not converge for j={j}: "
                f"violation {sol.max_violation:.2e}"
            )
        warn = sol.status == "max_iter"
        n_z = K
        n_x = others.size
        t_all = sol.t_pairs
        return OrthogonalInstrumentFit(
            j=j, mu_hat=sol.w[:K], theta_hat=sol.w[K:],
            t_hat_z=t_all[:n_z], t_hat_x=t_all[n_z:n_z + n_x],
            t_hat_xz=t_all[n_z + n_x:],
            penalties=penalties, H2n=ws.H2n, objective=sol.objective,
            slack_mode="free",
            diagnostics={"mode": "free", "status": sol.status,
                         "iterations": sol.iterations,
                         "max_violation": sol.max_violation,
                         "loose_accept": warn},
        )
    raise ConfigError(f"unknown slack_mode {slack_mode!r}")


def orthogonality_residuals(dataset: Dataset, fit: OrthogonalInstrumentFit) -> OrthogonalityReport:
    """Recompute the orthogonality moments and constraint margins of a fit."""
    ensure_valid(dataset)
    n, K, p = dataset.n, dataset.K, dataset.p
    j0 = fit.j - 1
    if fit.mu_hat.shape != (K,) or fit.theta_hat.shape != (p - 1,):
        raise ConfigError("fit dimensions do not match dataset")
    others = np.array([l for l in range(p) if l != j0], dtype=int)
    zmu = dataset.Z @ fit.mu_hat
    v = dataset.X[:, j0] - zmu
    if others.size:
        v = v - dataset.X[:, others] @ fit.theta_hat
    omega = float((dataset.X[:, j0] * zmu).mean())
    ct = fit.penalties.c * fit.penalties.tau
    m_z = np.abs(dataset.Z.T @ v / n)
    margins_z = m_z - ct * fit.t_hat_z
    if others.size:
        Xo = dataset.X[:, others]
        m_x = np.abs(Xo.T @ v / n)
        m_xz = np.abs(Xo.T @ zmu / n)
        margins_x = m_x - ct * fit.t_hat_x
        margins_xz = m_xz - ct * fit.t_hat_xz
        max_orth = float(m_xz.max())
    else:
        margins_x = np.zeros(0)
        margins_xz = np.zeros(0)
        max_orth = 0.0
    allm = np.concatenate([margins_z, margins_x, margins_xz])
    return OrthogonalityReport(
        j=fit.j, omega_hat=omega, max_orthogonality_moment=max_orth,
        margins_z=margins_z, margins_x=margins_x, margins_xz=margins_xz,
        max_margin=float(allm.max()),
    )
