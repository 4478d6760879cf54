"""Pivotal self-normalized estimation of the full coefficient vector.

The estimator minimizes ||beta||_1 subject to the paired self-normalized
moment constraints

    |E_n[(y - x'beta) z_l]| <= tau * t_l,
    {E_n[(y - x'beta)^2 z_l^2]}^(1/2) <= t_l,      l = 1..K,

with the pivotal threshold tau = Phi^{-1}(1 - alpha/(2p)) / sqrt(n) and the
slack-norm weight lambda_t = 1 / (2 H1n), where H1n is the largest entry of
the matrices E_n[z_l^2 x x'].

Two slack modes are supported.  ``slack_mode="free"`` solves the convex
free-slack program ||beta||_1 + lambda_t ||t||_inf literally; at realistic
sample sizes its t-penalty is so much weaker than the l1 term that the
minimizer collapses to beta = 0, so it is kept for program-level testing.
``slack_mode="linked"`` (the default, used by the full pipeline) pins each
slack to its natural value t_l = rms_l(beta), giving the self-normalized
constraint |m_l(beta)| <= tau * rms_l(beta) whose feasibility event for the
true coefficient is exactly the one the penalty level is calibrated to.
The linked program is solved by freezing the rms weights at the current
iterate and re-solving the resulting l1 program until the weights settle,
which is deterministic and scales to thousands of constraints.
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
    "Stage1Fit",
    "FeasibilityReport",
    "compute_H1n",
    "default_penalties_stage1",
    "fit_beta",
    "refit_on_support",
    "check_feasibility",
]

_REWEIGHT_MAX = 40
_REWEIGHT_RTOL = 1e-9


@dataclass(frozen=True)
class Stage1Fit:
    beta_hat: np.ndarray
    t_hat: np.ndarray
    penalties: PenaltyConfig
    H1n: float
    objective: float
    slack_mode: str
    diagnostics: dict = field(default_factory=dict)


@dataclass(frozen=True)
class FeasibilityReport:
    """Self-normalized feasibility of a candidate coefficient vector.

    ``t_natural`` holds the rms slacks t_l(beta); ``margins`` holds
    |m_l(beta)| - tau * t_l(beta), so feasibility means max margin <= 0.
    """

    feasible: bool
    t_natural: np.ndarray
    margins: np.ndarray
    max_margin: float


def compute_H1n(dataset: Dataset) -> float:
    """Largest entry of the matrices (1/n) sum_i z_il^2 x_i x_i' over l.

    Each of these matrices is a weighted Gram matrix, hence positive
    semidefinite, so its largest absolute entry sits on the diagonal:
    |E_n[z^2 x_a x_b]| <= max(E_n[z^2 x_a^2], E_n[z^2 x_b^2]).  The max over
    all entries therefore equals the max of E_n[z_l^2 x_a^2], one matrix
    product away.
    """
    ensure_valid(dataset)
    n = dataset.n
    D = (dataset.Z ** 2).T @ (dataset.X ** 2) / n
    return float(D.max())


def default_penalties_stage1(n: int, p: int, alpha: float, H1n: float) -> PenaltyConfig:
    """Pivotal penalty levels: lambda_t = 1/(2 H1n), tau = Phi^{-1}(1 - alpha/(2p))/sqrt(n)."""
    if n < 2 or p < 1:
        raise ConfigError(f"need n >= 2 and p >= 1, got n={n}, p={p}")
    if not (1.0 / n < alpha < 1.0):
        raise ConfigError(f"alpha must lie in (1/n, 1), got alpha={alpha} with n={n}")
    if not (H1n > 0):
        raise ConfigError(f"H1n must be positive, got {H1n}")
    tau = float(norm.ppf(1.0 - alpha / (2.0 * p))) / np.sqrt(n)
    return PenaltyConfig(lambda_t=1.0 / (2.0 * H1n), tau=tau, c=1.0, alpha=alpha)


def _moment_arrays(dataset: Dataset):
    n = dataset.n
    P = dataset.Z.T @ dataset.X / n      # (K, p): m(beta) = q - P beta
    q = dataset.Z.T @ dataset.y / n
    return P, q


def _rms_slacks(dataset: Dataset, beta: np.ndarray) -> np.ndarray:
    resid = dataset.y - dataset.X @ beta
    return np.sqrt((dataset.Z ** 2).T @ (resid ** 2) / dataset.n)


def _fit_linked(dataset: Dataset, penalties: PenaltyConfig, tol_feas: float):
    P, q = _moment_arrays(dataset)
    K, p = P.shape
    # pilot: plain least squares on the moment equations
    beta = np.linalg.lstsq(P, q, rcond=None)[0]
    warm: dict = {}
    n_lp = 0
    w_prev = None
    for it in range(_REWEIGHT_MAX):
        w = _rms_slacks(dataset, beta)
        if w_prev is not None and np.abs(w - w_prev).max() <= _REWEIGHT_RTOL * (
            1.0 + w.max()
        ):
            break   # frozen weights stable: the LP solution cannot move
        w_prev = w
        rhs = penalties.tau * w
        beta_new = None
        inflate = 1.0
        for _ in range(12):
            beta_new, info = solve_l1_box(-P, q, rhs * inflate, warm=warm)
            n_lp += info.get("n_lp", 1)
            if beta_new is not None:
                warm = {"rows": info.get("rows", []), "cols": info.get("cols", [])}
                break
            inflate *= 1.5
        if beta_new is None:
            raise SolverError("stage-1 reweighted subproblem stayed infeasible")
        delta = np.abs(beta_new - beta).max()
        beta = beta_new
        if delta <= _REWEIGHT_RTOL * (1.0 + np.abs(beta).max()):
            break
    t_nat = _rms_slacks(dataset, beta)
    margin = float((np.abs(q - P @ beta) - penalties.tau * t_nat).max())
    diag = {
        "mode": "linked",
        "reweight_iters": it + 1,
        "n_lp": n_lp,
        "linked_margin": margin,
        "status": "optimal",
    }
    scale = float(np.sqrt((dataset.y ** 2).mean())) + 1e-300
    if margin > 100 * tol_feas * scale:
        diag["status"] = "max_iter"
    return beta, t_nat, diag


def _fit_free(dataset: Dataset, penalties: PenaltyConfig, tol_feas, tol_obj, max_iter):
    n, p = dataset.n, dataset.p
    cols = np.arange(p)
    rmap = ResidualMap(r0=dataset.y, R=dataset.X, cols=cols)
    pairs = tuple(
        MomentPair(map_id=0, weight=dataset.Z[:, l], tau=penalties.tau)
        for l in range(dataset.K)
    )
    prog = ConvexProgram(d=p, lam=penalties.lambda_t, maps=(rmap,), pairs=pairs)
    sol = solve(prog, tol_feas=tol_feas, tol_obj=tol_obj, max_iter=max_iter)
    if sol.status == "infeasible":
        # the free-slack program is always feasible (t is unbounded above)
        raise SolverError("free-slack stage-1 program reported infeasible; this is a bug")
    return sol


def fit_beta(
    dataset: Dataset,
    penalties: PenaltyConfig,
    slack_mode: str = "linked",
    tol_feas: float = 1e-7,
    tol_obj: float = 1e-6,
    max_iter: int = 50_000,
) -> Stage1Fit:
    """Fit the coefficient vector under the self-normalized constraints.

    Parameters
    ----------
    dataset : Dataset
    penalties : PenaltyConfig
        Typically from default_penalties_stage1.
    slack_mode : {"linked", "free"}
        "linked" pins t_l = rms_l(beta) (pipeline default); "free" solves
        the literal free-slack convex program.
    """
    ensure_valid(dataset)
    if slack_mode == "linked":
        beta, t_nat, diag = _fit_linked(dataset, penalties, tol_feas)
        H1n = compute_H1n(dataset)
        obj = float(np.abs(beta).sum()) + penalties.lambda_t * float(t_nat.max(initial=0.0))
        return Stage1Fit(beta_hat=beta, t_hat=t_nat, penalties=penalties, H1n=H1n,
                         objective=obj, slack_mode="linked", diagnostics=diag)
    if slack_mode == "free":
        sol = _fit_free(dataset, penalties, tol_feas, tol_obj, max_iter)
        if sol.status == "max_iter" and sol.max_violation > 10 * tol_feas:
            raise SolverError(
                f"stage-1 solver did not converge: violation {sol.max_violation:.2e}"
            )
        H1n = compute_H1n(dataset)
        return Stage1Fit(beta_hat=sol.w, t_hat=sol.t_pairs, penalties=penalties,
                         H1n=H1n, objective=sol.objective, slack_mode="free",
                         diagnostics={"mode": "free", "status": sol.status,
                                      "iterations": sol.iterations,
                                      "max_violation": sol.max_violation})
    raise ConfigError(f"unknown slack_mode {slack_mode!r}")


def refit_on_support(dataset: Dataset, fit: Stage1Fit, threshold: float = 1e-8) -> np.ndarray:
    """Least-squares refit of the moment equations on the selected support.

    The l1 stage shrinks every active coefficient toward zero; re-solving
    min_b ||E_n[z (y - x_S' b)]||_2 over the selected support removes that
    shrinkage.  Returns the refit coefficient vector (zeros off support).
    Falls back to the penalized vector when the support is empty.
    """
    S = np.nonzero(np.abs(fit.beta_hat) > threshold)[0]
    if S.size == 0:
        return fit.beta_hat.copy()
    P, q = _moment_arrays(dataset)
    beta = np.zeros(dataset.p)
    beta[S] = np.linalg.lstsq(P[:, S], q, rcond=None)[0]
    return beta


def check_feasibility(
    dataset: Dataset, beta: np.ndarray, penalties: PenaltyConfig | float
) -> FeasibilityReport:
    """Check |E_n[(y - x'beta) z_l]| <= tau * t_l(beta) with natural slacks.

    ``penalties`` may be a PenaltyConfig or a bare threshold tau >= 0 (a
    zero threshold is allowed here; it makes any nonzero moment infeasible).
    """
    ensure_valid(dataset)
    beta = np.asarray(beta, dtype=float)
    if beta.shape != (dataset.p,):
        raise ConfigError(f"beta has shape {beta.shape}, expected ({dataset.p},)")
    tau = penalties.tau if isinstance(penalties, PenaltyConfig) else float(penalties)
    if tau < 0:
        raise ConfigError(f"tau must be nonnegative, got {tau}")
    resid = dataset.y - dataset.X @ beta
    moments = dataset.Z.T @ resid / dataset.n
    t_nat = np.sqrt((dataset.Z ** 2).T @ (resid ** 2) / dataset.n)
    margins = np.abs(moments) - tau * t_nat
    return FeasibilityReport(
        feasible=bool(np.all(margins <= 0)),
        t_natural=t_nat,
        margins=margins,
        max_margin=float(margins.max()),
    )
