"""Deterministic convex solver for the two estimation programs.

Both estimation programs minimize an l1 norm plus a weighted slack bound
subject to paired constraint families: an absolute moment bound
|E_n[u (r0 - R w)]| <= tau * t and a root-mean-square bound
{E_n[u^2 (r0 - R w)^2]}^(1/2) <= t, with every slack t tied to a single
epigraph scalar T.  Since each slack appears only as an upper bound, at the
optimum t = max(rms, |m|/tau), which removes the slack variables entirely:

    min  ||w||_1 + lam * T
    s.t. rms_l(w) <= T,  |m_l(w)| <= tau_l * T   for every pair l,
         |a'w + b| <= rhs + kappa * T            for loose constraints.

Programs containing rms pairs are solved as a second-order cone program
(Clarabel) after reducing each n-dimensional residual norm to its Gram
factor.  Programs with only absolute-value constraints reduce to linear
programs and are solved by HiGHS, with a working-set strategy (grow violated
rows and KKT-violating columns on demand) that is exact: the final iterate
is verified feasible for every row and stationary for every column.

Everything here is a pure function of its inputs; repeated calls give
bit-identical results.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.optimize import linprog

import clarabel

from .errors import ConfigError, SolverError

__all__ = [
    "ResidualMap",
    "MomentPair",
    "AbsConstraint",
    "ConvexProgram",
    "SolverSolution",
    "solve",
    "residuals",
    "solve_l1_box",
]


@dataclass(frozen=True)
class ResidualMap:
    """Affine residual r(w) = r0 - R w[cols], shared by constraint pairs."""

    r0: np.ndarray          # (n,)
    R: np.ndarray           # (n, m)
    cols: np.ndarray        # (m,) indices into the decision vector

    def residual(self, w: np.ndarray) -> np.ndarray:
        return self.r0 - self.R @ w[self.cols]


@dataclass(frozen=True)
class MomentPair:
    """One self-normalized constraint pair on a residual map.

    With m(w) = E_n[weight * r(w)] and rms(w) = {E_n[weight^2 r(w)^2]}^(1/2),
    the pair contributes |m(w)| <= tau * t and rms(w) <= t with t <= T.
    """

    map_id: int
    weight: np.ndarray      # (n,)
    tau: float

    def __post_init__(self):
        if not (self.tau > 0):
            raise ConfigError(f"pair tau must be positive, got {self.tau}")


@dataclass(frozen=True)
class AbsConstraint:
    """Loose absolute-value constraint |a'w + b| <= rhs + kappa * T."""

    a: np.ndarray           # (d,)
    b: float
    rhs: float = 0.0
    kappa: float = 0.0

    def __post_init__(self):
        if self.rhs < 0 or self.kappa < 0:
            raise ConfigError("rhs and kappa must be nonnegative")


@dataclass(frozen=True)
class ConvexProgram:
    d: int
    lam: float = 0.0
    maps: tuple[ResidualMap, ...] = ()
    pairs: tuple[MomentPair, ...] = ()
    abs_constraints: tuple[AbsConstraint, ...] = ()
    l1_weights: np.ndarray | None = None    # defaults to ones

    def weights_vector(self) -> np.ndarray:
        if self.l1_weights is None:
            return np.ones(self.d)
        return np.asarray(self.l1_weights, dtype=float)


@dataclass(frozen=True)
class SolverSolution:
    w: np.ndarray
    T: float
    objective: float
    t_pairs: np.ndarray          # natural slack max(rms, |m|/tau) per pair
    max_violation: float
    iterations: int
    status: str                  # "optimal" | "max_iter" | "infeasible"
    diagnostics: dict = field(default_factory=dict)


def _pair_values(program: ConvexProgram, w: np.ndarray):
    """Moments and rms values of every pair at w, from the raw data."""
    n_pairs = len(program.pairs)
    moments = np.zeros(n_pairs)
    rmses = np.zeros(n_pairs)
    res_cache: dict[int, np.ndarray] = {}
    for i, pr in enumerate(program.pairs):
        if pr.map_id not in res_cache:
            res_cache[pr.map_id] = program.maps[pr.map_id].residual(w)
        r = res_cache[pr.map_id]
        ur = pr.weight * r
        moments[i] = ur.mean()
        rmses[i] = np.sqrt((ur * ur).mean())
    return moments, rmses


def natural_T(program: ConvexProgram, w: np.ndarray) -> float:
    """Smallest T making w feasible for all T-linked constraints."""
    T = 0.0
    if program.pairs:
        moments, rmses = _pair_values(program, w)
        taus = np.array([pr.tau for pr in program.pairs])
        T = max(T, float(np.max(np.maximum(rmses, np.abs(moments) / taus))))
    for c in program.abs_constraints:
        if c.kappa > 0:
            T = max(T, (abs(float(c.a @ w) + c.b) - c.rhs) / c.kappa)
    return T


def residuals(program: ConvexProgram, w: np.ndarray, T: float | None = None) -> np.ndarray:
    """Per-constraint violations at (w, T).

    Entries are ordered: one per absolute-value constraint, then two per
    pair (moment side, rms side).  When T is omitted the natural epigraph
    value of w is used, making every T-linked entry nonpositive.
    """
    w = np.asarray(w, dtype=float)
    if w.shape != (program.d,):
        raise ConfigError(f"w has shape {w.shape}, expected ({program.d},)")
    if T is None:
        T = natural_T(program, w)
    out = []
    for c in program.abs_constraints:
        out.append(abs(float(c.a @ w) + c.b) - (c.rhs + c.kappa * T))
    if program.pairs:
        moments, rmses = _pair_values(program, w)
        for i, pr in enumerate(program.pairs):
            out.append(abs(moments[i]) - pr.tau * T)
            out.append(rmses[i] - T)
    return np.array(out) if out else np.zeros(0)


# ---------------------------------------------------------------------------
# LP path: min sum_k c_k |w_k|  s.t.  |A w + b| <= rhs  (fixed bounds)
# ---------------------------------------------------------------------------

_FULL_LP_COLS = 80
_FULL_LP_ROWS = 240


def _lp_restricted(A, boff, rhs, cw, rows, cols):
    """Row/column-restricted split LP.

    Returns (w_sub, duals, nit, status) with status in {"optimal",
    "infeasible", "failed"}; "failed" covers HiGHS numerical giving-up,
    which the working-set loop treats like infeasibility (grow and retry).
    """
    Asub = A[np.ix_(rows, cols)]
    bo = boff[rows]
    rh = rhs[rows]
    dd = len(cols)
    c = np.concatenate([cw[cols], cw[cols]])
    Au = sp.csr_matrix(np.vstack([np.hstack([Asub, -Asub]), np.hstack([-Asub, Asub])]))
    bu = np.concatenate([rh - bo, rh + bo])
    res = linprog(c, A_ub=Au, b_ub=bu, bounds=(0, None), method="highs")
    nit = int(getattr(res, "nit", 0) or 0)
    if res.status == 2:
        return None, None, nit, "infeasible"
    if not res.success:
        return None, None, nit, "failed"
    w_sub = res.x[:dd] - res.x[dd:]
    return w_sub, res.ineqlin.marginals, nit, "optimal"


def solve_l1_box(
    A: np.ndarray,
    boff: np.ndarray,
    rhs: np.ndarray,
    c_weights: np.ndarray | None = None,
    *,
    tol_feas: float = 1e-9,
    tol_kkt: float = 1e-7,
    warm: dict | None = None,
    force_full: bool = False,
    max_outer: int = 300,
):
    """Exact solution of  min sum c_k |w_k|  s.t.  |A w + boff| <= rhs.

    For large instances a working set of rows and columns is grown until the
    restricted optimum is feasible for every row and the dual certificate
    covers every column; the result then equals the full LP optimum.  ``warm``
    may carry {'rows': [...], 'cols': [...]} from a previous related solve.

    Returns (w, info) where info holds the working sets, LP count and status.
    """
    A = np.asarray(A, dtype=float)
    m, d = A.shape
    boff = np.asarray(boff, dtype=float)
    rhs = np.asarray(rhs, dtype=float)
    cw = np.ones(d) if c_weights is None else np.asarray(c_weights, dtype=float)
    nit_total = 0

    if force_full or (d <= _FULL_LP_COLS and m <= _FULL_LP_ROWS):
        rows = list(range(m))
        cols = list(range(d))
        w_sub, duals, nit, status = _lp_restricted(A, boff, rhs, cw, rows, cols)
        if w_sub is None:
            if status == "failed":
                raise SolverError("full LP failed with an ambiguous HiGHS status")
            return None, {"status": "infeasible", "n_lp": 1, "nit": nit}
        w = np.zeros(d)
        w[cols] = w_sub
        return w, {"status": "optimal", "n_lp": 1, "nit": nit,
                   "rows": rows, "cols": cols}

    viol0 = np.abs(boff) - rhs
    warm_rows = {int(r) for r in (warm or {}).get("rows", []) if 0 <= int(r) < m}
    warm_cols = {int(k) for k in (warm or {}).get("cols", []) if 0 <= int(k) < d}
    rows = sorted(warm_rows
                  | set(np.argsort(-viol0, kind="stable")[: min(20, m)].tolist()))
    g0 = A[rows].T @ np.sign(boff[rows])
    cols = sorted(warm_cols
                  | set(np.argsort(-np.abs(g0), kind="stable")[: min(20, d)].tolist()))

    n_lp = 0
    for _ in range(max_outer):
        w_sub, duals, nit, status = _lp_restricted(A, boff, rhs, cw, rows, cols)
        n_lp += 1
        nit_total += nit
        if w_sub is None:
            # restricted columns cannot satisfy the selected rows (or HiGHS
            # gave up on a degenerate subproblem): widen the column set
            score = np.abs(A[rows].T @ np.sign(boff[rows]))
            score[cols] = -np.inf
            add = np.argsort(-score, kind="stable")[:20]
            new = [int(k) for k in add if np.isfinite(score[k])]
            if not new:
                if len(rows) < m:
                    rows = list(range(m))   # decide on the full row set
                    continue
                if status == "failed":
                    raise SolverError(
                        "working-set LP failed with an ambiguous HiGHS status"
                    )
                return None, {"status": "infeasible", "n_lp": n_lp, "nit": nit_total}
            cols = sorted(set(cols) | set(new))
            continue
        w = np.zeros(d)
        w[cols] = w_sub
        viol = np.abs(A @ w + boff) - rhs
        worst = np.argsort(-viol, kind="stable")[:25]
        new_rows = [int(r) for r in worst if viol[r] > tol_feas and int(r) not in set(rows)]
        if new_rows:
            rows = sorted(set(rows) | set(new_rows))
            continue
        # dual stationarity over excluded columns: |sum_r nu_r A_rk| <= c_k
        nr = len(rows)
        nu = duals[:nr] - duals[nr:]
        gfull = A[rows].T @ nu
        slack = cw - np.abs(gfull)
        order = np.argsort(slack, kind="stable")[:10]
        new_cols = [int(k) for k in order if slack[k] < -tol_kkt and int(k) not in set(cols)]
        if new_cols:
            cols = sorted(set(cols) | set(new_cols))
            continue
        return w, {"status": "optimal", "n_lp": n_lp, "nit": nit_total,
                   "rows": rows, "cols": cols}
    raise SolverError(f"working-set LP did not settle in {max_outer} rounds")


# ---------------------------------------------------------------------------
# SOCP path (programs containing rms pairs, or T-linked abs constraints)
# ---------------------------------------------------------------------------


def _gram_factor(Au: np.ndarray, bu: np.ndarray):
    """Factor rms(w)^2 = ||L' w - h||^2 + rho^2 from the n-row data."""
    Q = Au.T @ Au
    qlin = Au.T @ bu
    c0 = float(bu @ bu)
    m = Q.shape[0]
    jitter = 1e-13 * (np.trace(Q) / max(m, 1) + 1.0)
    try:
        L = np.linalg.cholesky(Q + jitter * np.eye(m))
        h = np.linalg.solve(L, qlin)
    except np.linalg.LinAlgError:
        evals, evecs = np.linalg.eigh(Q)
        evals = np.clip(evals, 0.0, None)
        L = evecs @ np.diag(np.sqrt(evals))
        h = np.linalg.pinv(L) @ qlin
    rho = np.sqrt(max(c0 - float(h @ h), 0.0))
    return L.T, h, rho    # R = L', rms^2 = ||R w - h||^2 + rho^2


def _solve_socp(program: ConvexProgram, tol_feas: float, tol_obj: float, max_iter: int):
    d = program.d
    n_pairs = len(program.pairs)
    cw = program.weights_vector()

    # column equilibration to unit RMS, from the stacked residual maps
    scale = np.ones(d)
    cover = np.zeros(d, dtype=bool)
    acc = np.zeros(d)
    cnt = np.zeros(d)
    for mp in program.maps:
        acc[mp.cols] += (mp.R ** 2).mean(axis=0)
        cnt[mp.cols] += 1.0
        cover[mp.cols] = True
    scale[cover] = np.sqrt(acc[cover] / cnt[cover])
    scale[scale < 1e-12] = 1.0

    nx = 2 * d + 1
    rows: list[int] = []
    cols: list[int] = []
    vals: list[float] = []
    bvec: list[float] = []
    r = 0

    def add_entry(rr, cc, vv):
        rows.append(rr)
        cols.append(cc)
        vals.append(vv)

    # |w_k| epigraph rows and T >= 0
    for k in range(d):
        add_entry(r, k, 1.0)
        add_entry(r, d + k, -1.0)
        bvec.append(0.0)
        r += 1
        add_entry(r, k, -1.0)
        add_entry(r, d + k, -1.0)
        bvec.append(0.0)
        r += 1
    add_entry(r, 2 * d, -1.0)
    bvec.append(0.0)
    r += 1

    def add_abs_rows(a_scaled, b, rhs_c, kap):
        nonlocal r
        nz = np.nonzero(a_scaled)[0]
        for sgn in (1.0, -1.0):
            for k in nz:
                add_entry(r, int(k), sgn * a_scaled[k])
            add_entry(r, 2 * d, -kap)
            bvec.append(rhs_c - sgn * b)
            r += 1

    for c in program.abs_constraints:
        add_abs_rows(np.asarray(c.a, dtype=float) * scale, c.b, c.rhs, c.kappa)

    # pair moment rows and rms cones
    cones_extra = []
    n = program.maps[0].r0.shape[0] if program.maps else 0
    for pr in program.pairs:
        mp = program.maps[pr.map_id]
        u = pr.weight
        a_full = np.zeros(d)
        a_full[mp.cols] = -(mp.R.T @ u) / n
        b_m = float((u * mp.r0).mean())
        add_abs_rows(a_full * scale, b_m, 0.0, pr.tau)
    n_lin = r
    for pr in program.pairs:
        mp = program.maps[pr.map_id]
        u = pr.weight
        Au = (mp.R * u[:, None]) / np.sqrt(n) * scale[mp.cols][None, :]
        bu = (mp.r0 * u) / np.sqrt(n)
        Rf, h, rho = _gram_factor(Au, bu)
        mdim = Rf.shape[0]
        add_entry(r, 2 * d, -1.0)
        bvec.append(0.0)
        r += 1
        for i in range(mdim):
            for kk in np.nonzero(Rf[i])[0]:
                add_entry(r, int(mp.cols[kk]), Rf[i, kk])
            bvec.append(float(h[i]))
            r += 1
        bvec.append(rho)
        r += 1
        cones_extra.append(clarabel.SecondOrderConeT(mdim + 2))

    A = sp.csc_matrix((vals, (rows, cols)), shape=(r, nx))
    b = np.array(bvec)
    q = np.concatenate([np.zeros(d), cw * scale, [program.lam]])
    cones = [clarabel.NonnegativeConeT(n_lin)] + cones_extra
    settings = clarabel.DefaultSettings()
    settings.verbose = False
    settings.max_iter = max(10, min(max_iter, 10_000))
    # argmin precision tracks the gap tolerance much more loosely than the
    # objective does; run the IPM well past the contract tolerances
    settings.tol_feas = min(1e-9, tol_feas * 1e-2)
    settings.tol_gap_abs = min(1e-10, tol_obj * 1e-3)
    settings.tol_gap_rel = min(1e-10, tol_obj * 1e-3)
    sol = clarabel.DefaultSolver(sp.csc_matrix((nx, nx)), q, A, b, cones, settings).solve()

    status_map = {
        "Solved": "optimal",
        "AlmostSolved": "optimal",
        "MaxIterations": "max_iter",
        "MaxTime": "max_iter",
        "InsufficientProgress": "max_iter",
        "PrimalInfeasible": "infeasible",
        "AlmostPrimalInfeasible": "infeasible",
        "DualInfeasible": "infeasible",
        "AlmostDualInfeasible": "infeasible",
    }
    status = status_map.get(str(sol.status), "max_iter")
    x = np.asarray(sol.x)
    w = x[:d] * scale
    T = float(x[2 * d])
    return w, T, int(sol.iterations), status


def solve(
    program: ConvexProgram,
    tol_feas: float = 1e-7,
    tol_obj: float = 1e-6,
    max_iter: int = 50_000,
) -> SolverSolution:
    """Solve a ConvexProgram deterministically.

    Programs without rms pairs reduce to linear programs; those are routed
    through HiGHS (with the exact working-set strategy on large instances).
    Programs with pairs are solved as a Gram-reduced SOCP via Clarabel.
    Failure to converge yields status "max_iter" with the best iterate;
    an infeasible program yields status "infeasible".
    """
    if tol_feas <= 0 or tol_obj <= 0:
        raise ConfigError("tol_feas and tol_obj must be positive")
    cw = program.weights_vector()
    if not program.pairs and all(c.kappa == 0 for c in program.abs_constraints):
        if program.abs_constraints:
            A = np.vstack([c.a for c in program.abs_constraints])
            boff = np.array([c.b for c in program.abs_constraints])
            rb = np.array([c.rhs for c in program.abs_constraints])
            w, info = solve_l1_box(A, boff, rb, cw, tol_feas=min(tol_feas, 1e-9))
            if w is None:
                return SolverSolution(
                    w=np.zeros(program.d), T=0.0, objective=np.inf,
                    t_pairs=np.zeros(0), max_violation=np.inf,
                    iterations=info["nit"], status="infeasible",
                    diagnostics=info,
                )
            iters = info["nit"]
            status = info["status"]
        else:
            w = np.zeros(program.d)
            iters, status = 0, "optimal"
            info = {}
        T = 0.0
        viol = residuals(program, w, T)
        maxv = float(viol.max()) if viol.size else 0.0
        obj = float(cw @ np.abs(w)) + program.lam * T
        return SolverSolution(w=w, T=T, objective=obj, t_pairs=np.zeros(0),
                              max_violation=maxv, iterations=iters,
                              status=status, diagnostics=info)

    w, T, iters, status = _solve_socp(program, tol_feas, tol_obj, max_iter)
    moments, rmses = (np.zeros(0), np.zeros(0))
    if program.pairs:
        moments, rmses = _pair_values(program, w)
        taus = np.array([pr.tau for pr in program.pairs])
        t_pairs = np.maximum(rmses, np.abs(moments) / taus)
    else:
        t_pairs = np.zeros(0)
    viol = residuals(program, w, T)
    maxv = float(viol.max()) if viol.size else 0.0
    obj = float(cw @ np.abs(w)) + program.lam * T
    if status == "max_iter" and maxv > 10 * tol_feas:
        pass  # caller decides; the best iterate is still returned
    return SolverSolution(w=w, T=T, objective=obj, t_pairs=t_pairs,
                          max_violation=maxv, iterations=iters, status=status,
                          diagnostics={"moments": moments, "rms": rmses})
