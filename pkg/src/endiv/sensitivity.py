"""l_q-sensitivity coefficients: exact small-scale values and lower bounds.

For the design cross-moment matrix Psi = Z'X/n the sensitivity coefficient

    kappa_q(s, u) = min_{|J| <= s}  min { ||Psi theta||_inf :
                                          theta in C_J(u), ||theta||_q = 1 }

with the restricted cone C_J(u) = {theta : ||theta_{J^c}||_1 <= u ||theta_J||_1}
governs estimation rates in place of restricted eigenvalues.  On small
problems the q = 1 value is computed exactly by enumerating support sets J
and sign orthants and solving one linear program per pair (the programs for
all orthants of one J are batched into a single block-diagonal LP).  The
q = 2 value is a refined upper-bound estimate over the same orthants, and
the lower bound evaluates the sparse-singular-value expression

    max_{m >= s} {sigma_min(m)/sqrt(m) - sigma_max(m)/sqrt(m) (1+u) sqrt(s/m)}
                 * s^{1/2 - 1/q} / [{1 + (1+u) sqrt(s/m)} (1+u)]

where sigma_min(m) = min_{|M|<=m} max_{|J|<=m} sigma_min(Psi_{J,M}) and
sigma_max(m) = max_{|M|<=m} max_{|J|<=m} sigma_max(Psi_{J,M}) over row sets
J and column sets M.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from math import comb

import numpy as np
import scipy.sparse as sp
from scipy.optimize import linprog, minimize

from .errors import BudgetError, ConfigError

__all__ = [
    "SensitivityReport",
    "kappa_exact_small",
    "sparse_singular_bounds",
    "kappa_lower_bound",
    "weak_instrument_bound",
    "analyze_sensitivity",
]

_EXACT_MAX_P = 12
_EXACT_MAX_S = 3
_SV_BUDGET = 1_000_000


@dataclass(frozen=True)
class SensitivityReport:
    q: int
    s: int
    u: float
    exact_kappa: float | None
    exact_label: str               # "lp-certified" (q=1) or "upper-bound-estimate"
    lower_bound: float
    sigma_min_m: dict[int, float]
    sigma_max_m: dict[int, float]
    m_grid: tuple[int, ...]
    notes: tuple[str, ...] = field(default_factory=tuple)


def _check_common(Psi, s, u, q):
    Psi = np.asarray(Psi, dtype=float)
    if Psi.ndim != 2:
        raise ConfigError("Psi must be a matrix")
    if not (u > 0):
        raise ConfigError(f"u must be positive, got {u}")
    if q not in (1, 2):
        raise ConfigError(f"q must be 1 or 2, got {q}")
    if not (1 <= s <= Psi.shape[1]):
        raise ConfigError(f"s must be in 1..p, got s={s} with p={Psi.shape[1]}")
    return Psi


def _orthant_signs(p: int) -> list[np.ndarray]:
    # theta -> -theta symmetry: pin the last coordinate's sign
    return [np.array(bits + (1.0,)) for bits in itertools.product((1.0, -1.0), repeat=p - 1)]


def _orthant_lp_batch(Psi: np.ndarray, cone: np.ndarray, sigs: np.ndarray):
    """All-orthant minima of ||Psi theta||_inf for one support set.

    Substituting theta = sigma * t with t >= 0 turns ||theta||_1 = 1 into
    1't = 1 and leaves one linear cone row, so each orthant is a small LP;
    the whole batch is assembled as one block-diagonal LP directly in COO
    form (vars per block: t (p), T).
    """
    K, p = Psi.shape
    nsig = sigs.shape[0]
    ncol = p + 1
    nrow = 2 * K + 1
    # per-block dense values: [Psi*sig, -1; -Psi*sig, -1; cone, 0]
    body = np.empty((nsig, nrow, ncol))
    Ps = Psi[None, :, :] * sigs[:, None, :]
    body[:, :K, :p] = Ps
    body[:, K:2 * K, :p] = -Ps
    body[:, :2 * K, p] = -1.0
    body[:, 2 * K, :p] = cone[None, :]
    body[:, 2 * K, p] = 0.0
    rows = np.broadcast_to(
        np.arange(nsig)[:, None, None] * nrow + np.arange(nrow)[None, :, None],
        (nsig, nrow, ncol)).reshape(-1)
    cols = np.broadcast_to(
        np.arange(nsig)[:, None, None] * ncol + np.arange(ncol)[None, None, :],
        (nsig, nrow, ncol)).reshape(-1)
    Aub = sp.csr_matrix((body.reshape(-1), (rows, cols)),
                        shape=(nsig * nrow, nsig * ncol))
    bub = np.zeros(nsig * nrow)
    eq_cols = (np.arange(nsig)[:, None] * ncol + np.arange(p)[None, :]).reshape(-1)
    eq_rows = np.repeat(np.arange(nsig), p)
    Aeq = sp.csr_matrix((np.ones(nsig * p), (eq_rows, eq_cols)),
                        shape=(nsig, nsig * ncol))
    beq = np.ones(nsig)
    c = np.tile(np.concatenate([np.zeros(p), [1.0]]), nsig)
    bounds = ([(0, None)] * p + [(None, None)]) * nsig
    res = linprog(c, A_ub=Aub, b_ub=bub, A_eq=Aeq, b_eq=beq, bounds=bounds,
                  method="highs-ds", options={"presolve": False})
    if not res.success:
        raise BudgetError(f"sensitivity LP batch failed: {res.message}")
    sol = res.x.reshape(nsig, ncol)
    return sol[:, -1], sol[:, :p] * sigs


def _kappa1_blocks(Psi: np.ndarray, Js: list[tuple[int, ...]], u: float):
    """Exact per-(J, orthant) minima, one LP batch per support set.

    Returns (values, argmins) aligned with the (J, orthant) product order.
    """
    K, p = Psi.shape
    sigs = np.array(_orthant_signs(p))
    nsig = sigs.shape[0]
    vals = np.empty(len(Js) * nsig)
    args = np.empty((len(Js) * nsig, p))
    for i, J in enumerate(Js):
        cone = np.where(np.isin(np.arange(p), J), -u, 1.0)
        v, a = _orthant_lp_batch(Psi, cone, sigs)
        vals[i * nsig:(i + 1) * nsig] = v
        args[i * nsig:(i + 1) * nsig] = a
    return vals, args


def _kappa2_refine(Psi, J, u, theta0):
    """Local refinement of ||Psi theta||_inf under ||theta||_2 = 1.

    Fixes the orthant of theta0 and runs SLSQP on the epigraph form; the
    result is feasible, hence an upper bound on kappa_2 for this J.
    """
    K, p = Psi.shape
    sg = np.where(theta0 >= 0, 1.0, -1.0)
    mask = np.isin(np.arange(p), J)
    cone = np.where(mask, -u, 1.0)
    t0 = np.abs(theta0)
    nrm = np.linalg.norm(t0)
    t0 = t0 / nrm if nrm > 0 else np.ones(p) / np.sqrt(p)
    Ps = Psi * sg[None, :]
    x0 = np.concatenate([t0, [np.abs(Ps @ t0).max()]])

    def objective(x):
        return x[-1]

    cons = [
        {"type": "ineq", "fun": lambda x: x[-1] - Ps @ x[:p]},
        {"type": "ineq", "fun": lambda x: x[-1] + Ps @ x[:p]},
        {"type": "ineq", "fun": lambda x: -(cone @ x[:p])},
        {"type": "eq", "fun": lambda x: x[:p] @ x[:p] - 1.0},
    ]
    bounds = [(0.0, None)] * p + [(None, None)]
    res = minimize(objective, x0, method="SLSQP", bounds=bounds,
                   constraints=cons, options={"maxiter": 200, "ftol": 1e-12})
    cands = [x0]
    if res.success:
        cands.append(res.x)
    best = np.inf
    for x in cands:
        t = np.clip(x[:p], 0.0, None)
        nrm = np.linalg.norm(t)
        if nrm <= 0 or (cone @ t) > 1e-9:
            continue
        best = min(best, float(np.abs(Ps @ t).max() / nrm))
    return best


def kappa_exact_small(Psi, s: int, u: float, q: int = 1) -> float:
    """Exact (q=1) or refined upper-bound (q=2) sensitivity on small problems.

    Enumerates support sets of size exactly s (supersets can only lower the
    minimum, so |J| <= s reduces to |J| = s) and all sign orthants.  Budget:
    p <= 12 and s <= 3; beyond that use kappa_lower_bound.
    """
    Psi = _check_common(Psi, s, u, q)
    K, p = Psi.shape
    if p > _EXACT_MAX_P or s > _EXACT_MAX_S:
        raise BudgetError(
            f"exact enumeration limited to p <= {_EXACT_MAX_P}, s <= {_EXACT_MAX_S} "
            f"(got p={p}, s={s}); use kappa_lower_bound instead"
        )
    Js = list(itertools.combinations(range(p), s))
    vals, args = _kappa1_blocks(Psi, Js, u)
    if q == 1:
        return float(vals.min())
    # q = 2: refine the most promising orthants per J
    nsig = 2 ** (p - 1)
    best = np.inf
    for jdx, J in enumerate(Js):
        vblock = vals[jdx * nsig:(jdx + 1) * nsig]
        ablock = args[jdx * nsig:(jdx + 1) * nsig]
        order = np.argsort(vblock, kind="stable")[: min(6, nsig)]
        for i in order:
            best = min(best, _kappa2_refine(Psi, J, u, ablock[i]))
    return float(best)


def _sv_all_sizes(Psi: np.ndarray, m: int):
    """Per-size singular value extrema over all submatrices up to m x m."""
    K, p = Psi.shape
    ma, mb = min(m, K), min(m, p)
    if comb(K, ma) * comb(p, mb) > _SV_BUDGET:
        raise BudgetError(
            f"submatrix enumeration C({K},{ma})*C({p},{mb}) exceeds {_SV_BUDGET}"
        )
    Msets = {b: list(itertools.combinations(range(p), b)) for b in range(1, mb + 1)}
    Jsets = {a: list(itertools.combinations(range(K), a)) for a in range(1, ma + 1)}
    # per (b, M): the max over all row sets (any size <= ma) of sigma_min
    maxJ_sigmin = {b: np.full(len(Msets[b]), -np.inf) for b in Msets}
    sigma_max_total = 0.0
    for a, Js in Jsets.items():
        Jarr = np.array(Js)
        for b, Ms in Msets.items():
            Marr = np.array(Ms)
            # chunk the row-set axis to bound peak memory
            step = max(1, 2_000_000 // max(1, len(Ms) * a * b))
            for lo in range(0, len(Js), step):
                Jc = Jarr[lo:lo + step]
                sub = Psi[Jc[:, None, :, None], Marr[None, :, None, :]]
                sv = np.linalg.svd(sub, compute_uv=False)
                smin = sv[..., -1].max(axis=0)      # best row set per M
                maxJ_sigmin[b] = np.maximum(maxJ_sigmin[b], smin)
                sigma_max_total = max(sigma_max_total, float(sv[..., 0].max()))
    sigma_min_total = min(float(maxJ_sigmin[b].min()) for b in maxJ_sigmin)
    return sigma_min_total, sigma_max_total


def sparse_singular_bounds(Psi, m: int) -> tuple[float, float]:
    """(sigma_min(m), sigma_max(m)) by full submatrix enumeration.

    sigma_min(m) = min over column sets |M| <= m of the best achievable
    smallest singular value over row sets |J| <= m; sigma_max(m) is the
    overall largest singular value.  Raises BudgetError when the number of
    submatrix pairs exceeds 10^6.
    """
    Psi = np.asarray(Psi, dtype=float)
    if Psi.ndim != 2:
        raise ConfigError("Psi must be a matrix")
    if m < 1:
        raise ConfigError(f"m must be >= 1, got {m}")
    return _sv_all_sizes(Psi, m)


def sigma_tables(Psi, m_grid) -> tuple[dict[int, float], dict[int, float]]:
    """sigma_min(m) and sigma_max(m) for every m in the grid.

    Submatrix sizes cap at the matrix dimensions, so values saturate once
    m exceeds them; the enumeration is shared across saturated entries.
    """
    Psi = np.asarray(Psi, dtype=float)
    K, p = Psi.shape
    cache: dict[tuple[int, int], tuple[float, float]] = {}
    smin_m: dict[int, float] = {}
    smax_m: dict[int, float] = {}
    for m in sorted({int(m) for m in m_grid}):
        if m < 1:
            raise ConfigError(f"m must be >= 1, got {m}")
        eff = (min(m, K), min(m, p))
        if eff not in cache:
            cache[eff] = _sv_all_sizes(Psi, min(m, max(K, p)))
        smin_m[m], smax_m[m] = cache[eff]
    return smin_m, smax_m


def kappa_lower_bound(Psi, s: int, u: float, q: int, m_grid) -> float:
    """Sparse-singular-value lower bound on kappa_q(s, u), maximized over m_grid.

    Every grid entry must satisfy m >= s.  The result is clipped below at 0
    (the expression can go negative, in which case it carries no information).
    """
    Psi = _check_common(Psi, s, u, q)
    m_grid = tuple(int(m) for m in m_grid)
    if not m_grid:
        raise ConfigError("m_grid must be nonempty")
    if any(m < s for m in m_grid):
        raise ConfigError(f"every m in m_grid must be >= s={s}")
    smin_m, smax_m = sigma_tables(Psi, m_grid)
    best = 0.0
    for m in sorted(set(m_grid)):
        ratio = (1.0 + u) * np.sqrt(s / m)
        lead = smin_m[m] / np.sqrt(m) - (smax_m[m] / np.sqrt(m)) * ratio
        term = lead * s ** (0.5 - 1.0 / q) / ((1.0 + ratio) * (1.0 + u))
        best = max(best, term)
    return float(max(best, 0.0))


def weak_instrument_bound(mu_n: float, s: int, q: int) -> float:
    """Explicit weak-instrument bound s^{-1/q} mu_n^2 / 128.

    Valid when the m-sparse singular values of Psi are within [mu_n, 1] at
    m = 64 s / mu_n^2; the constant traces the sparse-singular-value bound
    at that m with u = 3.
    """
    if not (0 < mu_n <= 1):
        raise ConfigError(f"mu_n must lie in (0, 1], got {mu_n}")
    if s < 1:
        raise ConfigError(f"s must be >= 1, got {s}")
    if q not in (1, 2):
        raise ConfigError(f"q must be 1 or 2, got {q}")
    return s ** (-1.0 / q) * mu_n ** 2 / 128.0


def analyze_sensitivity(Psi, s: int, u: float, q: int, m_grid) -> SensitivityReport:
    """Full sensitivity report: exact value when affordable, plus the bound."""
    Psi = _check_common(Psi, s, u, q)
    notes = []
    exact = None
    label = "lp-certified" if q == 1 else "upper-bound-estimate"
    try:
        exact = kappa_exact_small(Psi, s, u, q)
    except BudgetError as e:
        notes.append(str(e))
    lb = kappa_lower_bound(Psi, s, u, q, m_grid)
    smin, smax = sigma_tables(Psi, m_grid)
    return SensitivityReport(
        q=q, s=s, u=u, exact_kappa=exact, exact_label=label,
        lower_bound=lb, sigma_min_m=smin, sigma_max_m=smax,
        m_grid=tuple(int(m) for m in m_grid), notes=tuple(notes),
    )
