"""Debiased coefficients, variances, and multiplier-bootstrap bands.

Given the stage-1 coefficients and a per-coordinate orthogonalized
instrument, the debiased estimate solves the empirical moment equation
E_n[(y - x_j b - x_{-j}'beta_{-j}) z'mu_j] = 0 in closed form.  Its variance
uses the full stage-1 residual, and simultaneous critical values come from
a Gaussian multiplier bootstrap of the studentized score maxima.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, replace

import numpy as np
from scipy.stats import norm

from .data import Dataset, ensure_valid
from .errors import ConfigError, EstimationError, WeakInstrumentError
from .stage2 import OrthogonalInstrumentFit

__all__ = [
    "DebiasedEstimate",
    "ConfidenceBand",
    "RELEVANCE_RTOL",
    "debiased_coefficient",
    "variance_estimate",
    "estimate_coefficient",
    "multiplier_bootstrap",
    "simultaneous_bands",
    "pointwise_interval",
]

RELEVANCE_RTOL = 1e-8


@dataclass(frozen=True)
class DebiasedEstimate:
    j: int                       # 1-based coordinate
    beta_check: float
    omega_hat: float
    sigma_hat: float | None = None


@dataclass(frozen=True)
class ConfidenceBand:
    S: tuple[int, ...]
    alpha: float
    critical_value: float
    intervals: tuple[tuple[int, float, float], ...]   # (j, lo, hi)
    B: int
    seed: int

    def interval(self, j: int) -> tuple[float, float]:
        for jj, lo, hi in self.intervals:
            if jj == j:
                return lo, hi
        raise KeyError(j)


def _constructed_instrument(dataset: Dataset, fit: OrthogonalInstrumentFit) -> np.ndarray:
    return dataset.Z @ fit.mu_hat


def _relevance_guard(dataset: Dataset, j: int, zmu: np.ndarray, omega: float) -> None:
    rms_x = float(np.sqrt((dataset.X[:, j - 1] ** 2).mean()))
    rms_zmu = float(np.sqrt((zmu ** 2).mean()))
    threshold = RELEVANCE_RTOL * rms_x * rms_zmu
    if not (abs(omega) > threshold):
        raise WeakInstrumentError(j, omega, threshold)


def debiased_coefficient(
    dataset: Dataset,
    j: int,
    beta_hat: np.ndarray,
    instrument_fit: OrthogonalInstrumentFit,
) -> DebiasedEstimate:
    """Closed-form solution of the orthogonalized moment equation for j.

    beta_check = E_n[(y - x'beta_hat_{-j}) z'mu_j] / E_n[x_j z'mu_j], where
    the residual excludes coordinate j from the fitted part.  Raises
    WeakInstrumentError when E_n[x_j z'mu_j] fails the relevance guard.
    """
    ensure_valid(dataset)
    if not (1 <= j <= dataset.p):
        raise ConfigError(f"j={j} outside 1..{dataset.p}")
    beta_hat = np.asarray(beta_hat, dtype=float)
    zmu = _constructed_instrument(dataset, instrument_fit)
    omega = float((dataset.X[:, j - 1] * zmu).mean())
    _relevance_guard(dataset, j, zmu, omega)
    fitted_minus_j = dataset.X @ beta_hat - dataset.X[:, j - 1] * beta_hat[j - 1]
    beta_check = float(((dataset.y - fitted_minus_j) * zmu).mean()) / omega
    return DebiasedEstimate(j=j, beta_check=beta_check, omega_hat=omega)


def variance_estimate(
    dataset: Dataset,
    j: int,
    beta_hat_full: np.ndarray,
    instrument_fit: OrthogonalInstrumentFit,
    omega_hat: float,
) -> float:
    """sigma_hat_j from the full stage-1 residual:

    sigma^2 = omega^{-2} E_n[{(y - x'beta_hat) z'mu_j}^2].
    """
    ensure_valid(dataset)
    zmu = _constructed_instrument(dataset, instrument_fit)
    _relevance_guard(dataset, j, zmu, omega_hat)
    resid = dataset.y - dataset.X @ np.asarray(beta_hat_full, dtype=float)
    sigma2 = float(((resid * zmu) ** 2).mean()) / omega_hat ** 2
    return float(np.sqrt(sigma2))


def estimate_coefficient(
    dataset: Dataset,
    j: int,
    beta_hat: np.ndarray,
    instrument_fit: OrthogonalInstrumentFit,
) -> DebiasedEstimate:
    """Debiased point estimate together with its variance estimate."""
    est = debiased_coefficient(dataset, j, beta_hat, instrument_fit)
    sigma = variance_estimate(dataset, j, beta_hat, instrument_fit, est.omega_hat)
    return replace(est, sigma_hat=sigma)


def _score_matrix(
    dataset: Dataset,
    S: tuple[int, ...],
    beta_hat: np.ndarray,
    fits: dict[int, OrthogonalInstrumentFit],
    estimates: dict[int, DebiasedEstimate],
) -> np.ndarray:
    """Studentized scores psi_ij = (y_i - x_i'beta) z_i'mu_j / (sigma_j omega_j)."""
    resid = dataset.y - dataset.X @ np.asarray(beta_hat, dtype=float)
    cols = []
    for j in S:
        est = estimates[j]
        if est.sigma_hat is None:
            raise ConfigError(f"estimate for j={j} lacks sigma_hat")
        zmu = _constructed_instrument(dataset, fits[j])
        if est.sigma_hat == 0.0:
            cols.append(np.zeros(dataset.n))
        else:
            cols.append(resid * zmu / (est.sigma_hat * est.omega_hat))
    return np.column_stack(cols)


def multiplier_bootstrap(
    dataset: Dataset,
    S,
    beta_hat: np.ndarray,
    fits: dict[int, OrthogonalInstrumentFit],
    estimates: dict[int, DebiasedEstimate],
    B: int,
    seed: int,
    alpha: float = 0.05,
) -> float:
    """Critical value from B Gaussian-multiplier draws of the score maxima.

    Draw b perturbs every observation's studentized score by an independent
    standard normal multiplier; the critical value is the ceil((1-alpha) B)
    order statistic of max_{j in S} |G_j|.  Multipliers for draw b are row b
    of a single counter-based stream keyed by ``seed``, so the result is a
    pure function of (dataset, S, B, seed) regardless of scheduling.
    """
    S = tuple(int(j) for j in S)
    if B < 100:
        raise ConfigError(f"B >= 100 required, got B={B}")
    if not (0 < alpha < 1):
        raise ConfigError(f"alpha must be in (0, 1), got {alpha}")
    scores = _score_matrix(dataset, S, beta_hat, fits, estimates)
    if not np.any(scores):
        raise EstimationError("zero score variance: all bootstrap scores vanish")
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))
    g = rng.standard_normal((B, dataset.n))
    gmax = np.abs(g @ scores / np.sqrt(dataset.n)).max(axis=1)
    rank = int(np.ceil((1.0 - alpha) * B)) - 1
    return float(np.partition(gmax, rank)[rank])


def simultaneous_bands(
    estimates: dict[int, DebiasedEstimate],
    c_star: float,
    n: int,
    alpha: float,
    B: int = 0,
    seed: int = 0,
) -> ConfidenceBand:
    """Symmetric simultaneous intervals beta_check_j +- c* sigma_hat_j / sqrt(n)."""
    if c_star < 0:
        raise ConfigError(f"critical value must be nonnegative, got {c_star}")
    S = tuple(sorted(estimates))
    intervals = []
    for j in S:
        est = estimates[j]
        if est.sigma_hat == 0.0:
            warnings.warn(f"sigma_hat is zero for j={j}: zero-width interval")
        half = c_star * est.sigma_hat / np.sqrt(n)
        intervals.append((j, est.beta_check - half, est.beta_check + half))
    return ConfidenceBand(S=S, alpha=alpha, critical_value=float(c_star),
                          intervals=tuple(intervals), B=B, seed=seed)


def pointwise_interval(estimate: DebiasedEstimate, n: int, alpha: float):
    """Componentwise interval beta_check +- Phi^{-1}(1 - alpha/2) sigma_hat / sqrt(n)."""
    if not (0 < alpha < 1):
        raise ConfigError(f"alpha must be in (0, 1), got {alpha}")
    if estimate.sigma_hat is None:
        raise ConfigError("estimate lacks sigma_hat")
    half = float(norm.ppf(1.0 - alpha / 2.0)) * estimate.sigma_hat / np.sqrt(n)
    return estimate.beta_check - half, estimate.beta_check + half
