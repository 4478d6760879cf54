"""Core numeric containers and CSV ingestion.

A dataset bundles the response ``y`` (n,), the endogenous regressor matrix
``X`` (n, p) and the instrument matrix ``Z`` (n, K).  Identification requires
at least as many instruments as regressors, K >= p.  CSV files use a fixed
header-name schema ``y, x1..xp, z1..zK`` (order of columns is irrelevant,
names are not).
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    ConfigError,
    IdentificationError,
    ParseError,
    SchemaError,
    ValidationError,
)

__all__ = [
    "Dataset",
    "GroundTruth",
    "PenaltyConfig",
    "ValidationReport",
    "load_dataset",
    "save_dataset",
    "validate",
    "ensure_valid",
]


def _readonly(a, dtype=np.float64):
    out = np.array(a, dtype=dtype)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class GroundTruth:
    """Simulation truth attached to a dataset.

    ``beta0`` is the structural coefficient vector, ``xi`` the structural
    error (so y = X beta0 + xi holds exactly when attached by the simulator),
    and ``mu0`` optionally maps a 1-based coordinate j to its population
    orthogonalized-instrument weights.
    """

    beta0: np.ndarray
    xi: np.ndarray
    mu0: dict[int, np.ndarray] | None = None

    def __post_init__(self):
        object.__setattr__(self, "beta0", _readonly(self.beta0))
        object.__setattr__(self, "xi", _readonly(self.xi))


@dataclass(frozen=True)
class Dataset:
    """Immutable (y, X, Z) triple, optionally with simulation truth."""

    y: np.ndarray
    X: np.ndarray
    Z: np.ndarray
    truth: GroundTruth | None = None

    def __post_init__(self):
        object.__setattr__(self, "y", _readonly(self.y).reshape(-1))
        object.__setattr__(self, "X", _readonly(np.atleast_2d(self.X)))
        object.__setattr__(self, "Z", _readonly(np.atleast_2d(self.Z)))

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def p(self) -> int:
        return self.X.shape[1]

    @property
    def K(self) -> int:
        return self.Z.shape[1]


@dataclass(frozen=True)
class PenaltyConfig:
    """Penalty parameters for the two estimation programs.

    ``lambda_t`` weights the slack norm, ``tau`` is the moment threshold,
    ``c`` is the stage-2 multiplier (1 for i.i.d. data) and ``alpha`` the
    confidence level the thresholds were derived from.
    """

    lambda_t: float
    tau: float
    c: float = 1.0
    alpha: float = 0.05

    def __post_init__(self):
        if not (self.lambda_t > 0):
            raise ConfigError(f"lambda_t must be positive, got {self.lambda_t}")
        if not (self.tau > 0):
            raise ConfigError(f"tau must be positive, got {self.tau}")
        if not (self.c >= 1):
            raise ConfigError(f"c must be >= 1, got {self.c}")
        if not (0 < self.alpha < 1):
            raise ConfigError(f"alpha must be in (0, 1), got {self.alpha}")


@dataclass
class ValidationReport:
    ok: bool
    violations: list[str] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps({"ok": self.ok, "violations": self.violations})


def validate(dataset: Dataset) -> ValidationReport:
    """Check dataset invariants; reports violations, never raises."""
    v: list[str] = []
    y, X, Z = dataset.y, dataset.X, dataset.Z
    if y.ndim != 1:
        v.append("y must be one-dimensional")
    if X.ndim != 2 or Z.ndim != 2:
        v.append("X and Z must be two-dimensional")
        return ValidationReport(False, v)
    n = y.shape[0]
    if X.shape[0] != n or Z.shape[0] != n:
        v.append(
            f"row counts differ: y has {n}, X has {X.shape[0]}, Z has {Z.shape[0]}"
        )
    if n < 2:
        v.append(f"n >= 2 required, got n={n}")
    if X.shape[1] < 1:
        v.append("p >= 1 required")
    if Z.shape[1] < X.shape[1]:
        v.append(
            f"K >= p required for identification, got K={Z.shape[1]}, p={X.shape[1]}"
        )
    for name, arr in (("y", y), ("X", X), ("Z", Z)):
        if not np.all(np.isfinite(arr)):
            v.append(f"{name} contains non-finite entries")
    t = dataset.truth
    if t is not None and not v:
        if t.beta0.shape[0] != X.shape[1]:
            v.append("truth.beta0 length differs from p")
        elif t.xi.shape[0] != n:
            v.append("truth.xi length differs from n")
        else:
            resid = y - X @ t.beta0 - t.xi
            scale = max(1.0, float(np.abs(y).max()))
            if np.abs(resid).max() > 1e-10 * scale:
                v.append("truth inconsistent: y != X beta0 + xi")
    return ValidationReport(not v, v)


def ensure_valid(dataset: Dataset) -> None:
    """Raise ValidationError when any dataset invariant fails."""
    report = validate(dataset)
    if not report.ok:
        raise ValidationError(report.violations)


def _parse_header(names: list[str]) -> tuple[int, int, dict[str, int]]:
    idx = {name.strip(): k for k, name in enumerate(names)}
    if len(idx) != len(names):
        raise SchemaError("duplicate column names in header")
    if "y" not in idx:
        raise SchemaError("missing column 'y'")
    xs = [c for c in idx if c.startswith("x") and c[1:].isdigit()]
    zs = [c for c in idx if c.startswith("z") and c[1:].isdigit()]
    extra = set(idx) - {"y"} - set(xs) - set(zs)
    if extra:
        raise SchemaError(f"unrecognized columns: {sorted(extra)}")
    p = max((int(c[1:]) for c in xs), default=0)
    K = max((int(c[1:]) for c in zs), default=0)
    for k in range(1, p + 1):
        if f"x{k}" not in idx:
            raise SchemaError(f"missing column 'x{k}'")
    for k in range(1, K + 1):
        if f"z{k}" not in idx:
            raise SchemaError(f"missing column 'z{k}'")
    if p == 0:
        raise SchemaError("no x columns found")
    if K == 0:
        raise SchemaError("no z columns found")
    return p, K, idx


def load_dataset(path, schema: str = "yxz") -> Dataset:
    """Load a dataset from a headered CSV file.

    The header must contain columns named ``y``, ``x1..xp`` and ``z1..zK``;
    p and K are inferred from the header.  Raises SchemaError for header
    problems, ParseError (with the offending row and column) for non-numeric
    or non-finite cells, IdentificationError when K < p, and ValidationError
    for remaining invariant failures.
    """
    if schema != "yxz":
        raise ConfigError(f"unknown schema {schema!r}")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError(f"{path}: empty file, header row required") from None
        p, K, idx = _parse_header(header)
        rows = list(reader)
    ncol = len(header)
    data = np.empty((len(rows), ncol))
    for i, row in enumerate(rows):
        if len(row) != ncol:
            raise ParseError(f"{path}: row {i + 1} has {len(row)} cells, expected {ncol}")
        for cname, k in idx.items():
            try:
                val = float(row[k])
            except ValueError:
                raise ParseError(
                    f"{path}: row {i + 1}, column '{cname}': cannot parse {row[k]!r}"
                ) from None
            if not np.isfinite(val):
                raise ParseError(
                    f"{path}: row {i + 1}, column '{cname}': non-finite value {row[k]!r}"
                )
            data[i, k] = val
    y = data[:, idx["y"]]
    X = np.column_stack([data[:, idx[f"x{k}"]] for k in range(1, p + 1)])
    Z = np.column_stack([data[:, idx[f"z{k}"]] for k in range(1, K + 1)])
    if K < p:
        raise IdentificationError(
            f"{path}: K={K} instruments but p={p} regressors; K >= p required"
        )
    ds = Dataset(y=y, X=X, Z=Z)
    ensure_valid(ds)
    return ds


def save_dataset(dataset: Dataset, path) -> None:
    """Write a dataset to CSV in the y, x1..xp, z1..zK schema.

    Values are written with repr-level precision so that a save/load round
    trip reproduces the numeric values bit for bit.
    """
    header = (
        ["y"]
        + [f"x{k}" for k in range(1, dataset.p + 1)]
        + [f"z{k}" for k in range(1, dataset.K + 1)]
    )
    mat = np.column_stack([dataset.y, dataset.X, dataset.Z])
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in mat:
            writer.writerow([f"{v:.17g}" for v in row])
