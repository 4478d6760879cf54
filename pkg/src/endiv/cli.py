"""Command-line interface.

Subcommands: ``estimate`` (stage-1 and optional stage-2 fits), ``bands``
(debiased estimates with simultaneous multiplier-bootstrap bands),
``sensitivity`` (sensitivity coefficients of Z'X/n) and ``simulate``
(Monte Carlo harness).  Every run emits a single JSON artifact carrying a
``provenance`` block (fully resolved configuration, seed, version); re-running
from that block reproduces the output byte for byte.  A flat key-value JSON
config file can seed any option; explicit flags override it.

Exit codes: 0 success, 2 configuration error, 3 estimation failure,
4 input/output error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict, dataclass

from . import __version__
from .data import load_dataset
from .errors import ConfigError, DataError, EndivError
from .inference import (
    estimate_coefficient,
    multiplier_bootstrap,
    simultaneous_bands,
)
from .sensitivity import analyze_sensitivity
from .simulate import DgpParams, EstimatorConfig, monte_carlo
from .stage1 import (
    compute_H1n,
    default_penalties_stage1,
    fit_beta,
    refit_on_support,
)
from .stage2 import (
    Stage2Workspace,
    default_penalties_stage2,
    fit_instrument,
    orthogonality_residuals,
)

__all__ = ["main", "run", "parse_config", "RunConfig"]

_DEFAULTS = {
    "alpha": 0.05,
    "draws": 2000,
    "seed": 0,
    "c_const": 1.1,
    "iid": False,
    "threads": 1,
    "tol_feas": 1e-7,
    "tol_obj": 1e-6,
    "s": 1,
    "u": 3.0,
    "q": 1,
    "m_grid": "2,4,8",
    "refit": True,
}


@dataclass(frozen=True)
class RunConfig:
    command: str
    input: str | None = None
    output: str | None = None
    alpha: float = 0.05
    set: tuple[int, ...] = ()
    draws: int = 2000
    seed: int = 0
    c_const: float = 1.1
    iid: bool = False
    threads: int = 1
    tol_feas: float = 1e-7
    tol_obj: float = 1e-6
    n: int | None = None
    p: int | None = None
    K: int | None = None
    L: int | None = None
    reps: int | None = None
    s: int = 1
    u: float = 3.0
    q: int = 1
    m_grid: tuple[int, ...] = (2, 4, 8)
    stage1_only: bool = False
    refit: bool = True
    plot: str | None = None
    csv: str | None = None


def _parse_int_list(text: str, what: str) -> tuple[int, ...]:
    try:
        items = tuple(int(t) for t in str(text).split(",") if t != "")
    except ValueError:
        raise ConfigError(f"cannot parse {what} list from {text!r}") from None
    if not items:
        raise ConfigError(f"{what} list is empty")
    return items


def _build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="endiv", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)

    def common(sp, input_required=True):
        sp.add_argument("--input", default=None)
        sp.add_argument("--output", "--out", dest="output", default=None)
        sp.add_argument("--config", default=None, help="flat key-value JSON config file")
        sp.add_argument("--alpha", type=float, default=None)
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--threads", type=int, default=None)
        sp.add_argument("--tol-feas", dest="tol_feas", type=float, default=None)
        sp.add_argument("--tol-obj", dest="tol_obj", type=float, default=None)
        sp.add_argument("--plot", default=None, help="render a PNG figure to this path")

    sp = sub.add_parser("estimate", help="stage-1 fit, optionally stage-2 per index")
    common(sp)
    sp.add_argument("--stage1-only", action="store_true", default=None)
    sp.add_argument("--set", default=None, help="comma-separated 1-based indices")
    sp.add_argument("--c-const", dest="c_const", type=float, default=None)
    sp.add_argument("--iid", action="store_true", default=None)
    sp.add_argument("--no-refit", dest="refit", action="store_false", default=None)

    sp = sub.add_parser("bands", help="debiased estimates and simultaneous bands")
    common(sp)
    sp.add_argument("--set", default=None)
    sp.add_argument("--draws", type=int, default=None)
    sp.add_argument("--c-const", dest="c_const", type=float, default=None)
    sp.add_argument("--iid", action="store_true", default=None)
    sp.add_argument("--no-refit", dest="refit", action="store_false", default=None)

    sp = sub.add_parser("sensitivity", help="sensitivity coefficients of Z'X/n")
    common(sp)
    sp.add_argument("--s", type=int, default=None)
    sp.add_argument("--u", type=float, default=None)
    sp.add_argument("--q", type=int, default=None)
    sp.add_argument("--m-grid", dest="m_grid", default=None)

    sp = sub.add_parser("simulate", help="Monte Carlo harness")
    common(sp, input_required=False)
    sp.add_argument("--n", type=int, default=None)
    sp.add_argument("--p", type=int, default=None)
    sp.add_argument("--K", type=int, default=None)
    sp.add_argument("--L", type=int, default=None)
    sp.add_argument("--reps", type=int, default=None)
    sp.add_argument("--draws", type=int, default=None)
    sp.add_argument("--c-const", dest="c_const", type=float, default=None)
    sp.add_argument("--iid", action="store_true", default=None)
    sp.add_argument("--no-refit", dest="refit", action="store_false", default=None)
    sp.add_argument("--set", default=None)
    sp.add_argument("--csv", default=None, help="also write the table row as CSV")
    return ap


def parse_config(argv=None) -> RunConfig:
    """Parse flags, merge the optional config file (flags win), apply defaults."""
    ap = _build_parser()
    try:
        ns = ap.parse_args(argv)
    except SystemExit as e:
        if e.code not in (0, None):
            raise ConfigError("invalid command line") from None
        raise
    values = {k: v for k, v in vars(ns).items() if v is not None and k != "config"}
    file_values = {}
    if getattr(ns, "config", None):
        try:
            with open(ns.config, encoding="utf-8") as fh:
                file_values = json.load(fh)
        except FileNotFoundError:
            raise DataError(f"config file not found: {ns.config}") from None
        except json.JSONDecodeError as e:
            raise DataError(f"config file {ns.config}: {e}") from None
        if not isinstance(file_values, dict):
            raise ConfigError("config file must hold a flat JSON object")
    merged = {**_DEFAULTS, **file_values, **values}
    merged.setdefault("command", ns.command)

    if "set" in merged and merged["set"] is not None and merged["set"] != ():
        sset = merged["set"]
        if isinstance(sset, str):
            sset = _parse_int_list(sset, "--set")
        sset = tuple(int(j) for j in sset)
        if any(j < 1 for j in sset):
            raise ConfigError(f"--set index out of range: {sset} (indices are 1-based)")
        merged["set"] = sset
    else:
        merged["set"] = ()
    mg = merged.get("m_grid", "2,4,8")
    merged["m_grid"] = _parse_int_list(mg, "--m-grid") if isinstance(mg, str) else tuple(mg)
    if merged.get("threads") is not None:
        env = os.environ.get("ENDIV_THREADS")
        if "threads" not in values and "threads" not in file_values and env:
            merged["threads"] = int(env)
    known = set(RunConfig.__dataclass_fields__)
    unknown = set(merged) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    cfg = RunConfig(**merged)
    if not (0 < cfg.alpha < 1):
        raise ConfigError(f"alpha must be in (0, 1), got {cfg.alpha}")
    if cfg.c_const < 1:
        raise ConfigError(f"--c-const must be >= 1, got {cfg.c_const}")
    if cfg.threads < 1:
        raise ConfigError(f"--threads must be >= 1, got {cfg.threads}")
    return cfg


def _provenance(cfg: RunConfig) -> dict:
    conf = asdict(cfg)
    conf["set"] = list(cfg.set)
    conf["m_grid"] = list(cfg.m_grid)
    return {
        "artifact": "endiv",
        "version": __version__,
        "command": cfg.command,
        "seed": cfg.seed,
        "config": conf,
    }


def _emit(cfg: RunConfig, payload: dict) -> None:
    text = json.dumps(payload, indent=2, sort_keys=True) + "\n"
    if cfg.output:
        try:
            with open(cfg.output, "w", encoding="utf-8") as fh:
                fh.write(text)
        except OSError as e:
            raise DataError(f"cannot write output {cfg.output}: {e}") from None
    else:
        sys.stdout.write(text)


def _load_input(cfg: RunConfig):
    if not cfg.input:
        raise ConfigError(f"'{cfg.command}' requires --input")
    try:
        return load_dataset(cfg.input)
    except FileNotFoundError:
        raise DataError(f"input file not found: {cfg.input}") from None


def _check_set(cfg: RunConfig, p: int, required: bool) -> tuple[int, ...]:
    S = cfg.set
    if not S:
        if required:
            raise ConfigError(f"'{cfg.command}' requires a nonempty --set")
        return ()
    if max(S) > p:
        raise ConfigError(f"--set index out of range: {max(S)} > p={p}")
    return S


def _stage1_payload(ds, cfg: RunConfig):
    pen1 = default_penalties_stage1(ds.n, ds.p, cfg.alpha, compute_H1n(ds))
    fit1 = fit_beta(ds, pen1, tol_feas=cfg.tol_feas, tol_obj=cfg.tol_obj)
    beta_refit = refit_on_support(ds, fit1) if cfg.refit else fit1.beta_hat
    payload = {
        "beta_hat": fit1.beta_hat.tolist(),
        "beta_refit": beta_refit.tolist(),
        "t_hat": fit1.t_hat.tolist(),
        "lambda_t": pen1.lambda_t,
        "tau": pen1.tau,
        "H1n": fit1.H1n,
    }
    return payload, fit1, beta_refit


def _cmd_estimate(cfg: RunConfig) -> dict:
    ds = _load_input(cfg)
    payload, fit1, beta_refit = _stage1_payload(ds, cfg)
    S = _check_set(cfg, ds.p, required=False)
    if cfg.stage1_only or not S:
        return payload
    ws = Stage2Workspace(ds)
    pen2 = default_penalties_stage2(ds.n, ds.p, ds.K, len(S), cfg.alpha, ws.H2n,
                                    c=None if cfg.iid else cfg.c_const,
                                    iid=cfg.iid)
    per_j = []
    for j in S:
        fit = fit_instrument(ds, j, pen2, tol_feas=cfg.tol_feas,
                             tol_obj=cfg.tol_obj, workspace=ws)
        rep = orthogonality_residuals(ds, fit)
        per_j.append({
            "j": j,
            "mu_hat": fit.mu_hat.tolist(),
            "theta_hat": fit.theta_hat.tolist(),
            "omega_hat": rep.omega_hat,
            "max_orthogonality_moment": rep.max_orthogonality_moment,
            "margins_z": rep.margins_z.tolist(),
            "margins_x": rep.margins_x.tolist(),
            "margins_xz": rep.margins_xz.tolist(),
            "max_margin": rep.max_margin,
        })
    payload["instruments"] = per_j
    payload["tau2"] = pen2.tau
    payload["c"] = pen2.c
    return payload


def _cmd_bands(cfg: RunConfig) -> dict:
    ds = _load_input(cfg)
    S = _check_set(cfg, ds.p, required=True)
    pen1 = default_penalties_stage1(ds.n, ds.p, cfg.alpha, compute_H1n(ds))
    fit1 = fit_beta(ds, pen1, tol_feas=cfg.tol_feas, tol_obj=cfg.tol_obj)
    beta_hat = refit_on_support(ds, fit1) if cfg.refit else fit1.beta_hat
    ws = Stage2Workspace(ds)
    pen2 = default_penalties_stage2(ds.n, ds.p, ds.K, len(S), cfg.alpha, ws.H2n,
                                    c=None if cfg.iid else cfg.c_const,
                                    iid=cfg.iid)
    fits, estimates = {}, {}
    for j in S:
        fits[j] = fit_instrument(ds, j, pen2, tol_feas=cfg.tol_feas,
                                 tol_obj=cfg.tol_obj, workspace=ws)
        estimates[j] = estimate_coefficient(ds, j, beta_hat, fits[j])
    c_star = multiplier_bootstrap(ds, S, beta_hat, fits, estimates,
                                  B=cfg.draws, seed=cfg.seed, alpha=cfg.alpha)
    band = simultaneous_bands(estimates, c_star, ds.n, cfg.alpha,
                              B=cfg.draws, seed=cfg.seed)
    return {
        "S": list(band.S),
        "alpha": band.alpha,
        "critical_value": band.critical_value,
        "intervals": [
            {
                "j": j,
                "lo": lo,
                "hi": hi,
                "beta_check": estimates[j].beta_check,
                "sigma_hat": estimates[j].sigma_hat,
            }
            for (j, lo, hi) in band.intervals
        ],
        "B": band.B,
        "seed": band.seed,
    }


def _cmd_sensitivity(cfg: RunConfig) -> dict:
    ds = _load_input(cfg)
    Psi = ds.Z.T @ ds.X / ds.n
    report = analyze_sensitivity(Psi, cfg.s, cfg.u, cfg.q, cfg.m_grid)
    return {
        "q": report.q,
        "s": report.s,
        "u": report.u,
        "exact_kappa": report.exact_kappa,
        "exact_label": report.exact_label,
        "lower_bound": report.lower_bound,
        "sigma_min_m": {str(m): v for m, v in report.sigma_min_m.items()},
        "sigma_max_m": {str(m): v for m, v in report.sigma_max_m.items()},
        "m_grid": list(report.m_grid),
        "notes": list(report.notes),
    }


def _cmd_simulate(cfg: RunConfig) -> dict:
    for name in ("n", "p", "K", "L", "reps"):
        if getattr(cfg, name) is None:
            raise ConfigError(f"'simulate' requires --{name}")
    params = DgpParams(n=cfg.n, p=cfg.p, K=cfg.K, L=cfg.L, seed=cfg.seed)
    S = cfg.set if cfg.set else (1, 2, 3)
    if max(S) > cfg.p:
        raise ConfigError(f"--set index out of range: {max(S)} > p={cfg.p}")
    config = EstimatorConfig(alpha=cfg.alpha, B=cfg.draws,
                             c_const=None if cfg.iid else cfg.c_const,
                             iid=cfg.iid, S=S, refit=cfg.refit,
                             tol_feas=cfg.tol_feas, tol_obj=cfg.tol_obj)
    summary = monte_carlo(params, cfg.reps, base_seed=cfg.seed, config=config,
                          n_jobs=cfg.threads)
    return {
        "n": summary.n, "p": summary.p, "K": summary.K, "L": summary.L,
        "R": summary.R, "alpha": summary.alpha, "S": list(summary.S),
        "rp05": summary.rp05, "rp05_se": summary.rp05_se,
        "linf": summary.linf, "linf_se": summary.linf_se,
        "mean_max_width": summary.mean_max_width,
        "bias": list(summary.bias), "bias_se": list(summary.bias_se),
        "B": summary.B, "base_seed": summary.base_seed,
        "n_failed": summary.n_failed,
    }


def _table_from_summary(payload: dict) -> str:
    bias = payload["bias"]
    cols = [f"{payload[k]:>5}" for k in ("n", "p", "K", "L")]
    row = " ".join(cols) + (
        f"  rp({payload['alpha']:.2f})={payload['rp05']:.3f}"
        f"  linf={payload['linf']:.4f}"
        + "".join(f"  bias{i + 1}={b:+.4f}" for i, b in enumerate(bias))
    )
    head = "    n     p     K     L  (simultaneous over S=" + \
        ",".join(str(j) for j in payload["S"]) + ")"
    return head + "\n" + row


def run(cfg: RunConfig) -> int:
    """Execute a parsed configuration; returns the process exit status."""
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover
        threadpool_limits = None
    handlers = {
        "estimate": _cmd_estimate,
        "bands": _cmd_bands,
        "sensitivity": _cmd_sensitivity,
        "simulate": _cmd_simulate,
    }
    if cfg.command not in handlers:
        raise ConfigError(f"unknown command {cfg.command!r}")
    if threadpool_limits is not None:
        # numeric kernels pinned to one thread: --threads parallelizes
        # replications only, keeping outputs independent of worker count
        with threadpool_limits(limits=1):
            payload = handlers[cfg.command](cfg)
    else:  # pragma: no cover
        payload = handlers[cfg.command](cfg)
    payload["provenance"] = _provenance(cfg)
    _emit(cfg, payload)
    if cfg.command == "simulate":
        if cfg.output:
            sys.stdout.write(_table_from_summary(payload) + "\n")
        if cfg.csv:
            import csv as _csv

            with open(cfg.csv, "w", newline="", encoding="utf-8") as fh:
                wr = _csv.writer(fh)
                wr.writerow(["n", "p", "K", "L", "rp05", "linf"]
                            + [f"bias{i + 1}" for i in range(len(payload["bias"]))])
                wr.writerow([payload["n"], payload["p"], payload["K"], payload["L"],
                             payload["rp05"], payload["linf"]] + payload["bias"])
    if cfg.plot:
        from . import plots

        if cfg.command == "bands":
            plots.render_bands_figure(payload, cfg.plot)
        elif cfg.command == "simulate":
            plots.render_simulation_figure(payload, cfg.plot)
        else:
            raise ConfigError(f"--plot is not supported for '{cfg.command}'")
    return 0


def main(argv=None) -> int:
    try:
        cfg = parse_config(argv)
        return run(cfg)
    except EndivError as e:
        sys.stderr.write(json.dumps(
            {"error": {"type": type(e).__name__, "message": str(e)}}
        ) + "\n")
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
