"""Command-line entry points: fit, simulate, and test.

Exit codes are a stable contract: 0 success, 2 schema error, 3 numerical
failure, 4 I/O error.
"""

from __future__ import annotations

import argparse
import math
import sys
from pathlib import Path

import numpy as np

from .data import DegenerateLikelihoodError, build_design, build_time_grid
from .em import NumericalError, fit
from .inference import alpha_covariance, global_beta_test
from .io import Dataset, SchemaError, load_dataset, write_curve_csv, write_json
from .kernel import FunctionalCurve, KernelContext, compute_gram, eval_beta
from .simulation import SimConfig, SimSummary, cosine_basis, run_study
from .tuning import default_gamma_grid, select_gamma

EXIT_OK = 0
EXIT_SCHEMA = 2
EXIT_NUMERIC = 3
EXIT_IO = 4

OUTPUT_POINTS = 201
CONFIDENCE_Z = 1.959963984540054


def _add_common_flags(sub):
    sub.add_argument("--out", default=".", help="output directory")
    sub.add_argument("--gamma", type=float, default=None, help="fixed smoothing weight")
    sub.add_argument(
        "--gamma-grid",
        default=None,
        help="comma-separated candidate smoothing weights",
    )
    sub.add_argument("--m", type=int, default=2, help="Sobolev order")
    sub.add_argument("--tol", type=float, default=5e-3, help="EM convergence threshold")
    sub.add_argument("--max-iter", type=int, default=5000, help="EM iteration cap")
    sub.add_argument(
        "--test-fns",
        type=int,
        default=0,
        metavar="L",
        help="number of cosine test functions (0 disables the global test)",
    )
    sub.add_argument("--hn", type=float, default=None, help="profile perturbation")
    sub.add_argument("--seed", type=int, default=None, help="master RNG seed")
    sub.add_argument("--threads", type=int, default=None, help="worker process count")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="funcox",
        description=(
            "Functional Cox regression for interval-censored data: "
            "penalized EM fitting, profile-likelihood inference, and a "
            "Monte Carlo simulation harness."
        ),
    )
    subs = parser.add_subparsers(dest="command", required=True)

    p_fit = subs.add_parser("fit", help="fit a dataset and report estimates")
    p_fit.add_argument("data", help="dataset CSV (grid sidecar alongside)")
    _add_common_flags(p_fit)

    p_sim = subs.add_parser("simulate", help="run a Monte Carlo study from a config")
    p_sim.add_argument("config", help="simulation config JSON")
    _add_common_flags(p_sim)

    p_test = subs.add_parser("test", help="global test of a null functional effect")
    p_test.add_argument("data", help="dataset CSV (grid sidecar alongside)")
    _add_common_flags(p_test)
    return parser


def _gamma_grid_from_arg(arg: str | None, n: int) -> np.ndarray:
    if arg is None:
        return default_gamma_grid(n)
    try:
        values = [float(tok) for tok in arg.split(",") if tok.strip()]
    except ValueError as exc:
        raise SchemaError(f"--gamma-grid: {exc}") from exc
    if not values or any(v <= 0 for v in values):
        raise SchemaError("--gamma-grid must list positive numbers")
    return np.array(values)


def _fit_pipeline(dataset: Dataset, args):
    """Shared ingest-to-fit path for the fit and test commands."""
    curves = dataset.curves()
    ctx = KernelContext.for_grid(args.m, dataset.grid)
    gram = compute_gram(ctx, curves)
    grid = build_time_grid(dataset.subjects)
    design = build_design(dataset.subjects, gram, grid)
    if args.gamma is not None:
        gamma = float(args.gamma)
        state = fit(design, gamma, tol=args.tol, max_iter=args.max_iter)
        cv = None
    else:
        cv = select_gamma(
            design,
            _gamma_grid_from_arg(args.gamma_grid, design.n_subjects),
            tol=args.tol,
            max_iter=args.max_iter,
        )
        gamma = cv.selected
        state = cv.best_fit
    return ctx, curves, design, gamma, state, cv


def _config_echo(args, gamma: float) -> dict:
    return {
        "m": args.m,
        "tol": args.tol,
        "max_iter": args.max_iter,
        "gamma": gamma,
        "gamma_was_fixed": args.gamma is not None,
        "test_fns": args.test_fns,
        "h_n": args.hn,
    }


def _test_block(design, gamma, state, args, ctx, curves) -> dict:
    grid = curves[0].grid
    test_fns = [
        FunctionalCurve(grid, cosine_basis(l, grid)) for l in range(1, args.test_fns + 1)
    ]
    report = global_beta_test(
        design,
        gamma,
        state,
        test_fns,
        h_n=args.hn,
        ctx=ctx,
        curves=curves,
        tol=args.tol,
        max_iter=args.max_iter,
    )
    wald = report.wald
    return {
        "statistic": wald.statistic,
        "dof": wald.dof,
        "p_value": wald.p_value,
        "condition": wald.condition,
        "inconclusive": wald.ill_conditioned,
        "rho_hat": report.rho_hat.tolist(),
    }


def cmd_fit(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dataset = load_dataset(args.data)
    ctx, curves, design, gamma, state, _ = _fit_pipeline(dataset, args)

    cov = alpha_covariance(
        design, gamma, state, h_n=args.hn, tol=args.tol, max_iter=args.max_iter
    )
    alpha_hat = state.zeta[: design.p]
    x_names = dataset.x_names or [f"x{j + 1}" for j in range(design.p)]
    alpha_block = []
    for j in range(design.p):
        se = float(cov.se[j])
        est = float(alpha_hat[j])
        half = CONFIDENCE_Z * se if math.isfinite(se) else math.nan
        alpha_block.append(
            {
                "name": x_names[j],
                "estimate": est,
                "se": se,
                "ci_lower": est - half,
                "ci_upper": est + half,
            }
        )

    s_out = np.linspace(0.0, 1.0, OUTPUT_POINTS)
    d_hat = state.zeta[design.p : design.p + design.m]
    c_hat = state.zeta[design.p + design.m :]
    beta_curve = eval_beta(ctx, d_hat, c_hat, curves, s_out)
    write_curve_csv(out / "beta_curve.csv", {"s": s_out, "beta_hat": beta_curve})
    cum = np.concatenate([[0.0], np.cumsum(state.lam)])
    write_curve_csv(
        out / "baseline_hazard.csv", {"t": design.grid.t, "cumulative_hazard": cum}
    )

    report = {
        "config": _config_echo(args, gamma),
        "selected_gamma": gamma,
        "alpha": alpha_block,
        "coefficients": {"d": d_hat.tolist(), "c": c_hat.tolist()},
        "convergence": {
            "converged": bool(state.converged),
            "iterations": int(state.n_iter),
            "clamp_count": int(state.clamp_count),
            "loglik": state.loglik,
            "penalized_loglik": state.penalized,
            "se_positive_definite": bool(cov.positive_definite),
        },
        "files": {
            "beta_curve": "beta_curve.csv",
            "baseline_hazard": "baseline_hazard.csv",
        },
    }
    if args.test_fns > 0:
        report["test"] = _test_block(design, gamma, state, args, ctx, curves)
    write_json(out / "fit_report.json", report)
    if not state.converged:
        print("warning: EM did not converge within max-iter", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def cmd_test(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dataset = load_dataset(args.data)
    if args.test_fns <= 0:
        args.test_fns = 3
    ctx, curves, design, gamma, state, _ = _fit_pipeline(dataset, args)
    block = _test_block(design, gamma, state, args, ctx, curves)
    block["selected_gamma"] = gamma
    write_json(out / "test_report.json", block)
    if block["inconclusive"]:
        print(
            "warning: test covariance ill-conditioned "
            f"(condition {block['condition']:.3e}); result inconclusive",
            file=sys.stderr,
        )
        return EXIT_NUMERIC
    return EXIT_OK


def _load_sim_config(path, args) -> list[SimConfig]:
    import json

    with open(path) as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise SchemaError(f"config {path}: invalid JSON ({exc})") from exc
    if not isinstance(raw, dict):
        raise SchemaError("config must be a JSON object")
    known = set(SimConfig.__dataclass_fields__)
    unknown = sorted(set(raw) - known)
    if unknown:
        raise SchemaError("unknown config fields: " + ", ".join(unknown))
    if args.seed is not None:
        raw["seed"] = args.seed
    if args.threads is not None:
        raw["threads"] = args.threads
    omegas = raw.pop("omega", 1.0)
    sweep = isinstance(omegas, (list, tuple))
    if not sweep:
        omegas = [omegas]
    configs = []
    for idx, omega in enumerate(omegas):
        cell = dict(raw)
        cell["omega"] = float(omega)
        if sweep and raw.get("seed") is not None:
            # disjoint Philox keys per sweep cell, all derived from one seed
            cell["seed"] = int(raw["seed"]) + 1000003 * idx
        if "gamma_grid" in cell and cell["gamma_grid"] is not None:
            cell["gamma_grid"] = tuple(float(g) for g in cell["gamma_grid"])
        if "alpha" in cell:
            cell["alpha"] = tuple(float(a) for a in cell["alpha"])
        try:
            configs.append(SimConfig(**cell))
        except (TypeError, ValueError) as exc:
            raise SchemaError(f"invalid config: {exc}") from exc
    return configs


def _omega_label(omega: float) -> str:
    return f"omega={omega:g}"


def _summary_files(out: Path, summary: SimSummary, suffix: str = "") -> None:
    write_json(out / f"summary{suffix}.json", summary.to_dict())
    if summary.alpha_see is not None:
        rows = []
        names = ["alpha1", "alpha2"]
        for j, name in enumerate(names):
            rows.append(
                [
                    name,
                    repr(float(summary.alpha_bias[j])),
                    repr(float(summary.alpha_se[j])),
                    repr(float(summary.alpha_see[j])),
                    repr(float(100.0 * summary.alpha_cp[j])),
                ]
            )
        with open(out / f"alpha_table{suffix}.csv", "w", newline="") as fh:
            import csv as _csv

            writer = _csv.writer(fh)
            writer.writerow(["parameter", "Bias", "SE", "SEE", "CP"])
            writer.writerows(rows)
    write_curve_csv(
        out / f"beta_mean_curve{suffix}.csv",
        {
            "s": summary.beta_grid,
            "beta_true": summary.beta_true,
            "beta_mean": summary.beta_mean,
        },
    )
    write_curve_csv(
        out / f"cumhaz_mean_curve{suffix}.csv",
        {
            "t": summary.time_grid,
            "cumhaz_true": summary.cumhaz_true,
            "cumhaz_mean": summary.cumhaz_mean,
        },
    )


def cmd_simulate(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    configs = _load_sim_config(args.config, args)
    summaries = [run_study(cfg) for cfg in configs]
    sweep = len(configs) > 1
    for cfg, summary in zip(configs, summaries):
        suffix = f"_{_omega_label(cfg.omega)}" if sweep else ""
        _summary_files(out, summary, suffix)
    if any(s.rejection_rate is not None for s in summaries):
        import csv as _csv

        with open(out / "rejection_rates.csv", "w", newline="") as fh:
            writer = _csv.writer(fh)
            writer.writerow([_omega_label(c.omega) for c in configs])
            writer.writerow(
                [
                    "" if s.rejection_rate is None else repr(float(s.rejection_rate))
                    for s in summaries
                ]
            )
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    handlers = {"fit": cmd_fit, "simulate": cmd_simulate, "test": cmd_test}
    try:
        return handlers[args.command](args)
    except SchemaError as exc:
        print(f"schema error: {exc}", file=sys.stderr)
        return EXIT_SCHEMA
    except (DegenerateLikelihoodError, NumericalError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
