"""Command-line interface: fit, predict, simulate, ratio.

Exit codes: 0 ok, 2 input error, 3 non-convergence, 4 unsupported option
pairing.  Every command honors --seed (falling back to the SAE_SEED
environment variable) and writes a manifest sidecar next to its output.
"""

from __future__ import annotations

import argparse
import os
import sys
import time

import numpy as np

from . import io
from .bootstrap import BootstrapPlan, InsufficientReplicationsError, cmse_bootstrap
from .cmse import cmse_analytical
from .families import DomainError, FamilyKind
from .fitting import ConvergenceError, FitResult, solve_gt, solve_ml
from .model import Hyperparameters, SingularMatrixError, estimating_blocks
from .prediction import eb_predict
from .simulation import RatioParams, SimConfig, marginal_quantile, ratio_curves, simulate_table

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_NO_CONVERGENCE = 3
EXIT_UNSUPPORTED = 4

# Figure presets: (order, n, nu, linear predictor per family, m grid)
_FIG1 = {"order": 1, "n": 10.0, "nu": 1.0, "m_areas": (10,)}
_FIG1_LP = {FamilyKind.GAUSSIAN: 0.0, FamilyKind.POISSON_GAMMA: 0.0, FamilyKind.BINOMIAL_BETA: 0.0}
_FIG2 = {"order": 2, "n": 5.0, "nu": 1.0, "m_areas": (10, 15, 20)}
_FIG2_LP = {FamilyKind.GAUSSIAN: 0.0, FamilyKind.POISSON_GAMMA: 2.0, FamilyKind.BINOMIAL_BETA: 1.5}


def _resolve_seed(args) -> int | None:
    if getattr(args, "seed", None) is not None:
        return args.seed
    env = os.environ.get("SAE_SEED")
    return int(env) if env else None


def _family(args) -> FamilyKind:
    return FamilyKind.from_tag(args.family)


def _load_fit_json(path: str) -> tuple[FamilyKind, FitResult]:
    import json

    payload = json.loads(open(path, encoding="utf-8").read())
    family = FamilyKind.from_tag(payload["family"])
    eta = Hyperparameters(np.asarray(payload["beta"], dtype=float), float(payload["nu"]))
    fit = FitResult(
        eta_hat=eta,
        method=payload["method"],
        converged=bool(payload["converged"]),
        objective_value=float(payload["objective_value"]),
        equation_norm=payload.get("equation_norm"),
        gradient_norm=payload.get("gradient_norm"),
        iterations=int(payload.get("iterations", 0)),
        multistart_index=int(payload.get("multistart_index", 0)),
        diagnostics=list(payload.get("diagnostics", [])),
    )
    return family, fit


# ------------------------------------------------------------------ #
# Commands
# ------------------------------------------------------------------ #


def cmd_fit(args) -> int:
    t0 = time.perf_counter()
    family = _family(args)
    dataset = io.load_dataset_csv(args.data, family)
    solver = solve_gt if args.estimator == "gt" else solve_ml
    try:
        fit = solver(dataset)
    except ConvergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NO_CONVERGENCE
    payload = {
        "family": family.value,
        "method": fit.method,
        "beta": [float(b) for b in fit.eta_hat.beta],
        "nu": fit.eta_hat.nu,
        "converged": fit.converged,
        "objective_value": fit.objective_value,
        "equation_norm": fit.equation_norm,
        "gradient_norm": fit.gradient_norm,
        "iterations": fit.iterations,
        "multistart_index": fit.multistart_index,
        "diagnostics": fit.diagnostics,
        "multistart_log": fit.multistart_log,
    }
    io.write_json(args.out, payload)
    io.write_manifest(
        args.out, "fit",
        {"family": family.value, "estimator": args.estimator, "data": args.data},
        _resolve_seed(args), [args.data], time.perf_counter() - t0,
    )
    return EXIT_OK


def cmd_predict(args) -> int:
    t0 = time.perf_counter()
    family, fit = _load_fit_json(args.fit)
    if args.cmse == "analytical" and fit.method != "gt":
        print(
            "error: analytical CMSE is defined for GT fits only; "
            "use --cmse bootstrap for ML fits",
            file=sys.stderr,
        )
        return EXIT_UNSUPPORTED
    if args.cmse == "bootstrap" and (args.reps is None or _resolve_seed(args) is None):
        print("error: --cmse bootstrap requires --reps and --seed", file=sys.stderr)
        return EXIT_INPUT
    dataset = io.load_dataset_csv(args.data, family)
    records = eb_predict(dataset, fit)
    blocks = estimating_blocks(dataset, fit.eta_hat)
    seed = _resolve_seed(args)
    rows = []
    for idx, rec in enumerate(records):
        if args.cmse == "analytical":
            bd = cmse_analytical(idx, fit.eta_hat, blocks)
        else:
            plan = BootstrapPlan(idx, args.reps, seed + idx, estimator=fit.method)
            bd = cmse_bootstrap(dataset, fit, plan, threads=args.threads)
        rows.append(
            [
                rec.area_id,
                dataset.areas[idx].n,
                rec.y,
                rec.xi_hat,
                bd.cmse_hat * args.scale,
                bd.mse_hat * args.scale,
                bd.rd_percent,
                ";".join(bd.flags),
            ]
        )
    header = ["area_id", "n", "y", "eb", "cmse_hat", "mse_hat", "rd_percent", "flags"]
    io.write_csv(args.out, header, rows)
    io.write_manifest(
        args.out, "predict",
        {
            "fit": args.fit, "data": args.data, "cmse": args.cmse,
            "reps": args.reps, "scale": args.scale, "threads": args.threads,
        },
        seed, [args.fit, args.data], time.perf_counter() - t0,
    )
    return EXIT_OK


def cmd_simulate(args) -> int:
    t0 = time.perf_counter()
    family = _family(args)
    seed = _resolve_seed(args)
    config = SimConfig(
        family=family,
        m=args.m,
        n=args.n,
        nu_true=args.nu,
        linear_predictor=args.linpred,
        alphas=tuple(args.alphas),
        r_true=args.r_true,
        t_eval=args.t_eval,
        b_boot=args.b_boot,
        seed=seed if seed is not None else SimConfig.seed,
        threads=args.threads,
    )
    if args.paper_scale:
        config = config.paper_scale()
    report = simulate_table(config)
    header = ["alpha", "y_quantile", "cmse_true_x100", "rb_gt", "cv_gt", "rb_ml", "cv_ml"]
    rows = [
        [r.alpha, r.y_quantile, 100.0 * r.cmse_true, r.rb_gt, r.cv_gt, r.rb_ml, r.cv_ml]
        for r in report.rows
    ]
    io.write_csv(args.out, header, rows)
    io.write_manifest(
        args.out, "simulate",
        {
            "family": family.value, "m": config.m, "n": config.n, "nu": config.nu_true,
            "linear_predictor": config.linear_predictor, "alphas": list(config.alphas),
            "r_true": config.r_true, "t_eval": config.t_eval, "b_boot": config.b_boot,
            "threads": config.threads,
        },
        config.seed, [], time.perf_counter() - t0,
    )
    return EXIT_OK


def _default_grid(family: FamilyKind, n: float, nu: float, lp: float, points: int):
    from .families import mean_link

    m = mean_link(family, lp)
    if family is FamilyKind.BINOMIAL_BETA:
        lo, hi = 0.0, 1.0
    elif family is FamilyKind.POISSON_GAMMA:
        lo, hi = 0.0, marginal_quantile(family, n, m, nu, 1.0 - 1e-4)
    else:
        lo = marginal_quantile(family, n, m, nu, 1e-4)
        hi = marginal_quantile(family, n, m, nu, 1.0 - 1e-4)
    return np.linspace(lo, hi, points)


def cmd_ratio(args) -> int:
    t0 = time.perf_counter()
    family = _family(args)
    if args.figure == 1:
        preset, lp = _FIG1, _FIG1_LP[family]
    elif args.figure == 2:
        preset, lp = _FIG2, _FIG2_LP[family]
    else:
        preset = {"order": args.order, "n": args.n, "nu": args.nu, "m_areas": (args.m_areas,)}
        lp = args.linpred
    rows = []
    for m_areas in preset["m_areas"]:
        params = RatioParams(
            n=preset["n"], nu=preset["nu"], linear_predictor=lp, m_areas=m_areas
        )
        if args.grid_min is not None and args.grid_max is not None:
            grid = np.linspace(args.grid_min, args.grid_max, args.grid_points)
        else:
            grid = _default_grid(family, preset["n"], preset["nu"], lp, args.grid_points)
        try:
            curve = ratio_curves(family, preset["order"], grid, params)
        except DomainError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_INPUT
        rows.extend(
            [y, ratio, family.value, preset["order"], m_areas] for y, ratio in curve
        )
    io.write_csv(args.out, ["y", "ratio", "family", "order", "m"], rows)
    io.write_manifest(
        args.out, "ratio",
        {
            "family": family.value, "figure": args.figure, "order": preset["order"],
            "n": preset["n"], "nu": preset["nu"], "linear_predictor": lp,
            "m_areas": list(preset["m_areas"]), "grid_points": args.grid_points,
        },
        _resolve_seed(args), [], time.perf_counter() - t0,
    )
    return EXIT_OK


# ------------------------------------------------------------------ #
# Parser
# ------------------------------------------------------------------ #


def _add_common(sp, seed=True, threads=True):
    if seed:
        sp.add_argument("--seed", type=int, default=None,
                        help="RNG seed (falls back to env SAE_SEED)")
    if threads:
        sp.add_argument("--threads", type=int, default=1,
                        help="worker cap for replication loops")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="saecmse",
        description="Small area estimation with conditional MSE measures",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    families = [k.value for k in FamilyKind]

    p = sub.add_parser("fit", help="estimate hyperparameters from an area CSV")
    p.add_argument("--family", required=True, choices=families)
    p.add_argument("--estimator", required=True, choices=["gt", "ml"])
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    _add_common(p, threads=False)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("predict", help="EB predictions with CMSE/MSE/RD columns")
    p.add_argument("--fit", required=True, help="fit JSON from the fit command")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--cmse", required=True, choices=["analytical", "bootstrap"])
    p.add_argument("--reps", type=int, default=None, help="bootstrap replications")
    p.add_argument("--scale", type=float, default=1.0,
                   help="presentation scale for cmse_hat/mse_hat (e.g. 1000)")
    _add_common(p)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("simulate", help="RB/CV simulation study")
    p.add_argument("--family", required=True, choices=families)
    p.add_argument("--out", required=True)
    p.add_argument("--m", type=int, default=25)
    p.add_argument("--n", type=float, default=10.0)
    p.add_argument("--nu", type=float, default=15.0)
    p.add_argument("--linpred", type=float, default=0.0)
    p.add_argument("--alphas", type=float, nargs="+",
                   default=[0.05, 0.25, 0.50, 0.75, 0.95])
    p.add_argument("--r-true", type=int, default=2000)
    p.add_argument("--t-eval", type=int, default=200)
    p.add_argument("--b-boot", type=int, default=500)
    p.add_argument("--paper-scale", action="store_true",
                   help="use R=10000, T=2000 (hours of compute)")
    _add_common(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("ratio", help="Ratio_1/Ratio_2 curve samples")
    p.add_argument("--family", required=True, choices=families)
    p.add_argument("--out", required=True)
    p.add_argument("--figure", type=int, choices=[1, 2], default=None,
                   help="preset configurations")
    p.add_argument("--order", type=int, choices=[1, 2], default=1)
    p.add_argument("--n", type=float, default=10.0)
    p.add_argument("--nu", type=float, default=1.0)
    p.add_argument("--linpred", type=float, default=0.0)
    p.add_argument("--m-areas", type=int, default=25)
    p.add_argument("--grid-min", type=float, default=None)
    p.add_argument("--grid-max", type=float, default=None)
    p.add_argument("--grid-points", type=int, default=200)
    _add_common(p, threads=False)
    p.set_defaults(func=cmd_ratio)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except io.SchemaError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (DomainError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except ConvergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NO_CONVERGENCE
    except (SingularMatrixError, InsufficientReplicationsError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NO_CONVERGENCE


if __name__ == "__main__":
    sys.exit(main())
