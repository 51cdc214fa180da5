"""Command-line interface: estimate, kappa-star, and regret subcommands."""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from .errors import OmsError
from .gmm_engine import WeightSpec, estimate
from .harness import ExperimentConfig, emit_outputs, mse_curve
from .moment_model import History
from .policies import oracle_kappa
from .scm_models import exact_moment_matrices, get_model
from .variance_engine import budgeted_objective, target_variance


def _parse_costs(text: str) -> list[float]:
    return [float(x) for x in text.split(",")]


def _split_policies(text: str) -> list[str]:
    """Split a policy list where fixed ratios embed commas:
    'etc:0.1,fixed:0.5,0.5,oracle' -> ['etc:0.1', 'fixed:0.5,0.5', 'oracle']."""
    out: list[str] = []
    for frag in text.split(","):
        frag = frag.strip()
        is_number = False
        try:
            float(frag)
            is_number = True
        except ValueError:
            pass
        if is_number and out:
            out[-1] += "," + frag
        else:
            out.append(frag)
    return [p for p in out if p]


def _cmd_estimate(args) -> int:
    entry = get_model(args.model, args.ihdp_covariates)
    history = History.from_csv(args.history, entry.model.sources)
    spec = {
        "identity": WeightSpec.identity(),
        "efficient": WeightSpec.efficient(),
        "regularized": WeightSpec.regularized(args.lambda_w if args.lambda_w > 0 else 0.01),
    }[args.weight]
    result = estimate(history, entry.model, spec, args.seed)
    out = {
        "model": args.model,
        "weight": args.weight,
        "theta_names": list(entry.model.theta_names),
        "theta_hat": [float(x) for x in result.theta_hat],
        "objective": result.objective,
        "beta_hat": float(entry.model.f_tar(result.theta_hat)),
        "converged": result.optimizer_report.converged,
        "iterations": result.optimizer_report.iterations,
        "records": len(history),
    }
    print(json.dumps(out, indent=2))
    return 0


def _cmd_kappa_star(args) -> int:
    entry = get_model(args.model, args.ihdp_covariates)
    costs = np.asarray(_parse_costs(args.costs), dtype=float) if args.costs else None
    kappa = oracle_kappa(entry, costs)
    pm = exact_moment_matrices(entry.scm, entry.model, entry.scm.true_theta)
    variance = target_variance(pm, entry.model, entry.scm.true_theta, kappa)
    out = {
        "model": args.model,
        "kappa_star": [float(x) for x in kappa],
        "variance": variance,
        "true_beta": entry.scm.true_beta,
        "metadata": dict(entry.scm.metadata),
    }
    if costs is not None:
        out["costs"] = [float(c) for c in costs]
        out["budgeted_objective"] = budgeted_objective(
            pm, entry.model, entry.scm.true_theta, kappa, costs)
    print(json.dumps(out, indent=2))
    return 0


def _cmd_regret(args) -> int:
    if args.config:
        with open(args.config) as fh:
            raw = json.load(fh)
    else:
        raw = {}
    overrides = {
        "model": args.model,
        "policies": _split_policies(args.policies) if args.policies else None,
        "horizons": [int(x) for x in (args.budgets or args.horizons).split(",")]
        if (args.horizons or args.budgets) else None,
        "runs": args.runs,
        "seed": args.seed,
        "budget_mode": True if args.budget_mode else None,
        "costs": _parse_costs(args.costs) if args.costs else None,
        "out_dir": args.out,
        "lambda_w": args.lambda_w,
        "ihdp_covariates": args.ihdp_covariates,
        "workers": args.workers,
    }
    for key, value in overrides.items():
        if value is not None:
            raw[key] = value
    cfg = ExperimentConfig.from_dict(raw)
    table = mse_curve(cfg)
    for row in table.rows:
        status = f"rr={row.rr_pct:.2f}% [{row.rr_lo:.2f}, {row.rr_hi:.2f}]" \
            if row.error is None else f"FAILED: {row.error}"
        print(f"{row.policy:>14} @ {row.horizon:>7}: mse={row.mse:.3e}  {status}")
    if cfg.out_dir:
        paths = emit_outputs(table, cfg.out_dir, cfg)
        print(f"wrote {paths['csv']}, {paths['config']}, {paths['svg']}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="oms",
        description="Adaptive data-source selection for GMM target estimation",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_est = sub.add_parser("estimate", help="two-step GMM estimate from a history CSV")
    p_est.add_argument("--model", required=True)
    p_est.add_argument("--history", required=True)
    p_est.add_argument("--weight", choices=["identity", "efficient", "regularized"],
                       default="efficient")
    p_est.add_argument("--lambda-w", type=float, default=0.01, dest="lambda_w")
    p_est.add_argument("--seed", type=int, default=0)
    p_est.add_argument("--ihdp-covariates", default=None, dest="ihdp_covariates")
    p_est.set_defaults(func=_cmd_estimate)

    p_ks = sub.add_parser("kappa-star", help="oracle selection ratio at the true parameters")
    p_ks.add_argument("--model", required=True)
    p_ks.add_argument("--costs", default=None, help="comma-separated per-source costs")
    p_ks.add_argument("--ihdp-covariates", default=None, dest="ihdp_covariates")
    p_ks.set_defaults(func=_cmd_kappa_star)

    p_rg = sub.add_parser("regret", help="Monte Carlo relative-regret sweep")
    p_rg.add_argument("--model", default=None)
    p_rg.add_argument("--policies", default=None,
                      help="comma-separated, e.g. etc:0.1,etg:0.1,fixed:0.5,0.5,oracle")
    p_rg.add_argument("--horizons", default=None)
    p_rg.add_argument("--budgets", default=None)
    p_rg.add_argument("--budget-mode", action="store_true", dest="budget_mode")
    p_rg.add_argument("--runs", type=int, default=None)
    p_rg.add_argument("--seed", type=int, default=None)
    p_rg.add_argument("--costs", default=None)
    p_rg.add_argument("--out", default=None)
    p_rg.add_argument("--config", default=None, help="load an ExperimentConfig JSON")
    p_rg.add_argument("--lambda-w", type=float, default=None, dest="lambda_w")
    p_rg.add_argument("--workers", type=int, default=None)
    p_rg.add_argument("--ihdp-covariates", default=None, dest="ihdp_covariates")
    p_rg.set_defaults(func=_cmd_regret)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except OmsError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
