"""Command line entry point: ``ssplab gen|validate|oracle|run|summarize|check``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import env as E
from .harness import (EXIT_CONFIG, EXIT_INVARIANT, EXIT_PASS, ConfigError, ExperimentConfig, check_dir,
                      exit_code, load_config, run_experiment, summarize_dir)
from .io import dumps, load_env, save_env, save_json
from .oracle import OracleError, solve_fh, solve_ssp


def _gen(args):
    if args.family == "lower-bound":
        rho = E.parse_rho(args.rho, args.K) if args.rho else None
        rng = None if rho is not None else np.random.default_rng(args.seed)
        env = E.make_lower_bound_instance(args.d, args.K, args.B, rho=rho, rng=rng)
    elif args.family == "gap":
        env = E.make_gap_example(args.p, args.q, args.eps)
    elif args.family == "two-route":
        env = E.make_two_route(args.p_low, args.p_high)
    else:
        env = E.make_mixture_fixture(d=args.d, seed=args.seed)
    if args.one_hot:
        if not isinstance(env, E.TabularSsp):
            raise ConfigError("--one-hot applies to tabular families only")
        env = E.tabular_to_linear(env)
    E.validate(env)
    save_env(env, args.out)
    print(f"wrote {args.out}: {type(env).__name__} S={env.n_states} A={env.n_actions}")
    return EXIT_PASS


def _validate(args):
    env = load_env(args.env)
    try:
        E.validate(env, tol=args.tol)
    except E.ValidationError as exc:
        print(f"INVALID: {exc}")
        return EXIT_INVARIANT
    print(f"OK: {type(env).__name__} S={env.n_states} A={env.n_actions}")
    return EXIT_PASS


def _oracle(args):
    env = load_env(args.env)
    try:
        sol = solve_ssp(env, tol=args.tol)
    except OracleError as exc:
        print(f"oracle failed: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out = sol.to_dict()
    if args.H:
        term = E.two_B_star(sol.B_star) if args.terminal == "two_B_star" else E.zero()
        fh = solve_fh(E.fh_wrap(env, args.H, term), tol=args.tol)
        out["fh"] = {"H": args.H, "terminal": term.to_dict(), "V_1": fh.V[0], "gap_min_prime": fh.gap_min_prime}
    if args.out:
        save_json(out, args.out)
    print(f"V*(s_init)={sol.V_star[env.s_init]:.12g} B*={sol.B_star:.12g} T*={sol.T_star:.12g} "
          f"gap_min={sol.gap_min:.12g} residual={sol.residual:.3g}")
    return EXIT_PASS


def _run(args):
    if args.config:
        cfg = load_config(args.config)
        out = args.out or json.loads(Path(args.config).read_text()).get("out", "runs")
    else:
        if not (args.env and args.algo and args.K):
            raise ConfigError("either --config or all of --env, --algo, --K")
        H = {"policy": "auto_4Tstar"} if args.H == "auto" else {"policy": "fixed", "n": int(args.H)}
        algo = {"algo": args.algo}
        for kv in args.param or []:
            k, _, v = kv.partition("=")
            try:
                algo[k] = json.loads(v)
            except json.JSONDecodeError:
                algo[k] = v
        cfg = ExperimentConfig.from_dict({
            "envs": [{"name": Path(args.env).stem, "file": str(Path(args.env).resolve())}],
            "algos": [algo], "K": [args.K], "seeds": [args.seed], "H": H,
            "terminal_cost": args.terminal,
        })
        out = args.out or "runs"
    summary = run_experiment(cfg, out_dir=out, workers=args.workers)
    _print_summary(summary)
    return exit_code(summary["invariants"])


def _print_summary(summary):
    for g in summary["groups"]:
        for row in g["regret"]:
            print(f"{g['env']:>16} {g['algo']:>8} K={row['K']:<6} mean R_K={row['mean_R_K']:.4f} "
                  f"sd={row['std_R_K']:.4f} n={row['n']}")
        fit = g.get("rate_fit")
        if fit and "exponent" in fit:
            print(f"{g['env']:>16} {g['algo']:>8} fitted exponent {fit['exponent']:.4f} "
                  f"(95% CI {fit['ci'][0]:.3f}..{fit['ci'][1]:.3f})")
    inv = summary["invariants"]
    for name, v in inv["invariants"].items():
        print(f"invariant {name}: rate={v['rate']:.4f} threshold={v['threshold']} {'ok' if v['passed'] else 'FAIL'}")
    print(f"verdict: {inv['verdict']}")


def _summarize(args):
    summary = summarize_dir(args.runs)
    if args.json:
        print(dumps({"groups": summary["groups"], "invariants": summary["invariants"]}, indent=1))
    else:
        _print_summary(summary)
    return EXIT_PASS


def _check(args):
    thresholds = json.loads(args.thresholds) if args.thresholds else None
    report = check_dir(args.runs, args.oracle, thresholds)
    print(dumps(report, indent=1))
    return exit_code(report)


def build_parser():
    p = argparse.ArgumentParser(prog="ssplab", description="Stochastic shortest path regret laboratory")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="cmd", required=True)

    g = sub.add_parser("gen", help="generate an environment file")
    g.add_argument("family", choices=["lower-bound", "gap", "two-route", "mixture"])
    g.add_argument("--d", type=int, default=2, help="action dimension (lower-bound) or mixture dimension")
    g.add_argument("--K", type=int, default=10000)
    g.add_argument("--B", type=float, default=2.0)
    g.add_argument("--rho", default=None, help="sign string such as ++- (default: random from --seed)")
    g.add_argument("--p", type=float, default=0.5)
    g.add_argument("--q", type=float, default=0.1)
    g.add_argument("--eps", type=float, default=0.01)
    g.add_argument("--p-low", type=float, default=0.5)
    g.add_argument("--p-high", type=float, default=0.6)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--one-hot", action="store_true", help="embed a tabular env as a linear SSP")
    g.add_argument("--out", required=True)
    g.set_defaults(fn=_gen)

    v = sub.add_parser("validate", help="run the environment invariant suite")
    v.add_argument("env")
    v.add_argument("--tol", type=float, default=1e-12)
    v.set_defaults(fn=_validate)

    o = sub.add_parser("oracle", help="solve an environment exactly")
    o.add_argument("env")
    o.add_argument("--tol", type=float, default=1e-10)
    o.add_argument("--H", type=int, default=None, help="also solve the horizon-H view")
    o.add_argument("--terminal", choices=["two_B_star", "zero"], default="two_B_star")
    o.add_argument("--out", default=None)
    o.set_defaults(fn=_oracle)

    r = sub.add_parser("run", help="run an experiment")
    r.add_argument("--config", default=None)
    r.add_argument("--env", default=None)
    r.add_argument("--algo", choices=["lsvi", "mvp", "vtr", "vagopo"], default=None)
    r.add_argument("--K", type=int, default=None)
    r.add_argument("--H", default="auto", help="'auto' (4 T* ln 4K) or an integer")
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--terminal", choices=["two_B_star", "zero"], default="two_B_star")
    r.add_argument("--param", action="append", help="algo hyperparameter key=value (repeatable)")
    r.add_argument("--workers", type=int, default=None)
    r.add_argument("--out", default=None)
    r.set_defaults(fn=_run)

    s = sub.add_parser("summarize", help="print the summary of a run directory")
    s.add_argument("runs")
    s.add_argument("--json", action="store_true")
    s.set_defaults(fn=_summarize)

    c = sub.add_parser("check", help="recompute invariants from run artifacts")
    c.add_argument("runs")
    c.add_argument("--oracle", default=None)
    c.add_argument("--thresholds", default=None, help="JSON object overriding thresholds")
    c.set_defaults(fn=_check)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.fn(args)
    except (ConfigError, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
