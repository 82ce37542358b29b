"""Command-line entry point: ``aggdp <subcommand> [options]``.

Every run prints a resolved-config block, writes ``<subcommand>.json`` (and a
CSV table where one makes sense) to ``--out``, and exits with 0 on success,
2 on invalid input, and 3 on numerical failure. Failures print one line to
stderr starting with ``AGGDP-ERROR``.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .aggregation import (
    aggregation_policy_iteration,
    build_hard_aggregation,
    check_error_bound,
    extract_policy,
    lift_costs,
    random_partition,
    scheme_from_json_dict,
    solve_aggregate_vi,
)
from .discrete import (
    Scorer,
    fill_heuristic,
    from_json_dict as problem_from_json_dict,
    greedy_heuristic,
    rollout_solve,
    solve_by_aggregation,
)
from .errors import AggDPError, ConvergenceError, SingularSystemError
from .mdp import evaluate_policy, from_json_dict, policy_improve, random_mdp, solve_exact_vi
from .multistep import lambda_evaluate, solve_kstep
from .net import NetworkSpec, init_params, predict, save_network, train_incremental
from .pipeline import NetConfig, run_pi_with_nn_features
from .sim import hard_agg_qlearning, lstd0_evaluate, make_rng
from .ssp import chain_fixture, compare_and_emit

EXIT_OK, EXIT_INVALID, EXIT_NUMERIC = 0, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _read_json(path: str) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise UsageError(f"file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"malformed JSON in {path}: {exc.msg} at line {exc.lineno}") from None


def _int_list(text: str) -> list:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise UsageError(f"expected a comma-separated list of integers, got {text!r}") from None


def _policy(text: str | None, n: int) -> np.ndarray:
    if text is None:
        return np.zeros(n, dtype=int)
    mu = np.array(_int_list(text)) - 1
    if mu.shape != (n,):
        raise UsageError(f"policy needs {n} entries")
    return mu


def _one_based(mu) -> list:
    return [int(u) + 1 for u in mu]


def _load_mdp(args):
    return from_json_dict(_read_json(args.mdp))


def _load_scheme(args, n):
    return scheme_from_json_dict(_read_json(args.scheme), n)


def _stages_q(text: str):
    if text == "singleton":
        return "singleton"
    vals = _int_list(text)
    return vals[0] if len(vals) == 1 else vals


def _heuristics(text: str) -> list:
    table = {"fill-low": lambda: fill_heuristic("low"), "fill-high": lambda: fill_heuristic("high"), "greedy": greedy_heuristic}
    out = []
    for name in text.split(","):
        if name not in table:
            raise UsageError(f"unknown heuristic {name!r}; choose from {sorted(table)}")
        out.append(table[name]())
    return out


# ---------------------------------------------------------------- commands


def cmd_solve_exact(args):
    mdp = _load_mdp(args)
    res = solve_exact_vi(mdp, args.tol)
    mu = policy_improve(mdp, res.J)
    return {"J": res.J.tolist(), "policy": _one_based(mu), "iterations": res.iterations, "residual": res.residual}, None


def cmd_solve_aggregate(args):
    mdp = _load_mdp(args)
    scheme = _load_scheme(args, mdp.n)
    if args.lam is not None:
        mu = _policy(args.policy, mdp.n)
        sol = lambda_evaluate(mdp, scheme, mu, args.lam, args.tol)
        return {"r": sol.r.tolist(), "J_tilde": lift_costs(scheme, sol.r).tolist(), "iterations": sol.iterations}, None
    if args.k > 1:
        sol = solve_kstep(mdp, scheme, args.k, args.tol)
        r, extra = sol.r, {"J0": sol.J0.tolist()}
    else:
        sol = solve_aggregate_vi(mdp, scheme, args.tol)
        r, extra = sol.r, {}
    mu = extract_policy(mdp, scheme, r)
    return {"r": r.tolist(), "J_tilde": lift_costs(scheme, r).tolist(), "policy": _one_based(mu), "iterations": sol.iterations, **extra}, None


def cmd_pi_aggregate(args):
    mdp = _load_mdp(args)
    scheme = _load_scheme(args, mdp.n)
    res = aggregation_policy_iteration(mdp, scheme, _policy(args.policy, mdp.n))
    return {
        "policy": _one_based(res.policy),
        "r": res.r.tolist(),
        "trace": [r.tolist() for r in res.trace],
        "iterations": res.iterations,
    }, None


def cmd_lstd(args):
    mdp = _load_mdp(args)
    scheme = _load_scheme(args, mdp.n)
    mu = _policy(args.policy, mdp.n)
    res = lstd0_evaluate(mdp, scheme, mu, args.samples, args.sampling, seed=args.seed, streams=args.streams)
    return {"r": res.r.tolist(), "C": res.C.tolist(), "b": res.b.tolist(), "M": res.M}, None


def cmd_qlearn(args):
    mdp = _load_mdp(args)
    scheme = _load_scheme(args, mdp.n)
    res = hard_agg_qlearning(mdp, scheme, args.steps, args.stepsize, args.seed, warn=False)
    Q = [[None if not np.isfinite(x) else float(x) for x in row] for row in res.Q]
    return {
        "Q": Q,
        "cell_policy": _one_based(res.cell_policy),
        "policy": _one_based(res.policy),
        "visits": res.visits.tolist(),
        "note": "one control per cell: a coarser policy class than the original problem",
    }, None


def cmd_discrete_opt(args):
    problem = problem_from_json_dict(_read_json(args.problem))
    run = solve_by_aggregation(
        problem, _heuristics(args.heuristics), _stages_q(args.stages_q), args.lookahead, seed=args.seed
    )
    chosen = run.fortified if args.fortified else run.solution
    return {
        "solution": list(chosen.u),
        "G": chosen.G,
        "constructed": {"solution": list(run.solution.u), "G": run.solution.G},
        "fortified": {"solution": list(run.fortified.u), "G": run.fortified.G},
        "cells": run.cells,
        "r": [None if r is None else r.tolist() for r in run.r],
        "nearest_cell_fallbacks": run.fallbacks,
    }, None


def cmd_rollout(args):
    problem = problem_from_json_dict(_read_json(args.problem))
    scorer = Scorer(problem, _heuristics(args.heuristics))
    sol = rollout_solve(problem, scorer)
    base = [float(problem.cost(h(problem, ()))) for h in scorer.heuristics]
    return {"solution": list(sol.u), "G": sol.G, "heuristic_costs": base}, None


def cmd_ssp_bench(args):
    chain = chain_fixture(args.n, args.case)
    table = compare_and_emit(chain, _int_list(args.q_list), args.scoring, nested=not args.no_nested)
    return table.to_json_dict(), table.to_csv()


def cmd_train_net(args):
    mdp = _load_mdp(args)
    mu = _policy(args.policy, mdp.n)
    J = evaluate_policy(mdp, mu)
    spec = NetworkSpec(mdp.n, tuple(_int_list(args.layers)), args.sigma)
    res = train_incremental(spec, init_params(spec, args.seed), np.arange(mdp.n), J, args.epochs, args.step, args.seed, args.ridge)
    fit = predict(spec, res.params)
    Path(args.out, "network.json").write_text(save_network(spec, res.params) + "\n", encoding="utf-8")
    return {"losses": res.losses, "fit": fit.tolist(), "J_mu": J.tolist(), "sup_error": float(np.max(np.abs(fit - J)))}, None


def cmd_pi_nn(args):
    mdp = _load_mdp(args)
    q = "singleton" if args.q == "singleton" else int(args.q)
    cfg = NetConfig(tuple(_int_list(args.layers)), args.sigma, args.epochs, args.step, args.ridge)
    res = run_pi_with_nn_features(mdp, args.cycles, cfg, q, args.seed, noise=args.noise, freeze_features=args.freeze_features)
    reports = [r.to_json_dict() for r in res.reports]
    lines = ["cycle,aggregate_states,sup_diff,max_J_mu,max_J_next"]
    for r in res.reports:
        lines.append(f"{r.cycle},{r.q},{r.sup_diff!r},{float(r.J_mu.max())!r},{float(r.J_next.max())!r}")
    return {"policy": _one_based(res.policy), "cycles": reports}, "\n".join(lines) + "\n"


def _suite_instance(task):
    seed, n, q, alpha, k = task
    rng = make_rng(seed)
    mdp = random_mdp(n, 3, alpha, rng)
    scheme = build_hard_aggregation(random_partition(n, q, rng), n)
    J = solve_exact_vi(mdp, 1e-12).J
    r = solve_kstep(mdp, scheme, k, 1e-12).r if k > 1 else solve_aggregate_vi(mdp, scheme, 1e-12).r
    rep = check_error_bound(mdp, scheme, r, J, k=k)
    return {"seed": seed, "epsilon": rep.epsilon, "bound": rep.bound, "max_gap": rep.max_gap, "violations": len(rep.violations)}


def cmd_check_bounds(args):
    if args.suite:
        tasks = [(args.seed + s, args.n, args.q, args.alpha, args.k) for s in range(args.suite)]
        if args.jobs > 1:
            with ProcessPoolExecutor(args.jobs) as ex:
                rows = list(ex.map(_suite_instance, tasks))
        else:
            rows = [_suite_instance(t) for t in tasks]
        total = sum(r["violations"] for r in rows)
        return {"instances": rows, "total_violations": total, "ok": total == 0}, None
    if not args.mdp or not args.scheme:
        raise UsageError("check-bounds needs --mdp and --scheme, or --suite N")
    mdp = _load_mdp(args)
    scheme = _load_scheme(args, mdp.n)
    J = solve_exact_vi(mdp, 1e-12).J
    r = solve_kstep(mdp, scheme, args.k, 1e-12).r if args.k > 1 else solve_aggregate_vi(mdp, scheme, 1e-12).r
    rep = check_error_bound(mdp, scheme, r, J, k=args.k)
    return {
        "epsilon": rep.epsilon,
        "bound": rep.bound,
        "max_gap": rep.max_gap,
        "violations": [{"state": i + 1, "cell": l + 1, "excess": e} for i, l, e in rep.violations],
        "ok": rep.ok,
    }, None


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="aggdp", description="Aggregation-based approximate dynamic programming.")
    p.add_argument("--version", action="version", version=f"aggdp {__version__}")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def add(name, func, help_text, mdp=False, scheme=False):
        s = sub.add_parser(name, help=help_text)
        s.set_defaults(func=func)
        s.add_argument("--out", default=".", help="output directory")
        s.add_argument("--seed", type=int, default=None, help="random seed (default: $AGGDP_SEED or 0)")
        s.add_argument("--jobs", type=int, default=1, help="worker processes for suites")
        if mdp:
            s.add_argument("--mdp", required=mdp is True, help="problem JSON")
        if scheme:
            s.add_argument("--scheme", required=scheme is True, help="aggregation scheme JSON")
        return s

    s = add("solve-exact", cmd_solve_exact, "value iteration on the original problem", mdp=True)
    s.add_argument("--tol", type=float, default=1e-10)

    s = add("solve-aggregate", cmd_solve_aggregate, "solve the aggregate problem", mdp=True, scheme=True)
    s.add_argument("--tol", type=float, default=1e-10)
    s.add_argument("--k", type=int, default=1, help="original transitions per aggregate step")
    s.add_argument("--lambda", dest="lam", type=float, default=None, help="lambda-aggregation evaluation of --policy")
    s.add_argument("--policy", default=None, help="1-based controls, comma separated")

    s = add("pi-aggregate", cmd_pi_aggregate, "policy iteration on the aggregate problem", mdp=True, scheme=True)
    s.add_argument("--policy", default=None)

    s = add("lstd", cmd_lstd, "simulation-based aggregate policy evaluation", mdp=True, scheme=True)
    s.add_argument("--policy", default=None)
    s.add_argument("--samples", type=int, default=10_000)
    s.add_argument("--sampling", choices=["state", "aggregate"], default="state")
    s.add_argument("--streams", type=int, default=1, help="independent sample streams")

    s = add("qlearn", cmd_qlearn, "Q-learning over (cell, control) pairs", mdp=True, scheme=True)
    s.add_argument("--steps", type=int, default=10_000)
    s.add_argument("--stepsize", default="harmonic", help="'harmonic' or 'const:<g>'")

    s = add("discrete-opt", cmd_discrete_opt, "stage-aggregation solve of a discrete problem")
    s.add_argument("--problem", required=True)
    s.add_argument("--stages-q", default="singleton", help="'singleton', an int, or a per-stage list")
    s.add_argument("--lookahead", type=int, choices=[1, 2], default=1)
    s.add_argument("--fortified", action="store_true")
    s.add_argument("--heuristics", default="fill-low")

    s = add("rollout", cmd_rollout, "rollout with heuristic completions")
    s.add_argument("--problem", required=True)
    s.add_argument("--heuristics", default="greedy")

    s = add("ssp-bench", cmd_ssp_bench, "chain benchmark table")
    s.add_argument("--n", type=int, default=50)
    s.add_argument("--case", choices=["a", "b"], default="a")
    s.add_argument("--q-list", default="1,2,5,10,50")
    s.add_argument("--scoring", choices=["V1", "V0", "J_mu"], default="V1")
    s.add_argument("--no-nested", action="store_true", help="independent equal-width cells per q")

    s = add("train-net", cmd_train_net, "fit a network to a policy's costs", mdp=True)
    s.add_argument("--policy", default=None)
    s.add_argument("--layers", default="4")
    s.add_argument("--sigma", choices=["tanh", "logistic", "softplus"], default="tanh")
    s.add_argument("--epochs", type=int, default=500)
    s.add_argument("--step", type=float, default=0.1)
    s.add_argument("--ridge", type=float, default=0.0)

    s = add("pi-nn", cmd_pi_nn, "policy iteration with network features", mdp=True)
    s.add_argument("--cycles", type=int, default=1)
    s.add_argument("--layers", default="4")
    s.add_argument("--sigma", choices=["tanh", "logistic", "softplus"], default="tanh")
    s.add_argument("--epochs", type=int, default=300)
    s.add_argument("--step", type=float, default=0.1)
    s.add_argument("--ridge", type=float, default=0.0)
    s.add_argument("--q", default="singleton")
    s.add_argument("--noise", type=float, default=0.0)
    s.add_argument("--freeze-features", action="store_true")

    s = add("check-bounds", cmd_check_bounds, "verify the aggregation error bound", mdp="optional", scheme="optional")
    s.add_argument("--k", type=int, default=1)
    s.add_argument("--suite", type=int, default=0, help="run on N seeded random instances instead")
    s.add_argument("--n", type=int, default=12)
    s.add_argument("--q", type=int, default=4)
    s.add_argument("--alpha", type=float, default=0.9)
    return p


def _resolve_seed(args) -> int:
    if args.seed is not None:
        return args.seed
    env = os.environ.get("AGGDP_SEED")
    if env is None:
        return 0
    try:
        return int(env)
    except ValueError:
        raise UsageError(f"AGGDP_SEED must be an integer, got {env!r}") from None


def _fail(code: int, exc: BaseException) -> int:
    msg = " ".join(str(exc).split())
    print(f"AGGDP-ERROR code={code} kind={type(exc).__name__} msg={msg}", file=sys.stderr)
    return code


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("a subcommand is required")
        args.seed = _resolve_seed(args)
        if args.jobs < 1:
            raise UsageError("--jobs must be at least 1")
        config = {k: v for k, v in sorted(vars(args).items()) if k != "func"}
        print("[config]")
        for k, v in config.items():
            print(f"{k} = {v}")
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        result, table = args.func(args)
    except (UsageError, AggDPError, ValueError) as exc:
        if isinstance(exc, (ConvergenceError, SingularSystemError)):
            return _fail(EXIT_NUMERIC, exc)
        return _fail(EXIT_INVALID, exc)
    except FloatingPointError as exc:
        return _fail(EXIT_NUMERIC, exc)
    doc = {"tool": "aggdp", "version": __version__, "command": args.command, "seed": args.seed, "config": config, "result": result}
    (out / f"{args.command}.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    if table is not None:
        (out / f"{args.command}.csv").write_text(table, encoding="utf-8")
    print(f"wrote {out / (args.command + '.json')}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
