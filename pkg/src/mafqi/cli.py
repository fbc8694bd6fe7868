"""Command-line entry point: ``mafqi run | sweep | verify | matrix-game | stability``."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import harness, io, verification
from .distributions import uniform_distribution
from .env import MATRIX_GAME_PAYOFF, matrix_game_env, two_state_env
from .lvf import lvf_project

EXIT_OK, EXIT_ERROR, EXIT_DIVERGED = 0, 1, 2


def load_environment(spec: str):
    if spec == "two-state":
        return two_state_env(), None
    if spec == "matrix-game":
        return matrix_game_env(), None
    if spec.startswith("file:"):
        return io.load_env(spec[5:])
    raise ValueError(f"--env must be two-state, matrix-game or file:PATH, got {spec!r}")


def _dist_arg(spec: str):
    if spec.startswith("file:"):
        return io.load_dist(spec[5:])
    return spec


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--env", default="two-state", help="two-state, matrix-game or file:PATH (default: two-state)")
    p.add_argument("--operator", choices=harness.OPERATORS, default="lvf-closed-form")
    p.add_argument("--dist", default="uniform",
                   help="uniform, epsilon-greedy, eta or file:PATH (default: uniform)")
    p.add_argument("--on-policy", action="store_true", help="rebuild an epsilon-greedy distribution every iteration")
    p.add_argument("--gamma", type=float, default=None, help="override the environment discount")
    p.add_argument("--epsilon", type=float, default=1.0)
    p.add_argument("--eta", type=float, default=0.0)
    p.add_argument("--iters", type=int, default=300)
    p.add_argument("--tol", type=float, default=1e-8)
    p.add_argument("--k", type=float, default=10.0, help="divergence threshold in units of V_max")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--init", choices=("zeros", "random"), default="zeros")


def _config(args) -> harness.RunConfig:
    env, obs = load_environment(args.env)
    return harness.RunConfig(env=env, obs=obs, operator=args.operator, dist=_dist_arg(args.dist),
                             epsilon=args.epsilon, eta=args.eta, gamma=args.gamma, iters=args.iters,
                             tol=args.tol, k=args.k, seed=args.seed, init=args.init, on_policy=args.on_policy)


def cmd_run(args) -> int:
    log = harness.run(_config(args))
    last = log.last
    print(f"status={log.status} iterations={last.t} q_tot_inf_norm={last.q_tot_inf_norm:.6g} "
          f"threshold={log.threshold:.6g} greedy={list(last.greedy)} greedy_optimal={last.greedy_optimal}")
    if args.out:
        harness.emit_csv(log, args.out)
    if args.save_q:
        if isinstance(log.final_q, np.ndarray):
            io.save_joint_q(log.final_q, args.save_q)
        else:
            io.save_factored_q(log.final_q, args.save_q)
    return EXIT_DIVERGED if log.status == "diverged" else EXIT_OK


def _parse_values(text: str) -> list[float]:
    try:
        values = [float(v) for v in text.split(",") if v.strip()]
    except ValueError as e:
        raise ValueError(f"--values must be comma-separated numbers ({e})") from e
    if not values:
        raise ValueError("--values is empty")
    return values


def cmd_sweep(args) -> int:
    config = _config(args)
    if args.param == "epsilon" and args.dist != "epsilon-greedy":
        config = config.replace(on_policy=True)
    entries = harness.sweep(config, args.param, _parse_values(args.values))
    for row in harness.summary_rows(entries):
        print(",".join(row))
    if args.out:
        harness.emit_summary_csv(entries, args.out)
    if args.log_dir:
        d = Path(args.log_dir)
        d.mkdir(parents=True, exist_ok=True)
        for k, e in enumerate(entries):
            if e.log is not None:
                harness.emit_csv(e.log, d / f"{args.param}_{k:02d}.csv")
    return EXIT_ERROR if any(e.error for e in entries) else EXIT_OK


def cmd_verify(args) -> int:
    results = verification.run_all(seed=args.seed, names=args.suite or None)
    for r in results:
        print(r.line())
    if args.report:
        io.save_report({"suites": [{"name": r.name, "passed": r.passed, "seconds": r.seconds, **r.metrics}
                                   for r in results]}, args.report)
    return EXIT_OK if all(r.passed for r in results) else EXIT_ERROR


def _grid(title: str, mat: np.ndarray, fmt: str) -> str:
    labels = [f"A{k + 1}" for k in range(mat.shape[0])]
    lines = [title, "        " + "".join(f"{lab:>9}" for lab in labels)]
    for lab, row in zip(labels, mat):
        lines.append(f"{lab:>8}" + "".join(format(v, fmt).rjust(9) for v in row))
    return "\n".join(lines)


def cmd_matrix_game(args) -> int:
    env = matrix_game_env()
    dist = uniform_distribution(env)
    q = lvf_project(env, None, dist, env.reward)
    q_tot = q.q_tot()
    m = env.num_actions
    print("rows: agent 2 action, columns: agent 1 action")
    print(_grid("payoff", MATRIX_GAME_PAYOFF, ".0f"))
    print(_grid("LVF q_tot (uniform data)", io.joint_q_matrix(q_tot[0], m), ".2f"))
    for i, t in enumerate(q.tables):
        print(f"Q_{i + 1}: " + " ".join(f"{v:.2f}" for v in t[0]))
    if args.csv:
        io.write_joint_q_csv(q_tot, m, args.csv)
    return EXIT_OK


def cmd_stability(args) -> int:
    env, obs = load_environment(args.env)
    if args.gamma is not None:
        env = env.with_discount(args.gamma)
    rep = harness.stability_box_check(env, args.delta, args.epsilon, args.trials, args.seed, obs)
    print(f"in_box={rep.in_box}/{rep.trials} fraction={rep.fraction:.4f} policy_failures={rep.policy_failures} "
          f"worst_excursion={rep.worst_excursion:.6g}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mafqi", description="Factorized multi-agent fitted Q-iteration.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="iterate one operator and log every step")
    _add_run_flags(p)
    p.add_argument("--out", help="per-iteration CSV log")
    p.add_argument("--save-q", help="write the final value table as YAML")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="run one configuration over several parameter values")
    _add_run_flags(p)
    p.add_argument("--param", choices=harness.SWEEP_PARAMS, required=True,
                   help="epsilon sweeps run on-policy unless --dist epsilon-greedy is given")
    p.add_argument("--values", required=True, help="comma-separated values")
    p.add_argument("--out", help="summary CSV")
    p.add_argument("--log-dir", help="directory for per-value iteration CSVs")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("verify", help="run the numeric self-check suites")
    p.add_argument("--suite", action="append", choices=sorted(verification.SUITES))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--report", help="write results as YAML")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("matrix-game", help="print the 3x3 game payoff and its LVF projection")
    p.add_argument("--csv", help="write the projected joint values as a CSV grid")
    p.set_defaults(func=cmd_matrix_game)

    p = sub.add_parser("stability", help="one on-policy step from random points near the optimum")
    p.add_argument("--env", default="two-state")
    p.add_argument("--gamma", type=float, default=None)
    p.add_argument("--delta", type=float, default=0.05)
    p.add_argument("--epsilon", type=float, default=1e-4)
    p.add_argument("--trials", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_stability)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, OSError, FloatingPointError, RuntimeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
