"""Command-line front end: solve, verify, simulate, and export figure data.

Exit codes: 0 success, 2 validation failure (bad spec, bad config, failed
verification), 3 solver non-convergence, 4 I/O error, 5 artifact mismatch.
Artifacts embed the spec hash and the result-relevant configuration, so
repeated runs with the same inputs are byte-identical; execution-only
settings (output directory, thread count) do not enter artifacts.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import artifacts
from .artifacts import ArtifactMismatchError
from .belief import ProductBelief
from .finite_horizon import backward_solve
from .game import GameSpec, SpecFormatError, SpecValidationError, load_spec
from .grid import BeliefGrid, GridConfigError
from .infinite_horizon import residual, solve_fixed_point
from .simulator import belief_lattice, markov_chain_ensemble, sample_trajectory
from .stage import GridNonConvergence, SolverConfig
from .verifier import lemma4_check, run_deviation_suite

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_NONCONVERGENCE = 3
EXIT_IO = 4
EXIT_MISMATCH = 5

log = logging.getLogger("spbe")


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("spec", help="path to the game spec JSON file")
    p.add_argument("--out", default="out", help="output directory (default: out)")
    p.add_argument("--grid-step", type=float, default=0.02, dest="h")
    p.add_argument("--tol-v", type=float, default=1e-5,
                   help="sup-norm tolerance on (1-delta)-normalized value changes")
    p.add_argument("--tol-res", type=float, default=1e-3,
                   help="absolute tolerance on the final fixed-point residual")
    p.add_argument("--max-sweeps", type=int, default=2000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--symmetric", action="store_true",
                   help="restrict to the agent-symmetric equilibrium branch")
    p.add_argument("--threads", type=int, default=0,
                   help="worker hint; results are independent of this value")
    p.add_argument("-v", "--verbose", action="count", default=0)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="spbe",
        description="Belief-based equilibrium solver for dynamic games "
                    "with private types",
    )
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("solve", help="solve the stationary equilibrium")
    _add_common(p)

    p = sub.add_parser("solve-finite", help="finite-horizon backward recursion")
    _add_common(p)
    p.add_argument("--horizon", type=int, required=True)
    p.add_argument("--terminal", default="zero",
                   help="'zero' or a value_table.json for the terminal reward")

    p = sub.add_parser("verify", help="certify solved artifacts")
    _add_common(p)
    p.add_argument("--artifacts", default=None,
                   help="directory with solve artifacts (default: --out)")
    p.add_argument("--n-points", type=int, default=64)
    p.add_argument("--n-samples", type=int, default=1000)
    p.add_argument("--eps-dev", type=float, default=1e-3)
    p.add_argument("--lemma4-horizon", type=int, default=5)

    p = sub.add_parser("simulate", help="simulate equilibrium play")
    _add_common(p)
    p.add_argument("--artifacts", default=None)
    p.add_argument("--lattice", type=int, default=5,
                   help="initial beliefs per axis")
    p.add_argument("--seeds", type=int, default=40)
    p.add_argument("--horizon", type=int, default=11)
    p.add_argument("--threshold", type=float, default=0.95)
    p.add_argument("--dump", choices=("none", "first", "all"), default="first",
                   help="which trajectories to dump as CSV")

    p = sub.add_parser("export-surface", help="export a prescription surface")
    _add_common(p)
    p.add_argument("--artifacts", default=None)
    p.add_argument("--agent", type=int, required=True, help="1-based agent index")
    p.add_argument("--type", dest="type_label", required=True)
    p.add_argument("--action", dest="action_label", default=None,
                   help="action label to export (default: last action)")
    return ap


def _run_config(args) -> dict:
    """Result-relevant configuration embedded in artifacts."""
    cfg = {
        "command": args.command,
        "grid_step": args.h,
        "tol_V": args.tol_v,
        "tol_res": args.tol_res,
        "max_sweeps": args.max_sweeps,
        "seed": args.seed,
        "symmetric": bool(args.symmetric),
    }
    for key in ("horizon", "terminal", "n_points", "n_samples", "eps_dev",
                "lemma4_horizon", "lattice", "seeds", "threshold"):
        if hasattr(args, key):
            cfg[key] = getattr(args, key)
    return cfg


def _validate_args(args) -> None:
    if not (0.0 < args.h <= 0.5):
        raise GridConfigError(f"--grid-step must be in (0, 0.5], got {args.h}")
    if args.tol_v <= 0 or args.tol_res <= 0:
        raise GridConfigError("tolerances must be positive")
    if args.max_sweeps < 1:
        raise GridConfigError("--max-sweeps must be >= 1")


def _load(args) -> tuple[GameSpec, BeliefGrid, SolverConfig]:
    spec = load_spec(args.spec)
    grid = BeliefGrid.for_spec(spec, args.h)
    scfg = SolverConfig(symmetric=args.symmetric)
    if args.symmetric and not spec.is_symmetric():
        raise SpecValidationError(["--symmetric requested but the game is not "
                                   "symmetric under agent exchange"])
    return spec, grid, scfg


def cmd_solve(args) -> int:
    spec, grid, scfg = _load(args)
    report = solve_fixed_point(
        spec, grid, tol_V=args.tol_v, tol_res=args.tol_res,
        max_sweeps=args.max_sweeps, cfg=scfg,
    )
    files = artifacts.save_solution(args.out, spec, _run_config(args), report)
    log.info("artifacts: %s", ", ".join(files.values()))
    if not report.converged:
        log.warning("solve did not converge: residual=%.3g sweeps=%d",
                    report.residual, report.sweeps)
        return EXIT_NONCONVERGENCE
    log.info("converged in %d sweeps, residual %.3g", report.sweeps, report.residual)
    return EXIT_OK


def cmd_solve_finite(args) -> int:
    spec, grid, scfg = _load(args)
    if args.terminal == "zero":
        G = None
    else:
        G = artifacts.load_value_table(args.terminal, spec)
        if G.grid.shape != grid.shape:
            raise ArtifactMismatchError(
                "terminal value table grid does not match --grid-step"
            )
    sol = backward_solve(spec, args.horizon, G, grid, cfg=scfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    artifacts.write_json(
        out / "finite_solution.json",
        artifacts.finite_solution_doc(spec, _run_config(args), sol.values, sol.policies),
    )
    return EXIT_OK


def cmd_verify(args) -> int:
    spec, grid, scfg = _load(args)
    artdir = args.artifacts or args.out
    V, theta, solve_report = artifacts.load_solution(artdir, spec)
    checks: dict = {"spec_hash": spec.content_hash()}
    ok = True

    bad_entries = []
    for i, arr in enumerate(V.values):
        if not np.all(np.isfinite(arr)):
            p, x = np.unravel_index(int(np.argmax(~np.isfinite(arr))), arr.shape)
            bad_entries.append({"agent": i, "point": int(p), "type": int(x)})
    checks["finite_values"] = {"passed": not bad_entries, "bad_entries": bad_entries}
    ok &= not bad_entries

    if not bad_entries:
        res = residual(spec, V, theta)
        checks["residual"] = {"value": float(res), "tol": args.tol_res,
                              "passed": bool(res <= args.tol_res)}
        ok &= res <= args.tol_res

        slack = V.measured_interp_slack()
        tol_v_abs = args.tol_v / max(1.0 - spec.delta, 1e-12)
        bound = tol_v_abs + 10.0 * slack
        disc = lemma4_check(spec, V, args.lemma4_horizon, cfg=scfg, theta=theta)
        checks["finite_horizon_consistency"] = {
            "horizon": args.lemma4_horizon,
            "discrepancy": float(disc),
            "interp_slack": float(slack),
            "bound": float(bound),
            "passed": bool(disc <= bound),
        }
        ok &= disc <= bound

        suite = run_deviation_suite(
            spec, V, theta, n_points=args.n_points, n_samples=args.n_samples,
            seed=args.seed, eps_dev=args.eps_dev,
        )
        checks["deviation_suite"] = suite.to_dict()
        ok &= suite.all_passed

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    artifacts.write_json(out / "verify_report.json", {
        "kind": "verify_report",
        "spec_hash": spec.content_hash(),
        "config": _run_config(args),
        "passed": bool(ok),
        "checks": checks,
    })
    return EXIT_OK if ok else EXIT_VALIDATION


def cmd_simulate(args) -> int:
    spec, grid, scfg = _load(args)
    artdir = args.artifacts or args.out
    V, theta, solve_report = artifacts.load_solution(artdir, spec)
    beliefs = belief_lattice(spec, args.lattice)
    summary = markov_chain_ensemble(
        spec, theta, beliefs, n_seeds=args.seeds, horizon=args.horizon,
        threshold=args.threshold, seed=args.seed,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    artifacts.write_json(out / "learning_stats.json", {
        "kind": "learning_stats",
        "spec_hash": spec.content_hash(),
        "config": _run_config(args),
        **summary.to_dict(),
    })
    if args.dump != "none":
        n_dump = args.seeds if args.dump == "all" else 1
        for b_idx, pi_1 in enumerate(beliefs):
            for s_idx in range(n_dump):
                child = int(np.random.SeedSequence(
                    [int(args.seed), b_idx, s_idx]).generate_state(1)[0])
                traj = sample_trajectory(spec, theta, pi_1, "sample",
                                         horizon=args.horizon, seed=child)
                traj.dump_csv(out / f"trajectory_b{b_idx:03d}_s{s_idx:03d}.csv",
                              spec.type_labels)
    return EXIT_OK


def cmd_export_surface(args) -> int:
    spec, grid, scfg = _load(args)
    artdir = args.artifacts or args.out
    theta = artifacts.load_policy(Path(artdir) / "policy.json", spec)
    if theta.grid.n_axes != 2:
        raise SpecValidationError(
            ["surface export needs a two-axis belief grid (two two-type agents)"]
        )
    agent = args.agent - 1
    if not (0 <= agent < spec.n_agents):
        raise SpecValidationError([f"--agent must be in 1..{spec.n_agents}"])
    try:
        x = spec.type_labels[agent].index(args.type_label)
    except ValueError:
        raise SpecValidationError(
            [f"unknown type {args.type_label!r}; have {spec.type_labels[agent]}"]
        ) from None
    if args.action_label is None:
        a = spec.action_counts[agent] - 1
    else:
        try:
            a = spec.action_labels[agent].index(args.action_label)
        except ValueError:
            raise SpecValidationError(
                [f"unknown action {args.action_label!r}; "
                 f"have {spec.action_labels[agent]}"]
            ) from None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"surface_agent{args.agent}_type{args.type_label}.csv"
    coords = theta.grid.coords
    probs = theta.gammas[agent][:, x, a]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("pi1,pi2,gamma\n")
        for (c1, c2), g in zip(coords, probs):
            fh.write(f"{c1!r},{c2!r},{g!r}\n")
    log.info("wrote %s", path)
    return EXIT_OK


_COMMANDS = {
    "solve": cmd_solve,
    "solve-finite": cmd_solve_finite,
    "verify": cmd_verify,
    "simulate": cmd_simulate,
    "export-surface": cmd_export_surface,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(message)s",
                        stream=sys.stderr)
    try:
        _validate_args(args)
        return _COMMANDS[args.command](args)
    except (SpecFormatError, SpecValidationError, GridConfigError) as exc:
        log.error("%s", exc)
        return EXIT_VALIDATION
    except GridNonConvergence as exc:
        log.error("%s", exc)
        return EXIT_NONCONVERGENCE
    except ArtifactMismatchError as exc:
        log.error("%s", exc)
        return EXIT_MISMATCH
    except OSError as exc:
        log.error("%s", exc)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
