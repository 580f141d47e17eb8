"""Command-line front door: ``mmvlab <subcommand> --scenario ...``.

Exit codes: 0 all gates pass, 2 configuration error, 3 numerical error or
failed gate, 4 resource limit.  Reports are JSON with sorted keys, so equal
inputs give byte-identical files; wall-clock time goes to ``run_info.json``.
"""

from __future__ import annotations

import argparse
import json
import subprocess
import sys
import time
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .acceptance import run_all
from .applications import PortfolioScenario, ReinsuranceScenario, run_portfolio, run_reinsurance
from .bsde import h_residual_check, solve_scenario, write_bsde_csv
from .control import optimal_rules, robust_value, verify_saddle
from .duality import duality_report, mv_empirical
from .errors import ConfigError, Degenerate, DimensionMismatch, MMVLabError, ResourceLimit
from .io import load_scenario
from .model import ScenarioConfig, Tier
from .paths import generate_paths, simulate_state, write_paths_csv

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL, EXIT_RESOURCE = 0, 2, 3, 4
DUMP_PATHS = 20
SUBCOMMANDS = ("solve", "verify-saddle", "duality", "portfolio", "reinsurance", "selftest")


def version_string() -> str:
    """Package version plus ``git describe`` of the source tree when available."""
    here = Path(__file__).resolve().parent
    try:
        out = subprocess.run(["git", "describe", "--tags", "--always", "--dirty"], cwd=here,
                             capture_output=True, text=True, timeout=5)
    except (OSError, subprocess.SubprocessError):
        return f"v{__version__}"
    desc = out.stdout.strip()
    return f"v{__version__}+{desc}" if out.returncode == 0 and desc else f"v{__version__}"


def _jsonable(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"cannot serialise {type(obj).__name__}")


def _write_json(path: Path, payload: dict):
    path.write_text(json.dumps(payload, indent=2, sort_keys=True, default=_jsonable) + "\n")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mmvlab", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"mmvlab {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in SUBCOMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--scenario", required=name != "selftest",
                       help="scenario JSON file or preset name")
        p.add_argument("--paths", type=int, help="override the number of Monte Carlo paths")
        p.add_argument("--steps", type=int, help="override the number of time steps")
        p.add_argument("--seed", type=int, help="override the seed")
        p.add_argument("--out", default="mmvlab_out", help="output directory (default: mmvlab_out)")
        p.add_argument("--antithetic", action="store_true", help="antithetic Brownian increments")
        p.add_argument("--dump-paths", action="store_true", help="write sample optimal paths to paths.csv")
        p.add_argument("--dump-bsde", action="store_true", help="write the BSDE solution to bsde.csv")
        p.add_argument("--cross-check-measure", action="store_true",
                       help="re-simulate one probe under its own measure")
    return parser


def _header(args, cfg: Optional[ScenarioConfig], version: str) -> dict:
    head = {"command": args.command, "version": version, "scenario": args.scenario}
    if cfg is not None:
        head.update(seed=cfg.seed, n_paths=cfg.n_paths, steps=cfg.grid.steps)
    return head


def _dumps(args, cfg: ScenarioConfig, sol, out: Path):
    if args.dump_bsde:
        bundle = None if sol.model.tier is Tier.DETERMINISTIC else generate_paths(cfg).with_paths(DUMP_PATHS)
        write_bsde_csv(out / "bsde.csv", sol, bundle=bundle, max_paths=DUMP_PATHS)
    if args.dump_paths:
        control_rule, eta_rule, psi = optimal_rules(cfg, sol)
        bundle = generate_paths(cfg, antithetic=args.antithetic).with_paths(min(DUMP_PATHS, cfg.n_paths))
        sp = simulate_state(cfg.model, control_rule, bundle, cfg.x, eta=eta_rule, psi=psi, keep="all",
                            keep_controls=True)
        write_paths_csv(out / "paths.csv", cfg.grid, sp, max_paths=DUMP_PATHS)


def _solve(args, cfg, sol) -> dict:
    residual = h_residual_check(sol.h, generate_paths(cfg, antithetic=args.antithetic))
    floor = sol.y_floor_gate()
    return {"tier": sol.tier, "h0": sol.h.h0, "y0": sol.y.y0, "h0_se": sol.h.h0_se, "y0_se": sol.y.y0_se,
            "value": robust_value(sol.h.h0, sol.y.y0, cfg.x, cfg.theta), "diagnostics": sol.diagnostics(),
            "h_residual": residual, "y_floor": floor, "pass": bool(residual["pass"] and floor["pass"])}


def _duality(args, cfg, sol) -> dict:
    control_rule, eta_rule, psi = optimal_rules(cfg, sol)
    bundle = generate_paths(cfg, antithetic=args.antithetic)
    emp = mv_empirical(control_rule, cfg, bundle=bundle, eta=eta_rule, psi=psi)
    return duality_report(sol.h.h0, sol.y.y0, cfg.x, cfg.theta, empirical=emp).to_dict()


def _application(args, cfg, sol) -> dict:
    if cfg.model.source is None:
        raise ConfigError(f"{args.command} needs a market scenario", "/market")
    port = PortfolioScenario.from_model(cfg.model)
    if args.command == "portfolio":
        if cfg.jump is not None:
            raise ConfigError("portfolio scenarios carry no claims", "/jump")
        return run_portfolio(port, cfg, sol=sol, antithetic=args.antithetic)
    if cfg.jump is None:
        raise ConfigError("reinsurance scenarios need a claim model", "/jump")
    return run_reinsurance(ReinsuranceScenario(port, cfg.jump), cfg, sol=sol, antithetic=args.antithetic)


def _execute(args, out: Path, version: str) -> int:
    if args.command == "selftest":
        results = run_all(args.paths, echo=print)
        report = _header(args, None, version)
        report["criteria"] = [r.to_dict() for r in results]
        report["pass"] = all(r.passed for r in results)
        _write_json(out / "selftest.json", report)
        return EXIT_OK if report["pass"] else EXIT_NUMERICAL

    cfg = load_scenario(args.scenario, n_paths=args.paths, steps=args.steps, seed=args.seed)
    generate_paths(cfg)  # memory-budget check before any solve
    sol = solve_scenario(cfg, antithetic=args.antithetic)
    if args.command == "solve":
        body = _solve(args, cfg, sol)
    elif args.command == "verify-saddle":
        body = verify_saddle(cfg, sol, antithetic=args.antithetic, cross_check=args.cross_check_measure).to_dict()
    elif args.command == "duality":
        body = _duality(args, cfg, sol)
    else:
        body = _application(args, cfg, sol)
    report = _header(args, cfg, version)
    report["report"] = body
    report["pass"] = bool(body["pass"])
    name = args.command.replace("-", "_") + ".json"
    _write_json(out / name, report)
    _dumps(args, cfg, sol, out)
    print(f"{args.command}: {'PASS' if report['pass'] else 'FAIL'} -> {out / name}")
    return EXIT_OK if report["pass"] else EXIT_NUMERICAL


def exit_code(exc: MMVLabError) -> int:
    """Map a module error onto the documented exit-code table."""
    if isinstance(exc, (ConfigError, DimensionMismatch, Degenerate)):
        return EXIT_CONFIG
    if isinstance(exc, ResourceLimit):
        return EXIT_RESOURCE
    return EXIT_NUMERICAL


def main(argv: Optional[list] = None) -> int:
    args = build_parser().parse_args(argv)
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        print(f"error: output directory {out}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    version = version_string()
    t0 = time.perf_counter()
    try:
        code = _execute(args, out, version)
        error = None
    except MMVLabError as exc:
        code = exit_code(exc)
        pointer = getattr(exc, "pointer", None)
        error = {"type": type(exc).__name__, "message": str(exc), "pointer": pointer}
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
    info = {"command": args.command, "scenario": args.scenario, "version": version, "exit_code": code,
            "duration_seconds": round(time.perf_counter() - t0, 3), "error": error}
    _write_json(out / "run_info.json", info)
    return code


if __name__ == "__main__":
    sys.exit(main())
