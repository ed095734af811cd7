"""Command-line front end.

Subcommands
-----------
run         one scenario, writes error, clock and NEES CSVs
montecarlo  paired multi-mode campaign, writes per-trial metrics and the comparison table
selftest    oracle suites with measured errors
replay      re-runs a manifest and checks that every output is byte-identical

Exit codes: 0 success, 1 usage, 2 configuration, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
import tempfile
from pathlib import Path

import numpy as np

from . import eval as ev
from .ranging import write_transaction_log
from .selftest import run_all
from .sim import (
    MODES,
    ConfigError,
    NumericalError,
    ScenarioConfig,
    run_monte_carlo,
    run_world,
    simulate_world,
    summarize,
)
from .state import clock_rows_order, clock_state_indices, pose_index

EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_NUMERICAL = 0, 1, 2, 3
MANIFEST = "manifest.json"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


# ----------------------------------------------------------------------------
# output bookkeeping
# ----------------------------------------------------------------------------
def sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


class Outputs:
    """Collects every file written so that the manifest declares all of them."""

    def __init__(self, directory):
        self.dir = Path(directory)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.files: list = []

    def path(self, name: str) -> Path:
        self.files.append(name)
        return self.dir / name

    def checksums(self) -> dict:
        return {name: sha256(self.dir / name) for name in sorted(self.files)}

    def write_manifest(self, command: str, cfg: ScenarioConfig, extra: dict) -> dict:
        manifest = {
            "command": command,
            "config": cfg.to_dict(),
            "seed": cfg.seed,
            "mode": cfg.mode,
            "output_dir": str(self.dir),
            **extra,
            "outputs": self.checksums(),
        }
        with open(self.dir / MANIFEST, "w") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)
            fh.write("\n")
        return manifest


# ----------------------------------------------------------------------------
# config assembly
# ----------------------------------------------------------------------------
def build_config(args) -> ScenarioConfig:
    if args.config is not None:
        if not Path(args.config).is_file():
            raise ConfigError(f"config file {args.config!r} not found")
        base = ScenarioConfig.load(args.config).to_dict()
    else:
        base = ScenarioConfig().to_dict()
    overrides = {
        "mode": getattr(args, "mode", None),
        "seed": args.seed,
        "duration": args.duration,
        "drop_prob": args.drop_prob,
    }
    if isinstance(args.robots, int):
        overrides["n_robots"] = args.robots
    for key, value in overrides.items():
        if value is not None:
            base[key] = value
    return ScenarioConfig.from_dict(base)


def _check_finite(result) -> None:
    for name in ("pose_errors", "clock_errors", "stds", "nees"):
        if not np.all(np.isfinite(getattr(result, name))):
            raise NumericalError(f"non-finite values in {name} ({result.mode})")


# ----------------------------------------------------------------------------
# artifact writers
# ----------------------------------------------------------------------------
def write_run_artifacts(out: Outputs, world, result, prefix: str = "") -> None:
    """Error streams with 3-sigma bounds, NEES, transaction log and a summary."""
    n = result.n
    pose_stds = np.stack(
        [result.stds[:, pose_index(i) : pose_index(i) + 9] for i in range(1, n + 1)], axis=1
    )
    clock_stds = result.stds[:, clock_state_indices(n)].reshape(len(result.times), 2 * n + 1, 2)
    labels = [str(t) for t in clock_rows_order(n)]
    ev.write_pose_errors(out.path(f"{prefix}pose_errors.csv"), result.times, result.pose_errors, pose_stds)
    ev.write_clock_errors(out.path(f"{prefix}clock_errors.csv"), result.times, result.clock_errors, clock_stds, labels)
    ev.write_nees(out.path(f"{prefix}nees.csv"), result.times, ev.average_nees(result.nees[None, :], result.stds.shape[1]))
    s = summarize(result)
    rows = [
        [i + 1, s.position_rmse[i], s.attitude_rmse[i]] for i in range(n)
    ]
    ev.write_rows(out.path(f"{prefix}summary.csv"), ["robot", "position_rmse_m", "attitude_rmse_rad"], rows)
    if world is not None and not prefix:
        txs = [world.transactions[k] for k in sorted(world.transactions)]
        write_transaction_log(out.path("transactions.csv"), txs)


def write_trial_metrics(out: Outputs, campaigns: dict) -> None:
    """campaigns: {n_robots: {mode: [TrialSummary]}}."""
    rows = []
    for n_robots in sorted(campaigns):
        for mode, trials in campaigns[n_robots].items():
            for s in trials:
                for i in range(len(s.position_rmse)):
                    rows.append(
                        [n_robots, s.trial, mode, i + 1, s.position_rmse[i], s.attitude_rmse[i], s.clock_offset_rmse]
                    )
    header = ["n_robots", "trial", "mode", "robot", "position_rmse_m", "attitude_rmse_rad", "clock_offset_rmse_ns"]
    ev.write_rows(out.path("trials.csv"), header, rows)


def write_aggregates(out: Outputs, campaigns: dict, dt: float) -> None:
    rows = []
    agg = {}
    for n_robots in sorted(campaigns):
        agg[n_robots] = {}
        for mode, trials in campaigns[n_robots].items():
            pos = ev.armse([s.position_rmse for s in trials])
            att = ev.armse([s.attitude_rmse for s in trials])
            clk = float(np.mean([s.clock_offset_rmse for s in trials]))
            summary = ev.average_nees([s.nees for s in trials], trials[0].dim)
            agg[n_robots][mode] = pos
            rows.append([n_robots, mode, len(trials), pos, att, clk, summary.time_average(0.2)])
            times = np.arange(summary.mean.size) * dt
            ev.write_nees(out.path(f"nees_{n_robots}robots_{mode}.csv"), times, summary)
    header = ["n_robots", "mode", "trials", "position_armse_m", "attitude_armse_rad", "clock_offset_rmse_ns", "nees_per_dof_after_20pct"]
    ev.write_rows(out.path("aggregate.csv"), header, rows)
    full = {k: v for k, v in agg.items() if set(MODES) <= set(v)}
    if full:
        ev.write_table(out.path("table.csv"), ev.comparison_table(full))
    else:
        ev.write_rows(
            out.path("table.csv"),
            ["n_robots", "mode", "position_armse_m"],
            [[k, m, v] for k in sorted(agg) for m, v in agg[k].items()],
        )


# ----------------------------------------------------------------------------
# commands
# ----------------------------------------------------------------------------
def cmd_run(args) -> int:
    cfg = build_config(args)
    out = Outputs(args.out)
    world = simulate_world(cfg)
    result = run_world(world, cfg.mode)
    _check_finite(result)
    write_run_artifacts(out, world, result)
    out.write_manifest("run", cfg, {"trials": 1, "modes": [cfg.mode], "robots": [cfg.n_robots]})
    s = summarize(result)
    print(f"{cfg.mode}: position RMSE per neighbour [m] " + " ".join(f"{x:.3f}" for x in s.position_rmse))
    print(f"wrote {len(out.files)} files and {MANIFEST} to {out.dir}")
    return EXIT_OK


def cmd_montecarlo(args) -> int:
    if args.trials < 1:
        raise UsageError("--trials must be at least 1")
    robots = args.robots if isinstance(args.robots, list) else [args.robots]
    modes = tuple(args.mode) if args.mode else MODES
    base = build_config(argparse.Namespace(**{**vars(args), "mode": None, "robots": None}))
    out = Outputs(args.out)
    campaigns = {}
    for n_robots in robots if robots != [None] else [base.n_robots]:
        cfg = ScenarioConfig.from_dict({**base.to_dict(), "n_robots": n_robots})
        if args.trials == 1 and len(modes) == 1:
            world = simulate_world(cfg)
            result = run_world(world, modes[0])
            _check_finite(result)
            prefix = "" if len(robots) <= 1 else f"{n_robots}robots_"
            write_run_artifacts(out, world if not prefix else None, result, prefix)
            campaigns[n_robots] = {modes[0]: [summarize(result)]}
        else:
            campaigns[n_robots] = run_monte_carlo(cfg, args.trials, modes, workers=args.workers)
    write_trial_metrics(out, campaigns)
    write_aggregates(out, campaigns, base.dt)
    robots_used = sorted(campaigns)
    out.write_manifest(
        "montecarlo", base, {"trials": args.trials, "modes": list(modes), "robots": robots_used, "workers": 1}
    )
    for n_robots in robots_used:
        for mode, trials in campaigns[n_robots].items():
            print(f"{n_robots} robots, {mode}: position aRMSE {ev.armse([s.position_rmse for s in trials]):.3f} m")
    print(f"wrote {len(out.files)} files and {MANIFEST} to {out.dir}")
    return EXIT_OK


def cmd_selftest(args) -> int:
    results = run_all(quick=args.quick, fault=args.fault)
    for r in results:
        print(r.line())
    ok = all(r.passed for r in results)
    print("all suites passed" if ok else "some suites FAILED")
    return EXIT_OK if ok else EXIT_NUMERICAL


def cmd_replay(args) -> int:
    path = Path(args.manifest)
    if path.is_dir():
        path = path / MANIFEST
    if not path.is_file():
        raise ConfigError(f"manifest {str(path)!r} not found")
    with open(path) as fh:
        try:
            manifest = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"manifest is not valid JSON: {exc}") from exc
    cfg = ScenarioConfig.from_dict(manifest["config"])
    out_dir = args.out or str(path.parent / "replay")
    with tempfile.TemporaryDirectory() as tmp:
        cfg_path = Path(tmp) / "config.json"
        with open(cfg_path, "w") as fh:
            json.dump(cfg.to_dict(), fh)
        common = ["--config", str(cfg_path), "--out", out_dir]
        if manifest["command"] == "run":
            code = main(["run", *common])
        elif manifest["command"] == "montecarlo":
            argv = ["montecarlo", *common, "--trials", str(manifest["trials"]), "--robots"]
            argv += [str(r) for r in manifest["robots"]]
            for m in manifest["modes"]:
                argv += ["--mode", m]
            code = main(argv)
        else:
            raise ConfigError(f"unknown command {manifest['command']!r} in manifest")
    if code != EXIT_OK:
        return code
    with open(Path(out_dir) / MANIFEST) as fh:
        new = json.load(fh)["outputs"]
    old = manifest["outputs"]
    bad = sorted(k for k in set(old) | set(new) if old.get(k) != new.get(k))
    for name in sorted(old):
        print(f"{'same' if name not in bad else 'DIFFERENT'}  {name}")
    if bad:
        print(f"{len(bad)} outputs differ")
        return EXIT_NUMERICAL
    print("all outputs byte-identical")
    return EXIT_OK


# ----------------------------------------------------------------------------
def _add_scenario_flags(p, multi: bool) -> None:
    p.add_argument("--config", help="JSON file whose keys mirror ScenarioConfig")
    if multi:
        p.add_argument("--mode", choices=MODES, action="append", help="repeat for several modes (default: all)")
        p.add_argument("--robots", type=int, nargs="+", help="one or more robot counts")
    else:
        p.add_argument("--mode", choices=MODES)
        p.add_argument("--robots", type=int, help="number of robots including robot 0")
    p.add_argument("--seed", type=int)
    p.add_argument("--duration", type=float, help="[s]")
    p.add_argument("--drop-prob", type=float, dest="drop_prob")
    p.add_argument("--out", required=True, help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="uwbrel", description="Relative pose and clock estimation with UWB and preintegrated IMU.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True
    p = sub.add_parser("run", help="run one scenario")
    _add_scenario_flags(p, multi=False)
    p = sub.add_parser("montecarlo", help="paired Monte Carlo campaign")
    _add_scenario_flags(p, multi=True)
    p.add_argument("--trials", type=int, default=20)
    p.add_argument("--workers", type=int, default=1, help="parallel processes (results do not depend on it)")
    p = sub.add_parser("selftest", help="run the oracle suites")
    p.add_argument("--quick", action="store_true", help="smaller sample counts")
    p.add_argument("--fault", choices=["d-sign"], help="inject a known error to see a suite fail")
    p = sub.add_parser("replay", help="re-run a manifest and compare checksums")
    p.add_argument("manifest", help="manifest.json or the directory holding it")
    p.add_argument("--out", help="directory for the re-run (default: <manifest dir>/replay)")
    return parser


COMMANDS = {"run": cmd_run, "montecarlo": cmd_montecarlo, "selftest": cmd_selftest, "replay": cmd_replay}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"uwbrel: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        parser.print_usage(sys.stderr)
        print(f"uwbrel: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericalError, np.linalg.LinAlgError, FloatingPointError) as exc:
        print(f"uwbrel: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
