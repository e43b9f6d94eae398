import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence

import numpy as np

from . import __version__
from .config import ScenarioConfig, load_scenario
from .exceptions import DependencyError, PropertyFailure, SdacError, SimulationError
from .facade import Facade
from .reports import RunManifest, plain, utc_now, write_compensators, write_csv, write_json, write_matrices

logger = logging.getLogger(__name__)

EXIT_CODES = """\
exit codes:
  0  success
  1  unexpected toolkit error
  2  configuration error (unreadable file, invalid field, unknown law)
  3  synthesis error (Riccati, Nehari, dimension mismatch)
  4  simulation error (divergence, step size, projection)
  5  property failure (a checked bound or identity did not hold)
  6  missing upstream artifact (run the named subcommand first)
"""
LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


class Run:
    """One subcommand invocation: scenario, facade, output directory and manifest."""

    def __init__(self, args: argparse.Namespace) -> None:
        scenario = load_scenario(args.config)
        if args.seed is not None:
            scenario = scenario.model_copy(update={"seed": args.seed})
        self.scenario: ScenarioConfig = scenario
        self.config_hash = scenario.config_hash()
        self.facade = Facade(scenario, threads=args.threads)
        self.out = Path(args.out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.manifest = RunManifest(
            config_hash=self.config_hash,
            tool_version=__version__,
            subcommand=args.command,
            started_at=utc_now(),
        )

    def json(self, name: str, payload: Dict[str, Any]) -> None:
        write_json(self.out / name, payload, self.config_hash)
        self.manifest.outputs.append(name)

    def csv(self, name: str, columns: Sequence[str], rows: np.ndarray) -> None:
        write_csv(self.out / name, columns, rows, self.config_hash)
        self.manifest.outputs.append(name)

    def finish(self) -> None:
        self.manifest.finished_at = utc_now()
        self.manifest.write(self.out)
        self.manifest.validate(self.out)


def cmd_synthesize(args: argparse.Namespace) -> int:
    run = Run(args)
    syn = run.facade.synthesize()
    sol = syn.riccati
    run.json("synthesis.json", syn.to_dict())
    write_matrices(
        run.out / "plant.txt",
        {
            "A": sol.system.A,
            "B": sol.system.B,
            "C": sol.system.C,
            "R": sol.R,
            "Pi": sol.Pi,
            "K": sol.K,
            "A_m": sol.A_m,
            "W_o": syn.gramian.W,
        },
        run.config_hash,
    )
    run.manifest.outputs.append("plant.txt")
    _write_compensators(run)
    run.finish()

    print(f"Pi: {plain(sol.Pi)}")
    print(f"CARE residual: {sol.residual_norm!r}")
    print(f"decay certificate: M={syn.decay.M!r} beta={syn.decay.beta!r}")
    print(f"Hankel norm: {syn.bound.hankel_norm!r}  S: {syn.bound.S!r}")
    return 0


def _write_compensators(run: Run) -> None:
    syn = run.facade.synthesize()
    approximants = {"unconstrained": syn.unconstrained}
    if syn.constrained is not None:
        approximants["constrained"] = syn.constrained
    write_compensators(run.out / "compensator.toml", approximants, run.config_hash)
    run.manifest.outputs.append("compensator.toml")


def cmd_nehari(args: argparse.Namespace) -> int:
    run = Run(args)
    report = run.facade.nehari()
    run.json("nehari.json", report.to_dict())
    _write_compensators(run)
    run.finish()

    syn = report.synthesis
    print(f"sigma_1: {syn.unconstrained.optimal_error!r}")
    print(f"achieved error: {syn.unconstrained.achieved_error!r}")
    if syn.constrained is not None:
        print(f"constrained achieved error: {syn.constrained.achieved_error!r}")
    return 0


def cmd_simulate(args: argparse.Namespace) -> int:
    run = Run(args)
    try:
        result = run.facade.simulate()
    except SimulationError as e:
        run.json("divergence.json", e.to_dict())
        run.finish()
        raise
    names, rows = result.trajectory.columns()
    run.csv("trajectory.csv", names, rows)
    run.json("cost.json", result.to_dict())
    run.finish()

    print(f"law: {result.law.kind.value}")
    print(f"J: {result.cost.J!r}")
    print(f"final tracking error: {result.final_tracking_error!r}")
    return 0


def cmd_benchmark(args: argparse.Namespace) -> int:
    run = Run(args)
    result = run.facade.benchmark()
    run.json("benchmark.json", result.to_dict())
    if result.gaps:
        times = result.gaps[0].report.times
        columns = ["t"] + [f"{entry.law}_vs_{entry.against}" for entry in result.gaps]
        curves = np.column_stack([times] + [entry.report.gap_norm for entry in result.gaps])
        run.csv("gaps.csv", columns, curves)
    if result.cost_gap_draws:
        columns = ["draw", "seed", "sigma_l2", "J1", "J2", "gap", "bound", "satisfied"]
        table = np.array([[row[name] for name in columns] for row in result.cost_gap_draws])
        run.csv("cost_gap.csv", columns, table)
    run.finish()

    for name, law_run in result.runs.items():
        print(f"{name}: J={law_run.cost.J!r}")
    for entry in result.gaps:
        print(
            f"{entry.law} vs {entry.against}: rate={entry.report.fitted_decay_rate!r} "
            f"(beta={entry.beta!r}) final={entry.report.final_gap!r}"
        )
    if result.violations:
        raise PropertyFailure(
            f"cost gap bound violated in {result.violations} of {len(result.cost_gap_draws)} draws",
            code="cost_gap_bound",
            detail={"violations": result.violations},
        )
    return 0


def cmd_check_small_gain(args: argparse.Namespace) -> int:
    run = Run(args)
    artifact = run.out / "synthesis.json"
    if not artifact.is_file():
        raise DependencyError(
            f"{artifact} not found; run 'sdac synthesize' first", code="missing_artifact"
        )
    synthesis = json.loads(artifact.read_text(encoding="utf-8"))
    if synthesis.get("config_hash") != run.config_hash:
        raise DependencyError(
            f"{artifact} was produced from another configuration; rerun 'sdac synthesize'",
            code="stale_artifact",
        )
    report = run.facade.check_small_gain(synthesis)
    run.json("small_gain.json", report.to_dict())
    run.finish()

    for key, value in report.to_dict().items():
        print(f"{key} = {value!r}")
    print("verdict: " + ("satisfied" if report.satisfied else "NOT satisfied"))
    return 0


COMMANDS: Dict[str, Callable[[argparse.Namespace], int]] = {
    "synthesize": cmd_synthesize,
    "simulate": cmd_simulate,
    "benchmark": cmd_benchmark,
    "nehari": cmd_nehari,
    "check-small-gain": cmd_check_small_gain,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="scenario TOML file")
    common.add_argument("--out", default="out", help="output directory (default: out)")
    common.add_argument("--threads", type=int, default=1, help="worker threads for independent runs")
    common.add_argument("--seed", type=int, default=None, help="override the scenario seed")
    common.add_argument("-v", "--verbose", action="count", default=0, help="-v for INFO, -vv for DEBUG")

    parser = argparse.ArgumentParser(
        prog="sdac",
        description="Synthesis, simulation and bound checks for sub-optimal dyadic adaptive control.",
        epilog=EXIT_CODES,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    subparsers = parser.add_subparsers(dest="command", required=True)
    helps = {
        "synthesize": "solve the Riccati equation, Gramians and both compensators",
        "simulate": "run the closed loop and write the trajectory and its cost",
        "benchmark": "compare control laws and check the compensator cost bound",
        "nehari": "compute and export the causal compensators",
        "check-small-gain": "evaluate the small-gain condition from synthesize output",
    }
    for name, text in helps.items():
        subparsers.add_parser(
            name,
            parents=[common],
            help=text,
            epilog=EXIT_CODES,
            formatter_class=argparse.RawDescriptionHelpFormatter,
        )
    return parser


def configure_logging(verbosity: int) -> None:
    level = logging.WARNING if verbosity <= 0 else logging.INFO if verbosity == 1 else logging.DEBUG
    logging.basicConfig(level=level, format=LOG_FORMAT)


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging(args.verbose)
    try:
        return COMMANDS[args.command](args)
    except SdacError as e:
        logger.debug(f"{args.command} failed: {e.to_dict()}")
        print(f"error [{e.code or type(e).__name__}]: {e.message}", file=sys.stderr)
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
