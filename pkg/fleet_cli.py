#!/usr/bin/env python3
"""
Command-line front end for the drone fleet energy simulator.

    python fleet_cli.py run example_scenario.conf --set threshold=50
    python fleet_cli.py sweep example_scenario.conf --axis threshold --values 30,50,70 --reps 3
    python fleet_cli.py verify --quick

Exit codes: 0 ok, 1 configuration error, 2 runtime error, 3 verification failure.
"""

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import List, Optional

from dotenv import load_dotenv
from pydantic import BaseModel

from event_engine import simulate
from fleet_metrics import SWEEP_AXES, aggregate, energy_breakdown, events_on_death_frame, summary_record, sweep
from fleet_model import FleetSimError
from scenario import ConfigError, Mode, ScenarioConfig, load_config
from verification import run_suite

__version__ = "0.1.0"

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_RUNTIME = 2
EXIT_VERIFY = 3

DEFAULT_OUTPUT_DIR = "results"
MODE_CHOICES = {
    "both": [Mode.LEADER_BASED, Mode.BASELINE],
    "leader_based": [Mode.LEADER_BASED],
    "baseline": [Mode.BASELINE],
}

logger = logging.getLogger("fleet_cli")


class SweepSpec(BaseModel):
    axis: str
    values: List[str]
    reps: int
    modes: List[Mode]
    workers: int = 1


class RunManifest(BaseModel):
    """Everything needed to regenerate the artifacts next to it."""

    command: str
    config_path: str
    config: ScenarioConfig
    tool_version: str = __version__
    base_seed: int
    output_dir: str
    sweep: Optional[SweepSpec] = None


class _Parser(argparse.ArgumentParser):
    # bad command-line values are configuration errors
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="fleet_cli", description="Leader-based energy management for clustered drone fleets")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--log-level", default=None,
                        help="DEBUG, INFO, WARNING (default: $DRONE_EMS_LOG_LEVEL or WARNING)")
    commands = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    run = commands.add_parser("run", help="run one scenario")
    run.add_argument("config", help="scenario file (key = value) or a manifest.json to replay")
    run.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
    run.add_argument("--out", help="output directory (default: $DRONE_EMS_OUTPUT_DIR or ./results)")
    run.add_argument("--events-on-death", action="store_true",
                     help="also write events_on_death.csv (processed events per drone at death)")

    sw = commands.add_parser("sweep", help="sweep thresholds, fleet sizes or modes")
    sw.add_argument("config", help="base scenario file")
    sw.add_argument("--axis", required=True, choices=SWEEP_AXES)
    sw.add_argument("--values", required=True, help="comma separated axis values")
    sw.add_argument("--reps", type=int, default=5)
    sw.add_argument("--modes", choices=sorted(MODE_CHOICES), default="both")
    sw.add_argument("--workers", type=int, default=1)
    sw.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
    sw.add_argument("--out", help="output directory (default: $DRONE_EMS_OUTPUT_DIR or ./results)")

    verify = commands.add_parser("verify", help="run the acceptance suite")
    verify.add_argument("--quick", action="store_true", help="smaller batteries and fewer repetitions")
    return parser


def _output_dir(arg: Optional[str]) -> Path:
    out = Path(arg or os.environ.get("DRONE_EMS_OUTPUT_DIR") or DEFAULT_OUTPUT_DIR)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_manifest(out: Path, manifest: RunManifest) -> None:
    (out / "manifest.json").write_text(manifest.model_dump_json(indent=2) + "\n", encoding="utf-8")


def cmd_run(args) -> int:
    config = load_config(args.config, args.set)
    out = _output_dir(args.out)
    print(f"Running {config.mode.value} scenario: {config.clusters} x {config.drones_per_cluster} drones, "
          f"T={config.threshold:g}, seed {config.seed}")

    trace = simulate(config)
    report = aggregate(trace)
    trace.to_csv(out / "trace.csv")
    trace.ledger.to_csv(out / "ledger.csv")
    summary = summary_record(report)
    summary.update(energy_breakdown(trace))
    summary.update(end_time=trace.end_time, completed=trace.completed, trace_hash=trace.hash())
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n", encoding="utf-8")
    if args.events_on_death:
        events_on_death_frame(report).to_csv(out / "events_on_death.csv", index=False)
    _write_manifest(out, RunManifest(command="run", config_path=str(args.config), config=config,
                                     base_seed=config.seed, output_dir=str(out)))

    if report.censored:
        print(f"⚠️  Stopped at tick {trace.end_time}; clusters {list(report.censored_clusters)} still alive")
    else:
        print(f"✅ Mean cluster lifetime {report.mean_cluster_lifetime:.1f} ticks, "
              f"{report.election_count} election messages, {report.drops} drops")
    print(f"💾 Results saved to {out}")
    return EXIT_OK


def _parse_values(text: str) -> List[str]:
    values = [v.strip() for v in text.split(",") if v.strip()]
    if not values:
        raise ConfigError("values", "empty axis list")
    return values


def cmd_sweep(args) -> int:
    config = load_config(args.config, args.set)
    values = _parse_values(args.values)
    modes = MODE_CHOICES[args.modes]
    out = _output_dir(args.out)
    print(f"Sweeping {args.axis} over {', '.join(values)} ({args.reps} reps, modes: {args.modes})")

    table = sweep(config, args.axis, values, args.reps, modes=modes, workers=args.workers)
    table.to_csv(out / "sweep.csv", index=False)
    spec = SweepSpec(axis=args.axis, values=values, reps=args.reps, modes=modes, workers=args.workers)
    _write_manifest(out, RunManifest(command="sweep", config_path=str(args.config), config=config,
                                     base_seed=config.seed, output_dir=str(out), sweep=spec))

    print(table.to_string(index=False))
    print(f"💾 Results saved to {out / 'sweep.csv'}")
    return EXIT_OK


def cmd_verify(args) -> int:
    results = run_suite(quick=args.quick)
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"\n❌ {len(failed)} of {len(results)} checks failed: {', '.join(failed)}")
        return EXIT_VERIFY
    print(f"\n✅ All {len(results)} checks passed")
    return EXIT_OK


COMMANDS = {"run": cmd_run, "sweep": cmd_sweep, "verify": cmd_verify}


def main(argv: Optional[List[str]] = None) -> int:
    load_dotenv()
    args = build_parser().parse_args(argv)
    level = (args.log_level or os.environ.get("DRONE_EMS_LOG_LEVEL") or "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")

    try:
        return COMMANDS[args.command](args)
    except ConfigError as e:
        print(f"❌ Config error in '{e.key}': {e.message}", file=sys.stderr)
        return EXIT_CONFIG
    except FleetSimError as e:
        logger.debug("Run failed", exc_info=True)
        print(f"❌ Simulation error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as e:
        logger.exception("Unexpected failure")
        print(f"❌ Error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
