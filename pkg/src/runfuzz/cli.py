"""Command line entry points: run / stats / analyze / showmap.

Exit codes: 0 clean, 2 when a campaign archived at least one crash,
1 for usage or parse errors.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from .coverage import classify_counts
from .critical import compute_critical_blocks
from .harness import ProgramFormatError, execute, load_program
from .icfg import compute_distances, map_target_weights, reachable_subgraph
from .scheduler import Campaign, CampaignConfig, CampaignError

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_CRASH_FOUND = 2

SEED_ENV_VAR = "RUNFUZZ_SEED"


class _Parser(argparse.ArgumentParser):
    """argparse exits with 2 on bad usage; this tool reserves 2 for crashes."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_ERROR, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="runfuzz", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", parents=[], help="run a fuzzing campaign")
    run_p.add_argument("program", help="program document (JSON)")
    run_p.add_argument("--targets", help="target list file (location [weight] per line)")
    run_p.add_argument("--output", required=True, help="campaign output directory")
    run_p.add_argument("--seeds", help="directory of initial inputs")
    run_p.add_argument("--config", help="JSON config file; flags win over file values")
    run_p.add_argument("--rng-seed", type=int, dest="rng_seed")
    run_p.add_argument("--max-execs", type=int, dest="max_execs")
    run_p.add_argument("--max-seconds", type=float, dest="max_seconds")
    run_p.add_argument("--max-cycles", type=int, dest="max_cycles")
    run_p.add_argument("--k", type=float, dest="k")
    run_p.add_argument("--epsilon", type=float, dest="epsilon")
    run_p.add_argument("--support-threshold", type=float, dest="support_threshold")
    run_p.add_argument("--confidence-threshold", type=float, dest="confidence_threshold")
    run_p.add_argument("--execs-per-seed", type=int, dest="execs_per_seed_baseline")
    run_p.add_argument("--step-limit", type=int, dest="step_limit")
    run_p.add_argument("--max-input-len", type=int, dest="max_input_len")
    run_p.add_argument("--no-diversity", action="store_true", default=None,
                       dest="no_diversity",
                       help="single global coverage map, no per-target maps")
    run_p.add_argument("--afl-energy", action="store_true", default=None,
                       dest="afl_energy",
                       help="score-proportional per-seed energy")
    run_p.add_argument("--no-cluster", action="store_true", default=None,
                       dest="no_cluster", help="one map per covered target")
    run_p.add_argument("--stop-on-crash", action="store_true", default=None,
                       dest="stop_on_crash")

    stats_p = sub.add_parser("stats", help="emit per-target report files")
    stats_p.add_argument("output", help="campaign output directory")

    an_p = sub.add_parser("analyze", help="dump distances / subgraph / critical blocks")
    an_p.add_argument("program")
    an_p.add_argument("--targets")
    an_p.add_argument("--distances", action="store_true")
    an_p.add_argument("--reachable", action="store_true")
    an_p.add_argument("--critical", metavar="COVERED_FILE",
                      help="file with one covered block name per line")

    sm_p = sub.add_parser("showmap", help="print edge id -> bucket for one input")
    sm_p.add_argument("program")
    sm_p.add_argument("--input", required=True)
    sm_p.add_argument("--step-limit", type=int, default=100_000)
    return parser


def _resolve_config(args) -> CampaignConfig:
    cfg = CampaignConfig()
    if args.config:
        try:
            doc = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ProgramFormatError(f"{args.config}: {exc}") from exc
        for key, value in doc.items():
            if not hasattr(cfg, key):
                raise ProgramFormatError(f"{args.config}: unknown config key {key!r}")
            setattr(cfg, key, value)
    for key in cfg.as_dict():
        value = getattr(args, key, None)
        if value is not None:
            setattr(cfg, key, value)
    env_seed = os.environ.get(SEED_ENV_VAR)
    if env_seed is not None:
        cfg.rng_seed = int(env_seed)
    return cfg


def _load_seed_dir(path: Path) -> list[bytes]:
    files = sorted(p for p in path.iterdir() if p.is_file())
    if not files:
        raise CampaignError(f"no seed files in {path}")
    return [p.read_bytes() for p in files]


def cmd_run(args) -> int:
    program = load_program(args.program, args.targets)
    cfg = _resolve_config(args)
    if cfg.max_execs is None and cfg.max_seconds is None and cfg.max_cycles is None:
        cfg.max_execs = 0  # zero budget: import the seeds and stop
    out = Path(args.output)
    if out.exists() and any(out.iterdir()):
        raise CampaignError(f"output directory {out} exists and is not empty")
    out.mkdir(parents=True, exist_ok=True)
    seeds = _load_seed_dir(Path(args.seeds)) if args.seeds else [bytes(16)]

    campaign = Campaign(program, cfg, out_dir=out)
    campaign.write_setup({"seeds": len(seeds), "targets": list(campaign.targets)})
    campaign.import_seeds(seeds)
    summary = campaign.run()
    print(json.dumps(summary, sort_keys=True))
    return EXIT_CRASH_FOUND if summary["crashes"] else EXIT_OK


def cmd_stats(args) -> int:
    out = Path(args.output)
    stats_path = out / "stats.jsonl"
    if not stats_path.is_file():
        print(f"runfuzz: no stats.jsonl under {out}", file=sys.stderr)
        return EXIT_ERROR
    records = [json.loads(line) for line in stats_path.read_text().splitlines()]
    if not records:
        print("runfuzz: stats.jsonl is empty", file=sys.stderr)
        return EXIT_ERROR

    final = records[-1]
    energy_rows = sorted(final["target_energy"].items(), key=lambda kv: (kv[1], kv[0]))
    energy_csv = out / "target_energy.csv"
    with open(energy_csv, "w") as fh:
        fh.write("target,energy\n")
        for target, value in energy_rows:
            fh.write(f"{target},{value!r}\n")

    diversity_csv = out / "target_diversity.csv"
    with open(diversity_csv, "w") as fh:
        fh.write("cycle,target,bits\n")
        for rec in records:
            for target in sorted(rec["target_diversity"]):
                fh.write(f"{rec['cycle']},{target},{rec['target_diversity'][target]}\n")

    print(energy_csv)
    print(diversity_csv)
    return EXIT_OK


def cmd_analyze(args) -> int:
    program = load_program(args.program, args.targets)
    targets = program.target_blocks
    show_all = not (args.distances or args.reachable or args.critical)

    if args.distances or show_all:
        table = compute_distances(program.icfg, targets)
        print("block,target,distance")
        for (block, target), d in sorted(table.items()):
            print(f"{block},{target},{d!r}")
    if args.reachable or show_all:
        order, dense = reachable_subgraph(program.icfg, targets)
        print("block,dense_id")
        for b in order:
            print(f"{b},{dense[b]}")
    if args.critical:
        covered = {
            line.strip() for line in Path(args.critical).read_text().splitlines()
            if line.strip()
        }
        print("target,block")
        for t in targets:
            for b in sorted(compute_critical_blocks(t, covered, program.icfg)):
                print(f"{t},{b}")
    # target weights are part of the analysis surface too
    if show_all:
        print("target,weight")
        for t, w in sorted(map_target_weights(program.target_spec).items()):
            print(f"{t},{w!r}")
    return EXIT_OK


def cmd_showmap(args) -> int:
    program = load_program(args.program)
    data = Path(args.input).read_bytes()
    result = execute(program, data, args.step_limit)
    classified = classify_counts(result.raw_counters)
    for eid in range(program.n_edges):
        if classified[eid]:
            print(f"{eid:06d}:{classified[eid]}")
    return EXIT_CRASH_FOUND if result.crashed else EXIT_OK


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="runfuzz: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "run":
            return cmd_run(args)
        if args.command == "stats":
            return cmd_stats(args)
        if args.command == "analyze":
            return cmd_analyze(args)
        return cmd_showmap(args)
    except (ProgramFormatError, CampaignError, OSError, ValueError) as exc:
        print(f"runfuzz: error: {exc}", file=sys.stderr)
        return EXIT_ERROR


def run_main() -> None:  # console_scripts shim
    sys.exit(main())


if __name__ == "__main__":
    run_main()
