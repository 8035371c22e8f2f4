"""Command line entry point: race, bench, scale, verify, track-info."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .errors import RaceError
from .harness import BenchmarkSpec, run_benchmark, run_scaling, run_verification_suite, write_verification
from .sim import RaceConfig, run_race, write_race_outputs
from .track import Track

log = logging.getLogger("rapidrace")

ITERATE_COLUMNS = ("step", "agent", "iter", "objective", "violation", "stationarity")


def _race(args):
    config = RaceConfig.load(args.config)
    sink = [] if args.dump_iterates else None
    result = run_race(config, iterate_sink=sink)
    out = write_race_outputs(config, result, args.out)
    if sink is not None:
        path = Path(args.dump_iterates)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=ITERATE_COLUMNS, extrasaction="ignore")
            w.writeheader()
            w.writerows(sink)
    print(f"steps {result.steps}  winner {result.winner}  collisions {result.count('collision')}"
          f"  off_track {result.count('off_track')}")
    print(f"wrote {out / 'result.json'} and {out / 'trajectory.csv'}")
    if result.error:
        print(f"planner error: {result.error}", file=sys.stderr)
        return 1
    return 0


def _with_output(spec, out):
    if out:
        spec.output = out
    return spec


def _bench(args):
    spec = _with_output(BenchmarkSpec.load(args.spec), args.out)
    report = run_benchmark(spec)
    summary = report["summary"]
    print(f"{'agent':>5} {'planner':>13} {'wins':>5} {'mean_t':>9} {'std_t':>9} {'coll':>5} {'off':>5}")
    for a in summary["agents"]:
        mean = "-" if a["mean_solve_time"] is None else f"{a['mean_solve_time']:.4f}"
        std = "-" if a["std_solve_time"] is None else f"{a['std_solve_time']:.4f}"
        print(f"{a['agent']:>5} {a['planner']:>13} {a['wins']:>5} {mean:>9} {std:>9} "
              f"{a['collisions']:>5} {a['off_track']:>5}")
    print(f"ties {summary['ties']}  unfinished {summary['unfinished']}  trials {summary['trials']}")
    aborted = [r for r in report["trials"] if r["aborted"]]
    for r in aborted:
        print(f"trial {r['trial']} aborted: {r['error']}", file=sys.stderr)
    return 1 if aborted else 0


def _scale(args):
    spec = _with_output(BenchmarkSpec.load(args.spec), args.out)
    measured = args.measured or [spec.measured]
    for name in measured:
        report = run_scaling(spec, measured=name)
        for row in report["table"]:
            ref = row["reference_solve_time"]
            ref_txt = "" if ref is None else f"  (reference {ref[0]:.3f} +- {ref[1]:.3f})"
            print(f"{name:>13} N={row['N']:<3} mean {row['mean_solve_time']:.4f}"
                  f" std {row['std_solve_time']:.4f} samples {row['samples']}{ref_txt}")
    return 0


def _verify(args):
    report = run_verification_suite(args.seed)
    for c in report["checks"]:
        flag = "PASS" if c["passed"] else "FAIL"
        print(f"{flag} {c['name']:<22} value {c['value']!s:<24} tolerance {c['tolerance']}")
    if args.out:
        path = write_verification(report, args.out)
        print(f"wrote {path}")
    return 0 if report["passed"] else 1


def _track_info(args):
    track = Track.load(args.track)
    lo = track.waypoints.min(axis=0)
    hi = track.waypoints.max(axis=0)
    print(f"name          {track.name or Path(args.track).stem}")
    print(f"segments      {len(track.seg_len)}")
    print(f"closed        {track.closed}")
    print(f"length        {track.length:.4f} m")
    print(f"start_s       {track.start_s:.4f} m")
    print(f"finish_s      {track.finish_s:.4f} m")
    print(f"race_distance {track.race_distance:.4f} m")
    print(f"half_width    {track.half_width:.4f} m")
    print(f"bounds        x [{lo[0]:.3f}, {hi[0]:.3f}]  y [{lo[1]:.3f}, {hi[1]:.3f}]")
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="rapidrace", description="Potential-game racing planners and benchmarks.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("--log-level", default="WARNING", help="python logging level (default WARNING)")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("race", help="run one race from a JSON config")
    r.add_argument("--config", required=True, help="race config JSON")
    r.add_argument("--out", required=True, help="output directory for result.json and trajectory.csv")
    r.add_argument("--dump-iterates", metavar="PATH", help="write per-iteration solver CSV here")
    r.set_defaults(func=_race)

    b = sub.add_parser("bench", help="seeded multi-trial benchmark")
    b.add_argument("--spec", required=True, help="benchmark spec JSON")
    b.add_argument("--out", help="override the spec's output directory")
    b.set_defaults(func=_bench)

    s = sub.add_parser("scale", help="solve time against the number of agents")
    s.add_argument("--spec", required=True, help="benchmark spec JSON with N_list")
    s.add_argument("--out", help="override the spec's output directory")
    s.add_argument("--measured", action="append", choices=["rapid", "ibr"],
                   help="planner to measure; repeatable (default: the spec's)")
    s.set_defaults(func=_scale)

    v = sub.add_parser("verify", help="equilibrium, gradient and oracle checks")
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--out", help="directory for verify.json")
    v.set_defaults(func=_verify)

    t = sub.add_parser("track-info", help="summarise a track file")
    t.add_argument("track", help="track JSON")
    t.set_defaults(func=_track_info)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (RaceError, OSError, json.JSONDecodeError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
