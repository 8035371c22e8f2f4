"""Benchmark orchestration: seeded starts, speed handicaps, statistics."""

from __future__ import annotations

import csv
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .errors import ConfigurationError
from .game import GameConfig
from .optimizer import SolverConfig
from .planners import PlannerSpec
from .sim import COLLISION, OFF_TRACK, RaceConfig, run_race
from .track import Track

# Reference mean +- std seconds per planning step from an IPOPT-based setup;
# carried in scaling reports as metadata, never compared against.
REFERENCE_SOLVE_TIMES = {
    "rapid": {2: (0.078, 0.046), 5: (0.229, 0.535), 10: (0.548, 0.400)},
    "ibr": {2: (0.217, 0.061), 5: (0.637, 0.110), 10: (1.456, 0.187)},
}


def sample_initial_positions(track: Track, N, gap_range=(1.0, 1.5), seed=0, d_min=0.3, max_tries=1000):
    """Dubins start states behind each other near the start line.

    Slot 0 sits on the start line and each further slot is placed ahead so
    the straight-line gap to the previous slot lies in ``gap_range``.
    Agents are then randomly assigned to slots.  Returns ``(N, 4)`` states
    with zero speed and headings along the local tangent.
    """
    lo, hi = gap_range
    if not 0 < lo <= hi < track.length:
        raise ConfigurationError(f"gap range {gap_range} is not inside (0, track length)")
    if N < 1:
        raise ConfigurationError("need at least one agent")
    rng = np.random.default_rng(seed)
    hw = track.half_width
    for _ in range(max_tries):
        lateral = rng.uniform(-0.5 * hw, 0.5 * hw, size=N)
        gaps = rng.uniform(lo, hi, size=N - 1)
        s = np.empty(N)
        s[0] = track.start_s
        pts = np.empty((N, 2))
        p0, _ = track.point_at(s[0])
        pts[0] = p0 + lateral[0] * track.normal_at(s[0])
        ok = True
        for k in range(1, N):
            # march forward along the centerline until the chord reaches the gap
            cand = s[k - 1] + np.linspace(0.0, 2.0 * hi, 801)[1:]
            cand = cand[cand <= track.length]
            if cand.size == 0:
                ok = False
                break
            c, _ = track.point_at(cand)
            q = c + lateral[k] * track.normal_at(cand)
            dist = np.linalg.norm(q - pts[k - 1], axis=1)
            idx = np.flatnonzero(dist >= gaps[k - 1])
            if idx.size == 0:
                ok = False
                break
            j = idx[0]
            s[k], pts[k] = cand[j], q[j]
        if not ok:
            continue
        _, lat, _, _ = track.project_many(pts)
        if np.any(lat > hw):
            continue
        if N > 1:
            diffs = np.linalg.norm(pts[:, None] - pts[None], axis=2)
            iu = np.triu_indices(N, 1)
            if np.min(diffs[iu]) < d_min:
                continue
            chords = np.linalg.norm(np.diff(pts, axis=0), axis=1)
            if np.any(chords < lo) or np.any(chords > hi):
                continue
        _, tan = track.point_at(s)
        heading = np.arctan2(tan[:, 1], tan[:, 0])
        slots = np.column_stack([pts, np.zeros(N), heading])
        order = rng.permutation(N)
        return slots[order]
    raise ConfigurationError(f"could not place {N} agents on the track after {max_tries} tries")


@dataclass
class BenchmarkSpec:
    track: str
    trials: int = 50
    seed: int = 0
    handicap: tuple | None = (2.4, 2.5)
    planners: list = field(default_factory=lambda: ["rapid", "ibr"])
    N: int = 2
    N_list: list = field(default_factory=lambda: [2, 4, 6])
    measured: str = "rapid"
    max_steps: int = 300
    gap_range: tuple = (1.0, 1.5)
    game: dict = field(default_factory=dict)
    solver: dict = field(default_factory=dict)
    output: str | None = None
    base_dir: str = "."

    def __post_init__(self):
        if self.trials < 1:
            raise ConfigurationError("trials must be at least 1")
        if self.handicap is not None:
            self.handicap = tuple(float(v) for v in self.handicap)
            if not self.handicap[0] < self.handicap[1]:
                raise ConfigurationError("leader v_max must be below trailer v_max")
        self.planners = [p if isinstance(p, PlannerSpec) else PlannerSpec.from_dict(p) for p in self.planners]

    def load_track(self):
        path = Path(self.track)
        if not path.is_absolute():
            path = Path(self.base_dir) / path
        return Track.load(path)

    def echo(self):
        return {
            "track": self.track,
            "trials": self.trials,
            "seed": self.seed,
            "handicap": None if self.handicap is None else list(self.handicap),
            "planners": [p.to_dict() for p in self.planners],
            "N": self.N,
            "N_list": list(self.N_list),
            "measured": self.measured,
            "max_steps": self.max_steps,
            "gap_range": list(self.gap_range),
            "game": self.game,
            "solver": self.solver,
        }

    @classmethod
    def from_dict(cls, data, base_dir="."):
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigurationError(f"unknown benchmark fields {sorted(unknown)}")
        return cls(**{"base_dir": str(base_dir), **data})

    @classmethod
    def load(cls, path):
        path = Path(path)
        with open(path) as fh:
            return cls.from_dict(json.load(fh), base_dir=path.parent)


def build_trial(spec: BenchmarkSpec, trial: int, N=None, planners=None) -> RaceConfig:
    """Seeded race for one trial; the agent starting furthest ahead gets the
    leader's (lower) speed cap."""
    N = spec.N if N is None else N
    planners = spec.planners if planners is None else planners
    track = spec.load_track()
    seed = spec.seed + trial
    game = GameConfig(N=N, track=track, track_source=spec.track, **spec.game)
    x0 = sample_initial_positions(track, N, spec.gap_range, seed, d_min=game.d_min)
    if spec.handicap is not None:
        s, _, _, _ = track.project_many(x0[:, :2])
        prog = track.progress_of_s(s)
        lead = int(np.argmax(prog))
        vmax = np.full(N, spec.handicap[1])
        vmax[lead] = spec.handicap[0]
        game = game.replace(v_max=vmax)
    return RaceConfig(
        game=game,
        planners=planners,
        initial_states=x0,
        max_steps=spec.max_steps,
        seed=seed,
        solver=SolverConfig.from_dict(spec.solver),
    )


def _trial_row(spec, trial, planner_factory=None):
    cfg = build_trial(spec, trial)
    planners = None if planner_factory is None else planner_factory(cfg)
    try:
        res = run_race(cfg, planners)
    except Exception as exc:  # recorded, not fatal
        return {"trial": trial, "seed": cfg.seed, "aborted": True, "error": f"{type(exc).__name__}: {exc}"}
    N = cfg.game.N
    start_prog = res.progress[0]
    return {
        "trial": trial,
        "seed": cfg.seed,
        "aborted": res.error is not None,
        "error": res.error,
        "steps": res.steps,
        "winner": res.winner,
        "tie_break": res.tie_break,
        "leader": int(np.argmax(start_prog)),
        "v_max": cfg.game.v_max.tolist(),
        "start_progress": start_prog.tolist(),
        "final_progress": res.progress[-1].tolist(),
        "collisions": [res.count(COLLISION, i) for i in range(N)],
        "off_track": [res.count(OFF_TRACK, i) for i in range(N)],
        "solve_times": res.solve_times.T.tolist(),
    }


def _workers():
    try:
        cap = int(os.environ.get("RACE_THREADS", "1"))
    except ValueError:
        cap = 1
    return max(1, min(cap, os.cpu_count() or 1))


def _run_rows(spec, planner_factory=None):
    trials = range(spec.trials)
    workers = _workers()
    if workers == 1 or planner_factory is not None:
        return [_trial_row(spec, k, planner_factory) for k in trials]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_trial_row, [spec] * spec.trials, trials))


def summarize(spec: BenchmarkSpec, rows) -> dict:
    """Headline statistics recomputed purely from per-trial rows."""
    N = spec.N
    names = [p.planner for p in spec.planners]
    agents = []
    for i in range(N):
        samples = [t for r in rows if not r["aborted"] for t in r["solve_times"][i]]
        arr = np.array(samples, dtype=float)
        agents.append(
            {
                "agent": i,
                "planner": names[i],
                "wins": sum(1 for r in rows if not r["aborted"] and r["winner"] == i and r["tie_break"] != "index"),
                "mean_solve_time": float(arr.mean()) if arr.size else None,
                "std_solve_time": float(arr.std()) if arr.size else None,
                "collisions": sum(r["collisions"][i] for r in rows if not r["aborted"]),
                "off_track": sum(r["off_track"][i] for r in rows if not r["aborted"]),
            }
        )
    ties = sum(1 for r in rows if not r["aborted"] and r["tie_break"] == "index")
    unfinished = sum(1 for r in rows if r["aborted"] or r["winner"] is None)
    return {"agents": agents, "ties": ties, "unfinished": unfinished, "trials": len(rows)}


def run_benchmark(spec: BenchmarkSpec, planner_factory=None) -> dict:
    """Run ``spec.trials`` seeded races (seed + k) and aggregate.

    ``planner_factory(race_config) -> list of planners`` substitutes custom
    planners (used for stubs in tests).
    """
    if len(spec.planners) != spec.N:
        raise ConfigurationError(f"{len(spec.planners)} planners for N={spec.N}")
    rows = _run_rows(spec, planner_factory)
    report = {
        "version": __version__,
        "config": spec.echo(),
        "summary": summarize(spec, rows),
        "trials": rows,
    }
    if spec.output:
        write_report(report, spec.output)
    return report


def write_report(report, output):
    out = Path(output)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "report.json", "w") as fh:
        json.dump(report, fh, indent=1)
        fh.write("\n")
    if "trials" in report:
        with open(out / "trials.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["trial", "seed", "winner", "leader", "steps", "collisions", "off_track", "mean_solve_time"])
            for r in report["trials"]:
                if r["aborted"]:
                    w.writerow([r["trial"], r["seed"], "aborted", "", "", "", "", ""])
                    continue
                means = [repr(float(np.mean(t))) if t else "" for t in r["solve_times"]]
                w.writerow(
                    [
                        r["trial"],
                        r["seed"],
                        "" if r["winner"] is None else r["winner"],
                        r["leader"],
                        r["steps"],
                        ";".join(map(str, r["collisions"])),
                        ";".join(map(str, r["off_track"])),
                        ";".join(means),
                    ]
                )
    return out


def run_scaling(spec: BenchmarkSpec, measured=None, planner_factory=None) -> dict:
    """Per-N solve time of one measured planner (agent 0) racing N-1 reactive MPC agents.

    Each N runs ``spec.trials`` races of up to ``spec.max_steps`` steps.
    """
    measured = spec.measured if measured is None else measured
    measured_spec = next((p for p in spec.planners if p.planner == measured), PlannerSpec(planner=measured))
    table = []
    for N in spec.N_list:
        planners = [measured_spec] + [PlannerSpec(planner="reactive_mpc")] * (N - 1)
        samples = []
        rows = []
        for k in range(spec.trials):
            cfg = build_trial(spec, k, N=N, planners=planners)
            res = run_race(cfg, None if planner_factory is None else planner_factory(cfg))
            samples.extend(res.solve_times[:, 0].tolist())
            rows.append({"trial": k, "steps": res.steps, "solve_times": res.solve_times[:, 0].tolist()})
        arr = np.array(samples)
        ref = REFERENCE_SOLVE_TIMES.get(measured, {}).get(N)
        table.append(
            {
                "N": N,
                "planner": measured,
                "mean_solve_time": float(arr.mean()),
                "std_solve_time": float(arr.std()),
                "samples": int(arr.size),
                "reference_solve_time": None if ref is None else list(ref),
                "trials": rows,
            }
        )
    report = {"version": __version__, "config": spec.echo(), "measured": measured, "table": table}
    if spec.output:
        out = Path(spec.output)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / f"scaling_{measured}.json", "w") as fh:
            json.dump(report, fh, indent=1)
            fh.write("\n")
    return report


def run_verification_suite(seed=0, solver=None) -> dict:
    """Potential identity sweep, mutation fixture, gradient checks, micro-game
    oracles and Nash deviation gaps as one pass/fail report."""
    from .verify import run_all

    report = run_all(seed, solver)
    report["version"] = __version__
    return report


def write_verification(report, output):
    out = Path(output)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "verify.json"
    with open(path, "w") as fh:
        json.dump(report, fh, indent=1)
        fh.write("\n")
    return path
