"""Receding-horizon race engine."""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .dynamics import DUBINS, Trajectory, get_model, step_joint
from .errors import ConfigurationError
from .game import GameConfig
from .optimizer import SolverConfig
from .planners import PlannerSpec, make_planner

log = logging.getLogger(__name__)

EPS_TRACK = 1e-3
COLLISION = "collision"
OFF_TRACK = "off_track"
FINISH = "finish"
ERROR = "error"


class Event(NamedTuple):
    step: int
    kind: str
    agents: tuple
    value: float

    def to_dict(self):
        return {"step": self.step, "kind": self.kind, "agents": list(self.agents), "value": self.value}


@dataclass
class RaceConfig:
    game: GameConfig
    planners: list
    initial_states: np.ndarray
    max_steps: int = 300
    seed: int = 0
    solver: SolverConfig = field(default_factory=SolverConfig)

    def __post_init__(self):
        self.planners = [p if isinstance(p, PlannerSpec) else PlannerSpec.from_dict(p) for p in self.planners]
        self.initial_states = np.asarray(self.initial_states, dtype=float)
        if len(self.planners) != self.game.N:
            raise ConfigurationError(f"{len(self.planners)} planners for {self.game.N} agents")
        if self.initial_states.shape != (self.game.N, self.game.n):
            raise ConfigurationError(
                f"initial_states must be ({self.game.N}, {self.game.n}), got {self.initial_states.shape}"
            )
        if self.max_steps < 1:
            raise ConfigurationError("max_steps must be at least 1")

    def to_dict(self):
        return {
            "game": self.game.to_dict(),
            "planners": [p.to_dict() for p in self.planners],
            "initial_states": self.initial_states.tolist(),
            "max_steps": self.max_steps,
            "seed": self.seed,
            "solver": self.solver.to_dict(),
        }

    @classmethod
    def from_dict(cls, data, base_dir="."):
        """Build from a JSON document; without ``initial_states`` the start
        grid is sampled from ``seed`` (gap range from ``gap_range``)."""
        from .harness import sample_initial_positions

        game = GameConfig.from_dict(data["game"], base_dir=base_dir)
        seed = int(data.get("seed", 0))
        init = data.get("initial_states")
        if init is None:
            gap = tuple(data.get("gap_range", (1.0, 1.5)))
            init = sample_initial_positions(game.track, game.N, gap, seed, d_min=game.d_min)
        return cls(
            game=game,
            planners=data["planners"],
            initial_states=init,
            max_steps=int(data.get("max_steps", 300)),
            seed=seed,
            solver=SolverConfig.from_dict(data.get("solver", {})),
        )

    @classmethod
    def load(cls, path):
        path = Path(path)
        with open(path) as fh:
            return cls.from_dict(json.load(fh), base_dir=path.parent)


@dataclass
class RaceResult:
    executed: Trajectory
    solve_times: np.ndarray  # (steps, N)
    events: list
    winner: int | None
    finish_step: list
    progress: np.ndarray  # (steps+1, N)
    alphas: np.ndarray  # (steps, N), nan for planners without one
    statuses: list
    tie_break: str | None = None
    error: str | None = None

    @property
    def steps(self):
        return self.executed.T

    def count(self, kind, agent=None):
        return sum(1 for e in self.events if e.kind == kind and (agent is None or agent in e.agents))

    def to_dict(self):
        return {
            "steps": self.steps,
            "winner": self.winner,
            "tie_break": self.tie_break,
            "finish_step": self.finish_step,
            "error": self.error,
            "events": [e.to_dict() for e in self.events],
            "states": self.executed.states.tolist(),
            "controls": self.executed.controls.tolist(),
            "progress": self.progress.tolist(),
            "alpha_used": [[None if np.isnan(a) else a for a in row] for row in self.alphas.tolist()],
            "solver_status": self.statuses,
            "solve_time": self.solve_times.tolist(),
        }

    def write_csv(self, path):
        """Per-step, per-agent rows: step, agent, the model's state and
        control fields, solve_time.  Controls and solve time are blank on
        the terminal row."""
        X, U = self.executed.states, self.executed.controls
        model = get_model(self.executed.model)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(csv_columns(model))
            for k in range(X.shape[0]):
                for i in range(X.shape[1]):
                    if k < U.shape[0]:
                        tail = [repr(float(v)) for v in U[k, i]] + [repr(float(self.solve_times[k, i]))]
                    else:
                        tail = [""] * (model.m + 1)
                    w.writerow([k, i] + [repr(float(v)) for v in X[k, i]] + tail)


def csv_columns(model=DUBINS):
    model = get_model(model)
    return ("step", "agent") + model.state_fields + model.control_fields + ("solve_time",)


def detect_events(cfg: GameConfig, state, progresses, step=0) -> list:
    """Collision, off-track and finish events for one joint state."""
    x = np.asarray(state, dtype=float)
    d = get_model(cfg.model).position_dims
    events = []
    for i in range(cfg.N):
        for j in range(i + 1, cfg.N):
            dist = float(np.linalg.norm(x[i, :d] - x[j, :d]))
            if dist < cfg.d_min:
                events.append(Event(step, COLLISION, (i, j), dist))
    _, lat, _, _ = cfg.track.project_many(x[:, :2])
    for i in range(cfg.N):
        excess = float(lat[i] - cfg.track.half_width)
        if excess > EPS_TRACK:
            events.append(Event(step, OFF_TRACK, (i,), excess))
    for i in range(cfg.N):
        if progresses[i] >= cfg.track.race_distance:
            events.append(Event(step, FINISH, (i,), float(progresses[i])))
    return events


def _progress(cfg, state):
    s, _, _, _ = cfg.track.project_many(np.asarray(state)[:, :2])
    return cfg.track.progress_of_s(s)


def pick_winner(finishers, progress, tol=1e-9):
    """First finisher; same step -> larger progress; still tied -> lower index.

    Progress values within ``tol`` count as equal.  Returns the winner and
    the rule that settled it.
    """
    if not finishers:
        return None, None
    if len(finishers) == 1:
        return finishers[0], None
    best = max(progress[i] for i in finishers)
    leaders = [i for i in finishers if progress[i] >= best - tol]
    if len(leaders) == 1:
        return leaders[0], "progress"
    return min(leaders), "index"


def run_race(config: RaceConfig, planners=None, iterate_sink=None) -> RaceResult:
    """Step every agent with its planner until someone finishes or time runs out.

    ``planners`` overrides the configured planners with any objects exposing
    ``plan(current_states, previous_states) -> Plan``.  A list passed as
    ``iterate_sink`` collects the solver's per-iteration records tagged with
    step and agent.
    """
    cfg = config.game
    if planners is None:
        planners = [make_planner(spec, cfg, i, config.solver) for i, spec in enumerate(config.planners)]
    x = config.initial_states.copy()
    init_events = detect_events(cfg, x, _progress(cfg, x), 0)
    if any(e.kind in (COLLISION, OFF_TRACK) for e in init_events):
        log.warning("race starts with violations: %s", init_events)

    states = [x]
    controls, times, alphas, statuses, events = [], [], [], [], []
    prev = None
    finishers = []
    error = None
    for step in range(config.max_steps):
        u = np.zeros((cfg.N, cfg.m))
        row_t = np.zeros(cfg.N)
        row_a = np.full(cfg.N, np.nan)
        row_s = []
        try:
            for i, planner in enumerate(planners):
                t0 = time.perf_counter()
                plan = planner.plan(x, prev)
                row_t[i] = time.perf_counter() - t0
                u[i] = plan.first_control
                if iterate_sink is not None:
                    iterate_sink.extend(dict(rec, step=step, agent=i) for rec in getattr(plan, "iterates", []))
                if plan.alpha_used is not None:
                    row_a[i] = plan.alpha_used
                row_s.append(plan.solver_status)
        except Exception as exc:  # planner hard failure aborts the race
            error = f"{type(exc).__name__}: {exc}"
            events.append(Event(step + 1, ERROR, (len(row_s),), float("nan")))
            break
        prev = x
        x = step_joint(x, u, cfg.dt, cfg.model)
        states.append(x)
        controls.append(u)
        times.append(row_t)
        alphas.append(row_a)
        statuses.append(row_s)
        prog = _progress(cfg, x)
        new = detect_events(cfg, x, prog, step + 1)
        events.extend(new)
        finishers = [e.agents[0] for e in new if e.kind == FINISH]
        if finishers:
            break

    X = np.array(states)
    U = np.array(controls).reshape(len(controls), cfg.N, cfg.m)
    progress = np.array([_progress(cfg, s) for s in X])
    winner, tie = pick_winner(finishers, progress[-1])
    finish_step = [len(controls) if i in finishers else None for i in range(cfg.N)]
    return RaceResult(
        executed=Trajectory(X, U, cfg.dt, cfg.model),
        solve_times=np.array(times).reshape(len(times), cfg.N),
        events=events,
        winner=winner,
        finish_step=finish_step,
        progress=progress,
        alphas=np.array(alphas).reshape(len(alphas), cfg.N),
        statuses=statuses,
        tie_break=tie,
        error=error,
    )


def write_race_outputs(config: RaceConfig, result: RaceResult, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    doc = {"config": config.to_dict(), "result": result.to_dict()}
    with open(out / "result.json", "w") as fh:
        json.dump(doc, fh, indent=1)
        fh.write("\n")
    result.write_csv(out / "trajectory.csv")
    return out
