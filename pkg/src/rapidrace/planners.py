"""Receding-horizon planners: RAPID, reactive MPC and iterative best response."""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .dynamics import get_model, rollout
from .errors import ConfigurationError
from .game import GameConfig
from .optimizer import CONVERGED, MAX_ITER, RaceOcp, SolverConfig, best_response, joint_ocp, solve_ocp

RAPID = "rapid"
REACTIVE_MPC = "reactive_mpc"
IBR = "ibr"


@dataclass
class PlannerSpec:
    """Planner choice plus its parameters, as written in race configs."""

    planner: str = RAPID
    alpha_active: float = 1.0
    alpha_inactive: float = 0.05
    D: float = 4.0
    max_rounds: int = 10
    tol: float = 1e-4
    # extra clearance added to d_min inside this planner's constraints
    safety_margin: float = 0.0

    def __post_init__(self):
        if self.planner not in (RAPID, REACTIVE_MPC, IBR):
            raise ConfigurationError(f"unknown planner {self.planner!r}")
        if min(self.alpha_active, self.alpha_inactive, self.safety_margin) < 0:
            raise ConfigurationError("alphas and safety_margin must be non-negative")
        if self.D <= 0 or self.max_rounds < 1 or self.tol <= 0:
            raise ConfigurationError("D, max_rounds and tol must be positive")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        if isinstance(data, str):
            return cls(planner=data)
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigurationError(f"unknown planner fields {sorted(unknown)}")
        return cls(**data)


@dataclass
class Plan:
    controls: np.ndarray  # (T, m) for the planning agent
    predicted_trajectory: object
    solve_time: float
    solver_status: str
    alpha_used: float | None = None
    rounds: int = 0
    joint_controls: np.ndarray | None = None
    inner_iterations: int = 0
    # per outer solver iteration: iter, objective, violation, stationarity
    iterates: list = field(default_factory=list, repr=False)
    extras: dict = field(default_factory=dict, repr=False)

    @property
    def first_control(self):
        return self.controls[0]


def shift_controls(controls):
    """Receding-horizon warm start: drop the first step, repeat the last."""
    u = np.asarray(controls, dtype=float)
    return np.concatenate([u[1:], u[-1:]], axis=0)


def select_alpha(cfg: GameConfig, params: PlannerSpec, current_states, ego: int) -> float:
    """Adaptive aggressiveness: inactive weight when the summed squared
    distance to the others strictly exceeds ``(N-1) * D``."""
    if cfg.N < 2:
        return params.alpha_inactive
    pos = np.asarray(current_states, dtype=float)[:, : get_model(cfg.model).position_dims]
    total = sum(float(np.sum((pos[ego] - pos[i]) ** 2)) for i in range(cfg.N) if i != ego)
    return params.alpha_inactive if total > (cfg.N - 1) * params.D else params.alpha_active


def rapid_plan(cfg, params, current_states, ego, warm_start=None, solver=None) -> Plan:
    """Solve the joint potential-minimisation problem for all agents and keep ego's row."""
    start = time.perf_counter()
    alpha = select_alpha(cfg, params, current_states, ego)
    problem = joint_ocp(cfg, current_states, alpha=alpha, d_min=cfg.d_min + params.safety_margin)
    sol = solve_ocp(problem, solver, None if warm_start is None else np.asarray(warm_start).ravel())
    return Plan(
        controls=sol.controls[:, ego].copy(),
        predicted_trajectory=sol.trajectory,
        solve_time=time.perf_counter() - start,
        solver_status=sol.status,
        alpha_used=alpha,
        joint_controls=sol.controls.copy(),
        inner_iterations=sol.iterations[1],
        iterates=sol.log,
    )


def constant_velocity_prediction(cfg, current_states, previous_states, ego):
    """Opponent positions ``(T+1, N-1, d)`` extrapolated at constant velocity."""
    d = get_model(cfg.model).position_dims
    cur = np.asarray(current_states, dtype=float)[:, :d]
    prev = cur if previous_states is None else np.asarray(previous_states, dtype=float)[:, :d]
    vel = (cur - prev) / cfg.dt
    others = [j for j in range(cfg.N) if j != ego]
    steps = np.arange(cfg.T + 1)[:, None, None] * cfg.dt
    return cur[others][None] + steps * vel[others][None]


def reactive_mpc_plan(cfg, current_states, previous_states, ego, warm_start=None, solver=None, params=None) -> Plan:
    """Maximise ego progress, treating opponents as constant-velocity obstacles."""
    start = time.perf_counter()
    margin = 0.0 if params is None else params.safety_margin
    obstacles = constant_velocity_prediction(cfg, current_states, previous_states, ego)
    x0 = np.asarray(current_states, dtype=float)[ego : ego + 1]
    problem = RaceOcp(cfg, x0, agents=[ego], obstacles=obstacles, alpha=0.0, d_min=cfg.d_min + margin)
    sol = solve_ocp(problem, solver, None if warm_start is None else np.asarray(warm_start).ravel())
    return Plan(
        controls=sol.controls[:, 0].copy(),
        predicted_trajectory=sol.trajectory,
        solve_time=time.perf_counter() - start,
        solver_status=sol.status,
        alpha_used=0.0,
        inner_iterations=sol.iterations[1],
        iterates=sol.log,
        extras={"obstacles": obstacles},
    )


def ibr_plan(cfg, current_states, ego, warm_start=None, solver=None, params=None) -> Plan:
    """Round-robin best responses (ego last) until controls stop changing.

    ``warm_start`` is a joint ``(T, N, m)`` control guess; zeros otherwise.
    """
    start = time.perf_counter()
    params = PlannerSpec(planner=IBR) if params is None else params
    x0 = np.asarray(current_states, dtype=float)
    d_min = cfg.d_min + params.safety_margin
    U = np.zeros((cfg.T, cfg.N, cfg.m)) if warm_start is None else np.array(warm_start, dtype=float)
    U = np.clip(U, cfg.u_min, cfg.u_max)
    X = rollout(x0, U, cfg.dt, cfg.model).states
    order = [j for j in range(cfg.N) if j != ego] + [ego]
    status = MAX_ITER
    rounds = 0
    inner = 0
    iterates = []
    for rounds in range(1, params.max_rounds + 1):
        change = 0.0
        for i in order:
            sol = best_response(cfg, i, X, solver, init=U[:, i], d_min=d_min)
            inner += sol.iterations[1]
            iterates += [dict(rec, round=rounds, responder=i) for rec in sol.log]
            change = max(change, float(np.max(np.abs(sol.controls[:, 0] - U[:, i]))))
            U[:, i] = sol.controls[:, 0]
            X[:, i] = sol.trajectory.states[:, 0]
        # a lone agent has nothing to respond to, so one pass is exact
        if change < params.tol or cfg.N == 1:
            status = CONVERGED
            break
    traj = rollout(x0, U, cfg.dt, cfg.model)
    return Plan(
        controls=U[:, ego].copy(),
        predicted_trajectory=traj,
        solve_time=time.perf_counter() - start,
        solver_status=status,
        alpha_used=cfg.alpha,
        rounds=rounds,
        joint_controls=U.copy(),
        inner_iterations=inner,
        iterates=iterates,
    )


class Planner:
    """Stateful receding-horizon wrapper holding one agent's warm start."""

    def __init__(self, spec: PlannerSpec, cfg: GameConfig, ego: int, solver: SolverConfig | None = None):
        self.spec = spec
        self.cfg = cfg
        self.ego = ego
        self.solver = SolverConfig() if solver is None else solver
        self._warm = None

    @property
    def name(self):
        return self.spec.planner

    def reset(self):
        self._warm = None

    def plan(self, current_states, previous_states=None) -> Plan:
        warm = self._warm if self.solver.warm_start else None
        kind = self.spec.planner
        if kind == RAPID:
            plan = rapid_plan(self.cfg, self.spec, current_states, self.ego, warm, self.solver)
        elif kind == REACTIVE_MPC:
            plan = reactive_mpc_plan(
                self.cfg, current_states, previous_states, self.ego, warm, self.solver, self.spec
            )
        else:
            plan = ibr_plan(self.cfg, current_states, self.ego, warm, self.solver, self.spec)
        keep = plan.joint_controls if plan.joint_controls is not None else plan.controls
        self._warm = shift_controls(keep)
        return plan


def make_planner(spec, cfg, ego, solver=None) -> Planner:
    if not isinstance(spec, PlannerSpec):
        spec = PlannerSpec.from_dict(spec)
    return Planner(spec, cfg, ego, solver)
