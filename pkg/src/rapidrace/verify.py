"""Executable equilibrium and solver checks.

Each check returns a :class:`CheckResult`; ``run_all`` bundles them into the
report used by the ``verify`` command.  Timing lives under keys ending in
``_time`` so determinism comparisons can drop it.
"""

from __future__ import annotations

import itertools
import time
from dataclasses import dataclass, field

import numpy as np

from .dynamics import DUBINS, INTEGRATOR3D, Trajectory, get_model, rollout
from .game import (
    GameConfig,
    ShootingTerms,
    agent_cost,
    check_potential_identity,
    nash_deviation_gap,
    potential,
)
from .optimizer import SolverConfig, joint_ocp, solve_ocp
from .track import Track, straight_track, u_course

IDENTITY_TOL = 1e-9
GRADIENT_TOL = 1e-5
NASH_TOL = 1e-3


@dataclass
class CheckResult:
    name: str
    passed: bool
    value: float
    tolerance: float
    details: dict = field(default_factory=dict)
    run_time: float = 0.0

    def to_dict(self):
        return {
            "name": self.name,
            "passed": bool(self.passed),
            "value": _num(self.value),
            "tolerance": _num(self.tolerance),
            "details": self.details,
            "run_time": self.run_time,
        }


def _num(x):
    x = float(x)
    if np.isfinite(x):
        return x
    return "inf" if x > 0 else ("-inf" if x < 0 else "nan")


def _timed(fn):
    def wrapper(*args, **kwargs):
        t0 = time.perf_counter()
        res = fn(*args, **kwargs)
        res.run_time = time.perf_counter() - t0
        return res

    wrapper.__name__ = fn.__name__
    wrapper.__doc__ = fn.__doc__
    return wrapper


def mis_signed_potential(cfg, traj, alpha=None):
    """Potential with the proximity sign flipped: the mutation fixture."""
    alpha = cfg.alpha if alpha is None else alpha
    return potential(cfg, traj, -alpha)


def random_states(track: Track, N, rng, model=DUBINS, speed=(0.0, 2.0)):
    """Agents scattered on the track with headings near the local tangent."""
    spec = get_model(model)
    s = rng.uniform(track.start_s, track.start_s + 0.8 * track.race_distance, size=N)
    c, tan = track.point_at(s)
    lat = rng.uniform(-0.5, 0.5, size=N) * track.half_width
    xy = c + lat[:, None] * track.normal_at(s)
    if spec.name == DUBINS:
        heading = np.arctan2(tan[:, 1], tan[:, 0]) + rng.uniform(-0.3, 0.3, size=N)
        return np.column_stack([xy, rng.uniform(*speed, size=N), heading])
    x = np.zeros((N, spec.n))
    x[:, :2] = xy
    x[:, 2] = rng.uniform(0.5, 1.5, size=N)
    x[:, 3:] = rng.uniform(-0.2, 0.2, size=(N, 3))
    return x


def random_controls(cfg: GameConfig, rng, N=None):
    N = cfg.N if N is None else N
    return rng.uniform(cfg.u_min, cfg.u_max, size=(cfg.T, N, cfg.m))


@_timed
def potential_identity_sweep(seed=0, n_deviations=1000, potential_fn=None, name="potential_identity"):
    """Seeded unilateral deviations over N in {2,3,5}, T in {1,5} and
    alpha in {0, 0.1, 1}; passes when every residual is within tolerance."""
    rng = np.random.default_rng(seed)
    track = u_course()
    grid = list(itertools.product((2, 3, 5), (1, 5), (0.0, 0.1, 1.0)))
    worst = 0.0
    per_alpha = {}
    for k in range(n_deviations):
        N, T, alpha = grid[k % len(grid)]
        model = INTEGRATOR3D if k % 7 == 6 else DUBINS
        cfg = GameConfig(N=N, track=track, T=T, alpha=alpha, model=model)
        x0 = random_states(track, N, rng, model)
        U = random_controls(cfg, rng)
        i = int(rng.integers(N))
        V = U.copy()
        V[:, i] = random_controls(cfg, rng, 1)[:, 0]
        base = rollout(x0, U, cfg.dt, model)
        dev = rollout(x0, V, cfg.dt, model)
        res = check_potential_identity(cfg, base, dev, i, potential_fn=potential_fn)
        worst = max(worst, res)
        per_alpha[alpha] = max(per_alpha.get(alpha, 0.0), res)
    return CheckResult(
        name,
        worst <= IDENTITY_TOL,
        worst,
        IDENTITY_TOL,
        {"deviations": n_deviations, "max_residual_by_alpha": {str(a): v for a, v in sorted(per_alpha.items())}},
    )


@_timed
def mutation_check(seed=0, n_deviations=50):
    """The identity sweep must reject a potential with a mis-signed proximity term."""
    inner = potential_identity_sweep(seed, n_deviations, potential_fn=mis_signed_potential, name="mutant")
    caught = not inner.passed
    return CheckResult(
        "mutation_caught",
        caught,
        inner.value,
        IDENTITY_TOL,
        {"mutant_max_residual": inner.value, "deviations": n_deviations},
    )


def _rel_err(analytic, numeric):
    return float(np.max(np.abs(analytic - numeric)) / max(1.0, float(np.max(np.abs(numeric)))))


def _central_diff(fun, z, h):
    out = []
    for k in range(z.size):
        e = np.zeros_like(z)
        e[k] = h
        out.append((fun(z + e) - fun(z - e)) / (2.0 * h))
    return np.array(out)


@_timed
def gradient_check(seed=0, n_points=50, h=1e-6):
    """Analytic potential gradients and constraint Jacobians against central
    differences, with segment assignments frozen at the test point."""
    rng = np.random.default_rng(seed)
    track = u_course()
    worst_obj = worst_jac = 0.0
    for k in range(n_points):
        model = INTEGRATOR3D if k % 5 == 4 else DUBINS
        N = 2 + k % 2
        cfg = GameConfig(N=N, track=track, T=5, alpha=float(rng.choice([0.1, 1.0])), model=model)
        x0 = random_states(track, N, rng, model, speed=(0.5, 2.0))
        z = random_controls(cfg, rng).ravel()
        terms = ShootingTerms(cfg, x0, layout="game")
        terms.freeze(z)

        def f(v):
            terms.evaluate(v)
            return terms.objective()

        def g(v):
            terms.evaluate(v)
            return terms.constraint_values()

        terms.evaluate(z)
        grad = terms.objective_grad().ravel()
        jac = terms.constraint_jacobian()
        worst_obj = max(worst_obj, _rel_err(grad, _central_diff(f, z, h)))
        fd_jac = _central_diff(g, z, h).T
        for row in range(jac.shape[0]):
            worst_jac = max(worst_jac, _rel_err(jac[row], fd_jac[row]))
    worst = max(worst_obj, worst_jac)
    return CheckResult(
        "gradients",
        worst <= GRADIENT_TOL,
        worst,
        GRADIENT_TOL,
        {"points": n_points, "objective_max_rel_err": worst_obj, "constraint_max_rel_err": worst_jac},
    )


def _grid_values(cfg: GameConfig, levels=5):
    axes = [np.linspace(cfg.u_min[k], cfg.u_max[k], levels) for k in range(cfg.m)]
    per_step = np.array(list(itertools.product(*axes)))  # (levels^m, m)
    seqs = np.array(list(itertools.product(range(len(per_step)), repeat=cfg.T)))
    return per_step[seqs]  # (G, T, m)


def _lipschitz_slack(values, shape, safety=2.0):
    """Largest grid difference quotient along each control axis, times half
    the spacing, summed over axes and inflated by ``safety``."""
    grid = values.reshape(shape)
    slack = 0.0
    for axis in range(grid.ndim):
        diffs = np.abs(np.diff(grid, axis=axis))
        finite = diffs[np.isfinite(diffs)]
        if finite.size:
            slack += float(finite.max()) * 0.5
    return safety * slack


def micro_single_scenario():
    track = straight_track(length=10.0, half_width=0.6, runout=1.0)
    cfg = GameConfig(N=1, track=track, T=2, alpha=0.1, v_max=1.6)
    x0 = np.array([[1.0, 0.1, 1.5, 0.2]])
    return cfg, x0


def micro_pair_scenario():
    track = straight_track(length=10.0, half_width=0.6, runout=1.0)
    cfg = GameConfig(N=2, track=track, T=2, alpha=0.1, v_max=[2.5, 2.5])
    x0 = np.array([[1.0, 0.2, 2.0, -0.2], [1.0, -0.2, 2.0, 0.2]])
    return cfg, x0


def _agent_rollouts(cfg, x0_i, seqs):
    """Roll one agent through every grid control sequence at once."""
    G = seqs.shape[0]
    x0 = np.broadcast_to(x0_i, (G, cfg.n))
    traj = rollout(x0, seqs.transpose(1, 0, 2), cfg.dt, cfg.model)
    return traj.states  # (T+1, G, n)


def _own_feasible(cfg, X, i, tol):
    """Speed and track rows of one agent for each grid rollout."""
    v_ok = np.all(X[1:, :, 2] - cfg.v_max[i] <= tol, axis=0)
    G = X.shape[1]
    _, lat, _, _ = cfg.track.project_many(X[1:, :, :2].reshape(-1, 2))
    lat = lat.reshape(cfg.T, G)
    return v_ok & np.all(lat - cfg.track.half_width <= tol, axis=0)


@_timed
def micro_single_oracle(seed=0, solver=None):
    """Single agent, two steps: the solver beats the exhaustive 5x5-per-step
    grid optimum up to a Lipschitz slack."""
    del seed
    cfg, x0 = micro_single_scenario()
    seqs = _grid_values(cfg)
    X = _agent_rollouts(cfg, x0[0], seqs)
    feas = _own_feasible(cfg, X, 0, 0.0)
    s, _, _, _ = cfg.track.project_many(X[-1, :, :2])
    obj = -cfg.track.progress_of_s(s)
    grid_best = float(obj[feas].min())
    masked = np.where(feas, obj, np.nan)
    slack = _lipschitz_slack(masked, (5,) * (cfg.T * cfg.m))
    sol = solve_ocp(joint_ocp(cfg, x0), solver)
    val = potential(cfg, sol.trajectory)
    margin = val - grid_best
    return CheckResult(
        "micro_single_oracle",
        sol.max_violation <= (solver or SolverConfig()).eps_feas and margin <= slack,
        margin,
        slack,
        {"solver_objective": val, "grid_best": grid_best, "status": sol.status},
    )


def grid_nash_points(cfg, x0, tol=0.0):
    """Exhaustive two-agent grid game: returns per-agent cost tables, the joint
    feasibility mask and the list of grid generalized-Nash profiles."""
    seqs = _grid_values(cfg)
    G = seqs.shape[0]
    Xs = [_agent_rollouts(cfg, x0[i], seqs) for i in range(2)]
    own = [_own_feasible(cfg, Xs[i], i, tol) for i in range(2)]
    pos = [X[..., :2] for X in Xs]
    thresh = cfg.d_min**2 + cfg.eps_c
    feas = own[0][:, None] & own[1][None, :]
    prox = np.zeros((G, G))
    for t in range(cfg.T + 1):
        d2 = np.sum((pos[0][t][:, None] - pos[1][t][None, :]) ** 2, axis=2)
        if t >= 1:
            feas &= thresh - d2 <= tol
        if t < cfg.T:
            prox += d2
    prog = []
    for i in range(2):
        s, _, _, _ = cfg.track.project_many(pos[i][-1])
        prog.append(cfg.track.progress_of_s(s))
    J0 = -prog[0][:, None] + cfg.alpha * prox
    J1 = -prog[1][None, :] + cfg.alpha * prox
    inf = np.inf
    best0 = np.min(np.where(feas, J0, inf), axis=0)  # best reply of 0 to each b
    best1 = np.min(np.where(feas, J1, inf), axis=1)
    nash = feas & (J0 <= best0[None, :] + 1e-12) & (J1 <= best1[:, None] + 1e-12)
    return J0, J1, feas, np.argwhere(nash)


@_timed
def micro_pair_oracle(seed=0, solver=None):
    """Two agents, two steps: the joint potential solution's per-agent costs
    lie within a Lipschitz slack of some grid generalized-Nash point."""
    del seed
    cfg, x0 = micro_pair_scenario()
    J0, J1, feas, nash = grid_nash_points(cfg, x0)
    per_agent_shape = (5,) * (cfg.T * cfg.m)
    slack = 0.0
    for J in (J0, J1):
        masked = np.where(feas, J, np.nan)
        slack = max(slack, _lipschitz_slack(masked, per_agent_shape * 2))
    sol = solve_ocp(joint_ocp(cfg, x0), solver)
    costs = np.array([agent_cost(cfg, sol.trajectory, i) for i in range(2)])
    grid_costs = np.column_stack([J0[nash[:, 0], nash[:, 1]], J1[nash[:, 0], nash[:, 1]]])
    gaps = np.max(np.abs(grid_costs - costs[None, :]), axis=1) if len(grid_costs) else np.array([np.inf])
    k = int(np.argmin(gaps))
    return CheckResult(
        "micro_pair_oracle",
        sol.max_violation <= (solver or SolverConfig()).eps_feas and float(gaps[k]) <= slack,
        float(gaps[k]),
        slack,
        {
            "solver_costs": costs.tolist(),
            "nearest_grid_nash_costs": grid_costs[k].tolist() if len(grid_costs) else None,
            "grid_nash_points": int(len(nash)),
            "status": sol.status,
        },
    )


def nash_scenario(seed):
    """Seeded two-agent start on the U course with random initial speeds."""
    from .harness import sample_initial_positions

    rng = np.random.default_rng(seed)
    track = u_course()
    x0 = sample_initial_positions(track, 2, (0.5, 1.2), seed)
    x0[:, 2] = rng.uniform(0.5, 2.0, size=2)
    alpha = float(rng.choice([0.1, 1.0]))
    cfg = GameConfig(N=2, track=track, alpha=alpha, v_max=[2.4, 2.5])
    return cfg, x0


@_timed
def nash_gap_check(seed=0, scenarios=10, n_samples=200, solver=None):
    """Random feasible unilateral deviations cannot improve any agent's cost
    at the joint potential solution by more than the tolerance."""
    worst = -np.inf
    rows = []
    for k in range(scenarios):
        cfg, x0 = nash_scenario(seed + k)
        sol = solve_ocp(joint_ocp(cfg, x0), solver)
        traj = Trajectory(sol.trajectory.states, sol.controls, cfg.dt, cfg.model)
        gaps = [
            nash_deviation_gap(cfg, traj, i, n_samples=n_samples, seed=seed * 1000 + k * 10 + i)
            for i in range(cfg.N)
        ]
        worst = max(worst, *gaps)
        rows.append({"scenario": k, "status": sol.status, "gaps": [_num(g) for g in gaps]})
    return CheckResult("nash_gaps", bool(worst <= NASH_TOL), worst, NASH_TOL, {"scenarios": rows})


def run_all(seed=0, solver=None) -> dict:
    checks = [
        potential_identity_sweep(seed),
        mutation_check(seed),
        gradient_check(seed),
        micro_single_oracle(seed, solver),
        micro_pair_oracle(seed, solver),
        nash_gap_check(seed, solver=solver),
    ]
    return {
        "seed": seed,
        "passed": all(c.passed for c in checks),
        "checks": [c.to_dict() for c in checks],
    }
