"""Single-shooting trajectory optimizer.

Inequality-constrained problems ``min f(z)  s.t.  g(z) <= 0,  lo <= z <= hi``
are solved with an augmented Lagrangian outer loop

    L(z; lam, rho) = f(z) + (1 / 2 rho) * sum(max(0, lam + rho g)^2 - lam^2)

and a projected L-BFGS inner loop on the box.  Multipliers are updated as
``lam <- max(0, lam + rho g)``; the penalty grows when the violation does not
shrink by a factor of four.
"""

from __future__ import annotations

import json
import time
from collections import deque
from dataclasses import asdict, dataclass, field

import numpy as np

from .dynamics import get_model
from .errors import ConfigurationError, PreconditionError, SolverError
from .game import GameConfig, ShootingTerms

CONVERGED = "converged"
MAX_ITER = "max_iter"
INFEASIBLE_STALL = "infeasible_stall"


@dataclass
class SolverConfig:
    eps_feas: float = 1e-4
    eps_stat: float = 1e-4
    max_outer: int = 20
    max_inner: int = 200
    initial_penalty: float = 10.0
    penalty_growth: float = 5.0
    multiplier_clip: float = 1e6
    lbfgs_memory: int = 10
    warm_start: bool = True
    # tie-breaking control-effort weight; set to 0 to disable
    regularization: float = 1e-6

    def __post_init__(self):
        numeric = [
            self.eps_feas,
            self.eps_stat,
            self.max_outer,
            self.max_inner,
            self.initial_penalty,
            self.multiplier_clip,
            self.lbfgs_memory,
        ]
        if min(numeric) <= 0 or self.penalty_growth <= 1 or self.regularization < 0:
            raise ConfigurationError("solver settings must be positive and penalty_growth > 1")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigurationError(f"unknown SolverConfig fields {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


class OcpProblem:
    """Interface consumed by :func:`solve_ocp`.

    Subclasses provide ``lower``/``upper`` (flat, finite), ``dims`` as
    ``(N, T, m)`` and the three callbacks below.
    """

    lower: np.ndarray
    upper: np.ndarray
    dims: tuple = (1, 1, 1)
    x0 = None

    def objective(self, z):
        """Return ``(f, grad)``."""
        raise NotImplementedError

    def constraints(self, z):
        raise NotImplementedError

    def constraints_vjp(self, z, w):
        """Return ``J(z).T @ w``."""
        raise NotImplementedError

    def jacobian(self, z):
        nc = len(self.constraints(z))
        return np.array([self.constraints_vjp(z, e) for e in np.eye(nc)]).reshape(nc, len(z))

    def trajectory(self, z):
        return None

    def refresh(self, z):
        """Re-linearise any piecewise data at ``z``; True if it changed."""
        return False


class FunctionOcp(OcpProblem):
    """Problem assembled from plain callables; handy for small test problems."""

    def __init__(self, fun, grad, lower, upper, cons=None, jac=None):
        self.fun, self.grad = fun, grad
        self.cons, self.jac = cons, jac
        self.lower = np.asarray(lower, dtype=float)
        self.upper = np.asarray(upper, dtype=float)
        self.dims = (1, 1, len(self.lower))

    def objective(self, z):
        return float(self.fun(z)), np.asarray(self.grad(z), dtype=float)

    def constraints(self, z):
        return np.zeros(0) if self.cons is None else np.atleast_1d(np.asarray(self.cons(z), dtype=float))

    def constraints_vjp(self, z, w):
        if self.cons is None:
            return np.zeros_like(z)
        return np.atleast_2d(np.asarray(self.jac(z), dtype=float)).T @ w


class RaceOcp(OcpProblem):
    """Racing OCP over the controls of ``agents``, others fixed as obstacles."""

    def __init__(self, cfg: GameConfig, x0, agents=None, obstacles=None, alpha=None, d_min=None):
        self.cfg = cfg
        self.terms = ShootingTerms(cfg, x0, agents, obstacles, alpha, d_min, layout="solver")
        D = self.terms.D
        self.dims = (D, cfg.T, cfg.m)
        self.x0 = self.terms.x0
        self.lower = np.tile(cfg.u_min, cfg.T * D)
        self.upper = np.tile(cfg.u_max, cfg.T * D)
        self._seen = set()

    @property
    def layout(self):
        return self.terms.layout

    def objective(self, z):
        self.terms.evaluate(z)
        return self.terms.objective(), self.terms.objective_grad().ravel()

    def constraints(self, z):
        self.terms.evaluate(z)
        return self.terms.constraint_values()

    def constraints_vjp(self, z, w):
        self.terms.evaluate(z)
        return self.terms.constraint_vjp(w).ravel()

    def trajectory(self, z):
        self.terms.evaluate(z)
        return self.terms.traj

    def refresh(self, z):
        # An iterate sitting on a polyline vertex can flip its assignment back
        # and forth forever; once an assignment repeats, keep the current one.
        saved = self.terms.frozen
        changed = self.terms.freeze(z)
        key = self.terms.frozen.tobytes()
        if changed and saved is not None and key in self._seen:
            self.terms.frozen = saved
            self.terms._key = None
            return False
        self._seen.add(key)
        return changed


@dataclass
class OcpSolution:
    z: np.ndarray
    controls: np.ndarray
    trajectory: object
    objective_value: float
    max_violation: float
    stationarity: float
    iterations: tuple
    wall_time: float
    status: str
    multipliers: np.ndarray
    regularization: float = 0.0
    log: list = field(default_factory=list, repr=False)

    @property
    def converged(self):
        return self.status == CONVERGED


def _projected_gradient(z, grad, lo, hi):
    return np.clip(z - grad, lo, hi) - z


def _lbfgs_direction(grad, free, mem):
    q = np.where(free, grad, 0.0)
    if not mem:
        return -q
    alphas = []
    for s, y, rho in reversed(mem):
        a = rho * np.dot(s[free], q[free])
        q = q - a * np.where(free, y, 0.0)
        alphas.append(a)
    s, y, _ = mem[-1]
    yy = np.dot(y[free], y[free])
    gamma = np.dot(s[free], y[free]) / yy if yy > 0 else 1.0
    if not gamma > 0:
        gamma = 1.0
    r = gamma * q
    for (s, y, rho), a in zip(mem, reversed(alphas)):
        b = rho * np.dot(y[free], r[free])
        r = r + (a - b) * np.where(free, s, 0.0)
    return -np.where(free, r, 0.0)


def solve_ocp(problem: OcpProblem, config: SolverConfig | None = None, init=None, log=None, trace=None) -> OcpSolution:
    """Minimise ``problem`` from ``init`` (zeros when absent).

    Deterministic for identical inputs.  ``log``, if a list, receives one
    dict per outer iteration (iter, objective, violation, stationarity).
    ``trace(outer, value)`` is called with the augmented Lagrangian at the
    start of each outer iteration and after every accepted inner step.
    """
    cfg = SolverConfig() if config is None else config
    start = time.perf_counter()
    lo, hi = problem.lower, problem.upper
    nz = len(lo)
    if init is None:
        z = np.clip(np.zeros(nz), lo, hi)
    else:
        z = np.asarray(init, dtype=float).ravel()
        if z.shape != (nz,):
            raise PreconditionError(f"initial guess has {z.size} entries, expected {nz}")
        z = np.clip(z, lo, hi)
    reg = cfg.regularization
    problem.refresh(z)
    nc = len(problem.constraints(z))
    lam = np.zeros(nc)
    rho = float(cfg.initial_penalty)
    step0 = 0.1 * float(np.min(hi - lo))

    def evaluate(z):
        f, gf = problem.objective(z)
        g = problem.constraints(z)
        if not (np.isfinite(f) and np.all(np.isfinite(gf)) and np.all(np.isfinite(g))):
            raise SolverError("problem callback returned non-finite values", iterate=z.copy())
        shifted = np.maximum(0.0, lam + rho * g)
        val = f + reg * z @ z + (shifted @ shifted - lam @ lam) / (2.0 * rho)
        grad = gf + 2.0 * reg * z
        if nc:
            grad = grad + problem.constraints_vjp(z, shifted)
        return val, grad, f, g

    mem = deque(maxlen=cfg.lbfgs_memory)
    total_inner = 0
    history = []
    best = None
    status = MAX_ITER
    prev_viol = np.inf
    outer_done = 0
    stat = np.inf
    records = [] if log is None else log

    for outer in range(cfg.max_outer):
        outer_done = outer + 1
        L, G, f, g = evaluate(z)
        if trace is not None:
            trace(outer, L)
        stall = 0
        for _ in range(cfg.max_inner):
            pg = _projected_gradient(z, G, lo, hi)
            if np.max(np.abs(pg), initial=0.0) <= cfg.eps_stat:
                break
            free = ~(((z <= lo) & (G > 0)) | ((z >= hi) & (G < 0)))
            d = _lbfgs_direction(G, free, mem)
            slope = G @ d
            if not slope < 0:
                mem.clear()
                d = -np.where(free, G, 0.0)
                slope = G @ d
            if not mem:
                d = d * (step0 / max(np.max(np.abs(d)), 1e-300))
            t = 1.0
            accepted = False
            for _ls in range(40):
                z_new = np.clip(z + t * d, lo, hi)
                L_new, G_new, f_new, g_new = evaluate(z_new)
                if L_new <= L + 1e-4 * (G @ (z_new - z)):
                    accepted = True
                    break
                t *= 0.5
            total_inner += 1
            if not accepted:
                if mem:
                    mem.clear()
                    continue
                break
            s = z_new - z
            y = G_new - G
            sy = s @ y
            if sy > 1e-10 * np.sqrt((s @ s) * (y @ y)):
                mem.append((s, y, 1.0 / sy))
            stall = stall + 1 if L - L_new <= 1e-15 * max(1.0, abs(L)) else 0
            z, L, G, f, g = z_new, L_new, G_new, f_new, g_new
            if trace is not None:
                trace(outer, L)
            if stall >= 3:
                break

        if problem.refresh(z):
            f = problem.objective(z)[0]
            g = problem.constraints(z)
        viol = float(max(0.0, np.max(g, initial=0.0)))
        lam_new = np.minimum(np.maximum(0.0, lam + rho * g), cfg.multiplier_clip)
        lagr_grad = problem.objective(z)[1] + 2.0 * reg * z
        if nc:
            lagr_grad = lagr_grad + problem.constraints_vjp(z, lam_new)
        stat = float(np.max(np.abs(_projected_gradient(z, lagr_grad, lo, hi)), initial=0.0))
        records.append({"iter": outer, "objective": f, "violation": viol, "stationarity": stat})

        feasible = viol <= cfg.eps_feas
        rank = (0, f) if feasible else (1, viol)
        if best is None or rank < best[0]:
            best = (rank, z.copy(), lam_new.copy(), f, viol, stat)
        lam = lam_new
        if feasible and stat <= cfg.eps_stat:
            status = CONVERGED
            best = (rank, z.copy(), lam.copy(), f, viol, stat)
            break
        history.append(viol)
        if len(history) >= 4 and viol > cfg.eps_feas and viol > history[-4] / 10.0:
            status = INFEASIBLE_STALL
            break
        if viol > 0.25 * prev_viol:
            rho *= cfg.penalty_growth
            mem.clear()
        prev_viol = viol

    _, z, lam, f, viol, stat = best
    controls = z.reshape(problem.dims[1], problem.dims[0], problem.dims[2])
    return OcpSolution(
        z=z,
        controls=controls,
        trajectory=problem.trajectory(z),
        objective_value=float(f),
        max_violation=float(viol),
        stationarity=float(stat),
        iterations=(outer_done, total_inner),
        wall_time=time.perf_counter() - start,
        status=status,
        multipliers=lam,
        regularization=reg,
        log=records,
    )


def kkt_report(problem: OcpProblem, solution: OcpSolution) -> dict:
    """Recompute stationarity, complementarity and violation at a solution."""
    z, lam = solution.z, solution.multipliers
    g = problem.constraints(z)
    grad = problem.objective(z)[1] + 2.0 * solution.regularization * z
    if len(g):
        grad = grad + problem.constraints_vjp(z, lam)
    pg = _projected_gradient(z, grad, problem.lower, problem.upper)
    return {
        "stationarity": float(np.max(np.abs(pg), initial=0.0)),
        "complementarity": float(np.max(np.abs(lam * g), initial=0.0)),
        "max_violation": float(max(0.0, np.max(g, initial=0.0))),
    }


def joint_ocp(cfg: GameConfig, x0, alpha=None, d_min=None) -> RaceOcp:
    """All agents' controls; the objective is the potential."""
    return RaceOcp(cfg, x0, alpha=alpha, d_min=d_min)


def best_response(cfg: GameConfig, i, joint_states, config=None, init=None, alpha=None, d_min=None) -> OcpSolution:
    """Minimise agent ``i``'s own cost with everyone else frozen.

    ``joint_states`` is ``(T+1, N, n)``; agent ``i`` starts from
    ``joint_states[0, i]`` and the other rows are treated as fixed
    obstacle trajectories in the proximity term and collision constraints.
    """
    X = np.asarray(joint_states, dtype=float)
    if X.shape[0] != cfg.T + 1:
        raise PreconditionError(f"opponent trajectories need T+1={cfg.T + 1} states, got {X.shape[0]}")
    others = [j for j in range(cfg.N) if j != i]
    obstacles = X[:, others, : get_model(cfg.model).position_dims]
    problem = RaceOcp(cfg, X[0, i : i + 1], agents=[i], obstacles=obstacles, alpha=alpha, d_min=d_min)
    return solve_ocp(problem, config, init)
