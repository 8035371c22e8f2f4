"""The racing game: costs, potential, stacked constraints and equilibrium checks.

Agent indices are zero-based throughout.  Each agent's cost is its negated
progress at the end of the horizon plus ``alpha`` times the summed squared
distance to every opponent over steps ``0..T-1``; the potential counts each
unordered pair once, which makes every unilateral change in an agent's cost
equal to the change in the potential.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from itertools import combinations
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .dynamics import DUBINS, Trajectory, backprop, get_model, rollout
from .errors import ConfigurationError, PreconditionError
from .track import Track

DEFAULT_BOUNDS = {
    "dubins": ((-2.0, -3.0), (2.0, 3.0)),
    "integrator3d": ((-2.5, -2.5, -1.0, -1.0, -1.0, -1.0), (2.5, 2.5, 1.0, 1.0, 1.0, 1.0)),
}


@dataclass
class GameConfig:
    N: int
    track: Track
    T: int = 5
    dt: float = 0.1
    alpha: float = 0.1
    d_min: float = 0.3
    u_min: np.ndarray | None = None
    u_max: np.ndarray | None = None
    v_max: np.ndarray | None = None
    model: str = DUBINS
    # margin realizing the strict collision inequality, in m^2
    eps_c: float = 1e-4
    track_source: str | None = field(default=None, repr=False)

    def __post_init__(self):
        spec = get_model(self.model)
        lo, hi = DEFAULT_BOUNDS[spec.name]
        self.u_min = np.array(lo if self.u_min is None else self.u_min, dtype=float)
        self.u_max = np.array(hi if self.u_max is None else self.u_max, dtype=float)
        vmax = 2.5 if self.v_max is None else self.v_max
        self.v_max = np.broadcast_to(np.asarray(vmax, dtype=float), (self.N,)).copy()
        if self.N < 1 or self.T < 1:
            raise ConfigurationError("need N >= 1 and T >= 1")
        if not (self.dt > 0 and self.d_min > 0 and self.alpha >= 0):
            raise ConfigurationError("need dt > 0, d_min > 0 and alpha >= 0")
        if self.u_min.shape != (spec.m,) or self.u_max.shape != (spec.m,):
            raise ConfigurationError(f"control bounds must have {spec.m} entries for {spec.name}")
        if not np.all(self.u_min < self.u_max):
            raise ConfigurationError("u_min must be strictly below u_max")
        if not np.all(self.v_max > 0):
            raise ConfigurationError("v_max must be positive for every agent")

    @property
    def m(self):
        return get_model(self.model).m

    @property
    def n(self):
        return get_model(self.model).n

    def replace(self, **changes):
        data = {k: getattr(self, k) for k in self.__dataclass_fields__}
        data.update(changes)
        return GameConfig(**data)

    def to_dict(self):
        return {
            "N": self.N,
            "T": self.T,
            "dt": self.dt,
            "alpha": self.alpha,
            "d_min": self.d_min,
            "u_min": self.u_min.tolist(),
            "u_max": self.u_max.tolist(),
            "v_max": self.v_max.tolist(),
            "model": self.model,
            "eps_c": self.eps_c,
            "track": self.track_source if self.track_source else self.track.to_dict(),
        }

    @classmethod
    def from_dict(cls, data, base_dir="."):
        data = dict(data)
        trk = data.pop("track")
        source = None
        if isinstance(trk, str):
            source = trk
            path = Path(trk)
            if not path.is_absolute():
                path = Path(base_dir) / path
            trk = Track.load(path)
        elif isinstance(trk, dict):
            trk = Track.from_dict(trk)
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigurationError(f"unknown GameConfig fields {sorted(unknown)}")
        return cls(track=trk, track_source=source, **data)

    @classmethod
    def load(cls, path):
        path = Path(path)
        with open(path) as fh:
            return cls.from_dict(json.load(fh), base_dir=path.parent)


def agent_pairs(N):
    return list(combinations(range(N), 2))


def _check_traj(cfg, traj):
    if traj.N != cfg.N or traj.T != cfg.T:
        raise PreconditionError(
            f"trajectory has N={traj.N}, T={traj.T}; config has N={cfg.N}, T={cfg.T}"
        )


def _terminal_progress(cfg, traj):
    s, _, _, _ = cfg.track.project_many(traj.states[-1, :, :2])
    return cfg.track.progress_of_s(s)


def agent_cost(cfg: GameConfig, traj: Trajectory, i: int, alpha=None) -> float:
    """Negated terminal progress plus weighted squared distances to opponents."""
    _check_traj(cfg, traj)
    if not 0 <= i < cfg.N:
        raise IndexError(f"agent index {i} out of range for N={cfg.N}")
    alpha = cfg.alpha if alpha is None else alpha
    pos = traj.positions()
    r = _terminal_progress(cfg, traj)[i]
    prox = 0.0
    for t in range(cfg.T):
        for j in range(cfg.N):
            if j != i:
                diff = pos[t, i] - pos[t, j]
                prox += float(diff @ diff)
    return float(-r + alpha * prox)


def potential(cfg: GameConfig, traj: Trajectory, alpha=None) -> float:
    _check_traj(cfg, traj)
    alpha = cfg.alpha if alpha is None else alpha
    pos = traj.positions()
    total_r = float(np.sum(_terminal_progress(cfg, traj)))
    prox = 0.0
    for t in range(cfg.T):
        for i, j in agent_pairs(cfg.N):
            diff = pos[t, i] - pos[t, j]
            prox += float(diff @ diff)
    return -total_r + alpha * prox


def pair_proximity(cfg: GameConfig, traj: Trajectory) -> float:
    """Sum over steps 0..T-1 of squared distances, each unordered pair once."""
    pos = traj.positions()
    return float(
        sum(np.sum((pos[: cfg.T, i] - pos[: cfg.T, j]) ** 2) for i, j in agent_pairs(cfg.N))
    )


# -- constraints ---------------------------------------------------------


class Entry(NamedTuple):
    kind: str
    agents: tuple
    time: int
    component: int = -1


@dataclass
class ConstraintVector:
    values: np.ndarray
    layout: list

    def __len__(self):
        return len(self.values)

    @property
    def max_violation(self):
        return float(max(0.0, np.max(self.values))) if len(self.values) else 0.0

    def kinds(self):
        return np.array([e.kind for e in self.layout])


def constraint_count(cfg: GameConfig) -> int:
    npairs = cfg.N * (cfg.N - 1) // 2
    return cfg.T * cfg.N * (2 * cfg.m + 1) + cfg.T * (cfg.N + npairs)


class ShootingTerms:
    """Costs and constraints of a racing OCP over a subset of agents.

    The decision agents ``agents`` (indices into ``cfg``) start at ``x0`` and
    are rolled out from their controls; ``obstacles`` are fixed position
    sequences ``(T+1, K, d)`` of everyone else.  With all agents as decision
    agents and no obstacles the objective is the potential; with a single
    decision agent it is that agent's cost.

    ``layout="game"`` reproduces the full stacked constraint vector
    (control bounds included, rows from ``t=1``).  ``layout="solver"`` drops
    control bounds (the solver projects onto them), adds ``v >= 0`` rows for
    the Dubins model and omits rows that no control can influence.
    """

    def __init__(self, cfg, x0, agents=None, obstacles=None, alpha=None, d_min=None, layout="solver"):
        self.cfg = cfg
        self.spec = get_model(cfg.model)
        self.agents = list(range(cfg.N)) if agents is None else list(agents)
        self.x0 = np.array(x0, dtype=float).reshape(len(self.agents), self.spec.n)
        self.D = len(self.agents)
        self.T = cfg.T
        self.alpha = cfg.alpha if alpha is None else float(alpha)
        self.d_min = cfg.d_min if d_min is None else float(d_min)
        self.v_max = cfg.v_max[self.agents]
        if obstacles is None:
            obstacles = np.zeros((cfg.T + 1, 0, self.spec.position_dims))
        self.obstacles = np.asarray(obstacles, dtype=float)
        self.K = self.obstacles.shape[1]
        self.game_layout = layout == "game"
        self.lag = 1 if self.game_layout else self.spec.position_lag
        self.pairs = agent_pairs(self.D)
        self._pi = np.array([p[0] for p in self.pairs], dtype=int)
        self._pj = np.array([p[1] for p in self.pairs], dtype=int)
        self._key = None
        self.frozen = None
        self.layout = self._build_layout()

    # -- layout ------------------------------------------------------------

    def _build_layout(self):
        T, D, m, names = self.T, self.D, self.spec.m, self.agents
        out = []
        if self.game_layout:
            for kind in ("control_lo", "control_hi"):
                out += [Entry(kind, (names[i],), t, k) for t in range(T) for i in range(D) for k in range(m)]
        out += [Entry("speed", (names[i],), t) for t in range(T) for i in range(D)]
        if not self.game_layout and self.spec.name == DUBINS:
            out += [Entry("speed_lo", (names[i],), t) for t in range(T) for i in range(D)]
        times = range(self.lag, T + 1)
        out += [Entry("track", (names[i],), t) for t in times for i in range(D)]
        for t in times:
            out += [Entry("collision", (names[i], names[j]), t) for i, j in self.pairs]
            out += [Entry("collision", (names[i], ("obstacle", k)), t) for i in range(D) for k in range(self.K)]
        return out

    @property
    def n_constraints(self):
        return len(self.layout)

    # -- evaluation ----------------------------------------------------------

    def evaluate(self, controls):
        u = np.asarray(controls, dtype=float).reshape(self.T, self.D, self.spec.m)
        key = u.tobytes()
        if key == self._key:
            return
        self.traj = rollout(self.x0, u, self.cfg.dt, self.spec.name)
        self.pos = self.traj.positions()
        xy = self.traj.states[:, :, :2]
        track = self.cfg.track
        if self.frozen is None:
            s, lat, seg, closest = track.project_many(xy)
        else:
            # distances to the frozen segments' supporting lines: smooth in xy
            seg = self.frozen
            tan = track.tangents[seg]
            rel = xy - track.seg_start[seg]
            along = np.sum(rel * tan, axis=-1)
            normal = np.stack([-tan[..., 1], tan[..., 0]], axis=-1)
            e = np.sum(rel * normal, axis=-1)
            s = track.cumulative_arclength[seg] + along
            lat = np.abs(e)
            closest = xy - e[..., None] * normal
        self.s, self.lat, self.seg, self.closest = s, lat, seg, closest
        self._key = key

    def freeze(self, controls):
        """Fix every (time, agent) segment assignment at the projection of
        ``controls``; returns True if the assignment changed."""
        saved, self.frozen, self._key = self.frozen, None, None
        self.evaluate(controls)
        self.frozen = self.seg.copy()
        self._key = None
        return saved is None or not np.array_equal(saved, self.frozen)

    def objective(self):
        cfg = self.cfg
        prog = cfg.track.progress_of_s(self.s[-1])
        f = -float(np.sum(prog))
        if self.alpha:
            P = self.pos[: self.T]
            prox = 0.0
            if self.pairs:
                prox += float(np.sum((P[:, self._pi] - P[:, self._pj]) ** 2))
            if self.K:
                prox += float(np.sum((P[:, :, None] - self.obstacles[: self.T, None]) ** 2))
            f += self.alpha * prox
        return f

    def objective_grad(self):
        dX = np.zeros_like(self.traj.states)
        dX[-1, :, :2] = -self.cfg.track.tangents[self.seg[-1]]
        if self.alpha:
            P = self.pos[: self.T]
            dP = np.zeros_like(P)
            if self.pairs:
                diff = P[:, self._pi] - P[:, self._pj]
                np.add.at(dP, (slice(None), self._pi), 2.0 * diff)
                np.add.at(dP, (slice(None), self._pj), -2.0 * diff)
            if self.K:
                dP += 2.0 * np.sum(P[:, :, None] - self.obstacles[: self.T, None], axis=2)
            dX[: self.T, :, : self.spec.position_dims] += self.alpha * dP
        return backprop(self.traj, dX)

    def _speed(self):
        u = self.traj.controls
        if self.spec.name == DUBINS:
            return self.traj.states[1:, :, 2] - self.v_max
        return np.sum(u[:, :, :3] ** 2, axis=2) - self.v_max**2

    def constraint_values(self):
        cfg, lag = self.cfg, self.lag
        parts = []
        if self.game_layout:
            u = self.traj.controls
            parts.append((cfg.u_min - u).ravel())
            parts.append((u - cfg.u_max).ravel())
        parts.append(self._speed().ravel())
        if not self.game_layout and self.spec.name == DUBINS:
            parts.append(-self.traj.states[1:, :, 2].ravel())
        parts.append((self.lat[lag:] - cfg.track.half_width).ravel())
        P = self.pos[lag:]
        thresh = self.d_min**2 + cfg.eps_c
        coll = []
        if self.pairs:
            coll.append(thresh - np.sum((P[:, self._pi] - P[:, self._pj]) ** 2, axis=2))
        if self.K:
            d2 = np.sum((P[:, :, None] - self.obstacles[lag:, None]) ** 2, axis=3)
            coll.append(thresh - d2.reshape(d2.shape[0], -1))
        if coll:
            parts.append(np.concatenate(coll, axis=1).ravel())
        return np.concatenate(parts)

    def constraint_vjp(self, w):
        """Gradient of ``w @ g`` with respect to the controls."""
        lag, T, D = self.lag, self.T, self.D
        w = np.asarray(w, dtype=float)
        dU = np.zeros_like(self.traj.controls)
        dX = np.zeros_like(self.traj.states)
        pos = 0
        nu = T * D * self.spec.m
        if self.game_layout:
            dU -= w[pos : pos + nu].reshape(dU.shape)
            dU += w[pos + nu : pos + 2 * nu].reshape(dU.shape)
            pos += 2 * nu
        ws = w[pos : pos + T * D].reshape(T, D)
        pos += T * D
        if self.spec.name == DUBINS:
            dX[1:, :, 2] += ws
        else:
            dU[:, :, :3] += 2.0 * self.traj.controls[:, :, :3] * ws[:, :, None]
        if not self.game_layout and self.spec.name == DUBINS:
            dX[1:, :, 2] -= w[pos : pos + T * D].reshape(T, D)
            pos += T * D
        L = T + 1 - lag
        wt = w[pos : pos + L * D].reshape(L, D)
        pos += L * D
        lat = self.lat[lag:]
        safe = np.where(lat > 0, lat, 1.0)
        dlat = np.where((lat > 0)[..., None], (self.traj.states[lag:, :, :2] - self.closest[lag:]) / safe[..., None], 0.0)
        dX[lag:, :, :2] += wt[..., None] * dlat
        npair = len(self.pairs)
        ncol = npair + D * self.K
        if ncol:
            wc = w[pos : pos + L * ncol].reshape(L, ncol)
            pos += L * ncol
            P = self.pos[lag:]
            dP = np.zeros_like(P)
            if npair:
                diff = P[:, self._pi] - P[:, self._pj]
                contrib = -2.0 * diff * wc[:, :npair, None]
                np.add.at(dP, (slice(None), self._pi), contrib)
                np.add.at(dP, (slice(None), self._pj), -contrib)
            if self.K:
                diff = P[:, :, None] - self.obstacles[lag:, None]
                wo = wc[:, npair:].reshape(L, D, self.K)
                dP += np.sum(-2.0 * diff * wo[..., None], axis=2)
            dX[lag:, :, : self.spec.position_dims] += dP
        return dU + backprop(self.traj, dX)

    def constraint_jacobian(self):
        rows = [self.constraint_vjp(e).ravel() for e in np.eye(self.n_constraints)]
        return np.array(rows).reshape(self.n_constraints, -1)


def constraints(cfg: GameConfig, traj: Trajectory) -> ConstraintVector:
    """Stacked constraint vector; feasible iff every entry is ``<= 0``."""
    _check_traj(cfg, traj)
    terms = ShootingTerms(cfg, traj.states[0], layout="game")
    terms.evaluate(traj.controls)
    return ConstraintVector(terms.constraint_values(), terms.layout)


def potential_gradient(cfg: GameConfig, x0, controls, alpha=None):
    """Analytic d(potential)/d(controls), shape ``(T, N, m)``."""
    terms = ShootingTerms(cfg, x0, alpha=alpha, layout="game")
    terms.evaluate(controls)
    return terms.objective_grad()


def constraint_jacobian(cfg: GameConfig, x0, controls):
    """Analytic Jacobian of ``constraints`` w.r.t. the flattened controls."""
    terms = ShootingTerms(cfg, x0, layout="game")
    terms.evaluate(controls)
    return terms.constraint_jacobian()


# -- equilibrium checks --------------------------------------------------


def check_potential_identity(cfg, base: Trajectory, deviated: Trajectory, i: int, alpha=None, potential_fn=None):
    """Relative mismatch between agent ``i``'s cost change and the potential
    change under a unilateral deviation; zero for an exact potential game."""
    potential_fn = potential if potential_fn is None else potential_fn
    if not np.array_equal(base.states[0], deviated.states[0]):
        raise PreconditionError("base and deviated trajectories start from different states")
    others = [j for j in range(cfg.N) if j != i]
    for t in range(base.T):
        for j in others:
            if not np.array_equal(base.controls[t, j], deviated.controls[t, j]):
                raise PreconditionError(
                    f"not a unilateral deviation: agent {j} control differs at t={t}"
                )
    dJ = agent_cost(cfg, base, i, alpha) - agent_cost(cfg, deviated, i, alpha)
    dP = potential_fn(cfg, base, alpha) - potential_fn(cfg, deviated, alpha)
    return abs(dJ - dP) / max(1.0, abs(dJ))


def nash_deviation_gap(cfg, solution: Trajectory, i, n_samples=200, radius=None, seed=0, eps_feas=1e-4, alpha=None):
    """Largest cost improvement agent ``i`` finds over random feasible
    unilateral deviations; ``-inf`` when every sample is infeasible.

    ``radius`` may be a scalar or one value per control dimension; samples
    are uniform in the box around agent ``i``'s controls, clipped to bounds.
    """
    rng = np.random.default_rng(seed)
    if radius is None:
        radius = 0.1 * (cfg.u_max - cfg.u_min)
    radius = np.broadcast_to(np.asarray(radius, dtype=float), (cfg.m,))
    base_cost = agent_cost(cfg, solution, i, alpha)
    x0 = solution.states[0]
    best = -np.inf
    for _ in range(n_samples):
        u = solution.controls.copy()
        delta = rng.uniform(-1.0, 1.0, size=(cfg.T, cfg.m)) * radius
        u[:, i] = np.clip(u[:, i] + delta, cfg.u_min, cfg.u_max)
        traj = rollout(x0, u, cfg.dt, cfg.model)
        if constraints(cfg, traj).max_violation > eps_feas:
            continue
        best = max(best, base_cost - agent_cost(cfg, traj, i, alpha))
    return best
