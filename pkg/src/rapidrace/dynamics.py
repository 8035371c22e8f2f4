"""Per-agent kinematic models, joint propagation and rollout derivatives.

Two models are supported:

``dubins``
    state ``[px, py, v, theta]``, control ``[a, omega]``, explicit Euler map
    ``p += v*(cos, sin)(theta)*dt``, ``v += a*dt``, ``theta += omega*dt``.
``integrator3d``
    state ``[px, py, pz, phi, theta, psi]``, control = six velocities,
    ``x += u*dt``.

Joint quantities are plain arrays: a joint state is ``(N, n)``, a joint
control ``(N, m)``; a trajectory stores ``(T+1, N, n)`` states and
``(T, N, m)`` controls.  Angles are never wrapped.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, DomainError, PreconditionError

DUBINS = "dubins"
INTEGRATOR3D = "integrator3d"


@dataclass(frozen=True)
class DynamicsModel:
    name: str
    state_fields: tuple
    control_fields: tuple
    position_dims: int
    # first time index whose positions depend on the controls
    position_lag: int

    @property
    def n(self):
        return len(self.state_fields)

    @property
    def m(self):
        return len(self.control_fields)


MODELS = {
    DUBINS: DynamicsModel(DUBINS, ("px", "py", "v", "theta"), ("a", "omega"), 2, 2),
    INTEGRATOR3D: DynamicsModel(
        INTEGRATOR3D,
        ("px", "py", "pz", "phi", "theta", "psi"),
        ("vx", "vy", "vz", "wx", "wy", "wz"),
        3,
        1,
    ),
}


def get_model(model) -> DynamicsModel:
    if isinstance(model, DynamicsModel):
        return model
    try:
        return MODELS[model]
    except KeyError:
        raise ConfigurationError(
            f"unknown dynamics model {model!r}; expected one of {sorted(MODELS)}"
        ) from None


def wrap_angle(theta):
    """Map angles to (-pi, pi]; for display only."""
    wrapped = np.mod(np.asarray(theta, dtype=float) + np.pi, 2.0 * np.pi) - np.pi
    return np.where(wrapped == -np.pi, np.pi, wrapped)


@dataclass(frozen=True)
class Trajectory:
    """Open-loop joint trajectory: ``states[t+1] = step_joint(states[t], controls[t])``."""

    states: np.ndarray
    controls: np.ndarray
    dt: float
    model: str = DUBINS

    @property
    def T(self):
        return self.controls.shape[0]

    @property
    def N(self):
        return self.states.shape[1]

    def positions(self):
        """``(T+1, N, d)`` positions used by costs and constraints."""
        return self.states[:, :, : get_model(self.model).position_dims]

    def agent(self, i):
        """Single-agent trajectory of agent ``i``."""
        return Trajectory(
            self.states[:, i : i + 1].copy(), self.controls[:, i : i + 1].copy(), self.dt, self.model
        )


def _check_finite(arr, fields, what):
    arr = np.asarray(arr, dtype=float)
    if not np.all(np.isfinite(arr)):
        bad = np.argwhere(~np.isfinite(arr))[0]
        field = fields[bad[-1]]
        where = f" of agent {bad[0]}" if arr.ndim > 1 else ""
        raise DomainError(f"non-finite {what} field '{field}'{where}")
    return arr


def step_batch(states, controls, dt, model=DUBINS):
    """Advance a stack of agents ``(N, n)`` by one step.  Every other step
    function goes through here so all paths share identical arithmetic."""
    spec = get_model(model)
    if not dt > 0:
        raise PreconditionError(f"dt must be positive, got {dt}")
    x = _check_finite(states, spec.state_fields, "state")
    u = _check_finite(controls, spec.control_fields, "control")
    if spec.name == DUBINS:
        v = x[:, 2]
        th = x[:, 3]
        out = np.empty_like(x)
        out[:, 0] = x[:, 0] + v * np.cos(th) * dt
        out[:, 1] = x[:, 1] + v * np.sin(th) * dt
        out[:, 2] = v + u[:, 0] * dt
        out[:, 3] = th + u[:, 1] * dt
        return out
    return x + u * dt


def step_agent(state, control, dt, model=DUBINS):
    """One Euler step for a single agent; returns a new array."""
    spec = get_model(model)
    x = np.asarray(state, dtype=float).reshape(1, spec.n)
    u = np.asarray(control, dtype=float).reshape(1, spec.m)
    return step_batch(x, u, dt, spec)[0]


def step_joint(state, control, dt, model=DUBINS):
    x = np.asarray(state, dtype=float)
    u = np.asarray(control, dtype=float)
    if x.shape[0] != u.shape[0]:
        raise ConfigurationError(
            f"joint state has {x.shape[0]} agents but joint control has {u.shape[0]}"
        )
    return step_batch(x, u, dt, model)


def rollout(x0, controls, dt, model=DUBINS) -> Trajectory:
    """Simulate ``controls`` of shape ``(T, N, m)`` forward from ``x0`` ``(N, n)``."""
    spec = get_model(model)
    u = np.asarray(controls, dtype=float)
    if u.ndim != 3 or u.shape[0] == 0:
        raise PreconditionError("rollout needs a non-empty (T, N, m) control sequence")
    x0 = np.asarray(x0, dtype=float)
    if x0.shape[0] != u.shape[1]:
        raise ConfigurationError(
            f"initial state has {x0.shape[0]} agents but controls have {u.shape[1]}"
        )
    T = u.shape[0]
    states = np.empty((T + 1,) + x0.shape)
    states[0] = x0
    for t in range(T):
        try:
            states[t + 1] = step_batch(states[t], u[t], dt, spec)
        except DomainError as exc:
            raise DomainError(f"time step {t}: {exc}") from exc
    return Trajectory(states, u.copy(), float(dt), spec.name)


def step_jacobians_batch(states, controls, dt, model=DUBINS):
    """Analytic ``A = d x+/d x`` of shape ``(N, n, n)`` and ``B = d x+/d u``
    of shape ``(N, n, m)``."""
    spec = get_model(model)
    x = _check_finite(states, spec.state_fields, "state")
    _check_finite(controls, spec.control_fields, "control")
    N = x.shape[0]
    A = np.broadcast_to(np.eye(spec.n), (N, spec.n, spec.n)).copy()
    B = np.zeros((N, spec.n, spec.m))
    if spec.name == DUBINS:
        v = x[:, 2]
        c = np.cos(x[:, 3])
        s = np.sin(x[:, 3])
        A[:, 0, 2] = c * dt
        A[:, 0, 3] = -v * s * dt
        A[:, 1, 2] = s * dt
        A[:, 1, 3] = v * c * dt
        B[:, 2, 0] = dt
        B[:, 3, 1] = dt
    else:
        B[:] = np.eye(spec.n) * dt
    return A, B


def step_jacobians(state, control, dt, model=DUBINS):
    spec = get_model(model)
    A, B = step_jacobians_batch(
        np.asarray(state, dtype=float).reshape(1, spec.n),
        np.asarray(control, dtype=float).reshape(1, spec.m),
        dt,
        spec,
    )
    return A[0], B[0]


def backprop(traj: Trajectory, dstates):
    """Pull a state-space gradient back onto the controls.

    ``dstates`` has the shape of ``traj.states`` and holds dF/dx_t for some
    scalar F(x_0..x_T); returns dF/du with the shape of ``traj.controls``.
    """
    T = traj.T
    A, B = step_jacobians_batch(
        traj.states[:T].reshape(-1, traj.states.shape[-1]),
        traj.controls.reshape(-1, traj.controls.shape[-1]),
        traj.dt,
        traj.model,
    )
    N = traj.N
    A = A.reshape(T, N, *A.shape[1:])
    B = B.reshape(T, N, *B.shape[1:])
    du = np.empty_like(traj.controls)
    lam = np.array(dstates[T], dtype=float)
    for t in range(T - 1, -1, -1):
        du[t] = np.einsum("knm,kn->km", B[t], lam)
        lam = dstates[t] + np.einsum("knj,kn->kj", A[t], lam)
    return du
