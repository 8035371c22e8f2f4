import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from rapidrace.errors import ConfigurationError
from rapidrace.game import GameConfig, agent_cost
from rapidrace.optimizer import CONVERGED, MAX_ITER, SolverConfig, joint_ocp, solve_ocp
from rapidrace.planners import (
    IBR,
    RAPID,
    REACTIVE_MPC,
    PlannerSpec,
    constant_velocity_prediction,
    ibr_plan,
    make_planner,
    rapid_plan,
    reactive_mpc_plan,
    select_alpha,
    shift_controls,
)
from rapidrace.sim import RaceConfig, run_race
from rapidrace.track import straight_track, u_course

SPEC = PlannerSpec(alpha_active=1.0, alpha_inactive=0.05, D=4.0)


def straight_cfg(N=2, **kw):
    return GameConfig(N=N, track=straight_track(length=60.0, half_width=0.6), **kw)


def at(*xy):
    return np.array([[x, y, 1.0, 0.0] for x, y in xy])


def test_select_alpha_examples():
    cfg = straight_cfg()
    assert select_alpha(cfg, SPEC, at((0, 0), (np.sqrt(5.0), 0)), 0) == 0.05
    assert select_alpha(cfg, SPEC, at((0, 0), (2.0, 0)), 0) == 1.0
    cfg3 = straight_cfg(N=3)
    assert select_alpha(cfg3, SPEC, at((0, 0), (1.0, 0), (0, np.sqrt(2.0))), 0) == 1.0
    assert select_alpha(straight_cfg(N=1), SPEC, at((0, 0)), 0) == 0.05


@given(st.floats(0.0, 10.0), st.floats(0.0, 10.0), st.floats(0.1, 10.0))
def test_select_alpha_rule(dx, dy, D):
    spec = PlannerSpec(D=D)
    x = at((1.0, 0.5), (1.0 + dx, 0.5 + dy))
    sq = float(np.sum((x[0, :2] - x[1, :2]) ** 2))
    want = spec.alpha_inactive if sq > D else spec.alpha_active
    assert select_alpha(straight_cfg(), spec, x, 0) == want
    assert select_alpha(straight_cfg(), spec, x, 1) == want


def test_shift_controls():
    u = np.arange(10.0).reshape(5, 2)
    np.testing.assert_array_equal(shift_controls(u), [[2, 3], [4, 5], [6, 7], [8, 9], [8, 9]])


def test_planner_spec_validation():
    with pytest.raises(ConfigurationError):
        PlannerSpec(planner="stackelberg")
    with pytest.raises(ConfigurationError):
        PlannerSpec(D=0.0)
    with pytest.raises(ConfigurationError):
        PlannerSpec.from_dict({"planner": "rapid", "gamma": 1})
    assert PlannerSpec.from_dict("ibr").planner == IBR
    assert PlannerSpec.from_dict(SPEC.to_dict()) == SPEC


def test_rapid_single_agent_matches_solver():
    cfg = straight_cfg(N=1)
    x = at((1.0, 0.0))
    plan = rapid_plan(cfg, SPEC, x, 0)
    sol = solve_ocp(joint_ocp(cfg, x, alpha=SPEC.alpha_inactive))
    np.testing.assert_array_equal(plan.controls, sol.controls[:, 0])
    assert plan.controls.shape == (cfg.T, cfg.m) and plan.solve_time >= 0


def test_rapid_far_apart_is_decoupled():
    cfg = straight_cfg()
    x = np.array([[1.0, 0.3, 1.0, 0.0], [30.0, -0.3, 1.5, 0.0]])
    plan = rapid_plan(cfg, PlannerSpec(alpha_inactive=0.0), x, 0)
    single = straight_cfg(N=1)
    total = sum(solve_ocp(joint_ocp(single, x[i : i + 1])).objective_value for i in range(2))
    assert plan.alpha_used == 0.0
    joint = solve_ocp(joint_ocp(cfg, x, alpha=0.0)).objective_value
    assert abs(joint - total) <= 1e-3


def test_rapid_blocks_toward_trailing_opponent():
    cfg = straight_cfg()
    x = np.array([[3.0, 0.3, 2.0, 0.0], [1.5, -0.3, 2.0, 0.0]])
    passive = rapid_plan(cfg, PlannerSpec(alpha_active=0.0, alpha_inactive=0.0), x, 0)
    active = rapid_plan(cfg, SPEC, x, 0)
    assert active.alpha_used == 1.0
    y_passive = passive.predicted_trajectory.states[-1, 0, 1]
    y_active = active.predicted_trajectory.states[-1, 0, 1]
    # opponent sits at negative lateral offset
    assert y_active < y_passive


def test_constant_velocity_prediction_example():
    cfg = straight_cfg()
    prev = np.array([[5.0, 0.0, 1.0, 0.0], [0.0, 0.0, 1.0, 0.0]])
    cur = np.array([[5.0, 0.0, 1.0, 0.0], [0.1, 0.0, 1.0, 0.0]])
    pred = constant_velocity_prediction(cfg, cur, prev, 0)
    assert pred.shape == (cfg.T + 1, 1, 2)
    np.testing.assert_allclose(pred[:, 0, 0], [0.1, 0.2, 0.3, 0.4, 0.5, 0.6])
    np.testing.assert_allclose(pred[:, 0, 1], 0.0)
    # no history means parked opponents
    np.testing.assert_allclose(constant_velocity_prediction(cfg, cur, None, 0)[:, 0, 0], 0.1)


def test_reactive_mpc_without_opponents_is_single_agent_solve():
    cfg = straight_cfg(N=1)
    x = at((1.0, 0.1))
    plan = reactive_mpc_plan(cfg, x, None, 0)
    sol = solve_ocp(joint_ocp(cfg, x, alpha=0.0))
    np.testing.assert_allclose(plan.controls, sol.controls[:, 0], atol=1e-9)


def test_reactive_mpc_avoids_parked_opponent():
    cfg = straight_cfg()
    x = np.array([[1.0, 0.0, 2.0, 0.0], [1.8, 0.1, 0.0, 0.0]])
    plan = reactive_mpc_plan(cfg, x, x, 0)
    assert plan.solver_status == CONVERGED
    gap = np.linalg.norm(plan.predicted_trajectory.states[:, 0, :2] - x[1, :2], axis=1)
    assert gap.min() >= cfg.d_min - 1e-4


def test_reactive_mpc_ignores_opponent_alpha():
    cfg = straight_cfg()
    x = np.array([[1.0, 0.2, 1.5, 0.0], [2.0, -0.2, 1.2, 0.0]])
    a = reactive_mpc_plan(cfg, x, x, 0, params=PlannerSpec(planner=REACTIVE_MPC, alpha_active=0.0))
    b = reactive_mpc_plan(cfg, x, x, 0, params=PlannerSpec(planner=REACTIVE_MPC, alpha_active=5.0))
    c = reactive_mpc_plan(straight_cfg(alpha=3.0), x, x, 0)
    np.testing.assert_array_equal(a.controls, b.controls)
    np.testing.assert_array_equal(a.controls, c.controls)


def test_ibr_single_agent_one_round():
    cfg = straight_cfg(N=1)
    plan = ibr_plan(cfg, at((1.0, 0.0)), 0)
    assert plan.solver_status == CONVERGED and plan.rounds == 1


def test_ibr_decoupled_second_round_changes_nothing():
    cfg = straight_cfg(alpha=0.0)
    x = np.array([[1.0, 0.3, 1.0, 0.0], [30.0, -0.3, 1.5, 0.0]])
    plan = ibr_plan(cfg, x, 1)
    assert plan.solver_status == CONVERGED and plan.rounds == 2
    # objectives agree with the joint solve when nothing couples the agents
    joint = solve_ocp(joint_ocp(cfg, x, alpha=0.0))
    for i in range(2):
        j_ibr = agent_cost(cfg, plan.predicted_trajectory, i)
        j_joint = agent_cost(cfg, joint.trajectory, i)
        assert abs(j_ibr - j_joint) <= 1e-3


def test_ibr_fixed_point():
    cfg = straight_cfg(alpha=0.1)
    x = np.array([[1.0, 0.3, 1.0, 0.0], [2.0, -0.3, 1.5, 0.0]])
    first = ibr_plan(cfg, x, 0)
    assert first.solver_status == CONVERGED
    again = ibr_plan(cfg, x, 0, warm_start=first.joint_controls)
    assert again.rounds == 1 and again.solver_status == CONVERGED


def test_ibr_reports_max_iter():
    cfg = straight_cfg(alpha=0.1)
    x = np.array([[1.0, 0.3, 1.0, 0.0], [2.0, -0.3, 1.5, 0.0]])
    plan = ibr_plan(cfg, x, 0, params=PlannerSpec(planner=IBR, max_rounds=1))
    assert plan.rounds == 1 and plan.solver_status == MAX_ITER
    assert plan.controls.shape == (cfg.T, cfg.m)


def test_ibr_round_order_ego_last():
    cfg = GameConfig(N=3, track=u_course(), alpha=0.1)
    x = np.array([[1.0, 0.3, 1.0, np.pi / 2], [1.0, -0.3, 1.0, np.pi / 2], [-1.0, 2.0, 1.0, np.pi / 2]])
    x[:, 0] = [2.5, 2.5, 2.5]
    plan = ibr_plan(cfg, x, 1, params=PlannerSpec(planner=IBR, max_rounds=1))
    order = []
    for rec in plan.iterates:
        if not order or order[-1] != rec["responder"]:
            order.append(rec["responder"])
    assert order == [0, 2, 1]


def test_planner_keeps_shifted_warm_start():
    cfg = straight_cfg()
    planner = make_planner({"planner": "rapid"}, cfg, 0)
    x = np.array([[1.0, 0.3, 1.0, 0.0], [5.0, -0.3, 1.5, 0.0]])
    plan = planner.plan(x)
    np.testing.assert_array_equal(planner._warm, shift_controls(plan.joint_controls))
    planner.reset()
    assert planner._warm is None
    assert planner.name == RAPID


def _inner_counts(warm):
    track = u_course()
    cfg = GameConfig(N=2, track=track)
    x0 = np.array([[2.5, 0.3, 1.0, np.pi / 2], [2.5, -0.3, 1.0, np.pi / 2]])
    x0[1, 1] -= 1.0
    counts = []

    class Recorder:
        def __init__(self, inner):
            self.inner = inner

        def plan(self, cur, prev):
            p = self.inner.plan(cur, prev)
            counts.append(p.inner_iterations)
            return p

    solver = SolverConfig(warm_start=warm)
    specs = [PlannerSpec(), PlannerSpec(planner=REACTIVE_MPC)]
    config = RaceConfig(cfg, specs, x0, max_steps=25, solver=solver)
    planners = [Recorder(make_planner(s, cfg, i, solver)) for i, s in enumerate(specs)]
    run_race(config, planners=planners)
    return counts


def test_warm_start_reduces_median_inner_iterations():
    assert np.median(_inner_counts(True)) <= np.median(_inner_counts(False))
