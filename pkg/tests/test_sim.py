import csv
import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from rapidrace.dynamics import INTEGRATOR3D, rollout
from rapidrace.errors import ConfigurationError
from rapidrace.game import GameConfig
from rapidrace.planners import Plan
from rapidrace.sim import (
    COLLISION,
    ERROR,
    FINISH,
    OFF_TRACK,
    RaceConfig,
    csv_columns,
    detect_events,
    pick_winner,
    run_race,
    write_race_outputs,
)
from rapidrace.track import straight_track


class Scripted:
    """Replays a fixed control sequence (zeros after it runs out)."""

    def __init__(self, controls, alpha=None):
        self.controls = np.asarray(controls, dtype=float)
        self.k = 0

    def plan(self, cur, prev):
        u = self.controls[min(self.k, len(self.controls) - 1)]
        self.k += 1
        return Plan(controls=u[None], predicted_trajectory=None, solve_time=0.0, solver_status="scripted")


class Broken:
    def plan(self, cur, prev):
        raise RuntimeError("boom")


def line_cfg(N=1, length=5.0, **kw):
    return GameConfig(N=N, track=straight_track(length=length + 3.0, half_width=0.6), **kw)


def test_scripted_single_agent_matches_rollout():
    cfg = line_cfg(length=3.0)
    x0 = np.array([[0.0, 0.0, 1.0, 0.0]])
    u = np.tile([[0.5, 0.0]], (100, 1))
    config = RaceConfig(cfg, ["rapid"], x0, max_steps=100)
    res = run_race(config, planners=[Scripted(u)])
    steps = res.steps
    ref = rollout(x0, u[:steps, None], cfg.dt)
    np.testing.assert_array_equal(res.executed.states, ref.states)
    progress = ref.states[:, 0, 0]
    first = int(np.argmax(progress >= cfg.track.race_distance))
    assert res.finish_step == [first] and steps == first
    assert res.winner == 0 and res.tie_break is None
    assert [e.kind for e in res.events] == [FINISH]


def test_max_steps_one_no_winner():
    cfg = line_cfg()
    config = RaceConfig(cfg, ["rapid"], np.array([[0.0, 0.0, 1.0, 0.0]]), max_steps=1)
    res = run_race(config, planners=[Scripted([[0.0, 0.0]])])
    assert res.steps == 1 and res.winner is None and res.finish_step == [None]


def test_mirror_symmetric_race_ties_to_lower_index():
    cfg = line_cfg(N=2, length=4.0)
    x0 = np.array([[0.0, 0.3, 1.5, 0.0], [0.0, -0.3, 1.5, 0.0]])
    config = RaceConfig(cfg, ["reactive_mpc", "reactive_mpc"], x0, max_steps=60)
    res = run_race(config)
    X = res.executed.states
    np.testing.assert_allclose(X[:, 0, 0], X[:, 1, 0], atol=1e-9)
    np.testing.assert_allclose(X[:, 0, 1], -X[:, 1, 1], atol=1e-9)
    np.testing.assert_allclose(X[:, 0, 3], -X[:, 1, 3], atol=1e-9)
    assert res.winner == 0 and res.tie_break == "index"
    assert res.count(COLLISION) == 0


def test_pick_winner_rules():
    assert pick_winner([], [1.0, 2.0]) == (None, None)
    assert pick_winner([1], [1.0, 2.0]) == (1, None)
    assert pick_winner([0, 1], [5.1, 5.2]) == (1, "progress")
    assert pick_winner([0, 1], [5.2, 5.2]) == (0, "index")
    assert pick_winner([1, 2], [9.0, 5.2, 5.2 + 1e-12]) == (1, "index")


def test_detect_events_examples():
    cfg = line_cfg(N=2)
    x = np.array([[1.0, 0.0, 0, 0], [1.0 + cfg.d_min - 0.01, 0.0, 0, 0]])
    ev = detect_events(cfg, x, [1.0, 1.29])
    assert len(ev) == 1 and ev[0].kind == COLLISION and ev[0].agents == (0, 1)

    x = np.array([[1.0, 0.602, 0, 0], [3.0, 0.0, 0, 0]])
    ev = detect_events(cfg, x, [1.0, 2.0])
    assert len(ev) == 1 and ev[0].kind == OFF_TRACK and ev[0].value == pytest.approx(0.002)
    x[0, 1] = 0.6005
    assert detect_events(cfg, x, [1.0, 2.0]) == []

    x = np.array([[1.0, 0.0, 0, 0], [5.0, 0.0, 0, 0]])
    ev = detect_events(cfg, x, [1.0, cfg.track.race_distance])
    assert [(e.kind, e.agents) for e in ev] == [(FINISH, (1,))]


@given(st.lists(st.floats(-1.0, 1.0), min_size=8, max_size=8))
def test_event_soundness(coords):
    cfg = line_cfg(N=4, length=10.0)
    x = np.zeros((4, 4))
    x[:, 0] = 5.0 + np.array(coords[:4])
    x[:, 1] = np.array(coords[4:]) * 0.5
    got = {e.agents for e in detect_events(cfg, x, [0.0] * 4) if e.kind == COLLISION}
    want = {
        (i, j)
        for i in range(4)
        for j in range(i + 1, 4)
        if np.linalg.norm(x[i, :2] - x[j, :2]) < cfg.d_min
    }
    assert got == want


def test_planner_failure_aborts_with_partial_result():
    cfg = line_cfg(N=2)
    x0 = np.array([[0.0, 0.3, 1.0, 0.0], [0.0, -0.3, 1.0, 0.0]])
    config = RaceConfig(cfg, ["rapid", "rapid"], x0, max_steps=10)
    res = run_race(config, planners=[Scripted([[0.0, 0.0]]), Broken()])
    assert res.steps == 0 and res.winner is None
    assert "boom" in res.error
    assert res.events[-1].kind == ERROR and res.events[-1].agents == (1,)


def test_events_sorted_and_consistent():
    cfg = line_cfg(N=2, length=6.0)
    x0 = np.array([[0.0, 0.3, 1.0, 0.0], [0.0, -0.3, 1.0, 0.0]])
    u0 = np.tile([[0.5, -1.0]], (60, 1))
    u1 = np.tile([[0.5, 0.0]], (60, 1))
    res = run_race(RaceConfig(cfg, ["rapid", "rapid"], x0, max_steps=60), planners=[Scripted(u0), Scripted(u1)])
    steps = [e.step for e in res.events]
    assert steps == sorted(steps)
    assert res.count(OFF_TRACK) + res.count(COLLISION) > 0
    ref = rollout(x0, res.executed.controls, cfg.dt)
    np.testing.assert_array_equal(ref.states, res.executed.states)


def test_race_determinism_and_outputs(tmp_path):
    cfg = line_cfg(N=2, length=4.0)
    x0 = np.array([[0.0, 0.3, 1.0, 0.0], [0.8, -0.3, 1.0, 0.0]])
    config = RaceConfig(cfg, ["rapid", "reactive_mpc"], x0, max_steps=15)
    a, b = run_race(config), run_race(config)
    da, db = a.to_dict(), b.to_dict()
    da.pop("solve_time"), db.pop("solve_time")
    assert json.dumps(da) == json.dumps(db)

    out = write_race_outputs(config, a, tmp_path / "race")
    doc = json.loads((out / "result.json").read_text())
    assert doc["result"]["steps"] == a.steps
    back = RaceConfig.from_dict(doc["config"])
    assert back.to_dict() == config.to_dict()
    with open(out / "trajectory.csv") as fh:
        rows = list(csv.reader(fh))
    assert tuple(rows[0]) == csv_columns()
    assert len(rows) == 1 + 2 * (a.steps + 1)
    assert rows[-1][-1] == ""


def test_csv_columns_follow_model(tmp_path):
    cfg = GameConfig(N=1, track=straight_track(length=5.0), model=INTEGRATOR3D, u_min=[-1] * 6, u_max=[1] * 6)
    x0 = np.zeros((1, 6))
    res = run_race(RaceConfig(cfg, ["rapid"], x0, max_steps=2), planners=[Scripted([[1.0] + [0.0] * 5])])
    res.write_csv(tmp_path / "t.csv")
    with open(tmp_path / "t.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["step", "agent", "px", "py", "pz", "phi", "theta", "psi",
                       "vx", "vy", "vz", "wx", "wy", "wz", "solve_time"]
    assert float(rows[2][2]) == pytest.approx(0.1)


def test_race_config_validation():
    cfg = line_cfg(N=2)
    x0 = np.zeros((2, 4))
    with pytest.raises(ConfigurationError):
        RaceConfig(cfg, ["rapid"], x0)
    with pytest.raises(ConfigurationError):
        RaceConfig(cfg, ["rapid", "rapid"], np.zeros((2, 3)))
    with pytest.raises(ConfigurationError):
        RaceConfig(cfg, ["rapid", "rapid"], x0, max_steps=0)


def test_race_config_samples_start_when_missing(tmp_path):
    track_path = tmp_path / "line.json"
    straight_track(length=20.0).save(track_path)
    doc = {"game": {"N": 2, "track": "line.json"}, "planners": ["rapid", "reactive_mpc"], "seed": 4}
    path = tmp_path / "race.json"
    path.write_text(json.dumps(doc))
    a, b = RaceConfig.load(path), RaceConfig.load(path)
    np.testing.assert_array_equal(a.initial_states, b.initial_states)
    d = np.linalg.norm(a.initial_states[0, :2] - a.initial_states[1, :2])
    assert d >= a.game.d_min
