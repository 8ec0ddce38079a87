import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, strategies as st

from flowdistill import simloop as S
from flowdistill import tasks as T

FORK = T.TaskSpec()
DYN = T.TaskSpec(name="dynamic-target")


class RecordingPolicy:
    """Expert plans with a declared NFE; records every planning call."""

    def __init__(self, task, nfe):
        self.inner = S.ExpertPolicy(task, nfe)
        self.name = f"expert-nfe{nfe}"
        self.calls = []

    def plan(self, ctx, rng):
        self.calls.append(ctx.state.step)
        return self.inner.plan(ctx, rng)


class Frozen:
    name = "frozen"

    def plan(self, ctx, rng):
        return np.zeros((32, 2)), 1


def test_latency_model():
    lat = S.LatencyModel(4.0, 1.0)
    assert lat.latency_ms(50) == 201.0 and lat.latency_ms(1) == 5.0
    with pytest.raises(ValueError):
        S.LatencyModel(-1.0)
    measured = S.LatencyModel(measured=True)
    assert measured.latency_ms(50, wall_ms=12.5) == 12.5
    with pytest.raises(ValueError):
        measured.latency_ms(50)


@pytest.mark.parametrize("ms,dt,steps", [(0, 0.01, 0), (5, 0.01, 1), (10, 0.01, 1), (70, 0.01, 7), (201, 0.01, 21), (201, 0.02, 11)])
def test_hold_steps(ms, dt, steps):
    assert S.hold_steps(ms, dt) == steps


def test_rollout_config_validation():
    with pytest.raises(ValueError):
        S.RolloutConfig(T_e=0)
    with pytest.raises(ValueError):
        S.RolloutConfig(T_e=33, horizon=32)
    with pytest.raises(ValueError):
        S.RolloutConfig(budget=0)


def test_replan_schedule_accounts_for_latency():
    # each cycle holds ceil(latency / dt) steps, then executes T_e actions
    pol = RecordingPolicy(FORK, nfe=50)
    lat = S.LatencyModel(4.0, 1.0)
    cfg = S.RolloutConfig(T_e=8, budget=300)
    res = S.run_episode(pol, FORK, lat, cfg, np.random.default_rng(0), scene=T.sample_canonical_scene(FORK, np.random.default_rng(0)))
    cycle = 21 + 8
    assert pol.calls[: 3] == [0, cycle, 2 * cycle]
    assert res.replans == len(pol.calls)
    assert res.sim_latency_ms == pytest.approx(201.0 * res.replans)


def test_expert_solves_static_task_despite_latency():
    lat = S.LatencyModel(4.0, 1.0)
    cfg = S.RolloutConfig()
    for nfe in (1, 50):
        res = S.evaluate_policy(S.ExpertPolicy(FORK, nfe), FORK, lat, cfg, 10, seed=3)
        assert S.success_rate(res) == 1.0


def test_frozen_policy_fails_within_budget():
    res = S.run_episode(Frozen(), FORK, S.LatencyModel(), S.RolloutConfig(budget=50), np.random.default_rng(0))
    assert not res.success and res.steps == 50 and res.replans >= 1


def test_plan_continuation_uses_leftover_actions():
    class Creep:
        name = "creep"

        def __init__(self):
            self.x = []

        def plan(self, ctx, rng):
            self.x.append(ctx.state.position[0])
            return np.tile([0.01, 0.0], (32, 1)), 50

    scene = replace(T.sample_canonical_scene(FORK, np.random.default_rng(1)), obstacle_center=None)
    lat = S.LatencyModel(4.0, 1.0)  # 21 hold steps
    runs = {}
    for flag in (False, True):
        pol = Creep()
        S.run_episode(pol, FORK, lat, S.RolloutConfig(T_e=8, budget=90, plan_continuation=flag), np.random.default_rng(0), scene)
        runs[flag] = np.diff(pol.x[:3])
    # without continuation the agent idles while planning; with it, 21 leftover actions run
    np.testing.assert_allclose(runs[False], [0.08, 0.08])
    np.testing.assert_allclose(runs[True], [0.08, 0.29])


def test_common_scenes_across_policies():
    seen = {}

    class Spy:
        def __init__(self, name):
            self.name = name

        def plan(self, ctx, rng):
            seen.setdefault(self.name, []).append(ctx.scene.goals.copy())
            return np.zeros((32, 2)), 1

    for name in ("a", "b"):
        S.evaluate_policy(Spy(name), FORK, S.LatencyModel(), S.RolloutConfig(budget=5), 3, seed=11)
    assert all(np.array_equal(x, y) for x, y in zip(seen["a"], seen["b"]))


def test_critical_speed_formula():
    lat = S.LatencyModel(4.0, 1.0)
    s = S.critical_speed(lat, 50, 1, 8, 0.01, 0.05)
    lo, hi = 0.05 / (21 * 0.01), 0.05 / ((1 + 8) * 0.01)
    assert s == pytest.approx(math.sqrt(lo * hi))
    assert lo < s < hi
    with pytest.raises(ValueError):
        S.critical_speed(lat, 2, 1, 8, 0.01, 0.05)


@given(st.floats(0.5, 20.0), st.integers(10, 100), st.integers(1, 16))
def test_critical_speed_lies_between_bounds(c_net, nfe, te):
    lat = S.LatencyModel(c_net, 1.0)
    slow = S.hold_steps(lat.latency_ms(nfe), 0.01)
    fast = S.hold_steps(lat.latency_ms(1), 0.01) + te
    if slow <= fast:
        with pytest.raises(ValueError):
            S.critical_speed(lat, nfe, 1, te, 0.01, 0.05)
        return
    s = S.critical_speed(lat, nfe, 1, te, 0.01, 0.05)
    assert 0.05 / (slow * 0.01) < s < 0.05 / (fast * 0.01)


def test_latency_separates_planners_on_moving_target():
    # oracle planners differing only in declared NFE: at s* the slow one cannot hold the goal
    lat = S.LatencyModel(4.0, 1.0)
    s_star = S.critical_speed(lat, 50, 1, 8, 0.01, DYN.success_radius)
    cfg = S.RolloutConfig(target_speed=s_star)
    slow = S.evaluate_policy(S.ExpertPolicy(DYN, 50), DYN, lat, cfg, 12, seed=0)
    fast = S.evaluate_policy(S.ExpertPolicy(DYN, 1), DYN, lat, cfg, 12, seed=0)
    assert S.success_rate(slow) == 0.0
    assert S.success_rate(fast) >= 0.9
    # with a static goal both succeed
    still = S.RolloutConfig(target_speed=0.0)
    assert S.success_rate(S.evaluate_policy(S.ExpertPolicy(DYN, 50), DYN, lat, still, 6, seed=0)) == 1.0


def test_sweep_outputs(tmp_path):
    grid = S.sweep_dynamics(
        [S.ExpertPolicy(DYN, 1)], DYN, [0.0, 0.2], S.RolloutConfig(), S.LatencyModel(), 3, 0, tmp_path / "g.csv", tmp_path / "e.csv"
    )
    assert [(g["policy"], g["speed"]) for g in grid] == [("expert", 0.0), ("expert", 0.2)]
    assert (tmp_path / "g.csv").read_text().splitlines()[0] == "policy,speed,success_rate,ci_lo,ci_hi,episodes"
    assert len((tmp_path / "e.csv").read_text().splitlines()) == 1 + 6
    with pytest.raises(ValueError):
        S.sweep_dynamics([S.ExpertPolicy(DYN)], DYN, [], S.RolloutConfig())


def test_dynamic_task_at_speed_zero_is_the_static_task():
    for seed in range(5):
        a = T.sample_scene(FORK, np.random.default_rng(seed))
        b = T.sample_scene(DYN, np.random.default_rng(seed))
        np.testing.assert_array_equal(T.target_position(DYN, b, 0.0), a.goals)
        np.testing.assert_array_equal(T.target_position(DYN, b, 3.0), a.goals)
    lat, cfg = S.LatencyModel(4.0, 1.0), S.RolloutConfig(target_speed=0.0)
    static = S.evaluate_policy(S.ExpertPolicy(FORK, 50), FORK, lat, cfg, 6, seed=2)
    moving = S.evaluate_policy(S.ExpertPolicy(DYN, 50), DYN, lat, cfg, 6, seed=2)
    assert [(r.success, r.steps, r.final_distance) for r in static] == [(r.success, r.steps, r.final_distance) for r in moving]
