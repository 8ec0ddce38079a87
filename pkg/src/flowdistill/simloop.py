"""Latency-aware receding-horizon closed loop.

Each replan: observe, compute a trajectory, let the world run for
``ceil(latency_ms / (dt * 1000))`` steps while the agent holds still (the
moving target keeps moving), then execute the first ``T_e`` actions.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Mapping, Protocol, Sequence

import numpy as np

from . import tasks as T
from .cfm import OdeSamplerConfig, sample_ode
from .encoder import ObservationEncoder
from .metrics import bootstrap_ci


@dataclass(frozen=True)
class LatencyModel:
    c_net_ms: float = 4.0
    c_ovh_ms: float = 1.0
    measured: bool = False

    def __post_init__(self):
        if self.c_net_ms < 0 or self.c_ovh_ms < 0:
            raise ValueError("latency costs must be >= 0")

    def latency_ms(self, nfe: int, wall_ms: float | None = None) -> float:
        if self.measured:
            if wall_ms is None:
                raise ValueError("measured latency mode needs a wall-clock reading")
            return float(wall_ms)
        return self.c_ovh_ms + self.c_net_ms * nfe


def hold_steps(latency_ms: float, dt: float) -> int:
    """World steps that elapse during one inference: ``ceil(latency_ms / (dt * 1000))``."""
    if latency_ms <= 0:
        return 0
    # round away float noise (e.g. 0.07 * 1000 = 70.00000000000001) before the ceiling
    return int(math.ceil(round(latency_ms / (dt * 1000.0), 9)))


@dataclass(frozen=True)
class RolloutConfig:
    T_e: int = 8
    budget: int = 300
    dt: float = 0.01
    target_speed: float | None = None  # overrides the task's speed when set
    horizon: int = 32
    plan_continuation: bool = False

    def __post_init__(self):
        if not 1 <= self.T_e <= self.horizon:
            raise ValueError(f"T_e must be in [1, {self.horizon}]")
        if self.budget < 1 or self.dt <= 0:
            raise ValueError("budget must be >= 1 and dt > 0")


@dataclass
class PlanContext:
    observation: T.RawObservation
    state: T.EpisodeState
    scene: T.Scene  # static snapshot at observation time (for oracle policies only)


class Policy(Protocol):
    name: str

    def plan(self, ctx: PlanContext, rng: np.random.Generator) -> tuple[np.ndarray, int]:
        """Return an (H, D) trajectory and the network evaluations it cost."""


class ExpertPolicy:
    """Oracle: an expert demonstration from the current state (zero NFE)."""

    name = "expert"

    def __init__(self, task: T.TaskSpec, nfe: int = 0):
        self.task = task
        self.nfe = nfe

    def plan(self, ctx, rng):
        modes = T.feasible_modes(self.task, ctx.scene)
        if not modes:
            return np.zeros((self.task.horizon, self.task.action_dim)), self.nfe
        mode = modes[int(rng.integers(len(modes)))]
        return T.expert_trajectory(self.task, ctx.scene, mode, rng), self.nfe


class TeacherPolicy:
    def __init__(self, encoder: ObservationEncoder, teacher, sampler: OdeSamplerConfig, name: str | None = None):
        self.encoder, self.teacher, self.sampler = encoder, teacher, sampler
        self.name = name or f"teacher-{sampler.integrator}{sampler.steps}"

    def plan(self, ctx, rng):
        e = self.encoder.assemble(ctx.observation).vector[0]
        return sample_ode(self.teacher, e, self.sampler, rng, n=1)[0], self.sampler.nfe


class StudentPolicy:
    def __init__(self, encoder: ObservationEncoder, student, name: str = "student"):
        self.encoder, self.student, self.name = encoder, student, name

    def plan(self, ctx, rng):
        e = self.encoder.assemble(ctx.observation).vector[0]
        z = rng.standard_normal((1, self.student.cfg.horizon, self.student.cfg.action_dim)).astype(np.float32)
        return np.asarray(self.student.forward(z, e[None]).data)[0], 1


@dataclass
class EpisodeResult:
    success: bool
    steps: int
    replans: int
    sim_latency_ms: float
    collided: bool
    final_distance: float


def run_episode(
    policy: Policy,
    task: T.TaskSpec,
    latency: LatencyModel,
    cfg: RolloutConfig,
    rng: np.random.Generator,
    scene: T.Scene | None = None,
) -> EpisodeResult:
    if cfg.target_speed is not None:
        task = replace(task, target_speed=cfg.target_speed)
    if scene is None:
        scene = T.sample_canonical_scene(task, rng)
    state = T.reset_episode(task, scene)
    replans, total_ms = 0, 0.0
    leftover: np.ndarray = np.zeros((0, task.action_dim))
    zero = np.zeros(task.action_dim)

    def advance(st, action):
        return T.step_env(task, scene, st, action, cfg.dt)

    while not state.done and state.step < cfg.budget:
        obs = T.observe(task, scene, state)
        ctx = PlanContext(obs, state, replace(T.snapshot(task, scene, state.time), start=state.position.copy()))
        t0 = time.perf_counter()
        traj, nfe = policy.plan(ctx, rng)
        wall_ms = (time.perf_counter() - t0) * 1000.0
        replans += 1
        ms = latency.latency_ms(nfe, wall_ms)
        total_ms += ms
        for k in range(hold_steps(ms, cfg.dt)):
            if state.done or state.step >= cfg.budget:
                break
            a = leftover[k] if cfg.plan_continuation and k < len(leftover) else zero
            state = advance(state, a)
        traj = np.asarray(traj, dtype=float)
        for a in traj[: cfg.T_e]:
            if state.done or state.step >= cfg.budget:
                break
            state = advance(state, a)
        leftover = traj[cfg.T_e :]
    return EpisodeResult(
        success=bool(state.succeeded),
        steps=state.step,
        replans=replans,
        sim_latency_ms=total_ms,
        collided=state.collided,
        final_distance=T.goal_distance(state),
    )


def critical_speed(latency: LatencyModel, teacher_nfe: int, student_nfe: int, T_e: int, dt: float, radius: float) -> float:
    """Target speed s* that separates a slow and a fast re-planner.

    During the slow planner's hold the target moves ``s L_slow dt``; above
    ``radius / (L_slow dt)`` that exceeds the success radius, so the stale plan
    can never end on the target. The fast planner lags the target by at most
    ``s (L_fast + T_e) dt``, which stays inside the radius below
    ``radius / ((L_fast + T_e) dt)``. s* is the geometric mean of the two bounds.
    """
    slow = hold_steps(latency.latency_ms(teacher_nfe), dt)
    fast = hold_steps(latency.latency_ms(student_nfe), dt) + T_e
    lo = radius / (slow * dt) if slow > 0 else math.inf
    hi = radius / (fast * dt)
    if not lo < hi:
        raise ValueError(f"no separating speed: teacher bound {lo:.4g} >= student bound {hi:.4g}")
    return math.sqrt(lo * hi)


def episode_seeds(seed: int, n: int) -> list[np.random.SeedSequence]:
    return np.random.SeedSequence(seed).spawn(n)


def evaluate_policy(
    policy: Policy,
    task: T.TaskSpec,
    latency: LatencyModel,
    cfg: RolloutConfig,
    n_episodes: int,
    seed: int = 0,
) -> list[EpisodeResult]:
    """``n_episodes`` rollouts. Episode ``i`` uses the same scene for every policy
    (common random numbers), drawn from its own stream."""
    task_cfg = replace(task, target_speed=cfg.target_speed) if cfg.target_speed is not None else task
    results = []
    for i, ss in enumerate(episode_seeds(seed, n_episodes)):
        scene_rng, policy_rng = (np.random.default_rng(s) for s in ss.spawn(2))
        scene = T.sample_canonical_scene(task_cfg, scene_rng)
        results.append(run_episode(policy, task, latency, cfg, policy_rng, scene=scene))
    return results


def success_rate(results: Sequence[EpisodeResult]) -> float:
    return float(np.mean([r.success for r in results])) if results else float("nan")


def write_results_csv(path, rows: Sequence[tuple]) -> None:
    """rows of (episode id, policy, speed, EpisodeResult)."""
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["episode", "policy", "speed", "success", "replans", "sim_latency_ms", "steps", "collided"])
        for ep, name, speed, r in rows:
            w.writerow([ep, name, f"{speed:.6g}", int(r.success), r.replans, f"{r.sim_latency_ms:.6g}", r.steps, int(r.collided)])


def sweep_dynamics(
    policies: Mapping[str, Policy] | Sequence[Policy],
    task: T.TaskSpec,
    speeds: Sequence[float],
    cfg: RolloutConfig,
    latency: LatencyModel | None = None,
    n_episodes: int = 100,
    seed: int = 0,
    csv_path=None,
    episodes_csv=None,
) -> list[dict]:
    """Success rate for every (policy, target speed) pair."""
    if not speeds:
        raise ValueError("speed list is empty")
    latency = latency or LatencyModel()
    if not isinstance(policies, Mapping):
        policies = {p.name: p for p in policies}
    grid, episodes = [], []
    for name, policy in policies.items():
        for speed in speeds:
            res = evaluate_policy(policy, task, latency, replace(cfg, target_speed=float(speed)), n_episodes, seed)
            mean, lo, hi = bootstrap_ci([r.success for r in res])
            grid.append({"policy": name, "speed": float(speed), "success_rate": mean, "ci_lo": lo, "ci_hi": hi, "episodes": len(res)})
            episodes.extend((i, name, float(speed), r) for i, r in enumerate(res))
    if csv_path is not None:
        Path(csv_path).parent.mkdir(parents=True, exist_ok=True)
        with open(csv_path, "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=["policy", "speed", "success_rate", "ci_lo", "ci_hi", "episodes"])
            w.writeheader()
            for row in grid:
                w.writerow({k: (f"{v:.6g}" if isinstance(v, float) else v) for k, v in row.items()})
    if episodes_csv is not None:
        write_results_csv(episodes_csv, episodes)
    return grid
