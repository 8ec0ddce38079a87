"""Synthetic 2-D manipulation-style tasks with known mode structure.

Three families share one scene model (a circular obstacle, one or more goal
pads, an agent start) and one action space (per-step position deltas):

* ``fork2d``: a single goal behind an obstacle; experts pass above (mode 0)
  or below (mode 1) along a jittered quadratic Bezier arc.
* ``multigoal``: no obstacle, M goals; experts pick a goal and follow a
  min-jerk straight line.
* ``dynamic-target``: fork2d whose goal pad moves at constant speed along a
  circle through the fork2d goal; at speed 0 it is fork2d exactly.
"""

from __future__ import annotations

import functools
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

TASK_NAMES = ("fork2d", "multigoal", "dynamic-target")

RASTER = 16
SDF_GRID = 8
OBSTACLE_RING = 24
GOAL_RING = 8
N_APPEARANCE = 4
N_GEOMETRY = 4
JITTER_FULL_LENGTH = 0.5


@dataclass(frozen=True)
class TaskSpec:
    name: str = "fork2d"
    horizon: int = 32
    action_dim: int = 2
    noise_scale: float = 0.02
    step_length: float = 0.06
    action_bound: float = 0.1
    success_radius: float = 0.05
    clearance: float = 0.1
    bounds: float = 1.0
    start_x: tuple = (-0.85, -0.65)
    start_y: tuple = (-0.25, 0.25)
    goal_center: tuple = (0.7, 0.0)
    goal_jitter: float = 0.15
    obstacle_jitter: float = 0.1
    obstacle_radius: tuple = (0.2, 0.3)
    n_goals: int = 3
    goal_spacing: float = 0.5
    intermediate_frac: float = 0.5
    target_speed: float = 0.0
    orbit_radius: float = 0.12
    success_dwell: int = 3
    max_dwell: int = 50
    token_dim: int = 32
    featurizer_seed: int = 1234

    def __post_init__(self):
        if self.name not in TASK_NAMES:
            raise ValueError(f"unknown task {self.name!r}; expected one of {TASK_NAMES}")
        if self.success_dwell < 1:
            raise ValueError("success_dwell must be >= 1")
        if self.n_modes < 2:
            raise ValueError("multimodal tasks need at least two modes")
        if self.has_obstacle and self.obstacle_jitter + self.obstacle_radius[1] >= self.bounds:
            raise ValueError("obstacle must lie strictly inside the workspace")

    @property
    def has_obstacle(self) -> bool:
        return self.name != "multigoal"

    @property
    def n_modes(self) -> int:
        return self.n_goals if self.name == "multigoal" else 2

    @property
    def n_points(self) -> int:
        goals = self.n_goals if self.name == "multigoal" else 1
        return (OBSTACLE_RING if self.has_obstacle else 0) + GOAL_RING * goals


@dataclass
class Scene:
    start: np.ndarray
    goals: np.ndarray  # (n_goals, 2) nominal goal positions
    obstacle_center: np.ndarray | None = None
    obstacle_radius: float = 0.0
    orbit_phase: float = 0.0
    orbit_dir: float = 1.0

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, np.ndarray):
                d[k] = v.tolist()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Scene":
        return cls(
            start=np.asarray(d["start"], float),
            goals=np.asarray(d["goals"], float).reshape(-1, 2),
            obstacle_center=None if d.get("obstacle_center") is None else np.asarray(d["obstacle_center"], float),
            obstacle_radius=float(d.get("obstacle_radius", 0.0)),
            orbit_phase=float(d.get("orbit_phase", 0.0)),
            orbit_dir=float(d.get("orbit_dir", 1.0)),
        )


@dataclass
class RawObservation:
    appearance_tokens: np.ndarray  # (N_a, d_tok)
    geometry_tokens: np.ndarray  # (N_g, d_tok)
    point_set: np.ndarray  # (N_p, 3)
    proprio: np.ndarray  # (2,)

    def __post_init__(self):
        for name in ("appearance_tokens", "geometry_tokens", "point_set", "proprio"):
            arr = getattr(self, name)
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"observation field {name} has non-finite values")
        if self.point_set.ndim != 2 or self.point_set.shape[0] < 1 or self.point_set.shape[1] != 3:
            raise ValueError(f"point_set must be (N>=1, 3), got {self.point_set.shape}")


@dataclass
class Demo:
    observation: RawObservation
    trajectory: np.ndarray  # (H, D) deltas
    mode: int
    scene: Scene


@dataclass
class EpisodeState:
    position: np.ndarray
    target: np.ndarray  # (n_goals, 2) current goal positions
    time: float = 0.0
    step: int = 0
    done: bool = False
    collided: bool = False
    succeeded: bool = False
    out_of_bounds: bool = False
    dwell: int = 0  # consecutive steps spent within the success radius


# ---------------------------------------------------------------------------
# scene sampling


def _disc(rng, radius):
    r = radius * math.sqrt(rng.random())
    a = rng.uniform(0, 2 * math.pi)
    return np.array([r * math.cos(a), r * math.sin(a)])


def sample_scene(task: TaskSpec, rng: np.random.Generator) -> Scene:
    """A scene with the agent in the canonical start region."""
    start = np.array([rng.uniform(*task.start_x), rng.uniform(*task.start_y)])
    gc = np.asarray(task.goal_center, float)
    if task.name == "multigoal":
        offsets = (np.arange(task.n_goals) - (task.n_goals - 1) / 2) * task.goal_spacing
        goals = np.stack([gc + np.array([0.0, o]) + _disc(rng, 0.5 * task.goal_jitter) for o in offsets])
        return Scene(start=start, goals=goals)
    obstacle = rng.uniform(-task.obstacle_jitter, task.obstacle_jitter, size=2)
    radius = rng.uniform(*task.obstacle_radius)
    goal = gc + _disc(rng, task.goal_jitter)
    if task.name == "dynamic-target":
        # The goal starts at the fork2d goal and circles a centre one radius
        # closer to the nominal goal: speed 0 is exactly fork2d (same draws, same
        # goal) and goals far from the nominal centre orbit inside the training region.
        off = goal - gc
        phase = math.atan2(off[1], off[0]) if np.any(off) else 0.0
        direction = 1.0 if off[1] >= 0 else -1.0
        return Scene(start, goal[None], obstacle, radius, phase, direction)
    return Scene(start, goal[None], obstacle, radius)


def target_position(task: TaskSpec, scene: Scene, time: float) -> np.ndarray:
    """Goal positions (n_goals, 2) at world time ``time`` (seconds).

    Only dynamic-target goals move: ``scene.goals`` holds the position at time 0
    and the goal circles at ``orbit_radius`` starting from phase ``orbit_phase``.
    """
    if task.name != "dynamic-target":
        return scene.goals.copy()
    omega = task.target_speed / task.orbit_radius
    a0 = scene.orbit_phase
    a = a0 + scene.orbit_dir * omega * time
    return scene.goals + task.orbit_radius * np.array([[math.cos(a) - math.cos(a0), math.sin(a) - math.sin(a0)]])


def snapshot(task: TaskSpec, scene: Scene, time: float = 0.0) -> Scene:
    """Copy of ``scene`` re-anchored at ``time``: its goals are the positions at
    ``time`` and its orbit continues from there."""
    goals = target_position(task, scene, time)
    if task.name != "dynamic-target":
        return replace(scene, goals=goals)
    omega = task.target_speed / task.orbit_radius
    return replace(scene, goals=goals, orbit_phase=scene.orbit_phase + scene.orbit_dir * omega * time)


# ---------------------------------------------------------------------------
# geometry


def collides(scene: Scene, positions: np.ndarray) -> bool:
    """True if any point of ``positions`` (..., 2) lies inside the obstacle."""
    if scene.obstacle_center is None:
        return False
    d = np.linalg.norm(np.asarray(positions).reshape(-1, 2) - scene.obstacle_center, axis=1)
    return bool(np.any(d < scene.obstacle_radius))


_TAU = np.linspace(0.0, 1.0, 257)
_TAU_COARSE = np.linspace(0.0, 1.0, 65)
_H_GRID = np.linspace(0.0, 0.9, 91)


def _bezier(start, goal, h, tau):
    """Quadratic Bezier from start to goal whose midpoint is offset ``h`` along the left normal."""
    c = goal - start
    n = np.array([-c[1], c[0]]) / max(np.linalg.norm(c), 1e-9)
    ctrl = 0.5 * (start + goal) + 2.0 * np.asarray(h)[..., None] * n
    tau = tau[:, None]
    return (1 - tau) ** 2 * start + 2 * tau * (1 - tau) * ctrl[..., None, :] + tau**2 * goal


def _clearance(scene, pts):
    return np.linalg.norm(pts - scene.obstacle_center, axis=-1).min(axis=-1) - scene.obstacle_radius


def arc_offset(task: TaskSpec, scene: Scene, start, goal, mode: int) -> float | None:
    """Smallest bulge on the mode's side that clears the obstacle, or None if infeasible.

    Mode 0 bends to the left of the start->goal direction (above, when heading
    +x); mode 1 bends to the right.
    """
    sign = 1.0 if mode == 0 else -1.0
    ends = _clearance(scene, np.stack([start, goal]))
    need = min(task.clearance, 0.7 * ends)
    if need <= 0:
        return None
    hs = sign * _H_GRID
    pts = _bezier(start, goal, hs, _TAU_COARSE)
    clear = _clearance(scene, pts)
    inside = np.all(np.abs(pts) <= task.bounds - 0.02, axis=(-1, -2))
    ok = (clear >= need) & inside
    if not ok.any():
        return None
    i = int(np.argmax(ok))
    if i == 0:
        return 0.0
    lo, hi = _H_GRID[i - 1], _H_GRID[i]
    for _ in range(20):
        mid = 0.5 * (lo + hi)
        p = _bezier(start, goal, sign * mid, _TAU_COARSE)
        if _clearance(scene, p) >= need and np.all(np.abs(p) <= task.bounds - 0.02):
            hi = mid
        else:
            lo = mid
    return sign * hi


def feasible_modes(task: TaskSpec, scene: Scene, start=None, goal=None) -> list[int]:
    start = scene.start if start is None else np.asarray(start, float)
    if task.name == "multigoal":
        return list(range(task.n_modes))
    goal = scene.goals[0] if goal is None else goal
    return [m for m in (0, 1) if arc_offset(task, scene, start, goal, m) is not None]


def _jitter(rng, sigma, n_terms=3):
    a = np.clip(rng.standard_normal((n_terms, 2)), -2.5, 2.5) * sigma
    basis = np.sin(np.pi * np.arange(1, n_terms + 1)[:, None] * _TAU[None, :])  # (n_terms, T)
    return basis.T @ a  # (T, 2), zero at both ends


def _resample(task: TaskSpec, path: np.ndarray, min_jerk: bool = False) -> np.ndarray:
    """Turn a dense path into H position deltas at constant speed, holding at the end."""
    H = task.horizon
    seg = np.linalg.norm(np.diff(path, axis=0), axis=1)
    s = np.concatenate([[0.0], np.cumsum(seg)])
    length = s[-1]
    nominal = task.step_length / (1.5 if min_jerk else 1.0)
    n_move = max(1, min(H, int(math.ceil(length / nominal - 1e-9)))) if length > 1e-9 else 1
    k = np.arange(1, H + 1, dtype=float)
    frac = np.minimum(k / n_move, 1.0)
    if min_jerk:
        frac = 10 * frac**3 - 15 * frac**4 + 6 * frac**5
        targets = frac * length
    else:
        targets = np.minimum(k * max(nominal, length / H), length)
    pos = np.stack([np.interp(targets, s, path[:, 0]), np.interp(targets, s, path[:, 1])], axis=1)
    return np.diff(np.vstack([path[:1], pos]), axis=0)


def _base_path(task: TaskSpec, scene: Scene, mode: int, start, goal) -> np.ndarray:
    if task.name == "multigoal":
        goal = scene.goals[mode]
        return start + _TAU[:, None] * (goal - start)
    goal = scene.goals[0] if goal is None else np.asarray(goal, float)
    h = arc_offset(task, scene, start, goal, mode)
    if h is None:
        raise ValueError(f"mode {mode} infeasible from start {start}")
    return _bezier(start, goal, h, _TAU)


def expert_trajectories(
    task: TaskSpec, scene: Scene, mode: int, n: int, rng: np.random.Generator, start=None, goal=None
) -> np.ndarray:
    """``n`` jittered expert action sequences (n, H, 2) for ``mode`` from ``start``."""
    start = scene.start if start is None else np.asarray(start, float)
    base = _base_path(task, scene, mode, start, goal)
    # short hops (e.g. re-plans next to the goal) get proportionally less jitter
    sigma = task.noise_scale * min(1.0, float(np.linalg.norm(base[-1] - base[0])) / JITTER_FULL_LENGTH)
    out = np.empty((n, task.horizon, task.action_dim))
    for i in range(n):
        for _ in range(32):
            path = base + _jitter(rng, sigma)
            if not collides(scene, path):
                break
        else:
            path = base
        out[i] = _resample(task, path, min_jerk=task.name == "multigoal")
    return out


def expert_trajectory(
    task: TaskSpec, scene: Scene, mode: int, rng: np.random.Generator, start=None, goal=None
) -> np.ndarray:
    """One jittered expert action sequence (H, 2) for ``mode`` from ``start``."""
    return expert_trajectories(task, scene, mode, 1, rng, start, goal)[0]


def rollout_positions(start, traj) -> np.ndarray:
    """Positions visited by executing a delta trajectory from ``start`` (H+1, 2)."""
    return np.vstack([start, start + np.cumsum(traj, axis=0)])


# ---------------------------------------------------------------------------
# observation rendering


@functools.lru_cache(maxsize=8)
def _featurizer(seed: int, token_dim: int):
    rng = np.random.default_rng(seed)
    app = rng.standard_normal((N_APPEARANCE, 2 * RASTER * RASTER, token_dim)) / math.sqrt(2 * RASTER * RASTER)
    geo = rng.standard_normal((N_GEOMETRY, 2 * SDF_GRID * SDF_GRID, token_dim)) / math.sqrt(2 * SDF_GRID * SDF_GRID)
    return app, geo


def _grid(n, bounds):
    c = (np.arange(n) + 0.5) / n * 2 * bounds - bounds
    xx, yy = np.meshgrid(c, c, indexing="xy")
    return np.stack([xx, yy], axis=-1)  # (n, n, 2)


def render_observation(task: TaskSpec, scene: Scene, agent=None, goals=None) -> RawObservation:
    """Render the scene as the encoder's four observation channels."""
    agent = scene.start if agent is None else np.asarray(agent, float)
    goals = scene.goals if goals is None else np.asarray(goals, float).reshape(-1, 2)
    app_proj, geo_proj = _featurizer(task.featurizer_seed, task.token_dim)

    pix = _grid(RASTER, task.bounds)
    cells = _grid(SDF_GRID, task.bounds)
    dg = np.min(np.linalg.norm(pix[:, :, None, :] - goals, axis=-1), axis=-1)
    goal_img = np.exp(-0.5 * (dg / 0.08) ** 2)
    goal_sdf = np.min(np.linalg.norm(cells[:, :, None, :] - goals, axis=-1), axis=-1) - 0.05
    if scene.obstacle_center is not None:
        do = np.linalg.norm(pix - scene.obstacle_center, axis=-1)
        occ = 1.0 / (1.0 + np.exp(-(scene.obstacle_radius - do) / 0.03))
        obs_sdf = np.linalg.norm(cells - scene.obstacle_center, axis=-1) - scene.obstacle_radius
    else:
        occ = np.zeros((RASTER, RASTER))
        obs_sdf = np.full((SDF_GRID, SDF_GRID), 1.0)
    image = np.concatenate([occ.ravel(), goal_img.ravel()])
    sdf = np.clip(np.concatenate([obs_sdf.ravel(), goal_sdf.ravel()]), -1.0, 1.0)
    appearance = np.einsum("i,vio->vo", image, app_proj)
    geometry = np.einsum("i,vio->vo", sdf, geo_proj)

    pts = []
    if scene.obstacle_center is not None:
        a = np.arange(OBSTACLE_RING) * 2 * math.pi / OBSTACLE_RING
        ring = scene.obstacle_center + scene.obstacle_radius * np.stack([np.cos(a), np.sin(a)], 1)
        pts.append(np.hstack([ring, np.full((OBSTACLE_RING, 1), 0.5)]))
    a = np.arange(GOAL_RING) * 2 * math.pi / GOAL_RING
    pad = 0.03 * np.stack([np.cos(a), np.sin(a)], 1)
    for g in goals:
        pts.append(np.hstack([g + pad, np.zeros((GOAL_RING, 1))]))
    return RawObservation(
        appearance_tokens=appearance.astype(np.float32),
        geometry_tokens=geometry.astype(np.float32),
        point_set=np.vstack(pts).astype(np.float32),
        proprio=agent.astype(np.float32),
    )


# ---------------------------------------------------------------------------
# demonstrations


def _intermediate_start(task, scene, rng):
    for _ in range(64):
        mode = int(rng.integers(2))
        traj = expert_trajectory(task, scene, mode, rng)
        pos = rollout_positions(scene.start, traj)
        k = int(rng.integers(0, int(0.95 * task.horizon)))
        p = pos[k] + rng.normal(0.0, 0.03, size=2)
        if np.all(np.abs(p) < task.bounds - 0.05) and not collides(
            Scene(p, scene.goals, scene.obstacle_center, scene.obstacle_radius + 0.03), p
        ):
            return p
    return scene.start.copy()


def sample_expert_demo(task: TaskSpec, rng: np.random.Generator, canonical: bool | None = None) -> Demo:
    """Draw a scene, a start state and one expert demonstration.

    With probability ``task.intermediate_frac`` (unless ``canonical`` forces
    it) the start is moved to a perturbed point partway along another expert
    path so the corpus covers states met during closed-loop replanning.
    The demonstrated mode is uniform over the modes feasible from the start.
    """
    scene = snapshot(task, sample_scene(task, rng))
    if canonical is None:
        canonical = task.name == "multigoal" or rng.random() >= task.intermediate_frac
    if not canonical:
        scene = replace(scene, start=_intermediate_start(task, scene, rng))
    modes = feasible_modes(task, scene)
    if not modes:
        raise RuntimeError("scene has no feasible mode")
    mode = modes[int(rng.integers(len(modes)))]
    traj = expert_trajectory(task, scene, mode, rng)
    return Demo(render_observation(task, scene), traj.astype(np.float32), mode, scene)


def sample_canonical_scene(task: TaskSpec, rng: np.random.Generator) -> Scene:
    """A scene from the canonical start region in which every mode is feasible."""
    while True:
        scene = sample_scene(task, rng)
        if len(feasible_modes(task, snapshot(task, scene))) == task.n_modes:
            return scene


def expert_mode_pools(task: TaskSpec, scene: Scene, n_per_mode: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Fresh expert trajectories for each mode of ``scene`` ((n, H, D) per mode)."""
    return [expert_trajectories(task, scene, m, n_per_mode, rng).astype(np.float32) for m in range(task.n_modes)]


# ---------------------------------------------------------------------------
# environment


def reset_episode(task: TaskSpec, scene: Scene) -> EpisodeState:
    return EpisodeState(position=scene.start.astype(float).copy(), target=target_position(task, scene, 0.0))


def step_env(task: TaskSpec, scene: Scene, state: EpisodeState, action, dt: float) -> EpisodeState:
    """Apply one position-delta action and advance the world clock by ``dt``."""
    action = np.clip(np.asarray(action, float), -task.action_bound, task.action_bound)
    if state.done:
        return state
    pos = state.position + action
    t = state.time + dt
    target = target_position(task, scene, t)
    segment = np.linspace(state.position, pos, 5)
    collided = state.collided or collides(scene, segment)
    oob = bool(np.any(np.abs(pos) > task.bounds))
    new = EpisodeState(pos, target, t, state.step + 1, False, collided, state.succeeded, oob)
    new.dwell = state.dwell + 1 if goal_distance(new) <= task.success_radius else 0
    new.succeeded = is_success(new, task, dwell=required_dwell(task, dt))
    new.done = new.succeeded or new.collided or new.out_of_bounds
    return new


def goal_distance(state: EpisodeState) -> float:
    """Distance from the agent to the nearest goal."""
    return float(np.linalg.norm(np.asarray(state.target).reshape(-1, 2) - state.position, axis=1).min())


def required_dwell(task: TaskSpec, dt: float) -> int:
    """Consecutive in-radius steps needed to count as holding the goal.

    A goal orbiting at radius R spends at most ``2 R asin(r / R)`` of arc
    length inside the success disc of any fixed point, i.e. at most
    ``floor(arc / (v dt)) + 1`` consecutive steps. Requiring one step more
    means an agent the goal merely sweeps past never qualifies, while an
    agent that tracks the goal does. Clipped to ``[success_dwell, max_dwell]``.
    """
    if task.name != "dynamic-target" or task.target_speed <= 0:
        return task.success_dwell
    r, R = task.success_radius, task.orbit_radius
    if R <= r:
        return task.max_dwell
    arc = 2 * R * math.asin(r / R)
    need = math.floor(arc / (task.target_speed * dt) + 1e-9) + 2
    return int(min(max(need, task.success_dwell), task.max_dwell))


def is_success(state: EpisodeState, task: TaskSpec, budget: int | None = None, dwell: int | None = None) -> bool:
    """The agent has held a goal for ``dwell`` consecutive steps within the
    success radius (default ``task.success_dwell``), without collision or
    leaving the workspace.
    """
    if state.collided or state.out_of_bounds:
        return False
    if budget is not None and state.step > budget:
        return False
    need = task.success_dwell if dwell is None else dwell
    return state.succeeded or state.dwell >= need


def observe(task: TaskSpec, scene: Scene, state: EpisodeState) -> RawObservation:
    return render_observation(task, scene, agent=state.position, goals=state.target)
