"""Distribution and speed metrics for generated trajectory sets.

All distances are Euclidean over flattened ``H * D`` trajectories.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tasks as T

DELTA_PERCENTILE = 99.0
N_BOOTSTRAP = 1000


def _flat(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return x.reshape(x.shape[0], -1)


def pairwise_dist(a, b) -> np.ndarray:
    """(|a|, |b|) Euclidean distances between flattened trajectories."""
    a, b = _flat(a), _flat(b)
    d2 = (a * a).sum(1)[:, None] + (b * b).sum(1)[None, :] - 2.0 * a @ b.T
    return np.sqrt(np.maximum(d2, 0.0))


# ---------------------------------------------------------------------------
# per-observation mode reference


@dataclass
class ModeReference:
    """Expert pools for one observation plus the derived mode threshold."""

    pools: list  # per mode: (n, H, D)
    delta: float

    @property
    def n_modes(self) -> int:
        return len(self.pools)

    @property
    def centroids(self) -> np.ndarray:
        return np.stack([_flat(p).mean(0) for p in self.pools])

    @property
    def all_experts(self) -> np.ndarray:
        return np.concatenate(self.pools)


def delta_mode(pools: Sequence[np.ndarray], percentile: float = DELTA_PERCENTILE) -> float:
    """Percentile of every expert's distance to its own mode centroid."""
    dists = []
    for pool in pools:
        f = _flat(pool)
        dists.append(np.linalg.norm(f - f.mean(0), axis=1))
    return float(np.percentile(np.concatenate(dists), percentile))


def mode_reference(task: T.TaskSpec, scene: T.Scene, rng: np.random.Generator, n_per_mode: int = 256) -> ModeReference:
    if task.name not in T.TASK_NAMES:
        raise ValueError(f"unknown task {task.name!r}")
    pools = T.expert_mode_pools(task, scene, n_per_mode, rng)
    return ModeReference(pools=pools, delta=delta_mode(pools))


def classify_modes(genset, ref: ModeReference) -> np.ndarray:
    """Index of the nearest mode centroid for every generated trajectory."""
    return pairwise_dist(genset, ref.centroids).argmin(1)


def mode_coverage(genset, ref: ModeReference) -> float:
    """Fraction of modes hit. A mode is hit when some trajectory classified to it
    lies within ``ref.delta`` of that mode's expert pool."""
    genset = np.asarray(genset)
    labels = classify_modes(genset, ref)
    hit = 0
    for m, pool in enumerate(ref.pools):
        mine = genset[labels == m]
        if len(mine) and pairwise_dist(mine, pool).min() <= ref.delta:
            hit += 1
    return hit / ref.n_modes


def mode_fidelity(genset, expert_pool, delta: float) -> float:
    """Fraction of generated trajectories within ``delta`` of the expert pool."""
    expert_pool = np.asarray(expert_pool)
    if len(expert_pool) == 0:
        raise ValueError("expert pool is empty")
    return float(np.mean(pairwise_dist(genset, expert_pool).min(1) <= delta))


def collapse_score(genset) -> float:
    """Mean pairwise distance over distinct pairs of the set."""
    f = _flat(genset)
    K = len(f)
    if K < 2:
        raise ValueError("collapse_score needs K >= 2")
    d = pairwise_dist(f, f)
    return float(d[np.triu_indices(K, 1)].mean())


def normalized_collapse(genset, reference_set) -> float:
    ref = collapse_score(reference_set)
    return collapse_score(genset) / ref if ref > 0 else float("nan")


def chamfer_to_expert(genset, expert_pool) -> float:
    """Symmetric mean nearest-neighbour squared distance (same form as the training loss)."""
    d2 = pairwise_dist(genset, expert_pool) ** 2
    return float(d2.min(1).mean() + d2.min(0).mean())


# ---------------------------------------------------------------------------
# aggregation


def bootstrap_ci(values, rng: np.random.Generator | None = None, n_resamples: int = N_BOOTSTRAP, level: float = 0.95):
    """(mean, lo, hi) percentile bootstrap interval for the mean."""
    v = np.asarray(values, dtype=np.float64)
    v = v[np.isfinite(v)]
    if len(v) == 0:
        return float("nan"), float("nan"), float("nan")
    rng = rng if rng is not None else np.random.default_rng(0)
    means = v[rng.integers(0, len(v), size=(n_resamples, len(v)))].mean(1)
    a = (1 - level) / 2
    return float(v.mean()), float(np.quantile(means, a)), float(np.quantile(means, 1 - a))


@dataclass
class Timing:
    ms_median: float
    ms_p25: float
    ms_p75: float
    nfe_per_chunk: float
    repeats: int

    @property
    def hz(self) -> float:
        return 1000.0 / self.ms_median


def measure_inference(generate: Callable[[], object], nfe_counter: Callable[[], int], repeats: int = 100, warmup: int = 5) -> Timing:
    """Median wall-clock of ``generate()`` (one action chunk) plus NFE per chunk.

    ``nfe_counter`` reads the policy's forward-call counter.
    """
    if repeats < 30:
        raise ValueError("repeats must be >= 30 for a stable median")
    for _ in range(warmup):
        generate()
    times = np.empty(repeats)
    n0 = nfe_counter()
    for i in range(repeats):
        t0 = time.perf_counter()
        generate()
        times[i] = (time.perf_counter() - t0) * 1000.0
    nfe = (nfe_counter() - n0) / repeats
    p25, med, p75 = np.percentile(times, [25, 50, 75])
    return Timing(float(med), float(p25), float(p75), float(nfe), repeats)


@dataclass
class ObsMetrics:
    obs_id: int
    coverage: float
    fidelity: float
    collapse: float
    collapse_norm: float
    chamfer_expert: float


@dataclass
class EvalReport:
    policy: str
    rows: list = field(default_factory=list)  # ObsMetrics
    timing: Timing | None = None
    extra: dict = field(default_factory=dict)

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.rows], dtype=float)

    def aggregates(self, seed: int = 0) -> dict:
        out = {}
        rng = np.random.default_rng(seed)
        for name in ("coverage", "fidelity", "collapse", "collapse_norm", "chamfer_expert"):
            mean, lo, hi = bootstrap_ci(self.column(name), rng)
            out[name] = {"mean": mean, "ci95": [lo, hi]}
        out["full_coverage_frac"] = float(np.mean(self.column("coverage") >= 1.0)) if self.rows else float("nan")
        out["n_obs"] = len(self.rows)
        return out

    def to_json(self) -> dict:
        d = {"policy": self.policy, "aggregates": self.aggregates(), **self.extra}
        if self.timing is not None:
            d["timing"] = {**asdict(self.timing), "hz": self.timing.hz}
        return d

    def write(self, csv_path, json_path) -> None:
        Path(csv_path).parent.mkdir(parents=True, exist_ok=True)
        with open(csv_path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["obs_id", "coverage", "fidelity", "collapse", "collapse_norm", "chamfer_expert"])
            for r in self.rows:
                w.writerow([r.obs_id] + [f"{getattr(r, k):.6g}" for k in ("coverage", "fidelity", "collapse", "collapse_norm", "chamfer_expert")])
        Path(json_path).write_text(json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n")


def evaluate_sets(policy: str, gensets: Sequence[np.ndarray], refs: Sequence[ModeReference], teacher_sets=None) -> EvalReport:
    """Per-observation metrics for generated sets against their mode references."""
    report = EvalReport(policy)
    for i, (g, ref) in enumerate(zip(gensets, refs)):
        raw = collapse_score(g) if len(g) >= 2 else float("nan")
        norm = normalized_collapse(g, teacher_sets[i]) if teacher_sets is not None and len(g) >= 2 else float("nan")
        pool = ref.all_experts
        report.rows.append(
            ObsMetrics(i, mode_coverage(g, ref), mode_fidelity(g, pool, ref.delta), raw, norm, chamfer_to_expert(g, pool))
        )
    return report
