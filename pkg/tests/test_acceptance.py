"""Acceptance suite: one pass/fail line per criterion (see the terminal summary).

Criteria 1-3 are self-contained property checks. Criteria 4-9 read the outputs
of one full pipeline run with the default config; the run is cached under
``.acceptance/`` (or ``$FLOWDISTILL_ACCEPTANCE_DIR``) and resumed stage by
stage, so only stale stages are recomputed. Criterion 10 runs a reduced-scale
pipeline twice end to end and regenerates the full-scale dataset.
"""

import csv
import datetime as dt
import json
import os
import time
from pathlib import Path

import numpy as np
import pytest

from conftest import ACCEPTANCE
from flowdistill.cfm import OdeSamplerConfig, sample_ode
from flowdistill.config import parse_config
from flowdistill.diffcore import Conv1d, LayerNorm, Linear, MLP, Parameter, Tensor, finite_diff_check, ops, precision
from flowdistill.distill import batched_chamfer, chamfer_distance
from flowdistill.encoder import CrossAttention, EncoderConfig, ObservationEncoder
from flowdistill.nets import FiLMBlock, NetConfig, StudentNet, TeacherNet
from flowdistill.pipeline import Manifest, Run, cmd_gen_data, run_all

REPO = Path(__file__).resolve().parents[1]


def verdict(n: int, ok: bool, detail: str) -> None:
    ACCEPTANCE[n] = (bool(ok), detail)
    assert ok, f"criterion {n}: {detail}"


def read_csv(path):
    with open(path) as f:
        return list(csv.DictReader(f))


@pytest.fixture(scope="session")
def full_run():
    root = Path(os.environ.get("FLOWDISTILL_ACCEPTANCE_DIR", REPO / ".acceptance" / "run"))
    cfg = parse_config({}, out_dir=str(root))
    run_all(cfg, resume=True)
    assert Manifest(root).verify() == []
    return root, cfg


# ---------------------------------------------------------------------------
# 1-3: property suites


def _sum_against(out: Tensor, rng) -> Tensor:
    return ops.sum(ops.mul(out, Tensor(rng.standard_normal(out.shape))))


def _gradient_cases(seed: int):
    """(name, parameters, scalar loss builder) for every network block and the Chamfer loss."""
    rng = np.random.default_rng(seed)
    net = NetConfig(horizon=8, channels=(6, 8), embed_dim=4, obs_dim=5)
    enc_cfg = EncoderConfig(token_dim=6, d_pcd=5, d_state=4, gate_hidden=5, point_hidden=7)
    cases = []

    lin = Linear(5, 4, rng).astype(np.float64)
    x = rng.standard_normal((3, 5))
    cases.append(("linear", lin.parameters(), lambda: _sum_against(lin(x), np.random.default_rng(seed))))

    conv = Conv1d(3, 4, rng).astype(np.float64)
    xc = rng.standard_normal((2, 7, 3))
    cases.append(("conv1d", conv.parameters(), lambda: _sum_against(conv(xc), np.random.default_rng(seed))))

    norm = LayerNorm(6).astype(np.float64)
    for p in norm.parameters().values():
        p.data = p.data + 0.1 * rng.standard_normal(p.shape)
    xn = rng.standard_normal((2, 5, 6))
    cases.append(("layernorm", norm.parameters(), lambda: _sum_against(norm(xn), np.random.default_rng(seed))))

    mlp = MLP(4, 6, 3, rng).astype(np.float64)
    xm = rng.standard_normal((3, 4))
    cases.append(("mlp", mlp.parameters(), lambda: _sum_against(mlp(xm), np.random.default_rng(seed))))

    for timed in (True, False):
        blk = FiLMBlock(6, 6, net, rng, time_conditioned=timed).astype(np.float64)
        xb, eb, tb = rng.standard_normal((2, 8, 6)), Tensor(rng.standard_normal((2, 5))), Tensor(rng.standard_normal((2, 8)))
        cases.append(
            (f"film-block{'-time' if timed else ''}", blk.parameters(),
             lambda blk=blk, xb=xb, eb=eb, tb=tb, timed=timed: _sum_against(blk(Tensor(xb), eb, tb if timed else None), np.random.default_rng(seed)))
        )

    attn = CrossAttention(6, rng).astype(np.float64)
    q, kv = rng.standard_normal((2, 3, 6)), rng.standard_normal((2, 4, 6))
    cases.append(("cross-attention", attn.parameters(), lambda: _sum_against(attn(q, kv), np.random.default_rng(seed))))

    enc = ObservationEncoder(enc_cfg, seed=seed, symmetric_init=False).astype(np.float64)
    app, geo = rng.standard_normal((2, 3, 6)), rng.standard_normal((2, 4, 6))
    pts, prop = rng.standard_normal((2, 5, 3)), rng.standard_normal((2, 2))
    cases.append(("encoder", enc.parameters(), lambda: _sum_against(enc.encode_arrays(app, geo, pts, prop)[0], np.random.default_rng(seed))))

    teacher = TeacherNet(net, seed=seed)
    teacher.net.astype(np.float64)
    xt, et, tt = rng.standard_normal((2, 8, 2)) * 0.06, rng.standard_normal((2, 5)), rng.uniform(0.05, 0.95, 2)
    cases.append(("teacher-unet", teacher.parameters(), lambda: _sum_against(teacher.forward(xt, tt, et), np.random.default_rng(seed))))

    student = StudentNet(net, seed=seed)
    student.net.astype(np.float64)
    zs, es = rng.standard_normal((2, 8, 2)), rng.standard_normal((2, 5))
    cases.append(("student-unet", student.parameters(), lambda: _sum_against(student.forward(zs, es), np.random.default_rng(seed))))

    target = rng.standard_normal((2, 5, 3, 2))
    gen = Parameter(rng.standard_normal((2, 4, 3, 2)))
    cases.append(("chamfer", {"b": gen}, lambda: batched_chamfer(target, gen)))
    return cases


def test_criterion_01_gradient_suite():
    start = time.perf_counter()
    worst: dict[str, float] = {}
    with precision(np.float64):
        for seed in range(20):
            for name, params, build in _gradient_cases(seed):
                err = finite_diff_check(build, params, eps=1e-4, max_coords=8, seed=seed)
                worst[name] = max(worst.get(name, 0.0), err)
    elapsed = time.perf_counter() - start
    top = max(worst, key=worst.get)
    ok = worst[top] < 1e-3 and elapsed < 120
    verdict(1, ok, f"{len(worst) - 1} network blocks + chamfer x 20 seeds, max rel err {worst[top]:.2e} ({top}), {elapsed:.1f} s")


def _brute_chamfer(a, b):
    def sq(x, y):
        return float(sum((float(p) - float(q)) ** 2 for p, q in zip(x.ravel(), y.ravel())))

    return sum(min(sq(x, y) for y in b) for x in a) / len(a) + sum(min(sq(x, y) for x in a) for y in b) / len(b)


def test_criterion_02_chamfer_oracle():
    rng = np.random.default_rng(2024)
    worst, sym, perm = 0.0, True, True
    for _ in range(200):
        ka, kb, h, d = rng.integers(1, 9), rng.integers(1, 9), rng.integers(1, 5), rng.integers(1, 3)
        a, b = rng.standard_normal((ka, h, d)), rng.standard_normal((kb, h, d))
        c = chamfer_distance(a, b).item()
        worst = max(worst, abs(c - _brute_chamfer(a, b)))
        sym &= chamfer_distance(b, a).item() == c
        perm &= chamfer_distance(a[rng.permutation(ka)], b[rng.permutation(kb)]).item() == c
    verdict(2, worst < 1e-6 and sym and perm, f"200 pairs, max |err| {worst:.1e}, symmetric={sym}, permutation-invariant={perm}")


class _Constant:
    def __init__(self, c):
        self.c, self.cfg, self.nfe = c, NetConfig(horizon=c.shape[0]), 0

    def forward(self, x, t, e):
        self.nfe += x.shape[0]
        return Tensor(np.broadcast_to(self.c, x.shape).astype(x.dtype))


def test_criterion_03_ode_oracle():
    rng = np.random.default_rng(3)
    start = time.perf_counter()
    worst, exact = 0.0, True
    for integrator in ("euler", "heun"):
        c = rng.standard_normal((4, 2))
        tau0 = rng.standard_normal((5, 4, 2))
        out, pre = sample_ode(_Constant(c), np.zeros(3), OdeSamplerConfig(integrator, 50), tau0=tau0, return_prejump=True)
        t_pre = 49 / 50
        worst = max(worst, float(np.abs(pre - ((1 - t_pre) * tau0 + t_pre * c)).max()))
        exact &= bool(np.array_equal(out, np.broadcast_to(c, tau0.shape)))
    elapsed = time.perf_counter() - start
    verdict(3, worst < 1e-4 and exact and elapsed < 1.0, f"pre-jump max err {worst:.1e}, post-jump exact={exact}, {elapsed * 1000:.0f} ms")


# ---------------------------------------------------------------------------
# 4-9: full pipeline on fork2d


def _stage_seconds(root: Path, command: str) -> float:
    runs = [r for r in Manifest(root).read()["runs"] if r["command"] == command]
    last = runs[-1]
    return (dt.datetime.fromisoformat(last["finished"]) - dt.datetime.fromisoformat(last["started"])).total_seconds()


def _eval(root, name):
    return json.loads((root / "eval" / f"{name}.json").read_text())


def _static(root):
    return {r["policy"]: r for r in read_csv(root / "sim" / "static.csv")}


def test_criterion_04_teacher_quality(full_run):
    root, cfg = full_run
    demos = json.loads((root / "data" / "demos.meta.json").read_text())["n"]
    rep = _eval(root, "teacher")["aggregates"]
    secs = _stage_seconds(root, "train-teacher")
    ok = demos == 2000 and rep["n_obs"] == 200 and rep["full_coverage_frac"] >= 0.95 and rep["fidelity"]["mean"] >= 0.9 and secs < 600
    verdict(4, ok, f"{demos} demos, full coverage on {rep['full_coverage_frac']:.3f} of {rep['n_obs']} obs, fidelity {rep['fidelity']['mean']:.3f}, training {secs:.0f} s")


def test_criterion_05_one_step_degradation(full_run):
    root, _ = full_run
    sim = _static(root)
    drop = float(sim["teacher"]["success_rate"]) - float(sim["teacher_n1"]["success_rate"])
    collapse = _eval(root, "teacher")["aggregates"]["collapse_norm"]["mean"] - _eval(root, "teacher_n1")["aggregates"]["collapse_norm"]["mean"]
    verdict(5, drop >= 0.25 and collapse >= 0.3, f"success drop {100 * drop:.0f} pp, normalized collapse drop {collapse:.2f}")


def test_criterion_06_student_fidelity(full_run):
    root, _ = full_run
    sim = _static(root)
    t_succ, s_succ = float(sim["teacher"]["success_rate"]), float(sim["student"]["success_rate"])
    t_cov = _eval(root, "teacher")["aggregates"]["coverage"]["mean"]
    student = _eval(root, "student")
    s_cov = student["aggregates"]["coverage"]["mean"]
    ok = s_succ >= 0.85 * t_succ and s_cov >= 0.85 * t_cov and student["nfe_per_sample"] == 1
    verdict(6, ok, f"success {s_succ:.2f} vs teacher {t_succ:.2f} (ratio {s_succ / t_succ:.2f}), coverage {s_cov:.3f} vs {t_cov:.3f} (ratio {s_cov / t_cov:.2f}), NFE {student['nfe_per_sample']}")


def test_criterion_07_speedup(full_run):
    root, _ = full_run
    timing = json.loads((root / "speed" / "timing.json").read_text())
    t, s = timing["teacher"], timing["student"]
    ok = t["nfe_per_chunk"] == 50 and s["nfe_per_chunk"] == 1 and min(t["repeats"], s["repeats"]) >= 100 and timing["speedup"] >= 10
    verdict(7, ok, f"NFE {t['nfe_per_chunk']}:{s['nfe_per_chunk']}, median {t['ms_median']:.2f} ms vs {s['ms_median']:.3f} ms ({timing['speedup']:.1f}x, {min(t['repeats'], s['repeats'])} repeats)")


def test_criterion_08_k_ablation(full_run):
    root, _ = full_run
    rows = read_csv(root / "ablate" / "ablate_k.csv")
    ks = [int(r["K"]) for r in rows]
    cov = [float(r["coverage"]) for r in rows]
    monotone = all(b >= a for a, b in zip(cov, cov[1:]))
    ok = ks == [1, 4, 10, 16] and monotone and cov[-1] - cov[0] >= 0.25
    verdict(8, ok, "coverage " + ", ".join(f"K={k}: {c:.3f}" for k, c in zip(ks, cov)) + f"; gain {cov[-1] - cov[0]:.3f}")


def test_criterion_09_dynamic_target(full_run):
    root, _ = full_run
    summary = json.loads((root / "sim" / "summary.json").read_text())
    s_star = summary["s_star"]
    grid = read_csv(root / "sim" / "sweep.csv")
    sim = _static(root)

    def rate(policy, speed):
        (row,) = [r for r in grid if r["policy"] == policy and np.isclose(float(r["speed"]), speed, rtol=1e-5)]
        return float(row["success_rate"]), int(row["episodes"])

    t_star, n_t = rate("teacher", s_star)
    s_star_rate, n_s = rate("student", s_star)
    recovered = {}
    for p in ("teacher", "student"):
        r0, _ = rate(p, 0.0)
        recovered[p] = float(sim[p]["ci_lo"]) <= r0 <= float(sim[p]["ci_hi"])
    ok = s_star is not None and n_t == n_s == 100 and t_star == 0.0 and s_star_rate >= 0.5 and all(recovered.values())
    verdict(9, ok, f"s*={s_star:.3f}: teacher {t_star:.2f}, student {s_star_rate:.2f} over {n_t} episodes; speed 0 within static CI: {recovered}")


# ---------------------------------------------------------------------------
# 10: determinism

SMALL = {
    "seed": 5,
    "task": {"n_demos": 60},
    "cfm": {"epochs": 3, "steps": 10, "K": 4, "batch_size": 16},
    "distill": {"K": 4, "n_obs": 8, "epochs": 3, "batch_items": 4},
    "eval": {"n_obs": 4, "n_per_mode": 16, "K": 4},
    "simloop": {"n_episodes": 3, "speed_factors": [0.0, 1.0], "budget": 80},
    "ablate": {"ks": [1, 4], "t_e": [4, 8], "n_episodes": 3},
    "speed": {"repeats": 30, "warmup": 0},
}


def test_criterion_10_determinism(tmp_path, full_run):
    digests, hashes = [], []
    for name in ("a", "b"):
        root = tmp_path / name
        run_all(parse_config(SMALL, out_dir=str(root)))
        m = Manifest(root).read()
        digests.append(Manifest(root).digest())
        hashes.append({k: v["sha256"] for k, v in m["artifacts"].items() if not v["timing"]})
    same_small = digests[0] == digests[1] and hashes[0] == hashes[1]
    # the full-scale demo set regenerates byte for byte
    root, cfg = full_run
    again = Run.open(cfg.model_copy(update={"out_dir": str(tmp_path / "full")}))
    cmd_gen_data(again)
    ref = Manifest(root).read()["artifacts"]
    regen = Manifest(tmp_path / "full").read()["artifacts"]
    same_full = bool(regen) and all(ref[k]["sha256"] == v["sha256"] for k, v in regen.items())
    verdict(10, same_small and same_full, f"pipeline digests equal over {len(hashes[0])} non-timing artifacts={same_small}; full-scale demos ({len(regen)} files) identical={same_full}")
