"""Experiment stages behind the CLI, plus the run manifest.

Directory layout under ``out_dir``::

    config.json                 canonical copy of the validated config
    manifest.json               artifact hashes (appended under an exclusive lock)
    data/demos.meta.json        demo corpus index; data/demo_XXXXX.{tset,robs}
    data/eval_scenes.json       held-out canonical scenes
    teacher/model.fdck          encoder.* and teacher.* parameters
    teacher/train_log.csv
    teacher_sets/               distillation dataset (meta.json + per-obs TSET/EOBS/ROBS)
    student/model.fdck, student/train_log.csv
    eval/<policy>.csv|json      EvalReports
    sim/*.csv, sim/summary.json
    speed/timing.csv|json       (timing: exempt from hash determinism)
    ablate/ablate_k.csv, ablate/ablate_te.csv
"""

from __future__ import annotations

import csv
import datetime as _dt
import hashlib
import json
import logging
import shutil
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from filelock import FileLock

from . import __version__
from . import io
from . import metrics as M
from . import simloop as S
from . import tasks as T
from .cfm import OdeSamplerConfig, generate_teacher_set, train_teacher
from .config import ExperimentConfig
from .diffcore import load_checkpoint, save_checkpoint
from .distill import (
    build_distill_dataset,
    imle_train_student,
    load_distill_dataset,
    student_sample_set,
)
from .encoder import ObsBatch, ObservationEncoder
from .nets import StudentNet, TeacherNet

log = logging.getLogger("flowdistill")

# per-stage rng stream ids
_DEMOS, _ENC_INIT, _TEACHER_INIT, _TEACHER_TRAIN, _SETS, _STUDENT_INIT = 1, 2, 3, 4, 5, 6
_STUDENT_TRAIN, _EVAL, _SIM, _ABLATE, _EVAL_SCENES, _SPEED = 7, 8, 9, 10, 11, 12


class MissingArtifactError(RuntimeError):
    """An upstream artifact is absent or does not match the manifest."""


class OutputExistsError(RuntimeError):
    pass


def stage_rng(cfg: ExperimentConfig, stage: int, *extra: int) -> np.random.Generator:
    return np.random.default_rng([cfg.seed, stage, *extra])


def stage_seed(cfg: ExperimentConfig, stage: int) -> int:
    return int(np.random.SeedSequence([cfg.seed, stage]).generate_state(1)[0])


# ---------------------------------------------------------------------------
# manifest


class Manifest:
    """``manifest.json``: artifact hashes plus a run history.

    Timing artifacts are recorded but excluded from :meth:`digest`.
    """

    def __init__(self, root: Path):
        self.root = Path(root)
        self.path = self.root / "manifest.json"
        self.lock = FileLock(str(self.root / "manifest.json.lock"))

    def read(self) -> dict:
        if not self.path.exists():
            return {"tool_version": __version__, "config_hash": None, "artifacts": {}, "runs": []}
        return json.loads(self.path.read_text())

    def record(self, command: str, cfg: ExperimentConfig, paths: list[Path], timing: tuple[Path, ...] = (), started: str = "") -> dict:
        with self.lock:
            data = self.read()
            data["tool_version"] = __version__
            data["config_hash"] = cfg.config_hash()
            for p in paths:
                rel = str(Path(p).relative_to(self.root))
                data["artifacts"][rel] = {"sha256": io.sha256_file(p), "command": command, "timing": Path(p) in timing}
            data["runs"].append({"command": command, "config_hash": data["config_hash"], "started": started, "finished": _now()})
            self.path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")
            return data

    def require(self, rel: str, producer: str) -> Path:
        """Path of an upstream artifact, verified against its recorded hash."""
        path = self.root / rel
        entry = self.read()["artifacts"].get(rel)
        if not path.exists() or entry is None:
            raise MissingArtifactError(f"missing {rel}; run `{producer}` first")
        if io.sha256_file(path) != entry["sha256"]:
            raise MissingArtifactError(f"{rel} does not match its manifest hash; re-run `{producer}`")
        return path

    def verify(self) -> list[str]:
        """Artifacts that are missing or hash-mismatched."""
        bad = []
        for rel, entry in self.read()["artifacts"].items():
            p = self.root / rel
            if not p.exists() or io.sha256_file(p) != entry["sha256"]:
                bad.append(rel)
        return bad

    def digest(self) -> str:
        """Hash over the config hash and every non-timing artifact hash."""
        data = self.read()
        h = hashlib.sha256((data.get("config_hash") or "").encode())
        for rel in sorted(data["artifacts"]):
            entry = data["artifacts"][rel]
            if not entry["timing"]:
                h.update(f"{rel}:{entry['sha256']}\n".encode())
        return h.hexdigest()


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


# ---------------------------------------------------------------------------
# context


@dataclass
class Run:
    cfg: ExperimentConfig
    root: Path

    @classmethod
    def open(cls, cfg: ExperimentConfig, out: str | Path | None = None) -> "Run":
        root = Path(out if out is not None else cfg.out_dir)
        root.mkdir(parents=True, exist_ok=True)
        cfg_path = root / "config.json"
        text = json.dumps(cfg.model_dump(mode="json"), indent=2, sort_keys=True) + "\n"
        if not cfg_path.exists() or cfg_path.read_text() != text:
            cfg_path.write_text(text)
        return cls(cfg, root)

    @property
    def manifest(self) -> Manifest:
        return Manifest(self.root)

    @property
    def task(self) -> T.TaskSpec:
        return self.cfg.task.spec()

    def stage_dir(self, name: str, force: bool) -> Path:
        d = self.root / name
        if d.exists() and any(d.iterdir()):
            if not force:
                raise OutputExistsError(f"{d} already exists and is not empty; pass --force to overwrite")
            shutil.rmtree(d)
        d.mkdir(parents=True, exist_ok=True)
        return d

    # -- model construction ----------------------------------------------

    def new_models(self) -> tuple[ObservationEncoder, TeacherNet]:
        net = self.cfg.network
        enc = ObservationEncoder(net.encoder_config(), seed=stage_seed(self.cfg, _ENC_INIT))
        teacher = TeacherNet(net.net_config(self.cfg.task.horizon), seed=stage_seed(self.cfg, _TEACHER_INIT))
        return enc, teacher

    def load_teacher(self) -> tuple[ObservationEncoder, TeacherNet, str]:
        path = self.manifest.require("teacher/model.fdck", "train-teacher")
        enc, teacher = self.new_models()
        state = load_checkpoint(path)
        enc.load_state_dict({k[8:]: v for k, v in state.items() if k.startswith("encoder.")})
        teacher.load_state_dict({k[8:]: v for k, v in state.items() if k.startswith("teacher.")})
        return enc, teacher, io.sha256_file(path)

    def new_student(self) -> StudentNet:
        return StudentNet(self.cfg.network.net_config(self.cfg.task.horizon), seed=stage_seed(self.cfg, _STUDENT_INIT))

    def load_student(self, rel: str = "student/model.fdck") -> StudentNet:
        path = self.manifest.require(rel, "distill")
        student = self.new_student()
        student.load_state_dict(load_checkpoint(path))
        return student

    def load_demos(self) -> tuple[ObsBatch, np.ndarray, list]:
        meta_path = self.manifest.require("data/demos.meta.json", "gen-data")
        meta = json.loads(meta_path.read_text())
        obs, trajs = [], []
        for item in meta["demos"]:
            obs.append(io.read_robs(self.root / "data" / item["robs"]))
            trajs.append(io.read_tset(self.root / "data" / item["tset"])[0])
        return ObsBatch.from_observations(obs), np.stack(trajs), obs

    def eval_scenes(self) -> list[T.Scene]:
        path = self.manifest.require("data/eval_scenes.json", "gen-data")
        return [T.Scene.from_dict(d) for d in json.loads(path.read_text())["scenes"]]


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(run: Run, force: bool = False) -> dict:
    started = _now()
    cfg, task = run.cfg, run.task
    d = run.stage_dir("data", force)
    rng = stage_rng(cfg, _DEMOS)
    items, paths = [], []
    for i in range(cfg.task.n_demos):
        demo = T.sample_expert_demo(task, rng)
        tset, robs = f"demo_{i:05d}.tset", f"demo_{i:05d}.robs"
        io.write_tset(d / tset, demo.trajectory[None])
        io.write_robs(d / robs, demo.observation)
        items.append({"id": i, "mode": demo.mode, "tset": tset, "robs": robs, "scene": demo.scene.to_dict()})
        paths += [d / tset, d / robs]
    meta = {"task": cfg.task.model_dump(mode="json"), "seed": cfg.seed, "n": len(items), "demos": items}
    (d / "demos.meta.json").write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")
    srng = stage_rng(cfg, _EVAL_SCENES)
    scenes = [T.sample_canonical_scene(task, srng).to_dict() for _ in range(cfg.eval.n_obs)]
    (d / "eval_scenes.json").write_text(json.dumps({"scenes": scenes}, indent=1, sort_keys=True) + "\n")
    paths += [d / "demos.meta.json", d / "eval_scenes.json"]
    run.manifest.record("gen-data", cfg, paths, started=started)
    return {"n_demos": len(items), "modes": np.bincount([it["mode"] for it in items], minlength=task.n_modes).tolist()}


def cmd_train_teacher(run: Run, force: bool = False, progress=None) -> dict:
    started = _now()
    cfg = run.cfg
    obs, trajs, _ = run.load_demos()
    d = run.stage_dir("teacher", force)
    enc, teacher = run.new_models()
    tlog = train_teacher(obs, trajs, enc, teacher, cfg.cfm.train_config(stage_seed(cfg, _TEACHER_TRAIN)), d / "train_log.csv", progress)
    state = {f"encoder.{k}": v for k, v in enc.state_dict().items()}
    state.update({f"teacher.{k}": v for k, v in teacher.state_dict().items()})
    save_checkpoint(d / "model.fdck", state)
    run.manifest.record("train-teacher", cfg, [d / "model.fdck", d / "train_log.csv"], started=started)
    return {"epochs": len(tlog.rows), "final_loss": tlog.losses[-1] if tlog.rows else None, "stopped_early": tlog.stopped_early}


def cmd_sample_teacher(run: Run, force: bool = False) -> dict:
    started = _now()
    cfg = run.cfg
    enc, teacher, thash = run.load_teacher()
    _, _, raw = run.load_demos()
    d = run.stage_dir("teacher_sets", force)
    ds = build_distill_dataset(
        teacher, enc, raw[: cfg.distill.n_obs], cfg.distill.K, cfg.cfm.sampler(), d, thash, seed=stage_seed(cfg, _SETS)
    )
    run.manifest.record("sample-teacher", cfg, sorted(p for p in d.iterdir() if p.is_file()), started=started)
    return {"n_obs": len(ds), "K": ds.K}


def _train_student(run: Run, ds, out_dir: Path, tag: str, progress=None, epochs: int | None = None) -> tuple[StudentNet, list]:
    cfg = run.cfg
    if cfg.distill.init_from_teacher:
        _, teacher, _ = run.load_teacher()
        student = StudentNet.from_teacher(teacher, seed=stage_seed(cfg, _STUDENT_INIT))
    else:
        student = run.new_student()
    tcfg = cfg.distill.train_config(stage_seed(cfg, _STUDENT_TRAIN))
    if epochs is not None:
        tcfg = replace(tcfg, epochs=epochs)
    slog = imle_train_student(ds, student, tcfg, out_dir / f"{tag}train_log.csv", progress)
    save_checkpoint(out_dir / f"{tag}model.fdck", student.state_dict())
    return student, slog.rows


def cmd_distill(run: Run, force: bool = False, progress=None) -> dict:
    started = _now()
    _, _, thash = run.load_teacher()
    run.manifest.require("teacher_sets/meta.json", "sample-teacher")
    ds = load_distill_dataset(run.root / "teacher_sets", expected_teacher_hash=thash)
    d = run.stage_dir("student", force)
    _, rows = _train_student(run, ds, d, "", progress)
    run.manifest.record("distill", run.cfg, [d / "model.fdck", d / "train_log.csv"], started=started)
    return {"epochs": len(rows), "final_loss": rows[-1][1] if rows else None}


def _policies(run: Run, include_student: bool = True) -> dict:
    enc, teacher, _ = run.load_teacher()
    pol = {
        "teacher": S.TeacherPolicy(enc, teacher, run.cfg.cfm.sampler(), name="teacher"),
        "teacher_n1": S.TeacherPolicy(enc, teacher, run.cfg.cfm.sampler(steps=1), name="teacher_n1"),
    }
    if include_student:
        pol["student"] = S.StudentPolicy(enc, run.load_student())
    return pol


def mode_references(run: Run, scenes: list[T.Scene]) -> list[M.ModeReference]:
    task = run.task
    return [
        M.mode_reference(task, T.snapshot(task, sc), stage_rng(run.cfg, _EVAL, 0, i), run.cfg.eval.n_per_mode)
        for i, sc in enumerate(scenes)
    ]


def generate_eval_sets(run: Run, scenes, enc, teacher=None, student=None, steps: int | None = None, K: int | None = None) -> list:
    task, K = run.task, K or run.cfg.eval.K
    out = []
    for i, sc in enumerate(scenes):
        e = enc.assemble(T.render_observation(task, T.snapshot(task, sc))).vector[0]
        rng = stage_rng(run.cfg, _EVAL, 1, i)
        if student is not None:
            out.append(student_sample_set(student, e, K, rng))
        else:
            out.append(generate_teacher_set(teacher, e, K, run.cfg.cfm.sampler(steps=steps), rng))
    return out


def cmd_eval(run: Run, force: bool = False) -> dict:
    started = _now()
    cfg = run.cfg
    enc, teacher, _ = run.load_teacher()
    student = run.load_student()
    scenes = run.eval_scenes()
    refs = mode_references(run, scenes)
    d = run.stage_dir("eval", force)
    t50 = generate_eval_sets(run, scenes, enc, teacher)
    t1 = generate_eval_sets(run, scenes, enc, teacher, steps=1)
    st = generate_eval_sets(run, scenes, enc, student=student)
    summary, paths = {}, []
    for name, sets in (("teacher", t50), ("teacher_n1", t1), ("student", st)):
        rep = M.evaluate_sets(name, sets, refs, teacher_sets=t50)
        rep.extra["nfe_per_sample"] = {"teacher": cfg.cfm.sampler().nfe, "teacher_n1": 1, "student": 1}[name]
        rep.write(d / f"{name}.csv", d / f"{name}.json")
        summary[name] = rep.aggregates()
        paths += [d / f"{name}.csv", d / f"{name}.json"]
    run.manifest.record("eval", cfg, paths, started=started)
    return summary


def cmd_simulate(run: Run, force: bool = False) -> dict:
    started = _now()
    cfg, sim = run.cfg, run.cfg.simloop
    policies = _policies(run)
    d = run.stage_dir("sim", force)
    lat = sim.latency()
    H = cfg.task.horizon
    seed = stage_seed(cfg, _SIM)
    # static closed loop on the configured task
    static_rows, episodes = [], []
    for name, pol in policies.items():
        res = S.evaluate_policy(pol, run.task, lat, sim.rollout(H), sim.n_episodes, seed)
        mean, lo, hi = M.bootstrap_ci([r.success for r in res])
        static_rows.append({"policy": name, "success_rate": mean, "ci_lo": lo, "ci_hi": hi, "episodes": len(res)})
        episodes += [(i, name, 0.0, r) for i, r in enumerate(res)]
    S.write_results_csv(d / "static_episodes.csv", episodes)
    _write_rows(d / "static.csv", static_rows)
    # moving target: same scenes and seed as the static rows, so speed 0 reproduces them
    dyn_task = cfg.task.spec(name="dynamic-target")
    try:
        s_star = S.critical_speed(lat, cfg.cfm.sampler().nfe, 1, sim.T_e, sim.dt, dyn_task.success_radius)
        speed_unit = s_star
    except ValueError:
        # no latency gap (e.g. a very short sampler): scale speeds by the fast planner's bound
        s_star = None
        speed_unit = dyn_task.success_radius / ((S.hold_steps(lat.latency_ms(1), sim.dt) + sim.T_e) * sim.dt)
    speeds = [f * speed_unit for f in sim.speed_factors]
    dyn_pols = {k: policies[k] for k in ("teacher", "student")}
    grid = S.sweep_dynamics(
        dyn_pols, dyn_task, speeds, sim.rollout(H), lat, sim.n_episodes, seed, d / "sweep.csv", d / "sweep_episodes.csv"
    )
    summary = {
        "s_star": s_star,
        "speed_unit": speed_unit,
        "teacher_hold_steps": S.hold_steps(lat.latency_ms(cfg.cfm.sampler().nfe), sim.dt),
        "student_hold_steps": S.hold_steps(lat.latency_ms(1), sim.dt),
        "static": static_rows,
        "sweep": grid,
    }
    (d / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    paths = [d / n for n in ("static_episodes.csv", "static.csv", "sweep.csv", "sweep_episodes.csv", "summary.json")]
    run.manifest.record("simulate", cfg, paths, started=started)
    return summary


def cmd_speed(run: Run, force: bool = False) -> dict:
    started = _now()
    cfg = run.cfg
    enc, teacher, _ = run.load_teacher()
    student = run.load_student()
    d = run.stage_dir("speed", force)
    task = run.task
    scene = run.eval_scenes()[0]
    e = enc.assemble(T.render_observation(task, T.snapshot(task, scene))).vector[0]
    rng = stage_rng(cfg, _SPEED)
    sampler = cfg.cfm.sampler()
    H, D = cfg.task.horizon, 2
    rows = {}
    rows["teacher"] = M.measure_inference(
        lambda: generate_teacher_set(teacher, e, 1, sampler, rng), lambda: teacher.nfe, cfg.speed.repeats, cfg.speed.warmup
    )
    rows["student"] = M.measure_inference(
        lambda: student.forward(rng.standard_normal((1, H, D)).astype(np.float32), e[None]),
        lambda: student.nfe,
        cfg.speed.repeats,
        cfg.speed.warmup,
    )
    out = {
        name: {"ms_median": t.ms_median, "ms_p25": t.ms_p25, "ms_p75": t.ms_p75, "nfe_per_chunk": t.nfe_per_chunk, "hz": t.hz, "repeats": t.repeats}
        for name, t in rows.items()
    }
    out["speedup"] = rows["teacher"].ms_median / rows["student"].ms_median
    out["nfe_ratio"] = rows["teacher"].nfe_per_chunk / rows["student"].nfe_per_chunk
    _write_rows(d / "timing.csv", [{"policy": k, **v} for k, v in out.items() if isinstance(v, dict)])
    (d / "timing.json").write_text(json.dumps(out, indent=2, sort_keys=True) + "\n")
    timing = (d / "timing.csv", d / "timing.json")
    run.manifest.record("speed", cfg, list(timing), timing=timing, started=started)
    return out


def cmd_ablate(run: Run, force: bool = False, progress=None) -> dict:
    """K sweep (students distilled from prefixes of the stored teacher sets) and a
    T_e sweep of the distilled student in closed loop."""
    started = _now()
    cfg = run.cfg
    enc, _, thash = run.load_teacher()
    run.manifest.require("teacher_sets/meta.json", "sample-teacher")
    ds = load_distill_dataset(run.root / "teacher_sets", expected_teacher_hash=thash)
    d = run.stage_dir("ablate", force)
    scenes = run.eval_scenes()
    refs = mode_references(run, scenes)
    krows, paths = [], []
    for k in cfg.ablate.ks:
        student, _ = _train_student(run, ds.with_k(k), d, f"k{k}_", progress, epochs=cfg.ablate.epochs)
        sets = generate_eval_sets(run, scenes, enc, student=student)
        rep = M.evaluate_sets(f"student_k{k}", sets, refs)
        agg = rep.aggregates()
        krows.append({"K": k, "coverage": agg["coverage"]["mean"], "full_coverage_frac": agg["full_coverage_frac"], "fidelity": agg["fidelity"]["mean"]})
        paths += [d / f"k{k}_model.fdck", d / f"k{k}_train_log.csv"]
    _write_rows(d / "ablate_k.csv", krows)
    student = run.load_student()
    pol = S.StudentPolicy(enc, student)
    sim = cfg.simloop
    terows = []
    for te in cfg.ablate.t_e:
        res = S.evaluate_policy(pol, run.task, sim.latency(), sim.rollout(cfg.task.horizon, T_e=te), cfg.ablate.n_episodes, stage_seed(cfg, _ABLATE))
        mean, lo, hi = M.bootstrap_ci([r.success for r in res])
        terows.append({"T_e": te, "success_rate": mean, "ci_lo": lo, "ci_hi": hi, "mean_replans": float(np.mean([r.replans for r in res]))})
    _write_rows(d / "ablate_te.csv", terows)
    paths += [d / "ablate_k.csv", d / "ablate_te.csv"]
    run.manifest.record("ablate", cfg, paths, started=started)
    return {"k": krows, "t_e": terows}


def _write_rows(path: Path, rows: list[dict]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        if not rows:
            return
        w = csv.DictWriter(f, fieldnames=list(rows[0]))
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{v:.6g}" if isinstance(v, float) else v) for k, v in r.items()})


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-teacher": cmd_train_teacher,
    "sample-teacher": cmd_sample_teacher,
    "distill": cmd_distill,
    "eval": cmd_eval,
    "simulate": cmd_simulate,
    "speed": cmd_speed,
    "ablate": cmd_ablate,
}

_TRAINING = ("train-teacher", "distill", "ablate")
PIPELINE = ("gen-data", "train-teacher", "sample-teacher", "distill", "eval", "simulate", "speed", "ablate")


def up_to_date(run: Run, command: str) -> bool:
    """Whether ``command``'s last recorded run used this config and its artifacts still verify."""
    data = run.manifest.read()
    runs = [r for r in data["runs"] if r["command"] == command]
    if not runs or runs[-1].get("config_hash") != run.cfg.config_hash():
        return False
    bad = set(run.manifest.verify())
    return not any(e["command"] == command and rel in bad for rel, e in data["artifacts"].items())


def run_all(
    cfg: ExperimentConfig,
    out=None,
    force: bool = False,
    stages=PIPELINE,
    resume: bool = False,
    progress=None,
    on_result=None,
) -> dict:
    """Run ``stages`` in order. With ``resume``, leading stages that are
    :func:`up_to_date` are skipped; everything after the first stale stage reruns.
    ``on_result(name, result)`` is called after each stage."""
    run = Run.open(cfg, out)
    results, stale = {}, not resume
    for name in stages:
        if not stale and up_to_date(run, name):
            results[name] = "up-to-date"
        else:
            stale = True
            kwargs = {"force": force or resume}
            if name in _TRAINING:
                kwargs["progress"] = progress
            results[name] = COMMANDS[name](run, **kwargs)
        if on_result is not None:
            on_result(name, results[name])
    return results
