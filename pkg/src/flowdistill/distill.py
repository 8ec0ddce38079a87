"""Offline teacher-set dataset and set-level IMLE training of the one-step student."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import io
from .cfm import OdeSamplerConfig, TrainingDiverged, TrainLog, cosine_lr, generate_teacher_set
from .diffcore import Adam, Graph, NonFiniteError, Tensor, ops
from .diffcore.tensor import as_tensor
from .encoder import ObservationEncoder
from .nets import StudentNet
from .tasks import RawObservation


class DatasetHashMismatch(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# Chamfer


def _assignments(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Hard nearest-neighbour indices for batched flattened sets a (B,Ka,F), b (B,Kb,F).

    Returns (nn of each a_i in b, nn of each b_j in a); ties go to the lowest index.
    """
    d2 = ((a[:, :, None, :] - b[:, None, :, :]) ** 2).sum(-1)
    return d2.argmin(2), d2.argmin(1)


def _canonical_order(x: np.ndarray) -> np.ndarray:
    """Per-batch lexicographic row order of (B, K, F); identical rows keep their relative order."""
    return np.stack([np.lexsort(item.T[::-1]) for item in x])


def batched_chamfer(set_a, set_b) -> Tensor:
    """Mean over the batch of the bi-directional Chamfer distance.

    ``set_a`` (B, Ka, H, D) is treated as a constant target; ``set_b``
    (B, Kb, H, D) may be a Tensor and receives gradients through the
    argmin-selected pairs.
    """
    a = np.asarray(getattr(set_a, "data", set_a))
    b = as_tensor(set_b)
    if a.ndim != 4 or b.ndim != 4 or a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ValueError(f"chamfer: incompatible set shapes {a.shape} and {b.shape}")
    B, Ka = a.shape[:2]
    Kb = b.shape[1]
    if Ka == 0 or Kb == 0:
        raise ValueError("chamfer: sets must be nonempty")
    F = int(np.prod(a.shape[2:]))
    rows = np.arange(B)[:, None]
    offs = (np.arange(B) * Kb)[:, None]
    # both sets are put in a canonical row order first, so every reduction
    # runs in the same order for any permutation of either set
    a_f = a.reshape(B, Ka, F).astype(b.dtype)
    a_f = a_f[rows, _canonical_order(a_f)]
    b_raw = b.data.reshape(B, Kb, F)
    b_order = _canonical_order(b_raw)
    b_f = ops.take(ops.reshape(b, (B * Kb, F)), (b_order + offs).reshape(-1))
    nn_ab, nn_ba = _assignments(a_f.astype(np.float64), b_raw[rows, b_order].astype(np.float64))
    # a_i -> nearest b_j
    b_sel = ops.take(b_f, (nn_ab + offs).reshape(-1))
    term1 = ops.scale(ops.squared_error(b_sel, Tensor(a_f.reshape(B * Ka, F))), F)
    # b_j -> nearest a_i
    a_sel = a_f[rows, nn_ba].reshape(B * Kb, F)
    term2 = ops.scale(ops.squared_error(b_f, Tensor(a_sel)), F)
    return ops.add(term1, term2)


def chamfer_distance(set_a, set_b) -> Tensor:
    """(1/|A|) sum_i min_j |a_i - b_j|^2 + (1/|B|) sum_j min_i |a_i - b_j|^2 for (K, H, D) sets."""
    a = np.asarray(getattr(set_a, "data", set_a))
    b = as_tensor(set_b)
    if a.ndim != 3 or b.ndim != 3:
        raise ValueError("chamfer_distance expects (K, H, D) sets")
    if len(a) == 0 or b.shape[0] == 0:
        raise ValueError("chamfer: sets must be nonempty")
    if a.shape[1:] != b.shape[1:]:
        raise ValueError(f"chamfer: trajectory shapes differ: {a.shape[1:]} vs {b.shape[1:]}")
    return batched_chamfer(a[None], ops.reshape(b, (1,) + b.shape))


# ---------------------------------------------------------------------------
# dataset


@dataclass
class DistillDataset:
    root: Path
    meta: dict
    embeddings: np.ndarray  # (N, E)
    sets: np.ndarray  # (N, K, H, D)

    @property
    def K(self) -> int:
        return self.meta["K"]

    def __len__(self) -> int:
        return len(self.sets)

    def with_k(self, k: int) -> "DistillDataset":
        """View using only the first ``k`` teacher samples of every set."""
        if not 1 <= k <= self.K:
            raise ValueError(f"k must be in [1, {self.K}]")
        return DistillDataset(self.root, {**self.meta, "K": k}, self.embeddings, self.sets[:, :k])


def _item_name(i: int) -> str:
    return f"obs_{i:05d}"


def build_distill_dataset(
    teacher,
    encoder: ObservationEncoder,
    observations: Sequence[RawObservation],
    K: int,
    sampler_cfg: OdeSamplerConfig,
    out_dir,
    teacher_hash: str,
    seed: int = 0,
) -> DistillDataset:
    """Cache E_obs and a K-sample teacher set per observation and write them to ``out_dir``.

    Each observation gets its own rng stream ``(seed, i)``, so the result does
    not depend on processing order.
    """
    if K < 1:
        raise ValueError("K must be >= 1")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    embs, sets, files = [], [], {}
    for i, raw in enumerate(observations):
        e = encoder.assemble(raw).vector[0]
        s = generate_teacher_set(teacher, e, K, sampler_cfg, np.random.default_rng([seed, i]))
        name = _item_name(i)
        files[f"{name}.robs"] = io.write_robs(out / f"{name}.robs", raw)
        files[f"{name}.eobs"] = io.write_eobs(out / f"{name}.eobs", e)
        files[f"{name}.tset"] = io.write_tset(out / f"{name}.tset", s)
        embs.append(np.asarray(io.decode_eobs(io.encode_eobs(e))))
        sets.append(io.decode_tset(io.encode_tset(s)))
    H, D = teacher.cfg.horizon, teacher.cfg.action_dim
    meta = {
        "K": K,
        "H": H,
        "D": D,
        "n": len(observations),
        "seed": seed,
        "teacher_hash": teacher_hash,
        "sampler": asdict(sampler_cfg),
        "files": files,
    }
    (out / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return DistillDataset(out, meta, np.stack(embs), np.stack(sets))


def load_distill_dataset(root, expected_teacher_hash: str | None = None, verify_files: bool = True) -> DistillDataset:
    root = Path(root)
    meta = json.loads((root / "meta.json").read_text())
    if expected_teacher_hash is not None and meta["teacher_hash"] != expected_teacher_hash:
        raise DatasetHashMismatch(
            f"dataset was generated by teacher {meta['teacher_hash'][:12]}…, expected {expected_teacher_hash[:12]}…"
        )
    embs, sets = [], []
    for i in range(meta["n"]):
        name = _item_name(i)
        for ext in ("eobs", "tset"):
            path = root / f"{name}.{ext}"
            blob = path.read_bytes()
            if verify_files and io.sha256_bytes(blob) != meta["files"][f"{name}.{ext}"]:
                raise DatasetHashMismatch(f"{path.name} does not match its recorded hash")
            (embs if ext == "eobs" else sets).append(io.decode_eobs(blob) if ext == "eobs" else io.decode_tset(blob))
    ds = DistillDataset(root, meta, np.stack(embs), np.stack(sets))
    if ds.sets.shape[1:] != (meta["K"], meta["H"], meta["D"]):
        raise DatasetHashMismatch(f"set shape {ds.sets.shape[1:]} disagrees with meta")
    return ds


# ---------------------------------------------------------------------------
# IMLE training


@dataclass
class StudentTrainConfig:
    epochs: int = 300
    batch_items: int = 16
    lr: float = 1e-3
    lr_min: float = 1e-4
    seed: int = 0
    patience: int = 40
    min_delta: float = 1e-3
    max_steps: int | None = None


def imle_train_student(dataset: DistillDataset, student: StudentNet, cfg: StudentTrainConfig, log_path=None, progress=None) -> TrainLog:
    """Minimise the mean Chamfer distance between each teacher set and K student
    hypotheses from fresh noise, with Adam. Only the student and the cached
    dataset are touched."""
    params = student.parameters()
    opt = Adam(params, lr=cfg.lr)
    rng = np.random.default_rng(cfg.seed)
    N, K = len(dataset), dataset.K
    H, D = student.cfg.horizon, student.cfg.action_dim
    nb = max(1, math.ceil(N / cfg.batch_items))
    total = cfg.epochs * nb if cfg.max_steps is None else min(cfg.epochs * nb, cfg.max_steps)
    log = TrainLog()
    best, since = math.inf, 0
    for epoch in range(cfg.epochs):
        if opt.state.step >= total:
            break
        perm = rng.permutation(N)
        losses = []
        for b in range(nb):
            if opt.state.step >= total:
                break
            idx = perm[b * cfg.batch_items : (b + 1) * cfg.batch_items]
            n = len(idx)
            opt.state.lr = cosine_lr(cfg.lr, cfg.lr_min, opt.state.step, total)
            z = rng.standard_normal((n * K, H, D)).astype(np.float32)
            e = np.repeat(dataset.embeddings[idx], K, axis=0).astype(np.float32)
            try:
                with Graph() as g:
                    out = student.forward(z, e)
                    loss = batched_chamfer(dataset.sets[idx], ops.reshape(out, (n, K, H, D)))
                grads = g.backward(loss, params)
            except NonFiniteError as exc:
                raise TrainingDiverged(f"non-finite value at epoch {epoch}, batch {b}: {exc}") from None
            value = float(loss.data)
            if not math.isfinite(value):
                raise TrainingDiverged(f"loss became {value} at epoch {epoch}, batch {b}")
            opt.step(grads)
            losses.append(value)
        if not losses:
            break
        mean = float(np.mean(losses))
        log.rows.append((epoch, mean, opt.state.lr))
        if progress is not None:
            progress(epoch, mean)
        if mean < best * (1 - cfg.min_delta):
            best, since = mean, 0
        else:
            since += 1
            if since >= cfg.patience:
                log.stopped_early = True
                break
    if log_path is not None:
        Path(log_path).parent.mkdir(parents=True, exist_ok=True)
        log.write_csv(log_path)
    return log


def student_sample_set(student: StudentNet, e_obs, K: int, rng: np.random.Generator) -> np.ndarray:
    """K hypotheses from independent noise; one forward evaluation per trajectory."""
    if K < 1:
        raise ValueError("K must be >= 1")
    H, D = student.cfg.horizon, student.cfg.action_dim
    z = rng.standard_normal((K, H, D)).astype(np.float32)
    e = np.broadcast_to(np.asarray(e_obs, np.float32).reshape(1, -1), (K, np.size(e_obs))).copy()
    return np.asarray(student.forward(z, e).data)
