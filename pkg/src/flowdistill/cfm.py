"""Conditional flow matching: linear-path training and ODE sampling.

The flow runs in normalised action units: noise ``tau_0`` is standard normal
after dividing trajectories by the network's ``action_scale``. At the API all
trajectories are in task units.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .diffcore import Adam, Graph, NonFiniteError, Tensor, ops
from .encoder import ObsBatch, ObservationEncoder
from .nets import TeacherNet, draw_mask


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class FlowSchedule:
    mu: float = 0.0
    sigma: float = 1.0
    eps: float = 1e-3

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError("logit-normal sigma must be > 0")
        if not 0 < self.eps < 0.1:
            raise ValueError("eps must lie in (0, 0.1)")


@dataclass(frozen=True)
class OdeSamplerConfig:
    integrator: str = "euler"
    steps: int = 50
    seed: int = 0

    def __post_init__(self):
        if self.integrator not in ("euler", "heun"):
            raise ValueError(f"unknown integrator {self.integrator!r}")
        if self.steps < 1:
            raise ValueError("sampler steps N must be >= 1")

    @property
    def nfe(self) -> int:
        return self.steps if self.integrator == "euler" else 2 * self.steps - 1


def sample_time(schedule: FlowSchedule, rng: np.random.Generator, size=None) -> np.ndarray:
    """Logit-normal flow time ``sigmoid(mu + sigma n)``, strictly inside (0, 1)."""
    z = schedule.mu + schedule.sigma * rng.standard_normal(size)
    t = 0.5 * (1.0 + np.tanh(0.5 * z))  # overflow-free sigmoid
    return np.clip(t, np.nextafter(0.0, 1.0), np.nextafter(1.0, 0.0))


def interpolate_path(tau0, tau1, t):
    """``(1 - t) tau0 + t tau1``; ``t`` is a scalar or one value per leading batch item."""
    tau0, tau1 = np.asarray(tau0), np.asarray(tau1)
    if tau0.shape != tau1.shape:
        raise ValueError(f"path endpoints differ in shape: {tau0.shape} vs {tau1.shape}")
    t = np.asarray(t, dtype=tau0.dtype if tau0.dtype.kind == "f" else float)
    if np.any(t < 0) or np.any(t > 1):
        raise ValueError("t must lie in [0, 1]")
    if t.ndim == 1:
        t = t.reshape((-1,) + (1,) * (tau0.ndim - 1))
    return (1 - t) * tau0 + t * tau1


def velocity_from_data_pred(d_out, tau_t, t, eps: float = 1e-3):
    """Velocity of the linear path implied by a data prediction: ``(d - tau_t) / max(1 - t, eps)``."""
    d_out, tau_t = np.asarray(d_out), np.asarray(tau_t)
    t = np.asarray(t, dtype=float)
    if np.any(t < 0) or np.any(t >= 1):
        raise ValueError("velocity is defined for t in [0, 1)")
    denom = np.maximum(1.0 - t, eps)
    if denom.ndim == 1:
        denom = denom.reshape((-1,) + (1,) * (tau_t.ndim - 1))
    return ((d_out - tau_t) / denom).astype(tau_t.dtype, copy=False)


def draw_noise(teacher: TeacherNet, shape, rng: np.random.Generator, dtype=np.float32) -> np.ndarray:
    """tau_0: standard normal in normalised units, returned in task units."""
    return (rng.standard_normal(shape) * teacher.cfg.action_scale).astype(dtype)


def cfm_loss(
    teacher: TeacherNet,
    tau1,
    e_obs,
    schedule: FlowSchedule,
    rng: np.random.Generator,
    mask: bool = True,
) -> Tensor:
    """Mean squared error between D(tau_t, t, E_obs) and tau_1 over batch and all entries."""
    tau1 = np.asarray(tau1, dtype=np.float32)
    if tau1.ndim != 3 or tau1.shape[0] == 0:
        raise ValueError("cfm_loss needs a nonempty (B, H, D) batch")
    B = tau1.shape[0]
    t = sample_time(schedule, rng, B)
    tau0 = draw_noise(teacher, tau1.shape, rng)
    tau_t = interpolate_path(tau0, tau1, t.astype(np.float32))
    keep = draw_mask(t, rng) if mask else None
    out = teacher.forward(tau_t, t, e_obs, keep=keep)
    return ops.squared_error(out, Tensor(tau1))


# ---------------------------------------------------------------------------
# sampling


def sample_ode(
    teacher,
    e_obs,
    cfg: OdeSamplerConfig,
    rng: np.random.Generator | None = None,
    n: int = 1,
    tau0: np.ndarray | None = None,
    eps: float = 1e-3,
    return_prejump: bool = False,
):
    """Integrate the data-prediction ODE from t=0 to 1 for ``n`` samples at once.

    The last of the ``N`` uniform steps jumps straight to the network's data
    prediction. Costs ``N`` (Euler) or ``2N - 1`` (Heun) network evaluations
    per sample. Returns ``(n, H, D)`` (and the pre-jump state).
    """
    if tau0 is None:
        rng = rng if rng is not None else np.random.default_rng(cfg.seed)
        tau0 = draw_noise(teacher, (n, teacher.cfg.horizon, teacher.cfg.action_dim), rng)
    tau = np.array(tau0, copy=True)
    e = np.asarray(e_obs, dtype=tau.dtype)
    if e.ndim == 1:
        e = np.broadcast_to(e, (tau.shape[0], e.shape[0]))
    N = cfg.steps
    dt = 1.0 / N

    def pred(x, t):
        return np.asarray(teacher.forward(x, np.full(x.shape[0], t), e).data)

    for i in range(N - 1):
        t = i * dt
        v1 = velocity_from_data_pred(pred(tau, t), tau, np.full(tau.shape[0], t), eps)
        if cfg.integrator == "euler":
            tau = tau + dt * v1
        else:
            guess = tau + dt * v1
            t2 = (i + 1) * dt
            v2 = velocity_from_data_pred(pred(guess, t2), guess, np.full(tau.shape[0], t2), eps)
            tau = tau + 0.5 * dt * (v1 + v2)
    prejump = tau
    out = pred(tau, (N - 1) * dt)
    return (out, prejump) if return_prejump else out


def generate_teacher_set(teacher, e_obs, K: int, cfg: OdeSamplerConfig, rng: np.random.Generator) -> np.ndarray:
    """K independent ODE solves sharing one observation embedding -> (K, H, D)."""
    if K < 1:
        raise ValueError("K must be >= 1")
    e = np.asarray(e_obs).reshape(-1)
    return sample_ode(teacher, e, cfg, rng, n=K)


# ---------------------------------------------------------------------------
# training


@dataclass
class TeacherTrainConfig:
    epochs: int = 300
    batch_size: int = 128
    lr: float = 1e-3
    lr_min: float = 1e-4
    seed: int = 0
    patience: int = 40
    min_delta: float = 1e-3
    mask: bool = True
    schedule: FlowSchedule = field(default_factory=FlowSchedule)


@dataclass
class TrainLog:
    rows: list = field(default_factory=list)  # (epoch, mean loss, lr)
    stopped_early: bool = False

    @property
    def losses(self) -> list[float]:
        return [r[1] for r in self.rows]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["epoch", "loss", "lr"])
            for epoch, loss, lr in self.rows:
                w.writerow([epoch, f"{loss:.8g}", f"{lr:.6g}"])


def joint_parameters(**modules) -> dict:
    """Prefixed parameter dict over several modules, e.g. ``encoder.*`` and ``teacher.*``."""
    out = {}
    for prefix, mod in modules.items():
        for name, p in mod.parameters().items():
            out[f"{prefix}.{name}"] = p
    return out


def cosine_lr(lr: float, lr_min: float, step: int, total: int) -> float:
    if total <= 1:
        return lr
    return lr_min + 0.5 * (lr - lr_min) * (1 + math.cos(math.pi * min(step / (total - 1), 1.0)))


def _check_grads(grads: dict, epoch: int, batch: int) -> None:
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise TrainingDiverged(f"non-finite gradient for {name} at epoch {epoch}, batch {batch}")


def train_teacher(
    obs: ObsBatch,
    trajs: np.ndarray,
    encoder: ObservationEncoder,
    teacher: TeacherNet,
    cfg: TeacherTrainConfig,
    log_path=None,
    progress=None,
) -> TrainLog:
    """Adam on the CFM loss, jointly over encoder and teacher parameters.

    Returns the per-epoch log (also written to ``log_path`` as CSV). A
    non-finite loss or gradient aborts with :class:`TrainingDiverged`.
    """
    trajs = np.asarray(trajs, dtype=np.float32)
    if len(obs) != len(trajs):
        raise ValueError("observation and trajectory counts differ")
    params = joint_parameters(encoder=encoder, teacher=teacher)
    opt = Adam(params, lr=cfg.lr)
    rng = np.random.default_rng(cfg.seed)
    n = len(trajs)
    nb = max(1, math.ceil(n / cfg.batch_size))
    total = cfg.epochs * nb
    log = TrainLog()
    best, since = math.inf, 0
    enc_cfg = encoder.cfg
    for epoch in range(cfg.epochs):
        perm = rng.permutation(n)
        losses = []
        for b in range(nb):
            idx = perm[b * cfg.batch_size : (b + 1) * cfg.batch_size]
            lr = cosine_lr(cfg.lr, cfg.lr_min, opt.state.step, total)
            opt.state.lr = lr
            batch = obs.take(idx).corrupt_geometry(rng, enc_cfg.geometry_dropout, enc_cfg.geometry_noise)
            try:
                with Graph() as g:
                    e_obs, _ = encoder.encode_batch(batch)
                    loss = cfm_loss(teacher, trajs[idx], e_obs, cfg.schedule, rng, mask=cfg.mask)
                grads = g.backward(loss, params)
            except NonFiniteError as exc:
                raise TrainingDiverged(f"non-finite value at epoch {epoch}, batch {b}: {exc}") from None
            value = float(loss.data)
            if not math.isfinite(value):
                raise TrainingDiverged(f"loss became {value} at epoch {epoch}, batch {b}")
            _check_grads(grads, epoch, b)
            opt.step(grads)
            losses.append(value)
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
