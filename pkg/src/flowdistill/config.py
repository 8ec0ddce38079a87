"""Experiment configuration: a single JSON document validated before any work."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Literal

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .cfm import FlowSchedule, OdeSamplerConfig, TeacherTrainConfig
from .distill import StudentTrainConfig
from .encoder import EncoderConfig
from .nets import NetConfig
from .simloop import LatencyModel, RolloutConfig
from .tasks import TaskSpec


class ConfigError(ValueError):
    pass


class _Block(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class TaskBlock(_Block):
    name: Literal["fork2d", "multigoal", "dynamic-target"] = "fork2d"
    n_demos: int = Field(2000, ge=1)
    horizon: int = Field(32, ge=2)
    noise_scale: float = Field(0.02, ge=0)
    success_radius: float = Field(0.05, gt=0)
    intermediate_frac: float = Field(0.5, ge=0, le=1)
    n_goals: int = Field(3, ge=2)
    target_speed: float = Field(0.0, ge=0)
    orbit_radius: float = Field(0.12, gt=0)

    def spec(self, **overrides) -> TaskSpec:
        d = self.model_dump(exclude={"n_demos"})
        d.update(overrides)
        return TaskSpec(**d)


class NetworkBlock(_Block):
    channels: tuple[int, int] = (64, 128)
    embed_dim: int = Field(64, ge=2)
    token_dim: int = Field(32, ge=1)
    d_pcd: int = Field(64, ge=1)
    d_state: int = Field(32, ge=1)
    action_scale: float = Field(0.06, gt=0)

    @field_validator("embed_dim")
    @classmethod
    def _even(cls, v):
        if v % 2:
            raise ValueError("embed_dim must be even")
        return v

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(token_dim=self.token_dim, d_pcd=self.d_pcd, d_state=self.d_state)

    def net_config(self, horizon: int) -> NetConfig:
        enc = self.encoder_config()
        return NetConfig(
            horizon=horizon,
            channels=tuple(self.channels),
            embed_dim=self.embed_dim,
            obs_dim=enc.obs_dim,
            action_scale=self.action_scale,
        )


class CfmBlock(_Block):
    mu: float = 0.0
    sigma: float = Field(1.0, gt=0)
    eps: float = Field(1e-3, gt=0, lt=0.1)
    integrator: Literal["euler", "heun"] = "euler"
    steps: int = Field(50, ge=1)
    K: int = Field(16, ge=1)
    epochs: int = Field(150, ge=0)
    batch_size: int = Field(128, ge=1)
    lr: float = Field(2e-3, gt=0)
    lr_min: float = Field(1e-4, ge=0)
    patience: int = Field(40, ge=1)
    mask: bool = True

    def schedule(self) -> FlowSchedule:
        return FlowSchedule(self.mu, self.sigma, self.eps)

    def sampler(self, seed: int = 0, steps: int | None = None) -> OdeSamplerConfig:
        return OdeSamplerConfig(self.integrator, self.steps if steps is None else steps, seed)

    def train_config(self, seed: int) -> TeacherTrainConfig:
        return TeacherTrainConfig(
            epochs=self.epochs,
            batch_size=self.batch_size,
            lr=self.lr,
            lr_min=self.lr_min,
            seed=seed,
            patience=self.patience,
            mask=self.mask,
            schedule=self.schedule(),
        )


class DistillBlock(_Block):
    K: int = Field(16, ge=1)
    n_obs: int = Field(500, ge=1)
    epochs: int = Field(300, ge=0)
    batch_items: int = Field(16, ge=1)
    lr: float = Field(1e-3, gt=0)
    lr_min: float = Field(1e-4, ge=0)
    patience: int = Field(40, ge=1)
    max_steps: int | None = Field(None, ge=1)
    init_from_teacher: bool = True

    def train_config(self, seed: int) -> StudentTrainConfig:
        return StudentTrainConfig(
            epochs=self.epochs,
            batch_items=self.batch_items,
            lr=self.lr,
            lr_min=self.lr_min,
            seed=seed,
            patience=self.patience,
            max_steps=self.max_steps,
        )


class EvalBlock(_Block):
    n_obs: int = Field(200, ge=1)
    n_per_mode: int = Field(256, ge=2)
    K: int = Field(16, ge=2)


class SimBlock(_Block):
    T_e: int = Field(8, ge=1)
    budget: int = Field(300, ge=1)
    dt: float = Field(0.01, gt=0)
    c_net_ms: float = Field(4.0, ge=0)
    c_ovh_ms: float = Field(1.0, ge=0)
    measured: bool = False
    n_episodes: int = Field(100, ge=1)
    # target speeds for the sweep; "s*" multiples are resolved at run time
    speed_factors: tuple[float, ...] = (0.0, 0.25, 0.5, 1.0, 2.0)
    plan_continuation: bool = False

    def latency(self) -> LatencyModel:
        return LatencyModel(self.c_net_ms, self.c_ovh_ms, self.measured)

    def rollout(self, horizon: int, target_speed: float | None = None, T_e: int | None = None) -> RolloutConfig:
        return RolloutConfig(
            T_e=self.T_e if T_e is None else T_e,
            budget=self.budget,
            dt=self.dt,
            target_speed=target_speed,
            horizon=horizon,
            plan_continuation=self.plan_continuation,
        )


class AblateBlock(_Block):
    ks: tuple[int, ...] = (1, 4, 10, 16)
    t_e: tuple[int, ...] = (1, 4, 8, 16, 32)
    n_episodes: int = Field(50, ge=1)
    # training epochs for each K-sweep student; None reuses distill.epochs
    epochs: int | None = Field(100, ge=1)

    @field_validator("ks", "t_e")
    @classmethod
    def _positive(cls, v):
        if not v or any(x < 1 for x in v):
            raise ValueError("entries must be >= 1")
        return v


class SpeedBlock(_Block):
    repeats: int = Field(100, ge=30)
    warmup: int = Field(5, ge=0)


class ExperimentConfig(_Block):
    seed: int = Field(0, ge=0)
    out_dir: str = "runs/default"
    task: TaskBlock = TaskBlock()
    network: NetworkBlock = NetworkBlock()
    cfm: CfmBlock = CfmBlock()
    distill: DistillBlock = DistillBlock()
    eval: EvalBlock = EvalBlock()
    simloop: SimBlock = SimBlock()
    ablate: AblateBlock = AblateBlock()
    speed: SpeedBlock = SpeedBlock()

    @model_validator(mode="after")
    def _cross_checks(self):
        if self.simloop.T_e > self.task.horizon:
            raise ValueError(f"simloop.T_e ({self.simloop.T_e}) exceeds task.horizon ({self.task.horizon})")
        if self.task.horizon % 2:
            raise ValueError("task.horizon must be even")
        if max(self.ablate.ks) > self.distill.K:
            raise ValueError("ablate.ks entries must not exceed distill.K")
        if any(t > self.task.horizon for t in self.ablate.t_e):
            raise ValueError("ablate.t_e entries must not exceed task.horizon")
        return self

    def canonical_json(self) -> str:
        return json.dumps(self.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))

    def config_hash(self) -> str:
        """Identity of the experiment; where outputs land does not change it."""
        data = self.model_dump(mode="json")
        data.pop("out_dir", None)
        blob = json.dumps(data, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


def _format_error(exc: ValidationError) -> str:
    lines = []
    for err in exc.errors():
        loc = ".".join(str(p) for p in err["loc"]) or "<root>"
        lines.append(f"{loc}: {err['msg']}")
    return "; ".join(lines)


def parse_config(data: dict, **overrides) -> ExperimentConfig:
    data = dict(data)
    for k, v in overrides.items():
        if v is not None:
            data[k] = v
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(_format_error(exc)) from None


def load_config(path, **overrides) -> ExperimentConfig:
    try:
        data = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError("config root must be a JSON object")
    return parse_config(data, **overrides)
