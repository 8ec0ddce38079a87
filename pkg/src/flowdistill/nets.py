"""Teacher and student trajectory networks.

Both share one backbone, :class:`TemporalUNet`: a two-level 1-D
encoder-decoder over the horizon axis with FiLM conditioning in every block.
The teacher instance additionally owns a time pathway (sinusoidal embedding
-> MLP -> per-block FiLM projection); the student is built with
``time_conditioned=False`` and therefore has exactly the teacher's parameter
set minus those modules.

Trajectories cross the network API in world units (position deltas) and are
normalised internally by ``action_scale``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .diffcore import Conv1d, LayerNorm, Linear, MLP, Module, ShapeError, Tensor, ops
from .diffcore.tensor import as_tensor

TIME_MODULES = ("time_mlp", "film_time")


@dataclass(frozen=True)
class NetConfig:
    horizon: int = 32
    action_dim: int = 2
    channels: tuple = (64, 128)
    embed_dim: int = 64
    obs_dim: int = 128
    action_scale: float = 0.06
    film_std: float = 0.02

    def __post_init__(self):
        if self.horizon % 2:
            raise ValueError("horizon must be even (one x2 downsampling stage)")
        if len(self.channels) != 2:
            raise ValueError("channels must list exactly two widths")
        if self.embed_dim % 2:
            raise ValueError("embed_dim must be even")


# ---------------------------------------------------------------------------
# time embedding and masking


def sinusoidal_embed(t, dim: int = 64, max_period: float = 1000.0) -> np.ndarray:
    """Interleaved ``[sin(f0 t), cos(f0 t), sin(f1 t), ...]`` embedding.

    Frequencies are geometrically spaced in ``[1, max_period]``. ``t`` may be a
    scalar (returns ``(dim,)``) or an array of shape ``(B,)`` (returns
    ``(B, dim)``).
    """
    t_arr = np.asarray(t, dtype=np.float64)
    if not np.all(np.isfinite(t_arr)) or np.any(t_arr < 0) or np.any(t_arr > 1):
        raise ValueError("flow time must lie in [0, 1]")
    if dim % 2:
        raise ValueError("dim must be even")
    freqs = np.exp(np.linspace(0.0, math.log(max_period), dim // 2))
    ang = t_arr[..., None] * freqs
    out = np.empty(t_arr.shape + (dim,))
    out[..., 0::2] = np.sin(ang)
    out[..., 1::2] = np.cos(ang)
    return out


def mask_probability(t) -> np.ndarray:
    """Anti-shortcut masking schedule ``clamp((t - 0.5) / 0.5, 0, 1)``."""
    return np.clip((np.asarray(t, dtype=np.float64) - 0.5) / 0.5, 0.0, 1.0)


def draw_mask(t, rng: np.random.Generator) -> np.ndarray:
    """Per-sample keep flags (1 = keep, 0 = suppress), shape ``t.shape``."""
    p = mask_probability(t)
    return (rng.random(p.shape) >= p).astype(np.float64)


def mask_noise_embedding(traj_embed, t, rng: np.random.Generator, keep: np.ndarray | None = None):
    """Zero the embedded noisy-trajectory features of a sample with probability p(t).

    ``traj_embed`` is ``(B, L, C)`` (Tensor or array); ``t`` is ``(B,)``.
    Training-time only: inference paths never call this.
    """
    x = as_tensor(traj_embed)
    if keep is None:
        keep = draw_mask(np.broadcast_to(np.asarray(t, float), (x.shape[0],)), rng)
    m = np.broadcast_to(keep.astype(x.dtype)[:, None, None], x.shape)
    return ops.mul(x, Tensor(np.ascontiguousarray(m)))


# ---------------------------------------------------------------------------
# backbone


class FiLMBlock(Module):
    """conv -> layernorm -> FiLM -> GELU, residual when widths match.

    FiLM (scale, shift) = film_obs(E_obs) + film_ctx(mean_L x) [+ film_time(temb)].
    """

    def __init__(self, c_in: int, c_out: int, cfg: NetConfig, rng: np.random.Generator, time_conditioned: bool):
        self.conv = Conv1d(c_in, c_out, rng)
        self.norm = LayerNorm(c_out)
        self.film_obs = Linear(cfg.obs_dim, 2 * c_out, rng, std=cfg.film_std)
        self.film_time = Linear(cfg.embed_dim * 2, 2 * c_out, rng, std=cfg.film_std) if time_conditioned else None
        # horizon-pooled input features also drive the modulation, giving every
        # step a view of the whole trajectory (kernel-3 convs alone see < H steps)
        self.film_ctx = Linear(c_in, 2 * c_out, rng, std=cfg.film_std)
        self.c_out = c_out
        self.residual = c_in == c_out

    def __call__(self, x: Tensor, e_obs: Tensor, temb: Tensor | None) -> Tensor:
        ss = ops.add(self.film_obs(e_obs), self.film_ctx(ops.mean(x, axis=1)))
        if self.film_time is not None:
            ss = ops.add(ss, self.film_time(temb))
        scale = ops.slice(ss, (slice(None), slice(0, self.c_out)))
        shift = ops.slice(ss, (slice(None), slice(self.c_out, None)))
        h = ops.gelu(ops.film(self.norm(self.conv(x)), scale, shift))
        return ops.add(h, x) if self.residual else h


class TemporalUNet(Module):
    def __init__(self, cfg: NetConfig, rng: np.random.Generator, time_conditioned: bool):
        c1, c2 = cfg.channels
        self.cfg = cfg
        self.time_conditioned = time_conditioned
        self.in_proj = Linear(cfg.action_dim, c1, rng)
        self.time_mlp = MLP(cfg.embed_dim, cfg.embed_dim * 2, cfg.embed_dim * 2, rng) if time_conditioned else None
        self.enc = FiLMBlock(c1, c1, cfg, rng, time_conditioned)
        self.down = Linear(2 * c1, c2, rng)
        self.mid1 = FiLMBlock(c2, c2, cfg, rng, time_conditioned)
        self.mid2 = FiLMBlock(c2, c2, cfg, rng, time_conditioned)
        self.up = Linear(c2, 2 * c1, rng)
        self.dec = FiLMBlock(2 * c1, c1, cfg, rng, time_conditioned)
        self.out_proj = Linear(c1, cfg.action_dim, rng, std=0.1 / math.sqrt(c1))

    def _check(self, x: Tensor, e_obs: Tensor):
        cfg = self.cfg
        if x.ndim != 3 or x.shape[1:] != (cfg.horizon, cfg.action_dim):
            raise ShapeError(f"trajectory batch must be (B, {cfg.horizon}, {cfg.action_dim}), got {x.shape}")
        if e_obs.ndim != 2 or e_obs.shape != (x.shape[0], cfg.obs_dim):
            raise ShapeError(f"E_obs must be (B={x.shape[0]}, {cfg.obs_dim}), got {e_obs.shape}")

    def __call__(self, x, e_obs, t=None, keep: np.ndarray | None = None) -> Tensor:
        """Map a normalised trajectory batch ``(B, H, D)`` to ``(B, H, D)``.

        ``t`` (shape ``(B,)``) is required iff the net is time conditioned.
        ``keep`` optionally masks the input-projection features per sample.
        """
        x, e_obs = as_tensor(x), as_tensor(e_obs)
        self._check(x, e_obs)
        temb = None
        if self.time_conditioned:
            if t is None:
                raise ValueError("teacher forward needs a flow time")
            t = np.broadcast_to(np.asarray(t, float), (x.shape[0],))
            emb = Tensor(sinusoidal_embed(t, self.cfg.embed_dim).astype(x.dtype))
            temb = self.time_mlp(emb)
        elif t is not None:
            raise ValueError("student network takes no flow time")
        B, H = x.shape[0], self.cfg.horizon
        c1 = self.cfg.channels[0]
        h = self.in_proj(x)
        if keep is not None:
            h = mask_noise_embedding(h, None, None, keep=np.asarray(keep))
        skip = self.enc(h, e_obs, temb)
        d = self.down(ops.reshape(skip, (B, H // 2, 2 * c1)))
        d = self.mid2(self.mid1(d, e_obs, temb), e_obs, temb)
        u = ops.reshape(self.up(d), (B, H, c1))
        h = self.dec(ops.concat([u, skip], axis=-1), e_obs, temb)
        return self.out_proj(h)


def parameter_manifest(net: Module) -> dict[str, tuple]:
    return {name: p.shape for name, p in net.parameters().items()}


def is_time_parameter(name: str) -> bool:
    return any(part in TIME_MODULES for part in name.split("."))


# ---------------------------------------------------------------------------
# teacher / student wrappers


class _Policy:
    kind = "?"

    def __init__(self, cfg: NetConfig | None = None, seed: int = 0):
        self.cfg = cfg or NetConfig()
        self.net = TemporalUNet(self.cfg, np.random.default_rng(seed), self.kind == "teacher")
        # network evaluations, counted per trajectory (a batch of B adds B)
        self.nfe = 0

    def parameters(self):
        return self.net.parameters()

    def state_dict(self):
        return self.net.state_dict()

    def load_state_dict(self, state, strict: bool = True):
        self.net.load_state_dict(state, strict)

    def num_parameters(self) -> int:
        return self.net.num_parameters()

    def _inputs(self, traj, e_obs):
        traj, e_obs = as_tensor(traj), as_tensor(e_obs)
        squeeze = traj.ndim == 2
        if squeeze:
            traj = ops.reshape(traj, (1,) + traj.shape)
        if e_obs.ndim == 1:
            e_obs = ops.reshape(e_obs, (1, e_obs.shape[0]))
        if e_obs.shape[0] == 1 and traj.shape[0] > 1:
            e_obs = Tensor(np.broadcast_to(e_obs.data, (traj.shape[0], e_obs.shape[1])).copy())
        return traj, e_obs, squeeze


class TeacherNet(_Policy):
    """D_theta(tau_t, t, E_obs): predicts the clean trajectory tau_1 in data space."""

    kind = "teacher"

    def forward(self, tau_t, t, e_obs, keep: np.ndarray | None = None) -> Tensor:
        """``tau_t`` (B,H,D) or (H,D) in world units; ``t`` scalar or (B,)."""
        tau_t, e_obs, squeeze = self._inputs(tau_t, e_obs)
        t = np.asarray(t, float)
        if np.any(t < 0) or np.any(t > 1):
            raise ValueError("flow time must lie in [0, 1]")
        s = self.cfg.action_scale
        out = self.net(ops.scale(tau_t, 1.0 / s), e_obs, t=t, keep=keep)
        out = ops.scale(out, s)
        self.nfe += tau_t.shape[0]
        return ops.reshape(out, out.shape[1:]) if squeeze else out

    __call__ = forward


class StudentNet(_Policy):
    """tau_psi(E_obs, z): one forward pass from Gaussian noise to a trajectory."""

    kind = "student"

    def forward(self, z, e_obs) -> Tensor:
        """``z`` is standard-normal noise shaped like a trajectory (B,H,D) or (H,D)."""
        z, e_obs, squeeze = self._inputs(z, e_obs)
        out = ops.scale(self.net(z, e_obs), self.cfg.action_scale)
        self.nfe += z.shape[0]
        return ops.reshape(out, out.shape[1:]) if squeeze else out

    __call__ = forward

    @classmethod
    def from_teacher(cls, teacher: TeacherNet, seed: int = 0) -> "StudentNet":
        """Student initialised from the teacher's non-time parameters."""
        student = cls(teacher.cfg, seed)
        state = {k: v for k, v in teacher.state_dict().items() if not is_time_parameter(k)}
        student.load_state_dict(state)
        return student


def teacher_forward(teacher: TeacherNet, tau_t, t, e_obs) -> Tensor:
    return teacher.forward(tau_t, t, e_obs)


def student_forward(student: StudentNet, z, e_obs) -> Tensor:
    return student.forward(z, e_obs)
