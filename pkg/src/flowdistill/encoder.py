"""Multimodal observation encoder producing E_obs = [h_vis, h_pcd, h_state].

Appearance and geometry tokens exchange information through symmetric
single-head cross-attention, are mean-pooled, and are mixed by a softmax gate
into ``h_vis``. The point set goes through a shared per-point MLP with max
pooling, and proprioception through a small MLP.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .diffcore import Linear, MLP, Module, ShapeError, Tensor, ops
from .diffcore.tensor import as_tensor
from .tasks import RawObservation


@dataclass(frozen=True)
class EncoderConfig:
    token_dim: int = 32
    d_pcd: int = 64
    d_state: int = 32
    proprio_dim: int = 2
    gate_hidden: int = 32
    point_hidden: int = 64
    # fraction of training samples whose geometry tokens are replaced by noise
    geometry_dropout: float = 0.15
    geometry_noise: float = 3.0

    @property
    def d_vis(self) -> int:
        return self.token_dim

    @property
    def obs_dim(self) -> int:
        return self.d_vis + self.d_pcd + self.d_state


@dataclass
class ObsEmbedding:
    vector: np.ndarray  # (B, d_vis + d_pcd + d_state)
    alpha: np.ndarray  # (B, 2): [alpha_rgb, alpha_depth]

    def slices(self, cfg: EncoderConfig) -> dict[str, slice]:
        a, b = cfg.d_vis, cfg.d_vis + cfg.d_pcd
        return {"h_vis": slice(0, a), "h_pcd": slice(a, b), "h_state": slice(b, cfg.obs_dim)}


class CrossAttention(Module):
    """queries + softmax(Q K^T / sqrt(d)) V, single head."""

    def __init__(self, dim: int, rng: np.random.Generator, zero_value: bool = False):
        self.q = Linear(dim, dim, rng, bias=False)
        self.k = Linear(dim, dim, rng, bias=False)
        self.v = Linear(dim, dim, rng, bias=False, std=0.0 if zero_value else None)
        self.dim = dim

    def weights(self, queries: Tensor, kv: Tensor) -> Tensor:
        scores = ops.matmul(self.q(queries), ops.transpose(self.k(kv)))
        return ops.softmax(ops.scale(scores, 1.0 / np.sqrt(self.dim)))

    def __call__(self, queries, kv) -> Tensor:
        queries, kv = as_tensor(queries), as_tensor(kv)
        if queries.shape[-1] != self.dim or kv.shape[-1] != self.dim:
            raise ShapeError(f"cross_attend: token dims {queries.shape[-1]} / {kv.shape[-1]} != {self.dim}")
        if queries.ndim != 3 or kv.ndim != 3 or queries.shape[0] != kv.shape[0]:
            raise ShapeError(f"cross_attend expects (B,N,d) batches, got {queries.shape} and {kv.shape}")
        return ops.add(queries, ops.matmul(self.weights(queries, kv), self.v(kv)))


def cross_attend(attn: CrossAttention, queries, keys_values) -> Tensor:
    """Unbatched convenience: ``(Nq, d)`` x ``(Nk, d)`` -> ``(Nq, d)``, or batched pass-through."""
    q, kv = as_tensor(queries), as_tensor(keys_values)
    if q.ndim == 2 and kv.ndim == 2:
        out = attn(ops.reshape(q, (1,) + q.shape), ops.reshape(kv, (1,) + kv.shape))
        return ops.reshape(out, out.shape[1:])
    return attn(q, kv)


class ObservationEncoder(Module):
    def __init__(self, cfg: EncoderConfig | None = None, seed: int = 0, symmetric_init: bool = True):
        cfg = cfg or EncoderConfig()
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        self.attn_rgb = CrossAttention(cfg.token_dim, rng)
        self.attn_depth = CrossAttention(cfg.token_dim, rng)
        self.gate = MLP(2 * cfg.token_dim, cfg.gate_hidden, 2, rng)
        self.point_mlp = MLP(3, cfg.point_hidden, cfg.d_pcd, rng)
        self.state_mlp = MLP(cfg.proprio_dim, cfg.d_state, cfg.d_state, rng)
        if symmetric_init:
            self.symmetrize()

    def symmetrize(self) -> None:
        """Share the two attention inits and give both gate logits the same output weights,
        so identical modality inputs produce alpha = [0.5, 0.5]."""
        for name in ("q", "k", "v"):
            getattr(self.attn_depth, name).weight.data = getattr(self.attn_rgb, name).weight.data.copy()
        w = self.gate.fc2.weight.data
        w[:, 1] = w[:, 0]
        self.gate.fc2.bias.data[:] = 0.0

    @property
    def obs_dim(self) -> int:
        return self.cfg.obs_dim

    # -- sub-encoders -------------------------------------------------------

    def fuse_visual(self, f_rgb, f_depth) -> tuple[Tensor, Tensor]:
        """(B,Na,d), (B,Ng,d) -> h_vis (B,d), alpha (B,2)."""
        f_rgb, f_depth = as_tensor(f_rgb), as_tensor(f_depth)
        fr = self.attn_rgb(f_rgb, f_depth)
        fd = self.attn_depth(f_depth, f_rgb)
        pr, pd = ops.mean(fr, axis=1), ops.mean(fd, axis=1)
        alpha = ops.softmax(self.gate(ops.concat([pr, pd], axis=-1)))
        B, d = pr.shape
        stacked = ops.concat([ops.reshape(pr, (B, 1, d)), ops.reshape(pd, (B, 1, d))], axis=1)
        h = ops.matmul(ops.reshape(alpha, (B, 1, 2)), stacked)
        return ops.reshape(h, (B, d)), alpha

    def encode_points(self, point_set) -> Tensor:
        """(B,N,3) or (N,3) -> (B,d_pcd) or (d_pcd,), max-pooled over points."""
        p = as_tensor(point_set)
        if p.shape[-2] < 1:
            raise ShapeError("encode_points: empty point set")
        if p.shape[-1] != 3:
            raise ShapeError(f"encode_points: points must be 3-D, got {p.shape}")
        return ops.max(self.point_mlp(p), axis=-2)

    def encode_state(self, proprio) -> Tensor:
        s = as_tensor(proprio)
        if s.shape[-1] != self.cfg.proprio_dim:
            raise ShapeError(f"encode_state: expected dim {self.cfg.proprio_dim}, got {s.shape[-1]}")
        return self.state_mlp(s)

    # -- assembly -----------------------------------------------------------

    def encode_arrays(self, app, geo, pts, prop) -> tuple[Tensor, Tensor]:
        """Batched arrays -> (E_obs Tensor (B, obs_dim), alpha Tensor (B, 2))."""
        h_vis, alpha = self.fuse_visual(app, geo)
        e = ops.concat([h_vis, self.encode_points(pts), self.encode_state(prop)], axis=-1)
        return e, alpha

    def encode_batch(self, batch: "ObsBatch") -> tuple[Tensor, Tensor]:
        return self.encode_arrays(batch.appearance, batch.geometry, batch.points, batch.proprio)

    def assemble(self, raw: RawObservation | Sequence[RawObservation]) -> ObsEmbedding:
        batch = ObsBatch.from_observations([raw] if isinstance(raw, RawObservation) else raw)
        e, alpha = self.encode_batch(batch)
        return ObsEmbedding(e.data.copy(), alpha.data.copy())


def assemble_obs_embedding(encoder: ObservationEncoder, raw: RawObservation) -> ObsEmbedding:
    """Single observation -> ObsEmbedding with vector (obs_dim,) and alpha (2,)."""
    emb = encoder.assemble(raw)
    return ObsEmbedding(emb.vector[0], emb.alpha[0])


@dataclass
class ObsBatch:
    appearance: np.ndarray  # (B, Na, d)
    geometry: np.ndarray  # (B, Ng, d)
    points: np.ndarray  # (B, Np, 3)
    proprio: np.ndarray  # (B, d_s)

    @classmethod
    def from_observations(cls, obs: Sequence[RawObservation], dtype=np.float32) -> "ObsBatch":
        return cls(
            np.stack([o.appearance_tokens for o in obs]).astype(dtype),
            np.stack([o.geometry_tokens for o in obs]).astype(dtype),
            np.stack([o.point_set for o in obs]).astype(dtype),
            np.stack([o.proprio for o in obs]).astype(dtype),
        )

    def __len__(self) -> int:
        return len(self.appearance)

    def take(self, idx) -> "ObsBatch":
        return ObsBatch(self.appearance[idx], self.geometry[idx], self.points[idx], self.proprio[idx])

    def corrupt_geometry(self, rng: np.random.Generator, frac: float, noise: float) -> "ObsBatch":
        """Copy with the geometry tokens of a random ``frac`` of samples replaced by noise."""
        if frac <= 0:
            return self
        geo = self.geometry.copy()
        hit = rng.random(len(geo)) < frac
        geo[hit] = (rng.standard_normal(geo[hit].shape) * noise).astype(geo.dtype)
        return ObsBatch(self.appearance, geo, self.points, self.proprio)
