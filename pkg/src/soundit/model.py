"""SounDiT denoiser: patchify -> SounDiT blocks -> zero-initialized head."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields, replace

import numpy as np
import torch
import torch.nn as nn
from torch import Tensor

from .conditioning import (AdaLNZeroSelfAttention, MoESoundscapeConditioning,
                           SceneAdaLNFeedForward, SceneLowRankMixer, layer_norm, modulate)


@dataclass(frozen=True)
class SounDiTConfig:
    depth: int = 2
    dim: int = 64
    heads: int = 4
    patch_size: int = 2
    latent_height: int = 8
    latent_width: int = 8
    latent_channels: int = 3
    scene_dim: int = 32          # D_c
    summary_dim: int = 32        # d, pooled soundscape embedding
    token_dim: int = 32          # D_s, soundscape token width
    num_tokens: int = 8          # L
    slrcm_rank: int = 16
    mu: float = 1.0
    num_experts: int = 8
    top_k: int = 2
    query_rank: int = 32
    tau: float = 1.0
    mlp_ratio: float = 4.0
    use_slrcm: bool = True
    use_moe: bool = True
    use_s_adaln: bool = True

    def __post_init__(self):
        p = self.patch_size
        if self.latent_height % p or self.latent_width % p:
            raise ValueError(f"patch_size {p} must divide latent size "
                             f"{self.latent_height}x{self.latent_width}")
        if self.dim % self.heads:
            raise ValueError(f"heads={self.heads} must divide dim={self.dim}")
        if self.use_moe and not 1 <= self.top_k <= self.num_experts:
            raise ValueError(f"top_k={self.top_k} must lie in [1, {self.num_experts}]")

    @property
    def num_patches(self) -> int:
        return (self.latent_height // self.patch_size) * (self.latent_width // self.patch_size)

    @property
    def latent_shape(self) -> tuple[int, int, int]:
        return (self.latent_channels, self.latent_height, self.latent_width)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SounDiTConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    def replace(self, **kw) -> "SounDiTConfig":
        return replace(self, **kw)


@dataclass
class ConditioningBundle:
    """Soundscape and scene conditions for a batch, with per-row null flags.

    Rows flagged null are replaced by the model's learned null embeddings.
    """
    e_s: Tensor                 # (B, d)
    s_tokens: Tensor            # (B, L, D_s)
    e_c: Tensor                 # (B, D_c)
    sound_null: Tensor          # (B,) bool
    scene_null: Tensor          # (B,) bool

    @classmethod
    def build(cls, e_s: Tensor, s_tokens: Tensor, e_c: Tensor | None = None,
              scene_known: Tensor | None = None, scene_dim: int | None = None) -> "ConditioningBundle":
        b = e_s.shape[0]
        if e_c is None:
            e_c = torch.zeros(b, scene_dim, dtype=e_s.dtype)
            scene_null = torch.ones(b, dtype=torch.bool)
        else:
            scene_null = torch.zeros(b, dtype=torch.bool) if scene_known is None else ~scene_known
        return cls(e_s, s_tokens, e_c, torch.zeros(b, dtype=torch.bool), scene_null)

    @property
    def batch_size(self) -> int:
        return self.e_s.shape[0]

    def null(self) -> "ConditioningBundle":
        ones = torch.ones(self.batch_size, dtype=torch.bool)
        return replace(self, sound_null=ones, scene_null=ones.clone())

    def dropped(self, sound_drop: Tensor, scene_drop: Tensor) -> "ConditioningBundle":
        return replace(self, sound_null=self.sound_null | sound_drop,
                       scene_null=self.scene_null | scene_drop)

    def index(self, rows) -> "ConditioningBundle":
        return ConditioningBundle(self.e_s[rows], self.s_tokens[rows], self.e_c[rows],
                                  self.sound_null[rows], self.scene_null[rows])

    def to(self, dtype) -> "ConditioningBundle":
        return replace(self, e_s=self.e_s.to(dtype), s_tokens=self.s_tokens.to(dtype),
                       e_c=self.e_c.to(dtype))


def patchify(latent: Tensor, patch_size: int) -> Tensor:
    """(B, c, h, w) -> (B, N, p*p*c), patches in row-major order."""
    b, c, h, w = latent.shape
    p = patch_size
    if h % p or w % p:
        raise ValueError(f"patch_size {p} does not divide {h}x{w}")
    x = latent.reshape(b, c, h // p, p, w // p, p).permute(0, 2, 4, 3, 5, 1)
    return x.reshape(b, (h // p) * (w // p), p * p * c)


def unpatchify(tokens: Tensor, patch_size: int, height: int, width: int) -> Tensor:
    """Inverse of :func:`patchify`."""
    b, n, td = tokens.shape
    p = patch_size
    gh, gw = height // p, width // p
    if gh * gw != n or td % (p * p):
        raise ValueError(f"cannot unpatchify {tuple(tokens.shape)} to {height}x{width} with p={p}")
    c = td // (p * p)
    x = tokens.reshape(b, gh, gw, p, p, c).permute(0, 5, 1, 3, 2, 4)
    return x.reshape(b, c, height, width)


def sincos_pos_embed_2d(dim: int, grid_h: int, grid_w: int) -> np.ndarray:
    """Fixed 2-D sine-cosine position table, (grid_h * grid_w, dim)."""
    if dim % 4:
        raise ValueError("position embedding width must be divisible by 4")

    def one_axis(d, pos):
        omega = 1.0 / 10000 ** (np.arange(d // 2, dtype=np.float64) / (d / 2.0))
        out = np.outer(pos.reshape(-1), omega)
        return np.concatenate([np.sin(out), np.cos(out)], axis=1)

    gy, gx = np.meshgrid(np.arange(grid_h, dtype=np.float64), np.arange(grid_w, dtype=np.float64),
                         indexing="ij")
    return np.concatenate([one_axis(dim // 2, gy), one_axis(dim // 2, gx)], axis=1)


class TimestepEmbedder(nn.Module):
    def __init__(self, dim: int, freq_dim: int = 128):
        super().__init__()
        self.freq_dim = freq_dim
        self.mlp = nn.Sequential(nn.Linear(freq_dim, dim), nn.SiLU(), nn.Linear(dim, dim))

    @staticmethod
    def sinusoid(t: Tensor, dim: int, max_period: float = 10000.0) -> Tensor:
        half = dim // 2
        freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float64) / half)
        args = t.to(torch.float64)[:, None] * freqs[None]
        return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)

    def forward(self, t: Tensor) -> Tensor:
        w = self.mlp[0].weight
        return self.mlp(self.sinusoid(t, self.freq_dim).to(w.dtype))


class SounDiTBlock(nn.Module):
    """Four stages: AdaLN-Zero self-attention, SLRCM scene injection,
    MoE soundscape cross-attention, S-AdaLN feed-forward."""

    def __init__(self, cfg: SounDiTConfig):
        super().__init__()
        d = cfg.dim
        self.attn = AdaLNZeroSelfAttention(d, d, cfg.heads)
        self.slrcm = SceneLowRankMixer(d, cfg.scene_dim, cfg.slrcm_rank, cfg.mu) if cfg.use_slrcm else None
        self.moe = (MoESoundscapeConditioning(d, cfg.token_dim, cfg.summary_dim, d,
                                              cfg.num_experts, cfg.top_k, cfg.query_rank,
                                              cfg.heads, cfg.tau) if cfg.use_moe else None)
        self.ffn = SceneAdaLNFeedForward(d, d, cfg.scene_dim, cfg.mlp_ratio, use_scene=cfg.use_s_adaln)

    def forward(self, x: Tensor, e_t: Tensor, e_c: Tensor, s_tokens: Tensor, e_s: Tensor) -> Tensor:
        x = self.attn(x, e_t)
        if self.slrcm is not None:
            x = self.slrcm(x, e_c)
        if self.moe is not None:
            x = self.moe(x, s_tokens, e_s, e_t)
        return self.ffn(x, e_t, e_c)


class FinalLayer(nn.Module):
    def __init__(self, dim: int, out_dim: int):
        super().__init__()
        self.modulation = nn.Sequential(nn.SiLU(), nn.Linear(dim, 2 * dim))
        self.linear = nn.Linear(dim, out_dim)
        for lin in (self.modulation[1], self.linear):
            nn.init.zeros_(lin.weight)
            nn.init.zeros_(lin.bias)

    def forward(self, x: Tensor, e_t: Tensor) -> Tensor:
        shift, scale = self.modulation(e_t).chunk(2, dim=-1)
        return self.linear(modulate(layer_norm(x), shift, scale))


class SounDiT(nn.Module):
    """Noise predictor eps(z_t, t, soundscape, scene)."""

    def __init__(self, cfg: SounDiTConfig):
        super().__init__()
        self.cfg = cfg
        p, c = cfg.patch_size, cfg.latent_channels
        self.x_embed = nn.Linear(p * p * c, cfg.dim)
        pos = sincos_pos_embed_2d(cfg.dim, cfg.latent_height // p, cfg.latent_width // p)
        self.register_buffer("pos_embed", torch.from_numpy(pos).float().unsqueeze(0), persistent=False)
        self.t_embedder = TimestepEmbedder(cfg.dim)
        self.null_summary = nn.Parameter(torch.randn(cfg.summary_dim) * 0.02)
        self.null_tokens = nn.Parameter(torch.randn(cfg.num_tokens, cfg.token_dim) * 0.02)
        self.null_scene = nn.Parameter(torch.randn(cfg.scene_dim) * 0.02)
        self.blocks = nn.ModuleList(SounDiTBlock(cfg) for _ in range(cfg.depth))
        self.final = FinalLayer(cfg.dim, p * p * c)

    def resolve(self, cond: ConditioningBundle) -> tuple[Tensor, Tensor, Tensor]:
        """Substitute learned null embeddings on flagged rows."""
        sn = cond.sound_null
        e_s = torch.where(sn[:, None], self.null_summary.expand_as(cond.e_s), cond.e_s)
        s_tokens = torch.where(sn[:, None, None], self.null_tokens.expand_as(cond.s_tokens), cond.s_tokens)
        e_c = torch.where(cond.scene_null[:, None], self.null_scene.expand_as(cond.e_c), cond.e_c)
        return e_s, s_tokens, e_c

    def forward(self, z_t: Tensor, t: Tensor, cond: ConditioningBundle) -> Tensor:
        cfg = self.cfg
        if tuple(z_t.shape[1:]) != cfg.latent_shape:
            raise ValueError(f"latent shape {tuple(z_t.shape[1:])} != config {cfg.latent_shape}")
        t = torch.as_tensor(t).reshape(-1).expand(z_t.shape[0])
        x = self.x_embed(patchify(z_t, cfg.patch_size)) + self.pos_embed.to(z_t.dtype)
        e_t = self.t_embedder(t)
        e_s, s_tokens, e_c = self.resolve(cond)
        for block in self.blocks:
            x = block(x, e_t, e_c, s_tokens, e_s)
        out = self.final(x, e_t)
        return unpatchify(out, cfg.patch_size, cfg.latent_height, cfg.latent_width)


def count_parameters(model: nn.Module) -> dict[str, int]:
    """Parameter counts split into per-expert MoE tensors and everything else."""
    counts = {"expert": 0, "shared": 0}
    for name, p in model.named_parameters():
        leaf = name.rsplit(".", 1)[-1]
        is_expert = ".moe." in f".{name}" and leaf in MoESoundscapeConditioning.EXPERT_PARAMS
        counts["expert" if is_expert else "shared"] += p.numel()
    counts["total"] = counts["expert"] + counts["shared"]
    return counts


def expert_parameter_count(cfg: SounDiTConfig) -> int:
    """Closed-form per-expert parameter count across all blocks."""
    if not cfg.use_moe:
        return 0
    per_expert = (2 * cfg.dim * cfg.query_rank       # q_down, q_up
                  + cfg.summary_dim                  # prototype column
                  + cfg.summary_dim * cfg.dim        # timestep shift for that prototype
                  + 1)                               # mixing temperature
    return cfg.depth * cfg.num_experts * per_expert
