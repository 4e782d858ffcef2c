"""Conditioning layers used inside a SounDiT block.

All modules act on token grids ``x`` of shape ``(B, N, D)`` and are exact
identities at initialization (zero gates / zero mixing scalars).
"""
from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch import Tensor

LN_EPS = 1e-6


def layer_norm(x: Tensor) -> Tensor:
    """Per-token layer norm without affine parameters."""
    return F.layer_norm(x, (x.shape[-1],), eps=LN_EPS)


def modulate(x: Tensor, shift: Tensor, scale: Tensor) -> Tensor:
    return x * (1 + scale.unsqueeze(-2)) + shift.unsqueeze(-2)


def multi_head_attention(q: Tensor, k: Tensor, v: Tensor, num_heads: int) -> Tensor:
    """Scaled dot-product attention over heads.

    q: (..., N, D); k, v: (..., L, D), broadcastable in the leading dims.
    """
    dim = q.shape[-1]
    if dim % num_heads:
        raise ValueError(f"num_heads={num_heads} must divide width {dim}")
    hd = dim // num_heads

    def split(a):
        return a.reshape(*a.shape[:-1], num_heads, hd).transpose(-2, -3)

    qh, kh, vh = split(q), split(k), split(v)
    attn = torch.softmax((qh @ kh.transpose(-1, -2)) * (1.0 / math.sqrt(hd)), dim=-1)
    out = (attn @ vh).transpose(-2, -3)
    return out.reshape(*out.shape[:-2], dim)


def sorted_softmax(logits: Tensor) -> Tensor:
    """Softmax over the last dim, reduced in descending-logit order.

    The normalizer is summed in a fixed order that does not depend on the
    position of each entry, so permuting the inputs permutes the output
    bit for bit.
    """
    order = torch.argsort(logits, dim=-1, descending=True, stable=True)
    probs = torch.softmax(torch.gather(logits, -1, order), dim=-1)
    return torch.empty_like(probs).scatter(-1, order, probs)


class SceneLowRankMixer(nn.Module):
    """Scene low-rank content mixer (SLRCM).

    ``x' = x + s(e_c) * LN(x) W_q diag(tanh(phi(e_c))) W_v`` with the strength
    ``s(e_c) = softplus(g(e_c)) * mu * tanh(alpha)``. The D x D operator is
    never formed; the update goes through the rank-r channel.
    """

    def __init__(self, dim: int, scene_dim: int, rank: int = 16, mu: float = 1.0):
        super().__init__()
        if not 1 <= rank <= dim:
            raise ValueError(f"rank must lie in [1, {dim}], got {rank}")
        self.dim, self.scene_dim, self.rank = dim, scene_dim, rank
        self.mu = float(mu)
        self.w_q = nn.Parameter(torch.randn(dim, rank) / math.sqrt(dim))
        self.w_v = nn.Parameter(torch.randn(rank, dim) / math.sqrt(rank))
        self.phi = nn.Linear(scene_dim, rank)
        self.g = nn.Linear(scene_dim, 1)
        self.alpha = nn.Parameter(torch.zeros(()))

    def strength(self, e_c: Tensor) -> Tensor:
        return F.softplus(self.g(e_c)) * self.mu * torch.tanh(self.alpha)

    def forward(self, x: Tensor, e_c: Tensor) -> Tensor:
        if e_c.shape[-1] != self.scene_dim:
            raise ValueError(f"scene embedding width {e_c.shape[-1]} != {self.scene_dim}")
        gate = torch.tanh(self.phi(e_c))
        h = (layer_norm(x) @ self.w_q) * gate.unsqueeze(-2)
        return x + self.strength(e_c).unsqueeze(-1) * (h @ self.w_v)


class MoESoundscapeConditioning(nn.Module):
    """Mixture-of-experts cross-attention onto soundscape tokens.

    Keys and values are projected once from the soundscape tokens and shared
    by every expert; each expert owns a low-rank query ``W_qdown W_qup``.
    Experts are routed from the pooled soundscape embedding against learned
    prototypes (shifted per prototype by the timestep embedding), the top-k
    are mixed with a per-expert temperature softmax, and the sum enters the
    residual stream through ``tanh(gate(e_s))``.
    """

    def __init__(self, dim: int, token_dim: int, summary_dim: int, time_dim: int,
                 num_experts: int = 8, top_k: int = 2, query_rank: int = 32,
                 num_heads: int = 4, tau: float = 1.0):
        super().__init__()
        if not 1 <= top_k <= num_experts:
            raise ValueError(f"top_k must lie in [1, num_experts={num_experts}], got {top_k}")
        if tau <= 0:
            raise ValueError(f"routing temperature must be positive, got {tau}")
        if dim % num_heads:
            raise ValueError(f"num_heads={num_heads} must divide width {dim}")
        self.dim, self.num_experts, self.top_k = dim, num_experts, top_k
        self.num_heads, self.tau = num_heads, float(tau)

        self.key = nn.Linear(token_dim, dim)
        self.value = nn.Linear(token_dim, dim)
        self.out = nn.Linear(dim, dim)
        self.q_down = nn.Parameter(torch.randn(num_experts, dim, query_rank) / math.sqrt(dim))
        self.q_up = nn.Parameter(torch.randn(num_experts, query_rank, dim) / math.sqrt(query_rank))
        self.prototypes = nn.Parameter(torch.randn(summary_dim, num_experts) / math.sqrt(summary_dim))
        self.time_proj = nn.Parameter(torch.randn(num_experts, summary_dim, time_dim) * 0.02)
        self.log_tau_m = nn.Parameter(torch.zeros(num_experts))
        self.gate = nn.Linear(summary_dim, 1)
        nn.init.zeros_(self.gate.weight)
        nn.init.zeros_(self.gate.bias)

    EXPERT_PARAMS = ("q_down", "q_up", "prototypes", "time_proj", "log_tau_m")

    @property
    def tau_m(self) -> Tensor:
        return self.log_tau_m.exp()

    def route(self, e_s: Tensor, e_t: Tensor) -> Tensor:
        """Routing weights ``softmax(e_s^T (P + W_t e_t) / tau)``, shape (B, M)."""
        shift = (e_t[:, None, None, :] * self.time_proj).sum(-1)        # (B, M, d)
        protos = self.prototypes.transpose(0, 1).unsqueeze(0) + shift   # (B, M, d)
        logits = (e_s.unsqueeze(1) * protos).sum(-1) / self.tau
        return sorted_softmax(logits)

    def select(self, w: Tensor) -> tuple[Tensor, Tensor]:
        """Top-k expert indices (rank order, ties to the lower index) and their
        renormalized mixing weights."""
        idx = torch.argsort(w, dim=-1, descending=True, stable=True)[:, :self.top_k]
        w_sel = torch.gather(w, -1, idx)
        mix = torch.softmax(w_sel / self.tau_m[idx], dim=-1)
        return idx, mix

    def gamma(self, e_s: Tensor) -> Tensor:
        return torch.tanh(self.gate(e_s))

    def expert_outputs(self, h: Tensor, k: Tensor, v: Tensor, idx: Tensor) -> Tensor:
        """Z_m for the selected experts: (B, k, N, D)."""
        # one full-batch product per used expert: identical op shapes for every
        # expert index, so results do not depend on where an expert sits
        q_all = h.new_zeros(h.shape[0], self.num_experts, *h.shape[1:])
        for m in idx.unique().tolist():
            q_all[:, m] = (h @ self.q_down[m]) @ self.q_up[m]
        q = q_all[torch.arange(h.shape[0], device=h.device).unsqueeze(1), idx]
        return self.out(multi_head_attention(q, k.unsqueeze(1), v.unsqueeze(1), self.num_heads))

    def forward(self, x: Tensor, s_tokens: Tensor, e_s: Tensor, e_t: Tensor) -> Tensor:
        k = self.key(s_tokens)
        v = self.value(s_tokens)
        w = self.route(e_s, e_t)
        idx, mix = self.select(w)
        z = self.expert_outputs(layer_norm(x), k, v, idx)
        mixed = (mix[:, :, None, None] * z).sum(1)
        return x + self.gamma(e_s).unsqueeze(-1) * mixed


class AdaLNZeroSelfAttention(nn.Module):
    """Self-attention residual modulated by the timestep embedding (AdaLN-Zero)."""

    def __init__(self, dim: int, time_dim: int, num_heads: int):
        super().__init__()
        if dim % num_heads:
            raise ValueError(f"num_heads={num_heads} must divide width {dim}")
        self.num_heads = num_heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)
        self.modulation = nn.Sequential(nn.SiLU(), nn.Linear(time_dim, 3 * dim))
        nn.init.zeros_(self.modulation[1].weight)
        nn.init.zeros_(self.modulation[1].bias)

    def attend(self, h: Tensor) -> Tensor:
        q, k, v = self.qkv(h).chunk(3, dim=-1)
        return self.proj(multi_head_attention(q, k, v, self.num_heads))

    def forward(self, x: Tensor, e_t: Tensor) -> Tensor:
        shift, scale, gate = self.modulation(e_t).chunk(3, dim=-1)
        h = modulate(layer_norm(x), shift, scale)
        return x + gate.unsqueeze(-2) * self.attend(h)


class SceneAdaLNFeedForward(nn.Module):
    """Pointwise feed-forward stage under S-AdaLN modulation.

    ``(shift, scale) = t_branch(e_t) + tanh(lam) * c_branch(e_c)``; the gate
    comes from the timestep branch only. ``use_scene=False`` gives the plain
    AdaLN-Zero feed-forward stage.
    """

    def __init__(self, dim: int, time_dim: int, scene_dim: int, mlp_ratio: float = 4.0,
                 use_scene: bool = True):
        super().__init__()
        hidden = int(dim * mlp_ratio)
        self.use_scene = use_scene
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(approximate="tanh"),
                                 nn.Linear(hidden, dim))
        self.t_modulation = nn.Sequential(nn.SiLU(), nn.Linear(time_dim, 3 * dim))
        nn.init.zeros_(self.t_modulation[1].weight)
        nn.init.zeros_(self.t_modulation[1].bias)
        if use_scene:
            self.c_modulation = nn.Sequential(nn.SiLU(), nn.Linear(scene_dim, 2 * dim))
            self.lam = nn.Parameter(torch.zeros(()))

    def modulation(self, e_t: Tensor, e_c: Tensor | None = None) -> tuple[Tensor, Tensor, Tensor]:
        shift, scale, gate = self.t_modulation(e_t).chunk(3, dim=-1)
        if self.use_scene and e_c is not None:
            c_shift, c_scale = self.c_modulation(e_c).chunk(2, dim=-1)
            mix = torch.tanh(self.lam)
            shift = shift + mix * c_shift
            scale = scale + mix * c_scale
        return shift, scale, gate

    def forward(self, x: Tensor, e_t: Tensor, e_c: Tensor | None = None) -> Tensor:
        shift, scale, gate = self.modulation(e_t, e_c)
        return x + gate.unsqueeze(-2) * self.mlp(modulate(layer_norm(x), shift, scale))
