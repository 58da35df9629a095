"""In-context generative transformer: multimodal sequence assembly, 2-D
positional-index assignment, and velocity prediction.

The sequence layout is [style, text, noisy, content] with style and/or
content optional. Style tokens reuse the text positional indices cyclically;
noisy-latent tokens tile the generation grid from (0, 0); content tokens get
the diagonal offset (h + i, w + j) so they never collide with a noisy-latent
position. Attention is joint, bidirectional, and shared across all segments
with 2-D rotary position mixing; predictions are read off the noisy slots.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch import Tensor

from .encoders import D_LATENT, D_MODEL, LATENT_GRID

SEGMENT_ORDER = ("style", "text", "noisy", "content")


@dataclass
class ArchConfig:
    d_model: int = D_MODEL
    n_heads: int = 4
    n_blocks: int = 4
    mlp_ratio: float = 4.0
    d_latent: int = D_LATENT
    grid: int = LATENT_GRID
    rope_base: float = 100.0

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError("d_model must divide evenly across heads")
        head_dim = self.d_model // self.n_heads
        if head_dim % 4:
            raise ValueError("head_dim must be divisible by 4 for 2-D rotary mixing")

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


@dataclass
class Segment:
    kind: str
    tokens: Tensor                          # (B, n, d_model)
    positions: Optional[Tensor] = None      # (n, 2) int64, shared across batch


@dataclass
class TokenSequence:
    segments: list[Segment]
    grid: tuple[int, int]

    def get(self, kind: str) -> Optional[Segment]:
        for seg in self.segments:
            if seg.kind == kind:
                return seg
        return None

    @property
    def length(self) -> int:
        return sum(seg.tokens.shape[1] for seg in self.segments)


def build_sequence(
    text: Tensor,
    noisy: Tensor,
    style: Optional[Tensor] = None,
    content: Optional[Tensor] = None,
    grid: Optional[tuple[int, int]] = None,
) -> TokenSequence:
    """Assemble segments in the fixed order; noisy is (B, h*w, d) over `grid`."""
    if grid is None:
        side = int(math.isqrt(noisy.shape[1]))
        if side * side != noisy.shape[1]:
            raise ValueError("cannot infer a square grid; pass grid explicitly")
        grid = (side, side)
    segments = []
    if style is not None:
        segments.append(Segment("style", style))
    segments.append(Segment("text", text))
    segments.append(Segment("noisy", noisy))
    if content is not None:
        segments.append(Segment("content", content))
    return TokenSequence(segments=segments, grid=grid)


def assign_positions(seq: TokenSequence) -> TokenSequence:
    """Fill per-token 2-D integer indices according to the segment rules."""
    text = seq.get("text")
    if text is None or seq.get("noisy") is None:
        raise ValueError("sequence requires text and noisy segments")
    n_text = text.tokens.shape[1]
    h, w = seq.grid
    text_pos = torch.stack(
        [torch.zeros(n_text, dtype=torch.long), torch.arange(n_text, dtype=torch.long)], dim=1
    )
    out = []
    for seg in seq.segments:
        n = seg.tokens.shape[1]
        if seg.kind == "text":
            pos = text_pos
        elif seg.kind == "style":
            pos = text_pos[torch.arange(n) % n_text]
        elif seg.kind == "noisy":
            ii, jj = torch.meshgrid(torch.arange(h), torch.arange(w), indexing="ij")
            pos = torch.stack([ii.reshape(-1), jj.reshape(-1)], dim=1)
        elif seg.kind == "content":
            ii, jj = torch.meshgrid(torch.arange(h), torch.arange(w), indexing="ij")
            pos = torch.stack([ii.reshape(-1) + h, jj.reshape(-1) + w], dim=1)
        else:
            raise ValueError(f"unknown segment kind {seg.kind!r}")
        out.append(replace(seg, positions=pos))
    return TokenSequence(segments=out, grid=seq.grid)


# =============================================================================
# 2-D rotary position mixing
# =============================================================================

def rope_cos_sin(positions: Tensor, head_dim: int, base: float, dtype, device) -> tuple[Tensor, Tensor]:
    """cos/sin tables for 2-D rotary mixing: first half of the head rotates by
    the row index, second half by the column index. Returns (N, head_dim/2)."""
    half = head_dim // 2                       # rotary pairs per token
    per_axis = half // 2
    freqs = 1.0 / (base ** (torch.arange(per_axis, dtype=torch.float64, device=device) / per_axis))
    angles = []
    for axis in range(2):
        pos = positions[:, axis].to(torch.float64)
        angles.append(pos.unsqueeze(-1) * freqs)
    ang = torch.cat(angles, dim=-1)            # (N, half)
    return ang.cos().to(dtype), ang.sin().to(dtype)


def apply_rotary(x: Tensor, cos: Tensor, sin: Tensor) -> Tensor:
    """x: (B, heads, N, head_dim); cos/sin: (N, head_dim/2)."""
    x_even = x[..., 0::2]
    x_odd = x[..., 1::2]
    out = torch.empty_like(x)
    out[..., 0::2] = x_even * cos - x_odd * sin
    out[..., 1::2] = x_even * sin + x_odd * cos
    return out


# =============================================================================
# Transformer
# =============================================================================

class RMSNorm(nn.Module):
    def __init__(self, dim: int, eps: float = 1e-6):
        super().__init__()
        self.eps = eps
        self.weight = nn.Parameter(torch.ones(dim))

    def forward(self, x: Tensor) -> Tensor:
        norm = x.pow(2).mean(-1, keepdim=True).add(self.eps).rsqrt()
        return x * norm * self.weight


class Block(nn.Module):
    def __init__(self, cfg: ArchConfig):
        super().__init__()
        d = cfg.d_model
        self.n_heads = cfg.n_heads
        self.head_dim = d // cfg.n_heads
        self.norm1 = RMSNorm(d)
        self.qkv = nn.Linear(d, 3 * d)
        self.out = nn.Linear(d, d)
        self.norm2 = RMSNorm(d)
        hidden = int(d * cfg.mlp_ratio)
        self.fc1 = nn.Linear(d, hidden)
        self.fc2 = nn.Linear(hidden, d)

    def forward(self, x: Tensor, cos: Tensor, sin: Tensor) -> Tensor:
        b, n, d = x.shape
        q, k, v = self.qkv(self.norm1(x)).chunk(3, dim=-1)
        q = q.view(b, n, self.n_heads, self.head_dim).transpose(1, 2)
        k = k.view(b, n, self.n_heads, self.head_dim).transpose(1, 2)
        v = v.view(b, n, self.n_heads, self.head_dim).transpose(1, 2)
        q = apply_rotary(q, cos, sin)
        k = apply_rotary(k, cos, sin)
        attn = F.scaled_dot_product_attention(q, k, v)     # full bidirectional
        x = x + self.out(attn.transpose(1, 2).reshape(b, n, d))
        return x + self.fc2(F.silu(self.fc1(self.norm2(x))))


class VelocityBackbone(nn.Module):
    """Joint-attention transformer predicting the flow velocity on the noisy
    latent grid. Timestep conditioning is an additive embedding on the
    noisy-latent tokens only."""

    def __init__(self, cfg: Optional[ArchConfig] = None):
        super().__init__()
        self.cfg = cfg or ArchConfig()
        d = self.cfg.d_model
        self.latent_in = nn.Linear(self.cfg.d_latent, d)
        self.content_in = nn.Linear(self.cfg.d_latent, d)
        self.time_mlp = nn.Sequential(nn.Linear(d, d), nn.SiLU(), nn.Linear(d, d))
        self.blocks = nn.ModuleList(Block(self.cfg) for _ in range(self.cfg.n_blocks))
        self.norm_out = RMSNorm(d)
        self.head = nn.Linear(d, self.cfg.d_latent)

    def embed_noisy(self, x_t: Tensor) -> Tensor:
        """(B, h, w, d_latent) -> (B, h*w, d_model)."""
        b, h, w, _ = x_t.shape
        return self.latent_in(x_t.reshape(b, h * w, -1))

    def embed_content(self, latent: Tensor) -> Tensor:
        b, h, w, _ = latent.shape
        return self.content_in(latent.reshape(b, h * w, -1))

    def time_embedding(self, t: Tensor) -> Tensor:
        d = self.cfg.d_model
        half = d // 2
        t = t.reshape(-1, 1).float()
        freqs = torch.exp(
            torch.arange(half, dtype=torch.float32, device=t.device) * (-math.log(1000.0) / (half - 1))
        )
        feats = torch.cat([torch.sin(t * freqs * 1000.0), torch.cos(t * freqs * 1000.0)], dim=1)
        return self.time_mlp(feats.to(self.head.weight.dtype))

    def predict_velocity(self, seq: TokenSequence, t: Tensor | float) -> Tensor:
        """Run joint attention over the assembled sequence; returns the
        velocity field (B, h, w, d_latent) read from the noisy slots."""
        noisy = seq.get("noisy")
        if noisy is None:
            raise ValueError("sequence is missing the noisy-latent segment")
        if any(seg.positions is None for seg in seq.segments):
            raise ValueError("positions not assigned; call assign_positions first")

        tokens = torch.cat([seg.tokens for seg in seq.segments], dim=1)
        positions = torch.cat([seg.positions for seg in seq.segments], dim=0)
        b, n, d = tokens.shape
        h, w = seq.grid

        offset = 0
        for seg in seq.segments:
            if seg.kind == "noisy":
                noisy_slice = slice(offset, offset + seg.tokens.shape[1])
            offset += seg.tokens.shape[1]

        t = torch.as_tensor(t, dtype=tokens.dtype, device=tokens.device)
        if t.dim() == 0:
            t = t.expand(b)
        temb = self.time_embedding(t).unsqueeze(1)                    # (B, 1, d)
        mask = torch.zeros(1, n, 1, dtype=tokens.dtype, device=tokens.device)
        mask[:, noisy_slice] = 1.0
        x = tokens + mask * temb

        cos, sin = rope_cos_sin(
            positions, d // self.cfg.n_heads, self.cfg.rope_base, tokens.dtype, tokens.device
        )
        for block in self.blocks:
            x = block(x, cos, sin)
        out = self.head(self.norm_out(x[:, noisy_slice]))
        return out.reshape(b, h, w, self.cfg.d_latent)
