"""Network building blocks. Feature maps are ``(N, C, H, W)`` with ``N = B * F``."""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from .identity import zero_module


def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float32) / half)
    args = t.float()[:, None] * freqs[None]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


def norm(channels: int) -> nn.GroupNorm:
    groups = math.gcd(channels, 8)
    return nn.GroupNorm(groups, channels)


class ResBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, temb_dim: int | None = None, bias: bool = True):
        super().__init__()
        self.norm1 = norm(in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1, bias=bias)
        self.temb = nn.Linear(temb_dim, out_ch) if temb_dim else None
        self.norm2 = norm(out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1, bias=bias)
        self.skip = nn.Conv2d(in_ch, out_ch, 1, bias=bias) if in_ch != out_ch else nn.Identity()

    def forward(self, x: torch.Tensor, temb: torch.Tensor | None = None) -> torch.Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        if self.temb is not None and temb is not None:
            h = h + self.temb(F.silu(temb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class Downsample(nn.Module):
    def __init__(self, ch: int):
        super().__init__()
        self.conv = nn.Conv2d(ch, ch, 3, stride=2, padding=1)

    def forward(self, x):
        return self.conv(x)


class Upsample(nn.Module):
    def __init__(self, ch: int):
        super().__init__()
        self.conv = nn.Conv2d(ch, ch, 3, padding=1)

    def forward(self, x):
        return self.conv(F.interpolate(x, scale_factor=2.0, mode="nearest"))


class SpatialAttention(nn.Module):
    """Per-frame self-attention whose keys/values also see reference tokens."""

    def __init__(self, ch: int, heads: int = 4):
        super().__init__()
        if ch % heads:
            raise ValueError("channel count must be divisible by the head count")
        self.heads = heads
        self.norm = norm(ch)
        self.ref_norm = norm(ch)
        self.q = nn.Linear(ch, ch, bias=False)
        self.k = nn.Linear(ch, ch, bias=False)
        self.v = nn.Linear(ch, ch, bias=False)
        self.out = nn.Linear(ch, ch)

    def _split(self, x):
        n, l, c = x.shape
        return x.reshape(n, l, self.heads, c // self.heads).transpose(1, 2)

    def forward(self, x: torch.Tensor, ref: torch.Tensor | None = None, frames: int = 1) -> torch.Tensor:
        """``x`` is ``(B*F, C, h, w)``; ``ref`` is ``(B, C, h', w')`` shared by the clip's frames."""
        n, c, h, w = x.shape
        tokens = self.norm(x).flatten(2).transpose(1, 2)
        kv = tokens
        if ref is not None:
            r = self.ref_norm(ref).flatten(2).transpose(1, 2)
            r = r.repeat_interleave(frames, dim=0)
            kv = torch.cat([tokens, r], dim=1)
        q, k, v = self._split(self.q(tokens)), self._split(self.k(kv)), self._split(self.v(kv))
        att = F.scaled_dot_product_attention(q, k, v)
        att = att.transpose(1, 2).reshape(n, h * w, c)
        return x + self.out(att).transpose(1, 2).reshape(n, c, h, w)


def sinusoidal_positions(length: int, dim: int) -> torch.Tensor:
    return timestep_embedding(torch.arange(length), dim)


class TemporalAttention(nn.Module):
    """Self-attention across frames at every spatial location (motion module).

    The output projection starts at zero, so a fresh module is the identity.
    A single frame has no temporal context and passes through untouched.
    """

    def __init__(self, ch: int, heads: int = 4, max_frames: int = 32, positional: bool = True):
        super().__init__()
        if ch % heads:
            raise ValueError("channel count must be divisible by the head count")
        self.heads = heads
        self.max_frames = max_frames
        self.positional = positional
        self.norm = nn.LayerNorm(ch)
        self.qkv = nn.Linear(ch, 3 * ch, bias=False)
        self.out = zero_module(nn.Linear(ch, ch))
        self.register_buffer("pos", sinusoidal_positions(max_frames, ch), persistent=False)

    def forward(self, x: torch.Tensor, frames: int) -> torch.Tensor:
        if frames == 1:
            return x
        if frames > self.max_frames:
            raise ValueError(f"{frames} frames exceed the motion module window {self.max_frames}")
        n, c, h, w = x.shape
        b = n // frames
        seq = x.reshape(b, frames, c, h * w).permute(0, 3, 1, 2).reshape(b * h * w, frames, c)
        z = self.norm(seq)
        if self.positional:
            z = z + self.pos[:frames]
        q, k, v = self.qkv(z).chunk(3, dim=-1)
        split = lambda a: a.reshape(-1, frames, self.heads, c // self.heads).transpose(1, 2)
        att = F.scaled_dot_product_attention(split(q), split(k), split(v))
        att = att.transpose(1, 2).reshape(-1, frames, c)
        seq = seq + self.out(att)
        return seq.reshape(b, h * w, frames, c).permute(0, 2, 3, 1).reshape(n, c, h, w)
