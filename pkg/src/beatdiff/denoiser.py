"""Conditional noise-prediction U-Net over 2-D latents.

Four scales of residual blocks with a middle block, stride-2 convolutional
downsampling, nearest-neighbour + conv upsampling, and skip connections.
The timestep enters through a sinusoidal embedding; conditioning is injected
per block as feature-wise scale/shift computed from the concatenated
[time, conditioning] context, with an optional single-head cross-attention
block per scale.  One parameter set serves both conditioning branches: the
branch is decided purely by which vector is passed in.

All activations are smooth (SiLU), which keeps finite-difference gradient
checks well behaved at float64.
"""

from __future__ import annotations

import math

import numpy as np
import torch
from torch import nn

from .diffusion import LatentSample
from .schedule import NoiseSchedule

__all__ = ["time_embed", "ConditionalUNet", "predict_noise"]


def time_embed(t, dim: int) -> torch.Tensor:
    """Sinusoidal timestep features with interleaved (sin, cos) pairs.

    Frequencies are geometrically spaced from 1 down to 1/10000; injective
    over any practical step range for dim >= 2.  Accepts an int or a 1-D
    tensor of steps; t = 0 gives the (0, 1, 0, 1, ...) pattern.
    """
    if dim < 2 or dim % 2 != 0:
        raise ValueError(f"embedding dim must be even and >= 2, got {dim}")
    scalar = not torch.is_tensor(t) or t.dim() == 0
    steps = torch.as_tensor(t, dtype=torch.float64).reshape(-1)
    if (steps < 0).any():
        raise ValueError("timesteps must be non-negative")
    half = dim // 2
    if half == 1:
        freqs = torch.ones(1, dtype=torch.float64)
    else:
        freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / (half - 1))
    angles = steps[:, None] * freqs[None, :]
    emb = torch.stack([torch.sin(angles), torch.cos(angles)], dim=2).reshape(len(steps), dim)
    return emb[0] if scalar else emb


def _groups(channels: int) -> int:
    # at least two channels per group, so 1x1 bottlenecks stay normalizable
    for g in (8, 4, 2):
        if channels % g == 0 and channels // g >= 2:
            return g
    return 1


class _Film(nn.Module):
    """Per-channel scale/shift from the [time || conditioning] context."""

    def __init__(self, ctx_dim: int, channels: int):
        super().__init__()
        self.proj = nn.Linear(ctx_dim, 2 * channels)

    def forward(self, h, ctx):
        scale, shift = self.proj(ctx)[:, :, None, None].chunk(2, dim=1)
        return h * (1.0 + scale) + shift


class _ResUnit(nn.Module):
    def __init__(self, ch_in: int, ch_out: int, ctx_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(ch_in), ch_in)
        self.conv1 = nn.Conv2d(ch_in, ch_out, 3, padding=1)
        self.film = _Film(ctx_dim, ch_out)
        self.norm2 = nn.GroupNorm(_groups(ch_out), ch_out)
        self.conv2 = nn.Conv2d(ch_out, ch_out, 3, padding=1)
        self.skip = nn.Conv2d(ch_in, ch_out, 1) if ch_in != ch_out else nn.Identity()
        self.act = nn.SiLU()

    def forward(self, h, ctx):
        out = self.conv1(self.act(self.norm1(h)))
        out = self.film(out, ctx)
        out = self.conv2(self.act(self.norm2(out)))
        return out + self.skip(h)


class _CrossAttention(nn.Module):
    """Single-head attention from spatial positions to conditioning tokens."""

    def __init__(self, channels: int, cond_dim: int):
        super().__init__()
        self.norm = nn.GroupNorm(_groups(channels), channels)
        self.q = nn.Linear(channels, channels)
        self.k = nn.Linear(cond_dim, channels)
        self.v = nn.Linear(cond_dim, channels)
        self.out = nn.Linear(channels, channels)
        self.scale = channels ** -0.5

    def forward(self, h, c):
        b, ch, height, width = h.shape
        tokens = c[:, None, :]  # one conditioning token
        q = self.q(self.norm(h).reshape(b, ch, -1).transpose(1, 2))
        k, v = self.k(tokens), self.v(tokens)
        attn = torch.softmax(q @ k.transpose(1, 2) * self.scale, dim=-1)
        out = self.out(attn @ v).transpose(1, 2).reshape(b, ch, height, width)
        return h + out


class _Downsample(nn.Module):
    def __init__(self, channels):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, 3, stride=2, padding=1)

    def forward(self, h):
        return self.conv(h)


class _Upsample(nn.Module):
    def __init__(self, channels):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, h):
        return self.conv(nn.functional.interpolate(h, scale_factor=2, mode="nearest"))


class ConditionalUNet(nn.Module):
    """eps(z_t, t, c) with four scales, a middle block, and skip connections."""

    def __init__(
        self,
        in_channels: int = 1,
        widths: tuple[int, ...] = (16, 32, 64, 64),
        res_units: int = 2,
        time_dim: int = 64,
        cond_dim: int = 96,
        cross_attention: bool = False,
    ):
        super().__init__()
        if len(widths) != 4:
            raise ValueError(f"expected 4 scale widths, got {len(widths)}")
        self.in_channels = in_channels
        self.widths = tuple(widths)
        self.time_dim = time_dim
        self.cond_dim = cond_dim
        self.cross_attention = cross_attention

        ctx_dim = time_dim + cond_dim
        self.time_mlp = nn.Sequential(
            nn.Linear(time_dim, time_dim), nn.SiLU(), nn.Linear(time_dim, time_dim))
        self.cond_mlp = nn.Sequential(
            nn.Linear(cond_dim, cond_dim), nn.SiLU(), nn.Linear(cond_dim, cond_dim))

        self.stem = nn.Conv2d(in_channels, widths[0], 3, padding=1)

        self.down_blocks = nn.ModuleList()
        self.down_attn = nn.ModuleList()
        self.downsamples = nn.ModuleList()
        ch = widths[0]
        for i, w in enumerate(widths):
            units = nn.ModuleList()
            for _ in range(res_units):
                units.append(_ResUnit(ch, w, ctx_dim))
                ch = w
            self.down_blocks.append(units)
            self.down_attn.append(_CrossAttention(w, cond_dim) if cross_attention else None)
            self.downsamples.append(_Downsample(w) if i < len(widths) - 1 else None)

        self.middle = nn.ModuleList([_ResUnit(ch, ch, ctx_dim), _ResUnit(ch, ch, ctx_dim)])

        self.up_blocks = nn.ModuleList()
        self.up_attn = nn.ModuleList()
        self.upsamples = nn.ModuleList()
        for i, w in enumerate(reversed(widths)):
            units = nn.ModuleList()
            for u in range(res_units):
                units.append(_ResUnit(ch + w if u == 0 else ch, w, ctx_dim))
                ch = w
            self.up_blocks.append(units)
            self.up_attn.append(_CrossAttention(w, cond_dim) if cross_attention else None)
            self.upsamples.append(_Upsample(w) if i < len(widths) - 1 else None)

        self.head_norm = nn.GroupNorm(_groups(ch), ch)
        self.head = nn.Conv2d(ch, in_channels, 3, padding=1)
        self.act = nn.SiLU()

    def forward(self, z: torch.Tensor, t, c: torch.Tensor) -> torch.Tensor:
        if z.dim() != 4 or z.shape[1] != self.in_channels:
            raise ValueError(f"latent must be (B, {self.in_channels}, H, W), got {tuple(z.shape)}")
        if c.dim() == 1:
            c = c[None, :]
        if c.shape[-1] != self.cond_dim:
            raise ValueError(f"conditioning dim {c.shape[-1]} does not match {self.cond_dim}")
        if c.shape[0] == 1 and z.shape[0] > 1:
            c = c.expand(z.shape[0], -1)
        if not torch.is_tensor(t):
            t = torch.full((z.shape[0],), int(t), dtype=torch.long)
        temb = time_embed(t, self.time_dim).to(z.dtype)
        ctx = torch.cat([self.time_mlp(temb), self.cond_mlp(c)], dim=-1)

        h = self.stem(z)
        skips = []
        for units, attn, down in zip(self.down_blocks, self.down_attn, self.downsamples):
            for unit in units:
                h = unit(h, ctx)
            if attn is not None:
                h = attn(h, c)
            skips.append(h)
            if down is not None:
                h = down(h)
        for unit in self.middle:
            h = unit(h, ctx)
        for i, (units, attn, up) in enumerate(zip(self.up_blocks, self.up_attn, self.upsamples)):
            h = torch.cat([h, skips[-(i + 1)]], dim=1)
            for unit in units:
                h = unit(h, ctx)
            if attn is not None:
                h = attn(h, c)
            if up is not None:
                h = up(h)
        return self.head(self.act(self.head_norm(h)))


def predict_noise(p: ConditionalUNet, z_t: LatentSample, t: int, c,
                  s: NoiseSchedule | None = None) -> np.ndarray:
    """Contract-level single-sample wrapper around the network.

    Validates the timestep against the schedule when one is given, accepts a
    numpy latent, and returns a numpy noise estimate of the same shape.
    """
    if s is not None:
        s.check_timestep(t)
    elif t < 1:
        raise ValueError(f"timestep must be >= 1, got {t}")
    z = torch.as_tensor(np.asarray(z_t.z), dtype=torch.float32)
    if z.dim() == 3:
        z = z[None]
    elif z.dim() != 4:
        raise ValueError(f"latent must be (C, H, W) or (B, C, H, W), got {tuple(z.shape)}")
    cv = torch.as_tensor(np.asarray(c), dtype=torch.float32)
    was_training = p.training
    p.eval()
    try:
        with torch.no_grad():
            out = p(z, t, cv)
    finally:
        p.train(was_training)
    out = out.numpy().astype(np.float64)
    return out.reshape(np.shape(z_t.z))
