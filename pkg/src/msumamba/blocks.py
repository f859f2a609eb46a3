"""Network building blocks: Monte Carlo attention, the dual-branch hybrid
block, attention-based skip fusion, and the patch resampling layers."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, ShapeError
from .ops import LayerNorm2d, bilinear_resize, channel_concat, channel_shuffle, channel_split
from .ssm import VSSBlock


@dataclass
class MCAttnConfig:
    """Candidate pooled-summary sizes and their selection probabilities.

    Training samples one size per call; evaluation takes the exact
    expectation over sizes. probs=None means uniform.
    """
    pool_sizes: tuple[int, ...] = (1, 2, 3)
    probs: Optional[tuple[float, ...]] = None

    def validate(self) -> None:
        if len(self.pool_sizes) == 0:
            raise ConfigError("mcattn.pool_sizes must not be empty")
        if len(set(self.pool_sizes)) != len(self.pool_sizes):
            raise ConfigError(f"mcattn.pool_sizes must be distinct, got {self.pool_sizes}")
        if any(s < 1 for s in self.pool_sizes):
            raise ConfigError(f"mcattn.pool_sizes must be >= 1, got {self.pool_sizes}")
        if self.probs is not None:
            if len(self.probs) != len(self.pool_sizes):
                raise ConfigError("mcattn.probs must match pool_sizes in length")
            if any(p < 0 for p in self.probs):
                raise ConfigError("mcattn.probs must be nonnegative")
            if abs(sum(self.probs) - 1.0) > 1e-9:
                raise ConfigError(f"mcattn.probs must sum to 1, got {sum(self.probs)}")

    def resolved_probs(self) -> tuple[float, ...]:
        if self.probs is None:
            return tuple(1.0 / len(self.pool_sizes) for _ in self.pool_sizes)
        return tuple(self.probs)


@dataclass
class McatTrace:
    """Intermediates of one bottleneck pass, for inspection in tests."""
    x_prime: torch.Tensor
    x_double_prime: torch.Tensor
    x_out: torch.Tensor


@dataclass
class ADFFTrace:
    """Intermediates of one fusion pass, for inspection in tests."""
    w_sp: torch.Tensor
    f_l: torch.Tensor
    w_ch: Optional[torch.Tensor]
    f_ch: torch.Tensor
    fused: torch.Tensor


class MonteCarloAttention(nn.Module):
    """Sigmoid attention from an average-pooled summary at a drawn size.

    a_i = sigmoid(conv1x1(resize(avgpool(x, (i, i)), (H, W)))). Training
    draws i from the declared probabilities (rng required); eval uses the
    expectation sum_i P(i) a_i. form="modulated" returns a*x, "printed"
    returns the map itself. Sizes larger than min(H, W) are dropped at
    call time and the probabilities renormalized over the rest.
    """

    def __init__(self, channels: int, cfg: Optional[MCAttnConfig] = None, form: str = "modulated"):
        super().__init__()
        cfg = cfg if cfg is not None else MCAttnConfig()
        cfg.validate()
        if form not in ("modulated", "printed"):
            raise ConfigError(f"unknown attention form {form!r}")
        self.cfg = cfg
        self.form = form
        self.conv = nn.Conv2d(channels, channels, 1)
        self.last_pool_size: Optional[int] = None

    def _attention_map(self, x: torch.Tensor, size: int) -> torch.Tensor:
        pooled = F.adaptive_avg_pool2d(x, (size, size))
        return torch.sigmoid(self.conv(bilinear_resize(pooled, (x.shape[2], x.shape[3]))))

    def _effective(self, h: int, w: int) -> tuple[list[int], list[float]]:
        limit = min(h, w)
        pairs = [(s, p) for s, p in zip(self.cfg.pool_sizes, self.cfg.resolved_probs())
                 if s <= limit]
        if not pairs:
            raise ShapeError(f"no pool size in {self.cfg.pool_sizes} fits a {h}x{w} map")
        total = sum(p for _, p in pairs)
        if total <= 0:
            raise ConfigError("all feasible pool sizes have zero probability")
        return [s for s, _ in pairs], [p / total for _, p in pairs]

    def forward(self, x: torch.Tensor, rng: Optional[torch.Generator] = None) -> torch.Tensor:
        sizes, probs = self._effective(x.shape[2], x.shape[3])
        if self.training:
            if rng is None:
                raise ConfigError("training-mode Monte Carlo attention needs an rng")
            idx = int(torch.multinomial(torch.tensor(probs, dtype=torch.float64), 1,
                                        generator=rng).item())
            self.last_pool_size = sizes[idx]
            a = self._attention_map(x, sizes[idx])
        else:
            self.last_pool_size = None
            a = sum(p * self._attention_map(x, s) for s, p in zip(sizes, probs))
        return a * x if self.form == "modulated" else a


class McatBottleneck(nn.Module):
    """1x1 reduce -> Monte Carlo attention -> 3x3 -> 1x1 expand, residual.

    Zeroing the expand conv makes the block an exact identity. Built
    without attention (mcattn=None), it is a plain bottleneck.
    """

    def __init__(self, channels: int, reduction: int = 4,
                 mcattn: Optional[MCAttnConfig] = None, form: str = "modulated"):
        super().__init__()
        mid = channels // reduction
        if mid < 1:
            raise ConfigError(f"bottleneck reduction {reduction} leaves no channels from {channels}")
        self.reduce = nn.Conv2d(channels, mid, 1)
        self.attn = MonteCarloAttention(mid, mcattn, form) if mcattn is not None else None
        self.conv3 = nn.Conv2d(mid, mid, 3, padding=1)
        self.expand = nn.Conv2d(mid, channels, 1)
        self.record_traces = False
        self.last_trace: Optional[McatTrace] = None

    def forward(self, x: torch.Tensor, rng: Optional[torch.Generator] = None) -> torch.Tensor:
        x_prime = self.reduce(x)
        x_dp = self.attn(x_prime, rng) if self.attn is not None else x_prime
        out = self.expand(self.conv3(x_dp)) + x
        if self.record_traces:
            self.last_trace = McatTrace(x_prime.detach(), x_dp.detach(), out.detach())
        return out


class SSMcatBlock(nn.Module):
    """Dual-branch hybrid block.

    Channels split in half; one half runs through a convolutional
    bottleneck stack, the other through state-space blocks; the halves are
    re-merged by concat + channel shuffle (groups=2). With both residual
    branches zeroed the block reduces to channel_shuffle(x, 2) exactly.
    """

    def __init__(self, channels: int, state_dim: int = 16, expansion: int = 2,
                 mcattn: Optional[MCAttnConfig] = None, mcattn_form: str = "modulated",
                 reduction: int = 4, conv_depth: int = 1, mamba_depth: int = 1,
                 dt_rank: Optional[int] = None):
        super().__init__()
        if channels % 2 != 0:
            raise ConfigError(f"dual-branch block needs even channels, got {channels}")
        half = channels // 2
        self.conv_branch = nn.ModuleList(
            [McatBottleneck(half, reduction=reduction, mcattn=mcattn, form=mcattn_form)
             for _ in range(conv_depth)])
        self.mamba_branch = nn.ModuleList(
            [VSSBlock(half, state_dim=state_dim, expansion=expansion, dt_rank=dt_rank)
             for _ in range(mamba_depth)])

    def forward(self, x: torch.Tensor, rng: Optional[torch.Generator] = None) -> torch.Tensor:
        a, b = channel_split(x, x.shape[1] // 2)
        for blk in self.conv_branch:
            a = blk(a, rng)
        for blk in self.mamba_branch:
            b = blk(b)
        return channel_shuffle(channel_concat([a, b]), 2)


class ADFF(nn.Module):
    """Attention-based fusion of a same-shape encoder/decoder feature pair.

    A single-channel sigmoid gate is built from 1x1 projections of the two
    inputs; their concatenation is batch-normalized, refined by channel
    attention (shared two-layer MLP over global avg+max pools), projected
    back to C channels, and gated spatially. channel_attention=False gives
    the plain variant without the channel refinement.
    """

    def __init__(self, channels: int, reduction: int = 4, channel_attention: bool = True,
                 channel_form: str = "mlp"):
        super().__init__()
        if channel_form not in ("mlp", "conv"):
            raise ConfigError(f"unknown channel attention form {channel_form!r}")
        c2 = 2 * channels
        self.spatial_enc = nn.Conv2d(channels, 1, 1)
        self.spatial_dec = nn.Conv2d(channels, 1, 1)
        self.bn = nn.BatchNorm2d(c2)
        self.channel_attention = channel_attention
        self.channel_form = channel_form
        if channel_attention:
            if channel_form == "mlp":
                hidden = max(c2 // reduction, 1)
                self.channel_mlp = nn.Sequential(
                    nn.Conv2d(c2, hidden, 1), nn.ReLU(), nn.Conv2d(hidden, c2, 1))
            else:
                self.channel_conv = nn.Conv2d(c2, c2, 1)
        self.proj = nn.Conv2d(c2, channels, 1)
        self.record_traces = False
        self.last_trace: Optional[ADFFTrace] = None
        self.spatial_gate_override: Optional[torch.Tensor] = None  # test injection hook

    def forward(self, f_enc: torch.Tensor, f_dec: torch.Tensor) -> torch.Tensor:
        if f_enc.shape != f_dec.shape:
            raise ShapeError(f"fusion inputs must match, got {tuple(f_enc.shape)} vs {tuple(f_dec.shape)}")
        w_sp = torch.sigmoid(self.spatial_enc(f_enc) + self.spatial_dec(f_dec))   # [B,1,H,W]
        if self.spatial_gate_override is not None:
            w_sp = self.spatial_gate_override
        f = self.bn(torch.cat([f_enc, f_dec], dim=1))                             # [B,2C,H,W]
        w_ch = None
        if self.channel_attention:
            avg = F.adaptive_avg_pool2d(f, 1)
            mx = F.adaptive_max_pool2d(f, 1)
            if self.channel_form == "mlp":
                z = self.channel_mlp(avg) + self.channel_mlp(mx)
            else:
                z = self.channel_conv(avg + mx)
            w_ch = torch.sigmoid(z)                                               # [B,2C,1,1]
            f = w_ch * f
        f_ch = self.proj(f)                                                       # [B,C,H,W]
        fused = w_sp * f_ch
        if self.record_traces:
            self.last_trace = ADFFTrace(
                w_sp.detach(), f.detach(),
                w_ch.detach() if w_ch is not None else None,
                f_ch.detach(), fused.detach())
        return fused


class ConcatFusion(nn.Module):
    """Plain skip fusion: concatenate and project back to C channels."""

    def __init__(self, channels: int):
        super().__init__()
        self.proj = nn.Conv2d(2 * channels, channels, 1)

    def forward(self, f_enc: torch.Tensor, f_dec: torch.Tensor) -> torch.Tensor:
        if f_enc.shape != f_dec.shape:
            raise ShapeError(f"fusion inputs must match, got {tuple(f_enc.shape)} vs {tuple(f_dec.shape)}")
        return self.proj(torch.cat([f_enc, f_dec], dim=1))


class PatchEmbed(nn.Module):
    """4x4 stride-4 convolution + layer norm: [B,3,H,W] -> [B,dim,H/4,W/4]."""

    def __init__(self, in_channels: int = 3, dim: int = 96):
        super().__init__()
        self.proj = nn.Conv2d(in_channels, dim, 4, stride=4)
        self.norm = LayerNorm2d(dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h, w = x.shape[2], x.shape[3]
        if h % 4 != 0 or w % 4 != 0:
            raise ShapeError(f"input size {h}x{w} must be divisible by 4 for patch embedding")
        return self.norm(self.proj(x))


class PatchMerge(nn.Module):
    """2x2 neighborhood concat + layer norm + 4C->2C projection (halves H, W)."""

    def __init__(self, dim: int):
        super().__init__()
        self.norm = LayerNorm2d(4 * dim)
        self.reduce = nn.Conv2d(4 * dim, 2 * dim, 1, bias=False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h, w = x.shape[2], x.shape[3]
        if h % 2 != 0 or w % 2 != 0:
            raise ShapeError(f"feature size {h}x{w} must be even to merge patches")
        x = torch.cat([x[..., 0::2, 0::2], x[..., 1::2, 0::2],
                       x[..., 0::2, 1::2], x[..., 1::2, 1::2]], dim=1)
        return self.reduce(self.norm(x))


class PatchExpand(nn.Module):
    """C -> factor*C projection + pixel rearrangement + layer norm.

    Output has C/factor channels at factor*H x factor*W. factor=4 is the
    final head expansion restoring full input resolution.
    """

    def __init__(self, dim: int, factor: int = 2):
        super().__init__()
        if factor not in (2, 4):
            raise ConfigError(f"expand factor must be 2 or 4, got {factor}")
        if dim % factor != 0:
            raise ConfigError(f"channels {dim} not divisible by expand factor {factor}")
        self.factor = factor
        self.expand = nn.Conv2d(dim, factor * dim, 1, bias=False)   # == factor^2 * (dim/factor)
        self.norm = LayerNorm2d(dim // factor)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.norm(F.pixel_shuffle(self.expand(x), self.factor))
