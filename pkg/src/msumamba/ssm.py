"""Selective-scan state-space primitives and the visual state-space block.

The scan is the sequential reference recurrence, vectorized over batch and
channels (the four traversal paths of a 2-D map are folded into the batch
axis). A literal per-element numpy recurrence is kept alongside as the
oracle the vectorized path is certified against.
"""

from __future__ import annotations

import math
from typing import Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ShapeError
from .ops import LayerNorm2d


def selective_scan(u: torch.Tensor, delta: torch.Tensor, A: torch.Tensor,
                   B: torch.Tensor, C: torch.Tensor, D: torch.Tensor) -> torch.Tensor:
    """Input-dependent linear recurrence along the last axis.

    u, delta: [B, C, L]; A: [C, N]; B, C: [B, N, L]; D: [C].

        h_t = exp(delta_t * A) . h_{t-1} + (delta_t * B_t) * u_t
        y_t = <C_t, h_t> + D * u_t

    with h_0 = 0. A is discretized by the exponential, B by the Euler
    simplification delta*B.
    """
    if u.shape != delta.shape:
        raise ShapeError(f"u {tuple(u.shape)} and delta {tuple(delta.shape)} must match")
    if torch.any(delta <= 0):
        raise ShapeError("delta must be strictly positive")
    b, c, l = u.shape
    n = A.shape[1]
    if B.shape != (b, n, l) or C.shape != (b, n, l):
        raise ShapeError(f"B/C must be [{b},{n},{l}], got {tuple(B.shape)} and {tuple(C.shape)}")

    dA = torch.exp(delta.unsqueeze(-1) * A.unsqueeze(1))        # [B,C,L,N]
    Bp = B.permute(0, 2, 1)                                     # [B,L,N]
    Cp = C.permute(0, 2, 1)                                     # [B,L,N]
    dBu = (delta * u).unsqueeze(-1) * Bp.unsqueeze(1)           # [B,C,L,N]

    h = u.new_zeros(b, c, n)
    ys = []
    for t in range(l):
        h = dA[:, :, t] * h + dBu[:, :, t]
        ys.append((h * Cp[:, t].unsqueeze(1)).sum(-1))          # [B,C]
    y = torch.stack(ys, dim=-1)                                 # [B,C,L]
    return y + D.unsqueeze(-1) * u


def selective_scan_reference(u, delta, A, B, C, D) -> np.ndarray:
    """Literal per-(batch, channel, step) recurrence in f64 numpy.

    Oracle for selective_scan: same contract, no vectorization, no torch.
    """
    u, delta, A, B, C, D = (np.asarray(t, dtype=np.float64) for t in
                            (u, delta, A, B, C, D))
    bsz, ch, length = u.shape
    n = A.shape[1]
    y = np.zeros_like(u)
    for b in range(bsz):
        for c in range(ch):
            h = np.zeros(n)
            for t in range(length):
                dt = delta[b, c, t]
                h = np.exp(dt * A[c]) * h + dt * B[b, :, t] * u[b, c, t]
                y[b, c, t] = float(np.dot(C[b, :, t], h)) + D[c] * u[b, c, t]
    return y


def cross_scan(x: torch.Tensor) -> torch.Tensor:
    """Unfold [B,C,H,W] into four directional sequences [B,4,C,H*W].

    Path 0: row-major; path 1: column-major; paths 2/3: their reversals.
    """
    b, c, h, w = x.shape
    row = x.reshape(b, c, h * w)
    col = x.transpose(2, 3).reshape(b, c, h * w)
    return torch.stack([row, col, row.flip(-1), col.flip(-1)], dim=1)


def cross_merge(y4: torch.Tensor, h: int, w: int) -> torch.Tensor:
    """Map each path back to spatial positions and sum the four aligned maps."""
    b, k, c, l = y4.shape
    if k != 4:
        raise ShapeError(f"expected 4 scan paths, got {k}")
    if l != h * w:
        raise ShapeError(f"sequence length {l} != {h}*{w}")
    row = y4[:, 0] + y4[:, 2].flip(-1)
    col = y4[:, 1] + y4[:, 3].flip(-1)
    col = col.reshape(b, c, w, h).transpose(2, 3).reshape(b, c, l)
    return (row + col).reshape(b, c, h, w)


class SS2D(nn.Module):
    """Four-direction selective scan over a 2-D feature map.

    One set of state parameters (A_log, D, projections) is shared by all
    four traversal paths; per-position delta/B/C are projected from each
    path's sequence. Ends with a channel layer norm.
    """

    def __init__(self, channels: int, state_dim: int = 16, dt_rank: Optional[int] = None,
                 dt_min: float = 0.001, dt_max: float = 0.1):
        super().__init__()
        self.channels = channels
        self.state_dim = state_dim
        self.dt_rank = dt_rank if dt_rank is not None else math.ceil(channels / 16)
        self.x_proj = nn.Linear(channels, self.dt_rank + 2 * state_dim, bias=False)
        self.dt_proj = nn.Linear(self.dt_rank, channels, bias=True)
        self.dt_proj._keep_init = True  # initialized here, not by the global scheme
        a = torch.arange(1, state_dim + 1, dtype=torch.float32).repeat(channels, 1)
        self.A_log = nn.Parameter(torch.log(a))                 # A = -exp(A_log) < 0
        self.D = nn.Parameter(torch.ones(channels))
        self.out_norm = LayerNorm2d(channels)
        self._dt_range = (dt_min, dt_max)
        self.reset_state_parameters()

    def reset_state_parameters(self) -> None:
        dt_min, dt_max = self._dt_range
        std = self.dt_rank ** -0.5
        nn.init.uniform_(self.dt_proj.weight, -std, std)
        # bias chosen so softplus(bias) lands log-uniformly in [dt_min, dt_max]
        dt = torch.exp(torch.rand(self.channels) * (math.log(dt_max) - math.log(dt_min))
                       + math.log(dt_min))
        with torch.no_grad():
            self.dt_proj.bias.copy_(dt + torch.log(-torch.expm1(-dt)))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, c, h, w = x.shape
        l = h * w
        xs = cross_scan(x)                                      # [B,4,C,L]
        dbl = torch.einsum("bkcl,dc->bkdl", xs, self.x_proj.weight)
        dts, bs, cs = torch.split(dbl, [self.dt_rank, self.state_dim, self.state_dim], dim=2)
        delta = torch.einsum("bkrl,cr->bkcl", dts, self.dt_proj.weight)
        delta = F.softplus(delta + self.dt_proj.bias.view(1, 1, -1, 1))
        y = selective_scan(xs.reshape(b * 4, c, l), delta.reshape(b * 4, c, l),
                           -torch.exp(self.A_log), bs.reshape(b * 4, self.state_dim, l),
                           cs.reshape(b * 4, self.state_dim, l), self.D)
        return self.out_norm(cross_merge(y.view(b, 4, c, l), h, w))


class VSSBlock(nn.Module):
    """Residual gated state-space mixer.

    y = x + out_proj( ss2d(silu(dw_conv(a))) * silu(gate) ) where
    (a, gate) = in_proj(norm(x)) split in half. Zero out_proj makes the
    block an exact identity.
    """

    def __init__(self, channels: int, state_dim: int = 16, expansion: int = 2,
                 dt_rank: Optional[int] = None):
        super().__init__()
        inner = expansion * channels
        self.pre_norm = LayerNorm2d(channels)
        self.in_proj = nn.Conv2d(channels, 2 * inner, 1, bias=False)
        self.dw_conv = nn.Conv2d(inner, inner, 3, padding=1, groups=inner, bias=True)
        self.ss2d = SS2D(inner, state_dim=state_dim, dt_rank=dt_rank)
        self.out_proj = nn.Conv2d(inner, channels, 1, bias=False)

    def forward(self, x: torch.Tensor, rng: Optional[torch.Generator] = None) -> torch.Tensor:
        a, gate = self.in_proj(self.pre_norm(x)).chunk(2, dim=1)
        y = self.ss2d(F.silu(self.dw_conv(a)))
        return x + self.out_proj(y * F.silu(gate))
