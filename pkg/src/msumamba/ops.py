"""Differentiable array operations used throughout the network.

Feature maps are channel-first float tensors [B, C, H, W]. All operations
run on CPU tensors in f32 for training; gradient certification re-runs
them in f64 (see gradcheck). Analytic gradients come from reverse-mode
autodiff and are certified against central finite differences.
"""

from __future__ import annotations

from typing import Optional, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, ShapeError


def conv2d(x: torch.Tensor, weight: torch.Tensor, bias: Optional[torch.Tensor] = None,
           stride: int = 1, padding: int = 0, groups: int = 1) -> torch.Tensor:
    """2-D convolution, x [B,C_in,H,W] with weight [C_out,C_in/groups,kH,kW]."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and weight, got {x.ndim}-D and {weight.ndim}-D")
    c_in = x.shape[1]
    if groups < 1 or c_in % groups != 0:
        raise ConfigError(f"groups={groups} does not divide C_in={c_in}")
    if weight.shape[1] * groups != c_in:
        raise ShapeError(f"weight expects C_in={weight.shape[1] * groups}, input has {c_in}")
    kh, kw = weight.shape[2], weight.shape[3]
    if kh > x.shape[2] + 2 * padding or kw > x.shape[3] + 2 * padding:
        raise ShapeError(f"kernel {kh}x{kw} exceeds padded input {x.shape[2] + 2 * padding}x{x.shape[3] + 2 * padding}")
    return F.conv2d(x, weight, bias, stride=stride, padding=padding, groups=groups)


def pool(x: torch.Tensor, kind: str, out_hw: tuple[int, int]) -> torch.Tensor:
    """Adaptive avg/max pooling to out_hw; (1, 1) is global pooling."""
    out_h, out_w = out_hw
    if out_h > x.shape[2] or out_w > x.shape[3]:
        raise ShapeError(f"pool output {out_h}x{out_w} exceeds input {x.shape[2]}x{x.shape[3]}")
    if kind == "avg":
        return F.adaptive_avg_pool2d(x, (out_h, out_w))
    if kind == "max":
        return F.adaptive_max_pool2d(x, (out_h, out_w))
    raise ConfigError(f"unknown pool kind {kind!r}")


def normalize(x: torch.Tensor, kind: str, weight: Optional[torch.Tensor] = None,
              bias: Optional[torch.Tensor] = None, *, eps: Optional[float] = None,
              mode: str = "train", running_mean: Optional[torch.Tensor] = None,
              running_var: Optional[torch.Tensor] = None, momentum: float = 0.1) -> torch.Tensor:
    """Batch norm (channel axis 1, running stats in train mode) or layer norm.

    Layer norm normalizes over the trailing axes given by weight's shape
    (last axis when weight is None) and keeps no running state.
    """
    if kind == "batch":
        if mode == "eval" and (running_mean is None or running_var is None):
            raise ConfigError("batch norm in eval mode needs running statistics")
        return F.batch_norm(x, running_mean, running_var, weight, bias,
                            training=(mode == "train"), momentum=momentum,
                            eps=1e-5 if eps is None else eps)
    if kind == "layer":
        shape = tuple(weight.shape) if weight is not None else (x.shape[-1],)
        return F.layer_norm(x, shape, weight, bias, 1e-6 if eps is None else eps)
    raise ConfigError(f"unknown normalization kind {kind!r}")


_ACTIVATIONS = {"sigmoid": torch.sigmoid, "silu": F.silu, "relu": F.relu}


def activation(x: torch.Tensor, kind: str) -> torch.Tensor:
    try:
        return _ACTIVATIONS[kind](x)
    except KeyError:
        raise ConfigError(f"unknown activation {kind!r}") from None


def softmax(x: torch.Tensor, axis: int) -> torch.Tensor:
    return torch.softmax(x, dim=axis)


def linear(x: torch.Tensor, weight: torch.Tensor, bias: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Affine map along the last axis; leading axes broadcast."""
    if x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"last axis is {x.shape[-1]}, weight expects {weight.shape[1]}")
    return F.linear(x, weight, bias)


def channel_shuffle(x: torch.Tensor, groups: int) -> torch.Tensor:
    """Group-transpose permutation: channel g*(C/groups)+k moves to k*groups+g."""
    b, c, h, w = x.shape
    if c % groups != 0:
        raise ConfigError(f"groups={groups} does not divide C={c}")
    return x.view(b, groups, c // groups, h, w).transpose(1, 2).reshape(b, c, h, w)


def channel_split(x: torch.Tensor, k: int) -> tuple[torch.Tensor, torch.Tensor]:
    c = x.shape[1]
    if not 0 < k < c:
        raise ShapeError(f"split point {k} outside (0, {c})")
    return x[:, :k], x[:, k:]


def channel_concat(tensors: Sequence[torch.Tensor]) -> torch.Tensor:
    if len(tensors) == 0:
        raise ShapeError("channel_concat needs at least one tensor")
    first = tensors[0]
    for t in tensors[1:]:
        if t.shape[0] != first.shape[0] or t.shape[2:] != first.shape[2:]:
            raise ShapeError(f"cannot concat {tuple(t.shape)} with {tuple(first.shape)} along channels")
    return torch.cat(list(tensors), dim=1)


def bilinear_resize(x: torch.Tensor, out_hw: tuple[int, int]) -> torch.Tensor:
    """Bilinear resampling, align-corners=false convention."""
    out_h, out_w = out_hw
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"resize target {out_h}x{out_w} must be at least 1x1")
    return F.interpolate(x, size=(out_h, out_w), mode="bilinear", align_corners=False)


def gradients(scalar_loss: torch.Tensor, params: Sequence[torch.Tensor]) -> list[torch.Tensor]:
    """d(loss)/d(param) for each param; zeros for params the loss does not reach."""
    params = list(params)
    if scalar_loss.numel() != 1:
        raise ShapeError(f"loss must be a scalar, got shape {tuple(scalar_loss.shape)}")
    tracked = [p for p in params if p.requires_grad]
    by_id: dict[int, torch.Tensor] = {}
    if tracked and scalar_loss.requires_grad:
        grads = torch.autograd.grad(scalar_loss, tracked, allow_unused=True, retain_graph=True)
        by_id = {id(p): g for p, g in zip(tracked, grads) if g is not None}
    return [by_id.get(id(p), torch.zeros_like(p)) for p in params]


class LayerNorm2d(nn.LayerNorm):
    """Layer norm over the channel axis of a [B, C, H, W] map."""

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x.permute(0, 2, 3, 1)
        x = F.layer_norm(x, self.normalized_shape, self.weight, self.bias, self.eps)
        return x.permute(0, 3, 1, 2)
