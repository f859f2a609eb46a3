"""Training objective: focal + soft-Dice compound loss."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .errors import ConfigError, DataError, ShapeError

PROB_EPS = 1e-7


@dataclass
class LossConfig:
    alpha: float = 0.25            # focal class balance
    gamma: float = 2.0             # focal hard-example exponent
    focal_weight: float = 1.0
    dice_weight: float = 1.0
    dice_smooth: float = 1e-5
    focal_form: str = "standard"   # {"standard", "printed"}

    def validate(self) -> None:
        if not 0.0 < self.alpha < 1.0:
            raise ConfigError(f"focal alpha must be in (0,1), got {self.alpha}")
        if self.gamma < 0:
            raise ConfigError(f"focal gamma must be >= 0, got {self.gamma}")
        if self.focal_weight < 0 or self.dice_weight < 0:
            raise ConfigError("loss weights must be nonnegative")
        if self.focal_weight + self.dice_weight <= 0:
            raise ConfigError("focal_weight + dice_weight must be positive")
        if self.dice_smooth <= 0:
            raise ConfigError(f"dice_smooth must be positive, got {self.dice_smooth}")
        if self.focal_form not in ("standard", "printed"):
            raise ConfigError(f"unknown focal_form {self.focal_form!r}")

    def to_dict(self) -> dict:
        import dataclasses
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "LossConfig":
        import dataclasses
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown loss config keys: {sorted(unknown)}")
        return cls(**d)


def _check_probs(probs: torch.Tensor) -> torch.Tensor:
    if probs.min() < -1e-6 or probs.max() > 1.0 + 1e-6:
        raise ShapeError("probabilities must lie in [0, 1] before clamping")
    return probs.clamp(PROB_EPS, 1.0 - PROB_EPS)


def focal_loss(probs: torch.Tensor, target_onehot: torch.Tensor, cfg: LossConfig) -> torch.Tensor:
    """Mean per-(pixel, class) focal term.

    standard: -a*(1-p)^g * y*log p - (1-a)*p^g * (1-y)*log(1-p)
    printed:  the negative term uses p^y instead of p^g (constant 1 at y=0).
    """
    p = _check_probs(probs)
    y = target_onehot
    pos = -cfg.alpha * (1.0 - p).pow(cfg.gamma) * y * torch.log(p)
    if cfg.focal_form == "standard":
        neg = -(1.0 - cfg.alpha) * p.pow(cfg.gamma) * (1.0 - y) * torch.log(1.0 - p)
    else:
        neg = -(1.0 - cfg.alpha) * p.pow(y) * (1.0 - y) * torch.log(1.0 - p)
    return (pos + neg).mean()


def dice_loss(probs: torch.Tensor, target_onehot: torch.Tensor, cfg: LossConfig) -> torch.Tensor:
    """Soft Dice, averaged over foreground classes then batch.

    Per class: 1 - (2*sum(p*y) + s) / (sum(p) + sum(y) + s). Class 0 is
    treated as background and skipped when more than one class is present.
    """
    p = _check_probs(probs)
    y = target_onehot
    b, k = p.shape[0], p.shape[1]
    start = 1 if k > 1 else 0
    p = p[:, start:].reshape(b, k - start, -1)
    y = y[:, start:].reshape(b, k - start, -1)
    s = cfg.dice_smooth
    inter = (p * y).sum(-1)
    denom = p.sum(-1) + y.sum(-1)
    dice = (2.0 * inter + s) / (denom + s)
    return (1.0 - dice).mean()


def combined_loss(logits: torch.Tensor, target_indices: torch.Tensor,
                  cfg: LossConfig) -> tuple[torch.Tensor, dict[str, float]]:
    """Softmax -> one-hot -> weighted focal + dice. Returns (total, components)."""
    cfg.validate()
    if logits.ndim != 4:
        raise ShapeError(f"logits must be [B,K,H,W], got {tuple(logits.shape)}")
    k = logits.shape[1]
    if target_indices.shape != (logits.shape[0], logits.shape[2], logits.shape[3]):
        raise ShapeError(f"targets {tuple(target_indices.shape)} do not match logits "
                         f"{tuple(logits.shape)}")
    bad = (target_indices < 0) | (target_indices >= k)
    if bad.any():
        b, h, w = (int(v) for v in bad.nonzero()[0])
        raise DataError(f"label {int(target_indices[b, h, w])} out of range [0,{k}) "
                        f"at batch {b}, pixel ({h},{w})")
    probs = torch.softmax(logits, dim=1)
    onehot = F.one_hot(target_indices.long(), num_classes=k).permute(0, 3, 1, 2).to(probs.dtype)
    focal = focal_loss(probs, onehot, cfg)
    dice = dice_loss(probs, onehot, cfg)
    total = cfg.focal_weight * focal + cfg.dice_weight * dice
    return total, {"focal": float(focal.detach()), "dice": float(dice.detach())}
