"""Full encoder/decoder segmentation network and its configuration.

Encoder: patch embed, then four stages of hybrid (or plain state-space)
blocks with patch merging between them. Decoder: four stages of VSS
blocks; the deepest encoder output feeds the decoder directly, each
shallower stage is entered through patch expansion + skip fusion. A final
factor-4 expansion restores full resolution before the 1x1 classifier.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Optional

import torch
import torch.nn as nn

from .blocks import (ADFF, ConcatFusion, MCAttnConfig, PatchEmbed, PatchExpand,
                     PatchMerge, SSMcatBlock)
from .errors import ConfigError, ShapeError
from .ssm import SS2D, VSSBlock

FUSION_KINDS = ("adff", "dff", "none")
ENCODER_BLOCKS = ("ss_mcat_ssm", "med", "vss_only")


@dataclass
class ModelConfig:
    """Architectural hyperparameters, including the ablation toggles.

    encoder_block: "ss_mcat_ssm" = dual-branch with Monte Carlo attention,
    "med" = dual-branch with a plain bottleneck, "vss_only" = baseline
    state-space blocks. fusion: "adff" = spatial+channel attention fusion,
    "dff" = spatial gate only, "none" = plain concat+project.
    """
    in_channels: int = 3
    num_classes: int = 7
    base_dim: int = 96
    stage_dims: tuple[int, ...] = (96, 192, 384, 768)
    encoder_depths: tuple[int, ...] = (3, 3, 3, 3)
    decoder_depths: tuple[int, ...] = (2, 2, 2, 2)
    ssm_state_dim: int = 16
    ssm_expansion: int = 2
    dt_rank: Optional[int] = None          # None = ceil(channels / 16)
    mcattn: MCAttnConfig = field(default_factory=MCAttnConfig)
    mcattn_form: str = "modulated"         # {"modulated", "printed"}
    fusion: str = "adff"
    encoder_block: str = "ss_mcat_ssm"
    conv_branch_depth: int = 1
    mamba_branch_depth: int = 1
    bottleneck_reduction: int = 4
    channel_attention_form: str = "mlp"    # {"mlp", "conv"}
    seed: int = 0

    def __post_init__(self):
        self.stage_dims = tuple(self.stage_dims)
        self.encoder_depths = tuple(self.encoder_depths)
        self.decoder_depths = tuple(self.decoder_depths)
        if isinstance(self.mcattn, dict):
            self.mcattn = MCAttnConfig(**{k: tuple(v) if isinstance(v, list) else v
                                          for k, v in self.mcattn.items()})

    def validate(self) -> None:
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        if len(self.stage_dims) != 4:
            raise ConfigError(f"stage_dims must list 4 stages, got {len(self.stage_dims)}")
        if len(self.encoder_depths) != 4 or len(self.decoder_depths) != 4:
            raise ConfigError("encoder_depths and decoder_depths must both have length 4")
        if self.base_dim != self.stage_dims[0]:
            raise ConfigError(f"base_dim {self.base_dim} != stage_dims[0] {self.stage_dims[0]}")
        for i in range(3):
            if self.stage_dims[i + 1] != 2 * self.stage_dims[i]:
                raise ConfigError(f"stage_dims[{i + 1}] must double stage_dims[{i}], "
                                  f"got {self.stage_dims[i + 1]} vs {self.stage_dims[i]}")
        if self.base_dim % 4 != 0:
            raise ConfigError(f"base_dim must be divisible by 4 (final expansion), got {self.base_dim}")
        if any(d < 1 for d in self.encoder_depths + self.decoder_depths):
            raise ConfigError("stage depths must be >= 1")
        if self.fusion not in FUSION_KINDS:
            raise ConfigError(f"fusion must be one of {FUSION_KINDS}, got {self.fusion!r}")
        if self.encoder_block not in ENCODER_BLOCKS:
            raise ConfigError(f"encoder_block must be one of {ENCODER_BLOCKS}, got {self.encoder_block!r}")
        if self.conv_branch_depth < 1 or self.mamba_branch_depth < 1:
            raise ConfigError("branch depths must be >= 1")
        self.mcattn.validate()

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["stage_dims"] = list(self.stage_dims)
        d["encoder_depths"] = list(self.encoder_depths)
        d["decoder_depths"] = list(self.decoder_depths)
        d["mcattn"] = {"pool_sizes": list(self.mcattn.pool_sizes),
                       "probs": list(self.mcattn.probs) if self.mcattn.probs is not None else None}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        d = dict(d)
        if "mcattn" in d and isinstance(d["mcattn"], dict):
            mc = d["mcattn"]
            unknown_mc = set(mc) - {"pool_sizes", "probs"}
            if unknown_mc:
                raise ConfigError(f"unknown mcattn keys: {sorted(unknown_mc)}")
            d["mcattn"] = MCAttnConfig(
                pool_sizes=tuple(mc.get("pool_sizes", (1, 2, 3))),
                probs=tuple(mc["probs"]) if mc.get("probs") is not None else None)
        for key in ("stage_dims", "encoder_depths", "decoder_depths"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


def tiny_config(**overrides) -> ModelConfig:
    """Small desk-scale configuration (64x64 inputs train comfortably on CPU)."""
    base = dict(base_dim=16, stage_dims=(16, 32, 64, 128),
                encoder_depths=(1, 1, 1, 1), decoder_depths=(1, 1, 1, 1),
                ssm_state_dim=4)
    base.update(overrides)
    return ModelConfig(**base)


class MSUMamba(nn.Module):
    """Hybrid convolutional/state-space U-shaped segmentation network."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        dims = cfg.stage_dims
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(cfg.seed)
            self.patch_embed = PatchEmbed(cfg.in_channels, dims[0])
            self.enc_stages = nn.ModuleList(
                nn.ModuleList(self._encoder_block(dim) for _ in range(depth))
                for dim, depth in zip(dims, cfg.encoder_depths))
            self.merges = nn.ModuleList(PatchMerge(dims[i]) for i in range(3))
            # dec_stages[0] works on the deepest features; [1..3] follow each expansion
            self.dec_stages = nn.ModuleList(
                nn.ModuleList(VSSBlock(dim, state_dim=cfg.ssm_state_dim,
                                       expansion=cfg.ssm_expansion, dt_rank=cfg.dt_rank)
                              for _ in range(depth))
                for dim, depth in zip(dims[::-1], cfg.decoder_depths[::-1]))
            self.expands = nn.ModuleList(PatchExpand(dims[3 - i], factor=2) for i in range(3))
            self.fusions = nn.ModuleList(self._fusion(dims[2 - i]) for i in range(3))
            self.final_expand = PatchExpand(dims[0], factor=4)
            self.head = nn.Conv2d(dims[0] // 4, cfg.num_classes, 1)
            self.apply(_init_weights)

    def _encoder_block(self, dim: int) -> nn.Module:
        cfg = self.cfg
        if cfg.encoder_block == "vss_only":
            return VSSBlock(dim, state_dim=cfg.ssm_state_dim,
                            expansion=cfg.ssm_expansion, dt_rank=cfg.dt_rank)
        mcattn = cfg.mcattn if cfg.encoder_block == "ss_mcat_ssm" else None
        return SSMcatBlock(dim, state_dim=cfg.ssm_state_dim, expansion=cfg.ssm_expansion,
                           mcattn=mcattn, mcattn_form=cfg.mcattn_form,
                           reduction=cfg.bottleneck_reduction,
                           conv_depth=cfg.conv_branch_depth,
                           mamba_depth=cfg.mamba_branch_depth, dt_rank=cfg.dt_rank)

    def _fusion(self, dim: int) -> nn.Module:
        cfg = self.cfg
        if cfg.fusion == "adff":
            return ADFF(dim, channel_attention=True, channel_form=cfg.channel_attention_form)
        if cfg.fusion == "dff":
            return ADFF(dim, channel_attention=False)
        return ConcatFusion(dim)

    def forward(self, x: torch.Tensor, rng: Optional[torch.Generator] = None) -> torch.Tensor:
        if x.ndim != 4 or x.shape[1] != self.cfg.in_channels:
            raise ShapeError(f"expected [B,{self.cfg.in_channels},H,W] input, got {tuple(x.shape)}")
        h, w = x.shape[2], x.shape[3]
        if h % 32 != 0 or w % 32 != 0:
            raise ShapeError(f"input size {h}x{w} must be divisible by 32")
        if self.training and rng is None:
            raise ConfigError("training-mode forward needs an rng for stochastic attention draws")

        x = self.patch_embed(x)
        skips = []
        for i, stage in enumerate(self.enc_stages):
            for blk in stage:
                x = blk(x, rng)
            skips.append(x)
            if i < 3:
                x = self.merges[i](x)

        for blk in self.dec_stages[0]:
            x = blk(x)
        for j in range(3):
            x = self.expands[j](x)
            x = self.fusions[j](skips[2 - j], x)
            for blk in self.dec_stages[j + 1]:
                x = blk(x)

        return self.head(self.final_expand(x))


def _init_weights(m: nn.Module) -> None:
    if getattr(m, "_keep_init", False):
        return
    if isinstance(m, (nn.Conv2d, nn.Linear)):
        nn.init.trunc_normal_(m.weight, std=0.02)
        if m.bias is not None:
            nn.init.zeros_(m.bias)
    elif isinstance(m, (nn.LayerNorm, nn.BatchNorm2d)):
        nn.init.ones_(m.weight)
        nn.init.zeros_(m.bias)


def build_model(cfg: ModelConfig) -> MSUMamba:
    """Build a model with deterministic, seed-controlled initialization."""
    return MSUMamba(cfg)


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def parameter_breakdown(model: nn.Module) -> dict[str, int]:
    """Parameter count per top-level child; values sum to count_parameters."""
    out: dict[str, int] = {}
    for name, child in model.named_children():
        n = sum(p.numel() for p in child.parameters())
        if n:
            out[name] = n
    direct = sum(p.numel() for p in model.parameters(recurse=False))
    if direct:
        out["(direct)"] = direct
    return out
