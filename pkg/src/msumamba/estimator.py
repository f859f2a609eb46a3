"""Scikit-learn style estimator facade over the segmentation network.

MSUMambaSegmenter(...).fit(X, y) trains on image/mask arrays in memory;
predict(X) returns integer masks. Composes with sklearn tooling through
get_params/set_params (all constructor arguments are plain values).
"""

from __future__ import annotations

import math
from typing import Optional

import numpy as np
import torch
from sklearn.base import BaseEstimator

from .data import CLASS_NAMES
from .errors import ConfigError, DataError
from .losses import LossConfig
from .metrics import ConfusionCounts, compute_metrics, confusion_accumulate
from .network import MCAttnConfig, ModelConfig, build_model
from .train import RunConfig, train_steps
from .data import Sample


def check_image_array(X: np.ndarray | torch.Tensor, in_channels: int = 3) -> torch.Tensor:
    """Validate and convert images to a float [N,C,H,W] tensor in [0, 1].

    Accepts [N,H,W,C] or [N,C,H,W]; uint8 arrays are scaled by 1/255.
    H and W must be divisible by 32.
    """
    if isinstance(X, torch.Tensor):
        arr = X.detach().cpu().numpy()
    else:
        arr = np.asarray(X)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4:
        raise DataError(f"images must be a 4-D array, got shape {arr.shape}")
    if arr.shape[-1] == in_channels and arr.shape[1] != in_channels:
        arr = np.transpose(arr, (0, 3, 1, 2))
    if arr.shape[1] != in_channels:
        raise DataError(f"images must have {in_channels} channels, got shape {arr.shape}")
    if arr.dtype == np.uint8:
        arr = arr.astype(np.float32) / 255.0
    arr = arr.astype(np.float32, copy=False)
    h, w = arr.shape[2], arr.shape[3]
    if h % 32 != 0 or w % 32 != 0:
        raise DataError(f"image size {h}x{w} must be divisible by 32")
    return torch.from_numpy(np.ascontiguousarray(arr))


def check_mask_array(y: np.ndarray | torch.Tensor, num_classes: int,
                     hw: Optional[tuple[int, int]] = None) -> torch.Tensor:
    """Validate and convert masks to an int64 [N,H,W] tensor."""
    if isinstance(y, torch.Tensor):
        arr = y.detach().cpu().numpy()
    else:
        arr = np.asarray(y)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3:
        raise DataError(f"masks must be a 3-D array, got shape {arr.shape}")
    if not np.issubdtype(arr.dtype, np.integer):
        raise DataError(f"masks must be integer labels, got dtype {arr.dtype}")
    if arr.size and (arr.min() < 0 or arr.max() >= num_classes):
        raise DataError(f"mask labels must lie in [0,{num_classes})")
    if hw is not None and arr.shape[1:] != hw:
        raise DataError(f"mask size {arr.shape[1:]} does not match images {hw}")
    return torch.from_numpy(np.ascontiguousarray(arr.astype(np.int64)))


class MSUMambaSegmenter(BaseEstimator):
    """Multi-class image segmenter with a fit/predict interface.

    Defaults are desk-scale (tiny network); pass base_dim=96 and deeper
    stage depths for the full architecture.
    """

    def __init__(self, num_classes: int = 7, base_dim: int = 16,
                 encoder_depths: tuple[int, ...] = (1, 1, 1, 1),
                 decoder_depths: tuple[int, ...] = (1, 1, 1, 1),
                 ssm_state_dim: int = 4, encoder_block: str = "ss_mcat_ssm",
                 fusion: str = "adff", mcattn_pool_sizes: tuple[int, ...] = (1, 2, 3),
                 steps: int = 300, batch_size: int = 4, lr: float = 1e-3,
                 lr_schedule: str = "cosine", focal_weight: float = 1.0,
                 dice_weight: float = 1.0, seed: int = 0, verbose: bool = False):
        self.num_classes = num_classes
        self.base_dim = base_dim
        self.encoder_depths = encoder_depths
        self.decoder_depths = decoder_depths
        self.ssm_state_dim = ssm_state_dim
        self.encoder_block = encoder_block
        self.fusion = fusion
        self.mcattn_pool_sizes = mcattn_pool_sizes
        self.steps = steps
        self.batch_size = batch_size
        self.lr = lr
        self.lr_schedule = lr_schedule
        self.focal_weight = focal_weight
        self.dice_weight = dice_weight
        self.seed = seed
        self.verbose = verbose

    def _model_config(self) -> ModelConfig:
        dims = tuple(self.base_dim * (2 ** i) for i in range(4))
        return ModelConfig(
            num_classes=self.num_classes, base_dim=self.base_dim, stage_dims=dims,
            encoder_depths=tuple(self.encoder_depths),
            decoder_depths=tuple(self.decoder_depths),
            ssm_state_dim=self.ssm_state_dim, encoder_block=self.encoder_block,
            fusion=self.fusion, mcattn=MCAttnConfig(pool_sizes=tuple(self.mcattn_pool_sizes)),
            seed=self.seed)

    def fit(self, X, y) -> "MSUMambaSegmenter":
        images = check_image_array(X)
        masks = check_mask_array(y, self.num_classes, hw=(images.shape[2], images.shape[3]))
        if images.shape[0] != masks.shape[0]:
            raise DataError(f"{images.shape[0]} images but {masks.shape[0]} masks")

        cfg = RunConfig(model=self._model_config(),
                        loss=LossConfig(focal_weight=self.focal_weight,
                                        dice_weight=self.dice_weight),
                        steps=self.steps, batch_size=self.batch_size, lr=self.lr,
                        lr_schedule=self.lr_schedule, seed=self.seed,
                        dataset_root="(in-memory)", output_dir="(in-memory)")
        cfg.augment.enabled = False
        cfg.model.validate()
        cfg.loss.validate()

        samples = [Sample(image=np.clip(images[i].permute(1, 2, 0).numpy() * 255.0,
                                        0, 255).round().astype(np.uint8),
                          mask=masks[i].numpy().astype(np.uint8), id=f"array_{i}")
                   for i in range(images.shape[0])]
        self.model_ = build_model(cfg.model)
        history: list[dict] = []

        def on_step(rec: dict) -> None:
            history.append(rec)
            if self.verbose and rec["step"] % 25 == 0:
                print(f"step {rec['step']}: loss={rec['loss']:.4f}")

        train_steps(self.model_, samples, cfg, on_step=on_step)
        self.history_ = history
        self.classes_ = np.arange(self.num_classes)
        self.n_features_in_ = int(np.prod(images.shape[1:]))
        return self

    def _check_fitted(self) -> None:
        if not hasattr(self, "model_"):
            raise ConfigError("this estimator is not fitted yet; call fit first")

    @torch.no_grad()
    def predict_proba(self, X) -> np.ndarray:
        """Per-pixel class probabilities [N, num_classes, H, W]."""
        self._check_fitted()
        images = check_image_array(X)
        self.model_.eval()
        out = []
        for i in range(0, images.shape[0], max(self.batch_size, 1)):
            logits = self.model_(images[i:i + max(self.batch_size, 1)])
            out.append(torch.softmax(logits, dim=1).numpy())
        return np.concatenate(out, axis=0)

    @torch.no_grad()
    def predict(self, X) -> np.ndarray:
        """Argmax label masks [N, H, W] (int64)."""
        self._check_fitted()
        images = check_image_array(X)
        self.model_.eval()
        out = []
        for i in range(0, images.shape[0], max(self.batch_size, 1)):
            logits = self.model_(images[i:i + max(self.batch_size, 1)])
            out.append(logits.argmax(dim=1).numpy())
        return np.concatenate(out, axis=0)

    def score(self, X, y) -> float:
        """Macro Dice over foreground classes (fraction in [0, 1])."""
        self._check_fitted()
        pred = self.predict(X)
        masks = check_mask_array(y, self.num_classes).numpy()
        counts = ConfusionCounts(self.num_classes)
        confusion_accumulate(pred, masks, counts)
        names = CLASS_NAMES if self.num_classes == len(CLASS_NAMES) else None
        mdc = compute_metrics(counts, names).macro["mDC"]
        return 0.0 if math.isnan(mdc) else float(mdc)
