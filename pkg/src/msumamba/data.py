"""Dataset handling: on-disk format, class taxonomy, augmentation, splits.

Directory layout: root/images/*.png (8-bit RGB), root/masks/*.png (8-bit
palette-indexed, values = class indices), matched basenames, plus
root/classmap.json and, for generated data, root/manifest.json.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image, ImageEnhance

from .errors import ConfigError, DataError

CLASS_NAMES = ("background", "SP", "SL", "AW", "LV", "ST", "UV&PV")
NUM_CLASSES = len(CLASS_NAMES)

# Overlay palette keyed by class index (background is never painted):
# SP red, SL yellow, AW yellow-green, LV chartreuse, ST azure, UV&PV cyan.
OVERLAY_COLORS = {
    1: (255, 0, 0),
    2: (255, 255, 0),
    3: (154, 205, 50),
    4: (127, 255, 0),
    5: (0, 127, 255),
    6: (0, 255, 255),
}


@dataclass
class Sample:
    image: np.ndarray               # uint8 [H,W,3]
    mask: np.ndarray                # uint8 [H,W], values < NUM_CLASSES
    id: str
    meta: dict = field(default_factory=dict)


@dataclass
class AugmentConfig:
    hflip_prob: float = 0.5
    scale_range: tuple[float, float] = (0.75, 1.25)
    pad_value: int = 128
    color_jitter: tuple[float, float, float] = (0.2, 0.2, 0.2)  # brightness/contrast/saturation
    enabled: bool = True

    def validate(self) -> None:
        if not 0.0 <= self.hflip_prob <= 1.0:
            raise ConfigError(f"hflip_prob must be in [0,1], got {self.hflip_prob}")
        lo, hi = self.scale_range
        if lo <= 0 or hi < lo:
            raise ConfigError(f"scale_range must be positive and ordered, got {self.scale_range}")
        if not 0 <= self.pad_value <= 255:
            raise ConfigError(f"pad_value must be a gray level, got {self.pad_value}")
        if any(j < 0 for j in self.color_jitter):
            raise ConfigError("color_jitter ranges must be nonnegative")

    def to_dict(self) -> dict:
        return {"hflip_prob": self.hflip_prob, "scale_range": list(self.scale_range),
                "pad_value": self.pad_value, "color_jitter": list(self.color_jitter),
                "enabled": self.enabled}

    @classmethod
    def from_dict(cls, d: dict) -> "AugmentConfig":
        known = {"hflip_prob", "scale_range", "pad_value", "color_jitter", "enabled"}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown augment config keys: {sorted(unknown)}")
        d = dict(d)
        if "scale_range" in d:
            d["scale_range"] = tuple(d["scale_range"])
        if "color_jitter" in d:
            d["color_jitter"] = tuple(d["color_jitter"])
        return cls(**d)


def _validate_sample(image: np.ndarray, mask: np.ndarray, origin: str) -> None:
    if image.ndim != 3 or image.shape[2] != 3:
        raise DataError(f"{origin}: image must be HxWx3, got {image.shape}")
    if mask.shape != image.shape[:2]:
        raise DataError(f"{origin}: mask size {mask.shape} does not match image "
                        f"{image.shape[:2]}")
    bad = mask >= NUM_CLASSES
    if bad.any():
        raise DataError(f"{origin}: mask contains label {int(mask[bad][0])} outside "
                        f"[0,{NUM_CLASSES})")


def load_sample(image_path: Path, mask_path: Path) -> Sample:
    image = np.asarray(Image.open(image_path).convert("RGB"))
    mask = np.asarray(Image.open(mask_path))
    if mask.ndim == 3:
        raise DataError(f"{mask_path}: mask must be single-channel palette-indexed")
    _validate_sample(image, mask, str(mask_path))
    return Sample(image=image, mask=mask.astype(np.uint8), id=image_path.stem)


def load_dataset(root: str | Path) -> list[Sample]:
    """Load image/mask pairs matched by basename, in lexicographic order."""
    root = Path(root)
    img_dir, mask_dir = root / "images", root / "masks"
    if not img_dir.is_dir() or not mask_dir.is_dir():
        raise DataError(f"{root} must contain images/ and masks/ directories")
    images = {p.stem: p for p in sorted(img_dir.glob("*.png"))}
    masks = {p.stem: p for p in sorted(mask_dir.glob("*.png"))}
    for stem in sorted(set(images) - set(masks)):
        raise DataError(f"{images[stem]}: image has no matching mask")
    for stem in sorted(set(masks) - set(images)):
        raise DataError(f"{masks[stem]}: mask has no matching image")
    classmap_path = root / "classmap.json"
    if classmap_path.exists():
        classmap = json.loads(classmap_path.read_text())
        expected = {str(i): n for i, n in enumerate(CLASS_NAMES)}
        if classmap != expected:
            raise DataError(f"{classmap_path}: class map does not match the expected taxonomy")
    return [load_sample(images[stem], masks[stem]) for stem in sorted(images)]


def _mask_to_png(mask: np.ndarray) -> Image.Image:
    img = Image.fromarray(mask.astype(np.uint8), mode="P")
    palette = [0] * 768
    for idx, color in OVERLAY_COLORS.items():
        palette[3 * idx:3 * idx + 3] = color
    img.putpalette(palette)
    return img


def save_sample(sample: Sample, root: str | Path) -> None:
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    Image.fromarray(sample.image).save(root / "images" / f"{sample.id}.png")
    _mask_to_png(sample.mask).save(root / "masks" / f"{sample.id}.png")


def write_classmap(root: str | Path) -> None:
    path = Path(root) / "classmap.json"
    path.write_text(json.dumps({str(i): n for i, n in enumerate(CLASS_NAMES)}, indent=2))


def augment(sample: Sample, cfg: AugmentConfig, rng: np.random.Generator) -> Sample:
    """Jointly flip/scale image and mask; jitter colors on the image only.

    Shrinking pads with cfg.pad_value (image) and background 0 (mask);
    growing center-crops. The mask is resampled nearest-neighbor. Output
    size equals input size. The drawn parameters are recorded in
    meta["augment"].
    """
    cfg.validate()
    if not cfg.enabled:
        return Sample(sample.image.copy(), sample.mask.copy(), sample.id, dict(sample.meta))
    h, w = sample.mask.shape
    flip = bool(rng.random() < cfg.hflip_prob)
    scale = float(rng.uniform(*cfg.scale_range))
    jitter = tuple(float(rng.uniform(1.0 - j, 1.0 + j)) if j > 0 else 1.0
                   for j in cfg.color_jitter)

    image, mask = sample.image, sample.mask
    if flip:
        image = image[:, ::-1]
        mask = mask[:, ::-1]
    image, mask = apply_scale(image, mask, scale, cfg.pad_value)

    img = Image.fromarray(image)
    for enhancer, factor in zip((ImageEnhance.Brightness, ImageEnhance.Contrast,
                                 ImageEnhance.Color), jitter):
        if factor != 1.0:
            img = enhancer(img).enhance(factor)
    meta = dict(sample.meta)
    meta["augment"] = {"flip": flip, "scale": scale, "jitter": list(jitter)}
    out = Sample(np.asarray(img), mask, sample.id, meta)
    _validate_sample(out.image, out.mask, f"augment({sample.id})")
    return out


def apply_scale(image: np.ndarray, mask: np.ndarray, scale: float,
                pad_value: int) -> tuple[np.ndarray, np.ndarray]:
    """Resample to scale, then pad (shrink) or center-crop (grow) back."""
    h, w = mask.shape
    if scale == 1.0:
        return np.ascontiguousarray(image), np.ascontiguousarray(mask)
    nh, nw = max(1, round(h * scale)), max(1, round(w * scale))
    img = Image.fromarray(np.ascontiguousarray(image)).resize((nw, nh), Image.BILINEAR)
    msk = Image.fromarray(np.ascontiguousarray(mask)).resize((nw, nh), Image.NEAREST)
    img_arr, msk_arr = np.asarray(img), np.asarray(msk)
    if nh <= h and nw <= w:
        out_img = np.full((h, w, 3), pad_value, dtype=np.uint8)
        out_msk = np.zeros((h, w), dtype=np.uint8)
        top, left = (h - nh) // 2, (w - nw) // 2
        out_img[top:top + nh, left:left + nw] = img_arr
        out_msk[top:top + nh, left:left + nw] = msk_arr
        return out_img, out_msk
    top, left = (nh - h) // 2, (nw - w) // 2
    return (np.ascontiguousarray(img_arr[top:top + h, left:left + w]),
            np.ascontiguousarray(msk_arr[top:top + h, left:left + w]))


def split_dataset(samples: list, ratios: tuple[float, float, float],
                  seed: int) -> tuple[list, list, list]:
    """Seeded shuffle + contiguous cut; floor sizes, remainder to train."""
    if any(r < 0 for r in ratios):
        raise ConfigError(f"split ratios must be nonnegative, got {ratios}")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigError(f"split ratios must sum to 1, got {sum(ratios)}")
    n = len(samples)
    sizes = [int(n * r) for r in ratios]
    sizes[0] += n - sum(sizes)
    for size, ratio in zip(sizes, ratios):
        if ratio > 0 and size == 0 and n > 0:
            raise ConfigError(f"{n} samples cannot fill a split with ratios {ratios}")
    order = np.random.Generator(np.random.PCG64(seed)).permutation(n)
    shuffled = [samples[i] for i in order]
    train = shuffled[:sizes[0]]
    val = shuffled[sizes[0]:sizes[0] + sizes[1]]
    test = shuffled[sizes[0] + sizes[1]:]
    return train, val, test
