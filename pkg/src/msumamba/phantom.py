"""Seeded synthetic abdominal-ultrasound phantom generator.

Each phantom is an elliptical cross-section: a bright boundary ring (AW)
around tissue, a skin-line arc outside it (SL), and interior structures
(LV, ST, SP, UV&PV) placed inside the ring. The image gets multiplicative
speckle and blur; the mask is the exact render geometry. Everything is a
pure function of (seed, spec).
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from scipy import ndimage

from .data import CLASS_NAMES, Sample, save_sample, write_classmap
from .errors import ConfigError, DataError

CLASS_INDEX = {name: i for i, name in enumerate(CLASS_NAMES)}
INTERIOR = ("LV", "ST", "SP", "UV&PV")  # painted in this order, SP/UV above blobs

# Presence targets follow the per-structure frequency ratios of the class
# distribution table (each count over the largest structure's count, 888).
DEFAULT_PRESENCE = {
    "SP": 621 / 888, "SL": 503 / 888, "AW": 1.0,
    "LV": 547 / 888, "ST": 487 / 888, "UV&PV": 548 / 888,
}

# Echo intensity per region: fluid-filled structures dark, bone bright.
DEFAULT_INTENSITY = {
    "background": 0.10, "tissue": 0.35, "AW": 0.72, "SL": 0.90,
    "LV": 0.50, "ST": 0.16, "SP": 0.95, "UV&PV": 0.22,
}

# Geometry priors: size = major semi-axis as a fraction of the interior
# semi-minor axis; radial = center offset in normalized interior coords;
# angle = (center, halfwidth) in image frame (+y down, posterior = +pi/2).
DEFAULT_GEOMETRY = {
    "LV":    {"size": (0.40, 0.58), "ecc": (0.60, 0.90), "radial": (0.00, 0.45), "angle": None},
    "ST":    {"size": (0.22, 0.32), "ecc": (0.60, 0.90), "radial": (0.00, 0.60), "angle": None},
    "SP":    {"size": (0.12, 0.18), "ecc": (0.70, 1.00), "radial": (0.60, 0.80),
              "angle": (math.pi / 2, 0.6)},
    "UV&PV": {"size": (0.28, 0.40), "ecc": (0.25, 0.40), "radial": (0.00, 0.55), "angle": None},
}


@dataclass
class PhantomSpec:
    canvas: tuple[int, int] = (256, 256)
    presence: dict = field(default_factory=lambda: dict(DEFAULT_PRESENCE))
    abdomen_radius: tuple[float, float] = (0.60, 0.80)   # fraction of half min(canvas)
    eccentricity: tuple[float, float] = (0.70, 0.95)
    ring_thickness: tuple[float, float] = (0.07, 0.11)   # fraction of outer semi-minor
    skin_thickness: tuple[float, float] = (0.06, 0.10)
    geometry: dict = field(default_factory=lambda: {k: dict(v) for k, v in DEFAULT_GEOMETRY.items()})
    intensity: dict = field(default_factory=lambda: dict(DEFAULT_INTENSITY))
    speckle_sigma: float = 0.22
    blur_sigma: float = 1.0
    max_retries: int = 50

    def validate(self) -> None:
        h, w = self.canvas
        if min(h, w) < 32:
            raise ConfigError(f"canvas {self.canvas} too small, need at least 32x32")
        if set(self.presence) != set(CLASS_NAMES[1:]):
            raise ConfigError(f"presence must cover exactly {CLASS_NAMES[1:]}")
        for name, p in self.presence.items():
            if not 0.0 <= p <= 1.0:
                raise ConfigError(f"presence[{name!r}] must be a probability, got {p}")
        if self.speckle_sigma < 0 or self.blur_sigma < 0:
            raise ConfigError("noise parameters must be nonnegative")

    def to_dict(self) -> dict:
        return {"canvas": list(self.canvas), "presence": dict(self.presence),
                "abdomen_radius": list(self.abdomen_radius),
                "eccentricity": list(self.eccentricity),
                "ring_thickness": list(self.ring_thickness),
                "skin_thickness": list(self.skin_thickness),
                "geometry": {k: {kk: (list(vv) if isinstance(vv, (tuple, list)) else vv)
                                 for kk, vv in v.items()} for k, v in self.geometry.items()},
                "intensity": dict(self.intensity),
                "speckle_sigma": self.speckle_sigma, "blur_sigma": self.blur_sigma,
                "max_retries": self.max_retries}

    def content_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def _ellipse(xx: np.ndarray, yy: np.ndarray, cx: float, cy: float,
             a: float, b: float, theta: float) -> np.ndarray:
    """Boolean mask of the rotated ellipse (a, b semi-axes, theta in radians)."""
    dx, dy = xx - cx, yy - cy
    c, s = math.cos(theta), math.sin(theta)
    u = (c * dx + s * dy) / a
    v = (-s * dx + c * dy) / b
    return u * u + v * v <= 1.0


def generate_phantom(seed: int, spec: Optional[PhantomSpec] = None) -> Sample:
    """Render one phantom; bit-identical for identical (seed, spec)."""
    spec = spec if spec is not None else PhantomSpec()
    spec.validate()
    rng = np.random.default_rng(seed)
    h, w = spec.canvas
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)

    present = {name: bool(rng.random() < spec.presence[name]) for name in CLASS_NAMES[1:]}
    if any(present[n] for n in INTERIOR):
        present["AW"] = True  # the wall must enclose whatever sits inside it

    # Abdomen geometry; everything (incl. skin arc) must stay on canvas.
    half = 0.5 * min(h, w)
    a_out = half * rng.uniform(*spec.abdomen_radius)
    b_out = a_out * rng.uniform(*spec.eccentricity)
    theta = rng.uniform(0.0, math.pi)
    skin = rng.uniform(*spec.skin_thickness)
    extent = a_out * (1.0 + skin) + 2.0
    cx = w / 2 + rng.uniform(-1.0, 1.0) * max(w / 2 - extent, 0.0) * 0.5
    cy = h / 2 + rng.uniform(-1.0, 1.0) * max(h / 2 - extent, 0.0) * 0.5

    ring_frac = rng.uniform(*spec.ring_thickness)
    inner_scale = 1.0 - max(ring_frac, 2.5 / b_out)  # keep the ring >= ~2.5 px thick
    if inner_scale <= 0.3:
        raise DataError(f"canvas {spec.canvas} too small for a closed boundary ring")

    outer = _ellipse(xx, yy, cx, cy, a_out, b_out, theta)
    inner = _ellipse(xx, yy, cx, cy, a_out * inner_scale, b_out * inner_scale, theta)
    ring = outer & ~inner

    image = np.full((h, w), spec.intensity["background"], dtype=np.float64)
    mask = np.zeros((h, w), dtype=np.uint8)
    image[inner] = spec.intensity["tissue"]
    if present["AW"]:
        image[ring] = spec.intensity["AW"]
        mask[ring] = CLASS_INDEX["AW"]

    if present["SL"]:
        band = _ellipse(xx, yy, cx, cy, a_out * (1 + skin), b_out * (1 + skin), theta) & ~outer
        phi0 = -math.pi / 2 + rng.uniform(-0.4, 0.4)       # anterior side, up in image coords
        halfwidth = rng.uniform(0.5, 1.0)
        phi = np.arctan2(yy - cy, xx - cx)
        ang = np.abs(np.angle(np.exp(1j * (phi - phi0))))
        arc = band & (ang <= halfwidth)
        image[arc] = spec.intensity["SL"]
        mask[arc] = CLASS_INDEX["SL"]

    a_in, b_in = a_out * inner_scale, b_out * inner_scale
    placed: list[np.ndarray] = []
    for name in INTERIOR:
        if not present[name]:
            continue
        prior = spec.geometry[name]
        chosen = None
        for _ in range(spec.max_retries):
            size = b_in * rng.uniform(*prior["size"])
            ecc = rng.uniform(*prior["ecc"])
            rho = rng.uniform(*prior["radial"])
            if prior["angle"] is None:
                phi = rng.uniform(0.0, 2 * math.pi)
            else:
                center, width = prior["angle"]
                phi = center + rng.uniform(-width, width)
            # center in the interior frame, rotated out to image coords
            ux, uy = rho * math.cos(phi), rho * math.sin(phi)
            c, s = math.cos(theta), math.sin(theta)
            scx = cx + c * (ux * a_in) - s * (uy * b_in)
            scy = cy + s * (ux * a_in) + c * (uy * b_in)
            size = max(size, 1.5)
            m = _ellipse(xx, yy, scx, scy, size, max(size * ecc, 1.2),
                         rng.uniform(0.0, math.pi))
            if not m.any() or (m & ~inner).any():
                continue  # must sit strictly inside the boundary ring
            if not any((m & p).any() for p in placed):
                chosen = m
                break
            if chosen is None:
                chosen = m  # fall back to an overlapping but contained placement
        if chosen is None:
            raise DataError(f"could not place {name} inside the phantom "
                            f"(seed {seed}, canvas {spec.canvas})")
        image[chosen] = spec.intensity[name]
        mask[chosen] = CLASS_INDEX[name]
        placed.append(chosen)

    if spec.speckle_sigma > 0:
        image = image * (1.0 + spec.speckle_sigma * rng.standard_normal((h, w)))
    if spec.blur_sigma > 0:
        image = ndimage.gaussian_filter(image, spec.blur_sigma)
    image = np.clip(image, 0.0, 1.0)
    rgb = np.repeat((image * 255.0).round().astype(np.uint8)[..., None], 3, axis=2)

    meta = {"seed": int(seed), "gestational_week": int(rng.integers(14, 29)),
            "present": {k: v for k, v in present.items()}}
    return Sample(image=rgb, mask=mask, id=f"phantom_{seed:06d}", meta=meta)


def check_ring_containment(mask: np.ndarray) -> bool:
    """True when class-3 pixels form one connected ring enclosing classes 1/4/5/6."""
    ring = mask == CLASS_INDEX["AW"]
    interior = np.isin(mask, [CLASS_INDEX[n] for n in INTERIOR])
    if not interior.any():
        return True
    if not ring.any():
        return False
    _, n_ring = ndimage.label(ring, structure=np.ones((3, 3), dtype=bool))
    if n_ring != 1:
        return False
    # flood the complement from the border (4-connectivity); enclosed pixels
    # must not be reachable from outside
    free_labels, _ = ndimage.label(~ring)
    border = np.zeros_like(ring, dtype=bool)
    border[0, :] = border[-1, :] = border[:, 0] = border[:, -1] = True
    outside = np.unique(free_labels[border & ~ring])
    return not np.isin(free_labels[interior], outside).any()


def synthesize_dataset(out_dir: str | Path, count: int, seed: int,
                       spec: Optional[PhantomSpec] = None) -> list[Sample]:
    """Write `count` phantoms plus classmap.json and manifest.json."""
    spec = spec if spec is not None else PhantomSpec()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    samples = []
    seeds = [seed + i for i in range(count)]
    for s in seeds:
        sample = generate_phantom(s, spec)
        save_sample(sample, out_dir)
        samples.append(sample)
    write_classmap(out_dir)
    manifest = {"count": count, "base_seed": seed, "seeds": seeds,
                "canvas": list(spec.canvas), "spec_hash": spec.content_hash(),
                "spec": spec.to_dict()}
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return samples
