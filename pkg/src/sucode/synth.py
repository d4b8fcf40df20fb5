"""Synthetic paired-data generator and the mask ablation transforms.

Clean scenes are procedural: a water-body background (class 0) plus filled
textured shapes, one semantic class each.  Degradation follows the simplified
attenuation + homogeneous backscatter form

    I_ch = J_ch * exp(-beta_ch * d) + B_ch * (1 - exp(-beta_ch * d))

with a per-pixel depth field d (vertical gradient, foreground objects pulled
closer to the camera), followed by optional Gaussian blur and additive noise.
All outputs are deterministic functions of their seeds.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import ndimage

from .data import save_image, save_mask
from .errors import DatasetWriteError, RemapInvalid

# Table-style merge schemes for the 8-class convention (see data.py):
# 6 books: reefs/invertebrates + fish/vertebrates merge, divers + robots merge.
MERGE_8_TO_6 = {0: 0, 1: 1, 4: 1, 2: 2, 3: 3, 5: 4, 6: 4, 7: 5}
# 4 books: additionally merge plants, wrecks and sea-floor/rocks.
MERGE_8_TO_4 = {0: 0, 1: 1, 4: 1, 5: 2, 6: 2, 2: 3, 3: 3, 7: 3}


@dataclass
class ClassStyle:
    name: str
    color: tuple[float, float, float]
    texture: str  # flat | stripes | speckle | rings


_STYLES = [
    ClassStyle("water", (0.16, 0.42, 0.58), "flat"),
    ClassStyle("diver", (0.85, 0.62, 0.40), "stripes"),
    ClassStyle("plant", (0.18, 0.70, 0.25), "speckle"),
    ClassStyle("wreck", (0.48, 0.36, 0.24), "stripes"),
    ClassStyle("robot", (0.80, 0.78, 0.20), "flat"),
    ClassStyle("reef", (0.85, 0.30, 0.55), "rings"),
    ClassStyle("fish", (0.90, 0.55, 0.15), "stripes"),
    ClassStyle("seafloor", (0.62, 0.58, 0.42), "speckle"),
]


def default_palette(class_count: int) -> list[ClassStyle]:
    if class_count <= len(_STYLES):
        return list(_STYLES[:class_count])
    extra = [
        ClassStyle(f"class{i}", (0.3 + 0.5 * ((i * 37) % 8) / 8.0,
                                 0.3 + 0.5 * ((i * 53) % 8) / 8.0,
                                 0.3 + 0.5 * ((i * 71) % 8) / 8.0), "flat")
        for i in range(len(_STYLES), class_count)
    ]
    return list(_STYLES) + extra


@dataclass
class SceneSpec:
    size: int = 64
    object_count: int = 6
    palette: list[ClassStyle] = field(default_factory=lambda: default_palette(8))
    seed: int = 0

    def __post_init__(self):
        if self.object_count < 0:
            raise ValueError("object_count must be >= 0")
        if self.size < 8:
            raise ValueError("canvas size too small")


@dataclass
class DegradationParams:
    attenuation: tuple[float, float, float] = (1.3, 0.6, 0.22)
    backscatter: tuple[float, float, float] = (0.03, 0.22, 0.34)
    depth_range: tuple[float, float] = (0.05, 4.5)
    blur_sigma: float = 0.6
    noise_sigma: float = 0.01

    def __post_init__(self):
        br, bg, bb = self.attenuation
        if not (br >= bg >= bb >= 0):
            raise ValueError("attenuation must satisfy beta_R >= beta_G >= beta_B >= 0")
        if any(b < 0 or b > 1 for b in self.backscatter):
            raise ValueError("backscatter must lie in [0, 1]")
        if self.depth_range[0] < 0 or self.depth_range[1] < self.depth_range[0]:
            raise ValueError("bad depth range")
        if self.blur_sigma < 0 or self.noise_sigma < 0:
            raise ValueError("blur/noise sigma must be >= 0")


def _texture(style: ClassStyle, ys, xs, rng) -> np.ndarray:
    # textures are smooth and low-frequency on purpose: the latent bottleneck
    # cannot represent white noise, and neither can real degradation recovery
    base = np.asarray(style.color, dtype=np.float32)
    tone = np.ones(ys.shape, dtype=np.float32)
    if style.texture == "stripes":
        period = rng.uniform(10.0, 22.0)
        angle = rng.uniform(0, np.pi)
        phase = np.cos(angle) * xs + np.sin(angle) * ys
        tone = 1.0 + 0.18 * np.sin(2 * np.pi * phase / period)
    elif style.texture == "speckle":
        # coarse smooth mottling: two low-frequency sinusoids with random
        # orientation and phase
        f1, f2 = rng.uniform(0.03, 0.08, size=2)
        a1, a2 = rng.uniform(0, np.pi, size=2)
        p1 = np.cos(a1) * xs + np.sin(a1) * ys
        p2 = np.cos(a2) * xs - np.sin(a2) * ys
        tone = 1.0 + 0.12 * np.sin(2 * np.pi * f1 * p1 + rng.uniform(0, 6.28)) \
            + 0.1 * np.sin(2 * np.pi * f2 * p2 + rng.uniform(0, 6.28))
    elif style.texture == "rings":
        cy, cx = ys.mean(), xs.mean()
        r = np.hypot(ys - cy, xs - cx)
        tone = 1.0 + 0.18 * np.sin(r / rng.uniform(3.0, 6.0))
    shade = rng.uniform(0.85, 1.1)
    return np.clip(base[None, :] * (tone * shade)[:, None], 0.0, 1.0)


def generate_clean_scene(spec: SceneSpec) -> tuple[np.ndarray, np.ndarray]:
    """Render a clean image + aligned semantic mask, deterministic in seed."""
    rng = np.random.default_rng(spec.seed)
    n = spec.size
    class_count = len(spec.palette)

    # water background: vertical brightness falloff plus a gentle swell
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float32)
    water = np.asarray(spec.palette[0].color, dtype=np.float32)
    depth_shade = 1.0 - 0.45 * (yy / max(n - 1, 1))
    swell = 1.0 + 0.05 * np.sin(2 * np.pi * xx / n * rng.uniform(1.0, 3.0))
    img = water[None, None, :] * (depth_shade * swell)[:, :, None]
    mask = np.zeros((n, n), dtype=np.int64)

    if class_count > 1:
        for _ in range(spec.object_count):
            cls = int(rng.integers(1, class_count))
            style = spec.palette[cls]
            kind = rng.choice(["ellipse", "box", "blob"])
            cy = rng.uniform(0.15 * n, 0.85 * n)
            cx = rng.uniform(0.15 * n, 0.85 * n)
            ry = rng.uniform(0.06 * n, 0.22 * n)
            rx = rng.uniform(0.06 * n, 0.22 * n)
            theta = rng.uniform(0, np.pi)
            dy, dx = yy - cy, xx - cx
            u = np.cos(theta) * dx + np.sin(theta) * dy
            v = -np.sin(theta) * dx + np.cos(theta) * dy
            if kind == "ellipse":
                region = (u / rx) ** 2 + (v / ry) ** 2 <= 1.0
            elif kind == "box":
                region = (np.abs(u) <= rx) & (np.abs(v) <= ry)
            else:
                wob = 1.0 + 0.35 * np.sin(3 * np.arctan2(v, u) + rng.uniform(0, 6.28))
                region = (u / rx) ** 2 + (v / ry) ** 2 <= wob
            if not region.any():
                continue
            ys, xs = np.nonzero(region)
            img[region] = _texture(style, ys.astype(np.float32),
                                   xs.astype(np.float32), rng)
            mask[region] = cls

    return np.clip(img, 0.0, 1.0).astype(np.float32), mask


def depth_field(mask: np.ndarray, depth_range: tuple[float, float],
                rng: np.random.Generator) -> np.ndarray:
    """Vertical depth gradient; foreground labels sit closer to the camera."""
    h, w = mask.shape
    d_min, d_max = depth_range
    column = np.linspace(d_min, d_max, h, dtype=np.float64)
    depth = np.repeat(column[:, None], w, axis=1)
    for label in np.unique(mask):
        if label == 0:
            continue
        factor = rng.uniform(0.45, 0.85)
        depth = np.where(mask == label, depth * factor, depth)
    return depth


def apply_degradation(clean: np.ndarray, mask: np.ndarray,
                      params: DegradationParams, seed: int) -> np.ndarray:
    """Degrade a clean frame; all-zero parameters are an exact identity."""
    if clean.shape[:2] != mask.shape:
        raise ValueError(f"image {clean.shape[:2]} vs mask {mask.shape}")
    rng = np.random.default_rng(seed)
    out = clean.astype(np.float64)
    depth = depth_field(mask, params.depth_range, rng)
    beta = np.asarray(params.attenuation, dtype=np.float64)
    back = np.asarray(params.backscatter, dtype=np.float64)
    transmission = np.exp(-depth[:, :, None] * beta[None, None, :])
    out = out * transmission + back[None, None, :] * (1.0 - transmission)
    if params.blur_sigma > 0:
        for ch in range(3):
            out[:, :, ch] = ndimage.gaussian_filter(out[:, :, ch], params.blur_sigma)
    if params.noise_sigma > 0:
        out = out + rng.normal(0.0, params.noise_sigma, size=out.shape)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def build_dataset(count: int, spec: SceneSpec, params: DegradationParams,
                  out_root: str) -> list[tuple[str, int, int]]:
    """Write `count` (raw, mask, ref) triplets plus a manifest.

    Per-image depth ranges are jittered within params.depth_range so the raw
    domain spans mild through severe degradation.  Returns the manifest as
    (id, seed, radius) tuples; radius is 0 here and nonzero only for
    mask-perturbed dataset copies.
    """
    try:
        for sub in ("raw", "mask", "ref"):
            os.makedirs(os.path.join(out_root, sub), exist_ok=True)
        manifest: list[tuple[str, int, int]] = []
        for i in range(count):
            sample_seed = spec.seed * 1_000_003 + i
            scene = replace(spec, seed=sample_seed)
            clean, mask = generate_clean_scene(scene)
            jitter = np.random.default_rng([spec.seed, i, 7])
            d_lo, d_hi = params.depth_range
            span = float(jitter.uniform(0.05, 1.0))
            sample_params = replace(
                params, depth_range=(d_lo, d_lo + span * (d_hi - d_lo))
            )
            raw = apply_degradation(clean, mask, sample_params, seed=sample_seed + 1)
            sample_id = f"{i:04d}"
            save_image(raw, os.path.join(out_root, "raw", f"{sample_id}.png"))
            save_mask(mask, os.path.join(out_root, "mask", f"{sample_id}.png"))
            save_image(clean, os.path.join(out_root, "ref", f"{sample_id}.png"))
            manifest.append((sample_id, sample_seed, 0))
        write_manifest(manifest, os.path.join(out_root, "manifest.txt"))
        return manifest
    except OSError as exc:
        raise DatasetWriteError(str(exc))


def write_manifest(rows: list[tuple[str, int, int]], path: str) -> None:
    """Plain-text manifest: one `id,seed,erode_or_dilate_radius` line per id."""
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        for sample_id, seed, radius in rows:
            fh.write(f"{sample_id},{seed},{radius}\n")
    os.replace(tmp, path)


def _disk(radius: int) -> np.ndarray:
    if radius <= 0:
        return np.ones((1, 1), dtype=bool)
    span = np.arange(-radius, radius + 1)
    yy, xx = np.meshgrid(span, span, indexing="ij")
    return (yy ** 2 + xx ** 2) <= radius ** 2


def perturb_mask(mask: np.ndarray, pixel_range: tuple[int, int],
                 seed: int) -> np.ndarray:
    """Erode or dilate each foreground region by a random disk radius.

    Per connected region: a uniform radius from pixel_range and a fair coin
    for erode-vs-dilate.  Pixels vacated by erosion take the label of the
    nearest pixel outside the region in the original mask, so no new labels
    ever appear.  Range (0, 0) returns the input unchanged.
    """
    lo, hi = pixel_range
    if lo < 0 or hi < lo:
        raise ValueError(f"bad pixel range {pixel_range}")
    rng = np.random.default_rng(seed)
    out = mask.copy()
    for label in sorted(int(v) for v in np.unique(mask) if v != 0):
        components, n_comp = ndimage.label(mask == label)
        for comp in range(1, n_comp + 1):
            region = components == comp
            radius = int(rng.integers(lo, hi + 1))
            if radius == 0:
                continue
            erode = bool(rng.integers(0, 2))
            footprint = _disk(radius)
            if erode:
                kept = ndimage.binary_erosion(region, structure=footprint)
                removed = region & ~kept
                if removed.any():
                    _, (iy, ix) = ndimage.distance_transform_edt(
                        region, return_indices=True
                    )
                    out[removed] = mask[iy[removed], ix[removed]]
            else:
                grown = ndimage.binary_dilation(region, structure=footprint)
                out[grown] = label
    return out


def remap_mask_classes(mask: np.ndarray, remap: dict[int, int]) -> np.ndarray:
    """Substitute labels through a remap table; the table must be total."""
    present = [int(v) for v in np.unique(mask)]
    missing = [v for v in present if v not in remap]
    if missing:
        raise RemapInvalid(f"remap missing labels {missing}")
    lut = np.zeros(max(max(present), max(remap)) + 1, dtype=np.int64)
    for old, new in remap.items():
        lut[old] = new
    return lut[mask]
