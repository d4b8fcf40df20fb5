"""Image/mask IO and paired-sample loading.

Dataset layout on disk::

    <root>/raw/<id>.png     degraded input image
    <root>/mask/<id>.png    single-channel indexed mask (pixel value = class id)
    <root>/ref/<id>.png     clean reference image

Images are 8-bit or 16-bit rasters rescaled to float32 in [0, 1], channel
order R,G,B.  Masks are single-channel; an RGB color-coded mask must first be
converted with :func:`mask_from_rgb`.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np
from PIL import Image

from .errors import SampleInvalid

# 8-class underwater color convention used by public segmentation masks:
# water body, divers, plants, wrecks, robots, reefs/invertebrates,
# fish/vertebrates, sea-floor/rocks.
DEFAULT_RGB_PALETTE: dict[tuple[int, int, int], int] = {
    (0, 0, 0): 0,
    (0, 0, 255): 1,
    (0, 255, 0): 2,
    (0, 255, 255): 3,
    (255, 0, 0): 4,
    (255, 0, 255): 5,
    (255, 255, 0): 6,
    (255, 255, 255): 7,
}


@dataclass
class PairedSample:
    raw: np.ndarray
    reference: np.ndarray | None
    mask: np.ndarray | None
    id: str

    def require(self, stage: int) -> "PairedSample":
        if stage in (1, 2) and self.mask is None:
            raise SampleInvalid(f"stage {stage} requires a mask for sample {self.id}")
        if stage == 3 and self.reference is None:
            raise SampleInvalid(f"stage 3 requires a reference for sample {self.id}")
        return self


def load_image(path: str) -> np.ndarray:
    """Read an 8/16-bit raster as float32 RGB in [0, 1]."""
    with Image.open(path) as im:
        if im.mode in ("I;16", "I;16B", "I"):
            arr = np.asarray(im, dtype=np.float32) / 65535.0
            arr = np.stack([arr] * 3, axis=-1)
        else:
            arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return arr


def save_image(img: np.ndarray, path: str) -> None:
    """Write [H,W,3] float [0,1] as an 8-bit PNG via a temp-then-rename."""
    data = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0)
    data = np.round(data * 255.0).astype(np.uint8)
    tmp = path + ".tmp"
    Image.fromarray(data, mode="RGB").save(tmp, format="PNG")
    os.replace(tmp, path)


def load_mask(path: str) -> np.ndarray:
    """Read a single-channel indexed mask as int64 [H, W]."""
    with Image.open(path) as im:
        if im.mode == "P":
            arr = np.asarray(im, dtype=np.int64)
        elif im.mode in ("L", "I", "I;16"):
            arr = np.asarray(im.convert("I"), dtype=np.int64)
        else:
            raise SampleInvalid(
                f"{path}: mask must be single-channel indexed, got mode {im.mode}"
            )
    return arr


def save_mask(mask: np.ndarray, path: str) -> None:
    data = np.asarray(mask)
    if data.min() < 0 or data.max() > 255:
        raise SampleInvalid("mask labels outside uint8 range")
    tmp = path + ".tmp"
    Image.fromarray(data.astype(np.uint8), mode="L").save(tmp, format="PNG")
    os.replace(tmp, path)


def mask_from_rgb(rgb: np.ndarray, palette: dict | None = None) -> np.ndarray:
    """Convert a color-coded RGB mask into class indices.

    `palette` maps (r, g, b) byte triples to class ids; colors not in the
    palette raise SampleInvalid.
    """
    palette = DEFAULT_RGB_PALETTE if palette is None else palette
    data = np.asarray(rgb)
    if data.dtype != np.uint8:
        data = np.round(np.clip(data, 0, 1) * 255).astype(np.uint8)
    out = np.full(data.shape[:2], -1, dtype=np.int64)
    for color, cls in palette.items():
        out[np.all(data == np.asarray(color, dtype=np.uint8), axis=-1)] = cls
    if (out < 0).any():
        raise SampleInvalid("mask contains colors missing from the palette")
    return out


def _scale_image(img: np.ndarray, size: int) -> np.ndarray:
    data = np.round(np.clip(img, 0, 1) * 255).astype(np.uint8)
    im = Image.fromarray(data, mode="RGB").resize((size, size), Image.BILINEAR)
    return np.asarray(im, dtype=np.float32) / 255.0


def _scale_mask(mask: np.ndarray, size: int) -> np.ndarray:
    im = Image.fromarray(mask.astype(np.uint8), mode="L")
    return np.asarray(im.resize((size, size), Image.NEAREST), dtype=np.int64)


def load_pair(
    image_path: str,
    mask_path: str | None = None,
    ref_path: str | None = None,
    *,
    class_count: int = 8,
    image_size: int | None = None,
    train: bool = False,
    rng: np.random.Generator | None = None,
) -> PairedSample:
    """Load a (raw, mask, reference) triplet.

    Training mode takes a random crop of `image_size`; test mode scales the
    full frame directly.  The same crop is applied to all three rasters.
    """
    raw = load_image(image_path)
    mask = load_mask(mask_path) if mask_path else None
    ref = load_image(ref_path) if ref_path else None

    if mask is not None:
        if mask.shape != raw.shape[:2]:
            raise SampleInvalid(
                f"mask shape {mask.shape} != image shape {raw.shape[:2]}"
            )
        if mask.min() < 0 or mask.max() >= class_count:
            raise SampleInvalid(
                f"mask labels must lie in [0, {class_count}), got max {mask.max()}"
            )
    if ref is not None and ref.shape != raw.shape:
        raise SampleInvalid(f"reference shape {ref.shape} != raw shape {raw.shape}")

    if image_size is not None:
        h, w = raw.shape[:2]
        if train and h >= image_size and w >= image_size:
            if rng is None:
                rng = np.random.default_rng(0)
            top = int(rng.integers(0, h - image_size + 1))
            left = int(rng.integers(0, w - image_size + 1))
            sl = (slice(top, top + image_size), slice(left, left + image_size))
            raw = raw[sl]
            mask = mask[sl] if mask is not None else None
            ref = ref[sl] if ref is not None else None
        elif (h, w) != (image_size, image_size):
            raw = _scale_image(raw, image_size)
            mask = _scale_mask(mask, image_size) if mask is not None else None
            ref = _scale_image(ref, image_size) if ref is not None else None

    sample_id = os.path.splitext(os.path.basename(image_path))[0]
    return PairedSample(raw=raw, reference=ref, mask=mask, id=sample_id)


def dataset_ids(root: str) -> list[str]:
    raw_dir = os.path.join(root, "raw")
    if not os.path.isdir(raw_dir):
        raise SampleInvalid(f"{root}: missing raw/ directory")
    return sorted(
        os.path.splitext(name)[0]
        for name in os.listdir(raw_dir)
        if name.endswith(".png")
    )


def triplet_paths(root: str, sample_id: str) -> tuple[str, str | None, str | None]:
    raw = os.path.join(root, "raw", f"{sample_id}.png")
    mask = os.path.join(root, "mask", f"{sample_id}.png")
    ref = os.path.join(root, "ref", f"{sample_id}.png")
    return (
        raw,
        mask if os.path.isfile(mask) else None,
        ref if os.path.isfile(ref) else None,
    )
