"""Image loading, luminance extraction, patch cropping and batch iteration."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .tensor import Tensor

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png", ".pgm", ".ppm")

# ITU-R BT.601 studio-swing luminance coefficients, applied to [0,1] RGB.
_LUMA_WEIGHTS = np.array([65.481, 128.553, 24.966])


class ImageFormatError(ValueError):
    pass


def load_image(path) -> np.ndarray:
    """Read an 8-bit PNG/PGM/PPM into a [0,1] float64 array, (h,w) or (h,w,3)."""
    with Image.open(path) as im:
        if im.mode not in ("L", "RGB"):
            im = im.convert("RGB" if len(im.getbands()) >= 3 else "L")
        arr = np.asarray(im, dtype=np.float64) / 255.0
    return arr


def rgb_to_luma(img: np.ndarray, full_swing: bool = False) -> np.ndarray:
    """BT.601 luminance of an RGB image; grayscale passes through unchanged."""
    if img.ndim == 2:
        return img
    if img.ndim != 3 or img.shape[2] != 3:
        raise ImageFormatError(f"expected (h,w) or (h,w,3), got shape {img.shape}")
    if full_swing:
        return img @ np.array([0.299, 0.587, 0.114])
    return (img @ _LUMA_WEIGHTS + 16.0) / 255.0


@dataclass(frozen=True)
class Patch:
    data: np.ndarray  # (size, size) luminance in [0,1]
    source: str
    offset: tuple[int, int]
    aug: int


def crop_patches(img: np.ndarray, source: str = "", size: int = 96,
                 stride: int = 96) -> list[Patch]:
    """Grid crops; right/bottom remainders are discarded.

    Images smaller than the patch size are skipped with a warning.
    """
    if img.ndim != 2:
        raise ImageFormatError(f"crop_patches wants a 2-d luminance image, got {img.shape}")
    h, w = img.shape
    if h < size or w < size:
        log.warning("skipping %s: %dx%d is smaller than patch size %d", source, h, w, size)
        return []
    patches = []
    for y in range(0, h - size + 1, stride):
        for x in range(0, w - size + 1, stride):
            patches.append(Patch(img[y : y + size, x : x + size].copy(), source, (y, x), 0))
    return patches


def augment(patch: np.ndarray, k: int) -> np.ndarray:
    """The k-th element of the dihedral group of the square.

    k=0 identity, k=1..3 counter-clockwise rotations by 90/180/270 degrees,
    k=4 horizontal flip, k=5..7 flip followed by the rotations.
    """
    if not 0 <= k <= 7:
        raise ValueError(f"augmentation index must be in 0..7, got {k}")
    if patch.ndim != 2 or patch.shape[0] != patch.shape[1]:
        raise ImageFormatError(f"augment wants a square patch, got {patch.shape}")
    out = np.fliplr(patch) if k >= 4 else patch
    return np.ascontiguousarray(np.rot90(out, k % 4))


def augment_all(patches: list[Patch]) -> list[Patch]:
    """Eight-fold expansion of a patch list."""
    out = []
    for p in patches:
        for k in range(8):
            out.append(Patch(augment(p.data, k), p.source, p.offset, k))
    return out


def load_split(root, split: str, size: int = 96, stride: int = 96,
               augmented: bool = True) -> list[Patch]:
    """Patches for ``<root>/<split>``: luminance, cropped, optionally augmented."""
    base = Path(root) / split
    if not base.is_dir():
        raise FileNotFoundError(f"dataset split not found: {base}")
    patches: list[Patch] = []
    for path in sorted(base.rglob("*")):
        if path.suffix.lower() not in IMAGE_SUFFIXES:
            continue
        try:
            luma = rgb_to_luma(load_image(path))
        except (OSError, ImageFormatError) as exc:
            log.warning("skipping unreadable image %s: %s", path, exc)
            continue
        patches.extend(crop_patches(luma, str(path), size=size, stride=stride))
    return augment_all(patches) if augmented else patches


def batches(patches: list[Patch], batch_size: int, seed: int, epoch: int,
            dtype=np.float32):
    """Epoch-seeded deterministic shuffle; the final partial batch is dropped."""
    if batch_size < 1:
        raise ValueError(f"batch size must be >= 1, got {batch_size}")
    if not patches:
        return
    rng = np.random.default_rng([seed, epoch])
    order = rng.permutation(len(patches))
    for start in range(0, len(patches) - batch_size + 1, batch_size):
        chunk = [patches[i].data for i in order[start : start + batch_size]]
        yield Tensor(np.stack(chunk)[:, None, :, :].astype(dtype))
