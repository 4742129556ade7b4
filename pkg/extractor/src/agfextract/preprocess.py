"""Image loading and crop generation.

Default pipeline: resize so the short side is 256, center crop to 224, then
per-channel ImageNet normalization. Multi-crop mode cuts N random crops of
``ratio`` times the crop size out of the 224 center crop and resizes them
back to 224, so all variants share one spatial layout.
"""

from __future__ import annotations

import numpy as np
from PIL import Image

RESIZE_SHORT = 256
CROP_SIZE = 224
IMAGENET_MEAN = np.array([0.485, 0.456, 0.406], dtype=np.float32)
IMAGENET_STD = np.array([0.229, 0.224, 0.225], dtype=np.float32)

IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg", ".bmp", ".webp", ".tif", ".tiff")


def load_center_crop(path) -> Image.Image:
    with Image.open(path) as img:
        img = img.convert("RGB")
        w, h = img.size
        scale = RESIZE_SHORT / min(w, h)
        img = img.resize(
            (max(1, round(w * scale)), max(1, round(h * scale))), Image.BILINEAR
        )
        w, h = img.size
        left = (w - CROP_SIZE) // 2
        top = (h - CROP_SIZE) // 2
        return img.crop((left, top, left + CROP_SIZE, top + CROP_SIZE))


def random_crops(img: Image.Image, n: int, ratio: float, rng) -> list[Image.Image]:
    """N random crops of ratio*CROP_SIZE, resized back to CROP_SIZE."""
    size = max(1, round(CROP_SIZE * ratio))
    span = CROP_SIZE - size
    out = []
    for _ in range(n):
        left = int(rng.integers(0, span + 1))
        top = int(rng.integers(0, span + 1))
        crop = img.crop((left, top, left + size, top + size))
        out.append(crop.resize((CROP_SIZE, CROP_SIZE), Image.BILINEAR))
    return out


def to_tensor(img: Image.Image) -> np.ndarray:
    """(3, H, W) float32, ImageNet-normalized."""
    arr = np.asarray(img, dtype=np.float32) / 255.0
    arr = (arr - IMAGENET_MEAN) / IMAGENET_STD
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def list_images(directory) -> list:
    """Image files directly inside ``directory``, sorted by name."""
    from pathlib import Path

    root = Path(directory)
    if not root.is_dir():
        raise NotADirectoryError(f"{directory} is not a directory")
    files = sorted(
        p for p in root.iterdir()
        if p.is_file() and p.suffix.lower() in IMAGE_EXTENSIONS
    )
    if not files:
        raise FileNotFoundError(f"no image files found in {directory}")
    return files
