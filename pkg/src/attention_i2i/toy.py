"""Synthetic two-domain benchmark: clean toy street scenes (B) and fogged scenes (A).

Backgrounds are low-saturation gray textures whose mean sits close to the fog
color, objects are saturated geometric shapes. Fog therefore mostly destroys
object contrast, which is what the proxy detector depends on.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from ._validation import ConfigurationError
from .data import BoundingBox, DatasetSpec, write_annotations

FOG_GRAY = 0.6
FOG_ALPHA_NEAR = 0.35
FOG_ALPHA_RANGE = 0.5
FOG_BLUR_SIGMA = 1.0

PALETTE = np.array([
    [0.90, 0.12, 0.10],
    [0.10, 0.25, 0.90],
    [0.10, 0.80, 0.20],
    [0.95, 0.85, 0.05],
    [0.85, 0.10, 0.80],
    [0.05, 0.80, 0.85],
    [0.95, 0.50, 0.05],
])

RECT, ELLIPSE = 0, 1


def _background(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    img = np.empty((h, w, 3))
    horizon = int(h * rng.uniform(0.3, 0.5))
    ramp = np.linspace(0.66, 0.60, max(horizon, 1))[:, None, None]
    img[:horizon] = ramp + np.array([-0.01, 0.0, 0.02])
    img[horizon:] = rng.uniform(0.52, 0.58)
    # lane marking
    lane_y = horizon + (h - horizon) * 2 // 3
    img[lane_y:lane_y + max(1, h // 64), :] += 0.12

    for _ in range(int(rng.integers(2, 6))):
        bw = int(w * rng.uniform(0.1, 0.3))
        bh = int(horizon * rng.uniform(0.4, 1.0))
        x0 = int(rng.integers(0, max(1, w - bw)))
        img[max(0, horizon - bh):horizon, x0:x0 + bw] = rng.uniform(0.52, 0.7)

    img += rng.normal(0.0, 0.025, size=(h, w, 1))
    img += rng.normal(0.0, 0.008, size=(h, w, 3))
    return img


def _overlaps(box: BoundingBox, others: list[BoundingBox], margin: float) -> bool:
    return any(box.x_min < o.x_max + margin and o.x_min < box.x_max + margin
               and box.y_min < o.y_max + margin and o.y_min < box.y_max + margin for o in others)


def render_scene(rng: np.random.Generator, size: int) -> tuple[np.ndarray, list[BoundingBox]]:
    """Clean scene as float HxWx3 in [0, 1] plus integer-pixel object boxes."""
    h = w = size
    img = _background(rng, h, w)
    boxes: list[BoundingBox] = []
    target = int(rng.integers(2, 7))
    yy, xx = np.mgrid[0:h, 0:w]
    attempts = 0
    while len(boxes) < target and attempts < 200:
        attempts += 1
        bw = int(round(w * rng.uniform(0.12, 0.28)))
        bh = int(round(h * rng.uniform(0.1, 0.24)))
        x0 = int(rng.integers(0, w - bw + 1))
        y0 = int(rng.integers(0, h - bh + 1))
        box = BoundingBox(x0, y0, x0 + bw, y0 + bh, int(rng.integers(0, 2)))
        if _overlaps(box, boxes, margin=2):
            continue
        color = np.clip(PALETTE[rng.integers(len(PALETTE))] + rng.normal(0, 0.04, 3), 0, 1)
        shade = np.linspace(1.0, 0.85, bh)[:, None, None]
        if box.class_id == RECT:
            region = np.ones((bh, bw), bool)
        else:
            cy, cx = (bh - 1) / 2, (bw - 1) / 2
            ly, lx = yy[:bh, :bw], xx[:bh, :bw]
            region = ((ly - cy) / (bh / 2)) ** 2 + ((lx - cx) / (bw / 2)) ** 2 <= 1.0
        patch = img[y0:y0 + bh, x0:x0 + bw]
        fill = np.broadcast_to(color * shade, (bh, bw, 3))
        patch[region] = fill[region]
        boxes.append(box)
    return np.clip(img, 0.0, 1.0), boxes


def fog_alpha(height: int, width: int) -> np.ndarray:
    """Per-pixel fog opacity; the top row is treated as farthest away."""
    depth = 1.0 - np.arange(height) / max(height - 1, 1)
    alpha = FOG_ALPHA_NEAR + FOG_ALPHA_RANGE * depth
    return np.broadcast_to(alpha[:, None, None], (height, width, 1)).copy()


def apply_fog(clean: np.ndarray, alpha: np.ndarray, blur_sigma: float = FOG_BLUR_SIGMA,
              gray: float = FOG_GRAY) -> np.ndarray:
    """Blend toward a uniform gray; blur and contrast loss both scale with ``alpha``."""
    blurred = ndimage.gaussian_filter(clean, sigma=(blur_sigma, blur_sigma, 0), mode="reflect")
    base = (1 - alpha) * clean + alpha * blurred
    return np.clip((1 - alpha) * base + alpha * gray, 0.0, 1.0)


def _save_png(arr01: np.ndarray, path: Path) -> None:
    Image.fromarray((arr01 * 255.0).round().astype(np.uint8), mode="RGB").save(path, optimize=False)


def synthesize_toy_dataset(num_images_per_domain: int, image_size: int, seed: int, out: Path,
                           num_test: int | None = None) -> DatasetSpec:
    """Write a deterministic fog (A) / clean (B) toy dataset to ``out``."""
    if num_images_per_domain < 1:
        raise ConfigurationError("num_images_per_domain must be >= 1")
    if image_size < 32:
        raise ConfigurationError(f"image_size must be >= 32, got {image_size}")
    out = Path(out)
    if num_test is None:
        num_test = max(1, num_images_per_domain // 4)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create dataset directory {out}: {exc}") from exc
    alpha = fog_alpha(image_size, image_size)

    for split, count in (("train", num_images_per_domain), ("test", num_test)):
        annotations: dict[str, list[BoundingBox]] = {}
        for domain in ("A", "B"):
            folder = out / f"{split}{domain}"
            folder.mkdir(exist_ok=True)
            # distinct scene streams per (split, domain) keep the domains unpaired
            rng = np.random.default_rng([seed, 0 if split == "train" else 1, ord(domain)])
            for i in range(count):
                scene, boxes = render_scene(rng, image_size)
                if domain == "A":
                    scene = apply_fog(scene, alpha)
                name = f"{i:05d}.png"
                _save_png(scene, folder / name)
                annotations[f"{split}{domain}/{name}"] = boxes
        write_annotations(out / f"annotations_{split}.json", annotations)

    return DatasetSpec(out, "trainA", "trainB", out / "annotations_train.json", image_size)
