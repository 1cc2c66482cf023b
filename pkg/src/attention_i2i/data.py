"""Unpaired two-domain data: loading, augmentation, 16-patch local views, object masks."""
from __future__ import annotations

import hashlib
import json
import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, NamedTuple, Sequence

import numpy as np
import torch
import torch.nn.functional as F
import torchvision.transforms.functional as TF
from PIL import Image, UnidentifiedImageError

from ._validation import ConfigurationError, ShapeError, check_image, check_probability

logger = logging.getLogger(__name__)

IMG_EXTS = (".png", ".jpg", ".jpeg", ".bmp")
GRID = 4
NUM_PATCHES = GRID * GRID
MIN_CROP_FRACTION = 0.6


@dataclass(frozen=True)
class BoundingBox:
    x_min: float
    y_min: float
    x_max: float
    y_max: float
    class_id: int = 0

    @property
    def area(self) -> float:
        return max(0.0, self.x_max - self.x_min) * max(0.0, self.y_max - self.y_min)

    @property
    def is_degenerate(self) -> bool:
        return not (self.x_min < self.x_max and self.y_min < self.y_max)

    def clip(self, height: int, width: int) -> "BoundingBox":
        return BoundingBox(
            min(max(self.x_min, 0.0), width), min(max(self.y_min, 0.0), height),
            min(max(self.x_max, 0.0), width), min(max(self.y_max, 0.0), height),
            self.class_id,
        )

    def scale(self, sx: float, sy: float) -> "BoundingBox":
        return BoundingBox(self.x_min * sx, self.y_min * sy, self.x_max * sx, self.y_max * sy,
                           self.class_id)

    def shift(self, dx: float, dy: float) -> "BoundingBox":
        return BoundingBox(self.x_min + dx, self.y_min + dy, self.x_max + dx, self.y_max + dy,
                           self.class_id)

    def to_list(self) -> list:
        return [self.x_min, self.y_min, self.x_max, self.y_max, self.class_id]

    @classmethod
    def from_list(cls, values: Sequence) -> "BoundingBox":
        if len(values) != 5:
            raise ConfigurationError(f"box entry must be [x_min, y_min, x_max, y_max, class_id], got {values}")
        x0, y0, x1, y1, c = values
        return cls(float(x0), float(y0), float(x1), float(y1), int(c))


@dataclass
class DatasetSpec:
    root_path: Path
    domain_a_dir: str = "trainA"
    domain_b_dir: str = "trainB"
    annotations_path: Path | None = None
    image_size: int = 64

    def __post_init__(self):
        self.root_path = Path(self.root_path)
        if self.annotations_path is not None:
            self.annotations_path = Path(self.annotations_path)
        if self.image_size < 1:
            raise ConfigurationError(f"image_size must be positive, got {self.image_size}")

    @property
    def domain_a(self) -> Path:
        return self.root_path / self.domain_a_dir

    @property
    def domain_b(self) -> Path:
        return self.root_path / self.domain_b_dir

    def for_split(self, split: str) -> "DatasetSpec":
        """The same dataset layout pointed at another split (``train`` or ``test``)."""
        ann = self.root_path / f"annotations_{split}.json"
        return DatasetSpec(self.root_path, f"{split}A", f"{split}B",
                           ann if ann.exists() else None, self.image_size)


@dataclass
class AugmentationConfig:
    flip_prob: float = 0.5
    blur_sigma_range: tuple[float, float] = (0.1, 1.0)
    # brightness, contrast, saturation, hue
    jitter_strengths: tuple[float, float, float, float] = (0.4, 0.4, 0.4, 0.1)
    grayscale_prob: float = 0.2
    seed: int = 0

    def __post_init__(self):
        check_probability(self.flip_prob, "flip_prob")
        check_probability(self.grayscale_prob, "grayscale_prob")
        lo, hi = self.blur_sigma_range
        if lo < 0 or hi < lo:
            raise ConfigurationError(f"blur_sigma_range must be nonnegative and ordered, got {self.blur_sigma_range}")
        if len(self.jitter_strengths) != 4 or min(self.jitter_strengths) < 0:
            raise ConfigurationError("jitter_strengths must be four nonnegative deltas")
        if self.jitter_strengths[3] > 0.5:
            raise ConfigurationError("hue jitter must be <= 0.5")
        self.blur_sigma_range = (float(lo), float(hi))
        self.jitter_strengths = tuple(float(s) for s in self.jitter_strengths)

    @classmethod
    def identity(cls) -> "AugmentationConfig":
        return cls(0.0, (0.0, 0.0), (0.0, 0.0, 0.0, 0.0), 0.0)


@dataclass
class PatchGridView:
    """A crop split into a shuffled 4x4 grid.

    ``patches[i]`` is grid cell ``permutation[i]`` (row-major cell index).
    """
    crop_box: BoundingBox
    patches: list[torch.Tensor]
    permutation: np.ndarray
    patch_size: int
    crop: torch.Tensor = field(repr=False)

    def reconstruct(self) -> torch.Tensor:
        cells = [None] * NUM_PATCHES
        for slot, cell in enumerate(self.permutation):
            cells[int(cell)] = self.patches[slot]
        rows = [torch.cat(cells[r * GRID:(r + 1) * GRID], dim=-1) for r in range(GRID)]
        return torch.cat(rows, dim=-2)

    def resized(self) -> torch.Tensor:
        """The 16 patches (shuffled order) resized to ``patch_size``, stacked as 16x3xPxP."""
        batch = torch.stack(self.patches)
        if batch.shape[-2:] == (self.patch_size, self.patch_size):
            return batch
        return resize(batch, (self.patch_size, self.patch_size)).clamp(-1, 1)

    def cell_order(self) -> np.ndarray:
        """Slot index of each grid cell, i.e. the inverse permutation."""
        return np.argsort(self.permutation)


class UnpairedSample(NamedTuple):
    image_a: torch.Tensor
    image_b: torch.Tensor
    boxes_a: list[BoundingBox] | None


# ---------------------------------------------------------------- conversions

def to_tensor(array: np.ndarray) -> torch.Tensor:
    """uint8 HxWx3 -> float32 3xHxW in [-1, 1]."""
    t = torch.from_numpy(np.array(array, copy=True)).permute(2, 0, 1).float()
    return t / 127.5 - 1.0


def to_uint8(image: torch.Tensor) -> np.ndarray:
    """float CxHxW in [-1, 1] -> uint8 HxWxC (or HxW for one channel)."""
    arr = ((image.detach().float().clamp(-1, 1) + 1.0) * 127.5).round().to(torch.uint8)
    arr = arr.permute(1, 2, 0).cpu().numpy()
    return arr[..., 0] if arr.shape[-1] == 1 else arr


def resize(image: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    """Bilinear, antialiased resize of a CxHxW or NxCxHxW tensor to ``(H, W)``."""
    batched = image.ndim == 4
    x = image if batched else image[None]
    out = F.interpolate(x, size=size, mode="bilinear", antialias=True, align_corners=False)
    return out if batched else out[0]


def smallest_side_size(height: int, width: int, side: int) -> tuple[int, int]:
    if height <= width:
        return side, max(1, int(round(width * side / height)))
    return max(1, int(round(height * side / width))), side


def read_annotations(path: Path) -> dict[str, list[BoundingBox]]:
    with open(path) as fh:
        raw = json.load(fh)
    return {name: [BoundingBox.from_list(b) for b in boxes] for name, boxes in raw.items()}


def write_annotations(path: Path, annotations: dict[str, list[BoundingBox]]) -> None:
    payload = {name: [b.to_list() for b in boxes] for name, boxes in sorted(annotations.items())}
    Path(path).write_text(json.dumps(payload, indent=1, sort_keys=True) + "\n")


def _list_images(root: Path) -> list[Path]:
    return sorted(p for p in root.iterdir() if p.suffix.lower() in IMG_EXTS)


# ---------------------------------------------------------------- loading

class UnpairedImageFolder:
    """Two image folders sampled independently, decoded and resized on first access."""

    def __init__(self, spec: DatasetSpec):
        self.spec = spec
        for d in (spec.root_path, spec.domain_a, spec.domain_b):
            if not d.is_dir():
                raise ConfigurationError(f"dataset directory not found: {d}")
        self.skipped: list[Path] = []
        self._cache: dict[Path, tuple[torch.Tensor, float, float]] = {}
        self.paths_a = self._usable(_list_images(spec.domain_a))
        self.paths_b = self._usable(_list_images(spec.domain_b))
        if not self.paths_a or not self.paths_b:
            raise ConfigurationError(
                f"no usable images (domain A: {len(self.paths_a)}, domain B: {len(self.paths_b)})")
        if {p.resolve() for p in self.paths_a} & {p.resolve() for p in self.paths_b}:
            raise ConfigurationError("domain A and domain B must be disjoint")
        if self.skipped:
            logger.warning("skipped %d undecodable image(s)", len(self.skipped))

        self.annotations: dict[str, list[BoundingBox]] | None = None
        if spec.annotations_path is not None:
            self.annotations = read_annotations(spec.annotations_path)
            for key in self.annotations:
                if not (spec.root_path / key).exists():
                    raise ConfigurationError(f"annotation entry references a missing image: {key}")

    def _usable(self, paths: list[Path]) -> list[Path]:
        good = []
        for p in paths:
            try:
                self._decode(p)
            except (UnidentifiedImageError, OSError, ValueError):
                self.skipped.append(p)
                continue
            good.append(p)
        return good

    def _decode(self, path: Path) -> tuple[torch.Tensor, float, float]:
        if path not in self._cache:
            with Image.open(path) as im:
                arr = np.asarray(im.convert("RGB"))
            t = to_tensor(arr)
            h, w = t.shape[-2:]
            nh, nw = smallest_side_size(h, w, self.spec.image_size)
            if (nh, nw) != (h, w):
                t = resize(t, (nh, nw)).clamp(-1, 1)
            self._cache[path] = (t, nw / w, nh / h)
        return self._cache[path]

    def key(self, path: Path) -> str:
        return path.relative_to(self.spec.root_path).as_posix()

    def image(self, path: Path) -> torch.Tensor:
        return self._decode(path)[0]

    def boxes(self, path: Path) -> list[BoundingBox] | None:
        if self.annotations is None:
            return None
        img, sx, sy = self._decode(path)
        h, w = img.shape[-2:]
        out = [b.scale(sx, sy).clip(h, w) for b in self.annotations.get(self.key(path), [])]
        return [b for b in out if not b.is_degenerate]

    def __len__(self) -> int:
        return len(self.paths_a)

    def epoch_order(self, seed: int, epoch: int) -> tuple[np.ndarray, np.ndarray]:
        """Independent index permutations for the A and B streams."""
        rng_a = np.random.default_rng([seed, epoch, 0])
        rng_b = np.random.default_rng([seed, epoch, 1])
        order_a = rng_a.permutation(len(self.paths_a))
        reps = math.ceil(len(self.paths_a) / len(self.paths_b))
        order_b = np.concatenate([rng_b.permutation(len(self.paths_b)) for _ in range(reps)])
        return order_a, order_b[: len(order_a)]

    def iter_epoch(self, seed: int = 0, epoch: int = 0) -> Iterator[UnpairedSample]:
        order_a, order_b = self.epoch_order(seed, epoch)
        for ia, ib in zip(order_a, order_b):
            pa, pb = self.paths_a[ia], self.paths_b[ib]
            yield UnpairedSample(self.image(pa), self.image(pb), self.boxes(pa))


def load_unpaired_dataset(spec: DatasetSpec, seed: int = 0, epoch: int = 0) -> Iterator[UnpairedSample]:
    """Yield one epoch of independently sampled (A, B) pairs."""
    return UnpairedImageFolder(spec).iter_epoch(seed, epoch)


# ---------------------------------------------------------------- augmentation

def _blur(img01: torch.Tensor, sigma: float) -> torch.Tensor:
    radius = max(1, math.ceil(3 * sigma))
    radius = min(radius, min(img01.shape[-2:]) - 1)
    if radius < 1:
        return img01
    return TF.gaussian_blur(img01, [2 * radius + 1] * 2, [sigma, sigma])


def augment_image(image: torch.Tensor, cfg: AugmentationConfig, draw: np.random.Generator) -> torch.Tensor:
    """Random flip, color jitter, grayscale and gaussian blur of a [-1, 1] image."""
    check_image(image)
    out = image
    if cfg.flip_prob > 0 and draw.random() < cfg.flip_prob:
        out = out.flip(-1)

    b, c, s, h = cfg.jitter_strengths
    jitter = any(v > 0 for v in cfg.jitter_strengths)
    gray = cfg.grayscale_prob > 0 and draw.random() < cfg.grayscale_prob
    sigma = float(draw.uniform(*cfg.blur_sigma_range)) if cfg.blur_sigma_range[1] > 0 else 0.0
    if not (jitter or gray or sigma > 0):
        return out

    x = ((out + 1) / 2).clamp(0, 1)
    if b > 0:
        x = TF.adjust_brightness(x, float(draw.uniform(max(0.0, 1 - b), 1 + b)))
    if c > 0:
        x = TF.adjust_contrast(x, float(draw.uniform(max(0.0, 1 - c), 1 + c)))
    if s > 0:
        x = TF.adjust_saturation(x, float(draw.uniform(max(0.0, 1 - s), 1 + s)))
    if h > 0:
        x = TF.adjust_hue(x, float(draw.uniform(-h, h)))
    if gray:
        x = TF.rgb_to_grayscale(x, num_output_channels=3)
    if sigma > 0:
        x = _blur(x, sigma)
    return (x * 2 - 1).clamp(-1, 1)


# ---------------------------------------------------------------- local patches

def _floor4(v: int) -> int:
    return v - v % GRID


def sample_crop(height: int, width: int, draw: np.random.Generator,
                max_attempts: int = 100) -> BoundingBox:
    """Uniform crop with sides divisible by 4 covering at least 60% of the image."""
    total = height * width
    if _floor4(height) < GRID or _floor4(width) < GRID \
            or _floor4(height) * _floor4(width) < MIN_CROP_FRACTION * total:
        raise ShapeError(
            f"cannot cut a 4x4-divisible crop covering {MIN_CROP_FRACTION:.0%} of a {height}x{width} image")
    for _ in range(max_attempts):
        ch = GRID * int(draw.integers(1, height // GRID + 1))
        cw = GRID * int(draw.integers(1, width // GRID + 1))
        if ch * cw >= MIN_CROP_FRACTION * total:
            y0 = int(draw.integers(0, height - ch + 1))
            x0 = int(draw.integers(0, width - cw + 1))
            return BoundingBox(x0, y0, x0 + cw, y0 + ch)
    # fallback: centered crop with 78% sides, rounded up to the grid
    ch = min(_floor4(height), GRID * math.ceil(0.78 * height / GRID))
    cw = min(_floor4(width), GRID * math.ceil(0.78 * width / GRID))
    while ch * cw < MIN_CROP_FRACTION * total:
        if ch < _floor4(height):
            ch += GRID
        else:
            cw += GRID
    y0, x0 = (height - ch) // 2, (width - cw) // 2
    return BoundingBox(x0, y0, x0 + cw, y0 + ch)


def tile_grid(crop: torch.Tensor) -> list[torch.Tensor]:
    h, w = crop.shape[-2:]
    ph, pw = h // GRID, w // GRID
    return [crop[..., r * ph:(r + 1) * ph, c * pw:(c + 1) * pw]
            for r in range(GRID) for c in range(GRID)]


def default_patch_size(height: int, width: int) -> int:
    return max(GRID, _floor4(min(height, width) // GRID))


def make_local_patches(image: torch.Tensor, cfg: AugmentationConfig, draw: np.random.Generator,
                       patch_size: int | None = None) -> tuple[torch.Tensor, PatchGridView]:
    """Return an augmented global view and a shuffled 16-patch grid of an augmented crop."""
    check_image(image)
    h, w = image.shape[-2:]
    box = sample_crop(h, w, draw)
    crop = image[:, int(box.y_min):int(box.y_max), int(box.x_min):int(box.x_max)]
    crop = augment_image(crop, cfg, draw)
    tiles = tile_grid(crop)
    perm = draw.permutation(NUM_PATCHES)
    grid = PatchGridView(box, [tiles[int(i)] for i in perm], perm,
                         patch_size or default_patch_size(h, w), crop)
    global_view = augment_image(image, cfg, draw)
    return global_view, grid


# ---------------------------------------------------------------- masks

def rasterize_object_mask(boxes: Sequence[BoundingBox], height: int, width: int) -> torch.Tensor:
    """Binary 1xHxW mask: a pixel is 1 iff its center lies inside some box."""
    mask = torch.zeros(1, height, width)
    ys = torch.arange(height, dtype=torch.float64) + 0.5
    xs = torch.arange(width, dtype=torch.float64) + 0.5
    for b in boxes:
        if b.is_degenerate:
            warnings.warn(f"ignoring zero-area box {b}", stacklevel=2)
            continue
        rows = (ys >= b.y_min) & (ys < b.y_max)
        cols = (xs >= b.x_min) & (xs < b.x_max)
        mask[0, rows[:, None] & cols[None, :]] = 1.0
    return mask


def dataset_digest(root: Path) -> str:
    """SHA-256 over every file under ``root`` (relative path and bytes, sorted by path)."""
    root = Path(root)
    h = hashlib.sha256()
    for p in sorted(q for q in root.rglob("*") if q.is_file()):
        h.update(p.relative_to(root).as_posix().encode())
        h.update(b"\0")
        h.update(p.read_bytes())
    return h.hexdigest()
