"""Distribution distances (FID, KID), their instance-region variants, and average precision."""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch
import torch.nn as nn

from ._validation import ConfigurationError, ShapeError
from .data import BoundingBox, resize

logger = logging.getLogger(__name__)

COV_RIDGE = 1e-6
INSTANCE_CROP_SIDE = 32


# ---------------------------------------------------------------- feature extraction

@dataclass(frozen=True)
class FeatureExtractorSpec:
    kind: str = "fixed_random_conv"
    feature_dim: int = 256
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("fixed_random_conv", "external_features"):
            raise ConfigurationError(f"unknown feature extractor kind {self.kind!r}")


class RandomConvEmbedder(nn.Module):
    """Four conv/ReLU/avg-pool stages with fixed seeded weights, global average pooled."""

    def __init__(self, feature_dim: int = 256, seed: int = 0):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        widths = [3, feature_dim // 8, feature_dim // 4, feature_dim // 2, feature_dim]
        layers = []
        for c_in, c_out in zip(widths, widths[1:]):
            conv = nn.Conv2d(c_in, c_out, 3, padding=1)
            with torch.no_grad():
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen) * (2.0 / (9 * c_in)) ** 0.5)
                conv.bias.zero_()
            layers += [conv, nn.ReLU(), nn.AvgPool2d(2, ceil_mode=True)]
        self.net = nn.Sequential(*layers[:-1])
        self.requires_grad_(False)

    @torch.no_grad()
    def forward(self, images: torch.Tensor) -> torch.Tensor:
        return self.net(images).mean(dim=(2, 3))


_EMBEDDERS: dict[tuple[int, int], RandomConvEmbedder] = {}


def extract_features(images: Sequence[torch.Tensor] | torch.Tensor, spec: FeatureExtractorSpec | None = None,
                     batch_size: int = 64) -> np.ndarray:
    """N x D float64 features of [-1, 1] images (all images in a batch must share a size)."""
    spec = spec or FeatureExtractorSpec()
    if spec.kind != "fixed_random_conv":
        raise ConfigurationError("external features must be loaded with load_features()")
    key = (spec.feature_dim, spec.seed)
    if key not in _EMBEDDERS:
        _EMBEDDERS[key] = RandomConvEmbedder(spec.feature_dim, spec.seed).eval()
    net = _EMBEDDERS[key]
    imgs = list(images)
    out = []
    for i in range(0, len(imgs), batch_size):
        chunk = imgs[i:i + batch_size]
        shapes = {tuple(c.shape) for c in chunk}
        if len(shapes) == 1:
            out.append(net(torch.stack(chunk).float()).double().numpy())
        else:
            out.extend(net(c[None].float()).double().numpy() for c in chunk)
    return np.concatenate(out, axis=0) if out else np.zeros((0, spec.feature_dim))


def load_features(path: Path) -> np.ndarray:
    """Read an N x D feature matrix from ``.csv`` or ``.npy``."""
    path = Path(path)
    if path.suffix == ".npy":
        arr = np.load(path)
    else:
        arr = np.loadtxt(path, delimiter=",", ndmin=2)
    return np.asarray(arr, dtype=np.float64)


# ---------------------------------------------------------------- distances

def _check_pair(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim == 1:
        a = a[:, None]
    if b.ndim == 1:
        b = b[:, None]
    if a.shape[1] != b.shape[1]:
        raise ShapeError(f"feature dimension mismatch: {a.shape[1]} vs {b.shape[1]}")
    return a, b


def _sqrtm_psd(m: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh((m + m.T) / 2)
    return (vecs * np.sqrt(np.clip(vals, 0, None))) @ vecs.T


def frechet_distance(features_a: np.ndarray, features_b: np.ndarray) -> float:
    """Frechet distance between Gaussians fitted to two feature populations."""
    a, b = _check_pair(features_a, features_b)
    if len(a) < 2 or len(b) < 2:
        raise ShapeError("each population needs at least 2 samples")
    d = a.shape[1]
    mu_a, mu_b = a.mean(0), b.mean(0)
    cov_a = np.atleast_2d(np.cov(a, rowvar=False)) + COV_RIDGE * np.eye(d)
    cov_b = np.atleast_2d(np.cov(b, rowvar=False)) + COV_RIDGE * np.eye(d)
    # Tr sqrt(cov_a cov_b) == Tr sqrt(sqrt(cov_a) cov_b sqrt(cov_a)), which is symmetric PSD
    root_a = _sqrtm_psd(cov_a)
    inner = root_a @ cov_b @ root_a
    vals = np.linalg.eigvalsh((inner + inner.T) / 2)
    tr_sqrt = np.sqrt(np.clip(vals, 0, None)).sum()
    fid = ((mu_a - mu_b) ** 2).sum() + np.trace(cov_a) + np.trace(cov_b) - 2 * tr_sqrt
    return float(max(fid, 0.0))


def polynomial_kernel(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    return (x @ y.T / x.shape[1] + 1.0) ** 3


def _canonical_order(x: np.ndarray) -> np.ndarray:
    return x[np.lexsort(x.T[::-1])]


def kernel_distance(features_a: np.ndarray, features_b: np.ndarray, subset_size: int = 100,
                    num_subsets: int = 100, seed: int = 0) -> float:
    """Unbiased squared MMD (cubic polynomial kernel), averaged over random subsets.

    Rows are put in a canonical order before subsets are drawn, so the result does
    not depend on the order the samples arrive in.
    """
    a, b = _check_pair(features_a, features_b)
    if subset_size < 2:
        raise ConfigurationError(f"subset_size must be >= 2, got {subset_size}")
    m = min(subset_size, len(a), len(b))
    if m < 2:
        raise ShapeError("each population needs at least 2 samples")
    if m < subset_size:
        warnings.warn(f"subset_size reduced to {m} (population size)", stacklevel=2)
    a, b = _canonical_order(a), _canonical_order(b)
    rng = np.random.default_rng(seed)
    total = 0.0
    for _ in range(num_subsets):
        x = a[rng.choice(len(a), m, replace=False)]
        y = b[rng.choice(len(b), m, replace=False)]
        kxx, kyy, kxy = polynomial_kernel(x, x), polynomial_kernel(y, y), polynomial_kernel(x, y)
        total += ((kxx.sum() - np.trace(kxx)) / (m * (m - 1))
                  + (kyy.sum() - np.trace(kyy)) / (m * (m - 1))
                  - 2 * kxy.mean())
    return float(total / num_subsets)


# ---------------------------------------------------------------- instance regions

def crop_boxes(image: torch.Tensor, boxes: Sequence[BoundingBox], side: int = INSTANCE_CROP_SIDE) -> list[torch.Tensor]:
    h, w = image.shape[-2:]
    crops = []
    for b in boxes:
        b = b.clip(h, w)
        x0, y0 = int(np.floor(b.x_min)), int(np.floor(b.y_min))
        x1, y1 = int(np.ceil(b.x_max)), int(np.ceil(b.y_max))
        if x1 <= x0 or y1 <= y0:
            continue
        crops.append(resize(image[:, y0:y1, x0:x1], (side, side)))
    return crops


def instance_region_metrics(images_a, images_b, boxes_a, boxes_b,
                            extractor: FeatureExtractorSpec | None = None,
                            crop_side: int = INSTANCE_CROP_SIDE, subset_size: int = 100,
                            num_subsets: int = 100) -> tuple[float, float]:
    """FID and KID restricted to annotated object regions (crops resized to ``crop_side``)."""
    crops_a = [c for img, bx in zip(images_a, boxes_a) for c in crop_boxes(img, bx or [], crop_side)]
    crops_b = [c for img, bx in zip(images_b, boxes_b) for c in crop_boxes(img, bx or [], crop_side)]
    if not crops_a or not crops_b:
        raise ShapeError(f"no object crops (A: {len(crops_a)}, B: {len(crops_b)})")
    fa = extract_features(crops_a, extractor)
    fb = extract_features(crops_b, extractor)
    return frechet_distance(fa, fb), kernel_distance(fa, fb, subset_size, num_subsets)


# ---------------------------------------------------------------- average precision

def box_iou(a: BoundingBox, b: BoundingBox) -> float:
    iw = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    ih = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def match_detections(detections: Mapping, ground_truth: Mapping[str, Sequence[BoundingBox]],
                     iou_threshold: float = 0.5) -> tuple[np.ndarray, np.ndarray, int]:
    """Greedy score-descending matching. Returns ``(scores, is_tp, num_gt)`` in ranked order."""
    ranked = []
    for key in sorted(detections):
        det = detections[key]
        for j, (box, score) in enumerate(zip(det.boxes, det.scores)):
            ranked.append((-float(score), key, j, box))
    ranked.sort(key=lambda r: (r[0], r[1], r[2]))
    matched = {key: np.zeros(len(gts), bool) for key, gts in ground_truth.items()}
    tp = np.zeros(len(ranked), bool)
    for i, (_, key, _, box) in enumerate(ranked):
        gts = ground_truth.get(key, [])
        if not gts:
            continue
        ious = np.array([box_iou(box, g) for g in gts])
        best = int(ious.argmax())
        if ious[best] >= iou_threshold and not matched[key][best]:
            matched[key][best] = True
            tp[i] = True
    scores = np.array([-r[0] for r in ranked])
    return scores, tp, sum(len(g) for g in ground_truth.values())


def average_precision(detections: Mapping, ground_truth: Mapping[str, Sequence[BoundingBox]],
                      iou_threshold: float = 0.5) -> float:
    """All-point interpolated AP over every image; detections are class-agnostic."""
    _, tp, num_gt = match_detections(detections, ground_truth, iou_threshold)
    if num_gt == 0:
        if len(tp):
            warnings.warn("ground truth is empty but there are detections; AP set to 0", stacklevel=2)
        return 0.0
    if not len(tp):
        return 0.0
    ctp = np.cumsum(tp)
    recall = ctp / num_gt
    precision = ctp / np.arange(1, len(tp) + 1)
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    idx = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[idx + 1] - mrec[idx]) * mpre[idx + 1]))
