"""Frozen classical object detector used as a stand-in for a source-trained detector.

Objects in the clean toy domain are strongly saturated while backgrounds are
near-gray, so thresholding per-pixel chroma and taking connected components is
enough to find them. The constants below were fixed on clean domain-B scenes
and are never adjusted on foggy data.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
from scipy import ndimage

from ._validation import check_image
from .data import BoundingBox

CHROMA_THRESHOLD = 0.30
MIN_AREA_FRACTION = 0.002


@dataclass
class DetectionResult:
    boxes: list[BoundingBox] = field(default_factory=list)
    scores: list[float] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.boxes)


def chroma_map(image: torch.Tensor) -> np.ndarray:
    """Per-pixel max - min over RGB of a [-1, 1] image, in [0, 1]."""
    x = ((image.detach().double().clamp(-1, 1) + 1) / 2).numpy()
    return x.max(0) - x.min(0)


def proxy_detect(image: torch.Tensor) -> DetectionResult:
    check_image(image)
    chroma = chroma_map(image)
    h, w = chroma.shape
    labels, count = ndimage.label(chroma > CHROMA_THRESHOLD)
    min_area = max(4, int(round(MIN_AREA_FRACTION * h * w)))
    found = []
    for idx, sl in enumerate(ndimage.find_objects(labels), start=1):
        if sl is None:
            continue
        region = labels[sl] == idx
        if region.sum() < min_area:
            continue
        score = float(np.clip(chroma[sl][region].mean(), 0.0, 1.0))
        ys, xs = sl
        found.append((score, BoundingBox(xs.start, ys.start, xs.stop, ys.stop)))
    found.sort(key=lambda t: -t[0])
    return DetectionResult([b for _, b in found], [s for s, _ in found])
