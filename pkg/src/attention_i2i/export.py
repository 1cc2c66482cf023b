"""Attention-mask panels and labeled region features for external visualization."""
from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np
import torch
from PIL import Image

from .data import BoundingBox, to_uint8
from .networks import TranslationModel, compose, encode, generate_attention, generate_content

NUM_SHOWN_MASKS = 3
FEATURE_STAGE = 1  # first upsampling layer of the attention generator, H/2 x W/2


class RegionFeatures(NamedTuple):
    labels: np.ndarray  # 1 = object, 0 = background
    features: np.ndarray
    locations: np.ndarray  # (image, row, col) on the feature grid
    available: int


def _mask_rgb(mask: torch.Tensor) -> np.ndarray:
    gray = (mask.detach().clamp(0, 1) * 255.0).round().to(torch.uint8).numpy()
    return np.repeat(gray[..., None], 3, axis=-1)


@torch.no_grad()
def export_attention_masks(model: TranslationModel, images: Sequence[torch.Tensor], out_dir: Path) -> list[Path]:
    """Write one panel per image: input | 3 strongest foreground masks | translation.

    Also writes each mask as a grayscale PNG and ``masks.json`` with the chosen channels.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    model.eval()
    n = model.cfg.n_content
    sidecar, panels = {}, []
    for i, x in enumerate(images):
        m_e, _ = encode(x, model)
        masks, _, _ = generate_attention(m_e, model)
        y = compose(x, generate_content(m_e, model), masks)
        means = masks[:n].mean(dim=(1, 2))
        # stable ordering so ties (e.g. uniform masks) resolve to the lowest channel
        order = sorted(range(n), key=lambda t: (-round(float(means[t]), 6), t))[:NUM_SHOWN_MASKS]
        tiles = [to_uint8(x)] + [_mask_rgb(masks[t]) for t in order] + [to_uint8(y)]
        name = f"{i:04d}"
        for t in order:
            Image.fromarray(_mask_rgb(masks[t])[..., 0], mode="L").save(out_dir / f"{name}_mask{t}.png")
        panel = out_dir / f"{name}_panel.png"
        Image.fromarray(np.concatenate(tiles, axis=1), mode="RGB").save(panel)
        panels.append(panel)
        sidecar[name] = {"channels": order, "mean_activation": [round(float(means[t]), 6) for t in order]}
    (out_dir / "masks.json").write_text(json.dumps(sidecar, indent=1, sort_keys=True) + "\n")
    return panels


def cell_labels(boxes: Sequence[BoundingBox], height: int, width: int, feat_h: int, feat_w: int) -> np.ndarray:
    """1 where the image-space center of a feature cell falls inside any box."""
    sy, sx = height / feat_h, width / feat_w
    cy = (np.arange(feat_h) + 0.5) * sy
    cx = (np.arange(feat_w) + 0.5) * sx
    lab = np.zeros((feat_h, feat_w), np.int64)
    for b in boxes:
        rows = (cy >= b.y_min) & (cy < b.y_max)
        cols = (cx >= b.x_min) & (cx < b.x_max)
        lab[np.ix_(rows, cols)] = 1
    return lab


@torch.no_grad()
def export_region_features(model: TranslationModel, images: Sequence[torch.Tensor],
                           boxes: Sequence[Sequence[BoundingBox]], out: Path, sample_count: int = 1000,
                           seed: int = 0, stage: int = FEATURE_STAGE) -> RegionFeatures:
    """Sample spatial attention-generator features labeled object (1) / background (0).

    Writes a CSV ``label,image,row,col,f0..``; fewer available locations than
    ``sample_count`` means every location is written.
    """
    model.eval()
    feats, labels, where = [], [], []
    for i, (x, bxs) in enumerate(zip(images, boxes)):
        m_e, _ = encode(x, model)
        _, _, stages = generate_attention(m_e, model)
        f = stages[stage]
        fh, fw = f.shape[-2:]
        lab = cell_labels(bxs or [], x.shape[-2], x.shape[-1], fh, fw)
        feats.append(f.flatten(1).T.numpy())
        labels.append(lab.ravel())
        rr, cc = np.divmod(np.arange(fh * fw), fw)
        where.append(np.stack([np.full(fh * fw, i), rr, cc], axis=1))
    feats = np.concatenate(feats)
    labels = np.concatenate(labels)
    where = np.concatenate(where)
    available = len(labels)
    rng = np.random.default_rng(seed)
    pick = np.sort(rng.choice(available, min(sample_count, available), replace=False))

    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["label", "image", "row", "col"] + [f"f{k}" for k in range(feats.shape[1])])
        for j in pick:
            writer.writerow(["object" if labels[j] else "background", *where[j].tolist(),
                             *(f"{v:.6g}" for v in feats[j])])
    return RegionFeatures(labels[pick], feats[pick], where[pick], available)
