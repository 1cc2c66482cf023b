"""Evaluation pipelines over a trained model and a dataset split."""
from __future__ import annotations

from typing import Sequence

import numpy as np
import torch

from .data import BoundingBox, DatasetSpec, UnpairedImageFolder, rasterize_object_mask
from .detection import proxy_detect
from .metrics import (FeatureExtractorSpec, average_precision, extract_features, frechet_distance,
                      instance_region_metrics, kernel_distance)
from .networks import TranslationModel, compose, encode, generate_attention, generate_content
from .trainer import crop_to_multiple


@torch.no_grad()
def translate_images(model: TranslationModel, images: Sequence[torch.Tensor],
                     mode: str = "unsupervised") -> list[torch.Tensor]:
    """Translate each image; ``no_attention`` models decode content map 1 directly."""
    model.eval()
    out = []
    for x in images:
        m_e, _ = encode(x, model)
        contents = generate_content(m_e, model)
        if mode == "no_attention":
            out.append(contents[0])
        else:
            masks, _, _ = generate_attention(m_e, model)
            out.append(compose(x, contents, masks))
    return out


def load_split(spec: DatasetSpec):
    """Images and boxes of both domains, cropped to multiples of 4."""
    folder = UnpairedImageFolder(spec)
    result = {}
    for dom, paths in (("A", folder.paths_a), ("B", folder.paths_b)):
        imgs, boxes, keys = [], [], []
        for p in paths:
            img, bx = crop_to_multiple(folder.image(p), folder.boxes(p))
            imgs.append(img)
            boxes.append(bx)
            keys.append(folder.key(p))
        result[dom] = (imgs, boxes, keys)
    return result


def detection_ap(images: Sequence[torch.Tensor], boxes: Sequence[Sequence[BoundingBox]],
                 keys: Sequence[str] | None = None, iou_threshold: float = 0.5) -> float:
    keys = keys or [str(i) for i in range(len(images))]
    dets = {k: proxy_detect(img) for k, img in zip(keys, images)}
    gts = {k: list(b or []) for k, b in zip(keys, boxes)}
    return average_precision(dets, gts, iou_threshold)


def evaluate_detection(model: TranslationModel, split: dict, mode: str = "unsupervised") -> dict:
    imgs_a, boxes_a, keys_a = split["A"]
    imgs_b, boxes_b, keys_b = split["B"]
    translated = translate_images(model, imgs_a, mode)
    raw = detection_ap(imgs_a, boxes_a, keys_a)
    ours = detection_ap(translated, boxes_a, keys_a)
    return {
        "ap_source_oracle": detection_ap(imgs_b, boxes_b, keys_b),
        "ap_raw_target": raw,
        "ap_translated": ours,
        "delta": ours - raw,
    }


def evaluate_distribution(model: TranslationModel, split: dict, mode: str = "unsupervised",
                          extractor: FeatureExtractorSpec | None = None, kid_subset_size: int = 100,
                          kid_num_subsets: int = 100) -> dict:
    imgs_a, boxes_a, _ = split["A"]
    imgs_b, boxes_b, _ = split["B"]
    translated = translate_images(model, imgs_a, mode)
    fb = extract_features(imgs_b, extractor)
    ft = extract_features(translated, extractor)
    fa = extract_features(imgs_a, extractor)
    subset = min(kid_subset_size, len(fb), len(ft))
    fid_inst, kid_inst = instance_region_metrics(translated, imgs_b, boxes_a, boxes_b, extractor,
                                                 subset_size=kid_subset_size, num_subsets=kid_num_subsets)
    return {
        "fid": frechet_distance(ft, fb),
        "kid": kernel_distance(ft, fb, subset, kid_num_subsets),
        "fid_inst": fid_inst,
        "kid_inst": kid_inst,
        "fid_raw": frechet_distance(fa, fb),
        "kid_raw": kernel_distance(fa, fb, subset, kid_num_subsets),
    }


@torch.no_grad()
def foreground_mass_ratio(model: TranslationModel, images: Sequence[torch.Tensor],
                          boxes: Sequence[Sequence[BoundingBox]]) -> tuple[float, float]:
    """Mean summed foreground-mask mass inside vs. outside ground-truth boxes."""
    model.eval()
    inside, outside = [], []
    for x, bx in zip(images, boxes):
        if not bx:
            continue
        m_e, _ = encode(x, model)
        masks, _, _ = generate_attention(m_e, model)
        fg = masks[:-1].sum(0)
        k = rasterize_object_mask(bx, *x.shape[-2:])[0].bool()
        inside.append(fg[k].numpy())
        outside.append(fg[~k].numpy())
    return float(np.concatenate(inside).mean()), float(np.concatenate(outside).mean())
