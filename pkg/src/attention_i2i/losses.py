"""Loss functions: InfoNCE, patchwise NCE, adversarial, saliency and the generator total."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch

from ._validation import ConfigurationError, ShapeError, check_same_shape

logger = logging.getLogger(__name__)

EPS = 1e-7

MODE_COMPONENTS = {
    "unsupervised": ("adv_g", "nce_patch", "l_ga"),
    "supervised": ("adv_g", "nce_patch", "saliency"),
    "no_ga": ("adv_g", "nce_patch"),
    "no_attention": ("adv_g", "nce_patch"),
}
COMPONENT_WEIGHT = {"adv_g": "adv", "nce_patch": "nce", "l_ga": "ga", "saliency": "ga"}


@dataclass
class InfoNCEConfig:
    tau: float = 0.07

    def __post_init__(self):
        if not (math.isfinite(self.tau) and self.tau > 0):
            raise ConfigurationError(f"tau must be positive and finite, got {self.tau}")


class ClampCounter:
    """Counts probability scores that had to be clamped into [eps, 1 - eps]."""

    def __init__(self):
        self.count = 0

    def clamp(self, p: torch.Tensor) -> torch.Tensor:
        with torch.no_grad():
            bad = int(((p <= 0) | (p >= 1)).sum())
        if bad:
            self.count += bad
            logger.debug("clamped %d out-of-range score(s)", bad)
        return p.clamp(EPS, 1 - EPS)


clamp_counter = ClampCounter()


def _tau(cfg: InfoNCEConfig | float | None) -> float:
    if cfg is None:
        return InfoNCEConfig().tau
    if isinstance(cfg, InfoNCEConfig):
        return cfg.tau
    return InfoNCEConfig(float(cfg)).tau


def nce_from_logits(pos: torch.Tensor, neg: torch.Tensor | None) -> torch.Tensor:
    """-log softmax of the positive logit. ``pos``: (...), ``neg``: (..., K)."""
    if neg is None or neg.shape[-1] == 0:
        return torch.zeros_like(pos)
    logits = torch.cat([pos[..., None], neg], dim=-1)
    return torch.logsumexp(logits, dim=-1) - pos


def info_nce(q: torch.Tensor, k_pos: torch.Tensor, k_negs: torch.Tensor | None,
             cfg: InfoNCEConfig | float | None = None) -> torch.Tensor:
    """Contrastive loss of query ``q`` against its positive key and negative keys.

    Shapes: ``q`` and ``k_pos`` are (..., D); ``k_negs`` is (K, D) shared by every
    query or (..., K, D) per query. Returns the per-query loss with shape (...).
    """
    tau = _tau(cfg)
    if q.shape != k_pos.shape:
        raise ShapeError(f"query {tuple(q.shape)} and positive {tuple(k_pos.shape)} differ")
    pos = (q * k_pos).sum(-1) / tau
    if k_negs is None or k_negs.numel() == 0:
        return torch.zeros_like(pos)
    if k_negs.shape[-1] != q.shape[-1]:
        raise ShapeError(f"negative keys have dimension {k_negs.shape[-1]}, query has {q.shape[-1]}")
    if k_negs.ndim == 2:
        neg = q @ k_negs.T / tau
    else:
        neg = (q[..., None, :] * k_negs).sum(-1) / tau
    return nce_from_logits(pos, neg)


def sample_locations(n_locations: int, count: int, draw: np.random.Generator) -> torch.Tensor:
    if n_locations < 2:
        raise ConfigurationError(f"need at least 2 spatial locations per stage, got {n_locations}")
    return torch.from_numpy(draw.permutation(n_locations)[:min(count, n_locations)].copy())


def patch_nce_from_features(feats_q: list[torch.Tensor], feats_k: list[torch.Tensor], heads,
                            cfg: InfoNCEConfig | float | None, draw: np.random.Generator,
                            num_patches: int = 256, detach_keys: bool = True) -> torch.Tensor:
    """Mean location-level InfoNCE over stages; negatives come from the same image."""
    tau = _tau(cfg)
    total, count = 0.0, 0
    for fq, fk, head in zip(feats_q, feats_k, heads):
        ids = sample_locations(fq.shape[-2] * fq.shape[-1], num_patches, draw)
        q = head(fq, ids)  # N x S x D
        k = head(fk, ids)
        if detach_keys:
            k = k.detach()
        logits = torch.bmm(q, k.transpose(1, 2)) / tau  # N x S x S
        s = logits.shape[-1]
        pos = logits.diagonal(dim1=1, dim2=2)
        off = ~torch.eye(s, dtype=torch.bool)
        neg = logits[:, off].view(logits.shape[0], s, s - 1)
        total = total + nce_from_logits(pos, neg).mean()
        count += 1
    return total / count


def patch_nce_loss(x: torch.Tensor, y_hat: torch.Tensor, model, cfg: InfoNCEConfig | float | None,
                   draw: np.random.Generator, num_patches: int = 256) -> torch.Tensor:
    """Structure-consistency loss between input ``x`` and its translation ``y_hat``.

    Queries are encoder features of ``y_hat``, positives the features of ``x`` at the
    same location, negatives the other sampled locations of ``x``.
    """
    check_same_shape(x, y_hat, "patch NCE inputs")
    xb = x if x.ndim == 4 else x[None]
    yb = y_hat if y_hat.ndim == 4 else y_hat[None]
    _, feats_q = model.encoder(yb, nce=True)
    _, feats_k = model.encoder(xb, nce=True)
    return patch_nce_from_features(feats_q, feats_k, model.nce_heads, cfg, draw, num_patches)


def adversarial_loss_d(real_scores: torch.Tensor, fake_scores: torch.Tensor) -> torch.Tensor:
    """Discriminator cross-entropy.

    ``fake_scores`` must be D applied to a detached translation so that only D is updated.
    """
    real = clamp_counter.clamp(real_scores)
    fake = clamp_counter.clamp(fake_scores)
    return -torch.log(real).mean() - torch.log1p(-fake).mean()


def adversarial_loss_g(fake_scores: torch.Tensor, saturating: bool = False) -> torch.Tensor:
    fake = clamp_counter.clamp(fake_scores)
    if saturating:
        return torch.log1p(-fake).mean()
    return -torch.log(fake).mean()


def saliency_loss(m_x: torch.Tensor, k_x: torch.Tensor) -> torch.Tensor:
    """Pixel-mean binary cross-entropy between predicted and rasterized object masks."""
    check_same_shape(m_x, k_x, "saliency prediction and object mask")
    m = m_x.clamp(EPS, 1 - EPS)
    return -(k_x * torch.log(m) + (1 - k_x) * torch.log1p(-m)).mean()


@dataclass
class LossReport:
    total: torch.Tensor
    components: dict[str, torch.Tensor]
    weights: dict[str, float] = field(default_factory=dict)
    adv_d: float | None = None

    def scalars(self) -> dict[str, float]:
        row = {k: float(torch.as_tensor(v).detach()) for k, v in self.components.items()}
        row["total"] = float(torch.as_tensor(self.total).detach())
        if self.adv_d is not None:
            row["adv_d"] = self.adv_d
        return row


def generator_objective(parts: dict[str, torch.Tensor], mode: str,
                        weights: dict[str, float] | None = None) -> LossReport:
    """Weighted sum of the components required by ``mode``; unit weights by default."""
    if mode not in MODE_COMPONENTS:
        raise ConfigurationError(f"unknown mode {mode!r}; expected one of {sorted(MODE_COMPONENTS)}")
    expected = set(MODE_COMPONENTS[mode])
    got = {k for k, v in parts.items() if v is not None}
    if got != expected:
        raise ConfigurationError(
            f"mode {mode!r} needs components {sorted(expected)}, got {sorted(got)}")
    w = {"adv": 1.0, "nce": 1.0, "ga": 1.0, **(weights or {})}
    comps = {k: parts[k] for k in MODE_COMPONENTS[mode]}
    used = {k: float(w[COMPONENT_WEIGHT[k]]) for k in comps}
    total = sum(used[k] * v for k, v in comps.items())
    for k, v in comps.items():
        if not torch.isfinite(torch.as_tensor(v)).all():
            raise FloatingPointError(f"non-finite loss component: {k}")
    return LossReport(total, comps, used)
