"""Generator stack: encoder, grouped content generator, attention generator, heads.

The translated image is a per-pixel convex combination of ``n`` generated content
maps and the input itself, weighted by ``n + 1`` softmax attention masks; the
last mask is the background mask that lets input pixels through unchanged.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from ._validation import (ConfigurationError, InvariantViolation, ShapeError, check_divisible,
                          check_image)

MASK_SUM_TOL = 1e-4


@dataclass
class GeneratorConfig:
    n_content: int = 9
    base_width: int = 64
    num_res_blocks: int = 9
    num_stages: int = 4
    embed_dim: int = 128
    patch_embed_dim: int = 256
    disc_width: int = 64

    def __post_init__(self):
        if self.n_content < 1:
            raise ConfigurationError(f"n_content must be >= 1, got {self.n_content}")
        if self.num_stages != 4:
            raise ConfigurationError(f"num_stages must be 4, got {self.num_stages}")
        if min(self.base_width, self.embed_dim, self.patch_embed_dim, self.disc_width) < 1:
            raise ConfigurationError("widths and embedding sizes must be positive")
        if self.num_res_blocks < 1:
            raise ConfigurationError("num_res_blocks must be >= 1")

    @property
    def n_masks(self) -> int:
        return self.n_content + 1

    @property
    def feature_channels(self) -> int:
        return 4 * self.base_width

    def grouped_width(self, width: int) -> int:
        """Smallest multiple of ``n_content`` that is >= ``width``."""
        return self.n_content * math.ceil(width / self.n_content)

    @property
    def attention_stage_channels(self) -> list[int]:
        w = self.base_width
        return [4 * w, 2 * w, w, self.n_masks]

    @property
    def nce_stage_channels(self) -> list[int]:
        w = self.base_width
        return [3, w, 2 * w, 4 * w, 4 * w]


def init_weights(module: nn.Module, gain: float = 0.02) -> None:
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
            nn.init.normal_(m.weight, 0.0, gain)
            if m.bias is not None:
                nn.init.zeros_(m.bias)


def _norm(c: int) -> nn.Module:
    return nn.InstanceNorm2d(c, eps=1e-5, affine=False)


class ResnetBlock(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.branch = nn.Sequential(
            nn.Conv2d(dim, dim, 3, padding=1), _norm(dim), nn.ReLU(True),
            nn.Conv2d(dim, dim, 3, padding=1), _norm(dim),
        )

    def forward(self, x):
        return x + self.branch(x)


class Encoder(nn.Module):
    """Feature extractor: 7x7 stem, two stride-2 convs, residual blocks (spatial /4)."""

    def __init__(self, cfg: GeneratorConfig):
        super().__init__()
        w = cfg.base_width
        self.stem = nn.Sequential(nn.ReflectionPad2d(3), nn.Conv2d(3, w, 7), _norm(w), nn.ReLU(True))
        self.down1 = nn.Sequential(nn.Conv2d(w, 2 * w, 3, 2, 1), _norm(2 * w), nn.ReLU(True))
        self.down2 = nn.Sequential(nn.Conv2d(2 * w, 4 * w, 3, 2, 1), _norm(4 * w), nn.ReLU(True))
        self.blocks = nn.ModuleList(ResnetBlock(4 * w) for _ in range(cfg.num_res_blocks))
        self.nce_block = (cfg.num_res_blocks - 1) // 2

    def forward(self, x: torch.Tensor, nce: bool = False):
        """Return ``(m_E, stages)``.

        ``stages`` holds the five patch-contrast taps (input, stem, down1, down2,
        middle residual block) when ``nce`` is set, otherwise just the down2 output.
        """
        check_image(x, "encoder input", batched=True)
        check_divisible(x, 4, "encoder input")
        s1 = self.stem(x)
        s2 = self.down1(s1)
        h = s3 = self.down2(s2)
        mid = None
        for i, block in enumerate(self.blocks):
            h = block(h)
            if i == self.nce_block:
                mid = h
        stages = [x, s1, s2, s3, mid] if nce else [s3]
        return h, stages


class ContentGenerator(nn.Module):
    """Decodes ``n`` tanh-bounded RGB content maps.

    Every layer after the first is grouped ``n`` ways, so content map ``t`` only
    depends on filter group ``t`` of each layer.
    """

    def __init__(self, cfg: GeneratorConfig):
        super().__init__()
        n, w = cfg.n_content, cfg.base_width
        g1, g2 = cfg.grouped_width(2 * w), cfg.grouped_width(w)
        self.n = n
        self.in_channels = 4 * w
        self.up1 = nn.Sequential(nn.ConvTranspose2d(4 * w, g1, 7, 2, 3, output_padding=1),
                                 _norm(g1), nn.ReLU(True))
        self.up2 = nn.Sequential(nn.ConvTranspose2d(g1, g2, 3, 2, 1, output_padding=1, groups=n),
                                 _norm(g2), nn.ReLU(True))
        self.head = nn.Sequential(nn.ReflectionPad2d(3), nn.Conv2d(g2, 3 * n, 7, groups=n), nn.Tanh())

    def forward(self, m_e: torch.Tensor) -> torch.Tensor:
        if m_e.shape[1] != self.in_channels:
            raise ConfigurationError(
                f"content generator expects {self.in_channels} feature channels, got {m_e.shape[1]}")
        out = self.head(self.up2(self.up1(m_e)))
        n_img, _, h, w = out.shape
        return out.view(n_img, self.n, 3, h, w)


class AttentionGenerator(nn.Module):
    """Decodes ``n + 1`` attention logits; softmax over the mask axis gives the masks."""

    def __init__(self, cfg: GeneratorConfig):
        super().__init__()
        w = cfg.base_width
        self.in_channels = 4 * w
        self.up1 = nn.Sequential(nn.ConvTranspose2d(4 * w, 2 * w, 7, 2, 3, output_padding=1),
                                 _norm(2 * w), nn.ReLU(True))
        self.up2 = nn.Sequential(nn.ConvTranspose2d(2 * w, w, 3, 2, 1, output_padding=1),
                                 _norm(w), nn.ReLU(True))
        self.head = nn.Sequential(nn.ReflectionPad2d(3), nn.Conv2d(w, cfg.n_masks, 7))

    def forward(self, m_e: torch.Tensor):
        if m_e.shape[1] != self.in_channels:
            raise ConfigurationError(
                f"attention generator expects {self.in_channels} feature channels, got {m_e.shape[1]}")
        u1 = self.up1(m_e)
        u2 = self.up2(u1)
        logits = self.head(u2)
        return torch.softmax(logits, dim=1), logits, [m_e, u1, u2, logits]


class SaliencyHead(nn.Module):
    """Two 7x7 filters on the pre-softmax attention logits, 2-way softmax per pixel."""

    def __init__(self, n_masks: int):
        super().__init__()
        self.n_masks = n_masks
        self.conv = nn.Sequential(nn.ReflectionPad2d(3), nn.Conv2d(n_masks, 2, 7))

    def forward(self, logits: torch.Tensor) -> torch.Tensor:
        if logits.ndim != 4 or logits.shape[1] != self.n_masks:
            raise ShapeError(f"saliency head expects N x {self.n_masks} x H x W logits, "
                             f"got {tuple(logits.shape)}")
        return torch.softmax(self.conv(logits), dim=1)[:, 1:2]


class ProjectionHead(nn.Module):
    """Global average pool, 2-layer MLP, L2 normalization."""

    def __init__(self, in_dim: int, out_dim: int, hidden: int | None = None):
        super().__init__()
        hidden = hidden or out_dim
        self.mlp = nn.Sequential(nn.Linear(in_dim, hidden), nn.ReLU(True), nn.Linear(hidden, out_dim))

    def forward(self, feat: torch.Tensor) -> torch.Tensor:
        pooled = feat.mean(dim=(2, 3)) if feat.ndim == 4 else feat
        return F.normalize(self.mlp(pooled), dim=-1)


class PatchSampleHead(nn.Module):
    """Per-location MLP projection for the patchwise contrastive loss."""

    def __init__(self, in_dim: int, out_dim: int):
        super().__init__()
        self.mlp = nn.Sequential(nn.Linear(in_dim, out_dim), nn.ReLU(True), nn.Linear(out_dim, out_dim))

    def forward(self, feat: torch.Tensor, ids: torch.Tensor) -> torch.Tensor:
        """``feat`` is N x C x H x W; ``ids`` indexes flattened locations. Returns N x S x D."""
        flat = feat.flatten(2).transpose(1, 2)  # N x HW x C
        picked = flat[:, ids]
        return F.normalize(self.mlp(picked), dim=-1)


class LocalGlobalHeads(nn.Module):
    def __init__(self, cfg: GeneratorConfig):
        super().__init__()
        chans = cfg.attention_stage_channels
        self.global_heads = nn.ModuleList(ProjectionHead(c, cfg.embed_dim) for c in chans)
        self.local_heads = nn.ModuleList(ProjectionHead(c, cfg.embed_dim) for c in chans)
        # optional extra stage on the encoder's last stride-2 layer
        self.global_extra = ProjectionHead(4 * cfg.base_width, cfg.embed_dim)
        self.local_extra = ProjectionHead(4 * cfg.base_width, cfg.embed_dim)

    def heads(self, scope: str, extra: bool = False) -> list[nn.Module]:
        if scope == "global":
            hs = list(self.global_heads) + ([self.global_extra] if extra else [])
        elif scope == "local":
            hs = list(self.local_heads) + ([self.local_extra] if extra else [])
        else:
            raise ConfigurationError(f"scope must be 'local' or 'global', got {scope!r}")
        return hs


class Discriminator(nn.Module):
    """PatchGAN: c64-s2-k4, c128-s2-k4, c256-s2-k4, c512-s1-k4, then a 1-channel map -> sigmoid."""

    def __init__(self, width: int = 64):
        super().__init__()
        w = width
        self.net = nn.Sequential(
            nn.Conv2d(3, w, 4, 2, 1), nn.LeakyReLU(0.2, True),
            nn.Conv2d(w, 2 * w, 4, 2, 1), _norm(2 * w), nn.LeakyReLU(0.2, True),
            nn.Conv2d(2 * w, 4 * w, 4, 2, 1), _norm(4 * w), nn.LeakyReLU(0.2, True),
            nn.Conv2d(4 * w, 8 * w, 4, 1, 1), _norm(8 * w), nn.LeakyReLU(0.2, True),
            nn.Conv2d(8 * w, 1, 4, 1, 1),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.net(x))


class TranslationModel(nn.Module):
    """All generator-side parameters: E_B, G_C, G_A, saliency conv and projection heads."""

    def __init__(self, cfg: GeneratorConfig | None = None):
        super().__init__()
        self.cfg = cfg = cfg or GeneratorConfig()
        self.encoder = Encoder(cfg)
        self.content = ContentGenerator(cfg)
        self.attention = AttentionGenerator(cfg)
        self.saliency = SaliencyHead(cfg.n_masks)
        self.lg_heads = LocalGlobalHeads(cfg)
        self.nce_heads = nn.ModuleList(PatchSampleHead(c, cfg.patch_embed_dim)
                                       for c in cfg.nce_stage_channels)
        init_weights(self)

    def contrastive_branch(self) -> nn.ModuleDict:
        """The sub-networks that get a momentum copy: encoder, attention generator, heads."""
        return nn.ModuleDict({"encoder": self.encoder, "attention": self.attention,
                              "heads": self.lg_heads})

    def forward(self, x: torch.Tensor):
        return translate(x, self)


# ---------------------------------------------------------------- functional surface

def _as_batch(x: torch.Tensor) -> tuple[torch.Tensor, bool]:
    return (x[None], True) if x.ndim == 3 else (x, False)


def encode(x: torch.Tensor, model: TranslationModel, nce: bool = False):
    xb, single = _as_batch(x)
    m_e, stages = model.encoder(xb, nce=nce)
    if single:
        return m_e[0], [s[0] for s in stages]
    return m_e, stages


def generate_content(m_e: torch.Tensor, model: TranslationModel) -> torch.Tensor:
    """``n x 3 x H x W`` content maps (leading batch axis kept if given)."""
    mb, single = _as_batch(m_e)
    out = model.content(mb)
    return out[0] if single else out


def generate_attention(m_e: torch.Tensor, model: TranslationModel):
    """Return ``(masks, logits, stage_features)``."""
    mb, single = _as_batch(m_e)
    masks, logits, stages = model.attention(mb)
    if single:
        return masks[0], logits[0], [s[0] for s in stages]
    return masks, logits, stages


def compose(x: torch.Tensor, contents: torch.Tensor, masks: torch.Tensor,
            check: bool = True) -> torch.Tensor:
    """Mix content maps and the input with the attention masks.

    ``x``: [N,]3,H,W; ``contents``: [N,]n,3,H,W; ``masks``: [N,]n+1,H,W.
    """
    single = x.ndim == 3
    if single:
        x, contents, masks = x[None], contents[None], masks[None]
    n = contents.shape[1]
    if contents.shape[2:] != x.shape[1:] or contents.shape[0] != x.shape[0]:
        raise ShapeError(f"content maps {tuple(contents.shape)} do not match input {tuple(x.shape)}")
    if masks.shape != (x.shape[0], n + 1, *x.shape[2:]):
        raise ShapeError(f"masks {tuple(masks.shape)} do not match {n} content maps and input "
                         f"{tuple(x.shape)}")
    if check:
        with torch.no_grad():
            if (masks < -MASK_SUM_TOL).any() or \
                    (masks.sum(1) - 1).abs().max() > MASK_SUM_TOL:
                raise InvariantViolation("attention masks must be nonnegative and sum to 1 per pixel")
    out = (contents * masks[:, :n, None]).sum(1) + x * masks[:, n:, :]
    return out[0] if single else out


def translate(x: torch.Tensor, model: TranslationModel):
    """Translate ``x``; returns ``(y_hat, masks)`` from a single shared encoder pass."""
    m_e, _ = encode(x, model)
    contents = generate_content(m_e, model)
    masks, _, _ = generate_attention(m_e, model)
    return compose(x, contents, masks), masks


def project_features(stage_features: list[torch.Tensor], heads: LocalGlobalHeads, scope: str,
                     extra: bool = False) -> list[torch.Tensor]:
    """One unit-norm embedding per stage (batched inputs give N x D per stage)."""
    hs = heads.heads(scope, extra)
    if len(stage_features) != len(hs):
        raise ConfigurationError(f"expected {len(hs)} stage features, got {len(stage_features)}")
    out = []
    for f, head in zip(stage_features, hs):
        single = f.ndim == 3
        e = head(f[None] if single else f)
        out.append(e[0] if single else e)
    return out


def predict_saliency(logits: torch.Tensor, model: TranslationModel) -> torch.Tensor:
    lb, single = _as_batch(logits)
    m = model.saliency(lb)
    return m[0] if single else m
