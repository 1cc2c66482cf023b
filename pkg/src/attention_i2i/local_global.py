"""Local-global contrastive self-supervision for the attention generator.

Two augmented views of an image and a shuffled 16-patch grid of each view go
through the online branch (encoder -> attention generator -> projection heads)
and through its momentum copy. At every attention stage the online embeddings
are contrasted against momentum embeddings of the other view (global-global,
local-global, local-local) with negatives from per-stage memory banks.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from ._validation import ConfigurationError, InvariantViolation, WarmupSignal
from .data import AugmentationConfig, NUM_PATCHES, make_local_patches
from .losses import info_nce
from .networks import project_features

NORM_TOL = 1e-3


@dataclass
class LocalGlobalConfig:
    stage_weights: tuple[float, ...] = (0.1, 0.4, 0.7, 1.0)
    tau: float = 0.07
    bank_capacity: int = 4096
    m_coeff: float = 0.999
    extra_stage: bool = False
    extra_weight: float = 1.0
    augment: AugmentationConfig = field(default_factory=AugmentationConfig)

    def __post_init__(self):
        w = tuple(float(v) for v in self.stage_weights)
        if len(w) != 4:
            raise ConfigurationError(f"need 4 stage weights, got {len(w)}")
        if min(w) < 0 or any(b < a for a, b in zip(w, w[1:])):
            raise ConfigurationError(f"stage weights must be nonnegative and nondecreasing: {w}")
        if not 0.0 <= self.m_coeff <= 1.0:
            raise ConfigurationError(f"m_coeff must lie in [0, 1], got {self.m_coeff}")
        if self.tau <= 0:
            raise ConfigurationError(f"tau must be positive, got {self.tau}")
        if self.bank_capacity < 1:
            raise ConfigurationError("bank_capacity must be >= 1")
        if isinstance(self.augment, dict):
            self.augment = AugmentationConfig(**self.augment)
        self.stage_weights = w

    @property
    def weights(self) -> list[float]:
        return list(self.stage_weights) + ([self.extra_weight] if self.extra_stage else [])


# ---------------------------------------------------------------- momentum copies

class MomentumPair:
    """An online network and its EMA copy; the copy never receives gradients."""

    def __init__(self, online: nn.Module, m_coeff: float = 0.999, momentum: nn.Module | None = None):
        self.online = online
        self.momentum = momentum if momentum is not None else copy.deepcopy(online)
        self.m_coeff = float(m_coeff)
        for p in self.momentum.parameters():
            p.requires_grad_(False)
        _check_same_tree(self.online, self.momentum)


def _check_same_tree(a: nn.Module, b: nn.Module) -> None:
    pa, pb = dict(a.named_parameters()), dict(b.named_parameters())
    if pa.keys() != pb.keys():
        raise ConfigurationError("online and momentum networks have different parameter trees")
    for k in pa:
        if pa[k].shape != pb[k].shape:
            raise ConfigurationError(f"parameter {k} shape mismatch: {tuple(pa[k].shape)} vs "
                                     f"{tuple(pb[k].shape)}")


@torch.no_grad()
def ema_update(pair: MomentumPair) -> MomentumPair:
    """momentum <- m * momentum + (1 - m) * online, for every parameter."""
    _check_same_tree(pair.online, pair.momentum)
    m = pair.m_coeff
    for p_o, p_m in zip(pair.online.parameters(), pair.momentum.parameters()):
        p_m.mul_(m).add_(p_o.detach(), alpha=1.0 - m)
    return pair


# ---------------------------------------------------------------- memory bank

class MemoryBank:
    """Fixed-capacity FIFO of unit-norm keys stored in a ring buffer."""

    def __init__(self, capacity: int, dim: int):
        if capacity < 1:
            raise ConfigurationError("bank capacity must be >= 1")
        self.capacity = capacity
        self.dim = dim
        self.queue = torch.zeros(capacity, dim)
        self.size = 0
        self.cursor = 0

    def __len__(self) -> int:
        return self.size

    def keys(self) -> torch.Tensor:
        """Stored keys, oldest first."""
        if self.size < self.capacity:
            return self.queue[: self.size].clone()
        return torch.roll(self.queue, -self.cursor, dims=0).clone()

    def state_dict(self) -> dict:
        return {"queue": self.queue.clone(), "size": self.size, "cursor": self.cursor}

    def load_state_dict(self, state: dict) -> None:
        self.queue = state["queue"].clone().float()
        self.capacity, self.dim = self.queue.shape
        self.size, self.cursor = int(state["size"]), int(state["cursor"])


def bank_enqueue(bank: MemoryBank, keys: torch.Tensor) -> MemoryBank:
    """Append keys (K x D), evicting the oldest beyond capacity. Mutates and returns ``bank``."""
    keys = keys.detach().reshape(-1, bank.dim).float()
    norms = keys.norm(dim=1)
    if keys.numel() and (norms - 1).abs().max() > NORM_TOL:
        raise InvariantViolation("memory bank keys must be unit-normalized")
    for k in keys:
        bank.queue[bank.cursor] = k
        bank.cursor = (bank.cursor + 1) % bank.capacity
        bank.size = min(bank.size + 1, bank.capacity)
    return bank


def bank_negatives(bank: MemoryBank, count: int | None = None) -> torch.Tensor:
    """Up to ``count`` most recent keys, as constants. Raises WarmupSignal when empty."""
    if bank.size == 0:
        raise WarmupSignal("memory bank is empty")
    keys = bank.keys()
    if count is not None and count < len(keys):
        keys = keys[len(keys) - count:]
    return keys.detach()


class BankSet:
    """One memory bank per (scope, stage)."""

    def __init__(self, num_stages: int, capacity: int, dim: int):
        self.banks = {(scope, i): MemoryBank(capacity, dim)
                      for scope in ("global", "local") for i in range(num_stages)}

    def __getitem__(self, key: tuple[str, int]) -> MemoryBank:
        return self.banks[key]

    def is_empty(self) -> bool:
        return any(len(b) == 0 for b in self.banks.values())

    def snapshot(self) -> "BankSet":
        return copy.deepcopy(self)

    def state_dict(self) -> dict:
        return {f"{scope}{i}": b.state_dict() for (scope, i), b in self.banks.items()}

    def load_state_dict(self, state: dict) -> None:
        for (scope, i), b in self.banks.items():
            b.load_state_dict(state[f"{scope}{i}"])


# ---------------------------------------------------------------- loss

@dataclass
class ViewEmbeddings:
    """Per-stage embeddings. ``glob[i]``: 2 x D (one per view); ``local[i]``: 2 x 16 x D, cell order."""
    glob: list[torch.Tensor]
    local: list[torch.Tensor]


def branch_embeddings(branch: nn.Module, globals_: torch.Tensor, patches: torch.Tensor,
                      extra_stage: bool = False) -> ViewEmbeddings:
    """Forward 2 global views and 2 x 16 patches through encoder -> attention -> heads."""
    def run(images, scope):
        m_e, enc_stages = branch["encoder"](images)
        _, _, stages = branch["attention"](m_e)
        if extra_stage:
            stages = stages + [enc_stages[0]]
        return project_features(stages, branch["heads"], scope, extra=extra_stage)

    glob = run(globals_, "global")
    local = [e.view(2, NUM_PATCHES, -1) for e in run(patches.flatten(0, 1), "local")]
    return ViewEmbeddings(glob, local)


def make_views(x: torch.Tensor, cfg: LocalGlobalConfig, draw: np.random.Generator):
    """Two independently augmented global views and their patch grids (cell order)."""
    globals_, patches = [], []
    for _ in range(2):
        g, grid = make_local_patches(x, cfg.augment, draw)
        globals_.append(g)
        patches.append(grid.resized()[torch.from_numpy(grid.cell_order())])
    return torch.stack(globals_), torch.stack(patches)


def local_global_from_embeddings(online: ViewEmbeddings, momentum: ViewEmbeddings, banks: BankSet,
                                 cfg: LocalGlobalConfig) -> torch.Tensor:
    """Weighted sum over stages of the global-global, local-global and local-local terms."""
    total = 0.0
    for i, w in enumerate(cfg.weights):
        neg_g = bank_negatives(banks["global", i])
        neg_l = bank_negatives(banks["local", i])
        on_g, on_l = online.glob[i], online.local[i]
        mo_g, mo_l = momentum.glob[i].detach(), momentum.local[i].detach()
        other = torch.tensor([1, 0])
        gg = info_nce(on_g, mo_g[other], neg_g, cfg.tau).mean()
        gl = info_nce(on_l, mo_g[other][:, None].expand_as(on_l), neg_g, cfg.tau).mean()
        ll = info_nce(on_l, mo_l[other], neg_l, cfg.tau).mean()
        total = total + w * (gg + gl + ll)
    return torch.as_tensor(total)


def enqueue_momentum_keys(momentum: ViewEmbeddings, banks: BankSet) -> BankSet:
    for i, (g, l) in enumerate(zip(momentum.glob, momentum.local)):
        bank_enqueue(banks["global", i], g)
        bank_enqueue(banks["local", i], F.normalize(l.mean(1), dim=-1))
    return banks


def local_global_loss(x: torch.Tensor, pair: MomentumPair, banks: BankSet, cfg: LocalGlobalConfig,
                      draw: np.random.Generator):
    """Return ``(loss, banks)``; banks are updated in place with the new momentum keys.

    While any bank is still empty the loss is 0 (warmup) and only the keys are stored.
    """
    images = x if x.ndim == 4 else x[None]
    losses = []
    for img in images:
        globals_, patches = make_views(img, cfg, draw)
        online = branch_embeddings(pair.online, globals_, patches, cfg.extra_stage)
        with torch.no_grad():
            momentum = branch_embeddings(pair.momentum, globals_, patches, cfg.extra_stage)
        try:
            losses.append(local_global_from_embeddings(online, momentum, banks, cfg))
        except WarmupSignal:
            losses.append(torch.zeros(()))
        enqueue_momentum_keys(momentum, banks)
    return torch.stack(losses).mean(), banks
