"""scikit-learn style wrappers: an unpaired translator (fit/transform) and the proxy detector."""
from __future__ import annotations

import numpy as np
import torch
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import ConfigurationError, ShapeError, check_divisible
from .data import AugmentationConfig, BoundingBox
from .detection import DetectionResult, proxy_detect
from .evaluation import translate_images
from .local_global import LocalGlobalConfig
from .metrics import average_precision
from .networks import GeneratorConfig, encode, generate_attention
from .trainer import TrainConfig, TrainingState, train_step


def check_images(X, name: str = "X") -> torch.Tensor:
    """Coerce an image batch to a float32 N x 3 x H x W tensor in [-1, 1]."""
    if isinstance(X, (list, tuple)):
        X = torch.stack([torch.as_tensor(np.asarray(x)) if not isinstance(x, torch.Tensor) else x
                         for x in X])
    t = torch.as_tensor(X).float() if not isinstance(X, torch.Tensor) else X.float()
    if t.ndim == 3:
        t = t[None]
    if t.ndim != 4 or t.shape[1] != 3:
        raise ShapeError(f"{name} must be N x 3 x H x W, got {tuple(t.shape)}")
    if len(t) == 0:
        raise ShapeError(f"{name} is empty")
    if not torch.isfinite(t).all():
        raise ValueError(f"{name} contains non-finite values")
    if t.min() < -1 - 1e-6 or t.max() > 1 + 1e-6:
        raise ValueError(f"{name} values must lie in [-1, 1]")
    check_divisible(t, 4, name)
    return t


class AttentionTranslator(BaseEstimator, TransformerMixin):
    """Unpaired attention-guided translator from domain ``X`` to domain ``y``.

    ``fit(X, y)`` takes unaligned image sets: ``X`` from the source domain and
    ``y`` from the target domain. ``transform`` translates source images.
    """

    def __init__(self, mode="unsupervised", n_content=9, base_width=64, num_res_blocks=9,
                 embed_dim=128, lr=1e-5, max_iters=1000, seed=0, tau=0.07,
                 stage_weights=(0.1, 0.4, 0.7, 1.0), m_coeff=0.999, bank_capacity=4096,
                 num_patches=256):
        self.mode = mode
        self.n_content = n_content
        self.base_width = base_width
        self.num_res_blocks = num_res_blocks
        self.embed_dim = embed_dim
        self.lr = lr
        self.max_iters = max_iters
        self.seed = seed
        self.tau = tau
        self.stage_weights = stage_weights
        self.m_coeff = m_coeff
        self.bank_capacity = bank_capacity
        self.num_patches = num_patches

    def _configs(self):
        gen = GeneratorConfig(n_content=self.n_content, base_width=self.base_width,
                              num_res_blocks=self.num_res_blocks, embed_dim=self.embed_dim,
                              disc_width=self.base_width)
        train = TrainConfig(mode=self.mode, lr=self.lr, max_iters=self.max_iters, seed=self.seed,
                            tau=self.tau, num_patches=self.num_patches)
        lg = LocalGlobalConfig(stage_weights=tuple(self.stage_weights), tau=self.tau,
                               bank_capacity=self.bank_capacity, m_coeff=self.m_coeff,
                               augment=AugmentationConfig())
        return train, gen, lg

    def fit(self, X, y, boxes=None):
        """Train for ``max_iters`` steps on independently shuffled source/target images.

        ``boxes`` (one list of BoundingBox per source image) is required in supervised mode.
        """
        X = check_images(X, "X")
        Y = check_images(y, "y")
        if self.mode == "supervised" and boxes is None:
            raise ConfigurationError("supervised mode needs boxes for the source images")
        train_cfg, gen_cfg, lg_cfg = self._configs()
        state = TrainingState(train_cfg, gen_cfg, lg_cfg)
        rng = np.random.default_rng([self.seed, 2])
        order_x, order_y = [], []
        self.loss_history_ = []
        for _ in range(self.max_iters):
            if not order_x:
                order_x = list(rng.permutation(len(X)))
            if not order_y:
                order_y = list(rng.permutation(len(Y)))
            i, j = order_x.pop(), order_y.pop()
            bx = boxes[i] if boxes is not None else None
            state, report = train_step((X[i], Y[j], bx), state, train_cfg)
            self.loss_history_.append(report.scalars())
        self.state_ = state
        self.n_iter_ = state.iteration
        return self

    def transform(self, X):
        check_is_fitted(self, "state_")
        X = check_images(X)
        return torch.stack(translate_images(self.state_.model, X, self.mode))

    def attention_masks(self, X):
        """(n + 1) x H x W softmax masks per image; the last one is the background mask."""
        check_is_fitted(self, "state_")
        if self.mode == "no_attention":
            raise ConfigurationError("the no_attention ablation has no attention masks")
        X = check_images(X)
        with torch.no_grad():
            m_e, _ = encode(X, self.state_.model)
            masks, _, _ = generate_attention(m_e, self.state_.model)
        return masks


class ProxyDetector(BaseEstimator):
    """Frozen chroma-threshold detector; ``fit`` only validates input and learns nothing."""

    def fit(self, X=None, y=None):
        if X is not None:
            check_images(X)
        self.is_fitted_ = True
        return self

    def predict(self, X) -> list[DetectionResult]:
        X = check_images(X)
        return [proxy_detect(x) for x in X]

    def score(self, X, y: list[list[BoundingBox]], iou_threshold: float = 0.5) -> float:
        """Class-agnostic AP of the detections against ground-truth boxes ``y``."""
        dets = self.predict(X)
        keys = [str(i) for i in range(len(dets))]
        return average_precision(dict(zip(keys, dets)), dict(zip(keys, y)), iou_threshold)
