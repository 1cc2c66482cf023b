import numpy as np
import pytest
import torch
from sklearn.base import clone

from attention_i2i._validation import ConfigurationError, ShapeError
from attention_i2i.data import BoundingBox
from attention_i2i.estimators import AttentionTranslator, ProxyDetector, check_images

SMALL = dict(n_content=3, base_width=4, num_res_blocks=1, embed_dim=8, max_iters=3, lr=2e-4,
             bank_capacity=16, num_patches=16)


def _images(n, size=32, seed=0):
    g = torch.Generator().manual_seed(seed)
    return torch.rand(n, 3, size, size, generator=g) * 2 - 1


class TestCheckImages:
    def test_accepts_lists_and_arrays(self):
        imgs = [np.zeros((3, 8, 8), np.float32)] * 2
        assert check_images(imgs).shape == (2, 3, 8, 8)
        assert check_images(np.zeros((3, 8, 8))).shape == (1, 3, 8, 8)

    @pytest.mark.parametrize("bad,err", [
        (np.zeros((2, 1, 8, 8)), ShapeError),
        (np.zeros((0, 3, 8, 8)), ShapeError),
        (np.full((1, 3, 8, 8), 2.0), ValueError),
        (np.full((1, 3, 8, 8), np.nan), ValueError),
        (np.zeros((1, 3, 8, 10)), ShapeError),
    ])
    def test_rejects(self, bad, err):
        with pytest.raises(err):
            check_images(bad)


class TestAttentionTranslator:
    def test_params_roundtrip(self):
        est = AttentionTranslator(**SMALL)
        params = est.get_params()
        assert params["n_content"] == 3 and params["mode"] == "unsupervised"
        other = clone(est).set_params(lr=1e-3)
        assert other.lr == 1e-3 and est.lr == 2e-4

    def test_fit_transform(self):
        est = AttentionTranslator(**SMALL).fit(_images(3), _images(2, seed=1))
        assert est.n_iter_ == 3 and len(est.loss_history_) == 3
        out = est.transform(_images(2, seed=2))
        assert out.shape == (2, 3, 32, 32)
        masks = est.attention_masks(_images(1, seed=2))
        assert masks.shape == (1, 4, 32, 32)
        assert torch.allclose(masks.sum(1), torch.ones(1, 32, 32), atol=1e-5)

    def test_fit_is_deterministic(self):
        a = AttentionTranslator(**SMALL).fit(_images(2), _images(2, seed=1))
        b = AttentionTranslator(**SMALL).fit(_images(2), _images(2, seed=1))
        assert a.loss_history_ == b.loss_history_

    def test_unfitted(self):
        from sklearn.exceptions import NotFittedError
        with pytest.raises(NotFittedError):
            AttentionTranslator(**SMALL).transform(_images(1))

    def test_supervised_needs_boxes(self):
        with pytest.raises(ConfigurationError):
            AttentionTranslator(mode="supervised", **SMALL).fit(_images(1), _images(1))

    def test_no_attention_has_no_masks(self):
        est = AttentionTranslator(mode="no_attention", **{**SMALL, "max_iters": 1}).fit(_images(1), _images(1))
        with pytest.raises(ConfigurationError):
            est.attention_masks(_images(1))


class TestProxyDetectorEstimator:
    def test_predict_and_score(self):
        img = torch.full((1, 3, 32, 32), 0.2)
        img[0, 0, 4:12, 4:20] = 1.0
        img[0, 1:, 4:12, 4:20] = -1.0
        det = ProxyDetector().fit()
        res = det.predict(img)
        assert res[0].boxes == [BoundingBox(4, 4, 20, 12)]
        assert det.score(img, [[BoundingBox(4, 4, 20, 12)]]) == 1.0
        assert det.score(img, [[BoundingBox(24, 24, 30, 30)]]) == 0.0
