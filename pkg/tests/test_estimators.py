import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from polypssl.estimators import InpaintingPretrainer, UNetSegmenter
from polypssl.validation import check_images, check_masks

FAST = dict(depth=2, base_channels=4, epochs=2, scales=(32,), high_lr=1e-3, low_lr=1e-4)


@pytest.fixture(scope="module")
def data(small_corpus):
    X = np.stack([p.image for p in small_corpus])
    y = np.stack([p.mask for p in small_corpus])
    return X, y


class TestParams:
    @pytest.mark.parametrize("cls", [InpaintingPretrainer, UNetSegmenter])
    def test_get_set_params_and_clone(self, cls):
        est = cls(**FAST)
        assert est.get_params()["depth"] == 2
        est.set_params(base_channels=8)
        twin = clone(est)
        assert twin.get_params() == est.get_params() and twin is not est

    def test_defaults_match_reference_setup(self):
        seg = UNetSegmenter()
        assert (seg.alpha, seg.beta, seg.high_lr, seg.low_lr, seg.epochs) == (0.4, 0.6, 1e-4, 1e-5, 65)
        pre = InpaintingPretrainer()
        assert (pre.high_lr, pre.low_lr, pre.max_patch_side) == (1e-5, 1e-6, 150)
        assert pre._settings().schedule_pretrain.switch_epoch == 50

    def test_unfitted(self, data):
        with pytest.raises(NotFittedError):
            UNetSegmenter(**FAST).predict(data[0])


class TestFitPredict:
    def test_pretrainer_transform_and_inpaint(self, data):
        X, _ = data
        pre = InpaintingPretrainer(max_patch_side=12, **FAST).fit(X[:8])
        assert pre.transform(X[:2]).shape == (2, 32, 32, 3)
        drop = np.zeros((2, 32, 32))
        drop[:, 4:10, 4:10] = 1
        filled = pre.inpaint(X[:2], drop)
        keep = drop == 0
        np.testing.assert_array_equal(filled[keep], X[:2][keep])

    def test_segmenter_scratch_and_pretrained(self, data):
        X, y = data
        pre = InpaintingPretrainer(max_patch_side=12, **FAST).fit(X[:8])
        seg = UNetSegmenter(init=pre, **FAST).fit(X[:8], y[:8], X[8:10], y[8:10])
        assert seg.checkpoint_.provenance["init"] == "pretrained"
        proba = seg.predict_proba(X[10:])
        assert proba.shape == (2, 32, 32) and 0 <= proba.min() and proba.max() <= 1
        assert set(np.unique(seg.predict(X[10:]))) <= {0, 1}
        assert 0.0 <= seg.score(X[10:], y[10:]) <= 1.0
        scratch = UNetSegmenter(**FAST).fit(X[:8], y[:8])
        assert scratch.checkpoint_.provenance["init"] == "scratch"

    def test_checkpoint_path_init(self, data, tmp_path):
        X, y = data
        pre = InpaintingPretrainer(max_patch_side=12, **FAST).fit(X[:4])
        pre.checkpoint_.save(tmp_path / "p.pt")
        seg = UNetSegmenter(init=str(tmp_path / "p.pt"), **FAST).fit(X[:4], y[:4])
        assert seg.checkpoint_.provenance["init"] == "pretrained"

    def test_eval_scale_resizes(self, data):
        X, y = data
        seg = UNetSegmenter(eval_scale=64, **FAST).fit(X[:4], y[:4])
        assert seg.predict(X[:2]).shape == (2, 64, 64)
        assert 0.0 <= seg.score(X[:2], y[:2]) <= 1.0

    def test_bad_init(self, data):
        X, y = data
        with pytest.raises(TypeError):
            UNetSegmenter(init=42, **FAST).fit(X[:4], y[:4])


class TestValidation:
    def test_uint8_rescaled(self):
        (im,) = check_images(np.full((1, 4, 4, 3), 255, np.uint8))
        assert im.dtype == np.float32 and im.max() == 1.0

    @pytest.mark.parametrize(
        "X", [np.zeros((4, 4, 3)), [np.zeros((4, 4))], [np.full((4, 4, 3), 2.0)], [np.full((4, 4, 3), np.nan)], []]
    )
    def test_bad_images(self, X):
        with pytest.raises(ValueError):
            check_images(X)

    def test_masks(self):
        images = check_images(np.zeros((2, 4, 4, 3)))
        assert check_masks(np.ones((2, 4, 4, 1)), images)[0].shape == (4, 4)
        with pytest.raises(ValueError):
            check_masks(np.full((2, 4, 4), 3), images)
        with pytest.raises(ValueError):
            check_masks(np.ones((1, 4, 4)), images)
        with pytest.raises(ValueError):
            check_masks(np.ones((2, 4, 5)), images)
