import numpy as np
import pytest
from sklearn.base import clone

from svflab.estimator import FewShotSegmenter


def test_params_roundtrip():
    est = FewShotSegmenter(strategy="freeze", epochs=3)
    assert clone(est).get_params() == est.get_params()


def test_unfitted():
    from sklearn.exceptions import NotFittedError

    with pytest.raises(NotFittedError):
        FewShotSegmenter().predict([])


def test_fit_predict_score(backbone, small_episodes):
    est = FewShotSegmenter(epochs=1, batch_size=2, backbone=backbone, precision="float64")
    est.fit(small_episodes)
    assert est.n_trainable_backbone_ == 280 and len(est.history_) == 1
    pred = est.predict(small_episodes)
    assert pred.shape == (4, 32, 32) and pred.dtype == bool
    np.testing.assert_array_equal(est.decision_function(small_episodes) > 0, pred)
    assert 0.0 <= est.score(small_episodes) <= 1.0


def test_bad_input(backbone, small_episodes):
    with pytest.raises(ValueError):
        FewShotSegmenter(backbone=backbone).fit([])
    with pytest.raises(TypeError):
        FewShotSegmenter(backbone=backbone).fit([1, 2])
    with pytest.raises(ValueError):
        FewShotSegmenter(strategy="lora", backbone=backbone).fit(small_episodes)
