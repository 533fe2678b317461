import numpy as np
import pytest
import torch
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from save_avs.config import ConfigError
from save_avs.estimator import SAVESegmenter

SMALL = dict(embed_dim=8, num_blocks=2, num_heads=2, patch_size=4, input_resolution=16,
             prompt_dim=8, audio_dim=6, epochs=2, batch_size=4, learning_rate=1e-3)


def toy_arrays(n=8, seed=0):
    g = torch.Generator().manual_seed(seed)
    images = torch.rand(n, 3, 16, 16, generator=g)
    audio = torch.randn(n, 6, generator=g)
    masks = (torch.rand(n, 16, 16, generator=g) > 0.5).float()
    return (images, audio), masks.numpy()


@pytest.fixture(scope="module")
def fitted():
    X, y = toy_arrays()
    return SAVESegmenter(**SMALL).fit(X, y), X, y


def test_get_params_and_clone():
    est = SAVESegmenter(**SMALL)
    params = est.get_params()
    assert params["embed_dim"] == 8 and params["random_state"] == 0
    twin = clone(est)
    assert twin.get_params() == params and twin is not est
    assert est.set_params(threshold=0.3).threshold == 0.3


def test_fit_predict_shapes(fitted):
    est, X, y = fitted
    proba = est.predict_proba(X)
    pred = est.predict(X)
    assert proba.shape == y.shape and pred.shape == y.shape
    assert pred.dtype == np.uint8 and set(np.unique(pred)) <= {0, 1}
    assert ((proba >= 0) & (proba <= 1)).all()
    assert len(est.metrics_log_.rows) == 2


def test_score_matches_evaluate(fitted):
    est, X, y = fitted
    assert est.score(X, y) == est.evaluate(X, y)["miou"]
    assert 0.0 <= est.score(X, y) <= 1.0


def test_frozen_backbone_untouched_by_fit(fitted):
    est, _, _ = fitted
    assert all(not p.requires_grad for n, p in est.model_.named_parameters()
               if n in est.partition_.frozen)


def test_fit_is_reproducible():
    X, y = toy_arrays()
    a = SAVESegmenter(**SMALL).fit(X, y).predict_proba(X)
    b = SAVESegmenter(**SMALL).fit(X, y).predict_proba(X)
    assert np.array_equal(a, b)


def test_not_fitted():
    X, _ = toy_arrays()
    with pytest.raises(NotFittedError):
        SAVESegmenter(**SMALL).predict(X)


def test_input_validation():
    (images, audio), y = toy_arrays()
    est = SAVESegmenter(**SMALL)
    with pytest.raises(ValueError):
        est.fit((images[:, :, :8, :8], audio), y)
    with pytest.raises(ValueError):
        est.fit((images, audio[:, :3]), y)
    with pytest.raises(ValueError):
        est.fit((images, audio), y * 0.5)
    with pytest.raises(ValueError):
        est.fit(images, y)


def test_invalid_hyperparameters_rejected_at_fit():
    X, y = toy_arrays()
    with pytest.raises(ConfigError):
        SAVESegmenter(**{**SMALL, "prompt_mode": "mean"}).fit(X, y)
