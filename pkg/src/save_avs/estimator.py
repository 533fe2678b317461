"""scikit-learn style front end.

``SAVESegmenter`` exposes the model through ``fit`` / ``predict`` /
``predict_proba`` / ``score`` so it composes with ``clone``, ``get_params``
and grid searches. ``X`` is either an :class:`AVSDataset` or a pair
``(images [n, 3, R, R], audio [n, D_a])``; ``y`` holds binary masks ``[n, R, R]``.
"""

from __future__ import annotations

import numpy as np
import torch
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .config import ModelConfig, TrainConfig
from .data import AVSDataset
from .losses import fscore, miou
from .model import build_model, partition_parameters
from .trainer import evaluate, predict_probs, train
from .validation import check_audio, check_binary_mask, check_images


class SAVESegmenter(BaseEstimator):
    def __init__(self, embed_dim=64, num_blocks=4, num_heads=4, patch_size=8,
                 input_resolution=64, prompt_dim=64, adapter_compression=0.25, audio_dim=32,
                 mlp_ratio=4.0, prompt_mode="last", fscore_beta_sq=0.3, epochs=20,
                 batch_size=16, learning_rate=2e-4, weight_decay=0.01, threshold=0.5,
                 random_state=0):
        self.embed_dim = embed_dim
        self.num_blocks = num_blocks
        self.num_heads = num_heads
        self.patch_size = patch_size
        self.input_resolution = input_resolution
        self.prompt_dim = prompt_dim
        self.adapter_compression = adapter_compression
        self.audio_dim = audio_dim
        self.mlp_ratio = mlp_ratio
        self.prompt_mode = prompt_mode
        self.fscore_beta_sq = fscore_beta_sq
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.threshold = threshold
        self.random_state = random_state

    def _model_config(self) -> ModelConfig:
        return ModelConfig(
            embed_dim=self.embed_dim, num_blocks=self.num_blocks, num_heads=self.num_heads,
            patch_size=self.patch_size, input_resolution=self.input_resolution,
            prompt_dim=self.prompt_dim, adapter_compression=self.adapter_compression,
            audio_dim=self.audio_dim, mlp_ratio=self.mlp_ratio, prompt_mode=self.prompt_mode,
            fscore_beta_sq=self.fscore_beta_sq, seed=self.random_state)

    def _as_dataset(self, X, y=None) -> AVSDataset:
        if isinstance(X, AVSDataset):
            ds = X
            check_images(ds.images, self.input_resolution)
            check_audio(ds.audio, self.audio_dim, len(ds))
            return ds
        try:
            images, audio = X
        except (TypeError, ValueError):
            raise ValueError("X must be an AVSDataset or an (images, audio) pair") from None
        images = check_images(images, self.input_resolution)
        audio = check_audio(audio, self.audio_dim, len(images))
        if y is None:
            masks = torch.zeros(len(images), self.input_resolution, self.input_resolution)
        else:
            masks = torch.as_tensor(np.asarray(y), dtype=torch.float32)
            if masks.shape != (len(images), self.input_resolution, self.input_resolution):
                raise ValueError(f"y must have shape [n, {self.input_resolution}, "
                                 f"{self.input_resolution}], got {tuple(masks.shape)}")
            check_binary_mask(masks, "y")
        return AVSDataset(images, audio, masks)

    def fit(self, X, y=None, eval_set=None):
        """Train adapters, audio stack, neck and decoder; the backbone stays frozen.

        ``eval_set`` (same forms as ``X``, with masks) drives the per-epoch
        validation columns of ``metrics_log_``; defaults to the training data.
        """
        train_set = self._as_dataset(X, y)
        if eval_set is None:
            val_set = train_set
        elif isinstance(eval_set, AVSDataset):
            val_set = self._as_dataset(eval_set)
        else:
            val_set = self._as_dataset(*eval_set)
        self.model_ = build_model(self._model_config())
        self.partition_ = partition_parameters(self.model_)
        tc = TrainConfig(epochs=self.epochs, base_lr=self.learning_rate,
                         batch_size=self.batch_size, weight_decay=self.weight_decay,
                         seed=self.random_state)
        _, self.metrics_log_, _ = train(self.model_, train_set, val_set, tc)
        return self

    def predict_proba(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        return np.stack(predict_probs(self.model_, self._as_dataset(X)))

    def predict(self, X) -> np.ndarray:
        return (self.predict_proba(X) >= self.threshold).astype(np.uint8)

    def score(self, X, y=None) -> float:
        """Mean IoU of thresholded predictions against ``y`` (or the dataset masks)."""
        check_is_fitted(self, "model_")
        ds = self._as_dataset(X, y)
        probs = predict_probs(self.model_, ds)
        return miou(list(zip(probs, ds.masks.numpy())), threshold=self.threshold)

    def evaluate(self, X, y=None) -> dict:
        check_is_fitted(self, "model_")
        ds = self._as_dataset(X, y)
        if self.threshold == 0.5:
            return evaluate(self.model_, ds)
        pairs = list(zip(predict_probs(self.model_, ds), ds.masks.numpy()))
        return {"miou": miou(pairs, self.threshold),
                "fscore": fscore(pairs, self.threshold, self.fscore_beta_sq)}
