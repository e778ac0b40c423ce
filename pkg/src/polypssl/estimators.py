"""scikit-learn compatible wrappers around pretraining and fine-tuning."""

from __future__ import annotations

from pathlib import Path

import numpy as np
import torch
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .augmentation import AugmentConfig, apply_dropout, resize_mask
from .config import GlobalConfig, LossConfig, NetworkConfig
from .evaluation import ExperimentConfig
from .metrics import evaluate_predictions
from .network import Checkpoint, forward
from .training import TrainSchedule, finetune, predict_probabilities, pretrain
from .validation import as_pairs, check_images, check_masks


def _schedule(epochs, switch_epoch, high_lr, low_lr, batch_size):
    if switch_epoch is None:
        # same 50/65 proportion as the reference schedule
        switch_epoch = min(max(1, round(epochs * 50 / 65)), epochs - 1)
    return TrainSchedule(epochs, high_lr, low_lr, switch_epoch, batch_size)


class InpaintingPretrainer(TransformerMixin, BaseEstimator):
    """Self-supervised U-Net trained to fill in randomly dropped rectangles.

    Parameters
    ----------
    depth, base_channels, channel_multiplier : int
        U-Net geometry; channels at level ``i`` are ``base * multiplier**i``.
    epochs : int
        Number of passes over the pool.
    switch_epoch : int, optional
        First epoch trained at ``low_lr``; defaults to the 50/65 point.
    high_lr, low_lr : float
        Step learning-rate schedule for Adam.
    scales : tuple of int
        Square training sizes, one drawn per step.
    max_patch_side, patch_count_range
        Geometry of the dropped rectangles.
    random_state : int
        Seed for initialization, augmentation and dropout draws.

    Attributes
    ----------
    checkpoint_ : Checkpoint
    log_ : TrainLog
    model_ : UNet
    """

    def __init__(
        self,
        depth=4,
        base_channels=64,
        channel_multiplier=2,
        epochs=65,
        switch_epoch=None,
        high_lr=1e-5,
        low_lr=1e-6,
        batch_size=4,
        scales=(192, 320, 512),
        flip_prob=0.5,
        rotation_degrees=(0, 90, 180, 270),
        max_patch_side=150,
        patch_count_range=(1, 5),
        reduction="mean_over_masked",
        random_state=0,
    ):
        self.depth = depth
        self.base_channels = base_channels
        self.channel_multiplier = channel_multiplier
        self.epochs = epochs
        self.switch_epoch = switch_epoch
        self.high_lr = high_lr
        self.low_lr = low_lr
        self.batch_size = batch_size
        self.scales = scales
        self.flip_prob = flip_prob
        self.rotation_degrees = rotation_degrees
        self.max_patch_side = max_patch_side
        self.patch_count_range = patch_count_range
        self.reduction = reduction
        self.random_state = random_state

    def _settings(self) -> GlobalConfig:
        return GlobalConfig(
            augment=AugmentConfig(
                self.flip_prob, self.rotation_degrees, self.scales, self.patch_count_range, self.max_patch_side
            ),
            network=NetworkConfig(self.depth, self.base_channels, self.channel_multiplier),
            losses=LossConfig(reduction=self.reduction),
            schedule_pretrain=_schedule(self.epochs, self.switch_epoch, self.high_lr, self.low_lr, self.batch_size),
            evaluation=ExperimentConfig(eval_scale=max(self.scales), output_dir=None),
            seed=self.random_state,
        )

    def fit(self, X, y=None):
        pool = as_pairs(X, prefix="pretrain")
        self.checkpoint_, self.log_ = pretrain(pool, self._settings())
        self.model_ = self.checkpoint_.build().eval()
        return self

    @torch.no_grad()
    def transform(self, X):
        """Reconstruct ``X`` (N x H x W x 3, sizes divisible by ``2**depth``)."""
        check_is_fitted(self, "model_")
        images = np.stack(check_images(X))
        return forward(self.model_, images).numpy()

    @torch.no_grad()
    def inpaint(self, X, dropout_masks):
        """Fill the pixels flagged in ``dropout_masks`` (N x H x W) from their context."""
        check_is_fitted(self, "model_")
        images = torch.from_numpy(np.stack(check_images(X)))
        drop = torch.as_tensor(np.asarray(dropout_masks), dtype=images.dtype)
        recon = forward(self.model_, apply_dropout(images, drop))
        return (images * (1 - drop[..., None]) + recon * drop[..., None]).numpy()


class UNetSegmenter(BaseEstimator):
    """Binary U-Net segmenter trained with the Tversky loss.

    ``init`` may be a fitted :class:`InpaintingPretrainer`, a
    :class:`Checkpoint`, a checkpoint path, or None for random weights.
    ``predict_proba`` returns N x H x W foreground probabilities.
    """

    def __init__(
        self,
        depth=4,
        base_channels=64,
        channel_multiplier=2,
        epochs=65,
        switch_epoch=None,
        high_lr=1e-4,
        low_lr=1e-5,
        batch_size=4,
        scales=(192, 320, 512),
        flip_prob=0.5,
        rotation_degrees=(0, 90, 180, 270),
        alpha=0.4,
        beta=0.6,
        smooth=1.0,
        init=None,
        eval_scale=None,
        threshold=0.5,
        random_state=0,
    ):
        self.depth = depth
        self.base_channels = base_channels
        self.channel_multiplier = channel_multiplier
        self.epochs = epochs
        self.switch_epoch = switch_epoch
        self.high_lr = high_lr
        self.low_lr = low_lr
        self.batch_size = batch_size
        self.scales = scales
        self.flip_prob = flip_prob
        self.rotation_degrees = rotation_degrees
        self.alpha = alpha
        self.beta = beta
        self.smooth = smooth
        self.init = init
        self.eval_scale = eval_scale
        self.threshold = threshold
        self.random_state = random_state

    def _settings(self) -> GlobalConfig:
        native = self.eval_scale is None
        return GlobalConfig(
            augment=AugmentConfig(self.flip_prob, self.rotation_degrees, self.scales),
            network=NetworkConfig(self.depth, self.base_channels, self.channel_multiplier),
            losses=LossConfig(self.alpha, self.beta, self.smooth),
            schedule_finetune=_schedule(self.epochs, self.switch_epoch, self.high_lr, self.low_lr, self.batch_size),
            evaluation=ExperimentConfig(
                eval_scale=self.eval_scale or max(self.scales),
                output_dir=None,
                threshold=self.threshold,
                native_resolution=native,
            ),
            seed=self.random_state,
        )

    def _init_checkpoint(self):
        init = self.init
        if init is None or isinstance(init, Checkpoint):
            return init
        if isinstance(init, InpaintingPretrainer):
            check_is_fitted(init, "checkpoint_")
            return init.checkpoint_
        if isinstance(init, (str, Path)):
            return Checkpoint.load(init)
        raise TypeError(f"unsupported init of type {type(init).__name__}")

    def fit(self, X, y, X_val=None, y_val=None):
        """Fine-tune on ``(X, y)``; with a validation set the best-DSC epoch is kept."""
        train = as_pairs(X, y, prefix="train")
        val = as_pairs(X_val, y_val, prefix="val") if X_val is not None else []
        self.checkpoint_, self.log_ = finetune(
            self._init_checkpoint(), train, val, self._settings(), selection="best_val_dsc" if val else "last"
        )
        self.model_ = self.checkpoint_.build().eval()
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "model_")
        return np.stack(predict_probabilities(self.model_, check_images(X), self.eval_scale))

    def predict(self, X):
        return (self.predict_proba(X) >= self.threshold).astype(np.uint8)

    def score(self, X, y):
        """Mean per-image Dice coefficient."""
        probs = self.predict_proba(X)
        images = check_images(X)
        masks = check_masks(y, images)
        if self.eval_scale is not None:
            masks = [resize_mask(m, self.eval_scale) for m in masks]
        return evaluate_predictions(probs, masks, self.threshold)["dsc"]
