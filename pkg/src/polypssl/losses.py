"""Masked L2 reconstruction loss and the Tversky segmentation loss."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .augmentation import DropoutMask
from .exceptions import EmptySplitError, InvalidConfigError, ShapeMismatchError

REDUCTIONS = ("mean_over_masked", "sum")


@dataclass(frozen=True)
class TverskyParams:
    alpha: float = 0.4
    beta: float = 0.6
    smooth: float = 1.0

    def __post_init__(self):
        if self.alpha < 0:
            raise InvalidConfigError("alpha must be >= 0 (TverskyParams)", "losses", "alpha")
        if self.beta < 0:
            raise InvalidConfigError("beta must be >= 0 (TverskyParams)", "losses", "beta")
        if self.alpha + self.beta <= 0:
            raise InvalidConfigError("alpha + beta must be > 0 (TverskyParams)", "losses", "alpha")
        if self.smooth < 0:
            raise InvalidConfigError("smooth must be >= 0 (TverskyParams)", "losses", "smooth")


@dataclass(frozen=True)
class ReconLossConfig:
    reduction: str = "mean_over_masked"

    def __post_init__(self):
        if self.reduction not in REDUCTIONS:
            raise InvalidConfigError(f"must be one of {REDUCTIONS}", "losses", "reduction")


def _tensor(x, like=None):
    if isinstance(x, torch.Tensor):
        return x
    dtype = like.dtype if isinstance(like, torch.Tensor) else torch.float64
    return torch.as_tensor(np.asarray(x), dtype=dtype)


def masked_reconstruction_loss(x, model_output, m, cfg: ReconLossConfig = ReconLossConfig()):
    """Squared error between ``x`` and ``model_output`` restricted to dropped pixels.

    Tensors are channels-last (``... x H x W x C``); ``m`` is a
    :class:`DropoutMask` or array matching ``x`` without the channel axis.
    With ``mean_over_masked`` the sum is divided by the number of masked
    elements (pixels times channels); an empty mask gives 0.
    """
    out = _tensor(model_output)
    x = _tensor(x, out).to(out.dtype)
    mask = m.mask if isinstance(m, DropoutMask) else m
    mask = _tensor(mask, out).to(out.dtype)
    if x.shape != out.shape:
        raise ShapeMismatchError(f"input {tuple(x.shape)} vs output {tuple(out.shape)}")
    if tuple(mask.shape) != tuple(x.shape[:-1]):
        raise ShapeMismatchError(f"mask {tuple(mask.shape)} vs image {tuple(x.shape)}")
    residual = mask[..., None] * (x - out)
    total = (residual * residual).sum()
    if cfg.reduction == "sum":
        return total
    n = mask.sum() * x.shape[-1]
    if n.item() == 0:
        return total * 0.0
    return total / n


def _soft_counts(pred, gt):
    tp = (pred * gt).sum(-1)
    fp = (pred * (1 - gt)).sum(-1)
    fn = ((1 - pred) * gt).sum(-1)
    return tp, fp, fn


def _index_from_counts(tp, fp, fn, p: TverskyParams):
    return (tp + p.smooth) / (tp + p.alpha * fp + p.beta * fn + p.smooth)


def tversky_index(pred, gt, p: TverskyParams = TverskyParams()):
    """Soft Tversky index (TP + eps) / (TP + alpha FP + beta FN + eps) of one prediction."""
    pred = _tensor(pred)
    gt = _tensor(gt, pred).to(pred.dtype)
    if pred.shape != gt.shape:
        raise ShapeMismatchError(f"pred {tuple(pred.shape)} vs gt {tuple(gt.shape)}")
    tp, fp, fn = _soft_counts(pred.reshape(-1), gt.reshape(-1))
    return _index_from_counts(tp, fp, fn, p)


def tversky_loss(pred_batch, gt_batch, p: TverskyParams = TverskyParams()):
    """Batch mean of ``1 - TI_i``, the index computed separately per item."""
    pred = _tensor(pred_batch)
    gt = _tensor(gt_batch, pred).to(pred.dtype)
    if pred.shape != gt.shape:
        raise ShapeMismatchError(f"pred {tuple(pred.shape)} vs gt {tuple(gt.shape)}")
    if pred.ndim == 0 or pred.shape[0] == 0:
        raise EmptySplitError("tversky_loss needs a non-empty batch")
    n = pred.shape[0]
    tp, fp, fn = _soft_counts(pred.reshape(n, -1), gt.reshape(n, -1))
    return (1 - _index_from_counts(tp, fp, fn, p)).mean()
