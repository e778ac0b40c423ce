"""Geometric augmentation, multi-scale resizing and coarse pixel dropout."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .datasets import ImagePair
from .exceptions import InvalidConfigError, ShapeMismatchError


@dataclass(frozen=True)
class AugmentConfig:
    flip_prob: float = 0.5
    rotation_degrees: tuple[int, ...] = (0, 90, 180, 270)
    scales: tuple[int, ...] = (192, 320, 512)
    dropout_patch_count_range: tuple[int, int] = (1, 5)
    max_patch_side: int = 150

    def __post_init__(self):
        object.__setattr__(self, "rotation_degrees", tuple(int(d) for d in self.rotation_degrees))
        object.__setattr__(self, "scales", tuple(int(s) for s in self.scales))
        object.__setattr__(
            self, "dropout_patch_count_range", tuple(int(v) for v in self.dropout_patch_count_range)
        )
        if not 0.0 <= self.flip_prob <= 1.0:
            raise InvalidConfigError("must lie in [0, 1]", "augment", "flip_prob")
        if not self.rotation_degrees:
            raise InvalidConfigError("must not be empty", "augment", "rotation_degrees")
        if any(d % 90 for d in self.rotation_degrees):
            raise InvalidConfigError(
                "only multiples of 90 degrees are supported", "augment", "rotation_degrees"
            )
        if not self.scales or min(self.scales) < 1:
            raise InvalidConfigError("must be a non-empty list of positive sizes", "augment", "scales")
        lo, hi = self.dropout_patch_count_range
        if len(self.dropout_patch_count_range) != 2 or lo < 0 or hi < lo:
            raise InvalidConfigError(
                "needs 0 <= min <= max", "augment", "dropout_patch_count_range"
            )
        if self.max_patch_side < 1:
            raise InvalidConfigError("must be >= 1", "augment", "max_patch_side")


@dataclass(frozen=True)
class GeometricTransform:
    """A drawn flip/rotation; rotation is applied first, counter-clockwise."""

    quarter_turns: int = 0
    hflip: bool = False
    vflip: bool = False

    def apply(self, array: np.ndarray) -> np.ndarray:
        out = np.rot90(array, self.quarter_turns, axes=(0, 1))
        if self.hflip:
            out = out[:, ::-1]
        if self.vflip:
            out = out[::-1]
        return np.ascontiguousarray(out)


def draw_transform(cfg: AugmentConfig, rng: np.random.Generator) -> GeometricTransform:
    degrees = cfg.rotation_degrees[rng.integers(len(cfg.rotation_degrees))]
    hflip = bool(rng.random() < cfg.flip_prob)
    vflip = bool(rng.random() < cfg.flip_prob)
    return GeometricTransform((degrees // 90) % 4, hflip, vflip)


def apply_transform(pair: ImagePair, t: GeometricTransform) -> ImagePair:
    return ImagePair(pair.id, t.apply(pair.image), t.apply(pair.mask), pair.source_size, pair.labeled)


def augment_pair(pair: ImagePair, cfg: AugmentConfig, rng: np.random.Generator) -> ImagePair:
    """Apply one random flip/rotation identically to image and mask."""
    return apply_transform(pair, draw_transform(cfg, rng))


def resize_image(image: np.ndarray, size: int) -> np.ndarray:
    if image.shape[:2] == (size, size):
        return image
    t = torch.from_numpy(np.ascontiguousarray(image)).permute(2, 0, 1)[None]
    out = F.interpolate(t, size=(size, size), mode="bilinear", align_corners=False)
    return out[0].permute(1, 2, 0).numpy()


def resize_mask(mask: np.ndarray, size: int) -> np.ndarray:
    if mask.shape == (size, size):
        return mask
    t = torch.from_numpy(np.ascontiguousarray(mask, dtype=np.float32))[None, None]
    out = F.interpolate(t, size=(size, size), mode="nearest-exact")
    return out[0, 0].numpy().astype(np.uint8)


def resize_to_scale(batch: Sequence[ImagePair], scale: int) -> list[ImagePair]:
    """Bilinear-resize images and nearest-resize masks to ``scale`` x ``scale``."""
    return [
        ImagePair(p.id, resize_image(p.image, scale), resize_mask(p.mask, scale), p.source_size, p.labeled)
        for p in batch
    ]


@dataclass(frozen=True, eq=False)
class DropoutMask:
    """Binary corruption map: 1 marks a dropped pixel."""

    mask: np.ndarray
    patch_boxes: tuple[tuple[int, int, int, int], ...] = field(default=())

    @property
    def shape(self):
        return self.mask.shape

    @classmethod
    def from_boxes(cls, height, width, boxes):
        mask = np.zeros((height, width), np.uint8)
        for top, left, h, w in boxes:
            if top < 0 or left < 0 or top + h > height or left + w > width:
                raise ValueError(f"box {(top, left, h, w)} exceeds {height}x{width}")
            mask[top : top + h, left : left + w] = 1
        return cls(mask, tuple(tuple(int(v) for v in b) for b in boxes))


def sample_dropout_mask(height: int, width: int, cfg: AugmentConfig, rng: np.random.Generator) -> DropoutMask:
    """Drop a random number of rectangles, each fully inside the image."""
    lo, hi = cfg.dropout_patch_count_range
    k = int(rng.integers(lo, hi + 1))
    max_h, max_w = min(cfg.max_patch_side, height), min(cfg.max_patch_side, width)
    boxes = []
    for _ in range(k):
        h = int(rng.integers(1, max_h + 1))
        w = int(rng.integers(1, max_w + 1))
        top = int(rng.integers(0, height - h + 1))
        left = int(rng.integers(0, width - w + 1))
        boxes.append((top, left, h, w))
    return DropoutMask.from_boxes(height, width, boxes)


def apply_dropout(image, m):
    """Return ``(1 - M) * x`` with the mask broadcast over the channel axis.

    ``image`` is channels-last (``... x H x W x C``), numpy or torch; ``m`` is a
    :class:`DropoutMask` or an array shaped like ``image`` without its last axis.
    """
    mask = m.mask if isinstance(m, DropoutMask) else m
    if tuple(mask.shape) != tuple(image.shape[:-1]):
        raise ShapeMismatchError(
            f"dropout mask {tuple(mask.shape)} does not match image {tuple(image.shape)}"
        )
    if isinstance(image, torch.Tensor):
        keep = 1 - torch.as_tensor(mask, dtype=image.dtype, device=image.device)
        return image * keep[..., None]
    keep = (1 - np.asarray(mask)).astype(image.dtype)
    return image * keep[..., None]
