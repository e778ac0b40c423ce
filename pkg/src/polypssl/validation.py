"""Input checks for the estimator API."""

from __future__ import annotations

import numpy as np

from .datasets import ImagePair


def check_images(X) -> list[np.ndarray]:
    """Return a list of float32 H x W x 3 images in [0, 1].

    Accepts an N x H x W x 3 array or a sequence of H x W x 3 arrays; uint8
    input is rescaled by 1/255.
    """
    if isinstance(X, np.ndarray):
        if X.ndim != 4:
            raise ValueError(f"expected an N x H x W x 3 array, got shape {X.shape}")
        items = list(X)
    else:
        items = list(X)
    if not items:
        raise ValueError("expected at least one image")
    out = []
    for k, im in enumerate(items):
        im = np.asarray(im)
        if im.ndim != 3 or im.shape[2] != 3:
            raise ValueError(f"image {k} must be H x W x 3, got {im.shape}")
        if im.dtype == np.uint8:
            im = im.astype(np.float32) / 255.0
        im = im.astype(np.float32, copy=False)
        if not np.isfinite(im).all():
            raise ValueError(f"image {k} contains non-finite values")
        if im.min() < 0.0 or im.max() > 1.0:
            raise ValueError(f"image {k} has values outside [0, 1]")
        out.append(im)
    return out


def check_masks(y, images) -> list[np.ndarray]:
    masks = list(y)
    if len(masks) != len(images):
        raise ValueError(f"got {len(images)} images but {len(masks)} masks")
    out = []
    for k, (m, im) in enumerate(zip(masks, images)):
        m = np.asarray(m)
        if m.ndim == 3 and m.shape[2] == 1:
            m = m[..., 0]
        if m.shape != im.shape[:2]:
            raise ValueError(f"mask {k} has shape {m.shape}, image has {im.shape[:2]}")
        if not np.isin(m, (0, 1)).all():
            raise ValueError(f"mask {k} is not binary")
        out.append(m.astype(np.uint8))
    return out


def as_pairs(X, y=None, prefix="sample") -> list[ImagePair]:
    images = check_images(X)
    if y is None:
        return [
            ImagePair(f"{prefix}-{k:05d}", im, np.zeros(im.shape[:2], np.uint8), labeled=False)
            for k, im in enumerate(images)
        ]
    masks = check_masks(y, images)
    return [ImagePair(f"{prefix}-{k:05d}", im, m) for k, (im, m) in enumerate(zip(images, masks))]
