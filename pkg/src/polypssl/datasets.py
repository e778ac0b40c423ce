"""Corpus ingestion, leakage-safe split planning and synthetic blob corpora."""

from __future__ import annotations

import hashlib
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image

from .exceptions import (
    EmptyCorpusError,
    InvalidConfigError,
    MissingMaskError,
    TooFewSamplesError,
    UnreadableFileError,
)

IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg")


@dataclass(frozen=True, eq=False)
class ImagePair:
    """An RGB image in [0, 1] (H x W x 3) with its binary mask (H x W)."""

    id: str
    image: np.ndarray
    mask: np.ndarray
    source_size: tuple[int, int] = None
    labeled: bool = True

    def __post_init__(self):
        image = np.asarray(self.image, dtype=np.float32)
        mask = np.asarray(self.mask)
        if image.ndim != 3 or image.shape[2] != 3:
            raise ValueError(f"{self.id}: image must be H x W x 3, got {image.shape}")
        if mask.shape != image.shape[:2]:
            raise ValueError(
                f"{self.id}: mask shape {mask.shape} != image shape {image.shape[:2]}"
            )
        mask = mask.astype(np.uint8)
        if mask.size and mask.max() > 1:
            raise ValueError(f"{self.id}: mask must be binary")
        object.__setattr__(self, "image", image)
        object.__setattr__(self, "mask", mask)
        if self.source_size is None:
            object.__setattr__(self, "source_size", tuple(image.shape[:2]))

    @property
    def shape(self):
        return self.image.shape[:2]


def _stems(directory: Path) -> dict[str, Path]:
    found = {}
    for path in sorted(directory.iterdir()):
        if path.is_file() and path.suffix.lower() in IMAGE_EXTENSIONS:
            if path.stem in found:
                raise UnreadableFileError(path, f"duplicate stem '{path.stem}'")
            found[path.stem] = path
    return found


def list_ids(root, image_subdir: str = "images") -> list[str]:
    """Sample IDs (filename stems) of a corpus, without decoding any pixels."""
    directory = Path(root) / image_subdir
    if not directory.is_dir():
        raise EmptyCorpusError(f"image directory '{directory}' does not exist")
    ids = list(_stems(directory))
    if not ids:
        raise EmptyCorpusError(f"no images found in '{directory}'")
    return ids


def _read_image(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    except (OSError, ValueError) as exc:
        raise UnreadableFileError(path, str(exc)) from exc


def _read_mask(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            grey = np.asarray(im.convert("L"), dtype=np.float32) / 255.0
    except (OSError, ValueError) as exc:
        raise UnreadableFileError(path, str(exc)) from exc
    return (grey >= 0.5).astype(np.uint8)


def ingest_corpus(
    root, image_subdir: str = "images", mask_subdir: str | None = "masks", n_jobs: int = 1
) -> list[ImagePair]:
    """Load every image under ``root/image_subdir`` with its mask.

    When ``mask_subdir`` is None or ``root/mask_subdir`` does not exist the
    corpus is treated as unlabeled: every pair gets an all-zero mask and
    ``labeled=False``.
    """
    root = Path(root)
    image_dir = root / image_subdir
    mask_dir = root / mask_subdir if mask_subdir is not None else None
    if not image_dir.is_dir():
        raise EmptyCorpusError(f"image directory '{image_dir}' does not exist")
    images = _stems(image_dir)
    if not images:
        raise EmptyCorpusError(f"no images found in '{image_dir}'")

    labeled = mask_dir is not None and mask_dir.is_dir()
    masks = _stems(mask_dir) if labeled else {}
    if labeled:
        for stem in images:
            if stem not in masks:
                raise MissingMaskError(stem)

    def load(stem):
        image = _read_image(images[stem])
        if labeled:
            mask = _read_mask(masks[stem])
            if mask.shape != image.shape[:2]:
                raise UnreadableFileError(
                    masks[stem], f"mask size {mask.shape} != image size {image.shape[:2]}"
                )
        else:
            mask = np.zeros(image.shape[:2], dtype=np.uint8)
        return ImagePair(stem, image, mask, tuple(image.shape[:2]), labeled)

    stems = list(images)
    if n_jobs > 1:
        with ThreadPoolExecutor(max_workers=n_jobs) as pool:
            return list(pool.map(load, stems))
    return [load(s) for s in stems]


def write_corpus(pairs: Iterable[ImagePair], root, image_subdir="images", mask_subdir="masks"):
    """Write pairs as 8-bit PNGs in the layout ``ingest_corpus`` reads."""
    root = Path(root)
    (root / image_subdir).mkdir(parents=True, exist_ok=True)
    (root / mask_subdir).mkdir(parents=True, exist_ok=True)
    for pair in pairs:
        rgb = np.clip(np.rint(pair.image * 255.0), 0, 255).astype(np.uint8)
        Image.fromarray(rgb, "RGB").save(root / image_subdir / f"{pair.id}.png")
        Image.fromarray(pair.mask.astype(np.uint8) * 255, "L").save(
            root / mask_subdir / f"{pair.id}.png"
        )
    return root


# --------------------------------------------------------------------------
# split planning
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class SplitPlan:
    seed: int
    test_ids: tuple[str, ...]
    folds: tuple[tuple[str, ...], ...]
    pretrain_ids: tuple[str, ...] = ()

    @property
    def n_folds(self):
        return len(self.folds)

    @property
    def labeled_ids(self):
        return tuple(sorted(set(self.test_ids).union(*self.folds)))

    def fold_split(self, fold: int) -> tuple[list[str], list[str]]:
        """Leave-one-fold-out: (train IDs, validation IDs) for ``fold``."""
        if not 0 <= fold < self.n_folds:
            raise IndexError(f"fold must be in [0, {self.n_folds}), got {fold}")
        train = [i for k, f in enumerate(self.folds) if k != fold for i in f]
        return sorted(train), list(self.folds[fold])

    def with_pretrain(self, pretrain_ids: Sequence[str]) -> "SplitPlan":
        return SplitPlan(self.seed, self.test_ids, self.folds, tuple(sorted(pretrain_ids)))

    def check(self):
        """Raise ``ValueError`` if any disjointness invariant is violated."""
        test = set(self.test_ids)
        seen = set()
        for k, fold in enumerate(self.folds):
            fold = set(fold)
            if fold & test:
                raise ValueError(f"fold {k} overlaps the test set")
            if fold & seen:
                raise ValueError(f"fold {k} overlaps an earlier fold")
            seen |= fold
        if test & set(self.pretrain_ids):
            raise ValueError("pretrain pool overlaps the test set")
        sizes = [len(f) for f in self.folds]
        if sizes and max(sizes) - min(sizes) > 1:
            raise ValueError(f"fold sizes differ by more than one: {sizes}")
        return self

    def to_dict(self):
        return {
            "seed": self.seed,
            "test_ids": sorted(self.test_ids),
            "folds": [sorted(f) for f in self.folds],
            "pretrain_ids": sorted(self.pretrain_ids),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def digest(self) -> str:
        return hashlib.sha256(self.to_json().encode("utf-8")).hexdigest()

    def save(self, path):
        Path(path).write_text(self.to_json(), encoding="utf-8")
        return path

    @classmethod
    def from_dict(cls, data):
        unknown = set(data) - {"seed", "test_ids", "folds", "pretrain_ids"}
        if unknown:
            raise ValueError(f"unknown manifest keys: {sorted(unknown)}")
        return cls(
            seed=int(data["seed"]),
            test_ids=tuple(sorted(data["test_ids"])),
            folds=tuple(tuple(sorted(f)) for f in data["folds"]),
            pretrain_ids=tuple(sorted(data.get("pretrain_ids", ()))),
        ).check()

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def _round_half_up(x: float) -> int:
    # guard against 19.599999... style representation error before flooring
    return int(math.floor(round(x, 9) + 0.5))


def make_split_plan(
    labeled_ids: Sequence[str], test_fraction: float = 0.1, n_folds: int = 5, seed: int = 0
) -> SplitPlan:
    """Draw a uniform test set and deal the remainder into near-equal folds.

    IDs are sorted before shuffling so the plan depends only on the ID set
    and the seed. Fold sizes differ by at most one; the larger folds come
    first.
    """
    ids = sorted(labeled_ids)
    if len(set(ids)) != len(ids):
        raise ValueError("labeled_ids contains duplicates")
    if not 0.0 < test_fraction < 1.0:
        raise TooFewSamplesError(f"test_fraction must lie in (0, 1), got {test_fraction}")
    if n_folds < 2:
        raise TooFewSamplesError(f"n_folds must be >= 2, got {n_folds}")
    n = len(ids)
    if n < n_folds + 1:
        raise TooFewSamplesError(f"need at least {n_folds + 1} samples, got {n}")
    n_test = _round_half_up(test_fraction * n)
    remaining = n - n_test
    if n_test < 1 or remaining < n_folds:
        raise TooFewSamplesError(
            f"{n} samples at test fraction {test_fraction} leave {remaining} "
            f"for {n_folds} folds"
        )

    rng = np.random.default_rng(seed)
    order = [ids[i] for i in rng.permutation(n)]
    test, rest = order[:n_test], order[n_test:]
    base, extra = divmod(remaining, n_folds)
    folds, start = [], 0
    for k in range(n_folds):
        size = base + (1 if k < extra else 0)
        folds.append(tuple(sorted(rest[start : start + size])))
        start += size
    return SplitPlan(seed, tuple(sorted(test)), tuple(folds)).check()


def derive_pretrain_pool(unlabeled_corpus_ids: Sequence[str], test_ids: Iterable[str]) -> list[str]:
    """Remove test IDs from the unlabeled pool, keeping the input order."""
    excluded = set(test_ids)
    return [i for i in unlabeled_corpus_ids if i not in excluded]


# --------------------------------------------------------------------------
# synthetic corpora
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class SyntheticSpec:
    count: int = 100
    image_size: int = 128
    shape_count_range: tuple[int, int] = (1, 3)
    radius_range: tuple[int, int] = (6, 20)
    noise_std: float = 0.03
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "shape_count_range", tuple(int(v) for v in self.shape_count_range))
        object.__setattr__(self, "radius_range", tuple(int(v) for v in self.radius_range))
        lo, hi = self.shape_count_range
        rmin, rmax = self.radius_range
        if self.count < 0:
            raise InvalidConfigError("must be >= 0", "synthetic", "count")
        if self.image_size < 32:
            raise InvalidConfigError("must be >= 32", "synthetic", "image_size")
        if rmin < 2 or rmax < rmin:
            raise InvalidConfigError("needs 2 <= min <= max", "synthetic", "radius_range")
        if 2 * rmax >= self.image_size:
            raise InvalidConfigError("max radius must fit the image", "synthetic", "radius_range")
        if lo < 1 or hi < lo:
            raise InvalidConfigError("needs 1 <= min <= max", "synthetic", "shape_count_range")
        if self.noise_std < 0:
            raise InvalidConfigError("must be >= 0", "synthetic", "noise_std")


def _texture(rng, size, n_waves=4, scale=0.06):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float32) / size
    out = np.zeros((size, size), np.float32)
    for _ in range(n_waves):
        fy, fx = rng.uniform(1.0, 6.0, 2) * rng.choice([-1, 1], 2)
        phase = rng.uniform(0, 2 * np.pi)
        out += np.sin(2 * np.pi * (fy * yy + fx * xx) + phase)
    return scale * out / n_waves


def _synthetic_pair(rng, spec: SyntheticSpec, index: int) -> ImagePair:
    size = spec.image_size
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float32)

    # mucosa-like background: warm base colour, low-frequency shading, vessels
    base = np.array([0.78, 0.45, 0.40], np.float32) + rng.uniform(-0.06, 0.06, 3)
    image = np.empty((size, size, 3), np.float32)
    shading = _texture(rng, size, n_waves=3, scale=0.10)
    for c in range(3):
        image[..., c] = base[c] + shading + _texture(rng, size, n_waves=5, scale=0.04)

    mask = np.zeros((size, size), np.uint8)
    n_blobs = rng.integers(spec.shape_count_range[0], spec.shape_count_range[1] + 1)
    rmin, rmax = spec.radius_range
    for _ in range(n_blobs):
        ry, rx = rng.uniform(rmin, rmax, 2)
        r = max(ry, rx)
        cy, cx = rng.uniform(r, size - r, 2)
        theta = rng.uniform(0, np.pi)
        dy, dx = yy - cy, xx - cx
        u = (dx * np.cos(theta) + dy * np.sin(theta)) / rx
        v = (-dx * np.sin(theta) + dy * np.cos(theta)) / ry
        dist = np.sqrt(u * u + v * v)
        # soft edge: alpha crosses 0.5 exactly on the ellipse boundary
        alpha = 1.0 / (1.0 + np.exp((dist - 1.0) * rng.uniform(6.0, 12.0)))
        dome = np.clip(1.0 - dist, 0.0, 1.0)
        tint = np.array([0.92, 0.78, 0.72], np.float32) * rng.uniform(0.85, 1.1)
        blob = image * tint + 0.18 * dome[..., None] ** 2
        image = image * (1 - alpha[..., None]) + blob * alpha[..., None]
        mask |= (alpha >= 0.5).astype(np.uint8)

    if spec.noise_std > 0:
        image = image + rng.normal(0.0, spec.noise_std, image.shape).astype(np.float32)
    image = np.clip(image, 0.0, 1.0)
    return ImagePair(f"synth-{spec.seed}-{index:05d}", image, mask, (size, size))


def generate_synthetic_corpus(spec: SyntheticSpec) -> list[ImagePair]:
    """Soft-edged elliptical blobs on a textured background, reproducible from ``spec.seed``."""
    rng = np.random.default_rng(spec.seed)
    return [_synthetic_pair(rng, spec, i) for i in range(spec.count)]
