"""Inpainting pretraining and Tversky fine-tuning loops."""

from __future__ import annotations

import json
import logging
import math
import time
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .augmentation import apply_dropout, augment_pair, resize_image, resize_mask, resize_to_scale, sample_dropout_mask
from .datasets import ImagePair, SplitPlan
from .exceptions import DivergenceError, EmptySplitError, InvalidConfigError, LeakageError
from .losses import masked_reconstruction_loss, tversky_loss
from .metrics import evaluate_predictions
from .network import Checkpoint, UNet, build_unet, transfer_weights
from .seeding import derive_seed

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainSchedule:
    total_epochs: int = 65
    high_lr: float = 1e-4
    low_lr: float = 1e-5
    switch_epoch: int = 50
    batch_size: int = 4
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8

    def __post_init__(self):
        object.__setattr__(self, "betas", tuple(float(b) for b in self.betas))
        if not 0 < self.switch_epoch < self.total_epochs:
            raise InvalidConfigError(
                f"need 0 < switch_epoch ({self.switch_epoch}) < total_epochs ({self.total_epochs})",
                "schedule",
                "switch_epoch",
            )
        if not 0 <= self.low_lr < self.high_lr:
            raise InvalidConfigError("need 0 <= low_lr < high_lr", "schedule", "low_lr")
        if self.batch_size < 1:
            raise InvalidConfigError("must be >= 1", "schedule", "batch_size")


PRETRAIN_SCHEDULE = TrainSchedule(high_lr=1e-5, low_lr=1e-6)
FINETUNE_SCHEDULE = TrainSchedule(high_lr=1e-4, low_lr=1e-5)


def lr_at_epoch(epoch: int, s: TrainSchedule) -> float:
    """Step schedule: ``high_lr`` before ``switch_epoch`` (0-based), ``low_lr`` after."""
    if not 0 <= epoch < s.total_epochs:
        raise IndexError(f"epoch {epoch} outside [0, {s.total_epochs})")
    return s.high_lr if epoch < s.switch_epoch else s.low_lr


# --------------------------------------------------------------------------
# logs
# --------------------------------------------------------------------------


@dataclass
class EpochRecord:
    epoch: int
    phase: str
    lr: float
    mean_loss: float
    steps: int
    scale_histogram: dict[str, int]
    ids: list[str]
    val_dsc: float | None = None
    wall_time: float = 0.0


@dataclass
class TrainLog:
    records: list[EpochRecord] = field(default_factory=list)

    def append(self, record: EpochRecord):
        self.records.append(record)

    def audit(self, schedule: TrainSchedule):
        """Check contiguous epochs and that every record used the scheduled rate."""
        for k, r in enumerate(self.records):
            if r.epoch != k:
                raise AssertionError(f"record {k} has epoch {r.epoch}")
            if r.lr != lr_at_epoch(r.epoch, schedule):
                raise AssertionError(f"epoch {r.epoch}: lr {r.lr} != scheduled")
        return True

    def consumed_ids(self) -> set[str]:
        return {i for r in self.records for i in r.ids}

    def scale_histogram(self) -> Counter:
        total = Counter()
        for r in self.records:
            total.update({int(k): v for k, v in r.scale_histogram.items()})
        return total

    def to_jsonl(self, timestamps: bool = True) -> str:
        lines = []
        for r in self.records:
            d = asdict(r)
            if not timestamps:
                d.pop("wall_time")
            lines.append(json.dumps(d, sort_keys=True))
        return "\n".join(lines) + ("\n" if lines else "")

    def save(self, path, timestamps: bool = True):
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(self.to_jsonl(timestamps), encoding="utf-8")
        return path

    @classmethod
    def load(cls, path):
        text = Path(path).read_text(encoding="utf-8")
        return cls([EpochRecord(**json.loads(line)) for line in text.splitlines() if line.strip()])


# --------------------------------------------------------------------------
# single step
# --------------------------------------------------------------------------


def make_optimizer(model: torch.nn.Module, s: TrainSchedule) -> torch.optim.Adam:
    return torch.optim.Adam(model.parameters(), lr=s.high_lr, betas=s.betas, eps=s.eps)


def train_step(model, batch, loss_fn: Callable, optimizer: torch.optim.Optimizer, lr: float) -> float:
    """One forward/backward/Adam update. ``batch`` is ``(inputs, *targets)``."""
    inputs, *targets = batch
    for group in optimizer.param_groups:
        group["lr"] = lr
    model.train()
    optimizer.zero_grad(set_to_none=True)
    loss = loss_fn(model(inputs), *targets)
    value = float(loss.detach())
    if not math.isfinite(value):
        raise DivergenceError(f"non-finite loss {value}")
    loss.backward()
    for name, p in model.named_parameters():
        if p.grad is not None and not torch.isfinite(p.grad).all():
            raise DivergenceError(f"non-finite gradient in '{name}'")
    optimizer.step()
    return value


# --------------------------------------------------------------------------
# batching helpers
# --------------------------------------------------------------------------


def _images_nchw(pairs: Sequence[ImagePair]) -> torch.Tensor:
    return torch.from_numpy(np.stack([p.image for p in pairs])).permute(0, 3, 1, 2).contiguous()


def _masks(pairs: Sequence[ImagePair]) -> torch.Tensor:
    return torch.from_numpy(np.stack([p.mask for p in pairs]).astype(np.float32))


def _batches(order, batch_size):
    for start in range(0, len(order), batch_size):
        yield order[start : start + batch_size]


@torch.no_grad()
def predict_probabilities(model: UNet, images, scale: int | None = None, batch_size: int = 4) -> list[np.ndarray]:
    """Segmentation probabilities (H x W) for a list of H x W x 3 images.

    Images are resized to ``scale`` when given; otherwise they must already be
    divisible by the network's divisor and are scored at native resolution.
    """
    model.eval()
    outs = []
    for chunk in _batches(list(images), batch_size):
        if scale is not None:
            chunk = [resize_image(im, scale) for im in chunk]
        if len({im.shape for im in chunk}) > 1:
            # mixed native sizes cannot share a batch tensor
            for im in chunk:
                outs.extend(predict_probabilities(model, [im], None, 1))
            continue
        x = torch.from_numpy(np.stack(chunk)).permute(0, 3, 1, 2).contiguous()
        x = x.to(next(model.parameters()).dtype)
        prob = model(x)[:, 0]
        outs.extend(prob.cpu().numpy())
    return outs


def evaluate_model(model: UNet, pairs: Sequence[ImagePair], scale: int | None, threshold: float = 0.5):
    probs = predict_probabilities(model, [p.image for p in pairs], scale)
    gts = [p.mask if scale is None else resize_mask(p.mask, scale) for p in pairs]
    return evaluate_predictions(probs, gts, threshold)


def _check_leakage(ids, split: SplitPlan | None, what: str):
    if split is None:
        return
    leaked = sorted(set(ids) & set(split.test_ids))
    if leaked:
        raise LeakageError(f"{what} contains {len(leaked)} test IDs, e.g. {leaked[:3]}")


def _check_finite(value, epoch):
    if not math.isfinite(value):
        raise DivergenceError(f"epoch {epoch}: mean loss is {value}")


# --------------------------------------------------------------------------
# pretraining
# --------------------------------------------------------------------------


def pretrain(pool: Sequence[ImagePair], cfg, split: SplitPlan | None = None, seed: int | None = None):
    """Train the inpainting U-Net on ``pool``; returns ``(Checkpoint, TrainLog)``.

    Each step draws one scale for the whole batch, augments every image,
    drops random rectangles and minimizes the masked reconstruction loss on
    the dropped pixels.
    """
    if not pool:
        raise EmptySplitError("pretraining pool is empty")
    _check_leakage([p.id for p in pool], split, "pretraining pool")
    seed = cfg.seed if seed is None else seed
    sched = cfg.schedule_pretrain
    aug = cfg.augment
    recon = cfg.losses.recon

    torch.manual_seed(derive_seed(seed, "pretrain/init"))
    model = build_unet(cfg.network.unet("inpainting"))
    optimizer = make_optimizer(model, sched)
    rng = np.random.default_rng(derive_seed(seed, "pretrain/data"))

    def loss_fn(out, target, drop):
        return masked_reconstruction_loss(target, out.permute(0, 2, 3, 1), drop, recon)

    log = TrainLog()
    for epoch in range(sched.total_epochs):
        lr = lr_at_epoch(epoch, sched)
        losses, hist, ids = [], Counter(), []
        for idx in _batches(rng.permutation(len(pool)), sched.batch_size):
            scale = int(aug.scales[rng.integers(len(aug.scales))])
            pairs = resize_to_scale([augment_pair(pool[i], aug, rng) for i in idx], scale)
            drop = torch.from_numpy(
                np.stack([sample_dropout_mask(scale, scale, aug, rng).mask for _ in pairs]).astype(np.float32)
            )
            target = torch.from_numpy(np.stack([p.image for p in pairs]))
            corrupted = apply_dropout(target, drop).permute(0, 3, 1, 2).contiguous()
            losses.append(train_step(model, (corrupted, target, drop), loss_fn, optimizer, lr))
            hist[str(scale)] += 1
            ids.extend(p.id for p in pairs)
        mean_loss = float(np.mean(losses))
        _check_finite(mean_loss, epoch)
        log.append(EpochRecord(epoch, "pretrain", lr, mean_loss, len(losses), dict(sorted(hist.items())), ids, None, time.time()))
        logger.info("pretrain epoch %d lr=%g loss=%.6f", epoch, lr, mean_loss)

    model.eval()
    ckpt = Checkpoint.from_model(
        model,
        phase="pretrain",
        epochs=sched.total_epochs,
        seed=seed,
        split_manifest_hash=split.digest() if split is not None else "",
    )
    return ckpt, log


# --------------------------------------------------------------------------
# fine-tuning
# --------------------------------------------------------------------------


def finetune(
    init: Checkpoint | None,
    fold_train: Sequence[ImagePair],
    fold_val: Sequence[ImagePair],
    cfg,
    split: SplitPlan | None = None,
    seed: int | None = None,
    selection: str | None = None,
):
    """Supervised Tversky training; returns ``(Checkpoint, TrainLog)``.

    With ``init`` the trunk is copied from the pretrained checkpoint and only
    the head starts fresh; without it every weight is freshly initialized.
    The returned checkpoint is the epoch with the best validation DSC unless
    ``selection == "last"``.
    """
    selection = selection or cfg.evaluation.selection
    if not fold_train:
        raise EmptySplitError("fine-tuning train split is empty")
    if not fold_val and selection != "last":
        raise EmptySplitError("validation split is empty; use selection='last' to train without one")
    overlap = {p.id for p in fold_train} & {p.id for p in fold_val}
    if overlap:
        raise LeakageError(f"train and validation share IDs, e.g. {sorted(overlap)[:3]}")
    _check_leakage([p.id for p in fold_train] + [p.id for p in fold_val], split, "fine-tuning data")

    seed = cfg.seed if seed is None else seed
    sched = cfg.schedule_finetune
    aug = cfg.augment
    tversky = cfg.losses.tversky
    eval_scale = None if cfg.evaluation.native_resolution else cfg.evaluation.eval_scale

    torch.manual_seed(derive_seed(seed, "finetune/init"))
    target_cfg = cfg.network.unet("segmentation")
    if init is not None:
        model, _ = transfer_weights(init, target_cfg)
    else:
        model = build_unet(target_cfg)
    optimizer = make_optimizer(model, sched)
    rng = np.random.default_rng(derive_seed(seed, "finetune/data"))

    def loss_fn(out, gt):
        return tversky_loss(out[:, 0], gt, tversky)

    log = TrainLog()
    best_state, best_dsc, best_epoch = None, -1.0, -1
    for epoch in range(sched.total_epochs):
        lr = lr_at_epoch(epoch, sched)
        losses, hist, ids = [], Counter(), []
        for idx in _batches(rng.permutation(len(fold_train)), sched.batch_size):
            scale = int(aug.scales[rng.integers(len(aug.scales))])
            pairs = resize_to_scale([augment_pair(fold_train[i], aug, rng) for i in idx], scale)
            batch = (_images_nchw(pairs), _masks(pairs))
            losses.append(train_step(model, batch, loss_fn, optimizer, lr))
            hist[str(scale)] += 1
            ids.extend(p.id for p in pairs)
        mean_loss = float(np.mean(losses))
        _check_finite(mean_loss, epoch)

        val_dsc = None
        if fold_val:
            val_dsc = evaluate_model(model, fold_val, eval_scale, cfg.evaluation.threshold)["dsc"]
        if selection == "last" or val_dsc > best_dsc:
            best_dsc = val_dsc if val_dsc is not None else best_dsc
            best_epoch = epoch
            best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
        log.append(EpochRecord(epoch, "finetune", lr, mean_loss, len(losses), dict(sorted(hist.items())), ids, val_dsc, time.time()))
        logger.info("finetune epoch %d lr=%g loss=%.6f val_dsc=%s", epoch, lr, mean_loss, val_dsc)

    model.load_state_dict(best_state)
    model.eval()
    ckpt = Checkpoint.from_model(
        model,
        phase="finetune",
        epochs=sched.total_epochs,
        seed=seed,
        split_manifest_hash=split.digest() if split is not None else "",
        selected_epoch=best_epoch,
        init="pretrained" if init is not None else "scratch",
    )
    return ckpt, log
