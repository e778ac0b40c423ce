"""Self-supervised inpainting pretraining and Tversky fine-tuning of a U-Net."""

__version__ = "0.1.0"

from .augmentation import AugmentConfig, DropoutMask, apply_dropout, augment_pair, resize_to_scale, sample_dropout_mask
from .datasets import (
    ImagePair,
    SplitPlan,
    SyntheticSpec,
    derive_pretrain_pool,
    generate_synthetic_corpus,
    ingest_corpus,
    make_split_plan,
    write_corpus,
)
from .losses import ReconLossConfig, TverskyParams, masked_reconstruction_loss, tversky_index, tversky_loss
from .metrics import ConfusionCounts, MetricReport, aggregate_folds, compute_metrics, confusion_counts
from .network import Checkpoint, UNetConfig, build_unet, forward, transfer_weights
from .training import TrainLog, TrainSchedule, finetune, lr_at_epoch, pretrain, train_step
from .evaluation import ExperimentConfig, emit_qualitative, emit_report, run_cross_validation, run_synthetic_study
from .config import GlobalConfig, load_config
from .estimators import InpaintingPretrainer, UNetSegmenter
