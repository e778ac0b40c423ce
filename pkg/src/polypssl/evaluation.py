"""Cross-validation orchestration, report tables, overlays and the synthetic study."""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
from PIL import Image

from .augmentation import resize_image, resize_mask
from .datasets import ImagePair, SplitPlan, SyntheticSpec, generate_synthetic_corpus
from .exceptions import InvalidConfigError, ManifestMismatchError
from .metrics import METRIC_NAMES, MetricReport, aggregate_folds, format_cell
from .network import Checkpoint, UNet
from .seeding import derive_seed
from .training import evaluate_model, finetune, predict_probabilities, pretrain

logger = logging.getLogger(__name__)

SCRATCH = "scratch"
COLUMN_TITLES = {"dsc": "DSC", "miou": "mIoU", "precision": "Precision", "recall": "Recall"}
STUDY_NOTE = (
    "Synthetic desk-scale study: compares the direction of the effect of "
    "inpainting pretraining, not the magnitudes of the polyp benchmark."
)


@dataclass(frozen=True)
class Condition:
    name: str
    init: str = SCRATCH

    @property
    def pretrained(self):
        return self.init != SCRATCH


@dataclass(frozen=True)
class ExperimentConfig:
    split_manifest: str | None = None
    conditions: tuple[Condition, ...] = (Condition("U-Net", SCRATCH),)
    eval_scale: int = 320
    output_dir: str | None = "runs"
    selection: str = "best_val_dsc"
    threshold: float = 0.5
    native_resolution: bool = False

    def __post_init__(self):
        conds = tuple(c if isinstance(c, Condition) else Condition(**c) for c in self.conditions)
        object.__setattr__(self, "conditions", conds)
        names = [c.name for c in conds]
        if len(set(names)) != len(names):
            raise InvalidConfigError("condition names must be unique", "evaluation", "conditions")
        if self.selection not in ("best_val_dsc", "last"):
            raise InvalidConfigError("must be 'best_val_dsc' or 'last'", "evaluation", "selection")
        if self.eval_scale < 1:
            raise InvalidConfigError("must be positive", "evaluation", "eval_scale")
        if not 0.0 < self.threshold < 1.0:
            raise InvalidConfigError("must lie in (0, 1)", "evaluation", "threshold")

    def check_divisor(self, divisor: int):
        if self.eval_scale % divisor:
            raise InvalidConfigError(
                f"{self.eval_scale} is not divisible by {divisor}", "evaluation", "eval_scale"
            )


def _load_init(cond: Condition, split: SplitPlan) -> Checkpoint | None:
    if not cond.pretrained:
        return None
    path = Path(cond.init)
    if not path.is_file():
        raise ManifestMismatchError(f"condition '{cond.name}': checkpoint '{path}' not found")
    ckpt = Checkpoint.load(path)
    got = ckpt.provenance.get("split_manifest_hash")
    if got != split.digest():
        raise ManifestMismatchError(
            f"condition '{cond.name}': checkpoint was trained against split {got!r}, "
            f"experiment uses {split.digest()!r}"
        )
    return ckpt


def fold_seed(seed: int, fold: int) -> int:
    return derive_seed(seed, f"finetune/fold{fold}")


def run_cross_validation(
    exp: ExperimentConfig,
    settings,
    corpus: Sequence[ImagePair],
    split: SplitPlan | None = None,
    folds: Sequence[int] | None = None,
) -> dict[str, MetricReport]:
    """Leave-one-fold-out training for every condition, scored on the fixed test set.

    ``settings`` supplies the augmentation, network, loss and schedule
    sections. Outputs land in ``exp.output_dir/{condition}/{fold}/`` when an
    output directory is configured.
    """
    if split is None:
        if exp.split_manifest is None:
            raise InvalidConfigError("no split manifest given", "evaluation", "split_manifest")
        split = SplitPlan.load(exp.split_manifest)
    by_id = {p.id: p for p in corpus}
    missing = [i for i in split.labeled_ids if i not in by_id]
    if missing:
        raise ManifestMismatchError(f"{len(missing)} manifest IDs absent from corpus, e.g. {missing[:3]}")
    test = [by_id[i] for i in split.test_ids]
    folds = range(split.n_folds) if folds is None else folds
    eval_scale = None if exp.native_resolution else exp.eval_scale
    out_root = Path(exp.output_dir) if exp.output_dir else None

    inits = {c.name: _load_init(c, split) for c in exp.conditions}
    manifest = {"split_manifest_hash": split.digest(), "test_ids": list(split.test_ids), "conditions": {}}
    reports = {}
    for cond in exp.conditions:
        per_fold, entries = [], []
        for f in folds:
            train_ids, val_ids = split.fold_split(f)
            ckpt, log = finetune(
                inits[cond.name],
                [by_id[i] for i in train_ids],
                [by_id[i] for i in val_ids],
                settings,
                split=split,
                seed=fold_seed(settings.seed, f),
                selection=exp.selection,
            )
            scores = evaluate_model(ckpt.build(), test, eval_scale, exp.threshold)
            per_fold.append(scores)
            logger.info("%s fold %d: %s", cond.name, f, scores)
            if out_root is not None:
                fold_dir = out_root / cond.name / str(f)
                fold_dir.mkdir(parents=True, exist_ok=True)
                ckpt.save(fold_dir / "checkpoint.pt")
                log.save(fold_dir / "trainlog.jsonl")
                (fold_dir / "metrics.json").write_text(json.dumps(scores, indent=2), encoding="utf-8")
                entries.append(
                    {"fold": f, "n_train": len(train_ids), "n_val": len(val_ids), "n_test": len(test),
                     "checkpoint": str(fold_dir / "checkpoint.pt")}
                )
        reports[cond.name] = aggregate_folds(per_fold)
        manifest["conditions"][cond.name] = {"init": cond.init, "folds": entries}
        if out_root is not None:
            (out_root / cond.name / "report.json").write_text(
                json.dumps(reports[cond.name].to_dict(), indent=2), encoding="utf-8"
            )
    if out_root is not None:
        out_root.mkdir(parents=True, exist_ok=True)
        (out_root / "manifest.json").write_text(json.dumps(manifest, indent=2), encoding="utf-8")
    return reports


# --------------------------------------------------------------------------
# reports
# --------------------------------------------------------------------------


def _csv_text(reports: Mapping[str, MetricReport]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["method", "row", *METRIC_NAMES])
    for name, rep in reports.items():
        for k, fold in enumerate(rep.per_fold):
            writer.writerow([name, f"fold{k}", *(repr(float(fold[m])) for m in METRIC_NAMES)])
        writer.writerow([name, "mean", *(repr(rep.mean[m]) for m in METRIC_NAMES)])
        writer.writerow([name, "std", *(repr(rep.std[m]) for m in METRIC_NAMES)])
    return buf.getvalue()


def _markdown_text(reports: Mapping[str, MetricReport]) -> str:
    best = {m: max(rep.mean[m] for rep in reports.values()) for m in METRIC_NAMES}
    lines = [
        "| Method | " + " | ".join(COLUMN_TITLES[m] for m in METRIC_NAMES) + " |",
        "|---|" + "---|" * len(METRIC_NAMES),
    ]
    for name, rep in reports.items():
        cells = []
        for m in METRIC_NAMES:
            cell = rep.cell(m)
            # ties at presentation precision share the bold
            if len(reports) > 1 and f"{rep.mean[m]:.2f}" == f"{best[m]:.2f}":
                cell = f"**{cell}**"
            cells.append(cell)
        lines.append(f"| {name} | " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


def emit_report(reports: Mapping[str, MetricReport], format: str = "markdown", path=None) -> str:
    """Render condition reports as a CSV or markdown table; write it when ``path`` is given."""
    if not reports:
        raise ValueError("no reports to emit")
    if format in ("md", "markdown"):
        text = _markdown_text(reports)
    elif format == "csv":
        text = _csv_text(reports)
    else:
        raise ValueError(f"unknown report format '{format}'")
    if path is not None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(text, encoding="utf-8")
    return text


def read_report_csv(path) -> dict[str, MetricReport]:
    return parse_report_csv(Path(path).read_text(encoding="utf-8"))


def parse_report_csv(text: str) -> dict[str, MetricReport]:
    rows = list(csv.DictReader(io.StringIO(text)))
    grouped: dict[str, dict] = {}
    for row in rows:
        entry = grouped.setdefault(row["method"], {"per_fold": [], "mean": {}, "std": {}})
        values = {m: float(row[m]) for m in METRIC_NAMES}
        if row["row"] in ("mean", "std"):
            entry[row["row"]] = values
        else:
            entry["per_fold"].append(values)
    return {name: MetricReport.from_dict(d) for name, d in grouped.items()}


def load_reports(directory) -> dict[str, MetricReport]:
    """Collect ``{condition}/report.json`` files written by :func:`run_cross_validation`."""
    directory = Path(directory)
    found = {}
    manifest = directory / "manifest.json"
    names = (
        list(json.loads(manifest.read_text(encoding="utf-8"))["conditions"])
        if manifest.is_file()
        else sorted(p.parent.name for p in directory.glob("*/report.json"))
    )
    for name in names:
        found[name] = MetricReport.from_dict(
            json.loads((directory / name / "report.json").read_text(encoding="utf-8"))
        )
    return found


# --------------------------------------------------------------------------
# qualitative panels
# --------------------------------------------------------------------------


def _predictor(model) -> Callable:
    if isinstance(model, Checkpoint):
        model = model.build()
    if isinstance(model, UNet):
        net = model
        return lambda images: predict_probabilities(net, images)
    if callable(model):
        return model
    raise TypeError(f"cannot predict with {type(model).__name__}")


def _to_rgb8(array):
    array = np.asarray(array, dtype=np.float32)
    if array.ndim == 2:
        array = np.repeat(array[..., None], 3, axis=2)
    return np.clip(np.rint(array * 255.0), 0, 255).astype(np.uint8)


def emit_qualitative(model, pairs: Sequence[ImagePair], out_dir, scale: int | None = None, threshold: float = 0.5):
    """Write one ``input | ground truth | prediction`` PNG panel per pair.

    ``model`` is a :class:`Checkpoint`, a :class:`UNet`, or any callable
    mapping a list of H x W x 3 images to H x W probability maps.
    """
    if not pairs:
        raise ValueError("no pairs to render")
    predict = _predictor(model)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    images = [p.image if scale is None else resize_image(p.image, scale) for p in pairs]
    masks = [p.mask if scale is None else resize_mask(p.mask, scale) for p in pairs]
    probs = predict(images)
    paths = []
    for pair, image, mask, prob in zip(pairs, images, masks, probs):
        pred = (np.asarray(prob) >= threshold).astype(np.float32)
        panel = np.concatenate([_to_rgb8(image), _to_rgb8(mask), _to_rgb8(pred)], axis=1)
        path = out_dir / f"{pair.id}.png"
        Image.fromarray(panel, "RGB").save(path)
        paths.append(path)
    return paths


# --------------------------------------------------------------------------
# synthetic study
# --------------------------------------------------------------------------


@dataclass
class StudyReport:
    rows: list[dict] = field(default_factory=list)
    note: str = STUDY_NOTE

    def dsc(self, condition):
        return [r["dsc"] for r in self.rows if r["condition"] == condition]

    @property
    def mean_dsc(self):
        return {c: float(np.mean(self.dsc(c))) for c in ("scratch", "pretrained")}

    @property
    def mean_difference(self):
        m = self.mean_dsc
        return m["pretrained"] - m["scratch"]

    @property
    def pretrained_wins(self):
        return sum(p > s for p, s in zip(self.dsc("pretrained"), self.dsc("scratch")))

    def to_dict(self):
        return {
            "note": self.note,
            "rows": self.rows,
            "mean_dsc": self.mean_dsc,
            "mean_difference": self.mean_difference,
            "pretrained_wins": self.pretrained_wins,
            "n_seeds": len(self.dsc("scratch")),
        }


def split_synthetic(corpus: Sequence[ImagePair], n_labeled: int, seed: int):
    """Fixed labeled subset and the unlabeled remainder of a synthetic corpus."""
    order = np.random.default_rng(derive_seed(seed, "synthetic/labeled")).permutation(len(corpus))
    labeled = [corpus[i] for i in sorted(order[:n_labeled])]
    unlabeled = [
        ImagePair(p.id, p.image, np.zeros_like(p.mask), p.source_size, labeled=False)
        for p in (corpus[i] for i in sorted(order[n_labeled:]))
    ]
    return labeled, unlabeled


def run_synthetic_study(
    spec: SyntheticSpec,
    n_labeled: int,
    seeds: Sequence[int],
    settings,
    n_test: int = 40,
    output_dir=None,
) -> StudyReport:
    """Pretrain once on the unlabeled bulk, then fine-tune scratch vs. pretrained per seed.

    Test images come from a separately seeded corpus so no test image is seen
    during pretraining. Fine-tuning keeps the last epoch (no validation split).
    """
    if n_labeled < 10:
        raise ValueError(f"n_labeled must be >= 10, got {n_labeled}")
    if len(seeds) < 3:
        raise ValueError(f"need at least 3 seeds, got {len(seeds)}")
    if spec.count <= n_labeled:
        raise ValueError("synthetic corpus must be larger than the labeled subset")

    corpus = generate_synthetic_corpus(spec)
    test_spec = replace(spec, count=n_test, seed=derive_seed(spec.seed, "synthetic/test"))
    test = generate_synthetic_corpus(test_spec)
    labeled, unlabeled = split_synthetic(corpus, n_labeled, spec.seed)
    scale = None if settings.evaluation.native_resolution else settings.evaluation.eval_scale

    pretrained, pre_log = pretrain(unlabeled, settings, seed=settings.seed)
    report = StudyReport()
    for seed in seeds:
        for condition, init in (("scratch", None), ("pretrained", pretrained)):
            ckpt, _ = finetune(init, labeled, [], settings, seed=seed, selection="last")
            scores = evaluate_model(ckpt.build(), test, scale, settings.evaluation.threshold)
            report.rows.append({"seed": int(seed), "condition": condition, **scores})
            logger.info("study seed %s %s: dsc=%.4f", seed, condition, scores["dsc"])

    if output_dir is not None:
        out = Path(output_dir)
        out.mkdir(parents=True, exist_ok=True)
        pretrained.save(out / "pretrain.pt")
        pre_log.save(out / "pretrain.jsonl")
        (out / "study.json").write_text(json.dumps(report.to_dict(), indent=2), encoding="utf-8")
    return report
