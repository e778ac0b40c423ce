"""Command-line entry point: ``polypssl <subcommand> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

from . import __version__
from .config import GlobalConfig, load_config
from .datasets import (
    SplitPlan,
    derive_pretrain_pool,
    generate_synthetic_corpus,
    ingest_corpus,
    list_ids,
    make_split_plan,
    write_corpus,
)
from .evaluation import emit_qualitative, emit_report, load_reports, run_cross_validation, run_synthetic_study
from .exceptions import InvalidConfigError, PolypSSLError
from .network import Checkpoint
from .seeding import set_determinism
from .training import finetune, pretrain

logger = logging.getLogger("polypssl")

OUTPUT_ROOT_ENV = "POLYPSSL_OUTPUT_ROOT"


def _out(path) -> Path:
    """Resolve a relative output path under ``$POLYPSSL_OUTPUT_ROOT`` when set."""
    path = Path(path)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not path.is_absolute():
        return Path(root) / path
    return path


def _config(args) -> GlobalConfig:
    cfg = load_config(args.config, args.set or ())
    if args.determinism and not cfg.determinism:
        cfg = cfg.replace(determinism=True)
    set_determinism(cfg.determinism)
    return cfg


def _require(value, section, field):
    if value is None:
        raise InvalidConfigError("is required for this command", section, field)
    return value


def _labeled_corpus(cfg: GlobalConfig):
    root = _require(cfg.data.root, "data", "root")
    return ingest_corpus(root, cfg.data.image_subdir, cfg.data.mask_subdir, cfg.data.n_jobs)


def _echo(cfg: GlobalConfig, path: Path):
    cfg.save(path)
    logger.info("resolved config written to %s", path)


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------


def cmd_ingest(args):
    corpus = ingest_corpus(args.data, args.image_subdir, args.mask_subdir, args.jobs)
    summary = {
        "count": len(corpus),
        "labeled": all(p.labeled for p in corpus),
        "sizes": sorted({f"{h}x{w}" for h, w in (p.source_size for p in corpus)}),
        "mean_foreground": float(sum(p.mask.mean() for p in corpus) / len(corpus)),
    }
    text = json.dumps(summary, indent=2)
    if args.out:
        _out(args.out).write_text(text + "\n", encoding="utf-8")
    print(text)


def cmd_split(args):
    labeled = list_ids(args.data, args.image_subdir)
    plan = make_split_plan(labeled, args.test_fraction, args.folds, args.seed)
    unlabeled = list_ids(args.unlabeled, args.image_subdir) if args.unlabeled else labeled
    plan = plan.with_pretrain(derive_pretrain_pool(unlabeled, plan.test_ids)).check()
    out = _out(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    plan.save(out)
    print(
        json.dumps(
            {"manifest": str(out), "sha256": plan.digest(), "test": len(plan.test_ids),
             "folds": [len(f) for f in plan.folds], "pretrain": len(plan.pretrain_ids)}
        )
    )


def cmd_synth(args):
    cfg = load_config(args.config, args.set or ())
    spec = cfg.synthetic
    changes = {k: v for k, v in (("count", args.count), ("image_size", args.size), ("seed", args.seed)) if v is not None}
    spec = replace(spec, **changes)
    out = write_corpus(generate_synthetic_corpus(spec), _out(args.out))
    print(json.dumps({"written": spec.count, "root": str(out)}))


def _pretrain_pool(cfg: GlobalConfig, split: SplitPlan):
    root = cfg.data.unlabeled_root or _require(cfg.data.root, "data", "root")
    pool = ingest_corpus(root, cfg.data.unlabeled_image_subdir, None, cfg.data.n_jobs)
    wanted = set(split.pretrain_ids) if split.pretrain_ids else set(derive_pretrain_pool([p.id for p in pool], split.test_ids))
    return [p for p in pool if p.id in wanted]


def cmd_pretrain(args):
    cfg = _config(args)
    split = SplitPlan.load(args.split_manifest)
    pool = _pretrain_pool(cfg, split)
    ckpt, log = pretrain(pool, cfg, split=split)
    out = _out(args.out)
    ckpt.save(out)
    log.save(out.with_suffix(".trainlog.jsonl"), timestamps=not cfg.determinism)
    _echo(cfg, out.with_suffix(".config.yaml"))
    print(json.dumps({"checkpoint": str(out), "epochs": len(log.records), "final_loss": log.records[-1].mean_loss}))


def cmd_finetune(args):
    cfg = _config(args)
    manifest = args.split_manifest or _require(cfg.evaluation.split_manifest, "evaluation", "split_manifest")
    split = SplitPlan.load(manifest)
    if not 0 <= args.fold < split.n_folds:
        raise InvalidConfigError(f"fold must be in [0, {split.n_folds})")
    by_id = {p.id: p for p in _labeled_corpus(cfg)}
    train_ids, val_ids = split.fold_split(args.fold)
    init = Checkpoint.load(args.init) if args.init else None
    ckpt, log = finetune(
        init, [by_id[i] for i in train_ids], [by_id[i] for i in val_ids], cfg, split=split
    )
    out = _out(args.out)
    ckpt.save(out)
    log.save(out.with_suffix(".trainlog.jsonl"), timestamps=not cfg.determinism)
    _echo(cfg, out.with_suffix(".config.yaml"))
    print(json.dumps({"checkpoint": str(out), "selected_epoch": ckpt.provenance["selected_epoch"]}))


def cmd_crossval(args):
    cfg = _config(args)
    exp = cfg.evaluation
    _require(exp.split_manifest, "evaluation", "split_manifest")
    out_dir = _out(exp.output_dir or "runs")
    exp = replace(exp, output_dir=str(out_dir))
    out_dir.mkdir(parents=True, exist_ok=True)
    _echo(cfg, out_dir / "config.yaml")
    reports = run_cross_validation(exp, cfg, _labeled_corpus(cfg))
    emit_report(reports, "markdown", out_dir / "report.md")
    emit_report(reports, "csv", out_dir / "report.csv")
    print(emit_report(reports, "markdown"), end="")


def cmd_report(args):
    reports = load_reports(args.input)
    text = emit_report(reports, args.format, _out(args.out) if args.out else None)
    print(text, end="")


def cmd_qualitative(args):
    ckpt = Checkpoint.load(args.ckpt)
    pairs = ingest_corpus(args.data, args.image_subdir, args.mask_subdir)
    if args.ids:
        keep = set(args.ids)
        pairs = [p for p in pairs if p.id in keep]
    paths = emit_qualitative(ckpt, pairs, _out(args.out), scale=args.scale)
    print(json.dumps({"panels": len(paths), "out": str(_out(args.out))}))


def cmd_synth_study(args):
    cfg = _config(args)
    out_dir = _out(cfg.study.output_dir or "synth-study")
    out_dir.mkdir(parents=True, exist_ok=True)
    _echo(cfg, out_dir / "config.yaml")
    report = run_synthetic_study(
        cfg.synthetic, cfg.study.n_labeled, cfg.study.seeds, cfg, n_test=cfg.study.n_test, output_dir=out_dir
    )
    print(json.dumps(report.to_dict(), indent=2))


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--determinism", action="store_true", help="single-threaded, seeded execution")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="config override, e.g. losses.alpha=0.5")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="polypssl", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("ingest", parents=[common], help="load a corpus and summarize it")
    p.add_argument("--data", required=True)
    p.add_argument("--image-subdir", default="images")
    p.add_argument("--mask-subdir", default="masks")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("split", parents=[common], help="write a split manifest")
    p.add_argument("--data", required=True, help="labeled corpus root")
    p.add_argument("--unlabeled", help="unlabeled corpus root for the pretraining pool")
    p.add_argument("--image-subdir", default="images")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--test-fraction", type=float, default=0.1)
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("synth", parents=[common], help="write a synthetic blob corpus")
    p.add_argument("--config")
    p.add_argument("--count", type=int)
    p.add_argument("--size", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("pretrain", parents=[common], help="inpainting pretraining")
    p.add_argument("--config", required=True)
    p.add_argument("--split-manifest", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", parents=[common], help="supervised fine-tuning of one fold")
    p.add_argument("--config", required=True)
    p.add_argument("--fold", type=int, required=True, metavar="K")
    p.add_argument("--init")
    p.add_argument("--split-manifest")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("crossval", parents=[common], help="five-fold experiment over all conditions")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_crossval)

    p = sub.add_parser("report", parents=[common], help="render a results table")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--format", choices=("md", "markdown", "csv"), default="md")
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("qualitative", parents=[common], help="input | truth | prediction panels")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--image-subdir", default="images")
    p.add_argument("--mask-subdir", default="masks")
    p.add_argument("--ids", nargs="*")
    p.add_argument("--scale", type=int, default=320)
    p.add_argument("--out", default="qualitative")
    p.set_defaults(func=cmd_qualitative)

    p = sub.add_parser("synth-study", parents=[common], help="synthetic scratch vs. pretrained study")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_synth_study)
    return parser


def dispatch(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )
    try:
        args.func(args)
    except (PolypSSLError, OSError, KeyError, ValueError) as exc:
        message = " ".join(str(exc).split())
        print(f"error: {type(exc).__name__}: {message}", file=sys.stderr)
        return 1
    return 0


def main():
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
