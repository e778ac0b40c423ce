"""Acceptance checks. Each test is one criterion; a summary line per criterion prints at the end."""

import json
import subprocess
import sys
import time

import numpy as np
import pytest
import torch
import yaml

from conftest import tiny_settings
from polypssl.config import from_dict
from polypssl.datasets import SyntheticSpec, derive_pretrain_pool, generate_synthetic_corpus, make_split_plan, write_corpus
from polypssl.evaluation import emit_report, parse_report_csv, run_synthetic_study
from polypssl.losses import ReconLossConfig, TverskyParams, masked_reconstruction_loss, tversky_index, tversky_loss
from polypssl.metrics import METRIC_NAMES, aggregate_folds, compute_metrics, confusion_counts, format_cell
from polypssl.network import UNetConfig, build_unet, count_parameters, forward
from polypssl.seeding import set_determinism
from polypssl.training import FINETUNE_SCHEDULE, PRETRAIN_SCHEDULE, finetune, lr_at_epoch, pretrain
from test_losses import central_difference, relative_error, soft_dice
from test_metrics import brute_force, random_pairs
from test_network import analytic_parameter_count


class Stopwatch:
    def __enter__(self):
        self.start = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.seconds = time.perf_counter() - self.start


@pytest.mark.acceptance(1, "split arithmetic 140 / 36 / 20 and 980")
def test_split_arithmetic():
    with Stopwatch() as clock:
        unlabeled = [f"img{i:04d}" for i in range(1000)]
        labeled = unlabeled[::5][:196]
        plan = make_split_plan(labeled, 0.1, 5, seed=0)
        plan = plan.with_pretrain(derive_pretrain_pool(unlabeled, plan.test_ids)).check()
        assert len(plan.test_ids) == 20
        assert sorted(len(f) for f in plan.folds) == [35, 35, 35, 35, 36]
        big = max(range(5), key=lambda k: len(plan.folds[k]))
        train, val = plan.fold_split(big)
        assert (len(train), len(val)) == (140, 36)
        assert len(plan.pretrain_ids) == 980
        assert not set(plan.pretrain_ids) & set(plan.test_ids)
        assert set(plan.test_ids).union(*plan.folds) == set(labeled)
    assert clock.seconds < 1.0


@pytest.mark.acceptance(2, "masked reconstruction loss: fixtures, masked gradient, finite differences")
def test_masked_reconstruction_loss():
    rng = np.random.default_rng(2)
    total, mean = ReconLossConfig("sum"), ReconLossConfig("mean_over_masked")
    with Stopwatch() as clock:
        x = np.array([[1.0, 0.0], [0.0, 1.0]])[..., None]
        m = np.array([[1, 1], [0, 0]])
        assert masked_reconstruction_loss(x, np.full((2, 2, 1), 0.5), m, total).item() == 0.5
        assert masked_reconstruction_loss(x, np.full((2, 2, 1), 0.5), m, mean).item() == 0.25

        x = np.zeros((2, 3, 3))
        x[0, 0] = [1.0, 2.0, 3.0]
        m = np.zeros((2, 3))
        m[0, 0] = 1
        assert masked_reconstruction_loss(x, np.zeros((2, 3, 3)), m, total).item() == 14.0

        x, out = np.zeros((3, 3, 3)), np.full((3, 3, 3), 7.0)
        out[1, 1] = [1.0, 1.0, 0.0]
        m = np.zeros((3, 3))
        m[1, 1] = 1
        assert masked_reconstruction_loss(x, out, m, total).item() == 2.0
        assert masked_reconstruction_loss(x, out, m, mean).item() == 2.0 / 3

        for cfg in (total, mean):
            x = rng.random((8, 8, 3))
            out0 = rng.random((8, 8, 3))
            m = (rng.random((8, 8)) < 0.4).astype(np.float64)
            out = torch.tensor(out0, requires_grad=True)
            masked_reconstruction_loss(torch.tensor(x), out, m, cfg).backward()
            grad = out.grad.numpy()
            assert np.all(grad[m == 0] == 0.0)
            numeric = central_difference(lambda o: masked_reconstruction_loss(x, o, m, cfg).item(), out0.copy())
            assert relative_error(grad, numeric) < 1e-4
    assert clock.seconds < 10.0


@pytest.mark.acceptance(3, "Tversky index: hand value, soft Dice identity, finite differences")
def test_tversky():
    rng = np.random.default_rng(3)
    with Stopwatch() as clock:
        pred = np.array([1, 1, 1, 0, 0], float)
        gt = np.array([1, 1, 0, 1, 0], float)
        assert abs(tversky_index(pred, gt, TverskyParams(0.4, 0.6, 0.0)).item() - 2 / 3) < 1e-12

        for eps in (0.0, 1.0):
            for _ in range(100):
                p, g = rng.random((8, 8)), (rng.random((8, 8)) < 0.5).astype(float)
                ti = tversky_index(p, g, TverskyParams(0.5, 0.5, eps)).item()
                assert abs(ti - soft_dice(p, g, 2 * eps)) < 1e-12

        params = TverskyParams()
        pred0 = rng.uniform(0.05, 0.95, (3, 8, 8))
        gt = (rng.random((3, 8, 8)) < 0.4).astype(float)
        pred = torch.tensor(pred0, requires_grad=True)
        tversky_loss(pred, torch.tensor(gt), params).backward()
        numeric = central_difference(lambda v: tversky_loss(v, gt, params).item(), pred0.copy())
        assert relative_error(pred.grad.numpy(), numeric) < 1e-4
    assert clock.seconds < 10.0


@pytest.mark.acceptance(4, "metrics equal a per-pixel brute-force oracle on 1000 pairs")
def test_metric_oracle():
    rng = np.random.default_rng(4)
    pairs = random_pairs(rng, 1000)
    with Stopwatch() as clock:
        degenerate = 0
        for pred, gt in pairs:
            assert compute_metrics(confusion_counts(pred, gt)) == brute_force(pred, gt)
            degenerate += not (pred >= 0.5).any() or not gt.any()
        assert degenerate >= 300
    assert clock.seconds < 30.0


@pytest.mark.acceptance(5, "learning-rate schedule and 65-epoch log audit")
def test_schedule_fidelity():
    for e in range(65):
        assert lr_at_epoch(e, PRETRAIN_SCHEDULE) == (1e-5 if e <= 49 else 1e-6)
        assert lr_at_epoch(e, FINETUNE_SCHEDULE) == (1e-4 if e <= 49 else 1e-5)
    images = generate_synthetic_corpus(SyntheticSpec(count=4, image_size=32, radius_range=(3, 8), seed=5))
    cfg = tiny_settings(
        network={"depth": 1, "base_channels": 2},
        augment={"scales": [16]},
        schedule_pretrain={"total_epochs": 65, "switch_epoch": 50, "high_lr": 1e-5, "low_lr": 1e-6},
        schedule_finetune={"total_epochs": 65, "switch_epoch": 50, "high_lr": 1e-4, "low_lr": 1e-5},
        evaluation={"eval_scale": 16},
    )
    assert cfg.schedule_pretrain == PRETRAIN_SCHEDULE and cfg.schedule_finetune == FINETUNE_SCHEDULE
    init, pre_log = pretrain(images, cfg)
    _, ft_log = finetune(init, images[:3], images[3:], cfg)
    assert len(pre_log.records) == len(ft_log.records) == 65
    assert pre_log.audit(PRETRAIN_SCHEDULE) and ft_log.audit(FINETUNE_SCHEDULE)


@pytest.mark.acceptance(6, "depth-2 U-Net overfits 4 images: Tversky loss < 0.05 within 200 steps")
def test_overfit_sanity():
    images = generate_synthetic_corpus(SyntheticSpec(count=4, image_size=64, radius_range=(6, 16), seed=2))
    cfg = tiny_settings(
        augment={"scales": [64], "flip_prob": 0.0, "rotation_degrees": [0]},
        network={"depth": 2, "base_channels": 16},
        # one step per epoch, so epochs count steps
        schedule_finetune={"total_epochs": 200, "switch_epoch": 199, "high_lr": 1e-2, "low_lr": 1e-3, "batch_size": 4},
        evaluation={"eval_scale": 64, "selection": "last"},
    )
    with Stopwatch() as clock:
        _, log = finetune(None, images, [], cfg)
    assert sum(r.steps for r in log.records) == 200
    assert min(r.mean_loss for r in log.records) < 0.05
    assert clock.seconds < 300.0


@pytest.mark.acceptance(7, "spatial size kept at 192/320/512 and default parameter count")
def test_shape_and_architecture():
    model = build_unet(UNetConfig()).eval()
    assert count_parameters(model) == analytic_parameter_count(UNetConfig())
    with torch.no_grad():
        for size in (192, 320, 512):
            out = forward(model, torch.rand(4, size, size, 3))
            assert out.shape == (4, size, size, 1)


def _run_pretrain_cli(workdir, config, manifest, name):
    out = workdir / f"{name}.pt"
    cmd = [sys.executable, "-m", "polypssl.cli", "pretrain", "--determinism", "--config", str(config),
           "--split-manifest", str(manifest), "--out", str(out)]
    subprocess.run(cmd, check=True, capture_output=True, text=True)
    return out.read_bytes(), (workdir / f"{name}.trainlog.jsonl").read_bytes()


@pytest.mark.acceptance(8, "deterministic pretraining: identical logs and checkpoints")
def test_determinism(tmp_path):
    write_corpus(generate_synthetic_corpus(SyntheticSpec(count=12, image_size=64, radius_range=(4, 12), seed=1)),
                 tmp_path / "labeled")
    write_corpus(generate_synthetic_corpus(SyntheticSpec(count=8, image_size=64, radius_range=(4, 12), seed=2)),
                 tmp_path / "unlabeled")
    plan = make_split_plan([f"synth-1-{i:05d}" for i in range(12)], 0.1, 5, seed=0)
    plan.with_pretrain([f"synth-2-{i:05d}" for i in range(8)]).save(tmp_path / "plan.json")
    config = {
        "data": {"root": str(tmp_path / "labeled"), "unlabeled_root": str(tmp_path / "unlabeled")},
        "augment": {"scales": [32, 48, 64], "max_patch_side": 24},
        "network": {"depth": 3, "base_channels": 8},
        "schedule_pretrain": {"total_epochs": 2, "switch_epoch": 1},
        "evaluation": {"eval_scale": 64},
    }
    (tmp_path / "c.yaml").write_text(yaml.safe_dump(config))
    a = _run_pretrain_cli(tmp_path, tmp_path / "c.yaml", tmp_path / "plan.json", "a")
    b = _run_pretrain_cli(tmp_path, tmp_path / "c.yaml", tmp_path / "plan.json", "b")
    records = [json.loads(line) for line in a[1].splitlines()]
    assert len(records) == 2 and "wall_time" not in records[0]
    assert {i for r in records for i in r["ids"]} == {f"synth-2-{i:05d}" for i in range(8)}
    assert a[1] == b[1]
    assert a[0] == b[0]


STUDY_SETTINGS = {
    "augment": {"scales": [128], "max_patch_side": 40},
    "network": {"depth": 3, "base_channels": 16},
    "schedule_pretrain": {"total_epochs": 5, "switch_epoch": 4, "high_lr": 1e-3, "low_lr": 1e-4},
    "schedule_finetune": {"total_epochs": 15, "switch_epoch": 12, "high_lr": 1e-3, "low_lr": 1e-4},
    "evaluation": {"eval_scale": 128, "output_dir": None},
}


@pytest.mark.slow
@pytest.mark.acceptance(9, "synthetic study: pretrained beats scratch on mean DSC and in 2 of 3 seeds")
def test_synthetic_benefit():
    set_determinism(True)
    try:
        with Stopwatch() as clock:
            report = run_synthetic_study(
                SyntheticSpec(count=220, image_size=128), 20, [0, 1, 2], from_dict(STUDY_SETTINGS)
            )
    finally:
        set_determinism(False)
    means = report.mean_dsc
    print(f"\nsynthetic study: scratch {report.dsc('scratch')} pretrained {report.dsc('pretrained')}")
    assert means["pretrained"] >= means["scratch"]
    assert report.pretrained_wins >= 2
    assert clock.seconds < 1800.0


@pytest.mark.acceptance(10, "report cell format and CSV round trip")
def test_report_formatting():
    assert format_cell(0.601, 0.049) == "0.60±0.05"
    rng = np.random.default_rng(10)
    reports = {
        name: aggregate_folds([dict(zip(METRIC_NAMES, rng.random(4))) for _ in range(5)])
        for name in ("U-Net", "SSL U-Net")
    }
    back = parse_report_csv(emit_report(reports, "csv"))
    for name, rep in reports.items():
        for m in METRIC_NAMES:
            assert abs(back[name].mean[m] - rep.mean[m]) <= 1e-9
            assert abs(back[name].std[m] - rep.std[m]) <= 1e-9
            for a, b in zip(back[name].per_fold, rep.per_fold):
                assert abs(a[m] - b[m]) <= 1e-9
    assert "0.60±0.05" in emit_report(
        {"x": aggregate_folds([{m: 0.601 + d for m in METRIC_NAMES} for d in (-0.049, 0.0, 0.049)])}, "md"
    )
