import json
import subprocess
import sys

import pytest
import yaml

from polypssl.cli import dispatch
from polypssl.config import GlobalConfig, from_dict, load_config
from polypssl.datasets import SplitPlan, SyntheticSpec, generate_synthetic_corpus, write_corpus
from polypssl.exceptions import InvalidConfigError
from polypssl.network import Checkpoint


class TestConfig:
    def test_empty_file_gives_defaults(self, tmp_path):
        (tmp_path / "c.yaml").write_text("")
        cfg = load_config(tmp_path / "c.yaml")
        assert cfg == GlobalConfig()
        assert (cfg.losses.alpha, cfg.losses.beta, cfg.losses.smooth) == (0.4, 0.6, 1.0)
        assert cfg.augment.scales == (192, 320, 512)
        assert cfg.augment.max_patch_side == 150
        assert (cfg.schedule_pretrain.high_lr, cfg.schedule_pretrain.low_lr) == (1e-5, 1e-6)
        assert (cfg.schedule_finetune.high_lr, cfg.schedule_finetune.low_lr) == (1e-4, 1e-5)
        assert cfg.schedule_finetune.total_epochs == 65 and cfg.schedule_finetune.switch_epoch == 50
        assert cfg.schedule_finetune.batch_size == 4
        assert cfg.evaluation.eval_scale == 320
        assert (cfg.network.depth, cfg.network.base_channels) == (4, 64)

    def test_override(self):
        cfg = load_config(None, ["losses.alpha=0.5", "seed=9", "augment.scales=[32, 64]"])
        assert cfg.losses.alpha == 0.5 and cfg.seed == 9 and cfg.augment.scales == (32, 64)
        assert cfg.losses.beta == 0.6

    def test_override_beats_file(self, tmp_path):
        (tmp_path / "c.yaml").write_text("losses:\n  alpha: 0.3\n")
        assert load_config(tmp_path / "c.yaml", ["losses.alpha=0.2"]).losses.alpha == 0.2

    def test_partial_schedule_keeps_phase_defaults(self):
        cfg = from_dict({"schedule_pretrain": {"total_epochs": 10, "switch_epoch": 5}})
        assert cfg.schedule_pretrain.high_lr == 1e-5

    def test_negative_alpha_names_field(self):
        with pytest.raises(InvalidConfigError) as info:
            load_config(None, ["losses.alpha=-1"])
        assert info.value.section == "losses" and info.value.field == "alpha"
        assert str(info.value).startswith("losses.alpha:")

    @pytest.mark.parametrize("raw", [{"losses": {"gamma": 1}}, {"optimizer": {}}, {"determinism": "yes"}])
    def test_unknown_or_bad_keys(self, raw):
        with pytest.raises(InvalidConfigError):
            from_dict(raw)

    def test_yaml_error_reports_line(self, tmp_path):
        (tmp_path / "c.yaml").write_text("losses:\n  alpha: 0.4\n  beta: [0.6\n")
        with pytest.raises(InvalidConfigError, match="line"):
            load_config(tmp_path / "c.yaml")

    def test_scales_must_fit_depth(self):
        with pytest.raises(InvalidConfigError, match="divisible"):
            from_dict({"augment": {"scales": [200]}})
        with pytest.raises(InvalidConfigError, match="divisible"):
            from_dict({"evaluation": {"eval_scale": 100}})

    def test_yaml_round_trip(self, tmp_path):
        cfg = load_config(None, ["losses.alpha=0.45", "evaluation.conditions=[{name: SSL, init: a.pt}]"])
        cfg.save(tmp_path / "echo.yaml")
        assert load_config(tmp_path / "echo.yaml") == cfg


@pytest.fixture(scope="module")
def corpus_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    write_corpus(generate_synthetic_corpus(SyntheticSpec(count=12, image_size=32, radius_range=(3, 8), seed=4)), root)
    return root


TINY = [
    "--set", "network.depth=2", "--set", "network.base_channels=4",
    "--set", "augment.scales=[32]", "--set", "augment.max_patch_side=12",
    "--set", "schedule_pretrain.total_epochs=2", "--set", "schedule_pretrain.switch_epoch=1",
    "--set", "schedule_finetune.total_epochs=2", "--set", "schedule_finetune.switch_epoch=1",
    "--set", "evaluation.eval_scale=32",
]


class TestCli:
    def test_split(self, corpus_dir, tmp_path, capsys):
        code = dispatch(["split", "--data", str(corpus_dir), "--seed", "42", "--out", str(tmp_path / "plan.json")])
        assert code == 0
        plan = SplitPlan.load(tmp_path / "plan.json")
        assert len(plan.test_ids) == 1 and plan.n_folds == 5
        assert json.loads(capsys.readouterr().out)["sha256"] == plan.digest()

    def test_unknown_subcommand(self):
        assert dispatch(["frobnicate"]) == 2

    def test_crossval_needs_config(self):
        assert dispatch(["crossval"]) == 2

    def test_error_is_one_line(self, tmp_path, capsys):
        (tmp_path / "c.yaml").write_text("losses:\n  alpha: -1\n")
        code = dispatch(["pretrain", "--config", str(tmp_path / "c.yaml"), "--split-manifest", "x", "--out", "y"])
        err = capsys.readouterr().err
        assert code == 1
        assert err.count("\n") == 1 and err.startswith("error: InvalidConfigError: losses.alpha")

    def test_ingest(self, corpus_dir, capsys):
        assert dispatch(["ingest", "--data", str(corpus_dir)]) == 0
        assert json.loads(capsys.readouterr().out)["count"] == 12

    def test_synth(self, tmp_path):
        assert dispatch(["synth", "--count", "3", "--size", "32", "--set", "synthetic.radius_range=[3, 8]",
                         "--out", str(tmp_path / "s")]) == 0
        assert len(list((tmp_path / "s" / "images").iterdir())) == 3

    def test_end_to_end(self, corpus_dir, tmp_path, capsys, monkeypatch):
        monkeypatch.setenv("POLYPSSL_OUTPUT_ROOT", str(tmp_path))
        cfg_path = tmp_path / "c.yaml"
        cfg_path.write_text(yaml.safe_dump({"data": {"root": str(corpus_dir)}}))
        assert dispatch(["split", "--data", str(corpus_dir), "--test-fraction", "0.25", "--folds", "3",
                         "--out", "plan.json"]) == 0
        plan = str(tmp_path / "plan.json")
        assert dispatch(["pretrain", "--config", str(cfg_path), "--split-manifest", plan, "--out", "pre.pt", *TINY]) == 0
        assert Checkpoint.load(tmp_path / "pre.pt").provenance["phase"] == "pretrain"
        assert (tmp_path / "pre.trainlog.jsonl").is_file() and (tmp_path / "pre.config.yaml").is_file()

        assert dispatch(["finetune", "--config", str(cfg_path), "--fold", "0", "--init", str(tmp_path / "pre.pt"),
                         "--split-manifest", plan, "--out", "ft.pt", *TINY]) == 0
        assert Checkpoint.load(tmp_path / "ft.pt").provenance["init"] == "pretrained"

        conditions = f"evaluation.conditions=[{{name: U-Net}}, {{name: SSL, init: '{tmp_path / 'pre.pt'}'}}]"
        assert dispatch(["crossval", "--config", str(cfg_path), *TINY, "--set", f"evaluation.split_manifest={plan}",
                         "--set", "evaluation.output_dir=runs", "--set", conditions]) == 0
        assert "| SSL |" in capsys.readouterr().out
        assert (tmp_path / "runs" / "report.csv").is_file()

        assert dispatch(["report", "--in", "runs", "--format", "csv"]) != 0  # --in is not output-rooted
        capsys.readouterr()
        assert dispatch(["report", "--in", str(tmp_path / "runs"), "--format", "csv", "--out", "table.csv"]) == 0
        assert (tmp_path / "table.csv").read_text() == (tmp_path / "runs" / "report.csv").read_text()

        assert dispatch(["qualitative", "--ckpt", str(tmp_path / "ft.pt"), "--data", str(corpus_dir),
                         "--scale", "32", "--out", "panels"]) == 0
        assert len(list((tmp_path / "panels").glob("*.png"))) == 12

    def test_module_entry_point(self):
        out = subprocess.run([sys.executable, "-m", "polypssl.cli", "--version"], capture_output=True, text=True)
        assert out.returncode == 0 and out.stdout.strip()
