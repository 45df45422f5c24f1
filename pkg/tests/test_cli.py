"""
End-to-end runs of the command-line subcommands
"""

import numpy as np
import pandas as pd
import pytest

from modules.cli import EXIT_OK, EXIT_VALIDATION, gradcheck_suite, run_command, scenario_spec
from modules.config import RunConfig
from modules.data_io import load_checkpoint, load_image

SMALL = "image_size=16\nchannels=4,8,8\nembed_dim=8\ndecoder_channels=8\nsteps=2\nlog_every=1\n"


@pytest.fixture
def small_cfg(tmp_path):
    path = tmp_path / "small.cfg"
    path.write_text(SMALL)
    return path


def run(*argv):
    return run_command([str(a) for a in argv])


def artifacts(manifest_path):
    text = manifest_path.read_text()
    return text.split("[artifacts]", 1)[1]


class TestArguments:
    def test_help(self):
        assert run("--help") == EXIT_OK

    def test_unknown_subcommand(self):
        assert run("frobnicate") == EXIT_VALIDATION

    def test_missing_subcommand(self):
        assert run() == EXIT_VALIDATION

    def test_bad_config_value(self, tmp_path):
        path = tmp_path / "bad.cfg"
        path.write_text("lambda1=frog\n")
        assert run("synth", "--config", path, "--out", tmp_path / "run") == EXIT_VALIDATION

    def test_missing_config_file(self, tmp_path):
        assert run("synth", "--config", tmp_path / "absent.cfg", "--out", tmp_path / "run") == EXIT_VALIDATION

    def test_config_path_is_directory(self, tmp_path):
        assert run("train", "--config", tmp_path, "--out", tmp_path / "run") == EXIT_VALIDATION

    def test_config_not_utf8(self, tmp_path):
        path = tmp_path / "latin.cfg"
        path.write_bytes(b"\xffsteps=2\n")
        assert run("synth", "--config", path, "--out", tmp_path / "run") == EXIT_VALIDATION

    def test_missing_input_image(self, tmp_path, small_cfg):
        code = run("superres", "--config", small_cfg, "--lr", tmp_path / "no.pgm", "--ref", tmp_path / "no.pgm",
                   "--out", tmp_path / "run")
        assert code == EXIT_VALIDATION


class TestScenario:
    def test_mismatch_halves_reference_anatomy(self):
        spec = scenario_spec(RunConfig(), "scale-mismatch", seed=3)
        assert spec.pd_scale == 0.5
        assert spec.clutter >= 0.1

    def test_aligned_uses_config(self):
        spec = scenario_spec(RunConfig(scale_ratio=1.0, clutter=0.0), "aligned", seed=3)
        assert (spec.t2_scale, spec.pd_scale, spec.clutter) == (1.0, 1.0, 0.0)


class TestSynth:
    def test_outputs_and_determinism(self, tmp_path, small_cfg):
        for name in ("a", "b"):
            assert run("synth", "--config", small_cfg, "--seed", 5, "--out", tmp_path / name) == EXIT_OK
        for artifact in ("t2_hr.pgm", "t2_lr.pgm", "pd.pgm", "foreground.pgm", "correspondence.ftns"):
            assert (tmp_path / "a" / artifact).read_bytes() == (tmp_path / "b" / artifact).read_bytes()
        assert artifacts(tmp_path / "a" / "manifest.txt") == artifacts(tmp_path / "b" / "manifest.txt")
        assert load_image(tmp_path / "a" / "t2_lr.pgm").shape == (1, 4, 4)
        assert (tmp_path / "a" / "run.log").exists()

    def test_superres_from_synth(self, tmp_path, small_cfg):
        assert run("synth", "--config", small_cfg, "--out", tmp_path / "data") == EXIT_OK
        code = run("superres", "--config", small_cfg, "--lr", tmp_path / "data" / "t2_lr.pgm",
                   "--ref", tmp_path / "data" / "pd.pgm", "--out", tmp_path / "sr")
        assert code == EXIT_OK
        assert load_image(tmp_path / "sr" / "sr.pgm").shape == (1, 16, 16)
        assert (tmp_path / "sr" / "bicubic.pgm").exists()


class TestAlign:
    def test_accuracy_table(self, tmp_path, small_cfg):
        out = tmp_path / "align"
        assert run("align", "--config", small_cfg, "--seed", 3, "--scenes", 2, "--out", out) == EXIT_OK
        table = pd.read_csv(out / "align.csv")
        assert list(table.columns) == ["scene", "ca", "sa", "ma", "fa"]
        assert len(table) == 2
        assert table[["ca", "sa", "ma", "fa"]].to_numpy().min() >= 0.0
        assert table[["ca", "sa", "ma", "fa"]].to_numpy().max() <= 1.0
        for name in ("ca", "sa", "ma", "fa"):
            assert load_image(out / f"match_map_{name}.pgm").shape == (1, 16, 16)
        assert (out / "report.json").exists()

    @pytest.mark.slow
    def test_flexible_beats_fixed_scale_on_mismatch(self, tmp_path):
        out = tmp_path / "align"
        assert run("align", "--scenario", "scale-mismatch", "--seed", 3, "--scenes", 6, "--out", out) == EXIT_OK
        table = pd.read_csv(out / "align.csv")
        assert len(table) == 6
        assert (table["fa"] >= table["ca"]).all()
        assert table["fa"].mean() > table["ca"].mean()

    def test_scene_count_validated(self, tmp_path, small_cfg):
        assert run("align", "--config", small_cfg, "--scenes", 0, "--out", tmp_path / "x") == EXIT_VALIDATION


class TestTrainAndEval:
    def test_train_then_eval(self, tmp_path, small_cfg):
        train_dir, eval_dir = tmp_path / "train", tmp_path / "eval"
        assert run("train", "--config", small_cfg, "--out", train_dir) == EXIT_OK
        history = pd.read_csv(train_dir / "loss_history.csv")
        assert history["step"].tolist() == [1, 2]
        assert "decoder.out.weight" in load_checkpoint(train_dir / "model.ftns")

        code = run("eval", "--config", small_cfg, "--checkpoint", train_dir / "model.ftns", "--pairs", 2,
                   "--out", eval_dir)
        assert code == EXIT_OK
        metrics = pd.read_csv(eval_dir / "metrics.csv")
        assert list(metrics.columns) == ["image_id", "psnr_db", "ssim", "l1", "fr", "total"]
        assert metrics["image_id"].tolist() == ["pair000", "pair001"]
        assert (eval_dir / "residual_pair000.pgm").exists()

    def test_manifest_hashes_loss_curve(self, tmp_path, small_cfg):
        pytest.importorskip("matplotlib")
        out = tmp_path / "train"
        assert run("train", "--config", small_cfg, "--steps", 1, "--out", out) == EXIT_OK
        assert (out / "loss_curve.png").exists()
        assert "  loss_curve.png" in artifacts(out / "manifest.txt")

    def test_training_is_reproducible(self, tmp_path, small_cfg):
        for name in ("a", "b"):
            assert run("train", "--config", small_cfg, "--steps", 1, "--out", tmp_path / name) == EXIT_OK
        assert (tmp_path / "a" / "model.ftns").read_bytes() == (tmp_path / "b" / "model.ftns").read_bytes()
        assert (tmp_path / "a" / "sr.pgm").read_bytes() == (tmp_path / "b" / "sr.pgm").read_bytes()

    def test_untrained_model_never_loses_to_bicubic(self, tmp_path, small_cfg):
        out = tmp_path / "eval"
        assert run("eval", "--config", small_cfg, "--pairs", 1, "--noise", "motion:length=3", "--out", out) == EXIT_OK
        model = pd.read_csv(out / "metrics.csv")
        baseline = pd.read_csv(out / "baseline.csv")
        assert model["psnr_db"].iloc[0] >= baseline["psnr_db"].iloc[0] - 1e-9

    def test_bad_noise_spec(self, tmp_path, small_cfg):
        code = run("eval", "--config", small_cfg, "--noise", "blur:length=3", "--out", tmp_path / "x")
        assert code == EXIT_VALIDATION


class TestGradcheck:
    def test_suite_passes(self):
        table = gradcheck_suite(seed=7)
        assert len(table) == 12
        assert table["passed"].all()
        assert np.all(table["pass_fraction"] >= 0.99)

    def test_command_writes_table(self, tmp_path):
        out = tmp_path / "gc"
        assert run("gradcheck", "--seed", 7, "--samples", 10, "--out", out) == EXIT_OK
        assert len(pd.read_csv(out / "gradcheck.csv")) == 12
