"""Command-line surface: flags, exit codes, artifacts, config parsing."""

import numpy as np
import pytest

from musenet import cli
from musenet import tensor as T
from musenet.dataset import SyntheticDataset


def run(argv):
    return cli.main(argv)


TINY_OVERRIDES = [
    "--set", "model.input_size=32",
    "--set", "model.stem_channels=4",
    "--set", "model.stage_channels=8,12,16,24",
    "--set", "train.epochs=2",
    "--set", "train.batch_per_platform=4",
]


@pytest.fixture(scope="module")
def cli_data(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli") / "data"
    code = run(["gen-data", "--out", str(root), "--seed", "7", "--train-ids", "8",
                "--test-ids", "4", "--distractor-ids", "3", "--views", "4", "--size", "32"])
    assert code == 0
    return root


@pytest.fixture(scope="module")
def cli_checkpoint(cli_data, tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "run"
    code = run(["train", "--data", str(cli_data), "--out", str(out), "--quiet",
                *TINY_OVERRIDES])
    assert code == 0
    return out / "model.ckpt"


class TestGenData:
    def test_tree_counts(self, cli_data):
        ds = SyntheticDataset(cli_data)
        assert len(ds.train_ids) == 8 and len(ds.test_ids) == 4
        assert ds.views_per_id == 4

    def test_rerun_is_byte_identical(self, cli_data, tmp_path):
        other = tmp_path / "again"
        assert run(["gen-data", "--out", str(other), "--seed", "7", "--train-ids", "8",
                    "--test-ids", "4", "--distractor-ids", "3", "--views", "4",
                    "--size", "32"]) == 0
        for rel in sorted(p.relative_to(other) for p in other.rglob("*.ppm")):
            assert (other / rel).read_bytes() == (cli_data / rel).read_bytes()

    def test_single_view_flag(self, tmp_path):
        root = tmp_path / "oneview"
        assert run(["gen-data", "--out", str(root), "--seed", "3", "--train-ids", "4",
                    "--test-ids", "2", "--distractor-ids", "1", "--views", "1",
                    "--size", "32"]) == 0
        ds = SyntheticDataset(root)
        assert ds.views_per_id == 1


class TestTrain:
    def test_spade_none_trains_baseline(self, cli_data, tmp_path):
        out = tmp_path / "baseline"
        code = run(["train", "--data", str(cli_data), "--out", str(out), "--quiet",
                    "--spade", "none", "--style-loss-weight", "0.0", *TINY_OVERRIDES])
        assert code == 0
        assert (out / "model.ckpt").is_file()
        log_lines = (out / "train_log.tsv").read_text().splitlines()
        assert len(log_lines) == 1 + 2  # header + one row per epoch

    def test_invalid_placement_is_usage_error(self, cli_data, tmp_path, capsys):
        code = run(["train", "--data", str(cli_data), "--out", str(tmp_path / "x"),
                    "--spade", "b9", *TINY_OVERRIDES])
        assert code == 1
        assert "b1, b2, b3" in capsys.readouterr().err

    def test_unknown_config_key_is_usage_error(self, cli_data, tmp_path, capsys):
        code = run(["train", "--data", str(cli_data), "--out", str(tmp_path / "y"),
                    "--set", "train.warmup=5", *TINY_OVERRIDES])
        assert code == 1
        assert "unknown key" in capsys.readouterr().err

    def test_config_file_with_overrides(self, cli_data, tmp_path):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("[model]\ninput_size=32\nstem_channels=4\n"
                       "stage_channels=8,12,16,24\n\n[train]\nepochs=1\n"
                       "batch_per_platform=4\n")
        out = tmp_path / "cfgrun"
        code = run(["train", "--data", str(cli_data), "--out", str(out), "--quiet",
                    "--config", str(cfg), "--set", "train.seed=55"])
        assert code == 0

    def test_malformed_config_section_rejected(self, cli_data, tmp_path, capsys):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("[optimizer]\nlr=1\n")
        code = run(["train", "--data", str(cli_data), "--out", str(tmp_path / "z"),
                    "--config", str(cfg)])
        assert code == 1


class TestEval:
    def test_seen_conditions_emit_mean(self, cli_checkpoint, cli_data, tmp_path, capsys):
        report = tmp_path / "seen.csv"
        code = run(["eval", "--model", str(cli_checkpoint), "--data", str(cli_data),
                    "--task", "d2s", "--conditions", "seen", "--report", str(report)])
        assert code == 0
        lines = report.read_text().splitlines()
        assert len(lines) == 1 + 10 + 1  # header, ten conditions, mean
        assert lines[-1].startswith("mean,d2s")

    def test_unseen_is_composite_only(self, cli_checkpoint, cli_data, tmp_path):
        report = tmp_path / "unseen.csv"
        code = run(["eval", "--model", str(cli_checkpoint), "--data", str(cli_data),
                    "--task", "d2s", "--conditions", "unseen", "--report", str(report)])
        assert code == 0
        lines = report.read_text().splitlines()
        assert len(lines) == 2
        assert lines[1].startswith("fog+rain+snow,d2s")

    def test_both_tasks_emit_both_blocks(self, cli_checkpoint, cli_data, tmp_path):
        report = tmp_path / "both.csv"
        code = run(["eval", "--model", str(cli_checkpoint), "--data", str(cli_data),
                    "--task", "both", "--conditions", "normal,dark", "--report", str(report)])
        assert code == 0
        body = report.read_text()
        assert ",d2s," in body and ",s2d," in body

    def test_unknown_condition_is_usage_error(self, cli_checkpoint, cli_data, tmp_path, capsys):
        code = run(["eval", "--model", str(cli_checkpoint), "--data", str(cli_data),
                    "--conditions", "hail", "--report", str(tmp_path / "r.csv")])
        assert code == 1

    def test_eval_is_deterministic(self, cli_checkpoint, cli_data, tmp_path):
        a, b = tmp_path / "a.csv", tmp_path / "b.csv"
        for path in (a, b):
            assert run(["eval", "--model", str(cli_checkpoint), "--data", str(cli_data),
                        "--task", "d2s", "--conditions", "fog", "--report", str(path)]) == 0
        assert a.read_bytes() == b.read_bytes()


class TestGradcheck:
    def test_single_op_passes(self, capsys):
        assert run(["gradcheck", "--ops", "residual_spade", "--trials", "3"]) == 0
        assert "PASS" in capsys.readouterr().out

    def test_unknown_op_is_usage_error(self, capsys):
        assert run(["gradcheck", "--ops", "transformer"]) == 1

    def test_perturbed_conv_backward_is_detected(self, monkeypatch, capsys):
        original = T._col2im

        def perturbed(*args, **kwargs):
            return original(*args, **kwargs) * 1.001

        monkeypatch.setattr(T, "_col2im", perturbed)
        code = run(["gradcheck", "--ops", "conv2d", "--trials", "2"])
        out = capsys.readouterr().out
        assert code == 2
        assert "conv2d" in out and "FAIL" in out
