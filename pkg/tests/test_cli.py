"""Tests for the command-line interface."""

import pandas as pd
import pytest
import yaml
from click.testing import CliRunner

from tri_branch_fusion.cli import EXIT_CONFIG, EXIT_DATA, main

TINY_RUN = """
model:
  image:
    input_shape: [1, 4, 4, 4]
    stages:
      - {channels: 2, pool: 2}
      - {channels: 3}
  tabular: {n_attr: 3, embed_dim: 4, depth: 1, heads: 2, ff_hidden: 4}
  fusion: mmtm_adapted
  fusion_options:
    {hidden_dim: 4, depth: 1, heads: 2, proj_kernel: 1, proj_stride: 1,
     ff_hidden: 4}
train:
  epochs: 1
  batch: 4
  group_size: 4
  group_min_positive: 2
  seed: 1
data:
  synth:
    n_cases: 24
    volume_shape: [1, 4, 4, 8]
    n_attr: 3
    n_informative: 2
    seed: 2
"""


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    """Train once on a tiny synthetic run; return (config, run dir)."""
    root = tmp_path_factory.mktemp("cli")
    config = root / "run.yaml"
    config.write_text(TINY_RUN)
    run_dir = root / "run"
    result = CliRunner().invoke(
        main, ["train", "-c", str(config), "-o", str(run_dir)]
    )
    assert result.exit_code == 0, result.output
    return config, run_dir


class TestCli:
    """Test cases for the tnf commands."""

    def setup_method(self):
        """Set up test fixtures."""
        self.runner = CliRunner()

    def test_help(self):
        """Test the group lists every command."""
        result = self.runner.invoke(main, ["--help"])
        assert result.exit_code == 0
        for command in ("gen-data", "train", "eval", "infer", "gradcam"):
            assert command in result.output

    def test_gen_data(self, tmp_path):
        """Test dataset generation writes splits and reports."""
        config = tmp_path / "run.yaml"
        config.write_text(TINY_RUN)
        out = tmp_path / "data"
        result = self.runner.invoke(
            main, ["gen-data", "-c", str(config), "-o", str(out)]
        )
        assert result.exit_code == 0, result.output
        assert "Dataset written to" in result.output
        for name in ("train.tnf", "val.tnf", "test.tnf", "manifest.yaml"):
            assert (out / name).exists()
        table = pd.read_csv(out / "inconsistency.csv")
        assert list(table["unit"].unique()) == ["slice", "group_4"]
        assert (out / "resolved_config.yaml").exists()

    def test_train_outputs(self, trained):
        """Test training writes checkpoint, log and resolved config."""
        _, run_dir = trained
        assert (run_dir / "model.tnfc").exists()
        assert (run_dir / "resolved_config.yaml").exists()
        epochs = pd.read_csv(run_dir / "epochs.csv")
        assert list(epochs["epoch"]) == [1]

    def test_train_from_dataset_path(self, tmp_path):
        """Test training on a dataset written by gen-data."""
        config = tmp_path / "run.yaml"
        config.write_text(TINY_RUN)
        data = tmp_path / "data"
        self.runner.invoke(
            main, ["gen-data", "-c", str(config), "-o", str(data)]
        )
        plain = yaml.safe_load(TINY_RUN)
        plain["data"] = {"path": str(data)}
        config.write_text(yaml.safe_dump(plain))
        result = self.runner.invoke(
            main, ["train", "-c", str(config), "-o", str(tmp_path / "run")]
        )
        assert result.exit_code == 0, result.output
        assert "Best epoch" in result.output

    def test_eval(self, trained, tmp_path):
        """Test metrics for every view are printed and written."""
        config, run_dir = trained
        result = self.runner.invoke(
            main,
            [
                "eval",
                "-c",
                str(config),
                "--checkpoint",
                str(run_dir / "model.tnfc"),
                "-o",
                str(tmp_path),
            ],
        )
        assert result.exit_code == 0, result.output
        for view in ("image", "tabular", "fusion", "ensemble"):
            assert f"{view}.acc=" in result.output
        frame = pd.read_csv(tmp_path / "metrics_test.csv")
        assert list(frame["view"]) == [
            "image",
            "tabular",
            "fusion",
            "ensemble",
        ]
        assert (tmp_path / "metrics_test.txt").exists()

    def test_eval_without_image(self, trained, tmp_path):
        """Test dropping the image disables image and fusion views."""
        config, run_dir = trained
        result = self.runner.invoke(
            main,
            [
                "eval",
                "-c",
                str(config),
                "--checkpoint",
                str(run_dir / "model.tnfc"),
                "--drop-modality",
                "image",
                "-o",
                str(tmp_path),
            ],
        )
        assert result.exit_code == 0, result.output
        assert "tabular.acc=" in result.output
        assert "image.acc=" not in result.output
        assert "fusion.acc=" not in result.output
        assert (tmp_path / "metrics_test_no_image.csv").exists()

    def test_infer_to_file(self, trained, tmp_path):
        """Test per-case predictions are saved as CSV."""
        config, run_dir = trained
        target = tmp_path / "predictions.csv"
        result = self.runner.invoke(
            main,
            [
                "infer",
                "-c",
                str(config),
                "--checkpoint",
                str(run_dir / "model.tnfc"),
                "--view",
                "fusion",
                "-f",
                str(target),
            ],
        )
        assert result.exit_code == 0, result.output
        frame = pd.read_csv(target)
        assert list(frame.columns)[:3] == ["case_id", "label", "predicted"]
        assert len(frame) > 0

    def test_infer_unavailable_view(self, trained):
        """Test asking for a view that did not run is a config error."""
        config, run_dir = trained
        result = self.runner.invoke(
            main,
            [
                "infer",
                "-c",
                str(config),
                "--checkpoint",
                str(run_dir / "model.tnfc"),
                "--drop-modality",
                "tabular",
                "--view",
                "fusion",
            ],
        )
        assert result.exit_code == EXIT_CONFIG
        assert "unavailable" in result.output

    def test_gradcam(self, trained, tmp_path):
        """Test a heatmap and its header are written."""
        config, run_dir = trained
        result = self.runner.invoke(
            main,
            [
                "gradcam",
                "-c",
                str(config),
                "--checkpoint",
                str(run_dir / "model.tnfc"),
                "-o",
                str(tmp_path),
            ],
        )
        assert result.exit_code == 0, result.output
        headers = list(tmp_path.glob("gradcam_case*_group*.raw.yaml"))
        assert len(headers) == 1
        header = yaml.safe_load(headers[0].read_text())
        assert header["dims"] == [4, 4, 4]
        raw = headers[0].with_suffix("")
        assert raw.stat().st_size == 4 * 64

    def test_shapley(self, trained, tmp_path):
        """Test attribute importance over a subset of attributes."""
        config, run_dir = trained
        result = self.runner.invoke(
            main,
            [
                "shapley",
                "-c",
                str(config),
                "--checkpoint",
                str(run_dir / "model.tnfc"),
                "--attributes",
                "0,2",
                "--top-k",
                "1",
                "-o",
                str(tmp_path),
            ],
        )
        assert result.exit_code == 0, result.output
        assert "Top 1 attributes:" in result.output
        frame = pd.read_csv(tmp_path / "shapley.csv")
        assert sorted(frame["attribute"]) == [0, 2]

    def test_roc(self, trained, tmp_path):
        """Test curve points are written for the chosen view."""
        config, run_dir = trained
        result = self.runner.invoke(
            main,
            [
                "roc",
                "-c",
                str(config),
                "--checkpoint",
                str(run_dir / "model.tnfc"),
                "--view",
                "tabular",
                "-o",
                str(tmp_path),
            ],
        )
        assert result.exit_code == 0, result.output
        roc = pd.read_csv(tmp_path / "roc_tabular.csv")
        assert list(roc.columns) == ["fpr", "tpr"]
        assert (tmp_path / "pr_tabular.csv").exists()


class TestCliErrors:
    """Test cases for exit codes."""

    def setup_method(self):
        """Set up test fixtures."""
        self.runner = CliRunner()

    def test_bad_config_value(self, tmp_path):
        """Test an invalid config value exits with the config code."""
        config = tmp_path / "run.yaml"
        config.write_text("loss:\n  lambda3: abc\n")
        result = self.runner.invoke(main, ["train", "-c", str(config)])
        assert result.exit_code == EXIT_CONFIG
        assert "Error: loss.lambda3: expected a number" in result.output
        assert "Traceback" not in result.output

    def test_debug_prints_traceback(self, tmp_path):
        """Test --debug adds the traceback before the error line."""
        config = tmp_path / "run.yaml"
        config.write_text("loss:\n  lambda3: abc\n")
        result = self.runner.invoke(
            main, ["--debug", "train", "-c", str(config)]
        )
        assert result.exit_code == EXIT_CONFIG
        assert "Traceback (most recent call last)" in result.output
        assert "ConfigurationError" in result.output

    def test_missing_dataset(self, tmp_path):
        """Test an unreadable dataset exits with the data code."""
        plain = yaml.safe_load(TINY_RUN)
        plain["data"] = {"path": str(tmp_path / "absent")}
        config = tmp_path / "run.yaml"
        config.write_text(yaml.safe_dump(plain))
        result = self.runner.invoke(
            main, ["train", "-c", str(config), "-o", str(tmp_path / "run")]
        )
        assert result.exit_code == EXIT_DATA
        assert "Error:" in result.output

    def test_missing_checkpoint(self, tmp_path):
        """Test a missing checkpoint exits with the data code."""
        config = tmp_path / "run.yaml"
        config.write_text(TINY_RUN)
        result = self.runner.invoke(
            main,
            [
                "eval",
                "-c",
                str(config),
                "--checkpoint",
                str(tmp_path / "absent.tnfc"),
            ],
        )
        assert result.exit_code == EXIT_DATA

    def test_mismatched_checkpoint(self, trained, tmp_path):
        """Test a checkpoint of another architecture is a config error."""
        _, run_dir = trained
        plain = yaml.safe_load(TINY_RUN)
        plain["model"]["fusion"] = "concat_linear"
        config = tmp_path / "run.yaml"
        config.write_text(yaml.safe_dump(plain))
        result = self.runner.invoke(
            main,
            [
                "eval",
                "-c",
                str(config),
                "--checkpoint",
                str(run_dir / "model.tnfc"),
            ],
        )
        assert result.exit_code == EXIT_CONFIG
        assert "does not match" in result.output


class TestDeterminism:
    """Test that seeded commands reproduce their artifacts."""

    def run_twice(self, tmp_path, command):
        config = tmp_path / "run.yaml"
        config.write_text(TINY_RUN)
        outputs = []
        for name in ("first", "second"):
            out = tmp_path / name
            result = CliRunner().invoke(
                main, [command, "-c", str(config), "-o", str(out)]
            )
            assert result.exit_code == 0, result.output
            outputs.append(out)
        return outputs

    def test_gen_data(self, tmp_path):
        """Test generated split files are byte-identical."""
        first, second = self.run_twice(tmp_path, "gen-data")
        for name in ("train.tnf", "val.tnf", "test.tnf"):
            assert (first / name).read_bytes() == (second / name).read_bytes()

    def test_train(self, tmp_path):
        """Test checkpoints and epoch logs are byte-identical."""
        first, second = self.run_twice(tmp_path, "train")
        for name in ("model.tnfc", "epochs.csv"):
            assert (first / name).read_bytes() == (second / name).read_bytes()
