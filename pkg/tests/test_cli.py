import sys

import pandas as pd
import pytest
from click.testing import CliRunner
from loguru import logger

from main import cli
from tests.conftest import TINY


METRICS = {"novel_acc", "base_acc", "AP50_novel_toy", "AP50_base_toy"}


def metric_lines(output):
    """key=value lines printed by eval; log records are mixed into the captured output."""
    return [line for line in output.splitlines() if line.split("=")[0] in METRICS]


def write_env(path, **overrides):
    values = {**TINY, **overrides}
    path.write_text("".join(f"{k}={v}\n" for k, v in values.items()))
    return path


@pytest.fixture(autouse=True)
def _restore_logger():
    yield
    # the group callback points loguru at the runner's captured stderr
    logger.remove()
    logger.add(sys.stderr)


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    config = write_env(root / "tiny.env")
    result = CliRunner().invoke(cli, ["train", "--config", str(config), "--out", str(root / "run"), "--steps", "2"])
    assert result.exit_code == 0, result.output
    logger.remove()
    logger.add(sys.stderr)
    return root


def test_train_writes_checkpoint(trained):
    """train leaves a final checkpoint and the loss log."""
    assert (trained / "run" / "checkpoint.pt").exists()
    assert (trained / "run" / "losses.csv").exists()


def test_invalid_temperature_exits_one_and_names_field(tmp_path):
    """A non-positive temperature is a config error."""
    config = write_env(tmp_path / "bad.env", tau_train="0")
    result = CliRunner().invoke(cli, ["train", "--config", str(config), "--out", str(tmp_path / "run")])
    assert result.exit_code == 1
    assert "tau_train" in result.output
    assert not (tmp_path / "run" / "checkpoint.pt").exists()


def test_missing_config_exits_one(tmp_path):
    """Missing config file."""
    result = CliRunner().invoke(cli, ["train", "--config", str(tmp_path / "nope.env")])
    assert result.exit_code == 1


def test_missing_checkpoint_exits_two(tmp_path):
    """Missing checkpoint is a runtime failure."""
    result = CliRunner().invoke(cli, ["eval", "--checkpoint", str(tmp_path / "missing.pt")])
    assert result.exit_code == 2


def test_eval_prints_split_metrics(trained, tmp_path):
    """eval prints only the requested split and strip-nra changes nothing."""
    checkpoint = str(trained / "run" / "checkpoint.pt")
    result = CliRunner().invoke(cli, ["eval", "--checkpoint", checkpoint, "--split", "novel", "--out", str(tmp_path)])
    assert result.exit_code == 0, result.output
    keys = [line.split("=")[0] for line in metric_lines(result.output)]
    assert keys == ["novel_acc", "AP50_novel_toy"]
    assert list(pd.read_csv(tmp_path / "metrics.csv").columns) == keys
    assert (tmp_path / "detections.txt").exists()

    stripped = CliRunner().invoke(cli, ["eval", "--checkpoint", checkpoint, "--split", "novel", "--strip-nra"])
    assert stripped.exit_code == 0
    assert metric_lines(stripped.output) == metric_lines(result.output)


def test_heatmap_export(trained, tmp_path):
    """heatmap writes the matrix and its figure."""
    checkpoint = str(trained / "run" / "checkpoint.pt")
    result = CliRunner().invoke(cli, ["heatmap", "--checkpoint", checkpoint, "--out", str(tmp_path)])
    assert result.exit_code == 0, result.output
    assert {p.suffix for p in tmp_path.iterdir()} == {".csv", ".png"}
    missing_scene = CliRunner().invoke(cli, ["heatmap", "--checkpoint", checkpoint, "--scene", "999",
                                             "--out", str(tmp_path)])
    assert missing_scene.exit_code == 2


def test_empty_grid_exits_zero(tmp_path):
    """An empty grid yields an empty results table."""
    config = write_env(tmp_path / "tiny.env")
    grid = tmp_path / "empty.csv"
    grid.write_text("name\n")
    out = tmp_path / "results.csv"
    result = CliRunner().invoke(cli, ["ablate", "--grid", str(grid), "--config", str(config), "--out", str(out)])
    assert result.exit_code == 0, result.output
    assert pd.read_csv(out).empty


def test_failing_grid_row_exits_two(tmp_path):
    """A failing row is recorded and the command reports it."""
    config = write_env(tmp_path / "tiny.env")
    grid = tmp_path / "grid.csv"
    grid.write_text("name,distill\nbroken,false\n")
    out = tmp_path / "results.csv"
    result = CliRunner().invoke(cli, ["ablate", "--grid", str(grid), "--config", str(config), "--budget", "1",
                                      "--out", str(out)])
    assert result.exit_code == 2
    assert pd.read_csv(out)["status"].tolist() == ["error"]


def test_gen_data_writes_both_splits(tmp_path):
    """gen-data materialises both splits."""
    config = write_env(tmp_path / "tiny.env")
    result = CliRunner().invoke(cli, ["gen-data", "--config", str(config), "--out", str(tmp_path / "data")])
    assert result.exit_code == 0, result.output
    assert (tmp_path / "data" / "train" / "images.npz").exists()
    assert (tmp_path / "data" / "test" / "annotations.csv").exists()
