import json

import pytest
from click.testing import CliRunner

from lgc3d.cli import cli


@pytest.fixture
def runner():
    return CliRunner()


def invoke(runner, *args):
    result = runner.invoke(cli, [str(arg) for arg in args], catch_exceptions=False)
    assert result.exit_code == 0, result.output
    return json.loads(result.stdout)


def test_full_workflow(runner, tmp_path):
    """Test the commands end to end on a small synthetic cube."""
    cube = tmp_path / "cube.hsi"
    summary = invoke(
        runner, "synth", "--size", 12, "--bands", 8, "--classes", 3, "--noise", 0.05, "--seed", 1, "--out", cube, "--json"
    )
    assert summary["bands"] == 8
    assert summary["labeled"] == 144

    split = tmp_path / "split.json"
    counts = invoke(runner, "split", "--cube", cube, "--out", split, "--json")
    assert counts["train"] + counts["val"] + counts["test"] == 144

    config = tmp_path / "tiny.toml"
    config.write_text('name = "tiny"\nstage_blocks = [1, 1]\ngrowth_rate = 2\ngroups = 2\npatch_size = 5\n')
    run = tmp_path / "run"
    record = invoke(
        runner, "train", "--cube", cube, "--split", split, "--config", config,
        "--epochs", 2, "--batch-size", 16, "--out", run, "--json",
    )
    assert record["config"] == "tiny"
    assert record["metrics"]["samples"] == counts["test"]

    checkpoint = run / "checkpoint.lgc"
    metrics = invoke(
        runner, "eval", "--checkpoint", checkpoint, "--cube", cube, "--split", split, "--compiled", "--json"
    )
    assert metrics["confusion"] == record["metrics"]["confusion"]

    plan = tmp_path / "tiny.plan"
    compiled = invoke(runner, "compile", "--checkpoint", checkpoint, "--out", plan, "--json")
    assert compiled["layers"] == 3
    assert compiled["source_hash"]

    bench = invoke(runner, "bench", "--plan", plan, "--reps", 2, "--batch", 2, "--json")
    row = bench["rows"][0]
    assert row["input_shape"] == [2, 1, 8, 5, 5]
    assert row["compiled_gathers"] < row["naive_gathers"]

    image = tmp_path / "map.ppm"
    assert invoke(runner, "map", "--checkpoint", checkpoint, "--cube", cube, "--out", image, "--json")["height"] == 12
    assert image.read_bytes().startswith(b"P6\n12 12\n255\n")

    rows = invoke(runner, "report", "--runs", tmp_path, "--json")
    assert len(rows) == 1
    assert rows[0]["config"] == "tiny"
    assert (tmp_path / "report.csv").exists()


def test_multiple_runs(runner, tmp_path):
    """Test that several runs are summarized."""
    cube = tmp_path / "cube.hsi"
    invoke(runner, "synth", "--size", 10, "--bands", 6, "--classes", 2, "--out", cube, "--json")
    split = tmp_path / "split.json"
    invoke(runner, "split", "--cube", cube, "--ratios", "2:1:7", "--out", split, "--json")
    config = tmp_path / "tiny.json"
    config.write_text(json.dumps({"stage_blocks": [1], "growth_rate": 2, "groups": 1, "patch_size": 3}))
    summary = invoke(
        runner, "train", "--cube", cube, "--split", split, "--config", config,
        "--epochs", 1, "--runs", 2, "--out", tmp_path / "runs", "--json",
    )
    assert [run["seed"] for run in summary["runs"]] == [0, 1]
    assert (tmp_path / "runs" / "summary.json").exists()


def test_flops(runner):
    """Test the cost report of a predefined size against its reported costs."""
    payload = invoke(runner, "flops", "--config", "small", "--json")
    assert payload["config"] == "small"
    assert payload["published"]["params"] == 156_856
    assert payload["madds"] > 0

    result = runner.invoke(cli, ["flops", "--config", "small", "--bands", "30", "--patch", "9"])
    assert result.exit_code == 0
    assert "reported" not in result.stdout


def test_verify(runner):
    """Test that the engine checks pass from the command line."""
    results = invoke(
        runner, "verify", "--instances", 1, "--layers", 2, "--chains", 1, "--inputs", 2, "--json"
    )
    assert len(results) == 6
    assert all(result["status"] == "SUCCESS" for result in results)


def test_engine_error(runner, tmp_path):
    """Test that engine errors print a single line on stderr and exit with status 1."""
    broken = tmp_path / "broken.hsi"
    broken.write_bytes(b"NOTACUBE" + bytes(16))
    result = runner.invoke(cli, ["split", "--cube", str(broken), "--out", str(tmp_path / "s.json")])
    assert result.exit_code == 1
    assert result.stdout == ""
    assert result.stderr.startswith("error: CubeFormatError:")
    assert len(result.stderr.strip().splitlines()) == 1

    result = runner.invoke(cli, ["split", "--cube", str(broken), "--out", str(tmp_path / "s.json"), "--json"])
    assert result.exit_code == 1
    assert json.loads(result.stderr)["error"] == "CubeFormatError"


def test_unwritable_output(runner, tmp_path):
    """Test that an output path that cannot be written prints a single line on stderr and exits with status 1."""
    blocker = tmp_path / "blocker"
    blocker.write_text("not a directory")
    out = blocker / "cube.hsi"
    result = runner.invoke(cli, ["synth", "--size", "8", "--bands", "4", "--classes", "2", "--out", str(out)])
    assert result.exit_code == 1
    assert result.stdout == ""
    assert result.stderr.startswith("error: ")
    assert "Error:" in result.stderr
    assert len(result.stderr.strip().splitlines()) == 1

    result = runner.invoke(cli, ["synth", "--size", "8", "--bands", "4", "--classes", "2", "--out", str(out), "--json"])
    assert result.exit_code == 1
    assert json.loads(result.stderr)["error"] in {"FileExistsError", "NotADirectoryError"}


def test_invalid_options(runner, tmp_path):
    """Test that unknown commands and unknown sizes are refused."""
    assert runner.invoke(cli, ["fly"]).exit_code == 2
    result = runner.invoke(cli, ["flops", "--config", "huge"])
    assert result.exit_code == 1
    assert "neither a predefined size" in result.stderr
