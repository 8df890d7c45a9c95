import csv
import json
import pytest
from click.testing import CliRunner
from guided_wost.cli import wost


SMALL = {"WOST_RESOLUTION": "[4, 4]"}


@pytest.fixture
def runner():
    return CliRunner()


@pytest.fixture
def reference(runner, tmp_path):
    filename = str(tmp_path / "ref.csv")
    args = ["reference", "preset:harmonic-disk", "--out", filename]
    result = runner.invoke(wost, args, env=SMALL)
    assert result.exit_code == 0, result.output
    return filename


def test_presets(runner):
    result = runner.invoke(wost, ["presets"])
    assert result.exit_code == 0
    assert "harmonic-disk [analytic]: Unit disk" in result.output
    assert "fille: " in result.output


def test_scene(runner):
    result = runner.invoke(wost, ["scene", "preset:neumann-strip"])
    assert result.exit_code == 0
    doc = json.loads(result.output)
    assert len(doc["segments"]) == 4


def test_solve(runner, tmp_path):
    out = tmp_path / "run"
    result = runner.invoke(
        wost,
        ["solve", "preset:harmonic-disk", "--wpp", "2", "--sampler", "uniform", "--out", str(out)],
        env=SMALL,
    )
    assert result.exit_code == 0, result.output
    assert "24 walks" in result.output
    assert f"Outputs written to {out}" in result.output
    assert (out / "solution.csv").exists()


def test_solve_config_file(runner, tmp_path):
    config = tmp_path / "run.json"
    config.write_text(json.dumps({
        "SCENE": "preset:flux-strip",
        "WPP": 1,
        "SAMPLER": "learnable_mis",
        "RESOLUTION": [2, 2],
        "REFERENCE": "analytic",
        "FIELD_LEVELS": 1,
        "FIELD_RESOLUTIONS": [4],
        "FIELD_HIDDEN": 8,
        "K": 2,
        "OUT": "out",
    }))
    result = runner.invoke(wost, ["-v", "solve", str(config)])
    assert result.exit_code == 0, result.output
    assert "relMSE: " in result.output
    assert (tmp_path / "out" / "summary.json").exists()


def test_reference_and_compare(runner, reference, tmp_path):
    result = runner.invoke(wost, ["compare", reference, reference])
    assert result.exit_code == 0
    assert "relMSE: 0\n" in result.output
    assert "delta: " in result.output


def test_collect(runner, reference, tmp_path):
    out = tmp_path / "run"
    runner.invoke(
        wost, ["solve", "preset:harmonic-disk", "--wpp", "1", "--sampler", "uniform",
               "--out", str(out)], env=SMALL,
    )
    table = str(tmp_path / "table.csv")
    result = runner.invoke(wost, ["collect", table, str(out), "--ref", reference])
    assert result.exit_code == 0, result.output
    with open(table) as f:
        rows = list(csv.reader(f))
    assert rows[0] == ["run", "relmse"]
    assert float(rows[1][1]) >= 0


def test_ablate(runner, reference, tmp_path):
    out = tmp_path / "ablation"
    result = runner.invoke(
        wost,
        ["ablate", "preset:harmonic-disk", "-m", "uniform", "-m", "uniform,k=2", "--wpp", "1",
         "--reference", reference, "--out", str(out)],
        env=SMALL,
    )
    assert result.exit_code == 0, result.output
    lines = result.output.splitlines()
    assert lines[0].startswith("uniform ")
    assert lines[1].startswith("uniform,k=2")
    assert (out / "ablation.csv").exists()


@pytest.mark.parametrize(
    "args, message",
    [
        (["solve", "missing.json"], "CONFIG"),
        (["solve", "preset:nope"], "unknown preset"),
        (["solve", "preset:harmonic-disk", "--wpp", "0"], "WPP"),
        (["ablate", "preset:harmonic-disk", "-m", "uniform,depth=2"], "MODES"),
    ],
)
def test_errors(runner, args, message):
    result = runner.invoke(wost, args, env=SMALL)
    assert result.exit_code == 1
    assert "Error: " in result.output
    assert message in result.output


def test_compare_dimension_mismatch(runner, reference, tmp_path):
    other = str(tmp_path / "other.csv")
    runner.invoke(
        wost, ["reference", "preset:harmonic-disk", "--out", other],
        env={"WOST_RESOLUTION": "[2, 2]"},
    )
    result = runner.invoke(wost, ["compare", other, reference])
    assert result.exit_code == 1
    assert "dimension mismatch" in result.output
