import json

import numpy as np
import pytest

from sdac_toolkit.cli import main
from sdac_toolkit.reports import RunManifest

from .test_config import SCENARIOS


def run_cli(command, scenario, out, *extra):
    return main([command, "--config", str(SCENARIOS / scenario), "--out", str(out), *extra])


class TestSynthesize:
    def test_prints_riccati_solution(self, tmp_path, capsys):
        """Test the exit code, the printed Pi and the manifest."""
        assert run_cli("synthesize", "scalar.toml", tmp_path) == 0

        assert "Pi: [[2.41421356" in capsys.readouterr().out
        manifest = RunManifest.read(tmp_path)
        assert manifest.outputs == ["compensator.toml", "plant.txt", "synthesis.json"]

    def test_outputs_are_deterministic(self, tmp_path):
        """Test that two runs of the same scenario write identical files."""
        first, second = tmp_path / "first", tmp_path / "second"

        run_cli("synthesize", "scalar.toml", first)
        run_cli("synthesize", "scalar.toml", second)

        for name in ("synthesis.json", "plant.txt", "compensator.toml"):
            assert (first / name).read_bytes() == (second / name).read_bytes()

    def test_missing_weight(self, tmp_path, capsys):
        """Test that a scenario without R exits with the configuration code."""
        assert run_cli("synthesize", "missing_R.toml", tmp_path) == 2

        assert "error [invalid_field]: cost.R:" in capsys.readouterr().err

    def test_missing_file(self, tmp_path, capsys):
        """Test that an absent scenario file exits with the configuration code."""
        assert run_cli("synthesize", "absent.toml", tmp_path) == 2

        assert "error [not_found]" in capsys.readouterr().err


class TestSimulate:
    def test_equilibrium(self, tmp_path):
        """Test that zero initial state and reference give all-zero trajectory columns."""
        assert run_cli("simulate", "equilibrium.toml", tmp_path) == 0

        rows = np.loadtxt(tmp_path / "trajectory.csv", delimiter=",", skiprows=2)
        assert rows.shape[0] == 501
        assert np.all(rows[:, 1:] == 0.0)
        cost = json.loads((tmp_path / "cost.json").read_text(encoding="utf-8"))
        assert cost["cost"]["J"] == 0.0

    def test_divergence(self, tmp_path, capsys):
        """Test that a diverging run exits with the simulation code and leaves a report."""
        assert run_cli("simulate", "blowup.toml", tmp_path) == 4

        report = json.loads((tmp_path / "divergence.json").read_text(encoding="utf-8"))
        assert report["code"] == "divergence"
        assert "error [divergence]" in capsys.readouterr().err
        assert RunManifest.read(tmp_path).outputs == ["divergence.json"]


class TestBenchmark:
    @pytest.mark.parametrize("scenario", ["unknown_law.toml", "empty_laws.toml"])
    def test_invalid_law_list(self, tmp_path, scenario):
        """Test that an unknown or empty law list exits with the configuration code."""
        assert run_cli("benchmark", scenario, tmp_path) == 2

    def test_scalar(self, tmp_path, capsys):
        """Test the benchmark files and the printed gap rate."""
        assert run_cli("benchmark", "scalar.toml", tmp_path) == 0

        out = capsys.readouterr().out
        assert "LQR vs PureForm: rate=1.414" in out
        table = np.loadtxt(tmp_path / "cost_gap.csv", delimiter=",", skiprows=2)
        assert table.shape == (5, 8)
        assert np.all(table[:, -1] == 1.0)
        assert (tmp_path / "gaps.csv").is_file()


class TestCheckSmallGain:
    def test_needs_synthesis(self, tmp_path, capsys):
        """Test that the check refuses to run before synthesize."""
        assert run_cli("check-small-gain", "scalar.toml", tmp_path) == 6

        assert "run 'sdac synthesize' first" in capsys.readouterr().err

    def test_after_synthesis(self, tmp_path, capsys):
        """Test the verdict and that a rerun writes the same report."""
        run_cli("synthesize", "scalar.toml", tmp_path)

        assert run_cli("check-small-gain", "scalar.toml", tmp_path) == 0
        first = (tmp_path / "small_gain.json").read_bytes()
        assert run_cli("check-small-gain", "scalar.toml", tmp_path) == 0

        assert (tmp_path / "small_gain.json").read_bytes() == first
        assert "verdict: " in capsys.readouterr().out

    def test_stale_synthesis(self, tmp_path, capsys):
        """Test that synthesis output from another seed is refused."""
        run_cli("synthesize", "scalar.toml", tmp_path)

        assert run_cli("check-small-gain", "scalar.toml", tmp_path, "--seed", "5") == 6

        assert "error [stale_artifact]" in capsys.readouterr().err


class TestNehari:
    def test_exported_compensator_is_importable(self, tmp_path):
        """Test that the exported constrained table can be fed back as [compensator.matrices]."""
        assert run_cli("nehari", "scalar.toml", tmp_path / "export") == 0
        exported = (tmp_path / "export" / "compensator.toml").read_text(encoding="utf-8")
        body = exported.split("[constrained]\n", 1)[1]
        scenario = tmp_path / "imported.toml"
        scenario.write_text(
            (SCENARIOS / "scalar.toml").read_text(encoding="utf-8") + "\n[compensator.matrices]\n" + body,
            encoding="utf-8",
        )

        assert main(["synthesize", "--config", str(scenario), "--out", str(tmp_path / "imported")]) == 0
        assert run_cli("synthesize", "scalar.toml", tmp_path / "native") == 0

        imported = json.loads((tmp_path / "imported" / "synthesis.json").read_text(encoding="utf-8"))
        native = json.loads((tmp_path / "native" / "synthesis.json").read_text(encoding="utf-8"))
        assert imported["delta_constants"] == native["delta_constants"]


class TestParser:
    def test_help_lists_exit_codes(self, capsys):
        """Test that the help text documents the exit codes."""
        with pytest.raises(SystemExit) as excinfo:
            main(["--help"])

        assert excinfo.value.code == 0
        out = capsys.readouterr().out
        assert "exit codes:" in out
        assert "6  missing upstream artifact" in out

    def test_command_is_required(self, capsys):
        """Test that a missing subcommand is an argparse usage error."""
        with pytest.raises(SystemExit) as excinfo:
            main([])

        assert excinfo.value.code == 2
