"""Command-line interface: argument handling, outputs, exit codes, and
reproducibility."""

import json

import pytest
from click.testing import CliRunner

from hortisim.cli import _grid_lengths, _parse_seeds, main


@pytest.fixture
def runner():
    return CliRunner()


class TestParsing:
    def test_parse_seeds(self):
        assert _parse_seeds("1-4") == (1, 2, 3, 4)
        assert _parse_seeds("1,3,5") == (1, 3, 5)
        assert _parse_seeds("2, 4-6") == (2, 4, 5, 6)

    def test_grid_lengths_cover(self):
        for n in (1, 27, 84, 100):
            a, b, c = _grid_lengths(n)
            assert a * b * c >= n


class TestHarvest:
    def test_writes_metrics_files(self, runner, tmp_path):
        out = tmp_path / "run"
        config = tmp_path / "cfg.json"
        config.write_text(json.dumps(
            {"scene": {"n_fruits": 2, "n_stems": 2, "n_leaves": 2}}))
        result = runner.invoke(main, [
            "harvest", "--config", str(config), "--seeds", "1",
            "--noise", "zero", "--out", str(out)])
        assert result.exit_code == 0, result.output
        assert (out / "fruits.jsonl").is_file()
        assert (out / "trials.csv").is_file()
        assert (out / "phase_summary.csv").is_file()
        rows = [json.loads(line)
                for line in (out / "fruits.jsonl").read_text().splitlines()]
        assert len(rows) == 2
        assert {"seed", "fruit_id", "grasp", "cut", "place",
                "overall"} <= set(rows[0])
        trials = (out / "trials.csv").read_text().splitlines()
        assert trials[0].startswith("seed,")
        assert trials[-1].startswith("total,")

    def test_byte_identical_rerun(self, runner, tmp_path):
        config = tmp_path / "cfg.json"
        config.write_text(json.dumps(
            {"scene": {"n_fruits": 2, "n_stems": 2, "n_leaves": 2}}))
        outs = []
        for name in ("a", "b"):
            out = tmp_path / name
            result = runner.invoke(main, [
                "harvest", "--config", str(config), "--seeds", "2",
                "--noise", "nominal", "--out", str(out), "--svg"])
            assert result.exit_code == 0, result.output
            outs.append(out)
        for fname in ("fruits.jsonl", "trials.csv", "phase_summary.csv",
                      "phases.svg"):
            assert (outs[0] / fname).read_bytes() == (
                outs[1] / fname).read_bytes(), fname

    def test_missing_config_exits_2(self, runner, tmp_path):
        result = runner.invoke(main, [
            "harvest", "--config", str(tmp_path / "nope.json")])
        assert result.exit_code == 2

    def test_bad_noise_rejected(self, runner, tmp_path):
        result = runner.invoke(main, [
            "harvest", "--seeds", "1", "--noise", "imaginary",
            "--out", str(tmp_path / "x")])
        assert result.exit_code != 0


class TestCalibrate:
    def test_ft_synthesize(self, runner, tmp_path):
        out = tmp_path / "calib"
        result = runner.invoke(main, [
            "calibrate", "ft", "--synthesize", "--out", str(out)])
        assert result.exit_code == 0, result.output
        text = (out / "ft_calibration.txt").read_text()
        assert "mass_kg: 0.900000000" in text

    def test_ft_degenerate_exits_3(self, runner, tmp_path):
        result = runner.invoke(main, [
            "calibrate", "ft", "--synthesize", "--samples", "5",
            "--out", str(tmp_path / "calib")])
        assert result.exit_code == 3

    def test_ft_missing_samples_file(self, runner, tmp_path):
        result = runner.invoke(main, [
            "calibrate", "ft", "--samples-file", str(tmp_path / "nope.csv"),
            "--out", str(tmp_path / "calib")])
        assert result.exit_code == 2

    def test_handeye_requires_synthesize(self, runner, tmp_path):
        result = runner.invoke(main, [
            "calibrate", "handeye", "--out", str(tmp_path / "calib")])
        assert result.exit_code == 2

    def test_handeye_small_run(self, runner, tmp_path):
        out = tmp_path / "calib"
        result = runner.invoke(main, [
            "calibrate", "handeye", "--synthesize", "--samples", "120",
            "--out", str(out)])
        assert result.exit_code == 0, result.output
        text = (out / "handeye_calibration.txt").read_text()
        assert "mean_reprojection_px:" in text


class TestWorkspace:
    def test_small_sweep(self, runner, tmp_path):
        out = tmp_path / "ws"
        result = runner.invoke(main, [
            "workspace", "--mounts", "4", "--fruits", "4", "--out", str(out)])
        assert result.exit_code == 0, result.output
        summary = (out / "summary.txt").read_text()
        assert "best_reachable_pct:" in summary
        assert "reference_reachable_pct: 90.00" in summary
        rows = (out / "workspace.csv").read_text().splitlines()
        assert len(rows) == 5  # header + 4 mounts

    def test_zero_counts_exit_2(self, runner, tmp_path):
        result = runner.invoke(main, [
            "workspace", "--fruits", "0", "--out", str(tmp_path / "ws")])
        assert result.exit_code == 2

    def test_missing_chain_file_exit_2(self, runner, tmp_path):
        result = runner.invoke(main, [
            "workspace", "--grasper", str(tmp_path / "nope.json"),
            "--out", str(tmp_path / "ws")])
        assert result.exit_code == 2


class TestRenderDebug:
    def test_writes_frame(self, runner, tmp_path):
        out = tmp_path / "frame"
        result = runner.invoke(main, [
            "render-debug", "--seed", "1", "--out", str(out)])
        assert result.exit_code == 0, result.output
        assert (out / "depth.npy").is_file()
        assert (out / "frame.json").is_file()

    def test_bad_profile_exit_2(self, runner, tmp_path):
        result = runner.invoke(main, [
            "render-debug", "--noise", "imaginary",
            "--out", str(tmp_path / "frame")])
        assert result.exit_code == 2
