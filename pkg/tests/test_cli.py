"""Tests for the mufl command line."""

import json
import math

import pytest
from typer.testing import CliRunner

from mufl.artifacts import INCOMPLETE_MARKER, ROUNDS_FILE, read_grid_summary, read_partitions
from mufl.cli import CellOutcome, app, track_cells

runner = CliRunner()


def _spec(**regime):
    """Three activities on four small clients; finishes in well under a second."""
    base = {
        "mode": "mufl", "R": 4, "R0": 2, "K": 2, "trunk_widths": [4],
        "probe": {"frequency": 2, "active_rounds": [1, 2]},
    }
    base.update(regime)
    return {
        "regime": base,
        "task": {"activities": ["s", "d", "n"], "n_clients": 4, "examples_per_client": 20,
                 "test_examples": 20, "input_dim": 4, "hidden_dim": 3},
        "hyper": {"batch_size": 5},
    }


@pytest.fixture
def spec_file(tmp_path):
    """Writer of JSON spec files into the test directory."""
    def write(data, name="spec.json"):
        path = tmp_path / name
        path.write_text(json.dumps(data, indent=2), encoding="utf-8")
        return path
    return write


def _run(*args):
    return runner.invoke(app, ["run", *map(str, args)])


class TestRunCommand:
    """Test cases for `mufl run`."""

    def test_single_run(self, tmp_path, spec_file):
        """Test one run end to end with its artifacts."""
        out = tmp_path / "out"
        result = _run(spec_file(_spec()), "--out", out)
        assert result.exit_code == 0, result.output
        assert "All invariant checks passed" in result.output
        assert (out / "seed=0" / ROUNDS_FILE).exists()
        assert len(read_partitions(out / "seed=0")[0].split(",")) == 2
        assert list(read_grid_summary(out)) == ["."]

    def test_byte_identical_rerun(self, tmp_path, spec_file):
        """Test that two runs of one spec write identical files."""
        path = spec_file(_spec())
        assert _run(path, "--out", tmp_path / "a").exit_code == 0
        assert _run(path, "--out", tmp_path / "b").exit_code == 0
        files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
        assert files
        for rel in files:
            assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()

    def test_seed_override(self, tmp_path, spec_file):
        """Test that --seed picks the seed directory."""
        out = tmp_path / "out"
        assert _run(spec_file(_spec()), "--out", out, "--seed", 5).exit_code == 0
        assert (out / "seed=5" / ROUNDS_FILE).exists()

    def test_repeats(self, tmp_path, spec_file):
        """Test one seed directory per repeat and a deviation in the summary."""
        out = tmp_path / "out"
        data = _spec()
        data["repeat"] = 3
        result = _run(spec_file(data), "--out", out)
        assert result.exit_code == 0, result.output
        assert sorted(p.name for p in out.glob("seed=*")) == ["seed=0", "seed=1", "seed=2"]
        row = read_grid_summary(out)["."]
        assert row["repeats"] == 3.0
        assert not math.isnan(row["total_loss_std"])
        assert "±" in result.output

    def test_sweep(self, tmp_path, spec_file):
        """Test that nine R0 values give nine summary rows."""
        out = tmp_path / "out"
        data = _spec(R=10, R0=list(range(1, 10)), probe={"frequency": 2, "active_rounds": [1]})
        result = _run(spec_file(data), "--out", out)
        assert result.exit_code == 0, result.output
        rows = read_grid_summary(out)
        assert list(rows) == [f"R0={r}" for r in range(1, 10)]
        assert (out / "R0=9" / "seed=0" / ROUNDS_FILE).exists()

    def test_parallel_jobs(self, tmp_path, spec_file):
        """Test that --jobs gives the same summary as a serial run."""
        data = _spec(R0=[1, 2, 3], probe={"frequency": 2, "active_rounds": [1]})
        serial, parallel = tmp_path / "serial", tmp_path / "parallel"
        assert _run(spec_file(data), "--out", serial).exit_code == 0
        assert _run(spec_file(data), "--out", parallel, "--jobs", 2).exit_code == 0
        assert read_grid_summary(serial) == read_grid_summary(parallel)

    def test_other_regimes(self, tmp_path, spec_file):
        """Test that the baseline regimes run from the command line."""
        for mode in ("all_in_one", "one_by_one", "standalone"):
            result = _run(spec_file(_spec(mode=mode)), "--out", tmp_path / mode)
            assert result.exit_code == 0, result.output

    def test_check_only(self, tmp_path, spec_file):
        """Test that --check validates without writing anything."""
        out = tmp_path / "out"
        result = _run(spec_file(_spec()), "--out", out, "--check")
        assert result.exit_code == 0
        assert "Spec OK" in result.output
        assert not out.exists()


class TestRunErrors:
    """Test cases for invalid input to `mufl run`."""

    def test_missing_file(self, tmp_path):
        """Test the error for a spec file that does not exist."""
        result = _run(tmp_path / "absent.json")
        assert result.exit_code == 1
        assert "not found" in result.output

    def test_unknown_key(self, spec_file):
        """Test that an unknown key is named in the error."""
        data = _spec()
        data["regime"]["Rzero"] = 2
        result = _run(spec_file(data), "--check")
        assert result.exit_code == 1
        assert "Rzero" in result.output

    def test_r0_not_below_r(self, spec_file):
        """Test that R0 must be below R."""
        result = _run(spec_file(_spec(R0=4)), "--check")
        assert result.exit_code == 1
        assert "R0" in result.output

    def test_failed_run_marked_incomplete(self, tmp_path, spec_file):
        """Test that a run that cannot split leaves a marker and fails the command."""
        out = tmp_path / "out"
        result = _run(spec_file(_spec(m=4)), "--out", out)
        assert result.exit_code == 1
        assert (out / "seed=0" / INCOMPLETE_MARKER).exists()


class TestShowCommand:
    """Test cases for `mufl show`."""

    def test_show(self, tmp_path, spec_file):
        """Test the summary table of an earlier run."""
        out = tmp_path / "out"
        assert _run(spec_file(_spec()), "--out", out).exit_code == 0
        result = runner.invoke(app, ["show", str(out)])
        assert result.exit_code == 0
        assert "Summary of" in result.output

    def test_show_missing(self, tmp_path):
        """Test the error for a directory without a summary."""
        result = runner.invoke(app, ["show", str(tmp_path)])
        assert result.exit_code == 1
        assert "no summary" in result.output


class TestOracleFlag:
    """Test cases for `mufl run --oracle`."""

    def test_oracle_passes(self, spec_file, monkeypatch):
        """Test the self-check table with reduced suites."""
        from mufl import cli, oracle

        def quick(seed=0):
            return [oracle.gradient_check(n_models=2, seed=seed),
                    oracle.diagonal_check(n_matrices=10, seed=seed),
                    oracle.solver_check(sizes=[4, 5], splits=[2], per_case=3, seed=seed)]

        monkeypatch.setattr(cli, "run_oracles", quick)
        result = _run(spec_file(_spec()), "--oracle")
        assert result.exit_code == 0, result.output
        assert "gradient" in result.output


class TestTrackCells:
    """Test cases for track_cells."""

    def test_keeps_arrival_order(self):
        """Test that every outcome is collected in the order it arrives."""
        outcomes = track_cells(iter([CellOutcome("R0=1"), CellOutcome("R0=2")]), 2)
        assert [o.name for o in outcomes] == ["R0=1", "R0=2"]

    def test_nothing_to_track(self):
        """Test that an empty run collects nothing."""
        assert track_cells(iter([]), 0) == []
