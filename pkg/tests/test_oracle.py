"""Tests for the built-in self-checks."""

import numpy as np

from mufl.oracle import (
    GRAD_TOLERANCE,
    OracleReport,
    diagonal_check,
    gradient_check,
    max_relative_error,
    numeric_gradient,
    random_affinity,
    run_oracles,
    solver_check,
    tiny_batch,
    tiny_model,
)


class TestOracleReport:
    """Test cases for OracleReport."""

    def test_passed(self):
        """Test that a report passes exactly when it has no failures."""
        assert OracleReport("x").passed
        assert not OracleReport("x", failures=["bad"]).passed


class TestGradientCheck:
    """Test cases for the finite-difference gradient check."""

    def test_passes(self):
        """Test a handful of models against finite differences."""
        report = gradient_check(n_models=5, seed=1)
        assert report.passed, report.failures
        assert report.cases == 10
        assert report.worst < GRAD_TOLERANCE

    def test_detects_wrong_gradient(self):
        """Test that a uniformly shifted gradient shows a large error."""
        model = tiny_model(0)
        numeric = numeric_gradient(model, "r", tiny_batch(0))
        wrong = {k: v + 1.0 for k, v in numeric.items()}
        assert max_relative_error(numeric, numeric) == 0.0
        assert max_relative_error(wrong, numeric) > 1e-2

    def test_detects_single_wrong_entry(self):
        """Test that one bad parameter is caught even when every other one is exact."""
        model = tiny_model(2)
        numeric = numeric_gradient(model, "c", tiny_batch(2))
        wrong = {k: v.copy() for k, v in numeric.items()}
        name = next(iter(wrong))
        wrong[name].flat[0] += 0.01
        assert max_relative_error(wrong, numeric) > GRAD_TOLERANCE

    def test_small_entries_compared_absolutely(self):
        """Test that entries below the floor do not blow up the ratio."""
        exact = {"w": np.array([1e-9, 2.0])}
        close = {"w": np.array([2e-9, 2.0])}
        assert max_relative_error(close, exact) < 1e-5


class TestSolverCheck:
    """Test cases for the solver cross-check."""

    def test_passes(self):
        """Test branch and bound against enumeration on a few small matrices."""
        report = solver_check(sizes=[4, 5], splits=[2, 3], per_case=5, seed=2)
        assert report.passed, report.failures
        assert report.cases == 20

    def test_skips_impossible_splits(self):
        """Test that m > n cases are skipped rather than failed."""
        report = solver_check(sizes=[4], splits=[5], per_case=3)
        assert report.cases == 0
        assert report.passed


class TestDiagonalCheck:
    """Test cases for the self-affinity check."""

    def test_passes(self):
        """Test that stored diagonals match their recomputation."""
        report = diagonal_check(n_matrices=50, seed=3)
        assert report.passed, report.failures
        assert report.cases == 50

    def test_random_affinity(self):
        """Test the shape and ids of a random affinity matrix."""
        matrix = random_affinity(4, np.random.default_rng(0))
        assert matrix.activity_ids == ("a0", "a1", "a2", "a3")
        assert matrix.values.shape == (4, 4)


class TestRunOracles:
    """Test cases for the full self-check run."""

    def test_full_scale(self):
        """Test every suite at its default size: 100 models, 1000 matrices, 200 per solver case."""
        reports = {r.name: r for r in run_oracles(seed=0)}
        assert set(reports) == {"gradient", "diagonal", "solver"}
        for report in reports.values():
            assert report.passed, (report.name, report.failures[:5])
        assert reports["gradient"].cases == 200
        assert reports["diagonal"].cases == 1000
        assert reports["solver"].cases == 5 * 3 * 200
        assert reports["gradient"].worst < GRAD_TOLERANCE
