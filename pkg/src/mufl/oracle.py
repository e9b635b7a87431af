"""Self-checks run by ``mufl run --oracle``."""

import logging
import time
from dataclasses import dataclass, field
from typing import Dict, List, Sequence

import numpy as np

from .affinity import AffinityMatrix, self_affinity
from .federation import Batch, rng_stream
from .nn_core import CLASSIFICATION, REGRESSION, MultiTaskModel, backward, build_model, forward_loss
from .partition import branch_and_bound_best, enumerate_best, stirling2

logger = logging.getLogger(__name__)

GRAD_STEP = 1e-5
GRAD_TOLERANCE = 1e-4
GRAD_FLOOR = 1e-3
SCORE_TOLERANCE = 1e-12


@dataclass
class OracleReport:
    """Outcome of one self-check suite."""
    name: str
    cases: int = 0
    failures: List[str] = field(default_factory=list)
    worst: float = 0.0
    seconds: float = 0.0

    @property
    def passed(self) -> bool:
        return not self.failures


def tiny_model(seed: int) -> MultiTaskModel:
    """Two-head model small enough for exhaustive finite differences."""
    return build_model(
        input_dim=3,
        trunk_widths=[4, 3],
        head_outputs={"r": 2, "c": 3},
        loss_kinds={"r": REGRESSION, "c": CLASSIFICATION},
        trunk_rng=rng_stream(seed, "oracle", "trunk"),
        head_rngs={a: rng_stream(seed, "oracle", "head", a) for a in ("r", "c")},
    )


def tiny_batch(seed: int, size: int = 5) -> Batch:
    rng = rng_stream(seed, "oracle", "batch")
    return Batch(
        features=rng.normal(size=(size, 3)),
        targets={"r": rng.normal(size=(size, 2)), "c": rng.integers(0, 3, size=size)},
    )


def numeric_gradient(model: MultiTaskModel, activity: str, batch: Batch,
                     step: float = GRAD_STEP) -> Dict[str, np.ndarray]:
    """Central finite differences over every parameter the activity touches."""
    grads = {}
    for name, block in model.blocks(activity).items():
        g = np.zeros_like(block.values)
        for idx in np.ndindex(block.values.shape):
            saved = block.values[idx]
            block.values[idx] = saved + step
            plus, _ = forward_loss(model, activity, batch)
            block.values[idx] = saved - step
            minus, _ = forward_loss(model, activity, batch)
            block.values[idx] = saved
            g[idx] = (plus - minus) / (2 * step)
        grads[name] = g
    return grads


def max_relative_error(analytic: Dict[str, np.ndarray], numeric: Dict[str, np.ndarray],
                       floor: float = GRAD_FLOOR) -> float:
    """Largest per-parameter |a - n| / max(|a|, |n|, floor).

    Entries below ``floor`` in magnitude are compared absolutely.
    """
    worst = 0.0
    for name, n in numeric.items():
        a = analytic[name]
        scale = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
        worst = max(worst, float(np.max(np.abs(a - n) / scale)))
    return worst


def gradient_check(n_models: int = 100, seed: int = 0) -> OracleReport:
    """backward() against central differences on seeded tiny models."""
    report = OracleReport("gradient")
    start = time.perf_counter()
    for k in range(n_models):
        model = tiny_model(seed + k)
        batch = tiny_batch(seed + k)
        for activity in model.activity_ids:
            _, cache = forward_loss(model, activity, batch)
            error = max_relative_error(backward(model, activity, cache), numeric_gradient(model, activity, batch))
            report.cases += 1
            report.worst = max(report.worst, error)
            if not error < GRAD_TOLERANCE:
                report.failures.append(f"model {seed + k} activity {activity}: relative error {error:.3e}")
    report.seconds = time.perf_counter() - start
    return report


def random_affinity(n: int, rng: np.random.Generator) -> AffinityMatrix:
    ids = [f"a{i}" for i in range(n)]
    return AffinityMatrix.from_off_diagonal(rng.normal(0.0, 0.3, size=(n, n)), ids)


def solver_check(sizes: Sequence[int] = range(4, 9), splits: Sequence[int] = (2, 3, 4),
                 per_case: int = 200, seed: int = 0) -> OracleReport:
    """Branch and bound must match exhaustive enumeration on every random matrix."""
    report = OracleReport("solver")
    start = time.perf_counter()
    for n in sizes:
        for m in splits:
            if m > n:
                continue
            rng = rng_stream(seed, "oracle", "solver", n, m)
            for k in range(per_case):
                matrix = random_affinity(n, rng)
                exact = enumerate_best(matrix, m).total_score
                found = branch_and_bound_best(matrix, m).total_score
                report.cases += 1
                gap = abs(exact - found)
                report.worst = max(report.worst, gap)
                if gap > SCORE_TOLERANCE:
                    report.failures.append(f"n={n} m={m} case {k}: {found!r} != {exact!r}")
    for n, m, expected in ((5, 2, 15), (5, 3, 25)):
        if stirling2(n, m) != expected:
            report.failures.append(f"S({n},{m}) = {stirling2(n, m)}, expected {expected}")
    report.seconds = time.perf_counter() - start
    return report


def diagonal_check(n_matrices: int = 1000, seed: int = 0) -> OracleReport:
    """Stored self-affinities must equal their recomputation from the off-diagonals."""
    report = OracleReport("diagonal")
    start = time.perf_counter()
    rng = rng_stream(seed, "oracle", "diagonal")
    for k in range(n_matrices):
        n = int(rng.integers(2, 10))
        matrix = random_affinity(n, rng)
        for i in range(n):
            gap = abs(matrix.values[i, i] - self_affinity(matrix, i))
            report.worst = max(report.worst, gap)
            if gap > SCORE_TOLERANCE:
                report.failures.append(f"matrix {k} activity {i}: diagonal off by {gap:.3e}")
        report.cases += 1
    report.seconds = time.perf_counter() - start
    return report


def run_oracles(seed: int = 0) -> List[OracleReport]:
    reports = [gradient_check(seed=seed), diagonal_check(seed=seed), solver_check(seed=seed)]
    for r in reports:
        level = logging.INFO if r.passed else logging.ERROR
        logger.log(level, "Oracle %s: %d cases, worst %.3e, %.2fs, %d failures",
                   r.name, r.cases, r.worst, r.seconds, len(r.failures))
    return reports
