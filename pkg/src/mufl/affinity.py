"""Lookahead affinities between training activities.

The affinity of activity i onto activity j at one time-step is the relative
drop in j's loss after the shared trunk takes one plain gradient step on i's
loss. Samples are averaged per client, then across the round's clients. The
diagonal is never measured directly; it is filled from the off-diagonals
(normalized affinity of i to and from every other activity).
"""

import logging
import math
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Dict, FrozenSet, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from .nn_core import MultiTaskModel, backward, forward_loss, head_loss, lookahead_shared, trunk_features

if TYPE_CHECKING:
    from .federation import Batch

logger = logging.getLogger(__name__)

LAST_ROUND = "last"
MEAN_OVER_ROUNDS = "mean"
FINALIZE_POLICIES = (LAST_ROUND, MEAN_OVER_ROUNDS)


@dataclass
class AffinityProbe:
    """When and how often clients measure affinities.

    ``active_rounds`` are 1-based round numbers within the all-in-one phase.
    The lookahead step always uses the learning rate of the current round.
    """
    frequency: int = 5
    active_rounds: FrozenSet[int] = field(default_factory=lambda: frozenset(range(1, 11)))
    lookahead_lr_policy: str = "current"

    def __post_init__(self):
        self.active_rounds = frozenset(int(r) for r in self.active_rounds)
        if self.frequency < 1:
            raise ValueError(f"Probe frequency must be at least 1, got {self.frequency}")
        if any(r < 1 for r in self.active_rounds):
            raise ValueError("Probe rounds are 1-based")
        if self.lookahead_lr_policy != "current":
            raise ValueError(f"Unsupported lookahead LR policy: {self.lookahead_lr_policy}")

    def is_active(self, round_number: int) -> bool:
        return round_number in self.active_rounds

    def check_within(self, R0: int) -> None:
        beyond = sorted(r for r in self.active_rounds if r > R0)
        if beyond:
            raise ValueError(f"Probe rounds {beyond} fall after the all-in-one phase (R0={R0})")


@dataclass
class AffinityAccumulator:
    """Per-client running sums of affinity samples, one cell per ordered pair."""
    activity_ids: Tuple[str, ...]
    sums: np.ndarray
    pair_counts: np.ndarray
    skipped: np.ndarray
    count: int = 0
    evaluations: int = 0

    @classmethod
    def empty(cls, activity_ids: Sequence[str]) -> "AffinityAccumulator":
        n = len(activity_ids)
        return cls(
            activity_ids=tuple(activity_ids),
            sums=np.zeros((n, n)),
            pair_counts=np.zeros((n, n), dtype=np.int64),
            skipped=np.zeros((n, n), dtype=np.int64),
        )

    def means(self) -> np.ndarray:
        """Mean sample per pair; NaN where no sample was taken."""
        out = np.full(self.sums.shape, np.nan)
        seen = self.pair_counts > 0
        out[seen] = self.sums[seen] / self.pair_counts[seen]
        return out


@dataclass
class AffinityMatrix:
    """Averaged affinities ``values[i, j]`` of activity i onto activity j.

    Off-diagonal entries that were never measured are stored as 0 and flagged
    in ``missing``.
    """
    values: np.ndarray
    activity_ids: Tuple[str, ...]
    source_round: Union[int, str] = MEAN_OVER_ROUNDS
    missing: Optional[np.ndarray] = None

    def __post_init__(self):
        self.values = np.array(self.values, dtype=np.float64)
        self.activity_ids = tuple(self.activity_ids)
        n = len(self.activity_ids)
        if self.values.shape != (n, n):
            raise ValueError(f"Matrix shape {self.values.shape} does not match {n} activities")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("Affinity matrix has non-finite entries")
        if self.missing is None:
            self.missing = np.zeros((n, n), dtype=bool)

    @classmethod
    def from_off_diagonal(cls, off_diagonal: np.ndarray, activity_ids: Sequence[str],
                          source_round: Union[int, str] = MEAN_OVER_ROUNDS,
                          missing: Optional[np.ndarray] = None) -> "AffinityMatrix":
        """Build a matrix and fill its diagonal from the off-diagonal entries."""
        values = np.array(off_diagonal, dtype=np.float64)
        n = values.shape[0]
        np.fill_diagonal(values, 0.0)
        values[np.diag_indices(n)] = [self_affinity(values, i) for i in range(n)] if n >= 2 else 0.0
        return cls(values, activity_ids, source_round, missing)

    @property
    def n(self) -> int:
        return len(self.activity_ids)

    def index(self, activity: str) -> int:
        try:
            return self.activity_ids.index(activity)
        except ValueError:
            raise KeyError(f"Unknown activity: {activity}") from None

    def onto(self, source: str, target: str) -> float:
        return float(self.values[self.index(source), self.index(target)])

    def sub_matrix(self, activity_ids: Sequence[str]) -> "AffinityMatrix":
        """Restriction to some activities, diagonal recomputed from the restriction."""
        idx = [self.index(a) for a in activity_ids]
        sub = self.values[np.ix_(idx, idx)]
        return AffinityMatrix.from_off_diagonal(sub, activity_ids, self.source_round,
                                                self.missing[np.ix_(idx, idx)])


def step_affinity(model: MultiTaskModel, batch: "Batch", i: str, j: str,
                  lookahead_lr: float) -> Optional[float]:
    """One affinity sample of activity ``i`` onto ``j``; None when j's loss is zero."""
    theta = lookahead_shared(model, i, batch, lookahead_lr)
    before, _ = forward_loss(model, j, batch)
    if before == 0.0:
        return None
    after = head_loss(model, j, trunk_features(model, batch.features, theta), batch.targets[j])
    return 1.0 - after / before


def accumulate(acc: AffinityAccumulator, model: MultiTaskModel, batch: "Batch",
               lookahead_lr: float) -> None:
    """Add one sample for every ordered pair i != j.

    Each activity's lookahead trunk is computed once and evaluated against
    every other activity.
    """
    ids = acc.activity_ids
    baseline: Dict[str, float] = {}
    lookahead = {}
    for a in ids:
        loss, cache = forward_loss(model, a, batch)
        grads = backward(model, a, cache)
        baseline[a] = loss
        lookahead[a] = {
            name: block.values - lookahead_lr * grads[name]
            for name, block in model.trunk_blocks().items()
        }

    for si, source in enumerate(ids):
        hidden = trunk_features(model, batch.features, lookahead[source])
        for ti, target in enumerate(ids):
            if ti == si:
                continue
            if baseline[target] == 0.0:
                acc.skipped[si, ti] += 1
                logger.debug("Skipped affinity %s->%s: zero loss", source, target)
                continue
            after = head_loss(model, target, hidden, batch.targets[target])
            acc.sums[si, ti] += 1.0 - after / baseline[target]
            acc.pair_counts[si, ti] += 1

    n = len(ids)
    acc.count += 1
    # one forward/backward per activity plus one head evaluation per ordered pair
    acc.evaluations += n + n * (n - 1)


def aggregate_round(accs: Iterable[AffinityAccumulator]) -> np.ndarray:
    """Unweighted mean over clients of per-client means (NaN diagonal).

    Pairs that no client measured stay NaN.
    """
    usable = [a for a in accs if a.count >= 1]
    if not usable:
        raise ValueError("No client measured any affinity this round")
    ids = usable[0].activity_ids
    if any(a.activity_ids != ids for a in usable):
        raise ValueError("Accumulators cover different activities")

    n = len(ids)
    client_means = [a.means() for a in usable]
    out = np.full((n, n), np.nan)
    for si in range(n):
        for ti in range(n):
            if si == ti:
                continue
            samples = [m[si, ti] for m in client_means if not np.isnan(m[si, ti])]
            if samples:
                out[si, ti] = math.fsum(samples) / len(samples)
            else:
                logger.warning("No client measured affinity %s->%s", ids[si], ids[ti])
    return out


def finalize(round_matrices: Dict[int, np.ndarray], activity_ids: Sequence[str],
             policy: str = LAST_ROUND) -> AffinityMatrix:
    """Pick the last active round (or average the active rounds) and fill the diagonal."""
    if not round_matrices:
        raise ValueError("No round affinity matrices to finalize")
    if policy not in FINALIZE_POLICIES:
        raise ValueError(f"Unknown finalize policy '{policy}', expected one of {FINALIZE_POLICIES}")

    rounds = sorted(round_matrices)
    if policy == LAST_ROUND:
        values = np.array(round_matrices[rounds[-1]], dtype=np.float64)
        source: Union[int, str] = rounds[-1]
    else:
        stack = [np.asarray(round_matrices[r], dtype=np.float64) for r in rounds]
        n = stack[0].shape[0]
        values = np.full((n, n), np.nan)
        for si in range(n):
            for ti in range(n):
                samples = [m[si, ti] for m in stack if not np.isnan(m[si, ti])]
                if samples:
                    values[si, ti] = math.fsum(samples) / len(samples)
        source = MEAN_OVER_ROUNDS

    np.fill_diagonal(values, 0.0)
    missing = np.isnan(values)
    values[missing] = 0.0
    return AffinityMatrix.from_off_diagonal(values, activity_ids, source, missing)


def self_affinity(matrix: Union[AffinityMatrix, np.ndarray], i: int) -> float:
    """Mean of the affinities from and onto activity ``i`` over all other activities."""
    values = matrix.values if isinstance(matrix, AffinityMatrix) else np.asarray(matrix)
    n = values.shape[0]
    if n < 2:
        raise ValueError("Self-affinity needs at least two activities")
    terms: List[float] = []
    for j in range(n):
        if j != i:
            terms.append(values[i, j])
            terms.append(values[j, i])
    if not all(math.isfinite(t) for t in terms):
        raise ValueError(f"Off-diagonal affinities of activity {i} are not finite")
    return math.fsum(terms) / (2 * n - 2)
