"""Scoring and searching nonoverlapping groupings of activities."""

import logging
import math
from dataclasses import dataclass
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple

from .affinity import AffinityMatrix

logger = logging.getLogger(__name__)

MAX_ENUMERATE_N = 12
TIE_TOLERANCE = 1e-12
PRUNE_MARGIN = 1e-9

IndexGroups = Tuple[Tuple[int, ...], ...]


class PartitionError(ValueError):
    """Raised for invalid groupings or unsatisfiable split requests."""


@dataclass(frozen=True)
class Partition:
    """Disjoint, covering groups of activity ids, in canonical order."""
    groups: Tuple[Tuple[str, ...], ...]
    total_score: float = math.nan

    @property
    def m(self) -> int:
        return len(self.groups)

    @property
    def activity_ids(self) -> List[str]:
        return [a for group in self.groups for a in group]

    def group_of(self, activity: str) -> Tuple[str, ...]:
        for group in self.groups:
            if activity in group:
                return group
        raise KeyError(f"Activity '{activity}' is in no group")

    def __str__(self) -> str:
        return format_partition(self)


def canonical_groups(groups: Sequence[Sequence[str]], order: Sequence[str]) -> Tuple[Tuple[str, ...], ...]:
    """Members sorted by ``order``; groups sorted by their first member."""
    rank = {a: i for i, a in enumerate(order)}
    try:
        sorted_groups = [tuple(sorted(g, key=rank.__getitem__)) for g in groups]
    except KeyError as e:
        raise PartitionError(f"Unknown activity {e.args[0]!r}") from None
    return tuple(sorted(sorted_groups, key=lambda g: rank[g[0]] if g else -1))


def validate_groups(groups: Sequence[Sequence[str]], activity_ids: Sequence[str]) -> None:
    if not 1 <= len(groups) <= len(activity_ids):
        raise PartitionError(f"{len(groups)} groups for {len(activity_ids)} activities")
    seen = []
    for group in groups:
        if not group:
            raise PartitionError("Groups must be nonempty")
        seen.extend(group)
    if len(seen) != len(set(seen)):
        raise PartitionError(f"Groups overlap: {list(groups)}")
    if set(seen) != set(activity_ids):
        raise PartitionError(f"Groups cover {sorted(seen)}, expected {sorted(activity_ids)}")


def make_partition(groups: Sequence[Sequence[str]], matrix: AffinityMatrix) -> Partition:
    """Validated, canonical partition scored against ``matrix``."""
    validate_groups(groups, matrix.activity_ids)
    canonical = canonical_groups(groups, matrix.activity_ids)
    return Partition(canonical, total_score(canonical, matrix))


def activity_score(group: Sequence[str], i: str, matrix: AffinityMatrix) -> float:
    """Mean affinity onto ``i`` from the rest of its group; the diagonal for singletons."""
    if i not in group:
        raise PartitionError(f"Activity '{i}' is not in group {tuple(group)}")
    target = matrix.index(i)
    if len(group) == 1:
        return float(matrix.values[target, target])
    incoming = [matrix.values[matrix.index(j), target] for j in group if j != i]
    return math.fsum(incoming) / len(incoming)


def total_score(partition, matrix: AffinityMatrix) -> float:
    """Sum of every activity's score within its group."""
    groups = partition.groups if isinstance(partition, Partition) else partition
    validate_groups(groups, matrix.activity_ids)
    return math.fsum(activity_score(group, i, matrix) for group in groups for i in group)


def _index_score(groups: IndexGroups, values) -> float:
    terms = []
    for group in groups:
        if len(group) == 1:
            terms.append(values[group[0], group[0]])
            continue
        for i in group:
            terms.append(math.fsum(values[j, i] for j in group if j != i) / (len(group) - 1))
    return math.fsum(terms)


def _is_better(score: float, key: IndexGroups, best_score: float, best_key: Optional[IndexGroups]) -> bool:
    if best_key is None or score > best_score + TIE_TOLERANCE:
        return True
    return abs(score - best_score) <= TIE_TOLERANCE and key < best_key


def _to_partition(groups: IndexGroups, matrix: AffinityMatrix) -> Partition:
    named = tuple(tuple(matrix.activity_ids[i] for i in g) for g in groups)
    return Partition(named, _index_score(groups, matrix.values))


def _check_request(matrix: AffinityMatrix, m: int) -> None:
    if not 1 <= m <= matrix.n:
        raise PartitionError(f"Cannot split {matrix.n} activities into {m} groups")
    if matrix.missing.any():
        logger.warning("Affinity matrix has %d unmeasured entries; treating them as 0",
                       int(matrix.missing.sum()))


def stirling2(n: int, m: int) -> int:
    """Number of ways to split n items into exactly m nonempty groups."""
    if n < 0 or m < 0:
        raise ValueError("Stirling numbers need non-negative arguments")
    row = [1] + [0] * m
    for i in range(1, n + 1):
        new = [0] * (m + 1)
        for k in range(1, min(i, m) + 1):
            new[k] = k * row[k] + row[k - 1]
        row = new
    return row[m]


def iter_partitions(n: int, m: int) -> Iterator[IndexGroups]:
    """All partitions of ``range(n)`` into exactly m groups, in canonical form.

    Walks restricted growth strings, so groups come out sorted by their
    smallest member.
    """
    if not 1 <= m <= n:
        return
    groups: List[List[int]] = []

    def extend(k: int) -> Iterator[IndexGroups]:
        if n - k < m - len(groups):
            return
        if k == n:
            yield tuple(tuple(g) for g in groups)
            return
        for g in groups:
            g.append(k)
            yield from extend(k + 1)
            g.pop()
        if len(groups) < m:
            groups.append([k])
            yield from extend(k + 1)
            groups.pop()

    yield from extend(0)


def rank_partitions(matrix: AffinityMatrix, m: int) -> List[Partition]:
    """Every m-way partition, best score first (ties by canonical form)."""
    _check_request(matrix, m)
    if matrix.n > MAX_ENUMERATE_N:
        raise PartitionError(f"Enumeration is limited to {MAX_ENUMERATE_N} activities")
    scored = [(_index_score(g, matrix.values), g) for g in iter_partitions(matrix.n, m)]
    scored.sort(key=lambda item: (-item[0], item[1]))
    return [_to_partition(g, matrix) for _, g in scored]


def enumerate_best(matrix: AffinityMatrix, m: int) -> Partition:
    """Exact best m-way partition by exhaustive enumeration."""
    _check_request(matrix, m)
    if matrix.n > MAX_ENUMERATE_N:
        raise PartitionError(f"Enumeration is limited to {MAX_ENUMERATE_N} activities")
    best_score, best_key = -math.inf, None
    for groups in iter_partitions(matrix.n, m):
        score = _index_score(groups, matrix.values)
        if _is_better(score, groups, best_score, best_key):
            best_score, best_key = score, groups
    return _to_partition(best_key, matrix)


def _best_mean(current: List[float], candidates: List[float]) -> float:
    """Largest mean reachable by adding any subset of candidates to current."""
    total, count = math.fsum(current), len(current)
    for c in sorted(candidates, reverse=True):
        if c * count <= total:
            break
        total += c
        count += 1
    return total / count


def branch_and_bound_best(matrix: AffinityMatrix, m: int) -> Partition:
    """Exact best m-way partition by depth-first branch and bound.

    Activities are assigned in order, each joining an open group or opening
    a new one. A node is pruned when even the best-case score of every
    activity cannot beat the incumbent.
    """
    _check_request(matrix, m)
    values = matrix.values
    n = matrix.n
    free_bound = [
        max([values[u, u]] + [values[j, u] for j in range(n) if j != u]) for u in range(n)
    ]
    groups: List[List[int]] = []
    best = {"score": -math.inf, "key": None}

    def upper_bound(k: int) -> float:
        unassigned = range(k, n)
        terms = []
        for group in groups:
            for i in group:
                incoming = [values[u, i] for u in unassigned]
                others = [values[j, i] for j in group if j != i]
                if others:
                    terms.append(_best_mean(others, incoming))
                else:
                    terms.append(max([values[i, i]] + incoming))
        terms.extend(free_bound[u] for u in unassigned)
        return math.fsum(terms)

    def search(k: int) -> None:
        if n - k < m - len(groups):
            return
        if k == n:
            key = tuple(tuple(g) for g in groups)
            score = _index_score(key, values)
            if _is_better(score, key, best["score"], best["key"]):
                best["score"], best["key"] = score, key
            return
        if best["key"] is not None and upper_bound(k) < best["score"] - PRUNE_MARGIN:
            return
        for group in groups:
            group.append(k)
            search(k + 1)
            group.pop()
        if len(groups) < m:
            groups.append([k])
            search(k + 1)
            groups.pop()

    search(0)
    return _to_partition(best["key"], matrix)


SOLVERS: Dict[str, Callable[[AffinityMatrix, int], Partition]] = {
    "branch_and_bound": branch_and_bound_best,
    "enumerate": enumerate_best,
}


def solve(matrix: AffinityMatrix, m: int, solver: str = "branch_and_bound") -> Partition:
    try:
        return SOLVERS[solver](matrix, m)
    except KeyError:
        raise ValueError(f"Unknown solver '{solver}', expected one of {sorted(SOLVERS)}") from None


def hierarchical_refine(current: Partition, matrix: AffinityMatrix, rule: str = "largest",
                        solver: str = "branch_and_bound") -> Partition:
    """Split the largest group in two, leaving every other group as it is.

    Size ties go to the group holding the earliest activity. The sub-split is
    chosen on the group's own sub-matrix.
    """
    if rule != "largest":
        raise ValueError(f"Unknown refinement rule '{rule}'")
    validate_groups(current.groups, matrix.activity_ids)
    canonical = canonical_groups(current.groups, matrix.activity_ids)
    largest = max(len(g) for g in canonical)
    if largest < 2:
        raise PartitionError("Every group is a singleton; nothing to refine")
    chosen = next(g for g in canonical if len(g) == largest)

    sub_split = solve(matrix.sub_matrix(chosen), 2, solver)
    groups = [g for g in canonical if g != chosen] + list(sub_split.groups)
    refined = make_partition(groups, matrix)
    logger.info("Refined %s into %s", format_partition(current), format_partition(refined))
    return refined


def format_partition(partition, tags: Optional[Dict[str, str]] = None) -> str:
    """Comma-separated groups of concatenated activity tags, e.g. ``sd,n,kt``."""
    groups = partition.groups if isinstance(partition, Partition) else partition
    tags = tags or {}
    return ",".join("".join(tags.get(a, a) for a in group) for group in groups)


def parse_partition(text: str, activity_ids: Sequence[str],
                    tags: Optional[Dict[str, str]] = None) -> Tuple[Tuple[str, ...], ...]:
    """Inverse of ``format_partition``; tags must be single characters."""
    by_tag = {(tags or {}).get(a, a): a for a in activity_ids}
    if any(len(t) != 1 for t in by_tag):
        raise PartitionError("Partition text needs single-character activity tags")
    groups = []
    for chunk in text.strip().split(","):
        try:
            groups.append(tuple(by_tag[ch] for ch in chunk.strip()))
        except KeyError as e:
            raise PartitionError(f"Unknown activity tag {e.args[0]!r} in '{text}'") from None
    validate_groups(groups, activity_ids)
    return canonical_groups(groups, activity_ids)
