"""The server: training regimes, consolidation, splitting and the round loop."""

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .affinity import FINALIZE_POLICIES, LAST_ROUND, AffinityMatrix, AffinityProbe, aggregate_round, finalize
from .federation import (
    ClientPool,
    EvalReport,
    SyntheticTaskSpec,
    aggregation_weights,
    evaluate,
    fedavg,
    local_train,
    rng_stream,
    sample_clients,
)
from .ledger import CostLedger, eval_units, probe_units, step_units
from .nn_core import LOSS_KINDS, REGRESSION, HyperParams, MultiTaskModel, build_model, poly_lr
from .partition import (
    SOLVERS,
    Partition,
    PartitionError,
    canonical_groups,
    format_partition,
    hierarchical_refine,
    iter_partitions,
    make_partition,
    parse_partition,
    solve,
    validate_groups,
)

logger = logging.getLogger(__name__)

ONE_BY_ONE = "one_by_one"
ALL_IN_ONE = "all_in_one"
STANDALONE = "standalone"
MUFL = "mufl"
HIERARCHICAL = "hierarchical"
FIXED_SPLIT = "fixed_split"
EXHAUSTIVE = "exhaustive"
MODES = (ONE_BY_ONE, ALL_IN_ONE, STANDALONE, MUFL, HIERARCHICAL, FIXED_SPLIT, EXHAUSTIVE)

RESTART = "restart"
CONTINUE = "continue"
LR_SCHEDULES = (RESTART, CONTINUE)

INIT_FROM_ALL_IN_ONE = "all_in_one"
INIT_FROM_SCRATCH = "scratch"
SPLIT_INITS = (INIT_FROM_ALL_IN_ONE, INIT_FROM_SCRATCH)

PROBE_PHASE = "probe"


@dataclass
class TrainingActivity:
    """One FL job: an activity id, its loss and head shape, and a display tag."""
    activity_id: str
    loss_kind: str = REGRESSION
    output_dim: int = 1
    tag: str = ""

    def __post_init__(self):
        if not self.activity_id:
            raise ValueError("Activity id must be nonempty")
        if self.loss_kind not in LOSS_KINDS:
            raise ValueError(f"Unknown loss kind '{self.loss_kind}' for '{self.activity_id}'")
        if self.output_dim < 1:
            raise ValueError(f"Activity '{self.activity_id}' needs a positive output width")
        self.tag = self.tag or self.activity_id[0]
        if len(self.tag) != 1:
            raise ValueError(f"Display tag must be one character, got '{self.tag}'")


def activities_from_spec(spec: SyntheticTaskSpec) -> List[TrainingActivity]:
    return [
        TrainingActivity(a, spec.loss_kinds[a], spec.output_dim(a))
        for a in spec.activity_ids
    ]


@dataclass
class RegimeConfig:
    """How a run trains: regime, round counts, sampling and splitting options."""
    mode: str = MUFL
    R: int = 100
    R0: int = 30
    R1: int = 40
    R2: int = 30
    m: int = 2
    K: int = 4
    E: int = 1
    probe: Optional[AffinityProbe] = None
    seed: int = 0
    lr_schedule: str = RESTART
    finalize_policy: str = LAST_ROUND
    solver: str = "branch_and_bound"
    split_init: str = INIT_FROM_ALL_IN_ONE
    partition: Optional[str] = None
    validate: bool = True
    trunk_widths: Tuple[int, ...] = (16, 16)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"Unknown mode '{self.mode}', expected one of {MODES}")
        if self.R < 1:
            raise ValueError(f"R must be at least 1, got {self.R}")
        if self.K < 1:
            raise ValueError(f"K must be at least 1, got {self.K}")
        if self.E < 0:
            raise ValueError(f"E must be non-negative, got {self.E}")
        if self.m < 1:
            raise ValueError(f"m must be at least 1, got {self.m}")
        if self.lr_schedule not in LR_SCHEDULES:
            raise ValueError(f"Unknown lr_schedule '{self.lr_schedule}'")
        if self.finalize_policy not in FINALIZE_POLICIES:
            raise ValueError(f"Unknown finalize_policy '{self.finalize_policy}'")
        if self.solver not in SOLVERS:
            raise ValueError(f"Unknown solver '{self.solver}'")
        if self.split_init not in SPLIT_INITS:
            raise ValueError(f"Unknown split_init '{self.split_init}'")
        if not self.trunk_widths or any(w < 1 for w in self.trunk_widths):
            raise ValueError(f"Invalid trunk widths {self.trunk_widths}")
        self.trunk_widths = tuple(self.trunk_widths)

        splits_after_r0 = self.mode in (MUFL, FIXED_SPLIT, EXHAUSTIVE)
        if splits_after_r0 and not 1 <= self.R0 < self.R:
            raise ValueError(f"{self.mode} requires 1 <= R0 < R, got R0={self.R0}, R={self.R}")
        if self.mode == HIERARCHICAL:
            if min(self.R0, self.R1, self.R2) < 1:
                raise ValueError("Hierarchical phases need at least one round each")
            if self.R0 + self.R1 + self.R2 != self.R:
                raise ValueError(f"R0+R1+R2 = {self.R0 + self.R1 + self.R2} must equal R = {self.R}")
        if self.mode in (MUFL, HIERARCHICAL):
            self.active_probe.check_within(self.R0)
        if self.mode == FIXED_SPLIT and not self.partition:
            raise ValueError("fixed_split needs a partition")

    @property
    def active_probe(self) -> Optional[AffinityProbe]:
        """The probe to use; splitting regimes always measure affinities."""
        if self.probe is None and self.mode in (MUFL, HIERARCHICAL):
            return AffinityProbe()
        return self.probe


@dataclass
class RoundRecord:
    """Everything observed in one round of one group."""
    round_index: int
    phase: str
    group: str
    selected: Tuple[int, ...]
    train_loss: Dict[str, float]
    val_loss: Dict[str, float]
    lr: float
    ledger_delta: float


@dataclass
class RunResult:
    """Final models and everything recorded along the way."""
    mode: str
    activities: List[TrainingActivity]
    models: List[MultiTaskModel]
    records: List[RoundRecord]
    ledger: CostLedger
    evaluation: EvalReport
    partitions: List[Partition] = field(default_factory=list)
    affinity_rounds: Dict[int, np.ndarray] = field(default_factory=dict)
    affinity: Optional[AffinityMatrix] = None
    client_reports: Dict[int, EvalReport] = field(default_factory=dict)
    ranking: List[Tuple[str, float]] = field(default_factory=list)

    @property
    def activity_ids(self) -> List[str]:
        return [a.activity_id for a in self.activities]

    @property
    def tags(self) -> Dict[str, str]:
        return {a.activity_id: a.tag for a in self.activities}

    @property
    def partition(self) -> Optional[Partition]:
        return self.partitions[-1] if self.partitions else None


def group_key(activity_ids: Sequence[str]) -> str:
    return "|".join(activity_ids)


def consolidate(activities: Sequence[TrainingActivity], input_dim: int,
                trunk_widths: Sequence[int] = (16, 16), seed: int = 0) -> MultiTaskModel:
    """One shared trunk plus one freshly initialized head per activity.

    Each head has its own init stream, so a head's initial weights do not
    depend on which other activities were consolidated with it.
    """
    if not activities:
        raise ValueError("Nothing to consolidate")
    ids = [a.activity_id for a in activities]
    if len(set(ids)) != len(ids):
        raise ValueError(f"Duplicate activity ids: {ids}")
    return build_model(
        input_dim=input_dim,
        trunk_widths=list(trunk_widths),
        head_outputs={a.activity_id: a.output_dim for a in activities},
        loss_kinds={a.activity_id: a.loss_kind for a in activities},
        trunk_rng=rng_stream(seed, "init", "trunk"),
        head_rngs={a: rng_stream(seed, "init", "head", a) for a in ids},
    )


def split_models(model: MultiTaskModel, partition: Union[Partition, Sequence[Sequence[str]]]
                 ) -> Dict[Tuple[str, ...], MultiTaskModel]:
    """One model per group: a copy of the trunk and the group's heads, buffers zeroed."""
    groups = partition.groups if isinstance(partition, Partition) else partition
    covered = [a for g in groups for a in g]
    if sorted(covered) != sorted(model.activity_ids) or len(set(covered)) != len(covered):
        raise ValueError(f"Partition {list(groups)} does not match model activities {model.activity_ids}")
    models = {}
    for group in groups:
        split = model.select(tuple(group))
        split.reset_buffers()
        models[tuple(group)] = split
    return models


def reconstruct(models: Sequence[MultiTaskModel]) -> Dict[str, MultiTaskModel]:
    """Map every activity to the model that trained it."""
    owners: Dict[str, MultiTaskModel] = {}
    for model in models:
        for activity in model.activity_ids:
            if activity in owners:
                raise ValueError(f"Activity '{activity}' appears in more than one model")
            owners[activity] = model
    return owners


class Server:
    """Coordinates rounds over a shared client pool and keeps the ledger."""

    def __init__(self, activities: Sequence[TrainingActivity], pool: ClientPool,
                 cfg: RegimeConfig, hyper: Optional[HyperParams] = None):
        if cfg.K > len(pool):
            raise ValueError(f"K={cfg.K} exceeds the pool size {len(pool)}")
        self.activities = list(activities)
        self.pool = pool
        self.cfg = cfg
        self.hyper = hyper or HyperParams(total_rounds=cfg.R)
        self.ledger = CostLedger()
        self.records: List[RoundRecord] = []
        self.tags = {a.activity_id: a.tag for a in self.activities}
        self._by_id = {a.activity_id: a for a in self.activities}

    @property
    def activity_ids(self) -> List[str]:
        return [a.activity_id for a in self.activities]

    def consolidate(self, activity_ids: Optional[Sequence[str]] = None) -> MultiTaskModel:
        ids = self.activity_ids if activity_ids is None else activity_ids
        return consolidate([self._by_id[a] for a in ids], self.pool.spec.input_dim,
                           self.cfg.trunk_widths, self.cfg.seed)

    def test_sets(self, activity_ids: Optional[Sequence[str]] = None):
        ids = self.activity_ids if activity_ids is None else activity_ids
        return {a: self.pool.test_batches for a in ids}

    @property
    def test_examples(self) -> int:
        return sum(b.size for b in self.pool.test_batches)

    def group_label(self, activity_ids: Sequence[str]) -> str:
        return "".join(self.tags[a] for a in activity_ids)

    def lr_for(self, r: int, phase_rounds: int, round_index: int) -> float:
        if self.cfg.lr_schedule == RESTART:
            return poly_lr(r, phase_rounds, self.hyper.eta0)
        return poly_lr(round_index, self.cfg.R, self.hyper.eta0)

    def run_round(self, model: MultiTaskModel, phase: str, round_index: int, lr: float,
                  probe: Optional[AffinityProbe] = None
                  ) -> Tuple[MultiTaskModel, RoundRecord, Optional[np.ndarray]]:
        """Sample K clients, train them locally and aggregate with FedAvg.

        ``round_index`` is the global round; sampling and shuffling streams
        are keyed by it and by the group's activities.
        """
        key = group_key(model.activity_ids)
        seed = self.cfg.seed
        selected = sample_clients(self.pool, self.cfg.K, rng_stream(seed, "sample", key, round_index))

        updates = {}
        for cid in selected:
            rng = rng_stream(seed, "shuffle", key, round_index, cid)
            updates[cid] = local_train(model, self.pool.client(cid), self.cfg.E, lr,
                                       self.hyper, probe, rng)

        ids = sorted(updates)
        weights = aggregation_weights([self.pool.client(c).n_examples for c in ids])
        aggregated = fedavg([updates[c].model for c in ids], weights, ids)
        self.ledger.aggregations += 1

        delta = self.ledger.charge(phase, step_units(model), sum(u.examples for u in updates.values()))
        affinity = None
        if probe is not None:
            probed = sum(u.probe_examples for u in updates.values())
            if probed:
                delta += self.ledger.charge(PROBE_PHASE, probe_units(model), probed)
            accumulators = [updates[c].accumulator for c in ids if updates[c].accumulator is not None]
            if any(acc.count for acc in accumulators):
                affinity = aggregate_round(accumulators)

        train_loss = {
            a: math.fsum(w * updates[c].train_losses[a] for w, c in zip(weights, ids))
            for a in model.activity_ids
        }
        val_loss: Dict[str, float] = {}
        if self.cfg.validate:
            report = evaluate(aggregated, self.test_sets(model.activity_ids))
            self.ledger.charge_eval(eval_units(aggregated), self.test_examples)
            val_loss = report.per_activity

        record = RoundRecord(round_index + 1, phase, self.group_label(model.activity_ids),
                             tuple(selected), train_loss, val_loss, lr, delta)
        self.records.append(record)
        logger.debug("Round %d %s [%s] lr=%.5f clients=%s", record.round_index, phase,
                     record.group, lr, list(selected))
        return aggregated, record, affinity

    def train_phase(self, model: MultiTaskModel, phase: str, n_rounds: int, start_round: int = 0,
                    probe: Optional[AffinityProbe] = None) -> Tuple[MultiTaskModel, Dict[int, np.ndarray]]:
        """Run ``n_rounds`` rounds; probe rounds are 1-based within the phase."""
        affinity_rounds = {}
        for r in range(n_rounds):
            round_index = start_round + r
            active = probe if probe is not None and probe.is_active(r + 1) else None
            lr = self.lr_for(r, n_rounds, round_index)
            model, _, affinity = self.run_round(model, phase, round_index, lr, active)
            if affinity is not None:
                affinity_rounds[r + 1] = affinity
        return model, affinity_rounds

    def train_groups(self, models: Dict[Tuple[str, ...], MultiTaskModel], phase: str,
                     n_rounds: int, start_round: int) -> Dict[Tuple[str, ...], MultiTaskModel]:
        """Train each group in turn; groups draw clients independently."""
        trained = {}
        for group, model in models.items():
            label = f"{phase}:{self.group_label(group)}"
            logger.info("Training group %s for %d rounds", label, n_rounds)
            trained[group], _ = self.train_phase(model, label, n_rounds, start_round)
        return trained

    def affinity_matrix(self, affinity_rounds: Dict[int, np.ndarray]) -> AffinityMatrix:
        if not affinity_rounds:
            raise ValueError("No affinities were measured; check probe rounds and client batch counts")
        matrix = finalize(affinity_rounds, self.activity_ids, self.cfg.finalize_policy)
        logger.info("Finalized affinities from round %s", matrix.source_round)
        return matrix

    def result(self, mode: str, models: Sequence[MultiTaskModel], **extra) -> RunResult:
        reconstruct(models)
        evaluation = evaluate(list(models), self.test_sets())
        return RunResult(mode, self.activities, list(models), self.records, self.ledger,
                         evaluation, **extra)


def _server(activities, pool, cfg, hyper) -> Server:
    return Server(activities, pool, cfg, hyper)


def run_one_by_one(activities: Sequence[TrainingActivity], pool: ClientPool, cfg: RegimeConfig,
                   hyper: Optional[HyperParams] = None) -> RunResult:
    """Vanilla scheduler: each activity trains alone for R rounds, one after another."""
    server = _server(activities, pool, cfg, hyper)
    models = []
    for activity in server.activity_ids:
        model = server.consolidate([activity])
        model, _ = server.train_phase(model, f"{ONE_BY_ONE}:{server.tags[activity]}", cfg.R)
        models.append(model)
    return server.result(ONE_BY_ONE, models)


def run_all_in_one(activities: Sequence[TrainingActivity], pool: ClientPool, cfg: RegimeConfig,
                   hyper: Optional[HyperParams] = None, mode: str = ALL_IN_ONE) -> RunResult:
    """Consolidate every activity into one model and train it for R rounds."""
    server = _server(activities, pool, cfg, hyper)
    model, affinity_rounds = server.train_phase(server.consolidate(), ALL_IN_ONE, cfg.R,
                                                probe=cfg.active_probe)
    matrix = server.affinity_matrix(affinity_rounds) if affinity_rounds else None
    partitions = [make_partition([server.activity_ids], matrix)] if matrix is not None else []
    return server.result(mode, [model], affinity_rounds=affinity_rounds, affinity=matrix,
                         partitions=partitions)


def run_mufl(activities: Sequence[TrainingActivity], pool: ClientPool, cfg: RegimeConfig,
             hyper: Optional[HyperParams] = None) -> RunResult:
    """Consolidate, measure affinities, split into m groups and keep training each group.

    With one activity or m=1 the split is the identity, so training simply
    continues as one consolidated activity.
    """
    if len(activities) == 1 or cfg.m == 1:
        return run_all_in_one(activities, pool, cfg, hyper, mode=MUFL)
    if cfg.m > len(activities):
        raise PartitionError(f"Cannot split {len(activities)} activities into {cfg.m} groups")

    server = _server(activities, pool, cfg, hyper)
    model, affinity_rounds = server.train_phase(server.consolidate(), ALL_IN_ONE, cfg.R0,
                                                probe=cfg.active_probe)
    matrix = server.affinity_matrix(affinity_rounds)
    partition = solve(matrix, cfg.m, cfg.solver)
    logger.info("Split into %s (score %.6f)", format_partition(partition, server.tags),
                partition.total_score)

    groups = server.train_groups(split_models(model, partition), "split", cfg.R - cfg.R0, cfg.R0)
    return server.result(MUFL, list(groups.values()), partitions=[partition],
                         affinity_rounds=affinity_rounds, affinity=matrix)


def run_hierarchical(activities: Sequence[TrainingActivity], pool: ClientPool, cfg: RegimeConfig,
                     hyper: Optional[HyperParams] = None) -> RunResult:
    """All-in-one for R0 rounds, two groups for R1, then the larger group split again for R2."""
    if len(activities) == 1:
        return run_all_in_one(activities, pool, cfg, hyper, mode=HIERARCHICAL)

    server = _server(activities, pool, cfg, hyper)
    model, affinity_rounds = server.train_phase(server.consolidate(), ALL_IN_ONE, cfg.R0,
                                                probe=cfg.active_probe)
    matrix = server.affinity_matrix(affinity_rounds)

    two_way = solve(matrix, 2, cfg.solver)
    logger.info("First split: %s", format_partition(two_way, server.tags))
    phase_b = server.train_groups(split_models(model, two_way), "split2", cfg.R1, cfg.R0)

    if max(len(g) for g in two_way.groups) >= 2:
        refined = hierarchical_refine(two_way, matrix, solver=cfg.solver)
    else:
        refined = two_way

    phase_c_models = {}
    for group in refined.groups:
        if group in phase_b:
            phase_c_models[group] = phase_b[group]
            continue
        parent = next(g for g in phase_b if set(group) <= set(g))
        sub = phase_b[parent].select(group)
        sub.reset_buffers()
        phase_c_models[group] = sub
    phase_c = server.train_groups(phase_c_models, "split3", cfg.R2, cfg.R0 + cfg.R1)
    return server.result(HIERARCHICAL, list(phase_c.values()), partitions=[two_way, refined],
                         affinity_rounds=affinity_rounds, affinity=matrix)


def run_standalone(activities: Sequence[TrainingActivity], pool: ClientPool, cfg: RegimeConfig,
                   hyper: Optional[HyperParams] = None) -> RunResult:
    """Every client trains its own consolidated model on its own data; nothing is shared.

    The reported evaluation is the mean over clients of their test losses.
    """
    server = _server(activities, pool, cfg, hyper)
    reports: Dict[int, EvalReport] = {}
    models = {}
    for client in pool.clients:
        model = server.consolidate()
        units = step_units(model)
        train_loss: Dict[str, float] = {}
        lr = server.hyper.eta0
        for r in range(cfg.R):
            lr = server.lr_for(r, cfg.R, r)
            rng = rng_stream(cfg.seed, "shuffle", STANDALONE, r, client.client_id)
            update = local_train(model, client, cfg.E, lr, server.hyper, None, rng)
            server.ledger.charge(STANDALONE, units, update.examples)
            model, train_loss = update.model, update.train_losses
        report = evaluate(model, server.test_sets())
        server.ledger.charge_eval(eval_units(model), server.test_examples)
        reports[client.client_id] = report
        models[client.client_id] = model
        server.records.append(RoundRecord(cfg.R, STANDALONE, server.group_label(server.activity_ids),
                                          (client.client_id,), train_loss, report.per_activity, lr, 0.0))

    ids = server.activity_ids
    per_activity = {a: math.fsum(r.per_activity[a] for r in reports.values()) / len(reports) for a in ids}
    evaluation = EvalReport(per_activity, sum(per_activity.values()), sum(r.examples for r in reports.values()))
    return RunResult(STANDALONE, server.activities, list(models.values()), server.records,
                     server.ledger, evaluation, client_reports=reports)


def _fixed_split_models(server: Server, groups: Sequence[Tuple[str, ...]],
                        base: Optional[MultiTaskModel]) -> Dict[Tuple[str, ...], MultiTaskModel]:
    cfg = server.cfg
    if base is None:
        fresh = {tuple(g): server.consolidate(g) for g in groups}
        return server.train_groups(fresh, "scratch", cfg.R, 0)
    return server.train_groups(split_models(base, groups), "split", cfg.R - cfg.R0, cfg.R0)


def _unscored(groups: Sequence[Sequence[str]], activity_ids: Sequence[str]) -> Partition:
    validate_groups(groups, activity_ids)
    return Partition(canonical_groups(groups, activity_ids))


def run_fixed_split(activities: Sequence[TrainingActivity], pool: ClientPool, cfg: RegimeConfig,
                    hyper: Optional[HyperParams] = None,
                    groups: Optional[Sequence[Sequence[str]]] = None) -> RunResult:
    """Train a given partition from all-in-one initialization or from scratch.

    From scratch, every group is freshly consolidated and trained for R
    rounds; otherwise R0 all-in-one rounds precede R-R0 rounds per group.
    """
    server = _server(activities, pool, cfg, hyper)
    if groups is None:
        groups = parse_partition(cfg.partition, server.activity_ids, server.tags)
    partition = _unscored(groups, server.activity_ids)
    base = None
    if cfg.split_init == INIT_FROM_ALL_IN_ONE:
        base, _ = server.train_phase(server.consolidate(), ALL_IN_ONE, cfg.R0)
    trained = _fixed_split_models(server, partition.groups, base)
    return server.result(FIXED_SPLIT, list(trained.values()), partitions=[partition])


def run_exhaustive(activities: Sequence[TrainingActivity], pool: ClientPool, cfg: RegimeConfig,
                   hyper: Optional[HyperParams] = None) -> RunResult:
    """Train every m-way partition and rank them by summed test loss.

    The all-in-one phase is shared by every candidate. The returned models
    belong to the best candidate.
    """
    server = _server(activities, pool, cfg, hyper)
    ids = server.activity_ids
    if cfg.m > len(ids):
        raise PartitionError(f"Cannot split {len(ids)} activities into {cfg.m} groups")
    base = None
    if cfg.split_init == INIT_FROM_ALL_IN_ONE:
        base, _ = server.train_phase(server.consolidate(), ALL_IN_ONE, cfg.R0)

    ranking = []
    best = None
    for index_groups in iter_partitions(len(ids), cfg.m):
        groups = tuple(tuple(ids[i] for i in g) for g in index_groups)
        trained = _fixed_split_models(server, groups, base)
        total = evaluate(list(trained.values()), server.test_sets()).total
        label = format_partition(groups, server.tags)
        ranking.append((label, total))
        logger.info("Candidate %s: total test loss %.6f", label, total)
        if best is None or total < best[0]:
            best = (total, groups, trained)

    ranking.sort(key=lambda item: item[1])
    _, groups, trained = best
    return server.result(EXHAUSTIVE, list(trained.values()),
                         partitions=[_unscored(groups, ids)], ranking=ranking)


RUNNERS = {
    ONE_BY_ONE: run_one_by_one,
    ALL_IN_ONE: run_all_in_one,
    STANDALONE: run_standalone,
    MUFL: run_mufl,
    HIERARCHICAL: run_hierarchical,
    FIXED_SPLIT: run_fixed_split,
    EXHAUSTIVE: run_exhaustive,
}


def run_regime(activities: Sequence[TrainingActivity], pool: ClientPool, cfg: RegimeConfig,
               hyper: Optional[HyperParams] = None) -> RunResult:
    return RUNNERS[cfg.mode](activities, pool, cfg, hyper)


def check_invariants(result: RunResult) -> List[str]:
    """Violated run invariants, as messages; empty when the run is sound."""
    problems = []
    ledger = result.ledger
    phase_sum = math.fsum(p.total for p in ledger.phases.values())
    if ledger.total != phase_sum:
        problems.append(f"Ledger total {ledger.total!r} differs from phase sum {phase_sum!r}")
    if any(p.grad_work < 0 or p.forward_work < 0 for p in ledger.phases.values()):
        problems.append("Ledger has negative work")

    if result.mode != STANDALONE:
        covered = [a for model in result.models for a in model.activity_ids]
        if sorted(covered) != sorted(result.activity_ids):
            problems.append(f"Models cover {sorted(covered)}, expected each of {sorted(result.activity_ids)} once")
    for partition in result.partitions:
        if sorted(partition.activity_ids) != sorted(result.activity_ids):
            problems.append(f"Partition {partition} does not cover all activities")
    if not all(math.isfinite(v) for v in result.evaluation.per_activity.values()):
        problems.append("Non-finite test loss")
    return problems
