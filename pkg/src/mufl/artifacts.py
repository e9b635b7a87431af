"""CSV and text artifacts for runs, plus aggregation over repeated seeds."""

import csv
import logging
import math
from pathlib import Path
from typing import Dict, Iterable, List, Sequence

import numpy as np

from .orchestrator import RunResult
from .partition import format_partition

logger = logging.getLogger(__name__)

ROUNDS_FILE = "rounds.csv"
LEDGER_FILE = "ledger.csv"
SUMMARY_FILE = "summary.csv"
PARTITION_FILE = "partition.txt"
RANKING_FILE = "ranking.csv"
AFFINITY_FILE = "affinity.csv"
INCOMPLETE_MARKER = "INCOMPLETE"

TOTAL_LOSS = "total_loss"
LEDGER_TOTAL = "ledger_total"
EVAL_WORK = "eval_work"
AGGREGATIONS = "aggregations"


def fmt(value) -> str:
    """Floats as their shortest exact repr so rereading gives the same number."""
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def _write_rows(path: Path, fieldnames: Sequence[str], rows: Iterable[Dict]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=list(fieldnames), lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: fmt(v) for k, v in row.items()})


def read_rows(path: Path) -> List[Dict[str, str]]:
    with open(path, newline="", encoding="utf-8") as f:
        return list(csv.DictReader(f))


def affinity_file(round_number: int) -> str:
    return f"affinity_round_{round_number}.csv"


def write_rounds(run_dir: Path, result: RunResult) -> None:
    ids = result.activity_ids
    fields = ["round", "phase", "group", "selected", "lr", "ledger_delta"]
    fields += [f"train_{a}" for a in ids] + [f"val_{a}" for a in ids]
    rows = []
    for rec in result.records:
        row = {
            "round": rec.round_index,
            "phase": rec.phase,
            "group": rec.group,
            "selected": " ".join(str(c) for c in rec.selected),
            "lr": rec.lr,
            "ledger_delta": rec.ledger_delta,
        }
        for a in ids:
            row[f"train_{a}"] = rec.train_loss.get(a, "")
            row[f"val_{a}"] = rec.val_loss.get(a, "")
        rows.append(row)
    _write_rows(run_dir / ROUNDS_FILE, fields, rows)


def _write_matrix(path: Path, values: np.ndarray, ids: Sequence[str]) -> None:
    rows = [{"source": a, **{b: values[i, j] for j, b in enumerate(ids)}} for i, a in enumerate(ids)]
    _write_rows(path, ["source", *ids], rows)


def read_matrix(path: Path) -> np.ndarray:
    rows = read_rows(path)
    ids = [r["source"] for r in rows]
    return np.array([[float(r[b]) for b in ids] for r in rows])


def write_affinities(run_dir: Path, result: RunResult) -> None:
    ids = result.activity_ids
    for round_number, values in sorted(result.affinity_rounds.items()):
        _write_matrix(run_dir / affinity_file(round_number), values, ids)
    if result.affinity is not None:
        _write_matrix(run_dir / AFFINITY_FILE, result.affinity.values, ids)


def write_partition(run_dir: Path, result: RunResult) -> None:
    lines = [format_partition(p, result.tags) for p in result.partitions]
    (run_dir / PARTITION_FILE).write_text("".join(f"{line}\n" for line in lines), encoding="utf-8")


def read_partitions(run_dir: Path) -> List[str]:
    return (run_dir / PARTITION_FILE).read_text(encoding="utf-8").split()


def write_ledger(run_dir: Path, result: RunResult) -> None:
    _write_rows(run_dir / LEDGER_FILE, ["phase", "grad_work", "forward_work", "total"],
                result.ledger.rows())


def run_summary(result: RunResult) -> Dict[str, float]:
    """Final metrics of one run, keyed by metric name."""
    summary = {f"loss_{a}": result.evaluation.per_activity[a] for a in result.activity_ids}
    summary[TOTAL_LOSS] = result.evaluation.total
    summary[LEDGER_TOTAL] = result.ledger.total
    summary[EVAL_WORK] = result.ledger.eval_work
    summary[AGGREGATIONS] = float(result.ledger.aggregations)
    return summary


def write_summary(run_dir: Path, result: RunResult) -> Dict[str, float]:
    summary = run_summary(result)
    _write_rows(run_dir / SUMMARY_FILE, ["metric", "value"],
                ({"metric": k, "value": v} for k, v in summary.items()))
    return summary


def read_summary(run_dir: Path) -> Dict[str, float]:
    return {row["metric"]: float(row["value"]) for row in read_rows(run_dir / SUMMARY_FILE)}


def write_ranking(run_dir: Path, result: RunResult) -> None:
    _write_rows(run_dir / RANKING_FILE, ["rank", "partition", "total_loss"],
                ({"rank": i, "partition": p, "total_loss": loss}
                 for i, (p, loss) in enumerate(result.ranking, start=1)))


def write_run(run_dir: Path, result: RunResult) -> Dict[str, float]:
    """Write every artifact of one run; returns its summary metrics."""
    run_dir.mkdir(parents=True, exist_ok=True)
    write_rounds(run_dir, result)
    write_affinities(run_dir, result)
    write_ledger(run_dir, result)
    if result.partitions:
        write_partition(run_dir, result)
    if result.ranking:
        write_ranking(run_dir, result)
    summary = write_summary(run_dir, result)
    logger.debug("Wrote artifacts to %s", run_dir)
    return summary


def mark_incomplete(run_dir: Path, problems: Sequence[str]) -> None:
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / INCOMPLETE_MARKER).write_text("".join(f"{p}\n" for p in problems), encoding="utf-8")


def mean_std(values: Sequence[float]):
    """Mean and sample standard deviation; the deviation is NaN for one value."""
    if not values:
        raise ValueError("Cannot aggregate an empty sample")
    mean = math.fsum(values) / len(values)
    if len(values) < 2:
        return mean, math.nan
    return mean, math.sqrt(math.fsum((v - mean) ** 2 for v in values) / (len(values) - 1))


def aggregate(summaries: Sequence[Dict[str, float]]) -> Dict[str, float]:
    """Per-metric mean and sample std over repeats, as ``<metric>_mean`` / ``<metric>_std``."""
    if not summaries:
        raise ValueError("No run summaries to aggregate")
    out: Dict[str, float] = {"repeats": float(len(summaries))}
    for metric in summaries[0]:
        mean, std = mean_std([s[metric] for s in summaries])
        out[f"{metric}_mean"] = mean
        out[f"{metric}_std"] = std
    return out


def write_grid_summary(out_dir: Path, rows: Dict[str, Dict[str, float]]) -> None:
    """One row per grid cell with the aggregated metrics of its repeats."""
    out_dir.mkdir(parents=True, exist_ok=True)
    if not rows:
        return
    metrics = list(next(iter(rows.values())))
    _write_rows(out_dir / SUMMARY_FILE, ["cell", *metrics],
                ({"cell": cell or ".", **values} for cell, values in rows.items()))


def read_grid_summary(out_dir: Path) -> Dict[str, Dict[str, float]]:
    return {
        row.pop("cell"): {k: float(v) for k, v in row.items()}
        for row in read_rows(out_dir / SUMMARY_FILE)
    }


def seed_dir(cell_dir: Path, seed: int) -> Path:
    return cell_dir / f"seed={seed}"


def reaggregate(cell_dir: Path) -> Dict[str, float]:
    """Aggregate again from the per-seed summaries written under ``cell_dir``."""
    run_dirs = sorted((p for p in cell_dir.glob("seed=*") if (p / SUMMARY_FILE).exists()),
                      key=lambda p: int(p.name.split("=", 1)[1]))
    return aggregate([read_summary(d) for d in run_dirs])
