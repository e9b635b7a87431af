"""Deterministic compute-cost ledger used in place of measured energy.

One grad unit is one scalar-parameter gradient evaluation for one example;
forward work counts half a unit per multiply-accumulate. A consolidated
multi-activity step is charged as one trunk pass plus one pass per head.
All charges are half-integers, so float sums stay exact.
"""

import math
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Sequence

from .nn_core import DenseLayer, MultiTaskModel


@dataclass(frozen=True)
class WorkUnits:
    """Per-example work of one operation."""
    grad: float = 0.0
    forward: float = 0.0

    @property
    def total(self) -> float:
        return self.grad + self.forward

    def __add__(self, other: "WorkUnits") -> "WorkUnits":
        return WorkUnits(self.grad + other.grad, self.forward + other.forward)

    def scaled(self, factor: float) -> "WorkUnits":
        return WorkUnits(self.grad * factor, self.forward * factor)


def _params(layers: Iterable[DenseLayer]) -> int:
    return sum(layer.param_count for layer in layers)


def _macs(layers: Iterable[DenseLayer]) -> int:
    return sum(layer.mac_count for layer in layers)


def step_units(model: MultiTaskModel, activities: Sequence[str] = None) -> WorkUnits:
    """One training example through the trunk and every listed head."""
    activities = model.activity_ids if activities is None else activities
    heads = [layer for a in activities for layer in model.heads[a]]
    return WorkUnits(
        grad=float(_params(model.trunk) + _params(heads)),
        forward=0.5 * (_macs(model.trunk) + _macs(heads)),
    )


def probe_units(model: MultiTaskModel) -> WorkUnits:
    """One example of one affinity time-step over all ordered pairs.

    Per activity: a forward and backward pass on its own loss, then a trunk
    pass at the lookahead parameters feeding every other head.
    """
    ids = model.activity_ids
    trunk_macs = _macs(model.trunk)
    head_macs = {a: _macs(model.heads[a]) for a in ids}
    grad = sum(_params(model.trunk) + _params(model.heads[a]) for a in ids)
    forward = 0.0
    for a in ids:
        forward += 0.5 * (trunk_macs + head_macs[a])
        forward += 0.5 * (trunk_macs + sum(head_macs[b] for b in ids if b != a))
    return WorkUnits(float(grad), forward)


def eval_units(model: MultiTaskModel) -> WorkUnits:
    """One test example evaluated on every activity of the model."""
    forward = sum(0.5 * (_macs(model.trunk) + _macs(model.heads[a])) for a in model.activity_ids)
    return WorkUnits(0.0, forward)


@dataclass
class PhaseCost:
    grad_work: float = 0.0
    forward_work: float = 0.0

    @property
    def total(self) -> float:
        return self.grad_work + self.forward_work


@dataclass
class CostLedger:
    """Cumulative work per phase, plus separately tracked evaluation work."""
    phases: Dict[str, PhaseCost] = field(default_factory=dict)
    eval_work: float = 0.0
    aggregations: int = 0

    def charge(self, phase: str, units: WorkUnits, examples: int) -> float:
        """Charge ``examples`` examples of ``units``; returns the added total."""
        if examples < 0:
            raise ValueError(f"Cannot charge a negative example count ({examples})")
        cost = self.phases.setdefault(phase, PhaseCost())
        cost.grad_work += units.grad * examples
        cost.forward_work += units.forward * examples
        return units.total * examples

    def charge_eval(self, units: WorkUnits, examples: int) -> float:
        added = units.total * examples
        self.eval_work += added
        return added

    @property
    def grad_work(self) -> float:
        return math.fsum(p.grad_work for p in self.phases.values())

    @property
    def forward_work(self) -> float:
        return math.fsum(p.forward_work for p in self.phases.values())

    @property
    def total(self) -> float:
        return self.grad_work + self.forward_work

    def phase_total(self, prefix: str) -> float:
        """Summed work of every phase whose name starts with ``prefix``."""
        return math.fsum(p.total for name, p in self.phases.items() if name.startswith(prefix))

    def rows(self) -> List[Dict[str, object]]:
        rows = [
            {"phase": name, "grad_work": p.grad_work, "forward_work": p.forward_work, "total": p.total}
            for name, p in self.phases.items()
        ]
        rows.append({"phase": "TOTAL", "grad_work": self.grad_work,
                     "forward_work": self.forward_work, "total": self.total})
        rows.append({"phase": "EVAL", "grad_work": 0.0,
                     "forward_work": self.eval_work, "total": self.eval_work})
        return rows
