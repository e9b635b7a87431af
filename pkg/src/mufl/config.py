"""Run specifications: JSON parsing, validation, sweeps and environment defaults."""

import itertools
import json
import os
import re
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

from dotenv import load_dotenv

from .affinity import AffinityProbe
from .federation import ClientPool, SyntheticTaskSpec, generate_population
from .nn_core import CLASSIFICATION, REGRESSION, HyperParams
from .orchestrator import HIERARCHICAL, MUFL, RegimeConfig, TrainingActivity

DEFAULT_OUTPUT_DIR = "runs"
DEFAULT_LOG_LEVEL = "INFO"
DEFAULT_ACTIVITIES = ["s", "d", "n", "k", "t"]

TOP_LEVEL_KEYS = ("regime", "task", "hyper", "output_dir", "repeat")
REGIME_KEYS = ("mode", "R", "R0", "R1", "R2", "m", "K", "E", "seed", "lr_schedule",
               "finalize_policy", "solver", "split_init", "partition", "validate",
               "trunk_widths", "probe")
PROBE_KEYS = ("frequency", "active_rounds", "enabled")
TASK_KEYS = ("activities", "clusters", "classification", "n_classes", "input_dim",
             "hidden_dim", "heterogeneity", "noise_std", "readout_jitter", "latent_scale",
             "shared_dim", "seed", "n_clients", "examples_per_client", "test_examples", "size_jitter")
HYPER_KEYS = ("eta0", "momentum", "weight_decay", "batch_size")

# Regime fields that take lists by themselves and so cannot be swept.
LIST_FIELDS = ("trunk_widths",)

INT_FIELDS = {"R", "R0", "R1", "R2", "m", "K", "E", "seed", "frequency", "n_classes",
              "input_dim", "hidden_dim", "shared_dim", "n_clients", "examples_per_client",
              "test_examples", "batch_size", "repeat"}
FLOAT_FIELDS = {"eta0", "momentum", "weight_decay", "heterogeneity", "noise_std",
                "readout_jitter", "latent_scale", "size_jitter"}
BOOL_FIELDS = {"validate", "enabled"}
STR_FIELDS = {"mode", "lr_schedule", "finalize_policy", "solver", "split_init",
              "partition", "output_dir"}


class SpecError(ValueError):
    """Raised for malformed or invalid run specs; names the key and line when known."""

    def __init__(self, message: str, key: Optional[str] = None, line: Optional[int] = None):
        self.key = key
        self.line = line
        where = []
        if key:
            where.append(f"key '{key}'")
        if line:
            where.append(f"line {line}")
        super().__init__(f"{message} ({', '.join(where)})" if where else message)


def env_output_dir() -> Path:
    load_dotenv()
    return Path(os.getenv("MUFL_OUTPUT_DIR", DEFAULT_OUTPUT_DIR))


def env_log_level() -> str:
    load_dotenv()
    return os.getenv("MUFL_LOG_LEVEL", DEFAULT_LOG_LEVEL).upper()


@dataclass
class PopulationConfig:
    """How many clients exist and how much data each one holds."""
    n_clients: int = 32
    examples_per_client: int = 120
    test_examples: int = 400
    size_jitter: float = 0.0


@dataclass
class RunSpec:
    """Everything needed to execute a run or a grid of runs.

    ``sweep`` maps dotted keys (``regime.R0``, ``hyper.eta0``) to the values a
    grid expands over; ``regime`` and ``hyper`` hold the first grid cell.
    """
    regime: RegimeConfig
    task: SyntheticTaskSpec
    hyper: HyperParams
    population: PopulationConfig
    activities: List[TrainingActivity]
    output_dir: Path
    repeat: int = 1
    sweep: Dict[str, List[Any]] = field(default_factory=dict)
    task_seed: Optional[int] = None

    def __post_init__(self):
        if self.repeat < 1:
            raise SpecError(f"repeat must be at least 1, got {self.repeat}", key="repeat")

    def with_seed(self, seed: int) -> "RunSpec":
        """Same spec with the run seed replaced."""
        return replace(self, regime=replace(self.regime, seed=seed))

    def cells(self) -> List[Tuple[str, "RunSpec"]]:
        """Grid cells as ``(name, spec)``; a spec without sweeps is its own single cell."""
        if not self.sweep:
            return [("", self)]
        keys = list(self.sweep)
        cells = []
        for values in itertools.product(*(self.sweep[k] for k in keys)):
            assignment = dict(zip(keys, values))
            regime_kw = {k.split(".", 1)[1]: v for k, v in assignment.items() if k.startswith("regime.")}
            hyper_kw = {k.split(".", 1)[1]: v for k, v in assignment.items() if k.startswith("hyper.")}
            try:
                regime = replace(self.regime, **regime_kw)
                hyper = replace(self.hyper, total_rounds=regime.R, **hyper_kw)
            except ValueError as e:
                raise SpecError(str(e), key=",".join(keys)) from None
            name = "_".join(f"{k.split('.', 1)[1]}={v}" for k, v in assignment.items())
            cells.append((name, replace(self, regime=regime, hyper=hyper, sweep={})))
        return cells

    def repeat_seeds(self) -> List[int]:
        return [self.regime.seed + i for i in range(self.repeat)]

    def task_for(self, seed: int) -> SyntheticTaskSpec:
        """Task spec for one repeat; the population follows the run seed unless pinned."""
        return replace(self.task, seed=seed if self.task_seed is None else self.task_seed,
                       loss_kinds=dict(self.task.loss_kinds))

    def build_pool(self, seed: int) -> ClientPool:
        return generate_population(
            self.task_for(seed),
            N=self.population.n_clients,
            examples_per_client=self.population.examples_per_client,
            batch_size=self.hyper.batch_size,
            test_examples=self.population.test_examples,
            size_jitter=self.population.size_jitter,
        )


def _line_of(text: str, key: str) -> Optional[int]:
    match = re.search(rf'"{re.escape(key)}"\s*:', text)
    return text.count("\n", 0, match.start()) + 1 if match else None


class _Reader:
    """Walks one parsed JSON document, checking keys and value types."""

    def __init__(self, text: str):
        self.text = text

    def error(self, message: str, key: str) -> SpecError:
        return SpecError(message, key=key, line=_line_of(self.text, key.rsplit(".", 1)[-1]))

    def section(self, data: Any, path: str, allowed: Tuple[str, ...]) -> Dict[str, Any]:
        if data is None:
            return {}
        if not isinstance(data, dict):
            raise self.error("Expected an object", path)
        for key in data:
            if key not in allowed:
                raise self.error(f"Unknown key '{key}'", f"{path}.{key}" if path else key)
        return data

    def scalar(self, name: str, value: Any, path: str) -> Any:
        if name in BOOL_FIELDS:
            ok = isinstance(value, bool)
        elif name in INT_FIELDS:
            ok = isinstance(value, int) and not isinstance(value, bool)
        elif name in FLOAT_FIELDS:
            ok = isinstance(value, (int, float)) and not isinstance(value, bool)
            value = float(value) if ok else value
        elif name in STR_FIELDS:
            ok = isinstance(value, str)
        else:
            ok = True
        if not ok:
            raise self.error(f"Invalid value {value!r}", path)
        return value


def _probe_from(reader: _Reader, data: Any, path: str) -> Optional[AffinityProbe]:
    probe = reader.section(data, path, PROBE_KEYS)
    if not reader.scalar("enabled", probe.get("enabled", True), f"{path}.enabled"):
        return None
    kwargs = {}
    if "frequency" in probe:
        kwargs["frequency"] = reader.scalar("frequency", probe["frequency"], f"{path}.frequency")
    if "active_rounds" in probe:
        rounds = probe["active_rounds"]
        if isinstance(rounds, dict):
            span = reader.section(rounds, f"{path}.active_rounds", ("first", "last"))
            try:
                rounds = range(int(span["first"]), int(span["last"]) + 1)
            except (KeyError, TypeError, ValueError):
                raise reader.error("Range needs integer 'first' and 'last'", f"{path}.active_rounds") from None
        if not isinstance(rounds, (list, range)) or not all(isinstance(r, int) for r in rounds):
            raise reader.error("Expected a list of round numbers", f"{path}.active_rounds")
        kwargs["active_rounds"] = frozenset(rounds)
    try:
        return AffinityProbe(**kwargs)
    except ValueError as e:
        raise reader.error(str(e), path) from None


def _split_sweeps(reader: _Reader, data: Dict[str, Any], section: str,
                  sweep: Dict[str, List[Any]]) -> Dict[str, Any]:
    """Scalars of a section; list values are recorded as sweeps and their first entry is used."""
    scalars = {}
    for key, value in data.items():
        path = f"{section}.{key}"
        if key == "probe" or key in LIST_FIELDS:
            continue
        if isinstance(value, list):
            if not value:
                raise reader.error("Sweep needs at least one value", path)
            values = [reader.scalar(key, v, path) for v in value]
            sweep[path] = values
            scalars[key] = values[0]
        else:
            scalars[key] = reader.scalar(key, value, path)
    return scalars


def _task_from(reader: _Reader, data: Dict[str, Any]):
    tags = data.get("activities", DEFAULT_ACTIVITIES)
    if not isinstance(tags, list) or not tags or not all(isinstance(t, str) and len(t) == 1 for t in tags):
        raise reader.error("Activities must be a nonempty list of single characters", "task.activities")
    if len(set(tags)) != len(tags):
        raise reader.error(f"Duplicate activity ids in {tags}", "task.activities")

    half = (len(tags) + 1) // 2
    clusters = data.get("clusters", [tags[:half], tags[half:]] if len(tags) > 1 else [tags])
    if not isinstance(clusters, list) or not all(isinstance(c, (list, str)) for c in clusters):
        raise reader.error("Clusters must be a list of activity lists", "task.clusters")
    clusters = [list(c) for c in clusters if c]
    flat = [a for c in clusters for a in c]
    if sorted(flat) != sorted(tags):
        raise reader.error(f"Clusters {clusters} must cover activities {tags} exactly once", "task.clusters")

    classification = data.get("classification", [])
    if not isinstance(classification, list) or not set(classification) <= set(tags):
        raise reader.error("Classification must list known activities", "task.classification")
    loss_kinds = {a: CLASSIFICATION if a in classification else REGRESSION for a in tags}

    kwargs = {}
    for key in ("n_classes", "input_dim", "hidden_dim", "heterogeneity", "noise_std", "readout_jitter",
                "latent_scale", "shared_dim"):
        if key in data:
            kwargs[key] = reader.scalar(key, data[key], f"task.{key}")
    task_seed = reader.scalar("seed", data["seed"], "task.seed") if "seed" in data else None

    population = {}
    for key in ("n_clients", "examples_per_client", "test_examples", "size_jitter"):
        if key in data:
            population[key] = reader.scalar(key, data[key], f"task.{key}")

    try:
        cluster_of = {a: c for c, members in enumerate(clusters) for a in members}
        task = SyntheticTaskSpec(
            cluster_assignment={a: cluster_of[a] for a in tags},
            loss_kinds=loss_kinds,
            seed=task_seed or 0,
            **kwargs,
        )
    except ValueError as e:
        raise reader.error(str(e), "task") from None
    activities = [TrainingActivity(a, loss_kinds[a], task.output_dim(a), a) for a in tags]
    return task, activities, PopulationConfig(**population), task_seed


def build_spec(data: Dict[str, Any], text: str = "") -> RunSpec:
    """Validated RunSpec from an already decoded document."""
    reader = _Reader(text)
    top = reader.section(data, "", TOP_LEVEL_KEYS)
    regime_data = reader.section(top.get("regime"), "regime", REGIME_KEYS)
    hyper_data = reader.section(top.get("hyper"), "hyper", HYPER_KEYS)
    task_data = reader.section(top.get("task"), "task", TASK_KEYS)

    sweep: Dict[str, List[Any]] = {}
    regime_kw = _split_sweeps(reader, regime_data, "regime", sweep)
    hyper_kw = _split_sweeps(reader, hyper_data, "hyper", sweep)

    if "trunk_widths" in regime_data:
        widths = regime_data["trunk_widths"]
        if not isinstance(widths, list) or not all(isinstance(w, int) and not isinstance(w, bool) for w in widths):
            raise reader.error("Expected a list of layer widths", "regime.trunk_widths")
        regime_kw["trunk_widths"] = tuple(widths)
    if "probe" in regime_data:
        regime_kw["probe"] = _probe_from(reader, regime_data["probe"], "regime.probe")
        if regime_kw["probe"] is None and regime_kw.get("mode", MUFL) in (MUFL, HIERARCHICAL):
            raise reader.error("Splitting regimes need an enabled probe", "regime.probe.enabled")

    task, activities, population, task_seed = _task_from(reader, task_data)

    try:
        regime = RegimeConfig(**regime_kw)
    except (ValueError, TypeError) as e:
        raise SpecError(str(e), key="regime") from None
    try:
        hyper = HyperParams(total_rounds=regime.R, **hyper_kw)
    except (ValueError, TypeError) as e:
        raise SpecError(str(e), key="hyper") from None

    output_dir = top.get("output_dir")
    if output_dir is not None:
        output_dir = Path(reader.scalar("output_dir", output_dir, "output_dir"))
    repeat = reader.scalar("repeat", top.get("repeat", 1), "repeat")

    spec = RunSpec(
        regime=regime,
        task=task,
        hyper=hyper,
        population=population,
        activities=activities,
        output_dir=output_dir or env_output_dir(),
        repeat=repeat,
        sweep=sweep,
        task_seed=task_seed,
    )
    if regime.K > population.n_clients:
        raise SpecError(f"K={regime.K} exceeds n_clients={population.n_clients}", key="regime.K")
    spec.cells()
    return spec


def parse_spec(path: Path) -> RunSpec:
    """Read and validate a JSON run spec.

    Raises:
        FileNotFoundError: If the file does not exist
        SpecError: On malformed JSON, unknown keys or invalid values
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Spec file not found: {path}")
    text = path.read_text(encoding="utf-8")
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise SpecError(f"Malformed JSON: {e.msg} at column {e.colno}", line=e.lineno) from None
    return build_spec(data, text)
