"""Synthetic multi-task client population, local training and FedAvg."""

import logging
import math
import zlib
from dataclasses import dataclass, field
from typing import Dict, List, NamedTuple, Optional, Sequence, Union

import numpy as np

from .affinity import AffinityAccumulator, AffinityProbe, accumulate
from .nn_core import (
    CLASSIFICATION,
    LOSS_KINDS,
    REGRESSION,
    HyperParams,
    MultiTaskModel,
    ShapeError,
    backward,
    forward_loss,
    sgd_step,
)

logger = logging.getLogger(__name__)


def rng_stream(seed: int, *keys: Union[int, str]) -> np.random.Generator:
    """Named, replayable random stream derived from a run seed.

    String keys are folded in through CRC32 so that streams are stable across
    processes and Python versions.
    """
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF]
    for key in keys:
        entropy.append(zlib.crc32(key.encode()) if isinstance(key, str) else int(key))
    return np.random.default_rng(np.random.SeedSequence(entropy))


@dataclass
class Batch:
    """Features shared by all activities plus one target array per activity."""
    features: np.ndarray
    targets: Dict[str, np.ndarray]

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2 or self.features.shape[0] < 1:
            raise ShapeError(f"Batch features must be a non-empty matrix, got {self.features.shape}")
        for activity, t in self.targets.items():
            if np.shape(t)[0] != self.features.shape[0]:
                raise ShapeError(f"Targets for '{activity}' have {np.shape(t)[0]} rows, "
                                 f"expected {self.features.shape[0]}")

    @property
    def size(self) -> int:
        return self.features.shape[0]


@dataclass
class ClientDataset:
    """All training examples held by one client."""
    client_id: int
    features: np.ndarray
    targets: Dict[str, np.ndarray]
    batch_size: int = 10

    @property
    def n_examples(self) -> int:
        return self.features.shape[0]

    @property
    def activity_ids(self) -> List[str]:
        return list(self.targets)

    @property
    def n_batches(self) -> int:
        return math.ceil(self.n_examples / self.batch_size)

    @property
    def batches(self) -> List[Batch]:
        """Batches in storage order."""
        return self.epoch_batches(None)

    def epoch_batches(self, rng: Optional[np.random.Generator]) -> List[Batch]:
        """One epoch of batches; examples are reshuffled when a stream is given."""
        order = np.arange(self.n_examples) if rng is None else rng.permutation(self.n_examples)
        batches = []
        for start in range(0, self.n_examples, self.batch_size):
            idx = order[start:start + self.batch_size]
            batches.append(Batch(
                features=self.features[idx],
                targets={a: t[idx] for a, t in self.targets.items()},
            ))
        return batches


@dataclass
class SyntheticTaskSpec:
    """Seeded description of a clustered family of synthetic activities.

    Activities in the same cluster read out the same latent features
    ``tanh(x @ A_c)`` with slightly perturbed readouts; different clusters
    use independent latent maps. With ``shared_dim`` every activity also
    reads out a block of latent features common to all clusters.
    """
    cluster_assignment: Dict[str, int]
    input_dim: int = 8
    hidden_dim: int = 8
    heterogeneity: float = 0.5
    noise_std: float = 0.05
    seed: int = 0
    loss_kinds: Dict[str, str] = field(default_factory=dict)
    n_classes: int = 3
    readout_jitter: float = 0.1
    latent_scale: float = 2.0
    shared_dim: int = 0

    def __post_init__(self):
        if not self.cluster_assignment:
            raise ValueError("At least one activity is required")
        if self.input_dim < 1 or self.hidden_dim < 1:
            raise ShapeError(f"Degenerate dimensions: input_dim={self.input_dim}, hidden_dim={self.hidden_dim}")
        if self.shared_dim < 0:
            raise ShapeError(f"shared_dim must be non-negative, got {self.shared_dim}")
        if self.latent_scale <= 0:
            raise ValueError(f"latent_scale must be positive, got {self.latent_scale}")
        if self.noise_std < 0:
            raise ValueError(f"noise_std must be non-negative, got {self.noise_std}")
        if self.heterogeneity < 0:
            raise ValueError(f"heterogeneity must be non-negative, got {self.heterogeneity}")
        for activity in self.cluster_assignment:
            self.loss_kinds.setdefault(activity, REGRESSION)
        unknown = set(self.loss_kinds) - set(self.cluster_assignment)
        if unknown:
            raise ValueError(f"Loss kinds given for unknown activities: {sorted(unknown)}")
        for activity, kind in self.loss_kinds.items():
            if kind not in LOSS_KINDS:
                raise ValueError(f"Activity '{activity}' has unknown loss kind '{kind}'")
        if self.n_classes < 2:
            raise ValueError(f"n_classes must be at least 2, got {self.n_classes}")

    @property
    def n_activities(self) -> int:
        return len(self.cluster_assignment)

    @property
    def activity_ids(self) -> List[str]:
        return list(self.cluster_assignment)

    def output_dim(self, activity: str) -> int:
        return self.n_classes if self.loss_kinds[activity] == CLASSIFICATION else 1

    def to_record(self) -> Dict:
        """Plain record that regenerates the same population."""
        return {
            "cluster_assignment": dict(self.cluster_assignment),
            "input_dim": self.input_dim,
            "hidden_dim": self.hidden_dim,
            "heterogeneity": self.heterogeneity,
            "noise_std": self.noise_std,
            "seed": self.seed,
            "loss_kinds": dict(self.loss_kinds),
            "n_classes": self.n_classes,
            "readout_jitter": self.readout_jitter,
            "latent_scale": self.latent_scale,
            "shared_dim": self.shared_dim,
        }

    @classmethod
    def from_record(cls, record: Dict) -> "SyntheticTaskSpec":
        return cls(**record)


def clustered_spec(clusters: Sequence[Sequence[str]], **kwargs) -> SyntheticTaskSpec:
    """Spec whose ground-truth clusters are given as lists of activity ids."""
    assignment = {a: c for c, members in enumerate(clusters) for a in members}
    if len(assignment) != sum(len(members) for members in clusters):
        raise ValueError("An activity appears in more than one cluster")
    return SyntheticTaskSpec(cluster_assignment=assignment, **kwargs)


@dataclass
class TaskGenerator:
    """Latent maps and readouts that produce targets from features."""
    spec: SyntheticTaskSpec
    latent_maps: Dict[int, np.ndarray]
    readouts: Dict[str, np.ndarray]
    shared_map: Optional[np.ndarray] = None
    shared_readouts: Dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def from_spec(cls, spec: SyntheticTaskSpec) -> "TaskGenerator":
        rng = rng_stream(spec.seed, "population", "generators")
        map_std = spec.latent_scale / np.sqrt(spec.input_dim)
        latent_maps, cluster_readouts, readouts = {}, {}, {}
        for cluster in sorted(set(spec.cluster_assignment.values())):
            latent_maps[cluster] = rng.normal(0.0, map_std, size=(spec.input_dim, spec.hidden_dim))
        scale = 1.0 / np.sqrt(spec.hidden_dim)
        for activity in spec.activity_ids:
            cluster = spec.cluster_assignment[activity]
            out = spec.output_dim(activity)
            key = (cluster, out)
            if key not in cluster_readouts:
                cluster_readouts[key] = rng.normal(0.0, scale, size=(spec.hidden_dim, out))
            jitter = rng.normal(0.0, scale, size=(spec.hidden_dim, out))
            readouts[activity] = cluster_readouts[key] + spec.readout_jitter * jitter

        if spec.shared_dim == 0:
            return cls(spec, latent_maps, readouts)

        # own stream so the cluster draws match shared_dim=0
        shared_rng = rng_stream(spec.seed, "population", "shared")
        shared_map = shared_rng.normal(0.0, map_std, size=(spec.input_dim, spec.shared_dim))
        shared_scale = 1.0 / np.sqrt(spec.shared_dim)
        common, shared_readouts = {}, {}
        for activity in spec.activity_ids:
            out = spec.output_dim(activity)
            if out not in common:
                common[out] = shared_rng.normal(0.0, shared_scale, size=(spec.shared_dim, out))
            jitter = shared_rng.normal(0.0, shared_scale, size=(spec.shared_dim, out))
            shared_readouts[activity] = common[out] + spec.readout_jitter * jitter
        return cls(spec, latent_maps, readouts, shared_map, shared_readouts)

    def latent(self, features: np.ndarray, cluster: int) -> np.ndarray:
        return np.tanh(features @ self.latent_maps[cluster])

    def clean_outputs(self, features: np.ndarray, activity: str) -> np.ndarray:
        cluster = self.spec.cluster_assignment[activity]
        outputs = self.latent(features, cluster) @ self.readouts[activity]
        if self.shared_map is not None:
            outputs = outputs + np.tanh(features @ self.shared_map) @ self.shared_readouts[activity]
        return outputs

    def targets(self, features: np.ndarray, activity: str, rng: np.random.Generator) -> np.ndarray:
        outputs = self.clean_outputs(features, activity)
        if self.spec.noise_std > 0:
            outputs = outputs + rng.normal(0.0, self.spec.noise_std, size=outputs.shape)
        if self.spec.loss_kinds[activity] == CLASSIFICATION:
            return outputs.argmax(axis=1)
        return outputs


@dataclass
class ClientPool:
    """Training clients plus held-out test batches for every activity."""
    clients: List[ClientDataset]
    test_batches: List[Batch]
    spec: SyntheticTaskSpec
    generator: TaskGenerator

    def __post_init__(self):
        ids = [c.client_id for c in self.clients]
        if len(set(ids)) != len(ids):
            raise ValueError("Client ids must be unique")
        self._by_id = {c.client_id: c for c in self.clients}

    @property
    def client_ids(self) -> List[int]:
        return [c.client_id for c in self.clients]

    @property
    def test_sets(self) -> Dict[str, List[Batch]]:
        return {activity: self.test_batches for activity in self.spec.activity_ids}

    def client(self, client_id: int) -> ClientDataset:
        return self._by_id[client_id]

    def __len__(self) -> int:
        return len(self.clients)


def generate_population(spec: SyntheticTaskSpec, N: int = 32, examples_per_client: int = 120,
                        batch_size: int = 10, test_examples: int = 400,
                        size_jitter: float = 0.0) -> ClientPool:
    """Build N non-IID clients and a test set, fully determined by ``spec.seed``."""
    if N < 1:
        raise ValueError(f"N must be at least 1, got {N}")
    if examples_per_client < 1 or test_examples < 1:
        raise ValueError("Clients and test set need at least one example")
    if not 0 <= size_jitter < 1:
        raise ValueError(f"size_jitter must be in [0, 1), got {size_jitter}")

    generator = TaskGenerator.from_spec(spec)
    shifts = []
    clients = []
    for k in range(N):
        rng = rng_stream(spec.seed, "population", "client", k)
        shift = spec.heterogeneity * rng.normal(size=spec.input_dim)
        size = examples_per_client
        if size_jitter > 0:
            low = max(1, int(round(examples_per_client * (1 - size_jitter))))
            high = int(round(examples_per_client * (1 + size_jitter)))
            size = int(rng.integers(low, high + 1))
        features = rng.normal(size=(size, spec.input_dim)) + shift
        targets = {a: generator.targets(features, a, rng) for a in spec.activity_ids}
        clients.append(ClientDataset(k, features, targets, batch_size))
        shifts.append(shift)

    rng = rng_stream(spec.seed, "population", "test")
    owners = rng.integers(0, N, size=test_examples)
    features = rng.normal(size=(test_examples, spec.input_dim)) + np.asarray(shifts)[owners]
    targets = {a: generator.targets(features, a, rng) for a in spec.activity_ids}
    test_batches = []
    for start in range(0, test_examples, 100):
        sl = slice(start, start + 100)
        test_batches.append(Batch(features[sl], {a: t[sl] for a, t in targets.items()}))

    logger.debug("Generated %d clients, %d activities, %d test examples",
                 N, spec.n_activities, test_examples)
    return ClientPool(clients, test_batches, spec, generator)


def sample_clients(pool: ClientPool, K: int, rng: np.random.Generator) -> List[int]:
    """K distinct client ids, uniformly without replacement."""
    if K < 1 or K > len(pool):
        raise ValueError(f"K must be in [1, {len(pool)}], got {K}")
    picked = rng.choice(len(pool), size=K, replace=False)
    return [pool.client_ids[i] for i in picked]


def aggregation_weights(sizes: Sequence[int]) -> List[float]:
    """FedAvg weights p_k proportional to dataset sizes."""
    total = sum(sizes)
    if total <= 0:
        raise ValueError("Selected clients hold no examples")
    return [n / total for n in sizes]


class LocalUpdate(NamedTuple):
    """What a client returns after local training."""
    model: MultiTaskModel
    accumulator: Optional[AffinityAccumulator]
    train_losses: Dict[str, float]
    examples: int
    probe_examples: int


def local_train(model: MultiTaskModel, dataset: ClientDataset, E: int, lr: float,
                hyper: HyperParams, probe: Optional[AffinityProbe] = None,
                rng: Optional[np.random.Generator] = None) -> LocalUpdate:
    """E epochs of minibatch SGD on a copy of ``model``.

    Within each batch every activity takes its own backward and optimizer
    step, in the model's activity order. With a probe, affinities are
    measured on every ``probe.frequency``-th batch before it is trained on.
    """
    if E < 0:
        raise ValueError(f"E must be non-negative, got {E}")
    missing = [a for a in model.activity_ids if a not in dataset.targets]
    if missing:
        raise KeyError(f"Client {dataset.client_id} has no targets for activities {missing}")

    trained = model.clone()
    accumulator = None
    if probe is not None and len(trained.activity_ids) >= 2:
        accumulator = AffinityAccumulator.empty(trained.activity_ids)

    loss_sums = {a: 0.0 for a in trained.activity_ids}
    examples = 0
    probe_examples = 0
    for _ in range(E):
        for b, batch in enumerate(dataset.epoch_batches(rng), start=1):
            if accumulator is not None and b % probe.frequency == 0:
                accumulate(accumulator, trained, batch, lr)
                probe_examples += batch.size
            for activity in trained.activity_ids:
                loss, cache = forward_loss(trained, activity, batch)
                sgd_step(trained, backward(trained, activity, cache), lr, hyper)
                loss_sums[activity] += loss * batch.size
            examples += batch.size

    train_losses = {a: (s / examples if examples else float("nan")) for a, s in loss_sums.items()}
    return LocalUpdate(trained, accumulator, train_losses, examples, probe_examples)


def fedavg(models: Sequence[MultiTaskModel], weights: Sequence[float],
           client_ids: Optional[Sequence[int]] = None) -> MultiTaskModel:
    """Weighted parameter mean; optimizer buffers of the result are zero.

    With ``client_ids`` the models are summed in client-id order so the
    result does not depend on the order clients finished in.
    """
    if not models:
        raise ValueError("fedavg needs at least one model")
    if len(weights) != len(models):
        raise ValueError(f"Got {len(weights)} weights for {len(models)} models")
    if abs(math.fsum(weights) - 1.0) > 1e-12:
        raise ValueError(f"Aggregation weights sum to {math.fsum(weights)!r}, not 1")
    for other in models[1:]:
        if not models[0].compatible_with(other):
            raise ShapeError("Models are not aggregation-compatible")

    order = list(range(len(models)))
    if client_ids is not None:
        order.sort(key=lambda i: client_ids[i])
    block_maps = [models[i].blocks() for i in order]
    ordered_weights = [weights[i] for i in order]

    result = models[order[0]].clone()
    for name, block in result.blocks().items():
        stack = [blocks[name].values for blocks in block_maps]
        if all(np.array_equal(v, stack[0]) for v in stack[1:]):
            block.values = stack[0].copy()
        else:
            total = np.zeros_like(stack[0])
            for w, v in zip(ordered_weights, stack):
                total += w * v
            block.values = total
    result.reset_buffers()
    return result


@dataclass
class EvalReport:
    """Per-activity mean test losses and their sum."""
    per_activity: Dict[str, float]
    total: float
    examples: int


def evaluate(models: Union[MultiTaskModel, Sequence[MultiTaskModel]],
             test_sets: Dict[str, List[Batch]]) -> EvalReport:
    """Mean loss of every activity over its full test set."""
    model_list = [models] if isinstance(models, MultiTaskModel) else list(models)
    owners: Dict[str, MultiTaskModel] = {}
    for model in model_list:
        for activity in model.activity_ids:
            if activity in owners:
                raise ValueError(f"Activity '{activity}' is served by more than one model")
            owners[activity] = model

    per_activity = {}
    examples = 0
    for activity, batches in test_sets.items():
        if activity not in owners:
            raise ValueError(f"No model serves activity '{activity}'")
        merged = Batch(
            features=np.concatenate([b.features for b in batches]),
            targets={activity: np.concatenate([b.targets[activity] for b in batches])},
        )
        loss, _ = forward_loss(owners[activity], activity, merged)
        per_activity[activity] = loss
        examples += merged.size
    return EvalReport(per_activity, sum(per_activity.values()), examples)
